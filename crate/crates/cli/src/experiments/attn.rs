//! Attention operators of the SSM scans inside one block.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use mmunet::network::Model;
use mmunet::ssm::SsmTrace;
use mmunet::tensor::{Real, Tensor};
use mmunet::{Error, Result};

/// Traces of every scan direction of block `index` (forward order of
/// [`Model::blocks`]) for a single `[1, C, D, H, W]` input.
pub fn block_traces(model: &Model, x: &Tensor, index: usize) -> Result<(String, Vec<SsmTrace>)> {
    let blocks: Vec<_> = model.blocks().collect();
    let block = blocks
        .get(index)
        .ok_or_else(|| Error::config(format!("block index {index} out of range (model has {})", blocks.len())))?;
    if block.ssm_units().next().is_none() {
        return Err(Error::config(format!("block {index} ({}) has no SSM unit", block.name)));
    }
    let prefix = format!("{}.", block.name);
    let traces = model
        .ssm_traces(x)?
        .into_iter()
        .filter(|t| t.label.starts_with(&prefix))
        .collect();
    Ok((block.name.clone(), traces))
}

/// Each row divided by its largest absolute entry; zero rows stay zero.
pub fn row_max_normalised(m: &DMatrix<Real>) -> DMatrix<Real> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let peak = row.iter().fold(0.0 as Real, |a, v| a.max(v.abs()));
        if peak > 0.0 {
            row /= peak;
        }
    }
    out
}

pub fn matrix_csv(m: &DMatrix<Real>) -> String {
    let mut s = String::new();
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if c > 0 {
                s.push(',');
            }
            write!(s, "{}", m[(r, c)]).unwrap();
        }
        s.push('\n');
    }
    s
}

/// File-name-safe form of a trace label.
pub fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}
