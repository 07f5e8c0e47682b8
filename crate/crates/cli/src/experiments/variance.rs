//! Per-channel variance of block feature maps inside and outside the
//! residual connection.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use mmunet::network::Model;
use mmunet::tensor::Real;
use mmunet::training::Sample;
use mmunet::{Error, Result};

pub const VARIANCE_TAPS: [&str; 4] = ["after_conv1", "after_conv2", "inside_residual", "outside_residual"];

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelVariance {
    pub block: String,
    pub tap: String,
    pub channel: usize,
    pub variance: Real,
}

#[derive(Default)]
struct Moments {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

/// Variance of every channel of every requested tap, pooled over all voxels
/// of all samples.
pub fn tap_variances(model: &Model, samples: &[Sample], taps: &[&str]) -> Result<Vec<ChannelVariance>> {
    let mut acc: BTreeMap<(String, usize), Moments> = BTreeMap::new();
    for s in samples {
        let shape: Vec<usize> = [&[1], s.image.shape()].concat();
        let x = s.image.reshape(&shape)?;
        for (name, t) in model.feature_taps(&x, taps)? {
            let c = t.shape()[1];
            let vol: usize = t.shape()[2..].iter().product();
            for ch in 0..c {
                let m = acc.entry((name.clone(), ch)).or_default();
                for &v in &t.data()[ch * vol..(ch + 1) * vol] {
                    let v = v as f64;
                    m.n += 1.0;
                    m.sum += v;
                    m.sum_sq += v * v;
                }
            }
        }
    }
    if acc.is_empty() {
        return Err(Error::config(format!("no block of this model exposes any of the taps {taps:?}")));
    }
    Ok(acc
        .into_iter()
        .map(|((name, channel), m)| {
            let (block, tap) = name.rsplit_once('/').expect("tap names are block/tap");
            let mean = m.sum / m.n;
            ChannelVariance {
                block: block.to_string(),
                tap: tap.to_string(),
                channel,
                variance: (m.sum_sq / m.n - mean * mean).max(0.0) as Real,
            }
        })
        .collect())
}

/// Keeps rows of blocks that expose both `a` and `b`.
pub fn paired(rows: &[ChannelVariance], a: &str, b: &str) -> Vec<ChannelVariance> {
    let has = |block: &str, tap: &str| rows.iter().any(|r| r.block == block && r.tap == tap);
    rows.iter()
        .filter(|r| has(&r.block, a) && has(&r.block, b))
        .cloned()
        .collect()
}

pub fn median(mut v: Vec<Real>) -> Option<Real> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Median channel variance of `tap` over `rows`.
pub fn tap_median(rows: &[ChannelVariance], tap: &str) -> Option<Real> {
    median(rows.iter().filter(|r| r.tap == tap).map(|r| r.variance).collect())
}

pub fn variance_csv(rows: &[ChannelVariance]) -> String {
    let mut s = String::from("block,tap,channel,variance\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.block, r.tap, r.channel, r.variance).unwrap();
    }
    s
}

/// Histogram of `log10(variance)` per tap over `bins` equal-width bins
/// spanning all rows: `tap,bin,lo,hi,count`.
pub fn histogram_csv(rows: &[ChannelVariance], bins: usize) -> String {
    let logs: Vec<Real> = rows.iter().map(|r| r.variance.max(1e-30).log10()).collect();
    let lo = logs.iter().copied().fold(Real::INFINITY, Real::min);
    let hi = logs.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let width = if hi > lo { (hi - lo) / bins as Real } else { 1.0 };
    let mut taps: Vec<&str> = rows.iter().map(|r| r.tap.as_str()).collect();
    taps.sort_unstable();
    taps.dedup();
    let mut s = String::from("tap,bin,log10_lo,log10_hi,count\n");
    for tap in taps {
        let mut counts = vec![0usize; bins];
        for (r, l) in rows.iter().zip(&logs) {
            if r.tap == tap {
                counts[(((l - lo) / width) as usize).min(bins - 1)] += 1;
            }
        }
        for (b, c) in counts.iter().enumerate() {
            let a = lo + b as Real * width;
            writeln!(s, "{tap},{b},{a},{},{c}", a + width).unwrap();
        }
    }
    s
}

/// `tap,channels,median,mean` per tap.
pub fn summary_csv(rows: &[ChannelVariance]) -> String {
    let mut s = String::from("tap,channels,median,mean\n");
    for tap in VARIANCE_TAPS {
        let v: Vec<Real> = rows.iter().filter(|r| r.tap == tap).map(|r| r.variance).collect();
        if v.is_empty() {
            continue;
        }
        let mean = v.iter().sum::<Real>() / v.len() as Real;
        writeln!(s, "{tap},{},{},{mean}", v.len(), median(v).unwrap()).unwrap();
    }
    s
}

/// Medians of `inside_residual` and `outside_residual` over blocks that
/// expose both taps.
pub fn paired_medians(rows: &[ChannelVariance]) -> Option<(Real, Real)> {
    let p = paired(rows, "inside_residual", "outside_residual");
    Some((tap_median(&p, "inside_residual")?, tap_median(&p, "outside_residual")?))
}

/// `blocks,median_inside,median_outside,inside_lower` over paired blocks.
pub fn comparison_csv(rows: &[ChannelVariance]) -> String {
    let p = paired(rows, "inside_residual", "outside_residual");
    let mut blocks: Vec<&str> = p.iter().map(|r| r.block.as_str()).collect();
    blocks.dedup();
    let mut s = String::from("blocks,median_inside,median_outside,inside_lower\n");
    if let Some((i, o)) = paired_medians(rows) {
        writeln!(s, "{},{i},{o},{}", blocks.join(" "), i < o).unwrap();
    }
    s
}
