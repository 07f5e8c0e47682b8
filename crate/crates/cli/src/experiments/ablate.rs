//! Scan-order and block-placement ablations under one training budget.

use std::fmt::Write as _;
use std::time::Instant;

use mmunet::network::{BlockConfig, BlockVariant, Model, ModelConfig};
use mmunet::scan_order::{OrderSet, PRESETS};
use mmunet::tensor::Real;
use mmunet::training::{train, Sample, TrainConfig};
use mmunet::Result;

/// One configuration of an ablation table.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: String,
    pub description: String,
    /// Figure quoted for this row in the reference results, if any.
    pub reference: String,
    pub model: ModelConfig,
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub row: AblationRow,
    pub dice_mean: Real,
    pub dice: Vec<Real>,
    pub final_loss: Real,
    pub seconds: f64,
}

const SCAN_REFERENCE: [&str; 9] = ["0.902", "0.910", "0.898", "0.908", "0.907", "0.900", "0.902", "0.909", "0.901"];

/// B1–B9: the base model with every block's order set replaced.
pub fn scan_rows(base: &ModelConfig) -> Result<Vec<AblationRow>> {
    PRESETS
        .iter()
        .zip(SCAN_REFERENCE)
        .map(|(&p, reference)| {
            let orders = OrderSet::preset(p)?;
            Ok(AblationRow {
                name: p.to_string(),
                description: orders.describe(),
                reference: reference.to_string(),
                model: base.clone().with_orders(orders),
            })
        })
        .collect()
}

/// Block placements: encoder, bottleneck and decoder variants per row.
pub fn arch_rows(base: &ModelConfig) -> Vec<AblationRow> {
    use BlockVariant::*;
    let table: [(&str, &str, [BlockVariant; 3], &str); 7] = [
        ("A1", "nnUNet-like: conv blocks everywhere", [PureConv, PureConv, PureConv], "baseline"),
        ("A2", "SwinUMamba-like: SSM blocks in encoder and bottleneck", [PureSsm, PureSsm, PureConv], "+1.9% over A1"),
        ("A3", "VM-UNet-like: SSM blocks everywhere", [PureSsm, PureSsm, PureSsm], "+1.8% over A1"),
        ("A4", "SSM blocks in bottleneck and decoder", [PureConv, PureSsm, PureSsm], "0.894"),
        ("A5", "SSM outside the residual in encoder and bottleneck", [HybridOutside, HybridOutside, PureConv], "below A6"),
        ("A6", "SSM inside the residual in encoder and bottleneck", [HybridInside, HybridInside, PureConv], "0.910"),
        ("A7", "SSM-only residual body in encoder and bottleneck", [SsmOnlyInside, SsmOnlyInside, PureConv], "-"),
    ];
    table
        .into_iter()
        .map(|(name, description, [e, b, d], reference)| {
            let mut model = base.clone();
            model.enc_block = BlockConfig::new(e, base.enc_block.orders.clone());
            model.bottleneck_block = BlockConfig::new(b, base.bottleneck_block.orders.clone());
            model.dec_block = BlockConfig::new(d, base.dec_block.orders.clone());
            AblationRow {
                name: name.into(),
                description: description.into(),
                reference: reference.into(),
                model,
            }
        })
        .collect()
}

/// Trains every row from the same seed and evaluates on `val`.
pub fn run_ablation(
    rows: Vec<AblationRow>,
    train_set: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&AblationResult),
) -> Result<Vec<AblationResult>> {
    let mut out = Vec::new();
    for row in rows {
        let start = Instant::now();
        let mut model = Model::build(row.model.clone(), cfg.seed)?;
        let log = train(&mut model, train_set, val, cfg, |_| {})?;
        let last = log.epochs.last().expect("at least one epoch");
        let r = AblationResult {
            dice_mean: last.val_dice_mean,
            dice: last.val_dice.clone(),
            final_loss: last.train_loss,
            seconds: start.elapsed().as_secs_f64(),
            row,
        };
        progress(&r);
        out.push(r);
    }
    Ok(out)
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

/// `row,description,dice_mean,dice_0..,final_loss,reference`; timings
/// are kept out so reruns compare byte for byte.
pub fn table_csv(results: &[AblationResult]) -> String {
    let classes = results.first().map_or(0, |r| r.dice.len());
    let mut s = String::from("row,description,dice_mean");
    for k in 0..classes {
        write!(s, ",dice_{k}").unwrap();
    }
    s.push_str(",final_loss,reference\n");
    for r in results {
        write!(s, "{},{},{}", r.row.name, quote(&r.row.description), r.dice_mean).unwrap();
        for d in &r.dice {
            write!(s, ",{d}").unwrap();
        }
        writeln!(s, ",{},{}", r.final_loss, quote(&r.row.reference)).unwrap();
    }
    s
}

pub fn timings_csv(results: &[AblationResult]) -> String {
    let mut s = String::from("row,seconds\n");
    for r in results {
        writeln!(s, "{},{:.3}", r.row.name, r.seconds).unwrap();
    }
    s
}
