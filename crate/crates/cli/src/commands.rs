//! Argument parsing and the command implementations.
//!
//! Configuration keys can come from defaults, a `--config` file, the
//! `MMU_SEED` environment variable and flags, in increasing precedence.
//! Every flag that sets a key is the key with `_` replaced by `-`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use mmunet::config::{format_extents, KvConfig};
use mmunet::inference::{sliding_window_predict, InferConfig};
use mmunet::network::{Model, ModelConfig};
use mmunet::tensor::Tensor;
use mmunet::training::{dice_score, train, SyntheticConfig, SyntheticDataset, TrainConfig, TRAIN_KEYS};
use mmunet::volume::VolumeFile;
use mmunet::{Error, Result};

use crate::dataset::{read_case, read_dataset, write_dataset};
use crate::experiments::ablate::{arch_rows, run_ablation, scan_rows, table_csv, timings_csv};
use crate::experiments::attn::{block_traces, file_stem, matrix_csv, row_max_normalised};
use crate::experiments::fit1d::{fit1d, fit1d_image, summary_csv, Direction, Fit1dConfig};
use crate::experiments::variance::{comparison_csv, histogram_csv, tap_variances, variance_csv};
use crate::manifest::{layered_config, RunDir};

macro_rules! kv_flags {
    ($(#[$doc:meta])* $name:ident { $($field:ident),* $(,)? }) => {
        $(#[$doc])*
        #[derive(Args, Clone, Debug, Default)]
        pub struct $name {
            $(
                #[arg(long, value_name = "VALUE")]
                pub $field: Option<String>,
            )*
        }

        impl $name {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            pub fn to_kv(&self) -> KvConfig {
                let mut kv = KvConfig::new();
                $(
                    if let Some(v) = &self.$field {
                        kv.set(stringify!($field), v);
                    }
                )*
                kv
            }
        }
    };
}

kv_flags!(
    /// Synthetic dataset keys.
    DataFlags { count, dims, classes, seed, kind, ellipsoids_per_class, noise }
);
kv_flags!(
    /// Model keys.
    ModelFlags {
        stages, base_channels, in_channels, classes, patch, enc_block, bottleneck_block, dec_block,
        enc_orders, bottleneck_orders, dec_orders, orders, deep_supervision, ssm_state, direction_weights,
    }
);
kv_flags!(
    /// Optimisation keys.
    TrainFlags { init_lr, max_epoch, iters_per_epoch, momentum, weight_decay, batch_size, seed, ds_weights }
);
kv_flags!(
    /// Sliding-window keys.
    InferFlags { overlap, tta, gaussian, sigma_scale }
);
kv_flags!(
    /// 1D fit keys.
    Fit1dFlags { state, width, steps, lr, dt_min, dt_max, boundary, image, seed }
);

#[derive(Parser, Debug)]
#[command(name = "mmu", version, about = "State-space segmentation lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Segment one image volume with a trained model.
    Infer(InferArgs),
    /// Fit a flattened 2D image with forward, reverse and bi-directional S4 models.
    Fit1d(Fit1dArgs),
    /// Per-channel feature variance inside and outside residual connections.
    Variance(VarianceArgs),
    /// Train the B1–B9 scan-order configurations.
    AblateScan(AblateArgs),
    /// Train the block-placement configurations.
    AblateArch(AblateArgs),
    /// Export the attention operators of one block's SSM scans.
    Attn(AttnArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: DataFlags,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Checkpoint written by `train` (its `.cfg` sidecar must sit next to it).
    #[arg(long)]
    pub model: PathBuf,
    /// Image volume.
    #[arg(long)]
    pub input: PathBuf,
    /// Optional reference labels; per-class Dice is written when given.
    #[arg(long)]
    pub label: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: InferFlags,
}

#[derive(Args, Debug)]
pub struct Fit1dArgs {
    /// Single-slice image volume (D = 1, C = 1); a seeded synthetic image
    /// is used when absent.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Comma-separated subset of forward, reverse, bi.
    #[arg(long, default_value = "forward,reverse,bi")]
    pub directions: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: Fit1dFlags,
}

#[derive(Args, Debug)]
pub struct VarianceArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Samples to pool: train, val or all.
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Comma-separated taps.
    #[arg(long, default_value = "after_conv1,after_conv2,inside_residual,outside_residual")]
    pub taps: String,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct AttnArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory holding the case.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub case: usize,
    /// Index into the model's blocks in forward order (encoder, bottleneck, decoder).
    #[arg(long)]
    pub block: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Infer(a) => infer(&a),
        Command::Fit1d(a) => cmd_fit1d(&a),
        Command::Variance(a) => variance(&a),
        Command::AblateScan(a) => ablate(&a, "ablate-scan"),
        Command::AblateArch(a) => ablate(&a, "ablate-arch"),
        Command::Attn(a) => attn(&a),
    }
}

fn known(groups: &[&[&'static str]]) -> Vec<&'static str> {
    let mut k: Vec<&'static str> = groups.iter().flat_map(|g| g.iter().copied()).collect();
    k.sort_unstable();
    k.dedup();
    k
}

fn merged(parts: &[KvConfig]) -> KvConfig {
    let mut kv = KvConfig::new();
    for p in parts {
        kv.merge(p);
    }
    kv
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let kv = layered_config(&KvConfig::new(), a.config.as_deref(), DataFlags::KEYS, &a.flags.to_kv())?;
    let cfg = SyntheticConfig::from_kv(&kv)?;
    let mut run = RunDir::create(&a.out)?;
    let t = Instant::now();
    let ds = SyntheticDataset::generate(cfg)?;
    run.time("generate", t.elapsed().as_secs_f64());
    for f in write_dataset(&a.out, &ds)? {
        run.record_file(&f)?;
    }
    eprintln!("wrote {} cases to {}", ds.samples.len(), a.out.display());
    run.finish("gen-data", &ds.config.to_kv())
}

/// Model defaults follow the dataset: its class count and, as patch, its extents.
fn model_defaults(ds: &SyntheticDataset) -> KvConfig {
    let mut kv = KvConfig::new();
    kv.set("classes", ds.config.classes);
    kv.set("patch", format_extents(ds.config.dims));
    kv
}

fn model_and_train(
    ds: &SyntheticDataset,
    file: Option<&Path>,
    model: &ModelFlags,
    tr: &TrainFlags,
    train_defaults: &TrainConfig,
) -> Result<(ModelConfig, TrainConfig, KvConfig)> {
    let keys = known(&[ModelFlags::KEYS, &TRAIN_KEYS]);
    let defaults = merged(&[model_defaults(ds), train_defaults.to_kv()]);
    let flags = merged(&[model.to_kv(), tr.to_kv()]);
    let kv = layered_config(&defaults, file, &keys, &flags)?;
    let mcfg = ModelConfig::from_kv(&kv)?;
    mcfg.validate()?;
    let tcfg = TrainConfig::from_kv(&kv)?;
    tcfg.validate()?;
    let resolved = merged(&[mcfg.to_kv(), tcfg.to_kv()]);
    Ok((mcfg, tcfg, resolved))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let ds = read_dataset(&a.data)?;
    let (mcfg, tcfg, resolved) = model_and_train(&ds, a.config.as_deref(), &a.model, &a.train, &TrainConfig::default())?;
    let mut run = RunDir::create(&a.out)?;
    let mut model = Model::build(mcfg, tcfg.seed)?;
    let t = Instant::now();
    let log = train(&mut model, ds.train(), ds.val(), &tcfg, |e| {
        eprintln!(
            "epoch {:>3}  lr {:.3e}  loss {:.4}  val dice {:.4}",
            e.epoch, e.lr, e.train_loss, e.val_dice_mean
        )
    })?;
    run.time("train", t.elapsed().as_secs_f64());
    model.save(&run.path("model.mmuw"))?;
    run.record_file("model.mmuw")?;
    run.record_file("model.mmuw.cfg")?;
    run.write("train_log.csv", log.to_csv())?;
    run.finish("train", &resolved)
}

pub const INFER_KEYS: [&str; 4] = ["overlap", "tta", "gaussian", "sigma_scale"];

pub fn infer_config(kv: &KvConfig, patch: [usize; 3]) -> Result<InferConfig> {
    let d = InferConfig::default();
    let cfg = InferConfig {
        patch,
        overlap: kv.get_or("overlap", d.overlap)?,
        tta: kv.get_or("tta", d.tta)?,
        gaussian: kv.get_or("gaussian", d.gaussian)?,
        sigma_scale: kv.get_or("sigma_scale", d.sigma_scale)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn infer(a: &InferArgs) -> Result<()> {
    let model = Model::load(&a.model)?;
    let kv = layered_config(&KvConfig::new(), a.config.as_deref(), &INFER_KEYS, &a.flags.to_kv())?;
    let cfg = infer_config(&kv, model.config().patch)?;
    let input = VolumeFile::read(&a.input)?;
    let image = input.to_image()?;
    let mut run = RunDir::create(&a.out)?;
    let t = Instant::now();
    let labels = sliding_window_predict(&model, &image, &cfg)?;
    run.time("predict", t.elapsed().as_secs_f64());
    let out = VolumeFile::from_labels(&labels, input.spatial())?;
    run.write("prediction.mmuv", out.encode())?;
    if let Some(p) = &a.label {
        let gt = VolumeFile::read(p)?;
        if gt.spatial() != input.spatial() {
            return Err(Error::shape("infer", "label extents differ from the image"));
        }
        let d = dice_score(&labels, gt.labels()?, model.config().classes);
        let mut csv = String::from("class,dice\n");
        for (k, v) in d.iter().enumerate() {
            csv.push_str(&format!("{k},{v}\n"));
        }
        run.write("dice.csv", csv)?;
    }
    let mut resolved = kv;
    resolved.set("patch", format_extents(cfg.patch));
    resolved.set("overlap", cfg.overlap);
    resolved.set("tta", cfg.tta);
    resolved.set("gaussian", cfg.gaussian);
    resolved.set("sigma_scale", cfg.sigma_scale);
    run.finish("infer", &resolved)
}

fn parse_directions(s: &str) -> Result<Vec<Direction>> {
    let v = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse())
        .collect::<Result<Vec<Direction>>>()?;
    if v.is_empty() {
        return Err(Error::config("no fit1d direction given"));
    }
    Ok(v)
}

fn read_slice(path: &Path) -> Result<Tensor> {
    let v = VolumeFile::read(path)?;
    let [d, h, w] = v.spatial();
    if d != 1 || v.dims[3] != 1 {
        return Err(Error::config(format!(
            "fit1d needs a single-slice single-channel image, got D={d}, C={}",
            v.dims[3]
        )));
    }
    v.to_image()?.reshape(&[h, w])
}

fn cmd_fit1d(a: &Fit1dArgs) -> Result<()> {
    let kv = layered_config(&KvConfig::new(), a.config.as_deref(), Fit1dFlags::KEYS, &a.flags.to_kv())?;
    let mut cfg = Fit1dConfig::from_kv(&kv)?;
    let dirs = parse_directions(&a.directions)?;
    let image = match &a.input {
        Some(p) => {
            let img = read_slice(p)?;
            cfg.image = [img.shape()[0], img.shape()[1]];
            img
        }
        None => fit1d_image(cfg.seed, cfg.image),
    };
    cfg.validate()?;
    let mut run = RunDir::create(&a.out)?;
    let mut results = Vec::new();
    for d in dirs {
        let t = Instant::now();
        let r = fit1d(&image, d, &cfg)?;
        run.time(d.name(), t.elapsed().as_secs_f64());
        eprintln!(
            "{:<8} boundary {:.4}  interior {:.4}  loss {:.4}",
            d.name(),
            r.boundary_error,
            r.interior_error,
            r.final_loss
        );
        run.write(&format!("fit1d_{}.csv", d.name()), r.positions_csv(cfg.image[1]))?;
        results.push(r);
    }
    run.write("summary.csv", summary_csv(&results))?;
    let mut resolved = cfg.to_kv();
    resolved.set("directions", &a.directions);
    if let Some(p) = &a.input {
        resolved.set("input", p.display());
    }
    run.finish("fit1d", &resolved)
}

fn variance(a: &VarianceArgs) -> Result<()> {
    let model = Model::load(&a.model)?;
    let ds = read_dataset(&a.data)?;
    let samples = match a.split.as_str() {
        "train" => ds.train(),
        "val" => ds.val(),
        "all" => &ds.samples[..],
        s => return Err(Error::config(format!("unknown split {s:?}; expected train, val or all"))),
    };
    let taps: Vec<&str> = a.taps.split(',').map(str::trim).filter(|t| !t.is_empty()).collect();
    if a.bins == 0 {
        return Err(Error::config("bins must be positive"));
    }
    let mut run = RunDir::create(&a.out)?;
    let t = Instant::now();
    let rows = tap_variances(&model, samples, &taps)?;
    run.time("forward", t.elapsed().as_secs_f64());
    run.write("variance.csv", variance_csv(&rows))?;
    run.write("histogram.csv", histogram_csv(&rows, a.bins))?;
    run.write("summary.csv", crate::experiments::variance::summary_csv(&rows))?;
    let cmp = comparison_csv(&rows);
    eprint!("{cmp}");
    run.write("comparison.csv", cmp)?;
    let mut kv = KvConfig::new();
    kv.set("model", a.model.display());
    kv.set("data", a.data.display());
    kv.set("split", &a.split);
    kv.set("taps", taps.join(","));
    kv.set("bins", a.bins);
    run.finish("variance", &kv)
}

/// Budget used by the ablation commands unless overridden.
pub fn ablation_budget() -> TrainConfig {
    TrainConfig {
        max_epoch: 4,
        iters_per_epoch: 25,
        ..TrainConfig::default()
    }
}

fn ablate(a: &AblateArgs, command: &str) -> Result<()> {
    let ds = read_dataset(&a.data)?;
    let (base, tcfg, resolved) = model_and_train(&ds, a.config.as_deref(), &a.model, &a.train, &ablation_budget())?;
    let rows = if command == "ablate-scan" { scan_rows(&base)? } else { arch_rows(&base) };
    for r in &rows {
        r.model.validate()?;
    }
    let mut run = RunDir::create(&a.out)?;
    let results = run_ablation(rows, ds.train(), ds.val(), &tcfg, |r| {
        eprintln!("{:<3} dice {:.4}  ({:.1} s)  {}", r.row.name, r.dice_mean, r.seconds, r.row.description)
    })?;
    for r in &results {
        run.time(&r.row.name, r.seconds);
    }
    run.write("table.csv", table_csv(&results))?;
    std::fs::write(run.path("timings.csv"), timings_csv(&results))?;
    run.finish(command, &resolved)
}

fn attn(a: &AttnArgs) -> Result<()> {
    let model = Model::load(&a.model)?;
    let s = read_case(&a.data, a.case)?;
    let x = s.image.reshape(&[&[1], s.image.shape()].concat())?;
    let (block, traces) = block_traces(&model, &x, a.block)?;
    let mut run = RunDir::create(&a.out)?;
    let mut index = String::from("trace,channel,len,raw_file,normalised_file\n");
    for t in &traces {
        let stem = file_stem(&t.label);
        for ch in 0..t.channels {
            let m = t.attention_matrix(ch);
            let raw = format!("{stem}_ch{ch:03}_raw.csv");
            let norm = format!("{stem}_ch{ch:03}_norm.csv");
            run.write(&raw, matrix_csv(&m))?;
            run.write(&norm, matrix_csv(&row_max_normalised(&m)))?;
            index.push_str(&format!("{},{ch},{},{raw},{norm}\n", t.label, t.len));
        }
    }
    run.write("index.csv", index)?;
    eprintln!("block {block}: {} scans", traces.len());
    let mut kv = KvConfig::new();
    kv.set("model", a.model.display());
    kv.set("data", a.data.display());
    kv.set("case", a.case);
    kv.set("block", a.block);
    run.finish("attn", &kv)
}
