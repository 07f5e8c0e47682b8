//! Losses, optimisers, synthetic data, metrics and the training loop.

mod data;
mod loss;
mod optim;

pub use data::{DataKind, Sample, SyntheticConfig, SyntheticDataset};
pub use loss::{deep_supervised_loss, dice_ce_loss, downsample_labels, ds_weights, DICE_SMOOTH};
pub use optim::{poly_lr, Adam, Sgd};

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::inference::{sliding_window_predict, InferConfig};
use crate::network::Model;
use crate::tensor::{Real, Tape, Tensor};

/// Per-class Dice `2|P∩G|/(|P|+|G|)`; a class absent from both is 1.
pub fn dice_score(pred: &[u8], gt: &[u8], classes: usize) -> Vec<Real> {
    assert_eq!(pred.len(), gt.len(), "prediction and ground truth differ in size");
    let mut inter = vec![0usize; classes];
    let mut p = vec![0usize; classes];
    let mut g = vec![0usize; classes];
    for (&a, &b) in pred.iter().zip(gt) {
        p[a as usize] += 1;
        g[b as usize] += 1;
        if a == b {
            inter[a as usize] += 1;
        }
    }
    (0..classes)
        .map(|c| {
            if p[c] + g[c] == 0 {
                1.0
            } else {
                2.0 * inter[c] as Real / (p[c] + g[c]) as Real
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub init_lr: Real,
    pub max_epoch: usize,
    pub iters_per_epoch: usize,
    pub momentum: Real,
    pub weight_decay: Real,
    pub batch_size: usize,
    pub seed: u64,
    pub ds_weights: Vec<Real>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            init_lr: 1e-3,
            max_epoch: 50,
            iters_per_epoch: 50,
            momentum: 0.99,
            weight_decay: 3e-5,
            batch_size: 2,
            seed: 0,
            ds_weights: ds_weights(3),
        }
    }
}

pub const TRAIN_KEYS: [&str; 8] = [
    "init_lr",
    "max_epoch",
    "iters_per_epoch",
    "momentum",
    "weight_decay",
    "batch_size",
    "seed",
    "ds_weights",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epoch == 0 || self.iters_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::config("max_epoch, iters_per_epoch and batch_size must be positive"));
        }
        if !(self.init_lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("need init_lr ≥ 0, momentum in [0, 1), weight_decay ≥ 0"));
        }
        if self.ds_weights.iter().any(|w| !(*w > 0.0)) || (self.ds_weights.iter().sum::<Real>() - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!(
                "ds_weights {:?} must be positive and sum to 1",
                self.ds_weights
            )));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("init_lr", self.init_lr);
        kv.set("max_epoch", self.max_epoch);
        kv.set("iters_per_epoch", self.iters_per_epoch);
        kv.set("momentum", self.momentum);
        kv.set("weight_decay", self.weight_decay);
        kv.set("batch_size", self.batch_size);
        kv.set("seed", self.seed);
        let w: Vec<String> = self.ds_weights.iter().map(|w| w.to_string()).collect();
        kv.set("ds_weights", w.join(","));
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let ds_weights = match kv.raw("ds_weights") {
            Some(s) => {
                let raw = s
                    .split(',')
                    .map(|p| p.trim().parse::<Real>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::config(format!("ds_weights = {s:?}: {e}")))?;
                let total: Real = raw.iter().sum();
                raw.into_iter().map(|w| w / total).collect()
            }
            None => d.ds_weights,
        };
        Ok(TrainConfig {
            init_lr: kv.get_or("init_lr", d.init_lr)?,
            max_epoch: kv.get_or("max_epoch", d.max_epoch)?,
            iters_per_epoch: kv.get_or("iters_per_epoch", d.iters_per_epoch)?,
            momentum: kv.get_or("momentum", d.momentum)?,
            weight_decay: kv.get_or("weight_decay", d.weight_decay)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            seed: kv.get_or("seed", d.seed)?,
            ds_weights,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: Real,
    pub train_loss: Real,
    pub val_dice_mean: Real,
    /// Validation Dice of every class, background included.
    pub val_dice: Vec<Real>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn final_dice(&self) -> Option<Real> {
        self.epochs.last().map(|e| e.val_dice_mean)
    }

    pub fn to_csv(&self) -> String {
        let classes = self.epochs.first().map_or(0, |e| e.val_dice.len());
        let mut s = String::from("epoch,lr,train_loss,val_dice_mean");
        for c in 0..classes {
            write!(s, ",dice_{c}").unwrap();
        }
        s.push('\n');
        for e in &self.epochs {
            write!(s, "{},{},{},{}", e.epoch, e.lr, e.train_loss, e.val_dice_mean).unwrap();
            for d in &e.val_dice {
                write!(s, ",{d}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Batched image tensor `[B, 1, D, H, W]` and concatenated labels.
pub fn make_batch(samples: &[&Sample]) -> Result<(Tensor, Vec<u8>)> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let labels = samples.iter().flat_map(|s| s.labels.iter().copied()).collect();
    Ok((Tensor::stack(&images)?, labels))
}

/// Mean per-class validation Dice and its foreground mean.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<(Vec<Real>, Real)> {
    let k = model.config().classes;
    let icfg = InferConfig {
        patch: model.config().patch,
        tta: false,
        ..InferConfig::default()
    };
    let mut acc = vec![0.0; k];
    for s in samples {
        let pred = sliding_window_predict(model, &s.image, &icfg)?;
        for (a, d) in acc.iter_mut().zip(dice_score(&pred, &s.labels, k)) {
            *a += d;
        }
    }
    let per: Vec<Real> = acc.iter().map(|a| a / samples.len().max(1) as Real).collect();
    let fg = per[1..].iter().sum::<Real>() / (k - 1) as Real;
    Ok((per, fg))
}

/// One optimisation step on a batch; returns the loss.
pub fn train_step(model: &mut Model, opt: &mut Sgd, x: &Tensor, labels: &[u8], cfg: &TrainConfig, lr: Real) -> Result<Real> {
    let dims = [x.shape()[2], x.shape()[3], x.shape()[4]];
    let loss_value = {
        let tape = Tape::new();
        let ctx = model.params().bind(&tape);
        let out = model.forward(&ctx, tape.constant(x.clone()))?;
        let loss = if out.aux.is_empty() {
            dice_ce_loss(out.logits, labels, DICE_SMOOTH)?
        } else {
            let mut heads = vec![out.logits];
            heads.extend(out.aux);
            deep_supervised_loss(&heads, labels, dims, &cfg.ds_weights)?
        };
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::numerical(format!("loss became {value}")));
        }
        let grads = tape.backward(loss)?;
        model.params_mut().accumulate_grads(&grads, &ctx)?;
        value
    };
    opt.step(model.params_mut(), lr)?;
    Ok(loss_value)
}

/// Runs `max_epoch × iters_per_epoch` SGD steps with batches drawn (with
/// replacement) from `train`, validating on `val` after every epoch.
///
/// On divergence the model is restored to the parameters before the failing
/// step and the numerical error is returned.
pub fn train(
    model: &mut Model,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.max_epoch {
        let lr = poly_lr(epoch, cfg.max_epoch, cfg.init_lr)?;
        let mut total = 0.0;
        for it in 0..cfg.iters_per_epoch {
            let picks: Vec<&Sample> = (0..cfg.batch_size).map(|_| &train[rng.random_range(0..train.len())]).collect();
            let (x, labels) = make_batch(&picks)?;
            let backup = model.params().clone();
            match train_step(model, &mut opt, &x, &labels, cfg, lr) {
                Ok(l) => total += l,
                Err(Error::Numerical(m)) => {
                    *model.params_mut() = backup;
                    return Err(Error::Numerical(format!("epoch {epoch}, iteration {it}: {m}")));
                }
                Err(e) => return Err(e),
            }
        }
        let (val_dice, val_dice_mean) = if val.is_empty() {
            (vec![Real::NAN; model.config().classes], Real::NAN)
        } else {
            evaluate(model, val)?
        };
        let e = EpochLog {
            epoch,
            lr,
            train_loss: total / cfg.iters_per_epoch as Real,
            val_dice_mean,
            val_dice,
        };
        on_epoch(&e);
        log.epochs.push(e);
    }
    Ok(log)
}
