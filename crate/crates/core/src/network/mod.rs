//! The meta U-Net and its block variants.
//!
//! Level `l` works at `1/2ˡ` resolution with `base·2ˡ` channels. Level 0 is
//! the stem; levels `1..stages` hold a stride-2 conv unit followed by an
//! encoder block; level `stages` is the bottleneck. Each decoder level
//! upsamples with a transposed convolution, concatenates the encoder output
//! of the same level, fuses with a 1³ conv unit and applies a decoder block.

mod blocks;
mod checkpoint;

pub use blocks::{BlockConfig, BlockVariant, Conv, ConvUnit, MetaBlock, Upsample, LEAKY_SLOPE, NORM_EPS, TAP_NAMES};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};

use std::path::Path;

use crate::config::{format_extents, parse_extents, KvConfig};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore, Recorder};
use crate::scan_order::OrderSet;
use crate::ssm::DirectionWeights;
use crate::tensor::{concat_channels, ConvGeometry, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub stages: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub classes: usize,
    pub patch: [usize; 3],
    pub enc_block: BlockConfig,
    pub bottleneck_block: BlockConfig,
    pub dec_block: BlockConfig,
    pub deep_supervision: bool,
    pub ssm_state: usize,
    pub direction_weights: DirectionWeights,
}

impl Default for ModelConfig {
    /// The hybrid model: SSM inside the residual in encoder and bottleneck,
    /// plain conv blocks in the decoder.
    fn default() -> Self {
        let hybrid = BlockConfig::new(BlockVariant::HybridInside, OrderSet::preset("B2").expect("preset"));
        ModelConfig {
            stages: 3,
            base_channels: 8,
            in_channels: 1,
            classes: 3,
            patch: [32; 3],
            enc_block: hybrid.clone(),
            bottleneck_block: hybrid,
            dec_block: BlockConfig::conv(),
            deep_supervision: true,
            ssm_state: 8,
            direction_weights: DirectionWeights::PerPair,
        }
    }
}

const MODEL_KEYS: [&str; 14] = [
    "stages",
    "base_channels",
    "in_channels",
    "classes",
    "patch",
    "enc_block",
    "bottleneck_block",
    "dec_block",
    "enc_orders",
    "bottleneck_orders",
    "dec_orders",
    "deep_supervision",
    "ssm_state",
    "direction_weights",
];

impl ModelConfig {
    /// Uses `variant` in encoder and bottleneck and plain conv in the decoder.
    pub fn with_encoder_variant(mut self, variant: BlockVariant) -> Self {
        self.enc_block.variant = variant;
        self.bottleneck_block.variant = variant;
        self
    }

    pub fn with_orders(mut self, orders: OrderSet) -> Self {
        self.enc_block.orders = orders.clone();
        self.bottleneck_block.orders = orders.clone();
        self.dec_block.orders = orders;
        self
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages < 2 {
            return Err(Error::config(format!("stages must be at least 2, got {}", self.stages)));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.classes < 2 || self.ssm_state == 0 {
            return Err(Error::config("channels, classes (≥ 2) and state size must be positive"));
        }
        if self.deep_supervision && self.stages < 3 {
            return Err(Error::config("deep supervision needs at least 3 stages"));
        }
        let f = 1 << self.stages;
        if self.patch.iter().any(|&e| e == 0 || e % f != 0) {
            return Err(Error::config(format!(
                "patch {:?} not divisible by 2^{} = {f}",
                self.patch, self.stages
            )));
        }
        let at = |l: usize| self.patch.map(|e| e >> l);
        let uses_ssm = |b: &BlockConfig| b.variant.ssm_units() > 0;
        let mut checks = Vec::new();
        if uses_ssm(&self.enc_block) {
            checks.extend((1..self.stages).map(|l| (&self.enc_block, at(l))));
        }
        if uses_ssm(&self.bottleneck_block) {
            checks.push((&self.bottleneck_block, at(self.stages)));
        }
        if uses_ssm(&self.dec_block) {
            checks.extend((0..self.stages).map(|l| (&self.dec_block, at(l))));
        }
        for (b, dims) in checks {
            for o in &b.orders.orders {
                o.realize(dims)?;
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("stages", self.stages);
        kv.set("base_channels", self.base_channels);
        kv.set("in_channels", self.in_channels);
        kv.set("classes", self.classes);
        kv.set("patch", format_extents(self.patch));
        kv.set("enc_block", self.enc_block.variant);
        kv.set("bottleneck_block", self.bottleneck_block.variant);
        kv.set("dec_block", self.dec_block.variant);
        kv.set("enc_orders", &self.enc_block.orders);
        kv.set("bottleneck_orders", &self.bottleneck_block.orders);
        kv.set("dec_orders", &self.dec_block.orders);
        kv.set("deep_supervision", self.deep_supervision);
        kv.set("ssm_state", self.ssm_state);
        kv.set("direction_weights", self.direction_weights);
        kv
    }

    /// Reads model keys from `kv`, filling unspecified ones from the
    /// default. An `orders` key sets all three order sets at once.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let shared = kv.raw("orders").map(OrderSet::parse).transpose()?;
        let block = |vkey: &str, okey: &str, def: &BlockConfig| -> Result<BlockConfig> {
            let variant = kv.get_or(vkey, def.variant)?;
            let orders = match kv.raw(okey) {
                Some(s) => OrderSet::parse(s)?,
                None => shared.clone().unwrap_or_else(|| def.orders.clone()),
            };
            Ok(BlockConfig::new(variant, orders))
        };
        let cfg = ModelConfig {
            stages: kv.get_or("stages", d.stages)?,
            base_channels: kv.get_or("base_channels", d.base_channels)?,
            in_channels: kv.get_or("in_channels", d.in_channels)?,
            classes: kv.get_or("classes", d.classes)?,
            patch: kv.raw("patch").map(parse_extents).transpose()?.unwrap_or(d.patch),
            enc_block: block("enc_block", "enc_orders", &d.enc_block)?,
            bottleneck_block: block("bottleneck_block", "bottleneck_orders", &d.bottleneck_block)?,
            dec_block: block("dec_block", "dec_orders", &d.dec_block)?,
            deep_supervision: kv.get_or("deep_supervision", d.deep_supervision)?,
            ssm_state: kv.get_or("ssm_state", d.ssm_state)?,
            direction_weights: kv.get_or("direction_weights", d.direction_weights)?,
        };
        Ok(cfg)
    }

    /// Keys understood by [`ModelConfig::from_kv`].
    pub fn keys() -> Vec<&'static str> {
        let mut k = MODEL_KEYS.to_vec();
        k.push("orders");
        k
    }
}

/// Logits at full resolution plus deep-supervision logits at `1/2` and `1/4`
/// resolution (highest resolution first).
pub struct ModelOutput<'t> {
    pub logits: Var<'t>,
    pub aux: Vec<Var<'t>>,
}

struct DecoderLevel {
    up: Upsample,
    fuse: ConvUnit,
    block: MetaBlock,
}

/// The assembled network together with its parameters.
pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    stem: ConvUnit,
    /// `downs[i]` enters level `i + 1`.
    downs: Vec<ConvUnit>,
    /// Encoder blocks of levels `1..stages`.
    enc: Vec<MetaBlock>,
    bottleneck: MetaBlock,
    /// Decoder levels ordered from `stages − 1` down to 0.
    dec: Vec<DecoderLevel>,
    heads: Vec<Conv>,
    last: Conv,
    ssm_identity: bool,
}

impl Model {
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut s = ParamStore::new(seed);
        let (st, w) = (cfg.ssm_state, cfg.direction_weights);
        let stem = ConvUnit::new(&mut s, "stem", cfg.in_channels, cfg.channels(0), ConvGeometry::same(3));
        let mut downs = Vec::new();
        let mut enc = Vec::new();
        for l in 1..=cfg.stages {
            let (cin, cout) = (cfg.channels(l - 1), cfg.channels(l));
            downs.push(ConvUnit::new(&mut s, &format!("down{l}"), cin, cout, ConvGeometry::strided(3, 2, 1)));
            if l < cfg.stages {
                enc.push(MetaBlock::new(&mut s, &format!("enc{l}"), cout, &cfg.enc_block, st, w));
            }
        }
        let bottleneck = MetaBlock::new(&mut s, "bottleneck", cfg.channels(cfg.stages), &cfg.bottleneck_block, st, w);
        let mut dec = Vec::new();
        for l in (0..cfg.stages).rev() {
            let c = cfg.channels(l);
            dec.push(DecoderLevel {
                up: Upsample::new(&mut s, &format!("up{l}"), cfg.channels(l + 1), c),
                fuse: ConvUnit::new(&mut s, &format!("fuse{l}"), 2 * c, c, ConvGeometry::same(1)),
                block: MetaBlock::new(&mut s, &format!("dec{l}"), c, &cfg.dec_block, st, w),
            });
        }
        let heads = if cfg.deep_supervision {
            (1..=2)
                .map(|l| Conv::pointwise(&mut s, &format!("head{l}"), cfg.channels(l), cfg.classes))
                .collect()
        } else {
            Vec::new()
        };
        let last = Conv::pointwise(&mut s, "final", cfg.channels(0), cfg.classes);
        Ok(Model {
            cfg,
            store: s,
            stem,
            downs,
            enc,
            bottleneck,
            dec,
            heads,
            last,
            ssm_identity: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Replaces every SSM unit with the identity map.
    pub fn replace_ssm_with_identity(&mut self) {
        self.ssm_identity = true;
    }

    /// All meta-blocks in forward order.
    pub fn blocks(&self) -> impl Iterator<Item = &MetaBlock> {
        self.enc
            .iter()
            .chain(std::iter::once(&self.bottleneck))
            .chain(self.dec.iter().map(|d| &d.block))
    }

    /// The classifier producing full-resolution logits.
    pub fn final_layer(&self) -> &Conv {
        &self.last
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let f = 1usize << self.cfg.stages;
        if shape.len() != 5 || shape[1] != self.cfg.in_channels || shape[2..].iter().any(|e| e % f != 0) {
            return Err(Error::shape(
                "model",
                format!(
                    "input {shape:?}: expected [B, {}, D, H, W] with extents divisible by {f}",
                    self.cfg.in_channels
                ),
            ));
        }
        Ok(())
    }

    pub fn forward<'t>(&self, ctx: &Bound<'t>, x: Var<'t>) -> Result<ModelOutput<'t>> {
        self.check_input(&x.shape())?;
        let id = self.ssm_identity;
        let mut skips = vec![self.stem.forward(ctx, x)?];
        for (l, down) in self.downs.iter().enumerate() {
            let h = down.forward(ctx, *skips.last().expect("stem"))?;
            let h = match self.enc.get(l) {
                Some(b) => b.forward(ctx, h, id)?,
                None => self.bottleneck.forward(ctx, h, id)?,
            };
            skips.push(h);
        }
        let mut h = skips.pop().expect("bottleneck");
        let mut aux = Vec::new();
        for d in &self.dec {
            let skip = skips.pop().expect("one skip per level");
            let up = d.up.forward(ctx, h)?;
            let cat = concat_channels(&[up, skip])?;
            h = d.block.forward(ctx, d.fuse.forward(ctx, cat)?, id)?;
            let level = skips.len();
            if level >= 1 && level <= self.heads.len() {
                aux.push(self.heads[level - 1].forward(ctx, h)?);
            }
        }
        aux.reverse();
        Ok(ModelOutput {
            logits: self.last.forward(ctx, h)?,
            aux,
        })
    }

    /// Full-resolution logits without gradient tracking.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let ctx = self.store.bind_frozen(&tape);
        let out = self.forward(&ctx, tape.constant(x.clone()))?;
        Ok((*out.logits.value()).clone())
    }

    /// Detached intermediate tensors named `{block}/{tap}` for every tap
    /// in `points` that the blocks expose.
    pub fn feature_taps(&self, x: &Tensor, points: &[&str]) -> Result<Vec<(String, Tensor)>> {
        if let Some(bad) = points.iter().find(|p| !TAP_NAMES.contains(p)) {
            return Err(Error::config(format!(
                "unknown tap {bad:?}; expected one of {TAP_NAMES:?}"
            )));
        }
        let rec = Recorder::new();
        let tape = Tape::new();
        let ctx = self.store.bind_with(&tape, false, Some(&rec));
        self.forward(&ctx, tape.constant(x.clone()))?;
        Ok(rec
            .take_taps()
            .into_iter()
            .filter(|(n, _)| points.iter().any(|p| n.rsplit('/').next() == Some(*p)))
            .collect())
    }

    /// Per-step scan data of every SSM direction, first batch element only.
    pub fn ssm_traces(&self, x: &Tensor) -> Result<Vec<crate::ssm::SsmTrace>> {
        let rec = Recorder::new();
        let tape = Tape::new();
        let ctx = self.store.bind_with(&tape, false, Some(&rec));
        self.forward(&ctx, tape.constant(x.clone()))?;
        Ok(rec.take_traces())
    }

    /// Writes `path` (weights) and `path.cfg` (model configuration).
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.store, path)?;
        std::fs::write(cfg_path(path), self.cfg.to_kv().to_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let kv = KvConfig::load(&cfg_path(path))?;
        kv.check_keys(&ModelConfig::keys())?;
        let mut m = Model::build(ModelConfig::from_kv(&kv)?, 0)?;
        load_checkpoint(m.params_mut(), path)?;
        Ok(m)
    }
}

pub fn cfg_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    s.into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{softmax_channels_raw, Real};

    fn small(variant: BlockVariant) -> ModelConfig {
        ModelConfig {
            base_channels: 2,
            patch: [16; 3],
            ssm_state: 2,
            ..ModelConfig::default()
        }
        .with_encoder_variant(variant)
    }

    fn input(cfg: &ModelConfig) -> Tensor {
        let [d, h, w] = cfg.patch;
        Tensor::from_fn(&[1, cfg.in_channels, d, h, w], |i| ((i * 29 % 17) as Real - 8.0) / 8.0)
    }

    #[test]
    fn shapes_and_heads() {
        let cfg = small(BlockVariant::HybridInside);
        let m = Model::build(cfg.clone(), 0).unwrap();
        let tape = Tape::new();
        let ctx = m.params().bind_frozen(&tape);
        let out = m.forward(&ctx, tape.constant(input(&cfg))).unwrap();
        assert_eq!(out.logits.shape(), vec![1, 3, 16, 16, 16]);
        let aux: Vec<Vec<usize>> = out.aux.iter().map(|a| a.shape()).collect();
        assert_eq!(aux, vec![vec![1, 3, 8, 8, 8], vec![1, 3, 4, 4, 4]]);
        let cfg = ModelConfig {
            deep_supervision: false,
            ..cfg
        };
        let m = Model::build(cfg.clone(), 0).unwrap();
        let tape = Tape::new();
        let ctx = m.params().bind_frozen(&tape);
        assert!(m.forward(&ctx, tape.constant(input(&cfg))).unwrap().aux.is_empty());
    }

    #[test]
    fn build_rejects_bad_configs() {
        let bad_patch = ModelConfig {
            patch: [12, 16, 16],
            ..ModelConfig::default()
        };
        assert!(matches!(Model::build(bad_patch, 0), Err(Error::Config(_))));
        let shallow = ModelConfig {
            stages: 1,
            ..ModelConfig::default()
        };
        assert!(Model::build(shallow, 0).is_err());
        let kv = KvConfig::parse("enc_block = m7").unwrap();
        assert!(matches!(ModelConfig::from_kv(&kv), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_input_extent_is_shape_error() {
        let m = Model::build(small(BlockVariant::PureConv), 0).unwrap();
        let x = Tensor::zeros(&[1, 1, 16, 16, 12]);
        assert!(matches!(m.predict(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_input_zero_classifier_is_uniform() {
        let mut m = Model::build(small(BlockVariant::HybridInside), 3).unwrap();
        let w = m.final_layer().weight;
        m.params_mut().get_mut(w).data_mut().fill(0.0);
        let p = softmax_channels_raw(&m.predict(&Tensor::zeros(&[1, 1, 16, 16, 16])).unwrap());
        assert!(p.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn hybrid_without_ssm_matches_conv_model() {
        let mut hybrid = Model::build(small(BlockVariant::HybridInside), 4).unwrap();
        let conv = Model::build(small(BlockVariant::PureConv), 4).unwrap();
        hybrid.replace_ssm_with_identity();
        let x = input(hybrid.config());
        assert_eq!(hybrid.predict(&x).unwrap(), conv.predict(&x).unwrap());
        assert!(hybrid.num_params() >= conv.num_params());
    }

    fn probe<'t>(tape: &'t Tape, v: Var<'t>) -> Var<'t> {
        let p = Tensor::from_fn(&v.shape(), |i| ((i * 7 % 5) as Real - 2.0) * 0.3);
        crate::tensor::sum(crate::tensor::mul(v, tape.constant(p)).unwrap())
    }

    #[test]
    fn every_parameter_receives_gradient() {
        for v in BlockVariant::ALL {
            let mut cfg = small(v);
            cfg.dec_block.variant = v;
            let m = Model::build(cfg.clone(), 6).unwrap();
            let tape = Tape::new();
            let ctx = m.params().bind(&tape);
            let out = m.forward(&ctx, tape.constant(input(&cfg))).unwrap();
            let mut terms = vec![probe(&tape, out.logits)];
            terms.extend(out.aux.iter().map(|a| probe(&tape, *a)));
            let loss = crate::tensor::add_n(&terms).unwrap();
            let g = tape.backward(loss).unwrap();
            for id in m.params().ids() {
                let gr = g.get(ctx.p(id)).unwrap_or(&[]);
                assert!(
                    gr.iter().any(|x| *x != 0.0),
                    "{v}: no gradient for {}",
                    m.params().name(id)
                );
            }
        }
    }

    #[test]
    fn taps_cover_blocks_and_reject_unknown() {
        let cfg = small(BlockVariant::HybridInside);
        let m = Model::build(cfg.clone(), 0).unwrap();
        let taps = m.feature_taps(&input(&cfg), &["inside_residual", "outside_residual"]).unwrap();
        let names: Vec<&str> = taps.iter().map(|(n, _)| n.as_str()).collect();
        assert!(names.contains(&"enc1/inside_residual"));
        assert!(names.contains(&"bottleneck/outside_residual"));
        assert!(names.contains(&"dec0/outside_residual"));
        assert!(!names.contains(&"dec0/inside_residual"));
        assert!(matches!(m.feature_taps(&input(&cfg), &["middle"]), Err(Error::Config(_))));
    }

    #[test]
    fn config_round_trips_through_kv() {
        let cfg = ModelConfig::default().with_orders(OrderSet::preset("B8").unwrap());
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        let custom = OrderSet::parse("DHW,flip(HWD)").unwrap();
        let cfg = ModelConfig::default().with_orders(custom);
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn parameter_count_is_deterministic() {
        let a = Model::build(ModelConfig::default(), 1).unwrap();
        let b = Model::build(ModelConfig::default(), 2).unwrap();
        assert_eq!(a.num_params(), b.num_params());
        assert_ne!(a.params(), b.params());
    }
}
