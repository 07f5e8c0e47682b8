use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scan_order::OrderSet;
use crate::ssm::{DirectionWeights, MetaSsm};
use crate::tensor::{add, conv3d, conv_transpose3d, instance_norm, leaky_relu, ConvGeometry, Real, Var};

pub const LEAKY_SLOPE: Real = 0.01;
pub const NORM_EPS: Real = 1e-5;

/// Intermediate tensors a block can expose.
pub const TAP_NAMES: [&str; 4] = ["inside_residual", "outside_residual", "after_conv1", "after_conv2"];

/// `conv3d → instance_norm → leaky ReLU`. The convolution has no bias since
/// the norm removes it.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub weight: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub geometry: ConvGeometry,
}

impl ConvUnit {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, geometry: ConvGeometry) -> Self {
        let fan_in = cin * geometry.kernel.iter().product::<usize>();
        let std = (2.0 / fan_in as Real).sqrt();
        let [kd, kh, kw] = geometry.kernel;
        ConvUnit {
            weight: store.normal(&format!("{name}.w"), &[cout, cin, kd, kh, kw], std),
            gamma: store.constant(&format!("{name}.g"), &[cout], 1.0),
            beta: store.constant(&format!("{name}.b"), &[cout], 0.0),
            geometry,
        }
    }

    pub fn forward<'t>(&self, ctx: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = conv3d(x, ctx.p(self.weight), None, self.geometry)?;
        let y = instance_norm(y, ctx.p(self.gamma), ctx.p(self.beta), NORM_EPS)?;
        Ok(leaky_relu(y, LEAKY_SLOPE))
    }

    pub fn params(&self) -> [ParamId; 3] {
        [self.weight, self.gamma, self.beta]
    }
}

/// Plain convolution with bias (heads and the final classifier).
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geometry: ConvGeometry,
}

impl Conv {
    pub fn pointwise(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Self {
        let bound = 1.0 / (cin as Real).sqrt();
        Conv {
            weight: store.uniform(&format!("{name}.w"), &[cout, cin, 1, 1, 1], bound),
            bias: store.constant(&format!("{name}.b"), &[cout], 0.0),
            geometry: ConvGeometry::same(1),
        }
    }

    pub fn forward<'t>(&self, ctx: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        conv3d(x, ctx.p(self.weight), Some(ctx.p(self.bias)), self.geometry)
    }
}

/// Stride-2 transposed convolution doubling every spatial extent.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Upsample {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Self {
        let std = (2.0 / (cin * 8) as Real).sqrt();
        Upsample {
            weight: store.normal(&format!("{name}.w"), &[cin, cout, 2, 2, 2], std),
            bias: store.constant(&format!("{name}.b"), &[cout], 0.0),
        }
    }

    pub fn forward<'t>(&self, ctx: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        conv_transpose3d(x, ctx.p(self.weight), Some(ctx.p(self.bias)), ConvGeometry::strided(2, 2, 0))
    }
}

/// Meta-block variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockVariant {
    /// M1: `x + conv₂(conv₁(x))`.
    PureConv,
    /// M2: `x + ssm₂(ssm₁(x))`.
    PureSsm,
    /// M3: `ssm(x + conv₂(conv₁(x)))`.
    HybridOutside,
    /// M4: `x + ssm(conv₂(conv₁(x)))`.
    HybridInside,
    /// M5: `x + ssm(x)`.
    SsmOnlyInside,
}

impl BlockVariant {
    pub const ALL: [BlockVariant; 5] = [
        BlockVariant::PureConv,
        BlockVariant::PureSsm,
        BlockVariant::HybridOutside,
        BlockVariant::HybridInside,
        BlockVariant::SsmOnlyInside,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::PureConv => "pure-conv",
            Self::PureSsm => "pure-ssm",
            Self::HybridOutside => "hybrid-outside",
            Self::HybridInside => "hybrid-inside",
            Self::SsmOnlyInside => "ssm-only-inside",
        }
    }

    pub fn has_convs(self) -> bool {
        matches!(self, Self::PureConv | Self::HybridOutside | Self::HybridInside)
    }

    pub fn ssm_units(self) -> usize {
        match self {
            Self::PureConv => 0,
            Self::PureSsm => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for BlockVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .enumerate()
            .find(|(i, v)| v.name() == s || format!("m{}", i + 1) == s)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::config(format!("unknown block variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub variant: BlockVariant,
    pub orders: OrderSet,
}

impl BlockConfig {
    pub fn new(variant: BlockVariant, orders: OrderSet) -> Self {
        BlockConfig { variant, orders }
    }

    pub fn conv() -> Self {
        Self::new(BlockVariant::PureConv, OrderSet::preset("B2").expect("preset"))
    }
}

/// One residual meta-block.
#[derive(Clone, Debug)]
pub struct MetaBlock {
    pub name: String,
    pub variant: BlockVariant,
    pub channels: usize,
    conv1: Option<ConvUnit>,
    conv2: Option<ConvUnit>,
    ssm1: Option<MetaSsm>,
    ssm2: Option<MetaSsm>,
}

impl MetaBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cfg: &BlockConfig,
        state: usize,
        weights: DirectionWeights,
    ) -> Self {
        let v = cfg.variant;
        let conv = |store: &mut ParamStore, i: usize| {
            ConvUnit::new(store, &format!("{name}.conv{i}"), channels, channels, ConvGeometry::same(3))
        };
        let conv1 = v.has_convs().then(|| conv(store, 1));
        let conv2 = v.has_convs().then(|| conv(store, 2));
        let ssm = |store: &mut ParamStore, i: usize| {
            MetaSsm::new(store, &format!("{name}.ssm{i}"), channels, state, cfg.orders.clone(), weights)
        };
        let ssm1 = (v.ssm_units() >= 1).then(|| ssm(store, 1));
        let ssm2 = (v.ssm_units() >= 2).then(|| ssm(store, 2));
        MetaBlock {
            name: name.to_string(),
            variant: v,
            channels,
            conv1,
            conv2,
            ssm1,
            ssm2,
        }
    }

    /// SSM units of the block, in application order.
    pub fn ssm_units(&self) -> impl Iterator<Item = &MetaSsm> {
        self.ssm1.iter().chain(self.ssm2.iter())
    }

    /// Parameters of the residual body (convs and SSMs).
    pub fn body_params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.conv1.iter().chain(&self.conv2).flat_map(ConvUnit::params).collect();
        ids.extend(self.ssm_units().flat_map(MetaSsm::param_ids));
        ids
    }

    fn convs<'t>(&self, ctx: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let c1 = self.conv1.as_ref().expect("conv variant").forward(ctx, x)?;
        ctx.tap(|| format!("{}/after_conv1", self.name), c1);
        let c2 = self.conv2.as_ref().expect("conv variant").forward(ctx, c1)?;
        ctx.tap(|| format!("{}/after_conv2", self.name), c2);
        Ok(c2)
    }

    fn ssm<'t>(&self, unit: &Option<MetaSsm>, ctx: &Bound<'t>, x: Var<'t>, identity: bool) -> Result<Var<'t>> {
        if identity {
            return Ok(x);
        }
        unit.as_ref().expect("ssm variant").forward(ctx, x)
    }

    /// Applies the block. With `ssm_identity`, every SSM unit is replaced by
    /// the identity map.
    pub fn forward<'t>(&self, ctx: &Bound<'t>, x: Var<'t>, ssm_identity: bool) -> Result<Var<'t>> {
        let inside = |v: Var<'t>| ctx.tap(|| format!("{}/inside_residual", self.name), v);
        let outside = |v: Var<'t>| ctx.tap(|| format!("{}/outside_residual", self.name), v);
        let out = match self.variant {
            BlockVariant::PureConv => {
                let out = add(x, self.convs(ctx, x)?)?;
                outside(out);
                out
            }
            BlockVariant::PureSsm => {
                inside(x);
                let s = self.ssm(&self.ssm1, ctx, x, ssm_identity)?;
                let s = self.ssm(&self.ssm2, ctx, s, ssm_identity)?;
                let out = add(x, s)?;
                outside(out);
                out
            }
            BlockVariant::HybridOutside => {
                let r = add(x, self.convs(ctx, x)?)?;
                outside(r);
                self.ssm(&self.ssm1, ctx, r, ssm_identity)?
            }
            BlockVariant::HybridInside => {
                let c = self.convs(ctx, x)?;
                inside(c);
                let out = add(x, self.ssm(&self.ssm1, ctx, c, ssm_identity)?)?;
                outside(out);
                out
            }
            BlockVariant::SsmOnlyInside => {
                inside(x);
                let out = add(x, self.ssm(&self.ssm1, ctx, x, ssm_identity)?)?;
                outside(out);
                out
            }
        };
        Ok(out)
    }
}
