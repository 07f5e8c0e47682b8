use std::rc::Rc;

use super::selective::SelectiveProjection;
use crate::error::{Error, Result};
use crate::params::{Bound, Linear, ParamId, ParamStore};
use crate::scan_order::{OrderSet, ScanOrder};
use crate::tensor::{add_n, instance_norm, mul, permute_last, reshape, scale, silu, Var};

/// How direction branches share selective-scan parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DirectionWeights {
    /// An order and its flip share one projection.
    #[default]
    PerPair,
    /// Every order has its own projection.
    Separate,
}

impl std::str::FromStr for DirectionWeights {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pair" | "per-pair" | "tied" => Ok(Self::PerPair),
            "separate" | "untied" => Ok(Self::Separate),
            _ => Err(Error::config(format!("unknown direction weighting {s:?}"))),
        }
    }
}

impl std::fmt::Display for DirectionWeights {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PerPair => "tied",
            Self::Separate => "separate",
        })
    }
}

/// Multi-direction selective-scan block on `[B, C, D, H, W]` volumes.
///
/// Instance norm, then an input projection (SiLU) and a gate branch. The
/// projected volume is flattened along each order of the set, scanned,
/// unflattened, and the direction outputs are averaged, gated by `silu(gate)`
/// and projected back.
#[derive(Clone, Debug)]
pub struct MetaSsm {
    pub channels: usize,
    pub orders: OrderSet,
    norm_gamma: ParamId,
    norm_beta: ParamId,
    input: Linear,
    gate: Linear,
    output: Linear,
    branches: Vec<SelectiveProjection>,
    /// Index into `branches` for every order.
    branch_of: Vec<usize>,
    name: String,
}

impl MetaSsm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        state: usize,
        orders: OrderSet,
        weights: DirectionWeights,
    ) -> Self {
        let norm_gamma = store.constant(&format!("{name}.norm.g"), &[channels], 1.0);
        let norm_beta = store.constant(&format!("{name}.norm.b"), &[channels], 0.0);
        let input = Linear::new(store, &format!("{name}.in"), channels, channels, true);
        let gate = Linear::new(store, &format!("{name}.gate"), channels, channels, true);
        let output = Linear::new(store, &format!("{name}.out"), channels, channels, true);
        let mut keys: Vec<ScanOrder> = Vec::new();
        let mut branch_of = Vec::with_capacity(orders.orders.len());
        for o in &orders.orders {
            let shared = match weights {
                DirectionWeights::PerPair => {
                    let base = ScanOrder { flipped: false, ..*o };
                    keys.iter().position(|k| *k == base).ok_or(base)
                }
                DirectionWeights::Separate => Err(*o),
            };
            branch_of.push(shared.unwrap_or_else(|key| {
                keys.push(key);
                keys.len() - 1
            }));
        }
        let branches = (0..keys.len())
            .map(|j| SelectiveProjection::new(store, &format!("{name}.dir{j}"), channels, state, false))
            .collect();
        MetaSsm {
            channels,
            orders,
            norm_gamma,
            norm_beta,
            input,
            gate,
            output,
            branches,
            branch_of,
            name: name.to_string(),
        }
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn output_projection(&self) -> &Linear {
        &self.output
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.norm_gamma, self.norm_beta];
        for l in [&self.input, &self.gate, &self.output] {
            ids.extend(l.params());
        }
        for b in &self.branches {
            ids.extend(b.param_ids());
        }
        ids
    }

    pub fn forward<'t>(&self, ctx: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 5 || shape[1] != self.channels {
            return Err(Error::shape(
                "metassm",
                format!("input {shape:?} for {} channels", self.channels),
            ));
        }
        let dims = [shape[2], shape[3], shape[4]];
        let seq_shape = [shape[0], shape[1], dims.iter().product()];
        let xn = instance_norm(x, ctx.p(self.norm_gamma), ctx.p(self.norm_beta), 1e-5)?;
        let u = reshape(silu(self.input.forward(ctx, xn)?), &seq_shape)?;
        let z = self.gate.forward(ctx, xn)?;
        let mut outs = Vec::with_capacity(self.orders.orders.len());
        for (order, &bi) in self.orders.orders.iter().zip(&self.branch_of) {
            let perm = order.realize(dims)?;
            let seq = permute_last(u, Rc::new(perm.to_seq.clone()))?;
            let label = format!("{}/{order}", self.name);
            let y = self.branches[bi].forward(ctx, seq, perm.segment, &label)?;
            outs.push(permute_last(y, Rc::new(perm.to_voxel.clone()))?);
        }
        let avg = scale(add_n(&outs)?, 1.0 / outs.len() as crate::Real);
        let gated = mul(reshape(avg, &shape)?, silu(z))?;
        self.output.forward(ctx, gated)
    }
}
