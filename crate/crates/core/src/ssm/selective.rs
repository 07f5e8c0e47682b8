use std::rc::Rc;

use nalgebra::DMatrix;
use rand_distr::{Distribution, Uniform};

use super::hippo::hippo_diagonal;
use crate::error::{Error, Result};
use crate::params::{Bound, Linear, ParamId, ParamStore};
use crate::tensor::{exp, mul, scale, silu, softplus, Real, Tensor, Var};

/// `1/(k+1)!` for `k = 0..16`; the truncated series of `φ1` on `|z| < 1/2`
/// has error below 1e-17.
const PHI1_COEFFS: [f64; 16] = {
    let mut c = [1.0; 16];
    let mut k = 1;
    while k < 16 {
        c[k] = c[k - 1] / (k + 1) as f64;
        k += 1;
    }
    c
};

/// `(eᶻ, φ1(z), φ1′(z))` with `φ1(z) = expm1(z)/z`.
#[inline]
fn phi1_triple(z: Real) -> (Real, Real, Real) {
    if z.abs() >= 0.5 {
        let da = z.exp();
        let em1 = da - 1.0;
        return (da, em1 / z, (z * da - em1) / (z * z));
    }
    let mut p = PHI1_COEFFS[15] as Real;
    let mut dp = 0.0;
    for &c in PHI1_COEFFS[..15].iter().rev() {
        dp = dp * z + p;
        p = p * z + c as Real;
    }
    (1.0 + z * p, p, dp)
}

/// Per-step ZOH coefficients of a diagonal mode: `(Ā, B̄/B)`.
#[inline]
fn zoh_step(delta: Real, a: Real) -> (Real, Real) {
    let (da, p, _) = phi1_triple(delta * a);
    (da, delta * p)
}

/// Raw inputs of a diagonal selective scan over `[B, C, L]` sequences with
/// `N` state modes per channel.
#[derive(Clone, Debug)]
pub struct ScanInputs<'a> {
    pub batch: usize,
    pub channels: usize,
    pub state: usize,
    pub len: usize,
    /// `[B, C, L]`
    pub u: &'a [Real],
    /// `[B, C, L]`, positive.
    pub delta: &'a [Real],
    /// `[C, N]`, the diagonal of `A`.
    pub a: &'a [Real],
    /// `[B, L, N]`
    pub b: &'a [Real],
    /// `[B, L, N]`
    pub c: &'a [Real],
    /// Restart the recurrence from zero every `segment` steps.
    pub segment: Option<usize>,
}

impl ScanInputs<'_> {
    fn resets_at(&self, t: usize) -> bool {
        matches!(self.segment, Some(s) if t.is_multiple_of(s))
    }
}

/// Runs the recurrence, returning outputs `[B, C, L]` and, when requested,
/// every state `[B, C, L, N]`.
pub fn scan_forward(s: &ScanInputs<'_>, keep_states: bool) -> (Vec<Real>, Vec<Real>) {
    let (bs, ch, n, l) = (s.batch, s.channels, s.state, s.len);
    let mut y = vec![0.0; bs * ch * l];
    let mut states = if keep_states { vec![0.0; bs * ch * l * n] } else { Vec::new() };
    let mut h = vec![0.0; n];
    for b in 0..bs {
        for c in 0..ch {
            let row = (b * ch + c) * l;
            let a = &s.a[c * n..(c + 1) * n];
            h.fill(0.0);
            for t in 0..l {
                if s.resets_at(t) {
                    h.fill(0.0);
                }
                let dt = s.delta[row + t];
                let ut = s.u[row + t];
                let bt = &s.b[(b * l + t) * n..(b * l + t + 1) * n];
                let ct = &s.c[(b * l + t) * n..(b * l + t + 1) * n];
                let mut acc = 0.0;
                for k in 0..n {
                    let (da, e) = zoh_step(dt, a[k]);
                    h[k] = da * h[k] + e * bt[k] * ut;
                    acc += ct[k] * h[k];
                }
                y[row + t] = acc;
                if keep_states {
                    states[(row + t) * n..(row + t + 1) * n].copy_from_slice(&h);
                }
            }
        }
    }
    (y, states)
}

/// `[B, N, L] → [B, L, N]` and back.
fn swap_last2(x: &[Real], bs: usize, r: usize, c: usize) -> Vec<Real> {
    let mut out = vec![0.0; x.len()];
    for b in 0..bs {
        let (src, dst) = (&x[b * r * c..(b + 1) * r * c], &mut out[b * r * c..(b + 1) * r * c]);
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

/// Differentiable diagonal selective scan.
///
/// Shapes: `u, delta: [B, C, L]`, `a: [C, N]`, `b, c: [B, N, L]`; the output
/// is `[B, C, L]` with `yₜ = cₜ·hₜ`, `hₜ = exp(δₜa)·hₜ₋₁ + δₜφ₁(δₜa)·bₜ·uₜ`.
pub fn selective_scan<'t>(
    u: Var<'t>,
    delta: Var<'t>,
    a: Var<'t>,
    b: Var<'t>,
    c: Var<'t>,
    segment: Option<usize>,
) -> Result<Var<'t>> {
    let (vu, vd, va, vb, vc) = (u.value(), delta.value(), a.value(), b.value(), c.value());
    let us = vu.shape().to_vec();
    if us.len() != 3 || vd.shape() != us.as_slice() {
        return Err(Error::shape(
            "selective_scan",
            format!("u {:?}, delta {:?}", us, vd.shape()),
        ));
    }
    let (bs, ch, l) = (us[0], us[1], us[2]);
    let n = va.shape().get(1).copied().unwrap_or(0);
    if va.shape() != [ch, n] || vb.shape() != [bs, n, l] || vc.shape() != [bs, n, l] {
        return Err(Error::shape(
            "selective_scan",
            format!("a {:?}, b {:?}, c {:?} for u {us:?}", va.shape(), vb.shape(), vc.shape()),
        ));
    }
    if segment == Some(0) {
        return Err(Error::shape("selective_scan", "zero segment length"));
    }
    let bt = swap_last2(vb.data(), bs, n, l);
    let ct = swap_last2(vc.data(), bs, n, l);
    let inputs = ScanInputs {
        batch: bs,
        channels: ch,
        state: n,
        len: l,
        u: vu.data(),
        delta: vd.data(),
        a: va.data(),
        b: &bt,
        c: &ct,
        segment,
    };
    let (y, states) = scan_forward(&inputs, true);
    let out = Rc::new(Tensor::new(&us, y)?);
    Ok(u.tape().record(out, &[u, delta, a, b, c], move |g, _| {
        let s = ScanInputs {
            batch: bs,
            channels: ch,
            state: n,
            len: l,
            u: vu.data(),
            delta: vd.data(),
            a: va.data(),
            b: &bt,
            c: &ct,
            segment,
        };
        let mut gu = vec![0.0; bs * ch * l];
        let mut gd = vec![0.0; bs * ch * l];
        let mut ga = vec![0.0; ch * n];
        let mut gb = vec![0.0; bs * l * n];
        let mut gc = vec![0.0; bs * l * n];
        let mut gh = vec![0.0; n];
        for b in 0..bs {
            for c in 0..ch {
                let row = (b * ch + c) * l;
                let a = &s.a[c * n..(c + 1) * n];
                gh.fill(0.0);
                for t in (0..l).rev() {
                    let gy = g[row + t];
                    let dt = s.delta[row + t];
                    let ut = s.u[row + t];
                    let off = (b * l + t) * n;
                    let h = &states[(row + t) * n..(row + t + 1) * n];
                    let first = t == 0 || s.resets_at(t);
                    let hp = (!first).then(|| &states[(row + t - 1) * n..(row + t) * n]);
                    let (mut g_u, mut g_d) = (0.0, 0.0);
                    for k in 0..n {
                        gc[off + k] += gy * h[k];
                        let ghk = gh[k] + gy * s.c[off + k];
                        let z = dt * a[k];
                        let (da, p1, dp1) = phi1_triple(z);
                        let e = dt * p1;
                        let bk = s.b[off + k];
                        let hprev = hp.map_or(0.0, |hp| hp[k]);
                        let g_da = ghk * hprev;
                        let g_e = ghk * bk * ut;
                        gb[off + k] += ghk * e * ut;
                        g_u += ghk * e * bk;
                        g_d += g_da * da * a[k] + g_e * da;
                        ga[c * n + k] += g_da * da * dt + g_e * dt * dt * dp1;
                        gh[k] = if first { 0.0 } else { ghk * da };
                    }
                    gu[row + t] = g_u;
                    gd[row + t] = g_d;
                }
            }
        }
        vec![
            Some(gu),
            Some(gd),
            Some(ga),
            Some(swap_last2(&gb, bs, l, n)),
            Some(swap_last2(&gc, bs, l, n)),
        ]
    }))
}

/// Per-step quantities of one selective scan, kept for operator extraction.
/// Only the first batch element is recorded.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmTrace {
    pub label: String,
    pub channels: usize,
    pub state: usize,
    pub len: usize,
    /// `[C, L]`
    pub u: Vec<Real>,
    /// `[C, L]`
    pub delta: Vec<Real>,
    /// `[C, N]`
    pub a: Vec<Real>,
    /// `[L, N]`
    pub b: Vec<Real>,
    /// `[L, N]`
    pub c: Vec<Real>,
    pub segment: Option<usize>,
    /// Ungated scan output `[C, L]`.
    pub y: Vec<Real>,
}

impl SsmTrace {
    fn inputs(&self) -> ScanInputs<'_> {
        ScanInputs {
            batch: 1,
            channels: self.channels,
            state: self.state,
            len: self.len,
            u: &self.u,
            delta: &self.delta,
            a: &self.a,
            b: &self.b,
            c: &self.c,
            segment: self.segment,
        }
    }

    /// Re-runs the recurrence on the recorded inputs.
    pub fn rescan(&self) -> Vec<Real> {
        scan_forward(&self.inputs(), false).0
    }

    /// Lower-triangular operator of channel `ch` with `M·u = y`:
    /// `M[t,s] = Σₙ cₜ[n]·(Π_{s<r≤t} exp(δᵣaₙ))·δₛφ₁(δₛaₙ)·bₛ[n]`.
    pub fn attention_matrix(&self, ch: usize) -> DMatrix<Real> {
        let (n, l) = (self.state, self.len);
        let a = &self.a[ch * n..(ch + 1) * n];
        let delta = &self.delta[ch * l..(ch + 1) * l];
        let mut m = DMatrix::zeros(l, l);
        let mut v = vec![0.0; n];
        for s in 0..l {
            for k in 0..n {
                v[k] = zoh_step(delta[s], a[k]).1 * self.b[s * n + k];
            }
            for t in s..l {
                if t > s {
                    if matches!(self.segment, Some(seg) if t % seg == 0) {
                        break;
                    }
                    for k in 0..n {
                        v[k] *= zoh_step(delta[t], a[k]).0;
                    }
                }
                m[(t, s)] = (0..n).map(|k| self.c[t * n + k] * v[k]).sum();
            }
        }
        m
    }

    /// Channel-averaged operator.
    pub fn mean_attention(&self) -> DMatrix<Real> {
        let mut acc = DMatrix::zeros(self.len, self.len);
        for ch in 0..self.channels {
            acc += self.attention_matrix(ch);
        }
        acc / self.channels as Real
    }
}

/// Input-dependent `Δ`, `B`, `C` and an optional gate for a selective scan.
///
/// `Δ = softplus(W_Δ x + b_Δ)` per channel, `B = W_B x + b_B` and
/// `C = W_C x + b_C` shared across channels, and `A = −exp(a_log)` with
/// `a_log` initialised to the log of the negated HiPPO-LegS diagonal.
#[derive(Clone, Debug)]
pub struct SelectiveProjection {
    pub channels: usize,
    pub state: usize,
    pub dt: Linear,
    pub b: Linear,
    pub c: Linear,
    pub a_log: ParamId,
    pub gate: Option<Linear>,
}

/// `softplus⁻¹(y) = ln(eʸ − 1)`.
pub fn inv_softplus(y: Real) -> Real {
    if y > 20.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl SelectiveProjection {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, state: usize, gated: bool) -> Self {
        let dt = Linear::new(store, &format!("{name}.dt"), channels, channels, true);
        // Δ bias so that softplus(bias) is log-uniform in [1e-3, 1e-1].
        let bias = dt.bias.expect("dt has a bias");
        let mut rng = store.rng_for(&format!("{name}.dt.b"));
        let dist = Uniform::new((1e-3 as Real).ln(), (1e-1 as Real).ln()).expect("valid range");
        for v in store.get_mut(bias).data_mut() {
            *v = inv_softplus(dist.sample(&mut rng).exp());
        }
        let b = Linear::new(store, &format!("{name}.B"), channels, state, true);
        let c = Linear::new(store, &format!("{name}.C"), channels, state, true);
        let diag = hippo_diagonal(state);
        let a_log = store.add(
            &format!("{name}.a_log"),
            Tensor::from_fn(&[channels, state], |i| (-diag[i % state]).ln()),
        );
        let gate = gated.then(|| Linear::new(store, &format!("{name}.gate"), channels, channels, true));
        SelectiveProjection {
            channels,
            state,
            dt,
            b,
            c,
            a_log,
            gate,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = [&self.dt, &self.b, &self.c].into_iter().flat_map(Linear::params).collect();
        ids.push(self.a_log);
        ids.extend(self.gate.iter().flat_map(Linear::params));
        ids
    }

    /// Scans `x: [B, C, L]`, returning `[B, C, L]`.
    pub fn forward<'t>(&self, ctx: &Bound<'t>, x: Var<'t>, segment: Option<usize>, label: &str) -> Result<Var<'t>> {
        let delta = softplus(self.dt.forward(ctx, x)?);
        let b = self.b.forward(ctx, x)?;
        let c = self.c.forward(ctx, x)?;
        let a = scale(exp(ctx.p(self.a_log)), -1.0);
        let y = selective_scan(x, delta, a, b, c, segment)?;
        if let Some(rec) = ctx.recorder() {
            rec.trace(trace_of(label, x, delta, a, b, c, y, segment));
        }
        match &self.gate {
            Some(g) => mul(y, silu(g.forward(ctx, x)?)),
            None => Ok(y),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn trace_of(
    label: &str,
    u: Var<'_>,
    delta: Var<'_>,
    a: Var<'_>,
    b: Var<'_>,
    c: Var<'_>,
    y: Var<'_>,
    segment: Option<usize>,
) -> SsmTrace {
    let s = u.shape();
    let (ch, l) = (s[1], s[2]);
    let n = a.shape()[1];
    let first = |v: Var<'_>, len: usize| v.value().data()[..len].to_vec();
    SsmTrace {
        label: label.to_string(),
        channels: ch,
        state: n,
        len: l,
        u: first(u, ch * l),
        delta: first(delta, ch * l),
        a: a.value().data().to_vec(),
        b: swap_last2(&first(b, n * l), 1, n, l),
        c: swap_last2(&first(c, n * l), 1, n, l),
        segment,
        y: first(y, ch * l),
    }
}
