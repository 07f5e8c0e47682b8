use std::rc::Rc;

use super::{Real, Tensor, Var};
use crate::error::{Error, Result};

/// Instance normalisation of `[B, C, ...]` over the trailing axes, followed
/// by the per-channel affine map `gamma·x̂ + beta`.
pub fn instance_norm<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>, eps: Real) -> Result<Var<'t>> {
    let vx = x.value();
    let vg = gamma.value();
    let vbeta = beta.value();
    let s = vx.shape().to_vec();
    if s.len() < 3 {
        return Err(Error::shape("instance_norm", format!("rank of {s:?} < 3")));
    }
    let (bsz, c) = (s[0], s[1]);
    let p: usize = s[2..].iter().product();
    if vg.shape() != [c] || vbeta.shape() != [c] {
        return Err(Error::shape(
            "instance_norm",
            format!("affine shapes {:?}/{:?} for {c} channels", vg.shape(), vbeta.shape()),
        ));
    }
    let mut xhat = vec![0.0; vx.numel()];
    let mut inv_std = vec![0.0; bsz * c];
    let mut out = vec![0.0; vx.numel()];
    for bc in 0..bsz * c {
        let ch = bc % c;
        let seg = &vx.data()[bc * p..(bc + 1) * p];
        // Shifting by the first element keeps constant inputs exactly zero.
        let shift = seg[0];
        let mean = seg.iter().map(|v| v - shift).sum::<Real>() / p as Real;
        let var = seg.iter().map(|v| (v - shift - mean) * (v - shift - mean)).sum::<Real>() / p as Real;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[bc] = is;
        let (gm, bt) = (vg.data()[ch], vbeta.data()[ch]);
        for i in 0..p {
            let xh = (seg[i] - shift - mean) * is;
            xhat[bc * p + i] = xh;
            out[bc * p + i] = gm * xh + bt;
        }
    }
    let value = Rc::new(Tensor::new(&s, out)?);
    Ok(x.tape().record(value, &[x, gamma, beta], move |g, need| {
        let mut gx = need[0].then(|| vec![0.0; g.len()]);
        let mut gg = vec![0.0; c];
        let mut gb = vec![0.0; c];
        for bc in 0..bsz * c {
            let ch = bc % c;
            let gs = &g[bc * p..(bc + 1) * p];
            let xh = &xhat[bc * p..(bc + 1) * p];
            let sum_g: Real = gs.iter().sum();
            let sum_gx: Real = gs.iter().zip(xh).map(|(a, b)| a * b).sum();
            gg[ch] += sum_gx;
            gb[ch] += sum_g;
            if let Some(gx) = gx.as_mut() {
                let gm = vg.data()[ch];
                let k = gm * inv_std[bc] / p as Real;
                for i in 0..p {
                    gx[bc * p + i] = k * (p as Real * gs[i] - sum_g - xh[i] * sum_gx);
                }
            }
        }
        vec![gx, need[1].then_some(gg), need[2].then_some(gb)]
    }))
}
