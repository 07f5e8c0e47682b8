use std::rc::Rc;

use super::discrete::DiscreteSsm;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

/// Vectors `Āⁱ B̄` for `i < len`, laid out `[len, N]`.
pub fn kernel_basis(d: &DiscreteSsm, len: usize) -> Vec<Real> {
    let n = d.state_dim();
    let mut out = Vec::with_capacity(len * n);
    let mut v = d.b_bar.clone();
    for i in 0..len {
        if i > 0 {
            v = &d.a_bar * v;
        }
        out.extend(v.iter());
    }
    out
}

/// Differentiable kernel `K[c, i] = Σₙ V[c, i, n]·C[c, n]` from a fixed
/// basis `V: [C, L, N]` and learnable readouts `C: [C, N]`.
pub fn basis_kernel<'t>(basis: Rc<Vec<Real>>, len: usize, c: Var<'t>) -> Result<Var<'t>> {
    let vc = c.value();
    let [ch, n] = vc.shape() else {
        return Err(Error::shape("basis_kernel", format!("readout {:?}", vc.shape())));
    };
    let (ch, n) = (*ch, *n);
    if basis.len() != ch * len * n {
        return Err(Error::shape(
            "basis_kernel",
            format!("basis of {} values for [{ch}, {len}, {n}]", basis.len()),
        ));
    }
    let mut k = vec![0.0; ch * len];
    for cc in 0..ch {
        let cr = &vc.data()[cc * n..(cc + 1) * n];
        for i in 0..len {
            let v = &basis[(cc * len + i) * n..(cc * len + i + 1) * n];
            k[cc * len + i] = v.iter().zip(cr).map(|(a, b)| a * b).sum();
        }
    }
    let out = Rc::new(Tensor::new(&[ch, len], k)?);
    Ok(c.tape().record(out, &[c], move |g, _| {
        let mut gc = vec![0.0; ch * n];
        for cc in 0..ch {
            for i in 0..len {
                let gi = g[cc * len + i];
                let v = &basis[(cc * len + i) * n..(cc * len + i + 1) * n];
                for k in 0..n {
                    gc[cc * n + k] += gi * v[k];
                }
            }
        }
        vec![Some(gc)]
    }))
}

/// Per-channel causal convolution of `x: [B, C, L]` with `k: [C, L]`:
/// `y[t] = Σ_{i ≥ 0, i+shift ≤ t} k[i]·x[t − shift − i]`.
///
/// `shift = 0` is the usual SSM convolution; `shift = 1` excludes the
/// current element.
pub fn causal_conv<'t>(x: Var<'t>, k: Var<'t>, shift: usize) -> Result<Var<'t>> {
    let (vx, vk) = (x.value(), k.value());
    let xs = vx.shape().to_vec();
    if xs.len() != 3 || vk.shape() != [xs[1], xs[2]] {
        return Err(Error::shape(
            "causal_conv",
            format!("input {xs:?} with kernel {:?}", vk.shape()),
        ));
    }
    let (bs, ch, l) = (xs[0], xs[1], xs[2]);
    let mut y = vec![0.0; bs * ch * l];
    for b in 0..bs {
        for c in 0..ch {
            let row = (b * ch + c) * l;
            let xr = &vx.data()[row..row + l];
            let kr = &vk.data()[c * l..(c + 1) * l];
            for t in shift..l {
                let m = t - shift;
                y[row + t] = (0..=m).map(|i| kr[i] * xr[m - i]).sum();
            }
        }
    }
    let out = Rc::new(Tensor::new(&xs, y)?);
    Ok(x.tape().record(out, &[x, k], move |g, need| {
        let mut gx = vec![0.0; bs * ch * l];
        let mut gk = vec![0.0; ch * l];
        for b in 0..bs {
            for c in 0..ch {
                let row = (b * ch + c) * l;
                let xr = &vx.data()[row..row + l];
                let kr = &vk.data()[c * l..(c + 1) * l];
                for t in shift..l {
                    let gt = g[row + t];
                    if gt == 0.0 {
                        continue;
                    }
                    let m = t - shift;
                    for i in 0..=m {
                        gx[row + m - i] += gt * kr[i];
                        gk[c * l + i] += gt * xr[m - i];
                    }
                }
            }
        }
        vec![need[0].then_some(gx), need[1].then_some(gk)]
    }))
}
