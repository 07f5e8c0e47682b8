use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{add_n, scale, softmax_channels_raw, Real, Tensor, Var};

/// Smoothing constant of the soft Dice term (numerator and denominator).
pub const DICE_SMOOTH: Real = 1e-5;

fn check_labels(op: &'static str, shape: &[usize], labels: &[u8]) -> Result<(usize, usize, usize)> {
    if shape.len() < 3 {
        return Err(Error::shape(op, format!("logits {shape:?} need [B, K, ...]")));
    }
    let (b, k) = (shape[0], shape[1]);
    let p: usize = shape[2..].iter().product();
    if labels.len() != b * p {
        return Err(Error::shape(op, format!("{} labels for logits {shape:?}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::config(format!("label {bad} out of range for {k} classes")));
    }
    Ok((b, k, p))
}

/// `mean_{c ≥ 1}(1 − Dice_c) + CE`, where the soft Dice of class `c` is
/// pooled over the whole batch,
/// `Dice_c = (2Σ p_c g_c + s) / (Σ p_c + Σ g_c + s)`,
/// and `CE` is the voxel-mean cross entropy.
pub fn dice_ce_loss<'t>(logits: Var<'t>, labels: &[u8], smooth: Real) -> Result<Var<'t>> {
    let vz = logits.value();
    let (b, k, p) = check_labels("dice_ce_loss", vz.shape(), labels)?;
    let probs = softmax_channels_raw(&vz);
    let pr = probs.data();
    let at = move |bi: usize, c: usize, v: usize| (bi * k + c) * p + v;
    let n = (b * p) as Real;
    let mut ce = 0.0;
    let mut inter = vec![0.0; k];
    let mut psum = vec![0.0; k];
    let mut gsum = vec![0.0; k];
    for bi in 0..b {
        for v in 0..p {
            let y = labels[bi * p + v] as usize;
            ce -= pr[at(bi, y, v)].max(Real::MIN_POSITIVE).ln();
            inter[y] += pr[at(bi, y, v)];
            gsum[y] += 1.0;
            for c in 0..k {
                psum[c] += pr[at(bi, c, v)];
            }
        }
    }
    ce /= n;
    let fg = (k - 1) as Real;
    let dice: Vec<Real> = (0..k)
        .map(|c| (2.0 * inter[c] + smooth) / (psum[c] + gsum[c] + smooth))
        .collect();
    let dice_loss = (1..k).map(|c| 1.0 - dice[c]).sum::<Real>() / fg;
    let value = Rc::new(Tensor::scalar(dice_loss + ce));
    let labels = labels.to_vec();
    Ok(logits.tape().record(value, &[logits], move |g, _| {
        let pr = probs.data();
        let mut gz = vec![0.0; pr.len()];
        let mut dp = vec![0.0; k];
        for bi in 0..b {
            for v in 0..p {
                let y = labels[bi * p + v] as usize;
                // ∂(Dice loss)/∂p_c at this voxel.
                dp[0] = 0.0;
                for c in 1..k {
                    let den = psum[c] + gsum[c] + smooth;
                    let gc = if c == y { 1.0 } else { 0.0 };
                    dp[c] = -(2.0 * gc * den - (2.0 * inter[c] + smooth)) / (den * den * fg);
                }
                let dot: Real = (0..k).map(|c| pr[at(bi, c, v)] * dp[c]).sum();
                for c in 0..k {
                    let pc = pr[at(bi, c, v)];
                    let onehot = if c == y { 1.0 } else { 0.0 };
                    gz[at(bi, c, v)] = g[0] * (pc * (dp[c] - dot) + (pc - onehot) / n);
                }
            }
        }
        vec![Some(gz)]
    }))
}

/// Weights halving with each resolution level, normalised to sum 1:
/// `(4/7, 2/7, 1/7)` for three heads.
pub fn ds_weights(heads: usize) -> Vec<Real> {
    let raw: Vec<Real> = (0..heads).map(|i| (0.5 as Real).powi(i as i32)).collect();
    let total: Real = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Nearest-neighbour downsampling of `[B, D, H, W]` labels by `factor`,
/// sampling index `i·f + f/2` along each axis.
pub fn downsample_labels(labels: &[u8], batch: usize, dims: [usize; 3], factor: usize) -> Result<Vec<u8>> {
    if factor == 0 || dims.iter().any(|d| d % factor != 0) {
        return Err(Error::shape(
            "downsample_labels",
            format!("extents {dims:?} not divisible by {factor}"),
        ));
    }
    if labels.len() != batch * dims.iter().product::<usize>() {
        return Err(Error::shape("downsample_labels", "label count"));
    }
    let [d, h, w] = dims;
    let [od, oh, ow] = dims.map(|e| e / factor);
    let off = factor / 2;
    let mut out = Vec::with_capacity(batch * od * oh * ow);
    for b in 0..batch {
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let (sz, sy, sx) = (z * factor + off, y * factor + off, x * factor + off);
                    out.push(labels[((b * d + sz) * h + sy) * w + sx]);
                }
            }
        }
    }
    Ok(out)
}

/// `Σᵢ wᵢ·Lᵢ` over heads ordered from full resolution downwards, head `i`
/// being at `1/2ⁱ` resolution and compared with labels downsampled to match.
pub fn deep_supervised_loss<'t>(heads: &[Var<'t>], labels: &[u8], dims: [usize; 3], weights: &[Real]) -> Result<Var<'t>> {
    if heads.is_empty() || heads.len() != weights.len() {
        return Err(Error::shape(
            "deep_supervised_loss",
            format!("{} heads with {} weights", heads.len(), weights.len()),
        ));
    }
    let batch = heads[0].shape()[0];
    let mut terms = Vec::with_capacity(heads.len());
    for (i, (h, &w)) in heads.iter().zip(weights).enumerate() {
        let f = 1usize << i;
        let want = dims.map(|e| e / f);
        let s = h.shape();
        if s.len() != 5 || s[2..] != want {
            return Err(Error::shape(
                "deep_supervised_loss",
                format!("head {i} has shape {s:?}, expected spatial {want:?}"),
            ));
        }
        let l = if f == 1 {
            labels.to_vec()
        } else {
            downsample_labels(labels, batch, dims, f)?
        };
        terms.push(scale(dice_ce_loss(*h, &l, DICE_SMOOTH)?, w));
    }
    add_n(&terms)
}
