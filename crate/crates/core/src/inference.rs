//! Sliding-window prediction with flip test-time augmentation.

use crate::error::{Error, Result};
use crate::network::Model;
use crate::tensor::{softmax_channels_raw, Real, Tensor};

pub const GAUSSIAN_FLOOR: Real = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct InferConfig {
    pub patch: [usize; 3],
    /// Fraction of the patch shared by neighbouring tiles, in `[0, 1)`.
    pub overlap: Real,
    pub tta: bool,
    /// Weight tiles by [`gaussian_map`]; uniform weights otherwise.
    pub gaussian: bool,
    pub sigma_scale: Real,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            patch: [32; 3],
            overlap: 0.5,
            tta: true,
            gaussian: true,
            sigma_scale: 0.125,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::config(format!("overlap {} outside [0, 1)", self.overlap)));
        }
        if self.patch.contains(&0) || !(self.sigma_scale > 0.0) {
            return Err(Error::config("patch extents and sigma_scale must be positive"));
        }
        Ok(())
    }

    fn stride(&self) -> [usize; 3] {
        self.patch
            .map(|p| ((p as Real * (1.0 - self.overlap)).floor() as usize).max(1))
    }
}

/// Anything that maps a `[1, C, D, H, W]` patch to `[1, K, D, H, W]` logits.
pub trait PatchPredictor {
    fn classes(&self) -> usize;
    fn logits(&self, patch: &Tensor) -> Result<Tensor>;
}

impl PatchPredictor for Model {
    fn classes(&self) -> usize {
        self.config().classes
    }

    fn logits(&self, patch: &Tensor) -> Result<Tensor> {
        self.predict(patch)
    }
}

/// Separable Gaussian centred at `(e − 1)/2` with `σ = e·sigma_scale` per
/// axis; the continuous peak is 1 and values are clamped below at 1e-3.
pub fn gaussian_map(dims: [usize; 3], sigma_scale: Real) -> Tensor {
    let axis = |e: usize| -> Vec<Real> {
        let c = (e as Real - 1.0) / 2.0;
        let s = e as Real * sigma_scale;
        (0..e).map(|i| (-0.5 * ((i as Real - c) / s).powi(2)).exp()).collect()
    };
    let (gd, gh, gw) = (axis(dims[0]), axis(dims[1]), axis(dims[2]));
    let mut out = Vec::with_capacity(dims.iter().product());
    for a in &gd {
        for b in &gh {
            for c in &gw {
                out.push((a * b * c).max(GAUSSIAN_FLOOR));
            }
        }
    }
    Tensor::new(&dims, out).expect("sized")
}

fn flip_spatial(t: &Tensor, mask: usize) -> Tensor {
    let r = t.shape().len();
    let mut t = t.clone();
    for a in 0..3 {
        if mask & (1 << a) != 0 {
            t = t.flip(r - 3 + a);
        }
    }
    t
}

/// Class probabilities of a `[1, C, D, H, W]` patch, averaged over the
/// eight flip combinations when `tta` is set.
pub fn flip_tta(model: &impl PatchPredictor, patch: &Tensor, tta: bool) -> Result<Tensor> {
    if !tta {
        return Ok(softmax_channels_raw(&model.logits(patch)?));
    }
    let mut acc: Option<Tensor> = None;
    for mask in 0..8 {
        let p = softmax_channels_raw(&model.logits(&flip_spatial(patch, mask))?);
        let p = flip_spatial(&p, mask);
        match acc.as_mut() {
            None => acc = Some(p),
            Some(a) => a.data_mut().iter_mut().zip(p.data()).for_each(|(x, y)| *x += y),
        }
    }
    let mut acc = acc.expect("eight passes");
    acc.data_mut().iter_mut().for_each(|v| *v /= 8.0);
    Ok(acc)
}

/// Tile origins along one axis: multiples of `stride`, with the last tile
/// flush against the end.
pub fn tile_origins(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|&o| o + patch < extent).collect();
    out.push(extent - patch);
    out.dedup();
    out
}

/// Per-voxel argmax over channel 1 of `[1, K, D, H, W]`; ties go to the
/// lower class.
pub fn argmax_channels(probs: &Tensor) -> Vec<u8> {
    let s = probs.shape();
    let k = s[1];
    let vol: usize = s[2..].iter().product();
    let d = probs.data();
    (0..vol)
        .map(|v| {
            let mut best = 0;
            for c in 1..k {
                if d[c * vol + v] > d[best * vol + v] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Weighted average of tile probabilities over a `[C, D, H, W]` volume,
/// returned as `[1, K, D, H, W]`.
pub fn sliding_window_probs(model: &impl PatchPredictor, volume: &Tensor, cfg: &InferConfig) -> Result<Tensor> {
    cfg.validate()?;
    let s = volume.shape();
    if s.len() != 4 {
        return Err(Error::shape("sliding_window", format!("volume must be [C,D,H,W], got {s:?}")));
    }
    let dims = [s[1], s[2], s[3]];
    if (0..3).any(|a| dims[a] < cfg.patch[a]) {
        return Err(Error::config(format!("volume {dims:?} smaller than patch {:?}", cfg.patch)));
    }
    let k = model.classes();
    let p = cfg.patch;
    let weight = if cfg.gaussian {
        gaussian_map(p, cfg.sigma_scale)
    } else {
        Tensor::full(&p, 1.0)
    };
    let vol = dims[0] * dims[1] * dims[2];
    let mut acc = vec![0.0; k * vol];
    let mut wsum = vec![0.0; vol];
    let stride = cfg.stride();
    let origins: Vec<Vec<usize>> = (0..3).map(|a| tile_origins(dims[a], p[a], stride[a])).collect();
    let mut patch_shape = vec![1, s[0]];
    patch_shape.extend_from_slice(&p);
    for &oz in &origins[0] {
        for &oy in &origins[1] {
            for &ox in &origins[2] {
                let tile = volume.crop3d([oz, oy, ox], p)?.reshape(&patch_shape)?;
                let probs = flip_tta(model, &tile, cfg.tta)?;
                let pv = p[0] * p[1] * p[2];
                if probs.shape() != [&[1, k][..], &p[..]].concat() {
                    return Err(Error::shape("sliding_window", format!("predictor returned {:?}", probs.shape())));
                }
                for z in 0..p[0] {
                    for y in 0..p[1] {
                        for x in 0..p[2] {
                            let li = (z * p[1] + y) * p[2] + x;
                            let gi = ((oz + z) * dims[1] + oy + y) * dims[2] + ox + x;
                            let w = weight.data()[li];
                            wsum[gi] += w;
                            for c in 0..k {
                                acc[c * vol + gi] += w * probs.data()[c * pv + li];
                            }
                        }
                    }
                }
            }
        }
    }
    for c in 0..k {
        for (a, w) in acc[c * vol..(c + 1) * vol].iter_mut().zip(&wsum) {
            *a /= w;
        }
    }
    Tensor::new(&[1, k, dims[0], dims[1], dims[2]], acc)
}

/// Label grid of a `[C, D, H, W]` volume.
pub fn sliding_window_predict(model: &impl PatchPredictor, volume: &Tensor, cfg: &InferConfig) -> Result<Vec<u8>> {
    Ok(argmax_channels(&sliding_window_probs(model, volume, cfg)?))
}
