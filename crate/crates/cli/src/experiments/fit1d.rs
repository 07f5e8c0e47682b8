//! Fitting a flattened 2D image with a static S4 model.
//!
//! The model predicts every pixel from the pixels scanned before it
//! (forward), after it (reverse) or both (bi), through fixed HiPPO kernels
//! with learned readouts. Errors concentrate at row transitions, where the
//! raster scan jumps across the image.

use std::fmt::Write as _;
use std::rc::Rc;
use std::str::FromStr;

use mmunet::config::KvConfig;
use mmunet::params::ParamStore;
use mmunet::ssm::{basis_kernel, causal_conv, hippo_init, kernel_basis, zoh_discretize, SsmParams};
use mmunet::tensor::{channel_linear, concat_channels, mse, permute_last, silu, Real, Tape, Tensor, Var};
use mmunet::training::Adam;
use mmunet::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reverse,
    Bi,
}

impl Direction {
    pub const ALL: [Direction; 3] = [Direction::Forward, Direction::Reverse, Direction::Bi];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Reverse => "reverse",
            Direction::Bi => "bi",
        }
    }

    fn branches(self) -> &'static [bool] {
        match self {
            Direction::Forward => &[false],
            Direction::Reverse => &[true],
            Direction::Bi => &[false, true],
        }
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Direction::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::config(format!("unknown direction {s:?}; expected forward, reverse or bi")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fit1dConfig {
    /// HiPPO state size.
    pub state: usize,
    /// Kernels per scan direction.
    pub width: usize,
    pub steps: usize,
    pub lr: Real,
    /// Step sizes are log-spaced over `[dt_min, dt_max]` across kernels.
    pub dt_min: Real,
    pub dt_max: Real,
    /// Half-width of the window around each row transition.
    pub boundary: usize,
    /// Extents `H×W` of the synthetic image.
    pub image: [usize; 2],
    pub seed: u64,
}

impl Default for Fit1dConfig {
    fn default() -> Self {
        Fit1dConfig {
            state: 64,
            width: 16,
            steps: 2000,
            lr: 5e-3,
            dt_min: 1e-2,
            dt_max: 0.5,
            boundary: 4,
            image: [16, 32],
            seed: 0,
        }
    }
}

impl Fit1dConfig {
    pub const KEYS: [&'static str; 9] = ["state", "width", "steps", "lr", "dt_min", "dt_max", "boundary", "image", "seed"];

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("state", self.state);
        kv.set("width", self.width);
        kv.set("steps", self.steps);
        kv.set("lr", self.lr);
        kv.set("dt_min", self.dt_min);
        kv.set("dt_max", self.dt_max);
        kv.set("boundary", self.boundary);
        kv.set("image", format!("{}x{}", self.image[0], self.image[1]));
        kv.set("seed", self.seed);
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let image = match kv.raw("image") {
            Some(s) => {
                let (h, w) = s
                    .split_once('x')
                    .ok_or_else(|| Error::config(format!("image = {s:?}: expected HxW")))?;
                let p = |v: &str| v.trim().parse::<usize>().map_err(|e| Error::config(format!("image = {s:?}: {e}")));
                [p(h)?, p(w)?]
            }
            None => d.image,
        };
        let cfg = Fit1dConfig {
            state: kv.get_or("state", d.state)?,
            width: kv.get_or("width", d.width)?,
            steps: kv.get_or("steps", d.steps)?,
            lr: kv.get_or("lr", d.lr)?,
            dt_min: kv.get_or("dt_min", d.dt_min)?,
            dt_max: kv.get_or("dt_max", d.dt_max)?,
            boundary: kv.get_or("boundary", d.boundary)?,
            image,
            seed: kv.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.state == 0 || self.width == 0 || self.image.contains(&0) {
            return Err(Error::config("state, width and image extents must be positive"));
        }
        if !(self.dt_min > 0.0 && self.dt_max >= self.dt_min) || !(self.lr >= 0.0) {
            return Err(Error::config("need 0 < dt_min ≤ dt_max and lr ≥ 0"));
        }
        Ok(())
    }
}

/// Seeded high-variance test image: a smooth background, a bright column,
/// a dark blob and pixel noise.
pub fn fit1d_image(seed: u64, [h, w]: [usize; 2]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let col = rng.random_range(w / 4..(3 * w / 4).max(w / 4 + 1));
    let (cy, cx) = (rng.random_range(0.0..h as Real), rng.random_range(0.0..w as Real));
    let r = (h.min(w) as Real / 4.0).max(1.0);
    let tilt: Real = rng.random_range(-1.0..1.0);
    Tensor::from_fn(&[h, w], |i| {
        let (y, x) = ((i / w) as Real, (i % w) as Real);
        let bright = if (i % w) == col { 4.0 } else { 0.0 };
        let blob = -2.0 * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * r * r)).exp();
        let noise: Real = StandardNormal.sample(&mut rng);
        tilt * (x / w as Real - 0.5) + bright + blob + 0.3 * noise
    })
}

/// Raster positions within `window` of a row transition: the last `window`
/// pixels of every row but the last and the first `window` of every row
/// but the first.
pub fn boundary_mask([h, w]: [usize; 2], window: usize) -> Vec<bool> {
    (0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            (r + 1 < h && c + window >= w) || (r > 0 && c < window)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Fit1dResult {
    pub direction: Direction,
    /// Standardised target, raster order.
    pub target: Vec<Real>,
    pub prediction: Vec<Real>,
    pub final_loss: Real,
    pub boundary_error: Real,
    pub interior_error: Real,
}

impl Fit1dResult {
    pub fn abs_error(&self) -> impl Iterator<Item = Real> + '_ {
        self.prediction.iter().zip(&self.target).map(|(p, t)| (p - t).abs())
    }

    /// One row per pixel: `position,row,col,target,prediction,abs_error`.
    pub fn positions_csv(&self, w: usize) -> String {
        let mut s = String::from("position,row,col,target,prediction,abs_error\n");
        for (i, e) in self.abs_error().enumerate() {
            writeln!(s, "{i},{},{},{},{},{e}", i / w, i % w, self.target[i], self.prediction[i]).unwrap();
        }
        s
    }
}

fn mean_where(v: impl Iterator<Item = Real>, mask: &[bool], want: bool) -> Real {
    let (mut s, mut n) = (0.0, 0usize);
    for (x, &m) in v.zip(mask) {
        if m == want {
            s += x;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as Real
    }
}

/// Kernel bases `[width, L, N]` with log-spaced step sizes.
fn bases(cfg: &Fit1dConfig, len: usize) -> Result<Rc<Vec<Real>>> {
    let a = hippo_init(cfg.state);
    let b = mmunet::ssm::hippo_b(cfg.state);
    let mut out = Vec::with_capacity(cfg.width * len * cfg.state);
    for k in 0..cfg.width {
        let t = if cfg.width == 1 { 0.0 } else { k as Real / (cfg.width - 1) as Real };
        let dt = cfg.dt_min * (cfg.dt_max / cfg.dt_min).powf(t);
        let p = SsmParams::new(a.clone(), b.clone(), nalgebra::RowDVector::zeros(cfg.state), dt)?;
        out.extend(kernel_basis(&zoh_discretize(&p)?, len));
    }
    Ok(Rc::new(out))
}

fn predict<'t>(
    store: &ParamStore,
    ctx: &mmunet::params::Bound<'t>,
    x: Var<'t>,
    dir: Direction,
    basis: &Rc<Vec<Real>>,
    cfg: &Fit1dConfig,
    len: usize,
) -> Result<Var<'t>> {
    let tape = x.tape();
    let reverse: Rc<Vec<usize>> = Rc::new((0..len).rev().collect());
    let xw = tape.constant(Tensor::from_fn(&[1, cfg.width, len], |i| x.value().data()[i % len]));
    let mut feats = Vec::new();
    for &rev in dir.branches() {
        let name = if rev { "reverse.c" } else { "forward.c" };
        let c = ctx.p(store.id(name).expect("readout"));
        let k = basis_kernel(basis.clone(), len, c)?;
        let f = if rev {
            let xr = permute_last(xw, reverse.clone())?;
            permute_last(causal_conv(xr, k, 1)?, reverse.clone())?
        } else {
            causal_conv(xw, k, 1)?
        };
        feats.push(f);
    }
    let h = silu(concat_channels(&feats)?);
    channel_linear(h, ctx.p(store.id("out.w").expect("w")), Some(ctx.p(store.id("out.b").expect("b"))))
}

/// Trains one direction on a standardised `[H, W]` image.
pub fn fit1d(image: &Tensor, dir: Direction, cfg: &Fit1dConfig) -> Result<Fit1dResult> {
    cfg.validate()?;
    let [h, w] = <[usize; 2]>::try_from(image.shape())
        .map_err(|_| Error::config(format!("fit1d needs a 2D image, got {:?}", image.shape())))?;
    let len = h * w;
    let (mean, var) = (image.mean(), image.variance());
    let sd = if var > 1e-24 { var.sqrt() } else { 1.0 };
    let target: Vec<Real> = image.data().iter().map(|v| (v - mean) / sd).collect();
    let x = Tensor::new(&[1, 1, len], target.clone())?;

    let basis = bases(cfg, len)?;
    let mut store = ParamStore::new(cfg.seed);
    let nb = dir.branches().len();
    for &rev in dir.branches() {
        let name = if rev { "reverse.c" } else { "forward.c" };
        store.normal(name, &[cfg.width, cfg.state], 1.0 / (cfg.state as Real).sqrt());
    }
    store.uniform("out.w", &[1, nb * cfg.width], 1.0 / ((nb * cfg.width) as Real).sqrt());
    store.constant("out.b", &[1], 0.0);

    let mut opt = Adam::default();
    let mut final_loss = Real::NAN;
    for _ in 0..cfg.steps {
        let tape = Tape::new();
        let ctx = store.bind(&tape);
        let xv = tape.constant(x.clone());
        let y = predict(&store, &ctx, xv, dir, &basis, cfg, len)?;
        let loss = mse(y, xv)?;
        final_loss = loss.item();
        if !final_loss.is_finite() {
            return Err(Error::numerical(format!("fit1d loss became {final_loss}")));
        }
        let grads = tape.backward(loss)?;
        store.accumulate_grads(&grads, &ctx)?;
        opt.step(&mut store, cfg.lr)?;
    }
    let tape = Tape::new();
    let ctx = store.bind_frozen(&tape);
    let xv = tape.constant(x.clone());
    let y = predict(&store, &ctx, xv, dir, &basis, cfg, len)?;
    let prediction = y.value().data().to_vec();
    if cfg.steps == 0 {
        final_loss = mse(y, xv)?.item();
    }
    let mask = boundary_mask([h, w], cfg.boundary);
    let err: Vec<Real> = prediction.iter().zip(&target).map(|(p, t)| (p - t).abs()).collect();
    Ok(Fit1dResult {
        direction: dir,
        boundary_error: mean_where(err.iter().copied(), &mask, true),
        interior_error: mean_where(err.iter().copied(), &mask, false),
        target,
        prediction,
        final_loss,
    })
}

/// `direction,boundary_error,interior_error,final_loss` rows.
pub fn summary_csv(results: &[Fit1dResult]) -> String {
    let mut s = String::from("direction,boundary_error,interior_error,final_loss\n");
    for r in results {
        writeln!(s, "{},{},{},{}", r.direction.name(), r.boundary_error, r.interior_error, r.final_loss).unwrap();
    }
    s
}
