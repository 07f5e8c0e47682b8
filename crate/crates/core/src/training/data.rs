use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{format_extents, parse_extents, KvConfig};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Intensity model of the synthetic volumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    /// Class means `4σ` apart: nearly separable by intensity alone.
    Separable,
    /// Class means `σ/2` apart with a smooth per-sample bias field, so
    /// intensity distributions overlap heavily.
    HighVariance,
}

impl std::str::FromStr for DataKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separable" => Ok(Self::Separable),
            "high-variance" => Ok(Self::HighVariance),
            _ => Err(Error::config(format!("unknown dataset kind {s:?}"))),
        }
    }
}

impl std::fmt::Display for DataKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Separable => "separable",
            Self::HighVariance => "high-variance",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub count: usize,
    pub dims: [usize; 3],
    pub classes: usize,
    pub seed: u64,
    pub kind: DataKind,
    pub ellipsoids_per_class: usize,
    pub noise: Real,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            count: 50,
            dims: [32; 3],
            classes: 3,
            seed: 0,
            kind: DataKind::Separable,
            ellipsoids_per_class: 1,
            noise: 1.0,
        }
    }
}

impl SyntheticConfig {
    pub const KEYS: [&'static str; 7] = ["count", "dims", "classes", "seed", "kind", "ellipsoids_per_class", "noise"];

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("count", self.count);
        kv.set("dims", format_extents(self.dims));
        kv.set("classes", self.classes);
        kv.set("seed", self.seed);
        kv.set("kind", self.kind);
        kv.set("ellipsoids_per_class", self.ellipsoids_per_class);
        kv.set("noise", self.noise);
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        Ok(SyntheticConfig {
            count: kv.get_or("count", d.count)?,
            dims: match kv.raw("dims") {
                Some(s) => parse_extents(s)?,
                None => d.dims,
            },
            classes: kv.get_or("classes", d.classes)?,
            seed: kv.get_or("seed", d.seed)?,
            kind: kv.get_or("kind", d.kind)?,
            ellipsoids_per_class: kv.get_or("ellipsoids_per_class", d.ellipsoids_per_class)?,
            noise: kv.get_or("noise", d.noise)?,
        })
    }
}

/// One image with its label grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, D, H, W]`
    pub image: Tensor,
    /// Row-major `D·H·W` labels.
    pub labels: Vec<u8>,
    pub dims: [usize; 3],
}

impl Sample {
    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }
}

/// Deterministic ellipsoid volumes; the last 20% form the validation split.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub samples: Vec<Sample>,
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index as u64 + 1);
    r
}

impl SyntheticDataset {
    pub fn generate(config: SyntheticConfig) -> Result<Self> {
        if config.count == 0 || config.classes < 2 || config.classes > 255 {
            return Err(Error::config("dataset needs ≥ 1 sample and 2..=255 classes"));
        }
        if config.dims.iter().any(|&d| d < 8) {
            return Err(Error::config(format!("extents {:?} too small (min 8)", config.dims)));
        }
        let samples = (0..config.count)
            .map(|i| generate_sample(&config, &mut sample_rng(config.seed, i)))
            .collect();
        Ok(SyntheticDataset { config, samples })
    }

    pub fn split_index(&self) -> usize {
        let n = self.samples.len();
        if n < 2 {
            return n;
        }
        (n - (n / 5).max(1)).max(1)
    }

    pub fn train(&self) -> &[Sample] {
        &self.samples[..self.split_index()]
    }

    /// Last 20% of the samples (at least one when there are two or more).
    pub fn val(&self) -> &[Sample] {
        &self.samples[self.split_index()..]
    }
}

fn generate_sample(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Sample {
    let [d, h, w] = cfg.dims;
    let n = d * h * w;
    loop {
        let mut labels = vec![0u8; n];
        for c in 1..cfg.classes {
            for _ in 0..cfg.ellipsoids_per_class {
                let radius: [Real; 3] = cfg.dims.map(|e| rng.random_range(e as Real / 8.0..=e as Real / 4.0));
                let centre: [Real; 3] =
                    std::array::from_fn(|a| rng.random_range(radius[a]..=cfg.dims[a] as Real - 1.0 - radius[a]));
                for z in 0..d {
                    for y in 0..h {
                        for x in 0..w {
                            let p = [z as Real, y as Real, x as Real];
                            let q: Real = (0..3).map(|a| ((p[a] - centre[a]) / radius[a]).powi(2)).sum();
                            if q <= 1.0 {
                                labels[(z * h + y) * w + x] = c as u8;
                            }
                        }
                    }
                }
            }
        }
        let mut present = vec![false; cfg.classes];
        labels.iter().for_each(|&l| present[l as usize] = true);
        if present.iter().all(|&p| p) {
            let image = paint(cfg, &labels, rng);
            return Sample {
                image,
                labels,
                dims: cfg.dims,
            };
        }
    }
}

fn paint(cfg: &SyntheticConfig, labels: &[u8], rng: &mut ChaCha8Rng) -> Tensor {
    let [d, h, w] = cfg.dims;
    let sigma = cfg.noise;
    let (gap, bias_amp) = match cfg.kind {
        DataKind::Separable => (4.0 * sigma, 0.0),
        DataKind::HighVariance => (0.5 * sigma, 2.0 * sigma),
    };
    // Smooth bias field: a random linear ramp.
    let slope: [Real; 3] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0) * bias_amp);
    let mut data = Vec::with_capacity(labels.len());
    for (i, &l) in labels.iter().enumerate() {
        let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
        let ramp = slope[0] * (z as Real / d as Real - 0.5)
            + slope[1] * (y as Real / h as Real - 0.5)
            + slope[2] * (x as Real / w as Real - 0.5);
        let noise: Real = StandardNormal.sample(rng);
        data.push(l as Real * gap + ramp + sigma * noise);
    }
    Tensor::new(&[1, d, h, w], data).expect("sized")
}
