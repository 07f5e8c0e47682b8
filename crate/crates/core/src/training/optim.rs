use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

/// `init·(1 − e/max)^0.9`.
pub fn poly_lr(epoch: usize, max_epoch: usize, init_lr: Real) -> Result<Real> {
    if max_epoch == 0 || epoch > max_epoch {
        return Err(Error::config(format!("epoch {epoch} outside [0, {max_epoch}]")));
    }
    Ok(init_lr * (1.0 - epoch as Real / max_epoch as Real).powf(0.9))
}

fn check_finite(store: &ParamStore, i: usize, g: &[Real]) -> Result<()> {
    match g.iter().position(|v| !v.is_finite()) {
        Some(j) => Err(Error::numerical(format!(
            "non-finite gradient {} at {}[{j}]",
            g[j],
            store.name(store.ids().nth(i).expect("index in range"))
        ))),
        None => Ok(()),
    }
}

/// Heavy-ball SGD: `v ← μv + (g + λθ)`, `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: Real,
    pub weight_decay: Real,
    velocity: Vec<Vec<Real>>,
}

impl Sgd {
    pub fn new(momentum: Real, weight_decay: Real) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies one update from the gradients stored on each parameter and
    /// clears them. Parameters without a gradient count as zero gradient.
    /// Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, lr: Real) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for (i, &id) in ids.iter().enumerate() {
            if let Some(g) = store.get(id).grad() {
                check_finite(store, i, g)?;
            }
        }
        if self.velocity.len() != ids.len() {
            self.velocity = ids.iter().map(|&id| vec![0.0; store.get(id).numel()]).collect();
        }
        for (i, &id) in ids.iter().enumerate() {
            let t = store.get_mut(id);
            let g = t.grad().map(<[Real]>::to_vec);
            let v = &mut self.velocity[i];
            for (j, th) in t.data_mut().iter_mut().enumerate() {
                let gj = g.as_ref().map_or(0.0, |g| g[j]);
                v[j] = self.momentum * v[j] + gj + self.weight_decay * *th;
                *th -= lr * v[j];
            }
            t.zero_grad();
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    m: Vec<Vec<Real>>,
    v: Vec<Vec<Real>>,
    t: i32,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }
}

impl Adam {
    pub fn step(&mut self, store: &mut ParamStore, lr: Real) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for (i, &id) in ids.iter().enumerate() {
            if let Some(g) = store.get(id).grad() {
                check_finite(store, i, g)?;
            }
        }
        if self.m.len() != ids.len() {
            self.m = ids.iter().map(|&id| vec![0.0; store.get(id).numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, &id) in ids.iter().enumerate() {
            let t = store.get_mut(id);
            let Some(g) = t.grad().map(<[Real]>::to_vec) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, th) in t.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                *th -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
            t.zero_grad();
        }
        Ok(())
    }
}
