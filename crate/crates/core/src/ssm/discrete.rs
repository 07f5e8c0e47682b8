use nalgebra::{DMatrix, DVector, RowDVector};

use super::hippo::{hippo_b, hippo_init};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Continuous single-input single-output system `h' = Ah + Bx, y = Ch`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    pub a: DMatrix<Real>,
    pub b: DVector<Real>,
    pub c: RowDVector<Real>,
    pub delta: Real,
}

/// Zero-order-hold discretisation of an [`SsmParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    pub a_bar: DMatrix<Real>,
    pub b_bar: DVector<Real>,
    pub c: RowDVector<Real>,
}

/// Convolution kernel `K̄[i] = C Āⁱ B̄`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmKernel {
    pub k_bar: Vec<Real>,
}

impl SsmParams {
    pub fn new(a: DMatrix<Real>, b: DVector<Real>, c: RowDVector<Real>, delta: Real) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n || b.len() != n || c.len() != n {
            return Err(Error::shape(
                "SsmParams",
                format!("A {}x{}, B {}, C {}", a.nrows(), a.ncols(), b.len(), c.len()),
            ));
        }
        if !(delta > 0.0) {
            return Err(Error::config(format!("step size must be positive, got {delta}")));
        }
        Ok(SsmParams { a, b, c, delta })
    }

    /// HiPPO-LegS `A` and `B` with the given readout.
    pub fn hippo(c: RowDVector<Real>, delta: Real) -> Result<Self> {
        let n = c.len();
        Self::new(hippo_init(n), hippo_b(n), c, delta)
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }
}

fn norm1(m: &DMatrix<Real>) -> Real {
    m.column_iter().map(|c| c.abs().sum()).fold(0.0, Real::max)
}

/// Matrix exponential by Taylor series with scaling and squaring.
///
/// The argument is scaled by `2⁻ˢ` until its 1-norm is below 0.5, the series
/// is summed until a term's norm drops below 1e-16, and the result is squared
/// `s` times.
pub fn expm(m: &DMatrix<Real>) -> Result<DMatrix<Real>> {
    let n = m.nrows();
    let norm = norm1(m);
    if !norm.is_finite() {
        return Err(Error::numerical("matrix exponential of non-finite matrix"));
    }
    let mut s = 0u32;
    while norm / (2.0 as Real).powi(s as i32) >= 0.5 {
        s += 1;
    }
    let x = m / (2.0 as Real).powi(s as i32);
    let mut sum = DMatrix::<Real>::identity(n, n);
    let mut term = DMatrix::<Real>::identity(n, n);
    for k in 1..=60 {
        term = &term * &x / k as Real;
        sum += &term;
        if norm1(&term) < 1e-16 {
            break;
        }
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    if sum.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(format!(
            "matrix exponential overflowed (‖M‖₁ = {norm:e})"
        )));
    }
    Ok(sum)
}

/// `Ā = exp(ΔA)`, `B̄ = Δ·(I + ΔA/2! + (ΔA)²/3! + …)·B`.
///
/// Both come from one exponential of the augmented matrix
/// `[[ΔA, ΔB], [0, 0]]`, whose top-right block is exactly the `B̄` series.
/// This stays well defined when `A` is singular.
pub fn zoh_discretize(p: &SsmParams) -> Result<DiscreteSsm> {
    let n = p.state_dim();
    if !(p.delta > 0.0) {
        return Err(Error::config(format!("step size must be positive, got {}", p.delta)));
    }
    let mut aug = DMatrix::<Real>::zeros(n + 1, n + 1);
    aug.view_mut((0, 0), (n, n)).copy_from(&(&p.a * p.delta));
    aug.view_mut((0, n), (n, 1)).copy_from(&(&p.b * p.delta));
    let e = expm(&aug)?;
    Ok(DiscreteSsm {
        a_bar: e.view((0, 0), (n, n)).into_owned(),
        b_bar: e.view((0, n), (n, 1)).column(0).into_owned(),
        c: p.c.clone(),
    })
}

impl DiscreteSsm {
    pub fn state_dim(&self) -> usize {
        self.a_bar.nrows()
    }

    /// Largest eigenvalue modulus of `Ā`.
    pub fn spectral_radius(&self) -> Real {
        self.a_bar
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, Real::max)
    }
}

/// `hₜ = Ā hₜ₋₁ + B̄ xₜ`, `yₜ = C hₜ`, starting from `h0` (zero when `None`).
pub fn recurrent_scan(d: &DiscreteSsm, x: &[Real], h0: Option<&DVector<Real>>) -> Vec<Real> {
    let mut h = h0.cloned().unwrap_or_else(|| DVector::zeros(d.state_dim()));
    x.iter()
        .map(|&xt| {
            h = &d.a_bar * &h + &d.b_bar * xt;
            d.c.dot(&h.transpose())
        })
        .collect()
}

/// `K̄[i] = C Āⁱ B̄` by repeated matrix-vector products.
pub fn kernel_materialize(d: &DiscreteSsm, len: usize) -> SsmKernel {
    let mut v = d.b_bar.clone();
    let mut k_bar = Vec::with_capacity(len);
    for i in 0..len {
        if i > 0 {
            v = &d.a_bar * v;
        }
        k_bar.push(d.c.dot(&v.transpose()));
    }
    SsmKernel { k_bar }
}

/// Causal convolution `yₜ = Σ_{i≤t} K̄[i]·x[t−i]`.
pub fn kernel_apply(k: &SsmKernel, x: &[Real]) -> Result<Vec<Real>> {
    if k.k_bar.len() != x.len() {
        return Err(Error::shape(
            "kernel_apply",
            format!("kernel of length {} for sequence of length {}", k.k_bar.len(), x.len()),
        ));
    }
    Ok((0..x.len())
        .map(|t| (0..=t).map(|i| k.k_bar[i] * x[t - i]).sum())
        .collect())
}

/// Lower-triangular operator `M[t,s] = C Ā^{t−s} B̄` with `recurrent_scan(x) = M·x`.
pub fn attention_matrix(d: &DiscreteSsm, len: usize) -> DMatrix<Real> {
    let k = kernel_materialize(d, len);
    DMatrix::from_fn(len, len, |t, s| if s <= t { k.k_bar[t - s] } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(a: Real, b: Real, c: Real, delta: Real) -> SsmParams {
        SsmParams::new(
            DMatrix::from_element(1, 1, a),
            DVector::from_element(1, b),
            RowDVector::from_element(1, c),
            delta,
        )
        .unwrap()
    }

    fn taylor_oracle(m: &DMatrix<Real>, terms: usize) -> DMatrix<Real> {
        let n = m.nrows();
        let mut sum = DMatrix::identity(n, n);
        let mut term = DMatrix::identity(n, n);
        for k in 1..terms {
            term = term * m / k as Real;
            sum += &term;
        }
        sum
    }

    #[test]
    fn scalar_closed_form() {
        let d = zoh_discretize(&scalar(-1.0, 1.0, 1.0, (2.0 as Real).ln())).unwrap();
        assert!((d.a_bar[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((d.b_bar[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn small_step_limit() {
        let p = SsmParams::hippo(RowDVector::from_element(4, 1.0), 1e-8).unwrap();
        let d = zoh_discretize(&p).unwrap();
        assert!((&d.a_bar - DMatrix::identity(4, 4)).abs().max() < 1e-7);
        assert!((&d.b_bar - &p.b * 1e-8).abs().max() < 1e-7 * 1e-8 * 10.0);
    }

    #[test]
    fn singular_a_gives_delta_b() {
        let p = SsmParams::new(
            DMatrix::zeros(3, 3),
            DVector::from_vec(vec![1.0, -2.0, 0.5]),
            RowDVector::from_element(3, 1.0),
            0.25,
        )
        .unwrap();
        let d = zoh_discretize(&p).unwrap();
        assert!((&d.b_bar - &p.b * 0.25).abs().max() < 1e-12);
        assert!((&d.a_bar - DMatrix::identity(3, 3)).abs().max() == 0.0);
    }

    #[test]
    fn matches_series_oracle_on_hippo() {
        let p = SsmParams::hippo(RowDVector::from_element(4, 1.0), 0.1).unwrap();
        let d = zoh_discretize(&p).unwrap();
        let oracle = taylor_oracle(&(&p.a * 0.1), 30);
        assert!((&d.a_bar - &oracle).abs().max() < 1e-12);
        // B̄ = A⁻¹(Ā − I)B since HiPPO A is invertible.
        let inv = p.a.clone().try_inverse().unwrap();
        let b_oracle = inv * (&oracle - DMatrix::identity(4, 4)) * &p.b;
        assert!((&d.b_bar - b_oracle).abs().max() < 1e-12);
    }

    #[test]
    fn expm_agrees_with_nalgebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let m = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-3.0..3.0));
            let ours = expm(&m).unwrap();
            let theirs = m.clone().exp();
            let scale = theirs.abs().max().max(1.0);
            assert!((ours - theirs).abs().max() / scale < 1e-11);
        }
    }

    #[test]
    fn overflow_is_numerical_error() {
        let p = scalar(1e6, 1.0, 1.0, 1.0);
        assert!(matches!(zoh_discretize(&p), Err(Error::Numerical(_))));
    }

    #[test]
    fn hippo_discretisation_is_stable() {
        for delta in [1e-3, 1e-2, 1e-1, 1.0] {
            let p = SsmParams::hippo(RowDVector::from_element(8, 1.0), delta).unwrap();
            let r = zoh_discretize(&p).unwrap().spectral_radius();
            assert!(r < 1.0, "Δ={delta}: ρ={r}");
        }
    }

    #[test]
    fn hand_unrolled_recursion() {
        let d = DiscreteSsm {
            a_bar: DMatrix::from_element(1, 1, 0.5),
            b_bar: DVector::from_element(1, 0.5),
            c: RowDVector::from_element(1, 1.0),
        };
        assert_eq!(recurrent_scan(&d, &[1.0, 0.0, 0.0], None), vec![0.5, 0.25, 0.125]);
        assert_eq!(kernel_materialize(&d, 3).k_bar, vec![0.5, 0.25, 0.125]);
        assert_eq!(recurrent_scan(&d, &[0.0; 4], None), vec![0.0; 4]);
    }

    #[test]
    fn initial_state_propagates() {
        let d = DiscreteSsm {
            a_bar: DMatrix::from_element(1, 1, 0.5),
            b_bar: DVector::from_element(1, 1.0),
            c: RowDVector::from_element(1, 2.0),
        };
        let y = recurrent_scan(&d, &[0.0, 0.0], Some(&DVector::from_element(1, 4.0)));
        assert_eq!(y, vec![4.0, 2.0]);
    }

    #[test]
    fn impulse_response_is_kernel() {
        let p = SsmParams::hippo(RowDVector::from_fn(4, |_, i| 1.0 / (i + 1) as Real), 0.05).unwrap();
        let d = zoh_discretize(&p).unwrap();
        let k = kernel_materialize(&d, 10);
        let mut x = vec![0.0; 10];
        x[0] = 1.0;
        assert_eq!(kernel_apply(&k, &x).unwrap(), k.k_bar);
        assert!(kernel_apply(&k, &x[..9]).is_err());
    }

    #[test]
    fn zero_readout_gives_zero_kernel() {
        let p = SsmParams::hippo(RowDVector::zeros(4), 0.1).unwrap();
        let k = kernel_materialize(&zoh_discretize(&p).unwrap(), 8);
        assert!(k.k_bar.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn length_one_kernel_scales() {
        let k = SsmKernel { k_bar: vec![2.5] };
        assert_eq!(kernel_apply(&k, &[3.0]).unwrap(), vec![7.5]);
    }

    #[test]
    fn hippo_kernel_decays() {
        // Single-mode readout of the slowest state, so the kernel is a
        // positive multiple of a decaying exponential.
        let c = RowDVector::from_fn(4, |_, i| if i == 0 { 1.0 } else { 0.0 });
        let d = zoh_discretize(&SsmParams::hippo(c, 0.1).unwrap()).unwrap();
        let k = kernel_materialize(&d, 32).k_bar;
        assert!(k.windows(2).all(|w| w[1].abs() < w[0].abs()));
    }

    #[test]
    fn attention_reproduces_scan() {
        let p = SsmParams::hippo(RowDVector::from_fn(4, |_, i| (i as Real).cos()), 0.2).unwrap();
        let d = zoh_discretize(&p).unwrap();
        let x: Vec<Real> = (0..12).map(|i| (i as Real * 0.9).sin()).collect();
        let m = attention_matrix(&d, 12);
        let y = &m * DVector::from_vec(x.clone());
        let r = recurrent_scan(&d, &x, None);
        for (a, b) in y.iter().zip(&r) {
            assert!((a - b).abs() < 1e-10);
        }
        let cb = d.c.dot(&d.b_bar.transpose());
        assert!((0..12).all(|i| m[(i, i)] == cb));
        assert!((0..12).all(|t| (t + 1..12).all(|s| m[(t, s)] == 0.0)));
    }
}
