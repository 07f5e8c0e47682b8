use nalgebra::{DMatrix, DVector};

use crate::tensor::Real;

/// HiPPO-LegS state matrix: `−√(2n+1)·√(2k+1)` below the diagonal,
/// `−(n+1)` on it, zero above.
pub fn hippo_init(n: usize) -> DMatrix<Real> {
    assert!(n >= 1, "state dimension must be positive");
    DMatrix::from_fn(n, n, |r, c| {
        if r > c {
            -((2 * r + 1) as Real).sqrt() * ((2 * c + 1) as Real).sqrt()
        } else if r == c {
            -((r + 1) as Real)
        } else {
            0.0
        }
    })
}

/// Matching LegS input vector `B_n = √(2n+1)`.
pub fn hippo_b(n: usize) -> DVector<Real> {
    DVector::from_fn(n, |r, _| ((2 * r + 1) as Real).sqrt())
}

/// Diagonal of the LegS matrix, `−(n+1)`.
pub fn hippo_diagonal(n: usize) -> Vec<Real> {
    (0..n).map(|i| -((i + 1) as Real)).collect()
}
