//! Dense kernels that the GP code leans on.
//!
//! The recursive Cholesky and triangular inverse split the matrix in halves
//! so that the bulk of the work lands in matrix products, which nalgebra
//! hands to a cache-blocked gemm. Below `LEAF` the plain nalgebra routines
//! are used.

use nalgebra::{DMatrix, DVector};

const LEAF: usize = 96;

/// Lower Cholesky factor of a symmetric matrix, or `None` when a pivot is
/// not strictly positive.
pub fn cholesky_lower(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    if n <= LEAF {
        let l = a.clone().cholesky()?.unpack();
        return if (0..n).all(|i| l[(i, i)].is_finite() && l[(i, i)] > 0.0) {
            Some(l)
        } else {
            None
        };
    }
    let h = n / 2;
    let m = n - h;
    let l11 = cholesky_lower(&a.view((0, 0), (h, h)).clone_owned())?;
    let l11_inv = lower_triangular_inverse(&l11);
    let l21 = a.view((h, 0), (m, h)) * l11_inv.transpose();
    let mut schur = a.view((h, h), (m, m)).clone_owned();
    schur.gemm(-1.0, &l21, &l21.transpose(), 1.0);
    let l22 = cholesky_lower(&schur)?;

    let mut l = DMatrix::zeros(n, n);
    l.view_mut((0, 0), (h, h)).copy_from(&l11);
    l.view_mut((h, 0), (m, h)).copy_from(&l21);
    l.view_mut((h, h), (m, m)).copy_from(&l22);
    Some(l)
}

/// Inverse of a lower-triangular matrix with nonzero diagonal.
pub fn lower_triangular_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    if n <= LEAF {
        let mut inv = DMatrix::identity(n, n);
        l.solve_lower_triangular_mut(&mut inv);
        return inv;
    }
    let h = n / 2;
    let m = n - h;
    let a_inv = lower_triangular_inverse(&l.view((0, 0), (h, h)).clone_owned());
    let d_inv = lower_triangular_inverse(&l.view((h, h), (m, m)).clone_owned());
    let off = -(&d_inv * (l.view((h, 0), (m, h)) * &a_inv));

    let mut inv = DMatrix::zeros(n, n);
    inv.view_mut((0, 0), (h, h)).copy_from(&a_inv);
    inv.view_mut((h, h), (m, m)).copy_from(&d_inv);
    inv.view_mut((h, 0), (m, h)).copy_from(&off);
    inv
}

/// Solves `L x = b` by forward substitution.
pub fn forward_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut x = b.clone();
    l.solve_lower_triangular_mut(&mut x);
    x
}

/// Solves `L Lᵀ x = b`.
pub fn cholesky_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut x = forward_solve(l, b);
    l.tr_solve_lower_triangular_mut(&mut x);
    x
}

/// `log(sum(exp(v)))` computed around the maximum.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &g * g.transpose() + DMatrix::identity(n, n) * (n as f64)
    }

    #[test]
    fn blocked_cholesky_reconstructs() {
        for &n in &[1, 5, 97, 250] {
            let a = random_spd(n, n as u64);
            let l = cholesky_lower(&a).unwrap();
            let err = (&l * l.transpose() - &a).amax();
            assert!(err < 1e-9 * a.amax(), "n={n} err={err}");
            for i in 0..n {
                for j in i + 1..n {
                    assert_eq!(l[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn blocked_cholesky_rejects_indefinite() {
        let mut a = random_spd(200, 3);
        a[(150, 150)] = -1.0;
        assert!(cholesky_lower(&a).is_none());
    }

    #[test]
    fn triangular_inverse_is_inverse() {
        let a = random_spd(300, 9);
        let l = cholesky_lower(&a).unwrap();
        let inv = lower_triangular_inverse(&l);
        let err = (&inv * &l - DMatrix::identity(300, 300)).amax();
        assert!(err < 1e-10, "err={err}");
    }

    #[test]
    fn logsumexp_handles_extremes() {
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
        assert!((logsumexp(&[1e4, 1e4]) - (1e4 + 2f64.ln())).abs() < 1e-9);
        assert!((logsumexp(&[-1e4, -1e4]) - (-1e4 + 2f64.ln())).abs() < 1e-9);
    }
}
