//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Numerical rank via singular values, relative tolerance `max(n, p) * eps`.
pub fn numerical_rank(x: &DMatrix<f64>) -> usize {
    if x.nrows() == 0 || x.ncols() == 0 {
        return 0;
    }
    let sv = x.clone().singular_values();
    let max = sv.max();
    if max == 0.0 {
        return 0;
    }
    let tol = max * (x.nrows().max(x.ncols()) as f64) * f64::EPSILON;
    sv.iter().filter(|&&s| s > tol).count()
}

pub fn ensure_full_column_rank(x: &DMatrix<f64>) -> Result<()> {
    let rank = numerical_rank(x);
    if rank < x.ncols() {
        return Err(Error::SingularDesign {
            rank,
            cols: x.ncols(),
        });
    }
    Ok(())
}

/// Draw from `N(P^{-1} b, P^{-1})` given a precision matrix `P` and
/// "canonical mean" `b`. Returns `None` if `P` is not positive definite.
pub fn sample_canonical_normal<R: Rng + ?Sized>(
    precision: &DMatrix<f64>,
    b: &DVector<f64>,
    rng: &mut R,
) -> Option<DVector<f64>> {
    let chol = precision.clone().cholesky()?;
    let mean = chol.solve(b);
    let xi = DVector::from_fn(b.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    // L^T v = xi  =>  v ~ N(0, P^{-1})
    let l = chol.l();
    let v = l
        .transpose()
        .solve_upper_triangular(&xi)
        .expect("Cholesky factor has a positive diagonal");
    Some(mean + v)
}

/// `X^T diag(w) X` for a dense design.
pub fn weighted_gram(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut xw = x.clone();
    for (i, &wi) in w.iter().enumerate() {
        xw.row_mut(i).scale_mut(wi);
    }
    x.transpose() * xw
}

/// `X^T diag(w) y`.
pub fn weighted_cross(x: &DMatrix<f64>, w: &[f64], y: &[f64]) -> DVector<f64> {
    let wy = DVector::from_iterator(y.len(), y.iter().zip(w).map(|(a, b)| a * b));
    x.tr_mul(&wy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn rank_detects_collinearity() {
        let x = DMatrix::from_row_slice(4, 3, &[1.0, 2.0, 3.0, 1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 5.0, 6.0]);
        assert_eq!(numerical_rank(&x), 2);
        assert!(matches!(ensure_full_column_rank(&x), Err(Error::SingularDesign { rank: 2, cols: 3 })));
    }

    #[test]
    fn canonical_normal_moments() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let b = DVector::from_vec(vec![1.0, -1.0]);
        let cov = p.clone().try_inverse().unwrap();
        let mean = &cov * &b;
        let mut rng = rng_from_seed(9);
        let n = 40_000;
        let draws: Vec<DVector<f64>> = (0..n).map(|_| sample_canonical_normal(&p, &b, &mut rng).unwrap()).collect();
        let m = draws.iter().fold(DVector::zeros(2), |a, d| a + d) / n as f64;
        for k in 0..2 {
            let se = (cov[(k, k)] / n as f64).sqrt();
            assert!((m[k] - mean[k]).abs() < 4.0 * se);
        }
        let c01 = draws.iter().map(|d| (d[0] - m[0]) * (d[1] - m[1])).sum::<f64>() / n as f64;
        assert!((c01 - cov[(0, 1)]).abs() < 0.02);
    }

    #[test]
    fn indefinite_precision_is_rejected() {
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let b = DVector::zeros(2);
        assert!(sample_canonical_normal(&p, &b, &mut rng_from_seed(1)).is_none());
    }
}
