//! Low-rank thin-plate radial basis for the outcome model's smooth terms.
//!
//! Predictor coordinates are standardized before distances are taken. The
//! knot Gram matrix is only conditionally positive definite, so its inverse
//! square root is formed from absolute eigenvalues, truncating modes with
//! `|lambda| < 1e-10`.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

pub const EIGEN_TOLERANCE: f64 = 1e-10;
pub const DEFAULT_MAX_LOCATIONS: usize = 2000;
const MAX_DIM: usize = 8;

/// Smallest `m` with `2m > d`.
pub fn smoothness_order(d: usize) -> usize {
    d / 2 + 1
}

/// Thin-plate radial function `C(r)` of order `m` in dimension `d`.
pub fn radial_kernel(r: f64, m: usize, d: usize) -> f64 {
    assert!(r >= 0.0, "radial kernel needs a distance, got {r}");
    assert!(2 * m > d, "order {m} too small for dimension {d}");
    if r == 0.0 {
        return 0.0;
    }
    let p = (2 * m - d) as i32;
    if d % 2 == 1 {
        r.powi(p)
    } else {
        r.powi(p) * r.ln()
    }
}

/// Default knot count `min(30, floor(n / 4))`.
pub fn default_knot_count(n: usize) -> usize {
    (n / 4).min(30)
}

/// Per-coordinate centering and scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Zero mean, unit variance per column. Constant columns keep scale 1.
    pub fn fit(points: &DMatrix<f64>) -> Self {
        let n = points.nrows() as f64;
        let (mut mean, mut scale) = (Vec::new(), Vec::new());
        for col in points.column_iter() {
            let m = col.sum() / n;
            let var = if n > 1.0 {
                col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            mean.push(m);
            scale.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Standardizer { mean, scale }
    }

    pub fn identity(d: usize) -> Self {
        Standardizer {
            mean: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_row(&self, v: &[f64], out: &mut [f64]) {
        for k in 0..v.len() {
            out[k] = (v[k] - self.mean[k]) / self.scale[k];
        }
    }

    pub fn apply(&self, points: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(points.nrows(), points.ncols(), |i, j| (points[(i, j)] - self.mean[j]) / self.scale[j])
    }
}

fn distinct_rows(points: &DMatrix<f64>) -> Vec<usize> {
    let mut seen = HashSet::new();
    (0..points.nrows())
        .filter(|&i| {
            // -0.0 and 0.0 are the same location.
            let key: Vec<u64> = points.row(i).iter().map(|v| (v + 0.0).to_bits()).collect();
            seen.insert(key)
        })
        .collect()
}

fn sq_dist(points: &DMatrix<f64>, a: usize, b: usize) -> f64 {
    points
        .row(a)
        .iter()
        .zip(points.row(b).iter())
        .map(|(x, y)| (x - y).powi(2))
        .sum()
}

/// Choose `k` knots among the distinct rows of `points`.
///
/// Rows are deduplicated, subsampled to `max_locations` when there are more,
/// then spread out by k-means++ seeding (each next knot drawn with
/// probability proportional to squared distance to the nearest chosen knot).
pub fn select_knots(points: &DMatrix<f64>, k: usize, max_locations: usize, seed: u64) -> Result<DMatrix<f64>> {
    if k == 0 {
        return Err(Error::validation("knot count must be positive"));
    }
    let mut candidates = distinct_rows(points);
    if k > candidates.len() {
        return Err(Error::validation(format!(
            "{k} knots requested but only {} distinct locations",
            candidates.len()
        )));
    }
    let mut rng = rng_from_seed(seed);
    if candidates.len() > max_locations {
        let mut picked: Vec<usize> = index::sample(&mut rng, candidates.len(), max_locations).into_vec();
        picked.sort_unstable();
        candidates = picked.into_iter().map(|i| candidates[i]).collect();
    }
    let chosen = kmeans_pp(points, &candidates, k, &mut rng);
    Ok(DMatrix::from_fn(k, points.ncols(), |r, c| points[(chosen[r], c)]))
}

fn kmeans_pp<R: Rng>(points: &DMatrix<f64>, candidates: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    let first = candidates[rng.random_range(0..candidates.len())];
    let mut chosen = vec![first];
    let mut d2: Vec<f64> = candidates.iter().map(|&c| sq_dist(points, c, first)).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (idx, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(idx);
                    if u < w {
                        break;
                    }
                    u -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            unreachable!("fewer distinct candidates than knots")
        };
        let c = candidates[next];
        chosen.push(c);
        for (idx, &cand) in candidates.iter().enumerate() {
            d2[idx] = d2[idx].min(sq_dist(points, cand, c));
        }
    }
    chosen
}

/// Knots, kernel order and the Gram inverse square root.
#[derive(Debug, Clone)]
pub struct SplineBasis {
    /// Knots in standardized coordinates, one per row.
    pub knots: DMatrix<f64>,
    pub dim: usize,
    pub order: usize,
    pub omega: DMatrix<f64>,
    pub omega_inv_sqrt: DMatrix<f64>,
    /// Eigenvectors of `omega` that survived truncation (columns).
    pub retained_vectors: DMatrix<f64>,
    pub standardizer: Standardizer,
}

impl SplineBasis {
    /// Build from knots given in the same coordinates as future points.
    pub fn new(knots: &DMatrix<f64>, order: usize, standardizer: Standardizer) -> Result<Self> {
        let d = knots.ncols();
        if standardizer.dim() != d {
            return Err(Error::validation("standardizer dimension does not match knots"));
        }
        if 2 * order <= d {
            return Err(Error::validation(format!("order {order} needs 2m > d = {d}")));
        }
        Self::from_standardized_knots(standardizer.apply(knots), order, standardizer)
    }

    fn from_standardized_knots(knots: DMatrix<f64>, order: usize, standardizer: Standardizer) -> Result<Self> {
        let d = knots.ncols();
        if d == 0 || d > MAX_DIM {
            return Err(Error::validation(format!("spline dimension must be 1..={MAX_DIM}, got {d}")));
        }
        let k = knots.nrows();
        let omega = DMatrix::from_fn(k, k, |a, b| radial_kernel(sq_dist(&knots, a, b).sqrt(), order, d));
        let eig = SymmetricEigen::new(omega.clone());
        let keep: Vec<usize> = (0..k).filter(|&j| eig.eigenvalues[j].abs() >= EIGEN_TOLERANCE).collect();
        if keep.is_empty() {
            return Err(Error::DegenerateBasis);
        }
        let q = DMatrix::from_fn(k, keep.len(), |i, j| eig.eigenvectors[(i, keep[j])]);
        let inv_sqrt = DVector::from_iterator(keep.len(), keep.iter().map(|&j| eig.eigenvalues[j].abs().powf(-0.5)));
        let omega_inv_sqrt = &q * DMatrix::from_diagonal(&inv_sqrt) * q.transpose();
        Ok(SplineBasis {
            knots,
            dim: d,
            order,
            omega,
            omega_inv_sqrt,
            retained_vectors: q,
            standardizer,
        })
    }

    /// Standardize `points`, choose knots among them (in standardized
    /// coordinates) and build the basis with the default order.
    pub fn from_points(points: &DMatrix<f64>, k: usize, seed: u64) -> Result<Self> {
        let standardizer = Standardizer::fit(points);
        let knots = select_knots(&standardizer.apply(points), k, DEFAULT_MAX_LOCATIONS, seed)?;
        Self::from_standardized_knots(knots, smoothness_order(points.ncols()), standardizer)
    }

    pub fn n_knots(&self) -> usize {
        self.knots.nrows()
    }

    pub fn rank(&self) -> usize {
        self.retained_vectors.ncols()
    }

    fn kernel_at(&self, s: &[f64], k: usize) -> f64 {
        let r = (0..self.dim).map(|c| (s[c] - self.knots[(k, c)]).powi(2)).sum::<f64>().sqrt();
        radial_kernel(r, self.order, self.dim)
    }

    fn standardized(&self, v: &[f64]) -> [f64; MAX_DIM] {
        assert!(v.len() == self.dim && self.dim <= MAX_DIM, "point dimension mismatch");
        let mut s = [0.0; MAX_DIM];
        self.standardizer.apply_row(v, &mut s[..self.dim]);
        s
    }

    /// Row of `R`: kernel values from a raw point to every knot.
    pub fn kernel_row(&self, v: &[f64], out: &mut [f64]) {
        let s = self.standardized(v);
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.kernel_at(&s, k);
        }
    }

    /// `R(v) . coef` for coefficients on the raw kernel scale.
    pub fn kernel_dot(&self, v: &[f64], coef: &[f64]) -> f64 {
        let s = self.standardized(v);
        coef.iter().enumerate().map(|(k, c)| c * self.kernel_at(&s, k)).sum()
    }

    /// Map coefficients on `U` to coefficients on `R`: `Omega^{-1/2} b`.
    pub fn kernel_coefficients(&self, b: &[f64]) -> Vec<f64> {
        (&self.omega_inv_sqrt * DVector::from_column_slice(b)).iter().copied().collect()
    }

    /// Row of `U = R Omega^{-1/2}`.
    pub fn design_row(&self, v: &[f64], out: &mut [f64]) {
        let k = self.n_knots();
        let mut r = vec![0.0; k];
        self.kernel_row(v, &mut r);
        for (j, o) in out.iter_mut().enumerate() {
            *o = (0..k).map(|a| r[a] * self.omega_inv_sqrt[(a, j)]).sum();
        }
    }

    pub fn kernel_matrix(&self, points: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(points.nrows(), self.n_knots());
        let mut buf = vec![0.0; self.n_knots()];
        for i in 0..points.nrows() {
            let v: Vec<f64> = points.row(i).iter().copied().collect();
            self.kernel_row(&v, &mut buf);
            out.row_mut(i).copy_from_slice(&buf);
        }
        out
    }

    pub fn design(&self, points: &DMatrix<f64>) -> DMatrix<f64> {
        self.kernel_matrix(points) * &self.omega_inv_sqrt
    }

    /// `max |Q_r^T (Omega^{-1/2} Omega Omega^{-1/2}) Q_r - I_r|`, with the
    /// sign of each retained eigenvalue divided out. On the retained space
    /// the whitening is exact up to these signs.
    pub fn whitening_error(&self) -> f64 {
        let abs_omega = self.abs_omega();
        let w = self.retained_vectors.transpose() * &self.omega_inv_sqrt * abs_omega * &self.omega_inv_sqrt * &self.retained_vectors;
        (w - DMatrix::identity(self.rank(), self.rank())).amax()
    }

    /// `|Omega| = Q |Lambda| Q^T` over the retained modes.
    pub fn abs_omega(&self) -> DMatrix<f64> {
        let q = &self.retained_vectors;
        let lam = q.transpose() * &self.omega * q;
        let abs = DMatrix::from_diagonal(&DVector::from_iterator(self.rank(), (0..self.rank()).map(|j| lam[(j, j)].abs())));
        q * abs * q.transpose()
    }
}

/// Kernel matrix `R`, Gram matrix and `U = R Omega^{-1/2}` without any
/// standardization.
pub fn build_basis(points: &DMatrix<f64>, knots: &DMatrix<f64>, order: usize) -> Result<(DMatrix<f64>, SplineBasis)> {
    if points.ncols() != knots.ncols() {
        return Err(Error::validation(format!(
            "points have {} columns, knots {}",
            points.ncols(),
            knots.ncols()
        )));
    }
    let basis = SplineBasis::new(knots, order, Standardizer::identity(knots.ncols()))?;
    Ok((basis.design(points), basis))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_points(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng_from_seed(seed);
        DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn kernel_examples() {
        assert_eq!(smoothness_order(3), 2);
        assert_eq!(smoothness_order(2), 2);
        assert_eq!(smoothness_order(1), 1);
        assert_eq!(radial_kernel(2.0, 2, 3), 2.0);
        assert_eq!(radial_kernel(0.0, 2, 3), 0.0);
        assert_eq!(radial_kernel(0.0, 2, 2), 0.0);
        let e = std::f64::consts::E;
        assert!((radial_kernel(e, 2, 2) - e * e).abs() < 1e-12);
    }

    #[test]
    fn default_knot_counts() {
        assert_eq!(default_knot_count(500), 30);
        assert_eq!(default_knot_count(40), 10);
    }

    #[test]
    fn all_distinct_points_become_knots() {
        let p = random_points(10, 3, 1);
        let knots = select_knots(&p, 10, DEFAULT_MAX_LOCATIONS, 5).unwrap();
        let mut a: Vec<Vec<u64>> = (0..10).map(|i| p.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        let mut b: Vec<Vec<u64>> = (0..10).map(|i| knots.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn duplicates_are_removed_before_selection() {
        // Six collinear points, three of them repeats: three distinct locations.
        let p = DMatrix::from_row_slice(6, 2, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let knots = select_knots(&p, 3, DEFAULT_MAX_LOCATIONS, 0).unwrap();
        let mut firsts: Vec<f64> = knots.column(0).iter().copied().collect();
        firsts.sort_by(f64::total_cmp);
        assert_eq!(firsts, vec![0.0, 1.0, 2.0]);
        assert!(select_knots(&p, 4, DEFAULT_MAX_LOCATIONS, 0).is_err());
    }

    #[test]
    fn large_inputs_are_subsampled() {
        let p = random_points(5000, 2, 2);
        let knots = select_knots(&p, 20, DEFAULT_MAX_LOCATIONS, 3).unwrap();
        assert_eq!(knots.nrows(), 20);
        // The subsample is drawn first, so the first knot comes from it.
        let mut rng = rng_from_seed(3);
        let sub: Vec<usize> = index::sample(&mut rng, 5000, DEFAULT_MAX_LOCATIONS).into_vec();
        let mut sorted = sub.clone();
        sorted.sort_unstable();
        let first = sorted[rng.random_range(0..sorted.len())];
        assert_eq!(knots.row(0), p.row(first));
    }

    #[test]
    fn knot_selection_is_seeded() {
        let p = random_points(300, 3, 9);
        assert_eq!(select_knots(&p, 12, 2000, 4).unwrap(), select_knots(&p, 12, 2000, 4).unwrap());
    }

    #[test]
    fn points_equal_to_knots_give_root_of_abs_gram() {
        let knots = random_points(8, 3, 3);
        let (u, basis) = build_basis(&knots, &knots, 2).unwrap();
        // U = Omega Omega^{-1/2} = Q sign(L) |L|^{1/2} Q^T.
        let eig = SymmetricEigen::new(basis.omega.clone());
        let expect = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.signum() * l.abs().sqrt()))
            * eig.eigenvectors.transpose();
        assert!((u - expect).amax() < 1e-10);
    }

    #[test]
    fn singleton_knot_is_degenerate() {
        let knots = DMatrix::from_row_slice(1, 3, &[0.2, 0.4, 0.1]);
        assert!(matches!(build_basis(&knots, &knots, 2), Err(Error::DegenerateBasis)));
    }

    /// Square root of a positive definite matrix by Denman–Beavers iteration.
    fn sqrtm(a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = a.clone();
        let mut z = DMatrix::identity(a.nrows(), a.ncols());
        for _ in 0..100 {
            let yi = y.clone().try_inverse().unwrap();
            let zi = z.clone().try_inverse().unwrap();
            let ny = (&y + zi) * 0.5;
            z = (&z + yi) * 0.5;
            let delta = (&ny - &y).amax();
            y = ny;
            if delta < 1e-15 * y.amax() {
                break;
            }
        }
        y
    }

    #[test]
    fn gram_of_design_matches_dense_oracle() {
        let points = random_points(50, 3, 11);
        let knots = select_knots(&points, 10, DEFAULT_MAX_LOCATIONS, 1).unwrap();
        let (u, basis) = build_basis(&points, &knots, 2).unwrap();
        assert_eq!(basis.rank(), 10);
        let r = DMatrix::from_fn(50, 10, |i, k| {
            let d = (points.row(i) - knots.row(k)).norm();
            radial_kernel(d, 2, 3)
        });
        // U U^T = R |Omega|^{-1} R^T with |Omega| = (Omega^2)^{1/2}.
        let abs_omega = sqrtm(&(&basis.omega * &basis.omega));
        let oracle = &r * abs_omega.try_inverse().unwrap() * r.transpose();
        let got = &u * u.transpose();
        assert!((got - &oracle).amax() < 1e-6 * oracle.amax().max(1.0));
    }

    #[test]
    fn whitening_is_identity_on_retained_space() {
        for d in [2usize, 3] {
            let points = random_points(200, d, 20 + d as u64);
            let basis = SplineBasis::from_points(&points, 30, 7).unwrap();
            assert_eq!(basis.order, 2);
            assert!(basis.whitening_error() <= 1e-8, "d={d}: {}", basis.whitening_error());
        }
    }

    #[test]
    fn design_is_invariant_to_rescaling_a_coordinate() {
        let points = random_points(100, 3, 4);
        let mut scaled = points.clone();
        scaled.column_mut(1).iter_mut().for_each(|v| *v = 7.0 * *v + 3.0);
        let a = SplineBasis::from_points(&points, 15, 2).unwrap();
        let b = SplineBasis::from_points(&scaled, 15, 2).unwrap();
        assert!((a.design(&points) - b.design(&scaled)).amax() < 1e-8);
    }

    proptest! {
        #[test]
        fn rotation_leaves_design_unchanged(angle in 0.0f64..std::f64::consts::TAU, seed in 0u64..50) {
            let points = random_points(40, 2, seed);
            let knots = DMatrix::from_fn(8, 2, |i, j| points[(i * 5, j)]);
            let (c, s) = (angle.cos(), angle.sin());
            let rot = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
            let (u, _) = build_basis(&points, &knots, 2).unwrap();
            let (v, _) = build_basis(&(&points * &rot), &(&knots * &rot), 2).unwrap();
            prop_assert!((u - v).amax() < 1e-8);
        }
    }
}
