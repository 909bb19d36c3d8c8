//! Exposure mappings: neighbor treatments to the neighborhood treatment `G_i`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::graph::Network;

/// Symmetric similarity `w(X_i, X_j)` used by the weighted exposure.
pub type SimilarityFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum ExposureSpec {
    /// Share of treated neighbors; undefined for isolated nodes.
    Proportion,
    /// Number of treated neighbors.
    Count,
    /// `sum_j A_ij w(X_i, X_j) Z_j`.
    Weighted(SimilarityFn),
}

impl fmt::Debug for ExposureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExposureSpec::Proportion => f.write_str("Proportion"),
            ExposureSpec::Count => f.write_str("Count"),
            ExposureSpec::Weighted(_) => f.write_str("Weighted(..)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExposureResult {
    /// `None` for isolated nodes under the proportion mapping.
    pub g: Vec<Option<f64>>,
    /// Nodes with at least one neighbor; only these enter estimation.
    pub eligible: Vec<bool>,
}

impl ExposureResult {
    pub fn eligible_indices(&self) -> Vec<usize> {
        self.eligible
            .iter()
            .enumerate()
            .filter_map(|(i, &e)| e.then_some(i))
            .collect()
    }

    /// Exposure values with isolated nodes mapped to zero.
    pub fn values_or_zero(&self) -> Vec<f64> {
        self.g.iter().map(|g| g.unwrap_or(0.0)).collect()
    }
}

/// Isolated nodes are flagged ineligible, but their own treatment still
/// counts toward the exposure of nodes pointing at them.
pub fn compute_exposure(
    net: &Network,
    z: &[u8],
    spec: &ExposureSpec,
    covariates: Option<&DMatrix<f64>>,
) -> Result<ExposureResult> {
    let n = net.n_nodes();
    if z.len() != n {
        return Err(Error::validation(format!("{} treatments for {} nodes", z.len(), n)));
    }
    if let Some(bad) = z.iter().find(|&&v| v > 1) {
        return Err(Error::validation(format!("treatment must be binary, found {bad}")));
    }
    let rows: Option<Vec<Vec<f64>>> = match spec {
        ExposureSpec::Weighted(_) => {
            let x = covariates
                .ok_or_else(|| Error::validation("weighted exposure requires covariates"))?;
            if x.nrows() != n {
                return Err(Error::validation(format!(
                    "{} covariate rows for {} nodes",
                    x.nrows(),
                    n
                )));
            }
            Some((0..n).map(|i| x.row(i).iter().copied().collect()).collect())
        }
        _ => None,
    };
    let mut g = Vec::with_capacity(n);
    let mut eligible = Vec::with_capacity(n);
    for i in 0..n {
        let nb = net.neighbors(i);
        let deg = nb.len();
        eligible.push(deg > 0);
        let treated = nb.iter().filter(|&&j| z[j] == 1).count();
        let value = match spec {
            ExposureSpec::Count => Some(treated as f64),
            ExposureSpec::Proportion => (deg > 0).then(|| treated as f64 / deg as f64),
            ExposureSpec::Weighted(w) => {
                let rows = rows.as_ref().expect("checked above");
                Some(
                    nb.iter()
                        .zip(net.weights(i))
                        .map(|(&j, &a)| a * w(&rows[i], &rows[j]) * f64::from(z[j]))
                        .sum(),
                )
            }
        };
        g.push(value);
    }
    Ok(ExposureResult { g, eligible })
}

/// Units for which exposure level `g` is considered attainable.
///
/// Count exposure: nodes with degree at least `g`. Proportion and weighted
/// exposure: every node with at least one neighbor, for any `g` in the
/// domain. Out-of-domain levels give an empty set with a warning.
pub fn feasible_set(net: &Network, g: f64, spec: &ExposureSpec) -> Vec<usize> {
    let in_domain = match spec {
        ExposureSpec::Proportion => (0.0..=1.0).contains(&g),
        ExposureSpec::Count => g >= 0.0 && g.fract() == 0.0,
        ExposureSpec::Weighted(_) => g.is_finite(),
    };
    if !in_domain {
        log::warn!("exposure level {g} is outside the domain of {spec:?}; feasible set is empty");
        return Vec::new();
    }
    (0..net.n_nodes())
        .filter(|&i| {
            let deg = net.degree(i);
            match spec {
                ExposureSpec::Count => deg as f64 >= g && deg >= 1,
                _ => deg >= 1,
            }
        })
        .collect()
}
