//! Causal contrasts computed draw by draw from the ADRF posterior.

use serde::{Deserialize, Serialize};

use super::AdrfPosterior;
use crate::error::{Error, Result};
use crate::mcmc::{summarize, ParamSummary};

const PI_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Estimand {
    /// `mu(1, g) - mu(0, g)`.
    Tau { g: f64 },
    /// `mu(z, g) - mu(z, g')`.
    Delta { g: f64, g_prime: f64, z: u8 },
    /// `sum_g pi(g) tau(g)`; `pi` is aligned with the grid's g values.
    TauPi { pi: Vec<f64> },
    /// `sum_g (pi*(g) - pi'(g)) mu(z, g)`.
    DeltaPi { pi_star: Vec<f64>, pi_prime: Vec<f64>, z: u8 },
}

impl Estimand {
    pub fn id(&self) -> String {
        match self {
            Estimand::Tau { g } => format!("tau({g})"),
            Estimand::Delta { g, g_prime, z } => format!("delta({g},{g_prime},{z})"),
            Estimand::TauPi { .. } => "tau(pi)".to_string(),
            Estimand::DeltaPi { z, .. } => format!("Delta(pi*,pi',{z})"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EffectPosterior {
    pub id: String,
    pub draws: Vec<f64>,
    pub summary: ParamSummary,
    pub n_units: usize,
}

fn check_pi(pi: &[f64], n: usize) -> Result<()> {
    if pi.len() != n {
        return Err(Error::validation(format!("intervention has {} weights for {n} grid values", pi.len())));
    }
    if pi.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::validation("intervention weights must be non-negative"));
    }
    let total: f64 = pi.iter().sum();
    if (total - 1.0).abs() > PI_TOLERANCE {
        return Err(Error::validation(format!("intervention weights sum to {total}, not 1")));
    }
    Ok(())
}

fn column(adrf: &AdrfPosterior, z: u8, g: f64) -> Result<&[f64]> {
    let cell = adrf
        .cell_index(z, g)
        .ok_or_else(|| Error::validation(format!("grid has no cell (z={z}, g={g})")))?;
    Ok(&adrf.draws[cell])
}

fn weighted_sum(adrf: &AdrfPosterior, z: u8, weights: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; adrf.n_draws()];
    for (gi, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let col = column(adrf, z, adrf.g_values[gi])?;
        for (o, v) in out.iter_mut().zip(col) {
            *o += w * v;
        }
    }
    Ok(out)
}

pub fn effect_draws(adrf: &AdrfPosterior, estimand: &Estimand) -> Result<Vec<f64>> {
    let ng = adrf.g_values.len();
    match estimand {
        Estimand::Tau { g } => {
            let (a, b) = (column(adrf, 1, *g)?, column(adrf, 0, *g)?);
            Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
        }
        Estimand::Delta { g, g_prime, z } => {
            let (a, b) = (column(adrf, *z, *g)?, column(adrf, *z, *g_prime)?);
            Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
        }
        Estimand::TauPi { pi } => {
            check_pi(pi, ng)?;
            let a = weighted_sum(adrf, 1, pi)?;
            let b = weighted_sum(adrf, 0, pi)?;
            Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect())
        }
        Estimand::DeltaPi { pi_star, pi_prime, z } => {
            check_pi(pi_star, ng)?;
            check_pi(pi_prime, ng)?;
            let diff: Vec<f64> = pi_star.iter().zip(pi_prime).map(|(a, b)| a - b).collect();
            weighted_sum(adrf, *z, &diff)
        }
    }
}

pub fn effects(adrf: &AdrfPosterior, requests: &[Estimand]) -> Result<Vec<EffectPosterior>> {
    requests
        .iter()
        .map(|e| {
            let draws = effect_draws(adrf, e)?;
            let id = e.id();
            Ok(EffectPosterior {
                summary: summarize(&id, &draws),
                id,
                draws,
                n_units: adrf.units.len(),
            })
        })
        .collect()
}

/// `tau(g)` at every grid value, then `delta(g, g_prev, z)` for adjacent grid
/// values and both treatment arms.
pub fn default_estimands(adrf: &AdrfPosterior) -> Vec<Estimand> {
    let mut out = Vec::new();
    let both = adrf.z_values.contains(&0) && adrf.z_values.contains(&1);
    if both {
        out.extend(adrf.g_values.iter().map(|&g| Estimand::Tau { g }));
    }
    for &z in &adrf.z_values {
        for w in adrf.g_values.windows(2) {
            out.push(Estimand::Delta {
                g: w[1],
                g_prime: w[0],
                z,
            });
        }
    }
    out
}
