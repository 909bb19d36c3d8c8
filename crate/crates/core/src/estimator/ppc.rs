//! Posterior predictive checks: replicate outcomes at each unit's observed
//! exposure and compare summary statistics with the observed data.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::EstimationResult;
use crate::mcmc::quantile_sorted;
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PpcStatistic {
    Mean,
    Sd,
    Quantile(f64),
}

impl PpcStatistic {
    pub fn defaults() -> Vec<PpcStatistic> {
        vec![
            PpcStatistic::Mean,
            PpcStatistic::Sd,
            PpcStatistic::Quantile(0.1),
            PpcStatistic::Quantile(0.5),
            PpcStatistic::Quantile(0.9),
        ]
    }

    pub fn id(&self) -> String {
        match self {
            PpcStatistic::Mean => "mean".into(),
            PpcStatistic::Sd => "sd".into(),
            PpcStatistic::Quantile(q) => format!("q{}", (q * 100.0).round()),
        }
    }

    /// Evaluate on data sorted ascending.
    fn eval_sorted(&self, sorted: &[f64]) -> f64 {
        let n = sorted.len() as f64;
        match self {
            PpcStatistic::Mean => sorted.iter().sum::<f64>() / n,
            PpcStatistic::Sd => {
                let m = sorted.iter().sum::<f64>() / n;
                (sorted.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            }
            PpcStatistic::Quantile(q) => quantile_sorted(sorted, *q),
        }
    }

    pub fn eval(&self, data: &[f64]) -> f64 {
        let mut sorted = data.to_vec();
        sorted.sort_by(f64::total_cmp);
        self.eval_sorted(&sorted)
    }
}

#[derive(Debug, Clone)]
pub struct PpcResult {
    pub statistic: PpcStatistic,
    pub observed: f64,
    pub replicates: Vec<f64>,
    /// Share of replicates with `T(y_rep) >= T(y_obs)`.
    pub p_value: f64,
}

/// One replicated outcome vector per retained draw, at the observed
/// treatments and exposures, with unit weight.
pub fn ppc(result: &EstimationResult, statistics: &[PpcStatistic], seed: u64) -> Vec<PpcResult> {
    let ctx = &result.context;
    let cfg = &result.config.mcmc;
    let mut rng = rng_from_seed(seed);
    let mut observed_sorted = ctx.y.clone();
    observed_sorted.sort_by(f64::total_cmp);
    let observed: Vec<f64> = statistics.iter().map(|s| s.eval_sorted(&observed_sorted)).collect();
    let mut replicates: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.n_retained()); statistics.len()];
    let n = ctx.units.len();
    let mut row = vec![0.0; ctx.n_linear()];
    let mut yrep = vec![0.0; n];
    let retained = (0..cfg.iterations).filter(|&t| cfg.is_retained(t));
    for (t, state) in retained.zip(&result.outcome.draws) {
        let phi = ctx.phi(&result.ps.states[t]);
        let lam = ctx.lambda_observed(&result.gps.states[t]);
        let coef = ctx.basis.as_ref().map(|b| {
            (
                b,
                b.kernel_coefficients(state.b_u.as_slice()),
                b.kernel_coefficients(state.b_uz.as_slice()),
            )
        });
        let sd = state.nu.sqrt();
        for i in 0..n {
            ctx.linear_row(ctx.z[i], ctx.g[i], phi[i], lam[i], &mut row);
            let mut m: f64 = row.iter().zip(state.beta.iter()).map(|(a, b)| a * b).sum();
            if let Some((b, cu, cuz)) = &coef {
                let (pt, d) = ctx.spline_point(ctx.g[i], phi[i], lam[i]);
                let zf = f64::from(ctx.z[i]);
                let c: Vec<f64> = cu.iter().zip(cuz).map(|(a, bz)| a + zf * bz).collect();
                m += b.kernel_dot(&pt[..d], &c);
            }
            if ctx.spec.include_random_effects {
                m += state.u[ctx.community[i]];
            }
            yrep[i] = m + sd * rng.sample::<f64, _>(StandardNormal);
        }
        yrep.sort_by(f64::total_cmp);
        for (k, s) in statistics.iter().enumerate() {
            replicates[k].push(s.eval_sorted(&yrep));
        }
    }
    statistics
        .iter()
        .zip(observed)
        .zip(replicates)
        .map(|((&statistic, observed), replicates)| {
            let above = replicates.iter().filter(|&&r| r >= observed).count();
            PpcResult {
                statistic,
                observed,
                p_value: above as f64 / replicates.len() as f64,
                replicates,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statistics() {
        let d = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(PpcStatistic::Mean.eval(&d), 2.5);
        assert!((PpcStatistic::Sd.eval(&d) - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(PpcStatistic::Quantile(0.5).eval(&d), 2.5);
        assert_eq!(PpcStatistic::Quantile(0.1).id(), "q10");
    }
}
