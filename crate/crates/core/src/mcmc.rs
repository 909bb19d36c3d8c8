//! Shared MCMC plumbing: chain settings, Robbins–Monro step-size adaptation,
//! convergence diagnostics and draw export.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            iterations: 4000,
            burn_in: 2000,
            thin: 2,
            seed: 1,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 {
            return Err(Error::validation("thin must be at least 1"));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::validation(format!(
                "burn-in ({}) must be smaller than iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        Ok(())
    }

    /// Whether iteration `t` (0-based) is kept.
    pub fn is_retained(&self, t: usize) -> bool {
        t >= self.burn_in && (t - self.burn_in).is_multiple_of(self.thin)
    }

    pub fn n_retained(&self) -> usize {
        (self.iterations - self.burn_in).div_ceil(self.thin)
    }
}

/// Robbins–Monro adaptation of a log step size toward a target acceptance
/// rate. Frozen once burn-in ends.
#[derive(Debug, Clone)]
pub struct StepAdapter {
    log_scale: f64,
    target: f64,
    steps: usize,
}

impl StepAdapter {
    pub fn new(initial_scale: f64, target: f64) -> Self {
        StepAdapter {
            log_scale: initial_scale.ln(),
            target,
            steps: 0,
        }
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    /// Feed the acceptance probability of the latest proposal.
    pub fn update(&mut self, accept_prob: f64) {
        self.steps += 1;
        let gain = 1.0 / (self.steps as f64).powf(0.6);
        self.log_scale += gain * (accept_prob - self.target);
        self.log_scale = self.log_scale.clamp(-12.0, 6.0);
    }
}

/// Acceptance counter for the post-adaptation phase.
#[derive(Debug, Clone, Copy, Default)]
pub struct AcceptanceCounter {
    pub proposed: usize,
    pub accepted: usize,
}

impl AcceptanceCounter {
    pub fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        self.accepted += accepted as usize;
    }

    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Effective sample size of one chain, using Geyer's initial positive
/// sequence on the autocorrelations.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let m = mean(x);
    let c0: f64 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
    if c0 <= 0.0 {
        return n as f64;
    }
    let acf = |lag: usize| -> f64 {
        (0..n - lag).map(|t| (x[t] - m) * (x[t + lag] - m)).sum::<f64>() / (n as f64 * c0)
    };
    let mut sum = 0.0;
    let mut lag = 1;
    while lag + 1 < n {
        let pair = acf(lag) + acf(lag + 1);
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        lag += 2;
    }
    let tau = (1.0 + 2.0 * sum).max(1.0 / n as f64);
    n as f64 / tau
}

/// Split-R̂ over one or more chains of equal length.
pub fn split_rhat(chains: &[&[f64]]) -> f64 {
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| {
            let h = c.len() / 2;
            [&c[..h], &c[c.len() - h..]]
        })
        .filter(|h| h.len() >= 2)
        .collect();
    if halves.len() < 2 {
        return f64::NAN;
    }
    let len = halves.iter().map(|h| h.len()).min().unwrap() as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let within = halves.iter().map(|h| variance(h)).sum::<f64>() / halves.len() as f64;
    let between = len * variance(&means);
    if within <= 0.0 {
        return if between <= 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (len - 1.0) / len * within + between / len;
    (var_plus / within).sqrt()
}

/// Per-parameter convergence summary.
#[derive(Debug, Clone, Serialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
    pub ess: f64,
    pub split_rhat: f64,
}

pub fn summarize(name: &str, draws: &[f64]) -> ParamSummary {
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    ParamSummary {
        name: name.to_string(),
        mean: mean(draws),
        sd: if draws.len() > 1 { variance(draws).sqrt() } else { 0.0 },
        q025: quantile_sorted(&sorted, 0.025),
        q975: quantile_sorted(&sorted, 0.975),
        ess: effective_sample_size(draws),
        split_rhat: split_rhat(&[draws]),
    }
}

/// Linear-interpolation quantile (type 7) of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(data: &[f64], q: f64) -> f64 {
    let mut sorted = data.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, q)
}

/// Write retained draws as CSV: `draw,<name>...`, one row per draw.
pub fn write_draws_csv<W: Write, R: AsRef<[f64]>>(writer: W, names: &[String], draws: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["draw".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (m, d) in draws.iter().enumerate() {
        let mut rec = vec![m.to_string()];
        rec.extend(d.as_ref().iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn retained_count_matches_schedule() {
        let c = McmcConfig::default();
        let kept = (0..c.iterations).filter(|&t| c.is_retained(t)).count();
        assert_eq!(kept, c.n_retained());
        assert_eq!(kept, 1000);
        let odd = McmcConfig {
            iterations: 11,
            burn_in: 4,
            thin: 3,
            seed: 0,
        };
        assert_eq!((0..11).filter(|&t| odd.is_retained(t)).count(), odd.n_retained());
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(McmcConfig { iterations: 10, burn_in: 10, thin: 1, seed: 0 }.validate().is_err());
        assert!(McmcConfig { iterations: 10, burn_in: 1, thin: 0, seed: 0 }.validate().is_err());
    }

    #[test]
    fn iid_chain_has_full_ess_and_unit_rhat() {
        let mut rng = rng_from_seed(4);
        let x: Vec<f64> = (0..4000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let ess = effective_sample_size(&x);
        assert!(ess > 3000.0, "ess {ess}");
        assert!((split_rhat(&[&x]) - 1.0).abs() < 0.02);
    }

    #[test]
    fn ar1_chain_has_reduced_ess() {
        let mut rng = rng_from_seed(5);
        let mut x = vec![0.0; 5000];
        for t in 1..x.len() {
            let e: f64 = StandardNormal.sample(&mut rng);
            x[t] = 0.9 * x[t - 1] + e;
        }
        // Theoretical ESS ratio (1 - rho) / (1 + rho) = 1/19.
        let ess = effective_sample_size(&x);
        assert!(ess > 5000.0 / 19.0 * 0.6 && ess < 5000.0 / 19.0 * 1.6, "ess {ess}");
    }

    #[test]
    fn drifting_chains_flag_rhat() {
        let a: Vec<f64> = (0..200).map(|t| t as f64 / 10.0).collect();
        assert!(split_rhat(&[&a]) > 1.5);
    }

    #[test]
    fn adapter_moves_toward_target() {
        let mut a = StepAdapter::new(1.0, 0.234);
        for _ in 0..100 {
            a.update(0.0);
        }
        assert!(a.scale() < 0.5);
    }

    #[test]
    fn quantiles() {
        let d = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&d, 0.5), 3.0);
        assert_eq!(quantile(&d, 0.0), 1.0);
        assert_eq!(quantile(&d, 0.25), 2.0);
    }
}
