//! Greedy nearest-neighbor matching of treated units to controls on the
//! individual propensity score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ps::logit;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Caliper {
    None,
    /// Maximum `|Phi_i - Phi_j|`.
    Absolute(f64),
    /// Maximum logit distance as a multiple of the SD of `logit(Phi)`.
    SdLogit(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchOptions {
    pub replacement: bool,
    pub caliper: Caliper,
}

impl Default for MatchOptions {
    fn default() -> Self {
        MatchOptions {
            replacement: true,
            caliper: Caliper::SdLogit(0.2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// One `(treated, control)` set per matched treated unit.
    pub sets: Vec<(usize, usize)>,
    /// `1 / (number of sets containing i)`, zero outside the matched sample.
    pub weights: Vec<f64>,
}

impl MatchResult {
    pub fn matched(&self) -> Vec<usize> {
        (0..self.weights.len()).filter(|&i| self.weights[i] > 0.0).collect()
    }

    pub fn n_matched(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }
}

/// Match each treated unit (in index order) to the control with the closest
/// score, ties going to the lower index. Without replacement a control is
/// used at most once.
pub fn match_on_ps(z: &[u8], phi: &[f64], options: &MatchOptions) -> Result<MatchResult> {
    if z.len() != phi.len() {
        return Err(Error::validation("treatment and score lengths differ"));
    }
    if phi.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
        return Err(Error::validation("propensity scores must lie in (0, 1)"));
    }
    let mut controls: Vec<usize> = (0..z.len()).filter(|&i| z[i] == 0).collect();
    if controls.is_empty() {
        return Err(Error::validation("no control units to match"));
    }
    controls.sort_by(|&a, &b| phi[a].total_cmp(&phi[b]).then(a.cmp(&b)));
    let max_logit = match options.caliper {
        Caliper::SdLogit(c) => {
            let l: Vec<f64> = phi.iter().map(|&p| logit(p)).collect();
            let m = l.iter().sum::<f64>() / l.len() as f64;
            let var = l.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (l.len() as f64 - 1.0).max(1.0);
            Some(c * var.sqrt())
        }
        _ => None,
    };
    let mut used = vec![false; z.len()];
    let mut count = vec![0usize; z.len()];
    let mut sets = Vec::new();
    for t in (0..z.len()).filter(|&i| z[i] == 1) {
        let best = controls
            .iter()
            .copied()
            .filter(|&c| options.replacement || !used[c])
            .min_by(|&a, &b| {
                (phi[a] - phi[t])
                    .abs()
                    .total_cmp(&(phi[b] - phi[t]).abs())
                    .then(a.cmp(&b))
            });
        let Some(c) = best else { continue };
        let within = match options.caliper {
            Caliper::None => true,
            Caliper::Absolute(d) => (phi[c] - phi[t]).abs() <= d,
            Caliper::SdLogit(_) => (logit(phi[c]) - logit(phi[t])).abs() <= max_logit.unwrap(),
        };
        if !within {
            continue;
        }
        used[c] = true;
        count[t] += 1;
        count[c] += 1;
        sets.push((t, c));
    }
    let weights = count.iter().map(|&k| if k > 0 { 1.0 / k as f64 } else { 0.0 }).collect();
    Ok(MatchResult { sets, weights })
}

#[cfg(test)]
mod tests {
    use super::*;

    const NO_CALIPER: MatchOptions = MatchOptions {
        replacement: true,
        caliper: Caliper::None,
    };

    #[test]
    fn nearest_control_is_chosen() {
        let r = match_on_ps(&[1, 0, 0], &[0.3, 0.29, 0.5], &NO_CALIPER).unwrap();
        assert_eq!(r.sets, vec![(0, 1)]);
        assert_eq!(r.weights, vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn reused_control_gets_half_weight() {
        let r = match_on_ps(&[1, 1, 0, 0], &[0.3, 0.31, 0.305, 0.9], &NO_CALIPER).unwrap();
        assert_eq!(r.sets, vec![(0, 2), (1, 2)]);
        assert_eq!(r.weights, vec![1.0, 1.0, 0.5, 0.0]);
        assert_eq!(r.matched(), vec![0, 1, 2]);
    }

    #[test]
    fn without_replacement_uses_next_best() {
        let opts = MatchOptions {
            replacement: false,
            caliper: Caliper::None,
        };
        let r = match_on_ps(&[1, 1, 0, 0], &[0.3, 0.31, 0.305, 0.9], &opts).unwrap();
        assert_eq!(r.sets, vec![(0, 2), (1, 3)]);
        assert!(r.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn caliper_drops_distant_treated() {
        let opts = MatchOptions {
            replacement: true,
            caliper: Caliper::Absolute(0.01),
        };
        let r = match_on_ps(&[1, 0], &[0.3, 0.32], &opts).unwrap();
        assert!(r.sets.is_empty());
        assert_eq!(r.n_matched(), 0);
    }

    #[test]
    fn default_caliper_uses_logit_sd() {
        // logit scores spread widely, so 0.2 SD is a loose bound here.
        let phi = [0.1, 0.2, 0.5, 0.8, 0.9, 0.55];
        let r = match_on_ps(&[1, 0, 1, 0, 0, 0], &phi, &MatchOptions::default()).unwrap();
        assert_eq!(r.sets, vec![(2, 5)]);
    }

    #[test]
    fn no_controls_is_an_error() {
        assert!(match_on_ps(&[1, 1], &[0.3, 0.4], &NO_CALIPER).is_err());
    }

    #[test]
    fn matched_weights_are_in_unit_interval() {
        let phi: Vec<f64> = (0..50).map(|i| 0.05 + 0.9 * ((i * 37) % 50) as f64 / 50.0).collect();
        let z: Vec<u8> = (0..50).map(|i| (i % 3 == 0) as u8).collect();
        let r = match_on_ps(&z, &phi, &MatchOptions::default()).unwrap();
        for &i in &r.matched() {
            assert!(r.weights[i] > 0.0 && r.weights[i] <= 1.0);
        }
    }
}
