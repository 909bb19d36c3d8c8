//! Data-generating processes of the simulation scenarios and the matching
//! ground truth.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Gamma, Normal, StandardNormal};

use super::school::{surrogate_school_network, SchoolConfig};
use super::{NetworkKind, OutcomeForm, Scenario};
use crate::community::{CommunityAssignment, CommunitySource};
use crate::data::UnitTable;
use crate::error::{Error, Result};
use crate::estimator::Estimand;
use crate::exposure::{compute_exposure, ExposureResult, ExposureSpec};
use crate::graph::{generate_latent_cluster, generate_sbm, LatentClusterConfig, Network, SbmConfig};
use crate::ps::{binomial_pmf, fit_binomial_mle, sigmoid, successes_for};
use crate::rng::{derive_seed, rng_from_seed};

/// Coefficient of the individual treatment in both outcome forms.
pub const TREATMENT_EFFECT: f64 = 2.0;
/// Variance of the community random intercepts when they are switched on.
pub const RE_VARIANCE: f64 = 2.0;

/// A network with its fixed covariates and community labels.
#[derive(Debug, Clone)]
pub struct SimNetwork {
    pub network: Network,
    /// Covariates only; treatment and outcome are drawn per replicate.
    pub units: UnitTable,
    pub communities: CommunityAssignment,
}

fn gamma_bernoulli_covariates<R: Rng>(n: usize, rng: &mut R) -> UnitTable {
    let gamma = Gamma::new(0.5, 1.0).expect("valid shape and scale");
    let bern = Bernoulli::new(0.5).expect("valid probability");
    let mut x = DMatrix::zeros(n, 2);
    for i in 0..n {
        x[(i, 0)] = gamma.sample(rng);
        x[(i, 1)] = f64::from(u8::from(bern.sample(rng)));
    }
    UnitTable::new(vec!["x1".into(), "x2".into()], x).expect("two names for two columns")
}

/// Network number `index` of a scenario. Covariates are drawn first, then
/// the graph (the latent cluster graph depends on them).
pub fn generate_network(scenario: &Scenario, index: usize) -> Result<SimNetwork> {
    scenario.validate()?;
    let seed = derive_seed(scenario.seed, &[index as u64]);
    let n = scenario.n;
    match scenario.network {
        NetworkKind::Sbm => {
            let units = gamma_bernoulli_covariates(n, &mut rng_from_seed(derive_seed(seed, &[0])));
            let cfg = SbmConfig::blocks_of_ten(n, derive_seed(seed, &[1]));
            let network = generate_sbm(&cfg)?;
            let communities = CommunityAssignment::from_labels(&cfg.labels(), CommunitySource::Known)?;
            Ok(SimNetwork {
                network,
                units,
                communities,
            })
        }
        NetworkKind::LatentCluster => {
            let units = gamma_bernoulli_covariates(n, &mut rng_from_seed(derive_seed(seed, &[0])));
            let cfg = LatentClusterConfig::simulation_default(n, derive_seed(seed, &[1]));
            let network = generate_latent_cluster(&cfg, &units.x)?.network;
            let communities = CommunityAssignment::from_labels(&cfg.labels(), CommunitySource::Known)?;
            Ok(SimNetwork {
                network: network.with_communities(communities.labels().to_vec())?,
                units,
                communities,
            })
        }
        NetworkKind::School => surrogate_school_network(&SchoolConfig::new(n, seed)),
    }
}

/// True probability of treatment for a covariate row of the given network
/// kind: `2.6 x1 - 2.2 x2`, or `0.7 sex - 0.11 grade + race` for schools.
pub fn true_individual_ps(kind: NetworkKind, x: &[f64]) -> f64 {
    let eta = match kind {
        NetworkKind::Sbm | NetworkKind::LatentCluster => 2.6 * x[0] - 2.2 * x[1],
        NetworkKind::School => 0.7 * x[0] - 0.11 * x[2] + x[1],
    };
    sigmoid(eta)
}

/// Outcome mean without the treatment and random-effect terms. `exposure`
/// is `(g, lambda)`; units without neighbors pass `None` and get the
/// exposure-free part only.
pub fn structural_mean(form: OutcomeForm, exposure: Option<(f64, f64)>, phi: f64) -> f64 {
    match (form, exposure) {
        (OutcomeForm::Linear, Some((g, lambda))) => -3.0 + 4.0 * g - phi - 2.0 * lambda.ln(),
        (OutcomeForm::Linear, None) => -3.0 - phi,
        (OutcomeForm::Nonlinear, Some((g, lambda))) => {
            3.0 + 25.0 * sigmoid(10.0 * (-(g - 1.0).powi(2) / 0.12).exp()) - 2.0 * phi - 2.5 * lambda
        }
        (OutcomeForm::Nonlinear, None) => 3.0 - 2.0 * phi,
    }
}

/// Full outcome mean `2 z + structural + u`.
pub fn outcome_mean(form: OutcomeForm, z: u8, exposure: Option<(f64, f64)>, phi: f64, u: f64) -> f64 {
    TREATMENT_EFFECT * f64::from(z) + structural_mean(form, exposure, phi) + u
}

/// One replicate's treatment, outcome and the true nuisance quantities.
#[derive(Debug, Clone)]
pub struct ScenarioData {
    /// Covariates with treatment and outcome filled in.
    pub units: UnitTable,
    pub phi: Vec<f64>,
    pub exposure: ExposureResult,
    /// Fitted neighborhood density at the observed exposure; `None` for
    /// units without neighbors.
    pub lambda: Vec<Option<f64>>,
    /// Binomial-logit coefficients over `[1, own x, neighbor-mean x]`.
    pub gps_beta: DVector<f64>,
    /// Neighborhood-model covariates per unit (without intercept).
    pub gps_rows: Vec<Option<Vec<f64>>>,
    pub degree: Vec<usize>,
    /// Random intercept per community.
    pub u: Vec<f64>,
}

fn gps_row(net: &Network, x: &DMatrix<f64>, i: usize) -> Option<Vec<f64>> {
    let nb = net.neighbors(i);
    if nb.is_empty() {
        return None;
    }
    let p = x.ncols();
    let mut row: Vec<f64> = (0..p).map(|c| x[(i, c)]).collect();
    for c in 0..p {
        row.push(nb.iter().map(|&j| x[(j, c)]).sum::<f64>() / nb.len() as f64);
    }
    Some(row)
}

/// Draw treatments from the true propensity score, compute exposures, fit
/// the binomial neighborhood model that defines `Lambda`, draw community
/// intercepts and outcomes with unit noise variance.
pub fn generate_scenario_data(scenario: &Scenario, sim: &SimNetwork, seed: u64) -> Result<ScenarioData> {
    let net = &sim.network;
    let n = net.n_nodes();
    let x = &sim.units.x;
    let mut rng = rng_from_seed(seed);
    let phi: Vec<f64> = (0..n)
        .map(|i| true_individual_ps(scenario.network, &x.row(i).iter().copied().collect::<Vec<_>>()))
        .collect();
    let z: Vec<u8> = phi.iter().map(|&p| u8::from(rng.random::<f64>() < p)).collect();
    let exposure = compute_exposure(net, &z, &ExposureSpec::Proportion, None)?;
    let eligible = exposure.eligible_indices();
    if eligible.is_empty() {
        return Err(Error::validation("no unit has a neighbor"));
    }
    let gps_rows: Vec<Option<Vec<f64>>> = (0..n).map(|i| gps_row(net, x, i)).collect();
    let degree = net.degrees();
    let successes: Vec<usize> = (0..n)
        .map(|i| net.neighbors(i).iter().filter(|&&j| z[j] == 1).count())
        .collect();
    let q = 2 * x.ncols();
    let design = DMatrix::from_fn(eligible.len(), q + 1, |r, c| {
        if c == 0 {
            1.0
        } else {
            gps_rows[eligible[r]].as_ref().expect("eligible")[c - 1]
        }
    });
    let succ: Vec<usize> = eligible.iter().map(|&i| successes[i]).collect();
    let trials: Vec<usize> = eligible.iter().map(|&i| degree[i]).collect();
    let gps_beta = fit_binomial_mle(&design, &succ, &trials)?;
    let lambda: Vec<Option<f64>> = (0..n)
        .map(|i| {
            gps_rows[i]
                .as_ref()
                .map(|row| binomial_pmf(successes[i], degree[i], linear_predictor(&gps_beta, row)))
        })
        .collect();

    let j = sim.communities.n_communities();
    let u: Vec<f64> = if scenario.random_effects {
        let dist = Normal::new(0.0, RE_VARIANCE.sqrt()).expect("positive sd");
        (0..j).map(|_| dist.sample(&mut rng)).collect()
    } else {
        vec![0.0; j]
    };
    let labels = sim.communities.labels();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let exp = exposure.g[i].zip(lambda[i]);
            outcome_mean(scenario.outcome, z[i], exp, phi[i], u[labels[i]]) + rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    let units = sim.units.clone().with_treatment(z)?.with_outcome(y)?;
    Ok(ScenarioData {
        units,
        phi,
        exposure,
        lambda,
        gps_beta,
        gps_rows,
        degree,
        u,
    })
}

fn linear_predictor(beta: &DVector<f64>, row: &[f64]) -> f64 {
    beta[0] + beta.iter().skip(1).zip(row).map(|(b, v)| b * v).sum::<f64>()
}

/// True average potential outcomes over the units with neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthTable {
    pub z_values: Vec<u8>,
    pub g_values: Vec<f64>,
    /// `mu[cell]`, cells ordered z-major.
    pub mu: Vec<f64>,
    /// Per grid value, the unit-average of `structural(g)` (z- and u-free).
    structural: Vec<f64>,
    /// Unit-average of the per-unit treatment contrast.
    tau: f64,
    pub units: Vec<usize>,
}

impl TruthTable {
    fn g_index(&self, g: f64) -> Option<usize> {
        self.g_values.iter().position(|&v| (v - g).abs() < 1e-9)
    }

    pub fn mu(&self, z: u8, g: f64) -> Option<f64> {
        let zi = self.z_values.iter().position(|&v| v == z)?;
        Some(self.mu[zi * self.g_values.len() + self.g_index(g)?])
    }

    /// `mu(1, g) - mu(0, g)`, averaged unit by unit.
    pub fn tau(&self, g: f64) -> Option<f64> {
        self.g_index(g)?;
        (self.z_values.contains(&0) && self.z_values.contains(&1)).then_some(self.tau)
    }

    /// `mu(z, g) - mu(z, g')`, averaged unit by unit.
    pub fn delta(&self, g: f64, g_prime: f64, z: u8) -> Option<f64> {
        if !self.z_values.contains(&z) {
            return None;
        }
        Some(self.structural[self.g_index(g)?] - self.structural[self.g_index(g_prime)?])
    }

    pub fn value(&self, estimand: &Estimand) -> Option<f64> {
        match estimand {
            Estimand::Tau { g } => self.tau(*g),
            Estimand::Delta { g, g_prime, z } => self.delta(*g, *g_prime, *z),
            Estimand::TauPi { pi } => {
                let total: f64 = pi.iter().sum();
                (pi.len() == self.g_values.len()).then_some(self.tau * total)
            }
            Estimand::DeltaPi { pi_star, pi_prime, z } => {
                if pi_star.len() != self.g_values.len() || pi_prime.len() != self.g_values.len() {
                    return None;
                }
                self.z_values.contains(z).then(|| {
                    pi_star
                        .iter()
                        .zip(pi_prime)
                        .zip(&self.structural)
                        .map(|((a, b), s)| (a - b) * s)
                        .sum()
                })
            }
        }
    }
}

/// Plug each grid cell into the outcome mean of every unit with neighbors,
/// replacing `Lambda` by the fitted density at `g` (`g N_i` rounded to the
/// nearest count), and average.
pub fn truth_oracle(form: OutcomeForm, sim: &SimNetwork, data: &ScenarioData, z_values: &[u8], g_values: &[f64]) -> TruthTable {
    let units = data.exposure.eligible_indices();
    let m = units.len() as f64;
    let labels = sim.communities.labels();
    let u_mean = units.iter().map(|&i| data.u[labels[i]]).sum::<f64>() / m;
    let structural: Vec<f64> = g_values
        .iter()
        .map(|&g| {
            units
                .iter()
                .map(|&i| {
                    let row = data.gps_rows[i].as_ref().expect("eligible");
                    let n_i = data.degree[i];
                    let lam = binomial_pmf(successes_for(g, n_i), n_i, linear_predictor(&data.gps_beta, row));
                    structural_mean(form, Some((g, lam)), data.phi[i])
                })
                .sum::<f64>()
                / m
        })
        .collect();
    let contrast = TREATMENT_EFFECT * (1.0 - 0.0);
    let tau = units.iter().map(|_| contrast).sum::<f64>() / m;
    let mut mu = Vec::with_capacity(z_values.len() * g_values.len());
    for &z in z_values {
        for s in &structural {
            mu.push(TREATMENT_EFFECT * f64::from(z) + s + u_mean);
        }
    }
    TruthTable {
        z_values: z_values.to_vec(),
        g_values: g_values.to_vec(),
        mu,
        structural,
        tau,
        units,
    }
}
