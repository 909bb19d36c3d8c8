//! Individual propensity score (Bernoulli, logit link) and neighborhood
//! generalized propensity score (binomial with `N_i` trials).
//!
//! Both posteriors are sampled by random-walk Metropolis. Proposals are
//! preconditioned with the Laplace covariance at the posterior mode and the
//! global step size is adapted by Robbins–Monro toward 0.234 acceptance
//! during burn-in, then frozen.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};
use crate::linalg::ensure_full_column_rank;
use crate::mcmc::{write_draws_csv, AcceptanceCounter, McmcConfig, StepAdapter};
use crate::rng::rng_from_seed;

/// Coefficient magnitude past which the data are treated as separated.
pub const SEPARATION_THRESHOLD: f64 = 50.0;

const TARGET_ACCEPTANCE: f64 = 0.234;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Link {
    #[default]
    Logit,
    Probit,
}

impl Link {
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Logit => sigmoid(eta),
            Link::Probit => Normal::standard().cdf(eta),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Multivariate normal prior on regression coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalPrior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    precision: DMatrix<f64>,
}

impl NormalPrior {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let p = mean.len();
        if cov.nrows() != p || cov.ncols() != p {
            return Err(Error::validation(format!(
                "prior covariance is {}x{} for {p} coefficients",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if (&cov - cov.transpose()).abs().max() > 1e-12 * cov.abs().max().max(1.0) {
            return Err(Error::validation("prior covariance must be symmetric"));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::validation("prior covariance must be positive definite"))?;
        let precision = chol.inverse();
        Ok(NormalPrior { mean, cov, precision })
    }

    /// Zero mean, `diag(sd^2)`.
    pub fn isotropic(p: usize, sd: f64) -> Self {
        Self::new(DVector::zeros(p), DMatrix::from_diagonal_element(p, p, sd * sd))
            .expect("diagonal positive covariance")
    }

    /// Zero mean, variance 100 on every coefficient.
    pub fn weakly_informative(p: usize) -> Self {
        Self::isotropic(p, 10.0)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn log_density(&self, beta: &DVector<f64>) -> f64 {
        let d = beta - &self.mean;
        -0.5 * d.dot(&(&self.precision * &d))
    }
}

/// Binomial-logit likelihood with per-unit successes and trials.
/// Bernoulli data are the one-trial case.
struct BinomialLogit<'a> {
    x: &'a DMatrix<f64>,
    successes: &'a [f64],
    trials: &'a [f64],
}

impl BinomialLogit<'_> {
    fn log_lik(&self, beta: &DVector<f64>) -> f64 {
        let eta = self.x * beta;
        eta.iter()
            .zip(self.successes.iter().zip(self.trials))
            .map(|(&e, (&k, &n))| k * e - n * softplus(e))
            .sum()
    }

    /// Gradient and negative Hessian (observed information).
    fn grad_info(&self, beta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let eta = self.x * beta;
        let mut resid = DVector::zeros(eta.len());
        let mut w = vec![0.0; eta.len()];
        for i in 0..eta.len() {
            let p = sigmoid(eta[i]);
            resid[i] = self.successes[i] - self.trials[i] * p;
            w[i] = self.trials[i] * p * (1.0 - p);
        }
        let grad = self.x.tr_mul(&resid);
        let info = crate::linalg::weighted_gram(self.x, &w);
        (grad, info)
    }
}

/// Newton iterations for the posterior mode (or MLE when `prior` is None).
/// Returns the mode and the information matrix there.
fn newton_mode(
    lik: &BinomialLogit<'_>,
    prior: Option<&NormalPrior>,
    start: DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = start.len();
    let objective = |b: &DVector<f64>| lik.log_lik(b) + prior.map_or(0.0, |pr| pr.log_density(b));
    let mut beta = start;
    let mut current = objective(&beta);
    for _ in 0..200 {
        let (mut grad, mut info) = lik.grad_info(&beta);
        match prior {
            Some(pr) => {
                grad -= pr.precision() * (&beta - &pr.mean);
                info += pr.precision();
            }
            None => info += DMatrix::from_diagonal_element(p, p, 1e-10),
        }
        let Some(chol) = info.clone().cholesky() else {
            return Err(Error::SingularDesign { rank: crate::linalg::numerical_rank(&info), cols: p });
        };
        let step = chol.solve(&grad);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &beta + &step * t;
            let val = objective(&cand);
            if val.is_finite() && val >= current - 1e-12 {
                beta = cand;
                current = val;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted || (&step * t).amax() < 1e-10 {
            break;
        }
    }
    let (_, mut info) = lik.grad_info(&beta);
    if let Some(pr) = prior {
        info += pr.precision();
    }
    Ok((beta, info))
}

/// Posterior draws of a propensity model's coefficients.
#[derive(Debug, Clone)]
pub struct PsPosterior {
    pub coefficient_names: Vec<String>,
    /// Chain state after every iteration, burn-in included.
    pub states: Vec<DVector<f64>>,
    pub config: McmcConfig,
    /// Acceptance rate after adaptation was frozen.
    pub acceptance_rate: f64,
    /// Posterior mode used to precondition the sampler.
    pub mode: DVector<f64>,
    /// Dispersion of the neighborhood model; fixed at 1 for the binomial family.
    pub dispersion: f64,
    pub warnings: Vec<String>,
}

impl PsPosterior {
    pub fn retained(&self) -> impl Iterator<Item = &DVector<f64>> + '_ {
        self.states
            .iter()
            .enumerate()
            .filter(|(t, _)| self.config.is_retained(*t))
            .map(|(_, s)| s)
    }

    pub fn n_retained(&self) -> usize {
        self.config.n_retained()
    }

    pub fn posterior_mean(&self) -> DVector<f64> {
        let n = self.n_retained() as f64;
        self.retained().fold(DVector::zeros(self.mode.len()), |a, b| a + b) / n
    }

    pub fn posterior_sd(&self) -> DVector<f64> {
        let mean = self.posterior_mean();
        let n = self.n_retained() as f64;
        self.retained()
            .fold(DVector::zeros(mean.len()), |a, b| a + (b - &mean).map(|v| v * v))
            .map(|v| (v / (n - 1.0)).sqrt())
    }

    /// Draws of one coefficient across retained iterations.
    pub fn coefficient_trace(&self, k: usize) -> Vec<f64> {
        self.retained().map(|b| b[k]).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let rows: Vec<Vec<f64>> = self.retained().map(|b| b.iter().copied().collect()).collect();
        write_draws_csv(writer, &self.coefficient_names, &rows)
    }
}

fn sample_binomial_logit(
    lik: &BinomialLogit<'_>,
    prior: &NormalPrior,
    cfg: &McmcConfig,
    names: Vec<String>,
) -> Result<PsPosterior> {
    cfg.validate()?;
    let p = lik.x.ncols();
    if prior.dim() != p {
        return Err(Error::validation(format!("prior has {} coefficients, design has {p}", prior.dim())));
    }
    if names.len() != p {
        return Err(Error::validation(format!("{} names for {p} coefficients", names.len())));
    }
    ensure_full_column_rank(lik.x)?;

    let (mode, info) = newton_mode(lik, Some(prior), prior.mean.clone())?;
    let mut warnings = Vec::new();
    if mode.amax() > SEPARATION_THRESHOLD {
        let msg = format!(
            "possible separation: posterior mode has |coefficient| {:.1} > {SEPARATION_THRESHOLD}; result is prior-dominated",
            mode.amax()
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let cov = info
        .cholesky()
        .ok_or(Error::SingularDesign { rank: 0, cols: p })?
        .inverse();
    let chol_l = cov.cholesky().ok_or(Error::SingularDesign { rank: 0, cols: p })?.l();

    let mut rng = rng_from_seed(cfg.seed);
    let mut adapter = StepAdapter::new(2.38 / (p as f64).sqrt(), TARGET_ACCEPTANCE);
    let mut counter = AcceptanceCounter::default();
    let log_post = |b: &DVector<f64>| lik.log_lik(b) + prior.log_density(b);
    let mut beta = mode.clone();
    let mut current = log_post(&beta);
    let mut states = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let xi = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let cand = &beta + (&chol_l * xi) * adapter.scale();
        let val = log_post(&cand);
        if !current.is_finite() {
            return Err(Error::Sampler {
                stage: "propensity",
                iteration: t,
                message: "non-finite log posterior".into(),
            });
        }
        let log_ratio = if val.is_finite() { val - current } else { f64::NEG_INFINITY };
        let accept_prob = log_ratio.min(0.0).exp();
        let accepted = rng.random::<f64>() < accept_prob;
        if accepted {
            beta = cand;
            current = val;
        }
        if t < cfg.burn_in {
            adapter.update(accept_prob);
        } else {
            counter.record(accepted);
        }
        states.push(beta.clone());
    }
    let mut post = PsPosterior {
        coefficient_names: names,
        states,
        config: *cfg,
        acceptance_rate: counter.rate(),
        mode,
        dispersion: 1.0,
        warnings,
    };
    let mean = post.posterior_mean();
    if post.warnings.is_empty() && mean.amax() > SEPARATION_THRESHOLD {
        let msg = format!(
            "possible separation: posterior mean has |coefficient| {:.1} > {SEPARATION_THRESHOLD}; result is prior-dominated",
            mean.amax()
        );
        log::warn!("{msg}");
        post.warnings.push(msg);
    }
    Ok(post)
}

/// Bernoulli model for the individual treatment.
#[derive(Debug, Clone)]
pub struct IndividualPsModel {
    pub link: Link,
    pub prior: NormalPrior,
}

impl IndividualPsModel {
    pub fn new(n_coefficients: usize) -> Self {
        IndividualPsModel {
            link: Link::Logit,
            prior: NormalPrior::weakly_informative(n_coefficients),
        }
    }
}

/// Sample `p(beta_Z | X, Z)`. `x` must carry the intercept column.
pub fn sample_individual_ps(
    x: &DMatrix<f64>,
    z: &[u8],
    model: &IndividualPsModel,
    cfg: &McmcConfig,
    names: Vec<String>,
) -> Result<PsPosterior> {
    if model.link != Link::Logit {
        return Err(Error::validation("only the logit link is supported by the sampler"));
    }
    if z.len() != x.nrows() {
        return Err(Error::validation(format!("{} treatments for {} design rows", z.len(), x.nrows())));
    }
    if z.iter().any(|&v| v > 1) {
        return Err(Error::validation("treatment must be binary"));
    }
    let successes: Vec<f64> = z.iter().map(|&v| f64::from(v)).collect();
    let trials = vec![1.0; z.len()];
    let lik = BinomialLogit {
        x,
        successes: &successes,
        trials: &trials,
    };
    sample_binomial_logit(&lik, &model.prior, cfg, names)
}

/// `phi(1; x)` for coefficients `[intercept, slopes...]` and covariates `x`.
pub fn predict_individual_ps(beta: &[f64], x: &[f64], link: Link) -> f64 {
    assert_eq!(beta.len(), x.len() + 1, "beta must hold an intercept plus one slope per covariate");
    let eta = beta[0] + beta[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>();
    link.inverse(eta)
}

/// Binomial model for the number of treated neighbors out of `N_i`.
#[derive(Debug, Clone)]
pub struct NeighborhoodGpsModel {
    pub prior: NormalPrior,
    /// Whether the design carries the individual treatment after the intercept.
    pub include_treatment: bool,
    /// Dispersion is not used by the binomial family and stays at 1.
    pub dispersion: f64,
}

impl NeighborhoodGpsModel {
    pub fn new(n_coefficients: usize) -> Self {
        NeighborhoodGpsModel {
            prior: NormalPrior::weakly_informative(n_coefficients),
            include_treatment: true,
            dispersion: 1.0,
        }
    }

    /// Linear predictor for design `[1, z?, x...]`.
    pub fn linear_predictor(&self, beta: &[f64], z: u8, x: &[f64]) -> f64 {
        let offset = if self.include_treatment { 2 } else { 1 };
        assert_eq!(beta.len(), x.len() + offset, "coefficient/covariate mismatch");
        let mut eta = beta[0] + beta[offset..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>();
        if self.include_treatment {
            eta += beta[1] * f64::from(z);
        }
        eta
    }

    pub fn density(&self, beta: &[f64], g: f64, z: u8, x: &[f64], n_trials: usize) -> f64 {
        binomial_pmf(successes_for(g, n_trials), n_trials, self.linear_predictor(beta, z, x))
    }
}

/// Treated-neighbor count for exposure `g` among `n` neighbors, rounding
/// half to even.
pub fn successes_for(g: f64, n: usize) -> usize {
    let k = (g * n as f64).round_ties_even();
    k.clamp(0.0, n as f64) as usize
}

/// Binomial pmf at `k` of `n` with success log-odds `eta`.
pub fn binomial_pmf(k: usize, n: usize, eta: f64) -> f64 {
    ln_binomial_pmf(k, n, eta).exp()
}

pub fn ln_binomial_pmf(k: usize, n: usize, eta: f64) -> f64 {
    assert!(k <= n, "k = {k} exceeds n = {n}");
    ln_binomial(n as u64, k as u64) - k as f64 * softplus(-eta) - (n - k) as f64 * softplus(eta)
}

/// `lambda(g; z; x)` under coefficients `[intercept, z, x...]`.
pub fn gps_density(beta: &[f64], g: f64, z: u8, x: &[f64], n_trials: usize) -> f64 {
    let eta = beta[0] + beta[1] * f64::from(z) + beta[2..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>();
    binomial_pmf(successes_for(g, n_trials), n_trials, eta)
}

/// Sample `p(beta_G | X^g, Z, G)` for a binomial design. `x` must carry the
/// intercept (and the treatment column when the model includes it).
pub fn sample_neighborhood_gps(
    x: &DMatrix<f64>,
    successes: &[usize],
    trials: &[usize],
    model: &NeighborhoodGpsModel,
    cfg: &McmcConfig,
    names: Vec<String>,
) -> Result<PsPosterior> {
    validate_binomial(x, successes, trials)?;
    let k: Vec<f64> = successes.iter().map(|&v| v as f64).collect();
    let n: Vec<f64> = trials.iter().map(|&v| v as f64).collect();
    let lik = BinomialLogit {
        x,
        successes: &k,
        trials: &n,
    };
    let mut post = sample_binomial_logit(&lik, &model.prior, cfg, names)?;
    post.dispersion = model.dispersion;
    Ok(post)
}

fn validate_binomial(x: &DMatrix<f64>, successes: &[usize], trials: &[usize]) -> Result<()> {
    if successes.len() != x.nrows() || trials.len() != x.nrows() {
        return Err(Error::validation("binomial data length does not match the design"));
    }
    for (i, (&k, &n)) in successes.iter().zip(trials).enumerate() {
        if n == 0 {
            return Err(Error::validation(format!("row {i} has zero trials (isolated unit)")));
        }
        if k > n {
            return Err(Error::validation(format!("row {i}: {k} successes out of {n} trials")));
        }
    }
    Ok(())
}

/// Maximum-likelihood binomial-logit regression (Newton/IRLS).
pub fn fit_binomial_mle(x: &DMatrix<f64>, successes: &[usize], trials: &[usize]) -> Result<DVector<f64>> {
    validate_binomial(x, successes, trials)?;
    ensure_full_column_rank(x)?;
    let k: Vec<f64> = successes.iter().map(|&v| v as f64).collect();
    let n: Vec<f64> = trials.iter().map(|&v| v as f64).collect();
    let lik = BinomialLogit {
        x,
        successes: &k,
        trials: &n,
    };
    let (beta, _) = newton_mode(&lik, None, DVector::zeros(x.ncols()))?;
    Ok(beta)
}

/// Absolute standardized mean differences of covariates between exposed and
/// unexposed units, before and after stratifying on a score.
#[derive(Debug, Clone)]
pub struct BalanceReport {
    pub raw: Vec<f64>,
    pub stratified: Vec<f64>,
}

/// Stratify on quantiles of `score` into `n_strata` groups and compare the
/// size-weighted within-stratum mean differences against the raw
/// differences, both scaled by the pooled raw SD. Strata lacking either
/// group are skipped.
pub fn stratified_balance(covariates: &DMatrix<f64>, exposed: &[bool], score: &[f64], n_strata: usize) -> BalanceReport {
    let n = covariates.nrows();
    assert_eq!(exposed.len(), n);
    assert_eq!(score.len(), n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score[a].total_cmp(&score[b]));
    let mut stratum = vec![0usize; n];
    for (rank, &i) in order.iter().enumerate() {
        stratum[i] = (rank * n_strata / n).min(n_strata - 1);
    }
    let group_mean = |col: usize, pred: &dyn Fn(usize) -> bool| -> Option<(f64, f64, usize)> {
        let vals: Vec<f64> = (0..n).filter(|&i| pred(i)).map(|i| covariates[(i, col)]).collect();
        if vals.is_empty() {
            return None;
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = if vals.len() > 1 {
            vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64
        } else {
            0.0
        };
        Some((m, v, vals.len()))
    };
    let mut raw = Vec::new();
    let mut stratified = Vec::new();
    for col in 0..covariates.ncols() {
        let (Some((m1, v1, _)), Some((m0, v0, _))) =
            (group_mean(col, &|i| exposed[i]), group_mean(col, &|i| !exposed[i]))
        else {
            raw.push(f64::NAN);
            stratified.push(f64::NAN);
            continue;
        };
        let sd = ((v1 + v0) / 2.0).sqrt().max(1e-12);
        raw.push((m1 - m0).abs() / sd);
        let mut diff = 0.0;
        let mut weight = 0.0;
        for s in 0..n_strata {
            let e = group_mean(col, &|i| stratum[i] == s && exposed[i]);
            let u = group_mean(col, &|i| stratum[i] == s && !exposed[i]);
            if let (Some((a, _, na)), Some((b, _, nb))) = (e, u) {
                let w = (na + nb) as f64;
                diff += w * (a - b);
                weight += w;
            }
        }
        stratified.push(if weight > 0.0 { (diff / weight).abs() / sd } else { f64::NAN });
    }
    BalanceReport { raw, stratified }
}
