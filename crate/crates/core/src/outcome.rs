//! Gaussian outcome model with penalized spline terms and community random
//! intercepts, sampled by Gibbs with Metropolis steps for the variances.
//!
//! Mean structure: `V' beta + U b_U + (z U) b_Uz + u_{c(i)}`, noise variance
//! `nu / w_i`. Units with weight zero drop out of the likelihood.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sample_canonical_normal, weighted_cross, weighted_gram};
use crate::mcmc::{write_draws_csv, AcceptanceCounter, McmcConfig, StepAdapter};
use crate::ps::NormalPrior;
use crate::rng::{rng_from_seed, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutcomeSpec {
    /// Drop the spline terms.
    pub linear_only: bool,
    pub include_random_effects: bool,
}

impl Default for OutcomeSpec {
    fn default() -> Self {
        OutcomeSpec {
            linear_only: false,
            include_random_effects: true,
        }
    }
}

/// Hyperparameters. The random intercept is scalar per community, so the
/// covariance decomposition collapses to `sigma_u ~ Gamma(shape, scale)`;
/// the correlation and simplex parameters are kept for validation only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutcomePriors {
    pub beta_mean: f64,
    pub beta_sd: f64,
    pub nu_rate: f64,
    pub smoothing_rate: f64,
    pub smoothing_z_rate: f64,
    pub re_scale_shape: f64,
    pub re_scale_scale: f64,
    pub lkj_shape: f64,
    pub dirichlet_concentration: f64,
}

impl Default for OutcomePriors {
    fn default() -> Self {
        OutcomePriors {
            beta_mean: 0.0,
            beta_sd: 10.0,
            nu_rate: 1.0,
            smoothing_rate: 1.0,
            smoothing_z_rate: 1.0,
            re_scale_shape: 1.0,
            re_scale_scale: 1.0,
            lkj_shape: 1.0,
            dirichlet_concentration: 1.0,
        }
    }
}

impl OutcomePriors {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("beta_sd", self.beta_sd),
            ("nu_rate", self.nu_rate),
            ("smoothing_rate", self.smoothing_rate),
            ("smoothing_z_rate", self.smoothing_z_rate),
            ("re_scale_shape", self.re_scale_shape),
            ("re_scale_scale", self.re_scale_scale),
            ("lkj_shape", self.lkj_shape),
            ("dirichlet_concentration", self.dirichlet_concentration),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("prior parameter {name} must be positive, got {v}")));
            }
        }
        if !self.beta_mean.is_finite() {
            return Err(Error::validation("beta_mean must be finite"));
        }
        Ok(())
    }

    pub fn beta_prior(&self, p: usize) -> NormalPrior {
        let mut prior = NormalPrior::isotropic(p, self.beta_sd);
        prior.mean.fill(self.beta_mean);
        NormalPrior::new(prior.mean, prior.cov).expect("isotropic prior")
    }
}

/// Parameters held fixed instead of sampled.
#[derive(Debug, Clone, Default)]
pub struct OutcomeOptions {
    pub fixed_nu: Option<f64>,
    /// `(sigma2_bu, sigma2_buz)`.
    pub fixed_smoothing: Option<(f64, f64)>,
    pub fixed_re_variance: Option<f64>,
    /// Overrides the isotropic prior built from `OutcomePriors`.
    pub beta_prior: Option<NormalPrior>,
}

/// Design for one outcome-model conditional: the linear block, the spline
/// block `[U, z*U]`, community labels and likelihood weights.
#[derive(Debug, Clone)]
pub struct OutcomeDesign {
    pub linear: DMatrix<f64>,
    pub spline: Option<DMatrix<f64>>,
    pub community: Vec<usize>,
    pub n_communities: usize,
    pub weights: Vec<f64>,
    linear_gram: DMatrix<f64>,
    spline_gram: Option<DMatrix<f64>>,
    community_weight: Vec<f64>,
    active: usize,
}

impl OutcomeDesign {
    pub fn new(
        linear: DMatrix<f64>,
        spline: Option<DMatrix<f64>>,
        community: Vec<usize>,
        n_communities: usize,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let n = linear.nrows();
        if community.len() != n || weights.len() != n {
            return Err(Error::validation("outcome design components have different lengths"));
        }
        if let Some(s) = &spline {
            if s.nrows() != n || s.ncols() % 2 != 0 {
                return Err(Error::validation("spline block must have n rows and [U, zU] columns"));
            }
        }
        if community.iter().any(|&c| c >= n_communities) {
            return Err(Error::validation("community label out of range"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::validation("weights must be finite and non-negative"));
        }
        let active = weights.iter().filter(|&&w| w > 0.0).count();
        if active == 0 {
            return Err(Error::validation("every unit has zero weight"));
        }
        if linear.iter().chain(spline.iter().flat_map(|s| s.iter())).any(|v| !v.is_finite()) {
            return Err(Error::Sampler {
                stage: "outcome",
                iteration: 0,
                message: "non-finite design entry".into(),
            });
        }
        let linear_gram = weighted_gram(&linear, &weights);
        let spline_gram = spline.as_ref().map(|s| weighted_gram(s, &weights));
        let mut community_weight = vec![0.0; n_communities];
        for (&c, &w) in community.iter().zip(&weights) {
            community_weight[c] += w;
        }
        Ok(OutcomeDesign {
            linear,
            spline,
            community,
            n_communities,
            weights,
            linear_gram,
            spline_gram,
            community_weight,
            active,
        })
    }

    pub fn len(&self) -> usize {
        self.linear.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_linear(&self) -> usize {
        self.linear.ncols()
    }

    /// Knot columns per spline block (`U` and `zU` have this many each).
    pub fn n_knots(&self) -> usize {
        self.spline.as_ref().map_or(0, |s| s.ncols() / 2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeState {
    pub beta: DVector<f64>,
    pub b_u: DVector<f64>,
    pub b_uz: DVector<f64>,
    pub u: DVector<f64>,
    pub sigma2_u: f64,
    pub sigma2_bu: f64,
    pub sigma2_buz: f64,
    pub nu: f64,
}

impl OutcomeState {
    /// Linear predictor without the community effect.
    pub fn fixed_mean(&self, linear_row: &[f64], spline_row: &[f64]) -> f64 {
        let k = self.b_u.len();
        let mut m: f64 = linear_row.iter().zip(self.beta.iter()).map(|(a, b)| a * b).sum();
        if k > 0 {
            m += spline_row[..k].iter().zip(self.b_u.iter()).map(|(a, b)| a * b).sum::<f64>();
            m += spline_row[k..].iter().zip(self.b_uz.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
        m
    }

    fn flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.beta.iter().copied().collect();
        v.extend(self.b_u.iter());
        v.extend(self.b_uz.iter());
        v.extend(self.u.iter());
        v.extend([self.sigma2_u, self.sigma2_bu, self.sigma2_buz, self.nu]);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImputeMode {
    #[default]
    Draw,
    Mean,
}

/// Posterior predictive value for one design row. An unknown community
/// gets a fresh intercept from `N(0, sigma2_u)` in draw mode and zero in
/// mean mode. Draw mode adds noise with variance `nu / weight`.
pub fn predictive_draw<R: Rng + ?Sized>(
    state: &OutcomeState,
    spec: &OutcomeSpec,
    linear_row: &[f64],
    spline_row: &[f64],
    community: Option<usize>,
    mode: ImputeMode,
    weight: f64,
    rng: &mut R,
) -> f64 {
    let mut m = state.fixed_mean(linear_row, spline_row);
    if spec.include_random_effects {
        match community {
            Some(c) => m += state.u[c],
            None if mode == ImputeMode::Draw => m += state.sigma2_u.sqrt() * rng.sample::<f64, _>(StandardNormal),
            None => {}
        }
    }
    match mode {
        ImputeMode::Mean => m,
        ImputeMode::Draw => m + (state.nu / weight).sqrt() * rng.sample::<f64, _>(StandardNormal),
    }
}

const TARGET_ACCEPTANCE: f64 = 0.44;

/// Log-scale random-walk Metropolis on one variance parameter.
#[derive(Debug, Clone)]
struct VarianceStep {
    adapter: StepAdapter,
    counter: AcceptanceCounter,
}

impl VarianceStep {
    fn new() -> Self {
        VarianceStep {
            adapter: StepAdapter::new(1.0, TARGET_ACCEPTANCE),
            counter: AcceptanceCounter::default(),
        }
    }

    fn step<F: Fn(f64) -> f64>(&mut self, value: f64, log_target: F, adapt: bool, rng: &mut SimRng) -> f64 {
        let l = value.ln();
        let cand = l + self.adapter.scale() * rng.sample::<f64, _>(StandardNormal);
        let ratio = log_target(cand) - log_target(l);
        let accept_prob = if ratio.is_nan() { 0.0 } else { ratio.min(0.0).exp() };
        let accepted = rng.random::<f64>() < accept_prob;
        if adapt {
            self.adapter.update(accept_prob);
        } else {
            self.counter.record(accepted);
        }
        if accepted {
            cand.exp()
        } else {
            value
        }
    }
}

/// Variance log-target on `l = log(sigma2)` under an exponential prior
/// with rate `rate`, given `n` normal terms with sum of squares `ss`.
fn exp_prior_target(l: f64, n: f64, ss: f64, rate: f64) -> f64 {
    -0.5 * n * l - 0.5 * ss * (-l).exp() - rate * l.exp() + l
}

/// Same for the random-intercept variance, where `sigma_u` has a gamma prior.
fn gamma_scale_target(l: f64, n: f64, ss: f64, shape: f64, scale: f64) -> f64 {
    -0.5 * n * l - 0.5 * ss * (-l).exp() + 0.5 * shape * l - (0.5 * l).exp() / scale
}

/// Acceptance rates of the Metropolis steps after adaptation.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct OutcomeAcceptance {
    pub sigma2_u: f64,
    pub sigma2_bu: f64,
    pub sigma2_buz: f64,
    pub nu: f64,
}

/// Gibbs sampler whose state persists across design changes.
#[derive(Debug, Clone)]
pub struct OutcomeSampler {
    pub spec: OutcomeSpec,
    pub priors: OutcomePriors,
    options: OutcomeOptions,
    beta_prior: NormalPrior,
    pub state: OutcomeState,
    steps: [VarianceStep; 4],
    sweeps: usize,
}

impl OutcomeSampler {
    pub fn new(
        spec: OutcomeSpec,
        priors: OutcomePriors,
        options: OutcomeOptions,
        design: &OutcomeDesign,
        y: &[f64],
    ) -> Result<Self> {
        priors.validate()?;
        if y.len() != design.len() {
            return Err(Error::validation(format!("{} outcomes for {} design rows", y.len(), design.len())));
        }
        if spec.linear_only != design.spline.is_none() {
            return Err(Error::validation("spline block must be present exactly when the model has spline terms"));
        }
        for v in [options.fixed_nu, options.fixed_re_variance].into_iter().flatten() {
            if !(v > 0.0) {
                return Err(Error::validation("fixed variances must be positive"));
            }
        }
        if let Some((a, b)) = options.fixed_smoothing {
            if !(a > 0.0 && b > 0.0) {
                return Err(Error::validation("fixed smoothing variances must be positive"));
            }
        }
        if spec.include_random_effects && design.n_communities == 1 {
            log::warn!("random intercept with a single community: its variance is weakly identified");
        }
        let p = design.n_linear();
        let beta_prior = match &options.beta_prior {
            Some(pr) if pr.dim() != p => {
                return Err(Error::validation(format!("beta prior has dimension {}, design has {p}", pr.dim())))
            }
            Some(pr) => pr.clone(),
            None => priors.beta_prior(p),
        };
        let active: Vec<f64> = y.iter().zip(&design.weights).filter(|(_, &w)| w > 0.0).map(|(v, _)| *v).collect();
        let mean = active.iter().sum::<f64>() / active.len() as f64;
        let var = active.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / active.len().max(2) as f64;
        let k = design.n_knots();
        let (sb, sbz) = options.fixed_smoothing.unwrap_or((1.0, 1.0));
        let state = OutcomeState {
            beta: beta_prior.mean.clone(),
            b_u: DVector::zeros(k),
            b_uz: DVector::zeros(k),
            u: DVector::zeros(if spec.include_random_effects { design.n_communities } else { 0 }),
            sigma2_u: options.fixed_re_variance.unwrap_or(1.0),
            sigma2_bu: sb,
            sigma2_buz: sbz,
            nu: options.fixed_nu.unwrap_or(if var > 0.0 { var } else { 1.0 }),
        };
        Ok(OutcomeSampler {
            spec,
            priors,
            options,
            beta_prior,
            state,
            steps: [VarianceStep::new(), VarianceStep::new(), VarianceStep::new(), VarianceStep::new()],
            sweeps: 0,
        })
    }

    pub fn acceptance(&self) -> OutcomeAcceptance {
        OutcomeAcceptance {
            sigma2_u: self.steps[0].counter.rate(),
            sigma2_bu: self.steps[1].counter.rate(),
            sigma2_buz: self.steps[2].counter.rate(),
            nu: self.steps[3].counter.rate(),
        }
    }

    fn fail(&self, message: &str) -> Error {
        Error::Sampler {
            stage: "outcome",
            iteration: self.sweeps,
            message: message.into(),
        }
    }

    /// One sweep: random intercepts, spline coefficients, random-intercept
    /// variance, smoothing variances, linear coefficients, noise variance.
    pub fn sweep(&mut self, design: &OutcomeDesign, y: &[f64], adapt: bool, rng: &mut SimRng) -> Result<()> {
        if design.n_linear() != self.state.beta.len() || design.n_knots() != self.state.b_u.len() {
            return Err(Error::validation("design shape changed between sweeps"));
        }
        if self.spec.include_random_effects && design.n_communities != self.state.u.len() {
            return Err(Error::validation("community count changed between sweeps"));
        }
        let n = design.len();
        let w = &design.weights;
        let lin = &design.linear * &self.state.beta;
        let mut spl = match &design.spline {
            Some(s) => s * self.combined_b(),
            None => DVector::zeros(n),
        };
        let nu = self.state.nu;

        // (a) community intercepts
        if self.spec.include_random_effects {
            let mut num = vec![0.0; design.n_communities];
            for i in 0..n {
                if w[i] > 0.0 {
                    num[design.community[i]] += w[i] * (y[i] - lin[i] - spl[i]);
                }
            }
            let s2 = self.state.sigma2_u;
            for j in 0..design.n_communities {
                let prec = design.community_weight[j] / nu + 1.0 / s2;
                let mean = num[j] / nu / prec;
                self.state.u[j] = mean + rng.sample::<f64, _>(StandardNormal) / prec.sqrt();
            }
        }
        let re: Vec<f64> = if self.spec.include_random_effects {
            design.community.iter().map(|&c| self.state.u[c]).collect()
        } else {
            vec![0.0; n]
        };

        // (b) spline coefficients
        if let (Some(s), Some(gram)) = (&design.spline, &design.spline_gram) {
            let k = design.n_knots();
            let r: Vec<f64> = (0..n).map(|i| y[i] - lin[i] - re[i]).collect();
            let mut prec = gram / nu;
            for j in 0..2 * k {
                prec[(j, j)] += 1.0 / if j < k { self.state.sigma2_bu } else { self.state.sigma2_buz };
            }
            let canon = weighted_cross(s, w, &r) / nu;
            let b = sample_canonical_normal(&prec, &canon, rng).ok_or_else(|| self.fail("spline precision not positive definite"))?;
            self.state.b_u = b.rows(0, k).into_owned();
            self.state.b_uz = b.rows(k, k).into_owned();
            spl = s * &b;
        }

        // (c) random-intercept variance
        if self.spec.include_random_effects && self.options.fixed_re_variance.is_none() {
            let j = self.state.u.len() as f64;
            let ss = self.state.u.norm_squared();
            let (shape, scale) = (self.priors.re_scale_shape, self.priors.re_scale_scale);
            self.state.sigma2_u =
                self.steps[0].step(self.state.sigma2_u, |l| gamma_scale_target(l, j, ss, shape, scale), adapt, rng);
        }

        // (d) smoothing variances
        if !self.spec.linear_only && self.options.fixed_smoothing.is_none() {
            let k = self.state.b_u.len() as f64;
            let (ssu, ssz) = (self.state.b_u.norm_squared(), self.state.b_uz.norm_squared());
            let (ru, rz) = (self.priors.smoothing_rate, self.priors.smoothing_z_rate);
            self.state.sigma2_bu = self.steps[1].step(self.state.sigma2_bu, |l| exp_prior_target(l, k, ssu, ru), adapt, rng);
            self.state.sigma2_buz = self.steps[2].step(self.state.sigma2_buz, |l| exp_prior_target(l, k, ssz, rz), adapt, rng);
        }

        // (e) linear coefficients
        let r: Vec<f64> = (0..n).map(|i| y[i] - spl[i] - re[i]).collect();
        let prec = &design.linear_gram / nu + self.beta_prior.precision();
        let canon = weighted_cross(&design.linear, w, &r) / nu + self.beta_prior.precision() * &self.beta_prior.mean;
        self.state.beta = sample_canonical_normal(&prec, &canon, rng).ok_or_else(|| self.fail("linear precision not positive definite"))?;

        // (f) noise variance
        if self.options.fixed_nu.is_none() {
            let fitted = &design.linear * &self.state.beta;
            let ss: f64 = (0..n)
                .filter(|&i| w[i] > 0.0)
                .map(|i| w[i] * (y[i] - fitted[i] - spl[i] - re[i]).powi(2))
                .sum();
            if !ss.is_finite() {
                return Err(self.fail("non-finite likelihood"));
            }
            let (m, rate) = (design.active as f64, self.priors.nu_rate);
            self.state.nu = self.steps[3].step(nu, |l| exp_prior_target(l, m, ss, rate), adapt, rng);
        }

        self.sweeps += 1;
        let s = &self.state;
        let finite = s.beta.iter().chain(s.b_u.iter()).chain(s.b_uz.iter()).chain(s.u.iter()).all(|v| v.is_finite())
            && [s.sigma2_u, s.sigma2_bu, s.sigma2_buz, s.nu].iter().all(|v| v.is_finite() && *v > 0.0);
        if !finite {
            return Err(self.fail("non-finite parameter draw"));
        }
        Ok(())
    }

    fn combined_b(&self) -> DVector<f64> {
        let k = self.state.b_u.len();
        DVector::from_fn(2 * k, |j, _| if j < k { self.state.b_u[j] } else { self.state.b_uz[j - k] })
    }
}

/// Parameter names in the order of exported draws.
pub fn parameter_names(linear_names: &[String], n_knots: usize, n_communities: usize) -> Vec<String> {
    let mut names: Vec<String> = linear_names.iter().map(|n| format!("beta_{n}")).collect();
    names.extend((0..n_knots).map(|k| format!("b_u_{k}")));
    names.extend((0..n_knots).map(|k| format!("b_uz_{k}")));
    names.extend((0..n_communities).map(|j| format!("u_{j}")));
    names.extend(["sigma2_u", "sigma2_bu", "sigma2_buz", "nu"].map(String::from));
    names
}

#[derive(Debug, Clone)]
pub struct OutcomePosterior {
    pub draws: Vec<OutcomeState>,
    pub acceptance: OutcomeAcceptance,
    pub config: McmcConfig,
}

impl OutcomePosterior {
    pub fn write_csv<W: Write>(&self, writer: W, linear_names: &[String]) -> Result<()> {
        let first = &self.draws[0];
        let names = parameter_names(linear_names, first.b_u.len(), first.u.len());
        let rows: Vec<Vec<f64>> = self.draws.iter().map(OutcomeState::flat).collect();
        write_draws_csv(writer, &names, &rows)
    }

    pub fn trace<F: Fn(&OutcomeState) -> f64>(&self, f: F) -> Vec<f64> {
        self.draws.iter().map(f).collect()
    }
}

/// Run the sampler on a fixed design for `cfg.iterations` sweeps.
pub fn gibbs_sample(
    spec: OutcomeSpec,
    priors: OutcomePriors,
    options: OutcomeOptions,
    design: &OutcomeDesign,
    y: &[f64],
    cfg: &McmcConfig,
) -> Result<OutcomePosterior> {
    cfg.validate()?;
    let mut sampler = OutcomeSampler::new(spec, priors, options, design, y)?;
    let mut rng = rng_from_seed(cfg.seed);
    let mut draws = Vec::with_capacity(cfg.n_retained());
    for t in 0..cfg.iterations {
        sampler.sweep(design, y, t < cfg.burn_in, &mut rng)?;
        if cfg.is_retained(t) {
            draws.push(sampler.state.clone());
        }
    }
    Ok(OutcomePosterior {
        draws,
        acceptance: sampler.acceptance(),
        config: *cfg,
    })
}
