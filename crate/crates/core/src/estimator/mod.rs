//! Three-stage estimation: individual propensity score, neighborhood GPS,
//! then the outcome model, with potential outcomes imputed on an exposure
//! grid after every retained joint draw.
//!
//! The first two stages are sampled up front and never see the outcome.
//! Joint iteration `t` plugs the stage-one and stage-two states from
//! iteration `t` into the outcome design and refines the outcome chain with
//! a few Gibbs sweeps.

pub mod effects;
pub mod io;
pub mod matching;
pub mod ppc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::community::CommunityAssignment;
use crate::data::UnitTable;
use crate::error::{Error, Result};
use crate::exposure::{compute_exposure, ExposureSpec};
use crate::graph::Network;
use crate::mcmc::{summarize, McmcConfig, ParamSummary};
use crate::outcome::{ImputeMode, OutcomeDesign, OutcomeOptions, OutcomePosterior, OutcomePriors, OutcomeSampler, OutcomeSpec};
use crate::ps::{
    sample_individual_ps, sample_neighborhood_gps, sigmoid, softplus, IndividualPsModel, NeighborhoodGpsModel, NormalPrior, PsPosterior,
};
use crate::rng::{derive_seed, rng_from_seed};
use crate::splines::{default_knot_count, SplineBasis};

pub use effects::{default_estimands, effect_draws, effects, EffectPosterior, Estimand};
pub use matching::{match_on_ps, Caliper, MatchOptions, MatchResult};
pub use ppc::{ppc, PpcResult, PpcStatistic};

pub fn default_g_grid() -> Vec<f64> {
    (0..=10).map(|k| f64::from(k) / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimationConfig {
    /// Chain schedule shared by all stages; its seed is the master seed.
    pub mcmc: McmcConfig,
    /// Outcome Gibbs sweeps per joint iteration.
    pub n_inner: usize,
    pub z_grid: Vec<u8>,
    pub g_grid: Vec<f64>,
    /// Covariates of the treatment model; all by default.
    pub ps_covariates: Option<Vec<String>>,
    /// Covariates of the neighborhood model; all by default.
    pub gps_covariates: Option<Vec<String>>,
    /// Add neighbor means of the neighborhood-model covariates.
    pub gps_neighbor_means: bool,
    pub matching: Option<MatchOptions>,
    pub outcome: OutcomeSpec,
    pub priors: OutcomePriors,
    pub ps_prior_sd: f64,
    pub gps_prior_sd: f64,
    /// Knot count; `min(30, n / 4)` by default.
    pub knots: Option<usize>,
    pub impute: ImputeMode,
    /// Use the observed outcome in the cell matching a unit's own exposure.
    pub use_observed: bool,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            mcmc: McmcConfig::default(),
            n_inner: 5,
            z_grid: vec![0, 1],
            g_grid: default_g_grid(),
            ps_covariates: None,
            gps_covariates: None,
            gps_neighbor_means: true,
            matching: None,
            outcome: OutcomeSpec::default(),
            priors: OutcomePriors::default(),
            ps_prior_sd: 10.0,
            gps_prior_sd: 10.0,
            knots: None,
            impute: ImputeMode::Draw,
            use_observed: false,
        }
    }
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<()> {
        self.mcmc.validate()?;
        self.priors.validate()?;
        if self.n_inner == 0 {
            return Err(Error::validation("n_inner must be at least 1"));
        }
        if self.z_grid.is_empty() || self.g_grid.is_empty() {
            return Err(Error::validation("exposure grid is empty"));
        }
        if self.z_grid.iter().any(|&z| z > 1) {
            return Err(Error::validation("treatment grid values must be 0 or 1"));
        }
        if let Some(g) = self.g_grid.iter().find(|g| !(0.0..=1.0).contains(*g)) {
            return Err(Error::validation(format!("grid exposure {g} is outside [0, 1]")));
        }
        for (i, a) in self.g_grid.iter().enumerate() {
            if self.g_grid[..i].iter().any(|b| (a - b).abs() < 1e-9) {
                return Err(Error::validation(format!("grid exposure {a} is repeated")));
            }
        }
        if !(self.ps_prior_sd > 0.0 && self.gps_prior_sd > 0.0) {
            return Err(Error::validation("prior standard deviations must be positive"));
        }
        match self.matching.map(|m| m.caliper) {
            Some(Caliper::Absolute(c) | Caliper::SdLogit(c)) if !(c > 0.0) => {
                return Err(Error::validation("caliper must be positive"));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Posterior draws of the average potential outcome per grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AdrfPosterior {
    pub z_values: Vec<u8>,
    pub g_values: Vec<f64>,
    /// `draws[cell][m]`, cells ordered z-major.
    pub draws: Vec<Vec<f64>>,
    /// Units averaged over.
    pub units: Vec<usize>,
}

impl AdrfPosterior {
    pub fn cell_index(&self, z: u8, g: f64) -> Option<usize> {
        let zi = self.z_values.iter().position(|&v| v == z)?;
        let gi = self.g_values.iter().position(|&v| (v - g).abs() < 1e-9)?;
        Some(zi * self.g_values.len() + gi)
    }

    pub fn cells(&self) -> impl Iterator<Item = (u8, f64)> + '_ {
        self.z_values
            .iter()
            .flat_map(move |&z| self.g_values.iter().map(move |&g| (z, g)))
    }

    pub fn n_draws(&self) -> usize {
        self.draws.first().map_or(0, Vec::len)
    }

    pub fn summary(&self) -> Vec<ParamSummary> {
        self.cells()
            .zip(&self.draws)
            .map(|((z, g), d)| summarize(&format!("mu({z},{g})"), d))
            .collect()
    }
}

/// Everything needed to rebuild the outcome design for any joint draw.
#[derive(Debug, Clone)]
pub(crate) struct FitContext {
    pub units: Vec<usize>,
    pub z: Vec<u8>,
    pub y: Vec<f64>,
    pub g: Vec<f64>,
    pub degree: Vec<usize>,
    pub successes: Vec<usize>,
    pub community: Vec<usize>,
    pub n_communities: usize,
    /// Treatment-model design rows of the eligible units.
    pub ps_x: DMatrix<f64>,
    /// Neighborhood-model design rows `[1, z, x...]` of the eligible units.
    pub gps_x: DMatrix<f64>,
    pub basis: Option<SplineBasis>,
    pub spec: OutcomeSpec,
    pub matching: Option<MatchOptions>,
}

impl FitContext {
    fn uses_phi(&self) -> bool {
        self.matching.is_none()
    }

    pub fn phi(&self, beta: &DVector<f64>) -> Vec<f64> {
        (&self.ps_x * beta).iter().map(|&e| sigmoid(e)).collect()
    }

    /// Neighborhood linear predictor without the treatment term.
    fn gps_base(&self, beta: &DVector<f64>) -> Vec<f64> {
        let full = &self.gps_x * beta;
        (0..self.units.len()).map(|i| full[i] - beta[1] * f64::from(self.z[i])).collect()
    }

    pub fn lambda_observed(&self, beta: &DVector<f64>) -> Vec<f64> {
        let eta = &self.gps_x * beta;
        (0..self.units.len())
            .map(|i| crate::ps::binomial_pmf(self.successes[i], self.degree[i], eta[i]))
            .collect()
    }

    pub fn linear_names(&self) -> Vec<String> {
        let base: &[&str] = if self.uses_phi() {
            &["intercept", "g", "phi", "lambda", "lambda_g"]
        } else {
            &["intercept", "g", "lambda", "lambda_g"]
        };
        let mut names: Vec<String> = base.iter().map(|s| s.to_string()).collect();
        names.extend(base.iter().map(|s| if *s == "intercept" { "z".to_string() } else { format!("z_{s}") }));
        names
    }

    fn n_linear(&self) -> usize {
        if self.uses_phi() {
            10
        } else {
            8
        }
    }

    fn linear_row(&self, z: u8, g: f64, phi: f64, lam: f64, out: &mut [f64]) {
        let zf = f64::from(z);
        let h = if self.uses_phi() {
            out[..5].copy_from_slice(&[1.0, g, phi, lam, lam * g]);
            5
        } else {
            out[..4].copy_from_slice(&[1.0, g, lam, lam * g]);
            4
        };
        for k in 0..h {
            out[h + k] = zf * out[k];
        }
    }

    fn spline_point(&self, g: f64, phi: f64, lam: f64) -> ([f64; 3], usize) {
        if self.uses_phi() {
            ([g, phi, lam], 3)
        } else {
            ([g, lam, 0.0], 2)
        }
    }

    pub fn design(&self, phi: &[f64], lam: &[f64], weights: Vec<f64>) -> Result<OutcomeDesign> {
        let n = self.units.len();
        let p = self.n_linear();
        let mut linear = DMatrix::zeros(n, p);
        let mut row = vec![0.0; p];
        for i in 0..n {
            self.linear_row(self.z[i], self.g[i], phi[i], lam[i], &mut row);
            linear.row_mut(i).copy_from_slice(&row);
        }
        let spline = self.basis.as_ref().map(|b| {
            let k = b.n_knots();
            let mut r = vec![0.0; k];
            let mut raw = DMatrix::zeros(n, k);
            for i in 0..n {
                let (pt, d) = self.spline_point(self.g[i], phi[i], lam[i]);
                b.kernel_row(&pt[..d], &mut r);
                raw.row_mut(i).copy_from_slice(&r);
            }
            let u = raw * &b.omega_inv_sqrt;
            DMatrix::from_fn(n, 2 * k, |i, j| if j < k { u[(i, j)] } else { f64::from(self.z[i]) * u[(i, j - k)] })
        });
        OutcomeDesign::new(linear, spline, self.community.clone(), self.n_communities, weights)
    }

    fn weights(&self, phi: &[f64]) -> Result<Vec<f64>> {
        match &self.matching {
            None => Ok(vec![1.0; self.units.len()]),
            Some(opts) => Ok(match_on_ps(&self.z, phi, opts)?.weights),
        }
    }
}

/// Output of [`estimate`].
#[derive(Debug, Clone)]
pub struct EstimationResult {
    pub adrf: AdrfPosterior,
    pub ps: PsPosterior,
    pub gps: PsPosterior,
    pub outcome: OutcomePosterior,
    pub linear_names: Vec<String>,
    /// Matched-sample size per retained draw when matching is on.
    pub matched_sizes: Vec<usize>,
    pub warnings: Vec<String>,
    pub config: EstimationConfig,
    pub(crate) context: FitContext,
}

impl EstimationResult {
    pub fn n_units(&self) -> usize {
        self.context.units.len()
    }

    /// Convergence summaries of the main scalar parameters.
    pub fn diagnostics(&self) -> Vec<ParamSummary> {
        let mut out = Vec::new();
        for (prefix, post) in [("ps", &self.ps), ("gps", &self.gps)] {
            for (k, name) in post.coefficient_names.iter().enumerate() {
                out.push(summarize(&format!("{prefix}.{name}"), &post.coefficient_trace(k)));
            }
        }
        for (k, name) in self.linear_names.iter().enumerate() {
            out.push(summarize(&format!("outcome.beta_{name}"), &self.outcome.trace(|s| s.beta[k])));
        }
        out.push(summarize("outcome.nu", &self.outcome.trace(|s| s.nu)));
        if self.config.outcome.include_random_effects {
            out.push(summarize("outcome.sigma2_u", &self.outcome.trace(|s| s.sigma2_u)));
        }
        if !self.config.outcome.linear_only {
            out.push(summarize("outcome.sigma2_bu", &self.outcome.trace(|s| s.sigma2_bu)));
            out.push(summarize("outcome.sigma2_buz", &self.outcome.trace(|s| s.sigma2_buz)));
        }
        out
    }
}

fn select_columns(units: &UnitTable, names: &Option<Vec<String>>) -> Result<Vec<usize>> {
    match names {
        None => Ok((0..units.n_covariates()).collect()),
        Some(list) => list
            .iter()
            .map(|n| {
                units
                    .covariate_index(n)
                    .ok_or_else(|| Error::validation(format!("unknown covariate `{n}`")))
            })
            .collect(),
    }
}

/// Neighborhood-model covariates for node `i`: own values, then neighbor
/// means when requested.
pub(crate) fn gps_covariates(net: &Network, units: &UnitTable, cols: &[usize], neighbor_means: bool, i: usize) -> Vec<f64> {
    let mut row: Vec<f64> = cols.iter().map(|&c| units.x[(i, c)]).collect();
    if neighbor_means {
        let nb = net.neighbors(i);
        for &c in cols {
            row.push(nb.iter().map(|&j| units.x[(j, c)]).sum::<f64>() / nb.len() as f64);
        }
    }
    row
}

/// Run the three-stage estimator and impute the ADRF on the configured grid.
pub fn estimate(net: &Network, units: &UnitTable, communities: &CommunityAssignment, cfg: &EstimationConfig) -> Result<EstimationResult> {
    cfg.validate()?;
    let n = net.n_nodes();
    if units.len() != n || communities.len() != n {
        return Err(Error::validation(format!(
            "network has {n} nodes, unit table {} rows, community table {} rows",
            units.len(),
            communities.len()
        )));
    }
    let z_all = units.treatment()?;
    let y_all = units.outcome()?;
    let exposure = compute_exposure(net, z_all, &ExposureSpec::Proportion, None)?;
    let eligible = exposure.eligible_indices();
    if eligible.is_empty() {
        return Err(Error::validation("no unit has a neighbor"));
    }
    let mut warnings = Vec::new();

    // Stage one: treatment model on every unit.
    let ps_cols = select_columns(units, &cfg.ps_covariates)?;
    let ps_design = DMatrix::from_fn(n, ps_cols.len() + 1, |i, j| if j == 0 { 1.0 } else { units.x[(i, ps_cols[j - 1])] });
    let mut ps_names = vec!["intercept".to_string()];
    ps_names.extend(ps_cols.iter().map(|&c| units.covariate_names[c].clone()));
    let ps_model = IndividualPsModel {
        link: crate::ps::Link::Logit,
        prior: NormalPrior::isotropic(ps_cols.len() + 1, cfg.ps_prior_sd),
    };
    let ps_cfg = McmcConfig {
        seed: derive_seed(cfg.mcmc.seed, &[0]),
        ..cfg.mcmc
    };
    let ps = sample_individual_ps(&ps_design, z_all, &ps_model, &ps_cfg, ps_names)?;
    warnings.extend(ps.warnings.iter().cloned());

    // Stage two: neighborhood model on eligible units.
    let gps_cols = select_columns(units, &cfg.gps_covariates)?;
    let rows: Vec<Vec<f64>> = eligible
        .iter()
        .map(|&i| gps_covariates(net, units, &gps_cols, cfg.gps_neighbor_means, i))
        .collect();
    let q = rows.first().map_or(0, Vec::len);
    let z: Vec<u8> = eligible.iter().map(|&i| z_all[i]).collect();
    let gps_x = DMatrix::from_fn(eligible.len(), q + 2, |r, c| match c {
        0 => 1.0,
        1 => f64::from(z[r]),
        _ => rows[r][c - 2],
    });
    let mut gps_names = vec!["intercept".to_string(), "z".to_string()];
    gps_names.extend(gps_cols.iter().map(|&c| units.covariate_names[c].clone()));
    if cfg.gps_neighbor_means {
        gps_names.extend(gps_cols.iter().map(|&c| format!("nbr_mean_{}", units.covariate_names[c])));
    }
    let degree: Vec<usize> = eligible.iter().map(|&i| net.degree(i)).collect();
    let successes: Vec<usize> = eligible
        .iter()
        .map(|&i| net.neighbors(i).iter().filter(|&&j| z_all[j] == 1).count())
        .collect();
    let gps_model = NeighborhoodGpsModel {
        prior: NormalPrior::isotropic(q + 2, cfg.gps_prior_sd),
        include_treatment: true,
        dispersion: 1.0,
    };
    let gps_cfg = McmcConfig {
        seed: derive_seed(cfg.mcmc.seed, &[1]),
        ..cfg.mcmc
    };
    let gps = sample_neighborhood_gps(&gps_x, &successes, &degree, &gps_model, &gps_cfg, gps_names)?;
    warnings.extend(gps.warnings.iter().cloned());

    // Communities restricted to eligible units, relabeled compactly.
    let mut map = vec![usize::MAX; communities.n_communities()];
    let mut community = Vec::with_capacity(eligible.len());
    for &i in &eligible {
        let c = communities.labels()[i];
        if map[c] == usize::MAX {
            map[c] = map.iter().filter(|&&v| v != usize::MAX).count();
        }
        community.push(map[c]);
    }
    let n_communities = map.iter().filter(|&&v| v != usize::MAX).count();

    let mut ctx = FitContext {
        units: eligible.clone(),
        z,
        y: eligible.iter().map(|&i| y_all[i]).collect(),
        g: eligible.iter().map(|&i| exposure.g[i].expect("eligible")).collect(),
        degree,
        successes,
        community,
        n_communities,
        ps_x: DMatrix::from_fn(eligible.len(), ps_design.ncols(), |r, c| ps_design[(eligible[r], c)]),
        gps_x,
        basis: None,
        spec: cfg.outcome,
        matching: cfg.matching,
    };

    // Knots and standardization are fixed once, from the posterior modes.
    if !cfg.outcome.linear_only {
        let phi = ctx.phi(&ps.mode);
        let lam = ctx.lambda_observed(&gps.mode);
        let d = if ctx.uses_phi() { 3 } else { 2 };
        let pts = DMatrix::from_fn(eligible.len(), d, |i, c| ctx.spline_point(ctx.g[i], phi[i], lam[i]).0[c]);
        let k = cfg.knots.unwrap_or_else(|| default_knot_count(eligible.len()));
        if k < 2 {
            return Err(Error::validation(format!("{k} knots is too few for a spline term")));
        }
        ctx.basis = Some(SplineBasis::from_points(&pts, k, derive_seed(cfg.mcmc.seed, &[4]))?);
    }

    run_joint_chain(ctx, ps, gps, cfg, warnings)
}

fn run_joint_chain(
    ctx: FitContext,
    ps: PsPosterior,
    gps: PsPosterior,
    cfg: &EstimationConfig,
    warnings: Vec<String>,
) -> Result<EstimationResult> {
    let mut rng = rng_from_seed(derive_seed(cfg.mcmc.seed, &[2]));
    let mut impute_rng = rng_from_seed(derive_seed(cfg.mcmc.seed, &[3]));
    let grid = ImputationGrid::new(&ctx, cfg);
    let n_cells = cfg.z_grid.len() * cfg.g_grid.len();
    let mut adrf_draws: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.mcmc.n_retained()); n_cells];
    let mut retained = Vec::with_capacity(cfg.mcmc.n_retained());
    let mut matched_sizes = Vec::new();
    let mut sampler: Option<OutcomeSampler> = None;
    for t in 0..cfg.mcmc.iterations {
        let phi = ctx.phi(&ps.states[t]);
        let lam = ctx.lambda_observed(&gps.states[t]);
        let weights = ctx.weights(&phi)?;
        let design = ctx.design(&phi, &lam, weights.clone()).map_err(|e| match e {
            Error::Sampler { stage, message, .. } => Error::Sampler {
                stage,
                iteration: t,
                message,
            },
            other => other,
        })?;
        let s = match sampler.as_mut() {
            Some(s) => s,
            None => sampler.insert(OutcomeSampler::new(cfg.outcome, cfg.priors, OutcomeOptions::default(), &design, &ctx.y)?),
        };
        for _ in 0..cfg.n_inner {
            s.sweep(&design, &ctx.y, t < cfg.mcmc.burn_in, &mut rng).map_err(|e| match e {
                Error::Sampler { stage, message, .. } => Error::Sampler {
                    stage,
                    iteration: t,
                    message,
                },
                other => other,
            })?;
        }
        if cfg.mcmc.is_retained(t) {
            let cells = grid.impute(&ctx, &phi, &gps.states[t], &s.state, cfg, &mut impute_rng);
            for (col, v) in adrf_draws.iter_mut().zip(cells) {
                col.push(v);
            }
            retained.push(s.state.clone());
            if ctx.matching.is_some() {
                matched_sizes.push(weights.iter().filter(|&&w| w > 0.0).count());
            }
        }
    }
    let sampler = sampler.expect("at least one iteration");
    let outcome = OutcomePosterior {
        draws: retained,
        acceptance: sampler.acceptance(),
        config: McmcConfig {
            seed: derive_seed(cfg.mcmc.seed, &[2]),
            ..cfg.mcmc
        },
    };
    Ok(EstimationResult {
        adrf: AdrfPosterior {
            z_values: cfg.z_grid.clone(),
            g_values: cfg.g_grid.clone(),
            draws: adrf_draws,
            units: ctx.units.clone(),
        },
        ps,
        gps,
        outcome,
        linear_names: ctx.linear_names(),
        matched_sizes,
        warnings,
        config: cfg.clone(),
        context: ctx,
    })
}

/// Per-unit constants for evaluating the GPS on the grid.
struct ImputationGrid {
    /// `successes[gi][i]` and matching log binomial coefficients.
    successes: Vec<Vec<usize>>,
    log_choose: Vec<Vec<f64>>,
}

impl ImputationGrid {
    fn new(ctx: &FitContext, cfg: &EstimationConfig) -> Self {
        let mut successes = Vec::new();
        let mut log_choose = Vec::new();
        for &g in &cfg.g_grid {
            let k: Vec<usize> = ctx.degree.iter().map(|&d| crate::ps::successes_for(g, d)).collect();
            log_choose.push(k.iter().zip(&ctx.degree).map(|(&k, &d)| ln_binomial(d as u64, k as u64)).collect());
            successes.push(k);
        }
        ImputationGrid { successes, log_choose }
    }

    /// Unit-averaged imputed outcomes for every cell, z-major.
    fn impute<R: Rng>(
        &self,
        ctx: &FitContext,
        phi: &[f64],
        gps_beta: &DVector<f64>,
        state: &crate::outcome::OutcomeState,
        cfg: &EstimationConfig,
        rng: &mut R,
    ) -> Vec<f64> {
        let n = ctx.units.len();
        let base = ctx.gps_base(gps_beta);
        let coef = ctx.basis.as_ref().map(|b| {
            let cu = b.kernel_coefficients(state.b_u.as_slice());
            let cuz = b.kernel_coefficients(state.b_uz.as_slice());
            (b, cu, cuz)
        });
        let mut row = vec![0.0; ctx.n_linear()];
        let mut out = Vec::with_capacity(cfg.z_grid.len() * cfg.g_grid.len());
        let sd = state.nu.sqrt();
        for &z in &cfg.z_grid {
            let zf = f64::from(z);
            let combined: Option<Vec<f64>> = coef
                .as_ref()
                .map(|(_, cu, cuz)| cu.iter().zip(cuz).map(|(a, b)| a + zf * b).collect());
            for (gi, &g) in cfg.g_grid.iter().enumerate() {
                let mut total = 0.0;
                for i in 0..n {
                    if cfg.use_observed && z == ctx.z[i] && (g - ctx.g[i]).abs() < 1e-9 {
                        total += ctx.y[i];
                        continue;
                    }
                    let eta = base[i] + gps_beta[1] * zf;
                    let k = self.successes[gi][i] as f64;
                    let lam = (self.log_choose[gi][i] - k * softplus(-eta) - (ctx.degree[i] as f64 - k) * softplus(eta)).exp();
                    ctx.linear_row(z, g, phi[i], lam, &mut row);
                    let mut m: f64 = row.iter().zip(state.beta.iter()).map(|(a, b)| a * b).sum();
                    if let (Some((b, _, _)), Some(c)) = (&coef, &combined) {
                        let (pt, d) = ctx.spline_point(g, phi[i], lam);
                        m += b.kernel_dot(&pt[..d], c);
                    }
                    if ctx.spec.include_random_effects {
                        m += state.u[ctx.community[i]];
                    }
                    if cfg.impute == ImputeMode::Draw {
                        m += sd * rng.sample::<f64, _>(StandardNormal);
                    }
                    total += m;
                }
                out.push(total / n as f64);
            }
        }
        out
    }
}
