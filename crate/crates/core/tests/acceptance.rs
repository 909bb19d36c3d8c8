//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line to
//! stderr (bypassing output capture) before asserting.
//!
//! The two simulation studies are run once and shared between tests.

use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use netgps::estimator::io::{write_adrf_csv, write_effects_csv, write_ppc_csv};
use netgps::estimator::{default_estimands, effects, estimate, ppc, EstimationConfig, PpcStatistic};
use netgps::mcmc::McmcConfig;
use netgps::outcome::{gibbs_sample, OutcomeDesign, OutcomeOptions, OutcomePriors, OutcomeSpec};
use netgps::ps::NormalPrior;
use netgps::rng::{derive_seed, rng_from_seed};
use netgps::sim::{
    generate_network, generate_scenario_data, run_study, truth_oracle, EstimatorVariant, NetworkKind, OutcomeForm,
    ReplicateRecord, Scenario, SimReport, StudyConfig,
};
use netgps::splines::{smoothness_order, SplineBasis};

const SEED: u64 = 1;
const TAU: &str = "tau(0.5)";
const DELTA: &str = "delta(0.5,0.4,0)";

fn report(name: &str, pass: bool, detail: String) {
    let line = format!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    let _ = writeln!(std::io::stderr().lock(), "{line}");
    assert!(pass, "{line}");
}

fn variant(name: &str) -> EstimatorVariant {
    EstimatorVariant::parse(name).unwrap()
}

/// SBM, linear outcome with random intercepts, n = 500, 50 replicates.
fn linear_study() -> &'static SimReport {
    static CELL: OnceLock<SimReport> = OnceLock::new();
    CELL.get_or_init(|| {
        let scenario = Scenario::desk(NetworkKind::Sbm, OutcomeForm::Linear, true, SEED);
        let cfg = StudyConfig {
            variants: vec![variant("linear-re"), variant("linear-nore")],
            ppc: true,
            ..Default::default()
        };
        run_study(&scenario, &cfg, None).unwrap()
    })
}

/// SBM, nonlinear outcome with random intercepts, n = 500, 20 replicates.
fn nonlinear_study() -> &'static SimReport {
    static CELL: OnceLock<SimReport> = OnceLock::new();
    CELL.get_or_init(|| {
        let scenario = Scenario {
            reps: 20,
            ..Scenario::desk(NetworkKind::Sbm, OutcomeForm::Nonlinear, true, SEED)
        };
        let cfg = StudyConfig {
            variants: vec![variant("linear-re"), variant("splines-re")],
            ppc: true,
            ..Default::default()
        };
        run_study(&scenario, &cfg, None).unwrap()
    })
}

/// First `reps` replicates of one variant.
fn first_reps<'a>(report: &'a SimReport, variant: &'a str, reps: usize) -> Vec<&'a ReplicateRecord> {
    let out: Vec<_> = report.replicates_for(variant).filter(|r| r.rep < reps).collect();
    assert_eq!(out.len(), reps, "{variant}: expected {reps} replicates");
    out
}

fn rmse(reps: &[&ReplicateRecord], estimand: &str) -> f64 {
    let se: f64 = reps
        .iter()
        .map(|r| {
            let e = r.estimates.iter().find(|e| e.estimand == estimand).unwrap();
            (e.mean - e.truth).powi(2)
        })
        .sum();
    (se / reps.len() as f64).sqrt()
}

fn p_value(r: &ReplicateRecord, stat: &str) -> f64 {
    r.ppc.iter().find(|(s, _)| s == stat).unwrap().1
}

#[test]
fn treatment_effect_recovery() {
    let rep = linear_study();
    let row = rep.row("linear-re", TAU).unwrap();
    let pass = row.reps == 50 && row.bias.abs() <= 0.05 && (0.88..=1.0).contains(&row.coverage);
    report(
        "treatment effect recovery, linear-re, 50 reps",
        pass,
        format!("bias {:.4} (|.| <= 0.05), coverage {:.3} (in [0.88, 1])", row.bias, row.coverage),
    );
}

#[test]
fn spillover_recovery_mid_grid() {
    let rep = linear_study();
    let row = rep.row("linear-re", DELTA).unwrap();
    report(
        "spillover recovery mid-grid, linear-re, 50 reps",
        row.reps == 50 && row.bias.abs() <= 0.03,
        format!("bias of {DELTA} {:.4} (|.| <= 0.03)", row.bias),
    );
}

#[test]
fn misspecification_contrast() {
    let rep = nonlinear_study();
    let lin = rep.row("linear-re", DELTA).unwrap();
    let spl = rep.row("splines-re", DELTA).unwrap();
    let pass = lin.reps == 20 && spl.reps == 20 && lin.bias.abs() >= 0.3 && spl.bias.abs() <= 0.1 && spl.coverage >= 0.85;
    report(
        "misspecification contrast, nonlinear outcome, 20 reps",
        pass,
        format!(
            "linear bias {:.4} (|.| >= 0.3), splines bias {:.4} (|.| <= 0.1), splines coverage {:.3} (>= 0.85)",
            lin.bias, spl.bias, spl.coverage
        ),
    );
}

#[test]
fn random_effects_reduce_rmse() {
    let rep = linear_study();
    let with = rmse(&first_reps(rep, "linear-re", 30), TAU);
    let without = rmse(&first_reps(rep, "linear-nore", 30), TAU);
    let ratio = without / with;
    report(
        "random intercepts reduce RMSE of tau(0.5), 30 reps",
        ratio >= 1.5,
        format!("rmse without {without:.4}, with {with:.4}, ratio {ratio:.3} (>= 1.5)"),
    );
}

#[test]
fn outcome_gibbs_matches_conjugate_posterior() {
    let mut rng = rng_from_seed(2024);
    let (n, p) = (200, 4);
    let x = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { rng.sample::<f64, _>(StandardNormal) });
    let beta = DVector::from_vec(vec![0.5, 1.0, -2.0, 0.25]);
    let nu = 1.5_f64;
    let y: Vec<f64> = (&x * &beta).iter().map(|m| m + nu.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
    let prior = NormalPrior::new(DVector::from_vec(vec![0.0, 0.5, 0.0, 0.0]), DMatrix::from_diagonal_element(p, p, 2.0)).unwrap();

    // Normal-normal posterior in closed form.
    let prec = x.transpose() * &x / nu + prior.precision();
    let cov = prec.clone().try_inverse().unwrap();
    let mean = &cov * (x.transpose() * DVector::from_column_slice(&y) / nu + prior.precision() * &prior.mean);

    let design = OutcomeDesign::new(x, None, vec![0; n], 1, vec![1.0; n]).unwrap();
    let spec = OutcomeSpec {
        linear_only: true,
        include_random_effects: false,
    };
    let options = OutcomeOptions {
        fixed_nu: Some(nu),
        beta_prior: Some(prior),
        ..Default::default()
    };
    let cfg = McmcConfig {
        iterations: 11000,
        burn_in: 1000,
        thin: 1,
        seed: 9,
    };
    let post = gibbs_sample(spec, OutcomePriors::default(), options, &design, &y, &cfg).unwrap();
    let m = post.draws.len() as f64;
    let draws: Vec<&DVector<f64>> = post.draws.iter().map(|s| &s.beta).collect();
    let est_mean = draws.iter().fold(DVector::zeros(p), |acc, b| acc + *b) / m;

    // Draws are independent given fixed nu, so the Monte Carlo errors are
    // those of iid normal samples.
    let mut worst: f64 = 0.0;
    for k in 0..p {
        let z = (est_mean[k] - mean[k]).abs() / (cov[(k, k)] / m).sqrt();
        worst = worst.max(z);
        for l in 0..p {
            let c = draws.iter().map(|b| (b[k] - est_mean[k]) * (b[l] - est_mean[l])).sum::<f64>() / (m - 1.0);
            let se = ((cov[(k, k)] * cov[(l, l)] + cov[(k, l)].powi(2)) / m).sqrt();
            worst = worst.max((c - cov[(k, l)]).abs() / se);
        }
    }
    report(
        "outcome Gibbs vs closed-form posterior, 200x4 design",
        worst <= 3.0,
        format!("largest deviation {worst:.2} Monte Carlo SEs over means and covariances (<= 3)"),
    );
}

#[test]
fn spline_whitening_and_order() {
    let mut worst: f64 = 0.0;
    let mut orders = Vec::new();
    for d in [2usize, 3] {
        let mut rng = rng_from_seed(40 + d as u64);
        let pts = DMatrix::from_fn(300, d, |_, _| rng.random::<f64>());
        let basis = SplineBasis::from_points(&pts, 30, 3).unwrap();
        worst = worst.max(basis.whitening_error());
        orders.push((smoothness_order(d), basis.order));
    }
    let pass = worst <= 1e-8 && orders.iter().all(|&(a, b)| a == 2 && b == 2);
    report(
        "spline whitening on the retained eigenspace",
        pass,
        format!("max entry error {worst:.2e} (<= 1e-8), orders for d = 2, 3: {orders:?} (all 2)"),
    );
}

#[test]
fn outcome_never_feeds_back_into_propensity_chains() {
    let scenario = Scenario {
        n: 300,
        ..Scenario::desk(NetworkKind::Sbm, OutcomeForm::Linear, true, SEED)
    };
    let sim = generate_network(&scenario, 0).unwrap();
    let data = generate_scenario_data(&scenario, &sim, 5).unwrap();
    let mut y = data.units.y.clone().unwrap();
    y.shuffle(&mut rng_from_seed(6));
    let permuted = data.units.clone().with_outcome(y).unwrap();
    let cfg = EstimationConfig {
        mcmc: McmcConfig {
            iterations: 600,
            burn_in: 300,
            thin: 2,
            seed: 3,
        },
        ..Default::default()
    };
    let a = estimate(&sim.network, &data.units, &sim.communities, &cfg).unwrap();
    let b = estimate(&sim.network, &permuted, &sim.communities, &cfg).unwrap();
    let csv = |post: &netgps::ps::PsPosterior| {
        let mut buf = Vec::new();
        post.write_csv(&mut buf).unwrap();
        buf
    };
    let bits = |post: &netgps::ps::PsPosterior| -> Vec<u64> { post.states.iter().flatten().map(|v| v.to_bits()).collect() };
    let same = bits(&a.ps) == bits(&b.ps) && bits(&a.gps) == bits(&b.gps) && csv(&a.ps) == csv(&b.ps) && csv(&a.gps) == csv(&b.gps);
    let outcome_moved = a.adrf.draws != b.adrf.draws;
    report(
        "permuting Y leaves propensity chains bit-identical",
        same && outcome_moved,
        format!("propensity chains identical: {same}, outcome stage changed: {outcome_moved}"),
    );
}

#[test]
fn truth_has_constant_treatment_effect() {
    let g: Vec<f64> = (0..=10).map(|k| f64::from(k) / 10.0).collect();
    let mut checked = 0;
    let mut exact = true;
    for kind in NetworkKind::ALL {
        for form in [OutcomeForm::Linear, OutcomeForm::Nonlinear] {
            let scenario = Scenario {
                n: 200,
                ..Scenario::desk(kind, form, true, SEED)
            };
            let sim = generate_network(&scenario, 0).unwrap();
            let data = generate_scenario_data(&scenario, &sim, derive_seed(SEED, &[0, 0])).unwrap();
            let truth = truth_oracle(form, &sim, &data, &[0, 1], &g);
            for &v in &g {
                exact &= truth.tau(v) == Some(2.0);
                checked += 1;
            }
        }
    }
    report(
        "true tau(g) is exactly 2 for every g and both outcome forms",
        exact,
        format!("{checked} grid values over 3 networks x 2 forms, all exactly 2: {exact}"),
    );
}

#[test]
fn ppc_calibration() {
    let well: Vec<f64> = first_reps(linear_study(), "linear-re", 20).iter().map(|r| p_value(r, "mean")).collect();
    let calibrated = well.iter().filter(|&&p| p > 0.05 && p < 0.95).count();
    let mis = first_reps(nonlinear_study(), "linear-re", 20);
    let flagged = mis.iter().filter(|r| r.ppc.iter().any(|(_, p)| *p < 0.05)).count();
    let pass = calibrated * 10 >= 9 * well.len() && flagged * 10 >= 8 * mis.len();
    report(
        "posterior predictive check calibration, 20 reps each",
        pass,
        format!(
            "well specified: mean p in (0.05, 0.95) in {calibrated}/{} (>= 90%); \
             linear on nonlinear: some p < 0.05 in {flagged}/{} (>= 80%)",
            well.len(),
            mis.len()
        ),
    );
}

/// Every output file of a generate / estimate / simulate cycle.
fn output_files(dir: &Path, seed: u64) -> Vec<(String, Vec<u8>)> {
    let scenario = Scenario {
        n: 200,
        reps: 2,
        ..Scenario::desk(NetworkKind::Sbm, OutcomeForm::Nonlinear, true, seed)
    };
    let sim = generate_network(&scenario, 0).unwrap();
    let data = generate_scenario_data(&scenario, &sim, derive_seed(seed, &[0, 0])).unwrap();
    let mcmc = McmcConfig {
        iterations: 300,
        burn_in: 150,
        thin: 1,
        seed,
    };
    let cfg = EstimationConfig {
        mcmc,
        ..Default::default()
    };
    let fit = estimate(&sim.network, &data.units, &sim.communities, &cfg).unwrap();
    let effs = effects(&fit.adrf, &default_estimands(&fit.adrf)).unwrap();
    let checks = ppc(&fit, &PpcStatistic::defaults(), derive_seed(seed, &[6]));

    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    let mut put = |name: &str, f: &dyn Fn(&mut Vec<u8>)| {
        let mut buf = Vec::new();
        f(&mut buf);
        files.push((name.to_string(), buf));
    };
    put("edges.csv", &|b| sim.network.write_edge_list(b).unwrap());
    put("units.csv", &|b| data.units.write_csv(b).unwrap());
    put("communities.csv", &|b| sim.communities.write_csv(b).unwrap());
    put("adrf.csv", &|b| write_adrf_csv(&fit.adrf, b).unwrap());
    put("effects.csv", &|b| write_effects_csv(&effs, b).unwrap());
    put("ppc.csv", &|b| write_ppc_csv(&checks, b).unwrap());
    put("chains/ps.csv", &|b| fit.ps.write_csv(b).unwrap());
    put("chains/gps.csv", &|b| fit.gps.write_csv(b).unwrap());
    put("chains/outcome.csv", &|b| fit.outcome.write_csv(b, &fit.linear_names).unwrap());

    let study = StudyConfig {
        variants: vec![variant("linear-re"), variant("splines-nore")],
        estimation: cfg,
        ppc: true,
        ..Default::default()
    };
    run_study(&scenario, &study, None).unwrap().write_dir(dir).unwrap();
    for name in ["report.csv", "replicates.csv", "report.json"] {
        files.push((format!("sim/{name}"), std::fs::read(dir.join(name)).unwrap()));
    }
    files
}

#[test]
fn outputs_are_byte_identical_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let a = output_files(&tmp.path().join("a"), 17);
    let b = output_files(&tmp.path().join("b"), 17);
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    let c = output_files(&tmp.path().join("c"), 18);
    let seed_matters = a.iter().zip(&c).any(|(x, y)| x.1 != y.1);
    report(
        "repeated runs with one seed write byte-identical files",
        differing.is_empty() && seed_matters,
        format!("{} files compared, differing: {differing:?}, another seed changes output: {seed_matters}", a.len()),
    );
}
