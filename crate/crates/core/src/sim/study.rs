//! Replication driver and bias / RMSE / coverage aggregation.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::{generate_network, generate_scenario_data, truth_oracle, SimNetwork};
use super::Scenario;
use crate::error::{Error, Result};
use crate::estimator::{default_estimands, effects, estimate, ppc, EstimationConfig, PpcStatistic};
use crate::outcome::OutcomeSpec;
use crate::rng::derive_seed;

/// Outcome model used by the estimator in a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EstimatorVariant {
    pub linear_only: bool,
    pub random_effects: bool,
}

impl EstimatorVariant {
    pub const ALL: [EstimatorVariant; 4] = [
        EstimatorVariant { linear_only: true, random_effects: true },
        EstimatorVariant { linear_only: true, random_effects: false },
        EstimatorVariant { linear_only: false, random_effects: true },
        EstimatorVariant { linear_only: false, random_effects: false },
    ];

    pub fn name(self) -> String {
        format!(
            "{}-{}",
            if self.linear_only { "linear" } else { "splines" },
            if self.random_effects { "re" } else { "nore" }
        )
    }

    pub fn parse(s: &str) -> Result<Self> {
        EstimatorVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown estimator variant '{s}'")))
    }

    pub fn apply(self, base: &EstimationConfig) -> EstimationConfig {
        EstimationConfig {
            outcome: OutcomeSpec {
                linear_only: self.linear_only,
                include_random_effects: self.random_effects,
            },
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub variants: Vec<EstimatorVariant>,
    /// Template for every fit; its outcome spec and seed are overridden.
    pub estimation: EstimationConfig,
    /// Worker threads; all cores when `None`.
    pub jobs: Option<usize>,
    /// Run posterior predictive checks on every fit.
    pub ppc: bool,
    /// Largest tolerated share of failed fits.
    pub max_failure_share: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            variants: EstimatorVariant::ALL.to_vec(),
            estimation: EstimationConfig::default(),
            jobs: None,
            ppc: false,
            max_failure_share: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub estimand: String,
    pub truth: f64,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

impl EstimateRecord {
    pub fn covers(&self) -> bool {
        self.lo <= self.truth && self.truth <= self.hi
    }
}

/// One fit: a replicate under one estimator variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub network: usize,
    pub rep: usize,
    pub variant: String,
    pub estimates: Vec<EstimateRecord>,
    /// `(statistic, p-value)` when checks were requested.
    pub ppc: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub network: usize,
    pub rep: usize,
    pub variant: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: String,
    pub estimator_variant: String,
    pub estimand: String,
    pub bias: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub scenario: Scenario,
    /// False when the study was cancelled before every replicate ran.
    pub complete: bool,
    pub planned_fits: usize,
    pub rows: Vec<ReportRow>,
    pub failures: Vec<FailureRecord>,
    pub replicates: Vec<ReplicateRecord>,
}

impl SimReport {
    pub fn row(&self, variant: &str, estimand: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.estimator_variant == variant && r.estimand == estimand)
    }

    pub fn replicates_for<'a>(&'a self, variant: &'a str) -> impl Iterator<Item = &'a ReplicateRecord> + 'a {
        self.replicates.iter().filter(move |r| r.variant == variant)
    }

    /// `scenario,estimator_variant,estimand,bias,rmse,coverage,reps`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `network,rep,variant,estimand,truth,mean,lo,hi`.
    pub fn write_replicates_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["network", "rep", "variant", "estimand", "truth", "mean", "lo", "hi"])?;
        for r in &self.replicates {
            for e in &r.estimates {
                w.write_record([
                    r.network.to_string(),
                    r.rep.to_string(),
                    r.variant.clone(),
                    e.estimand.clone(),
                    e.truth.to_string(),
                    e.mean.to_string(),
                    e.lo.to_string(),
                    e.hi.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }

    /// Write `report.csv`, `replicates.csv` and `report.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join("report.csv"))?)?;
        self.write_replicates_csv(std::fs::File::create(dir.join("replicates.csv"))?)?;
        self.write_json(std::fs::File::create(dir.join("report.json"))?)?;
        Ok(())
    }
}

enum Outcome {
    Done(Vec<std::result::Result<ReplicateRecord, FailureRecord>>),
    Skipped,
}

fn run_replicate(
    scenario: &Scenario,
    sim: &SimNetwork,
    network: usize,
    rep: usize,
    cfg: &StudyConfig,
) -> Vec<std::result::Result<ReplicateRecord, FailureRecord>> {
    let seed = derive_seed(scenario.seed, &[network as u64, rep as u64]);
    let fail = |variant: String, e: &Error| FailureRecord {
        network,
        rep,
        variant,
        message: e.to_string(),
    };
    let data = match generate_scenario_data(scenario, sim, derive_seed(seed, &[0])) {
        Ok(d) => d,
        Err(e) => return cfg.variants.iter().map(|v| Err(fail(v.name(), &e))).collect(),
    };
    let truth = truth_oracle(
        scenario.outcome,
        sim,
        &data,
        &cfg.estimation.z_grid,
        &cfg.estimation.g_grid,
    );
    cfg.variants
        .iter()
        .map(|&v| {
            let mut est_cfg = v.apply(&cfg.estimation);
            est_cfg.mcmc.seed = derive_seed(seed, &[1]);
            let fit = estimate(&sim.network, &data.units, &sim.communities, &est_cfg).map_err(|e| fail(v.name(), &e))?;
            let requests = default_estimands(&fit.adrf);
            let posts = effects(&fit.adrf, &requests).map_err(|e| fail(v.name(), &e))?;
            let estimates = requests
                .iter()
                .zip(&posts)
                .filter_map(|(req, post)| {
                    truth.value(req).map(|t| EstimateRecord {
                        estimand: post.id.clone(),
                        truth: t,
                        mean: post.summary.mean,
                        lo: post.summary.q025,
                        hi: post.summary.q975,
                    })
                })
                .collect();
            let checks = if cfg.ppc {
                ppc(&fit, &PpcStatistic::defaults(), derive_seed(seed, &[2]))
                    .into_iter()
                    .map(|r| (r.statistic.id(), r.p_value))
                    .collect()
            } else {
                Vec::new()
            };
            Ok(ReplicateRecord {
                network,
                rep,
                variant: v.name(),
                estimates,
                ppc: checks,
            })
        })
        .collect()
}

fn aggregate(scenario: &str, variants: &[EstimatorVariant], records: &[ReplicateRecord]) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for v in variants {
        let name = v.name();
        let recs: Vec<&ReplicateRecord> = records.iter().filter(|r| r.variant == name).collect();
        let Some(first) = recs.first() else { continue };
        for (k, e) in first.estimates.iter().enumerate() {
            let errs: Vec<(f64, bool)> = recs
                .iter()
                .filter_map(|r| r.estimates.get(k))
                .filter(|x| x.estimand == e.estimand)
                .map(|x| (x.mean - x.truth, x.covers()))
                .collect();
            let m = errs.len() as f64;
            let bias = errs.iter().map(|(d, _)| d).sum::<f64>() / m;
            let rmse = (errs.iter().map(|(d, _)| d * d).sum::<f64>() / m).sqrt();
            let coverage = errs.iter().filter(|(_, c)| *c).count() as f64 / m;
            rows.push(ReportRow {
                scenario: scenario.to_string(),
                estimator_variant: name.clone(),
                estimand: e.estimand.clone(),
                bias,
                rmse,
                coverage,
                reps: errs.len(),
            });
        }
    }
    rows
}

/// Run every replicate of `scenario` under each estimator variant.
///
/// Networks are generated once per network index; replicates redraw
/// treatments and outcomes. Replicate `r` of network `k` uses the seed
/// derived from `(seed, k, r)`, so results do not depend on scheduling.
/// Raising `cancel` stops scheduling new replicates and yields a report
/// flagged incomplete.
pub fn run_study(scenario: &Scenario, cfg: &StudyConfig, cancel: Option<&AtomicBool>) -> Result<SimReport> {
    scenario.validate()?;
    cfg.estimation.validate()?;
    if cfg.variants.is_empty() {
        return Err(Error::validation("a study needs at least one estimator variant"));
    }
    if !(0.0..=1.0).contains(&cfg.max_failure_share) {
        return Err(Error::validation("failure share threshold must lie in [0, 1]"));
    }
    let networks: Vec<SimNetwork> = (0..scenario.networks)
        .map(|k| generate_network(scenario, k))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..scenario.networks)
        .flat_map(|k| (0..scenario.reps).map(move |r| (k, r)))
        .collect();
    let run = || -> Vec<Outcome> {
        jobs.par_iter()
            .map(|&(k, r)| {
                if cancel.is_some_and(|c| c.load(Ordering::SeqCst)) {
                    return Outcome::Skipped;
                }
                let out = run_replicate(scenario, &networks[k], k, r, cfg);
                log::info!("{}: network {k} replicate {r} finished", scenario.name());
                Outcome::Done(out)
            })
            .collect()
    };
    let outcomes = match cfg.jobs {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| Error::validation(format!("cannot start worker pool: {e}")))?
            .install(run),
        None => run(),
    };

    let mut complete = true;
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Skipped => complete = false,
            Outcome::Done(fits) => {
                for f in fits {
                    match f {
                        Ok(r) => records.push(r),
                        Err(e) => {
                            log::warn!("network {} replicate {} ({}): {}", e.network, e.rep, e.variant, e.message);
                            failures.push(e);
                        }
                    }
                }
            }
        }
    }
    let attempted = records.len() + failures.len();
    if attempted > 0 && failures.len() as f64 > cfg.max_failure_share * attempted as f64 {
        return Err(Error::Study {
            failed: failures.len(),
            total: attempted,
        });
    }
    Ok(SimReport {
        scenario: scenario.clone(),
        complete,
        planned_fits: jobs.len() * cfg.variants.len(),
        rows: aggregate(&scenario.name(), &cfg.variants, &records),
        failures,
        replicates: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcmc::McmcConfig;
    use crate::sim::{NetworkKind, OutcomeForm};

    fn quick() -> StudyConfig {
        StudyConfig {
            variants: vec![EstimatorVariant::ALL[0]],
            estimation: EstimationConfig {
                mcmc: McmcConfig {
                    iterations: 200,
                    burn_in: 100,
                    thin: 1,
                    seed: 0,
                },
                n_inner: 1,
                ..EstimationConfig::default()
            },
            jobs: Some(2),
            ..StudyConfig::default()
        }
    }

    fn small(reps: usize) -> Scenario {
        Scenario {
            n: 200,
            reps,
            ..Scenario::desk(NetworkKind::Sbm, OutcomeForm::Linear, true, 5)
        }
    }

    #[test]
    fn single_replicate_identities() {
        let report = run_study(&small(1), &quick(), None).unwrap();
        assert!(report.complete);
        assert!(!report.rows.is_empty());
        for row in &report.rows {
            assert_eq!(row.reps, 1);
            assert!(row.coverage == 0.0 || row.coverage == 1.0);
            assert_eq!(row.rmse, row.bias.abs());
        }
    }

    #[test]
    fn rows_satisfy_metric_bounds_and_are_schedule_independent() {
        let mut cfg = quick();
        let a = run_study(&small(3), &cfg, None).unwrap();
        cfg.jobs = Some(1);
        let b = run_study(&small(3), &cfg, None).unwrap();
        assert_eq!(a, b);
        for row in &a.rows {
            assert!((0.0..=1.0).contains(&row.coverage));
            assert!(row.rmse >= row.bias.abs());
        }
        let mut csv = Vec::new();
        a.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("scenario,estimator_variant,estimand,bias,rmse,coverage,reps\n"));
        assert!(text.contains("sbm-linear-re,linear-re,tau(0.5),"));
    }

    #[test]
    fn cancelled_study_is_incomplete() {
        let flag = AtomicBool::new(true);
        let report = run_study(&small(2), &quick(), Some(&flag)).unwrap();
        assert!(!report.complete);
        assert!(report.replicates.is_empty());
    }

    #[test]
    fn excessive_failures_abort() {
        let mut cfg = quick();
        // A knot count below two fails every spline fit.
        cfg.variants = vec![EstimatorVariant::ALL[2]];
        cfg.estimation.knots = Some(1);
        let err = run_study(&small(2), &cfg, None).unwrap_err();
        assert!(matches!(err, Error::Study { failed: 2, total: 2 }));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in EstimatorVariant::ALL {
            assert_eq!(EstimatorVariant::parse(&v.name()).unwrap(), v);
        }
    }
}
