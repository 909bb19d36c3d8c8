use std::path::PathBuf;
use std::sync::atomic::Ordering;

use clap::Args;
use serde::Serialize;

use netgps::sim::{run_study, EstimatorVariant, Scenario, SimReport, StudyConfig};

use crate::util::{create, read_bytes, write_json};
use crate::{out_dir, CliResult, Failure, McmcArgs, CANCEL};

#[derive(Args)]
pub struct SimulateArgs {
    /// Scenario name such as `sbm-linear-re`, or `all`.
    #[arg(long)]
    scenario: String,
    /// Desk-scale plan: 500 nodes, one network, 50 replicates.
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    networks: Option<usize>,
    #[arg(long)]
    nodes: Option<usize>,
    /// Worker threads; overridden by NETGPS_THREADS.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Comma-separated estimator variants (linear-re, linear-nore,
    /// splines-re, splines-nore); all four by default.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    /// JSON study configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "sim-out")]
    out: PathBuf,
    /// Run posterior predictive checks on every fit.
    #[arg(long)]
    ppc: bool,
    #[command(flatten)]
    mcmc: McmcArgs,
}

#[derive(Serialize)]
struct Resolved<'a> {
    scenarios: &'a [Scenario],
    study: &'a StudyConfig,
}

fn threads_from_env() -> CliResult<Option<usize>> {
    match std::env::var("NETGPS_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&t| t > 0)
            .map(Some)
            .ok_or_else(|| Failure::validation(format!("NETGPS_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

pub fn run(a: SimulateArgs) -> CliResult<()> {
    let mut study = match &a.config {
        Some(p) => serde_json::from_slice::<StudyConfig>(&read_bytes(p)?)
            .map_err(|e| Failure::validation(format!("{}: {e}", p.display())))?,
        None => StudyConfig::default(),
    };
    if !a.variants.is_empty() {
        study.variants = a
            .variants
            .iter()
            .map(|v| EstimatorVariant::parse(v.trim()))
            .collect::<Result<_, _>>()?;
    }
    a.mcmc.apply(&mut study.estimation.mcmc);
    study.ppc |= a.ppc;
    if let Some(j) = a.jobs {
        study.jobs = Some(j);
    }
    if let Some(t) = threads_from_env()? {
        study.jobs = Some(t);
    }

    let base = if a.scenario == "all" {
        Scenario::all(a.seed)
    } else {
        vec![Scenario::parse(&a.scenario, a.seed)?]
    };
    let scenarios: Vec<Scenario> = base
        .into_iter()
        .map(|s| {
            let mut s = if a.desk { s.into_desk() } else { s };
            if let Some(v) = a.reps {
                s.reps = v;
            }
            if let Some(v) = a.networks {
                s.networks = v;
            }
            if let Some(v) = a.nodes {
                s.n = v;
            }
            s
        })
        .collect();
    for s in &scenarios {
        s.validate()?;
    }
    study.estimation.validate()?;

    ctrlc::set_handler(|| CANCEL.store(true, Ordering::SeqCst))
        .map_err(|e| Failure::validation(format!("cannot install interrupt handler: {e}")))?;

    out_dir(&a.out)?;
    write_json(
        &a.out.join("config.resolved.json"),
        &Resolved {
            scenarios: &scenarios,
            study: &study,
        },
    )?;
    let mut reports: Vec<SimReport> = Vec::new();
    for s in &scenarios {
        if CANCEL.load(Ordering::SeqCst) {
            break;
        }
        eprintln!("running {} ({} network(s) x {} replicates, n = {})", s.name(), s.networks, s.reps, s.n);
        let report = run_study(s, &study, Some(&CANCEL))?;
        let dir = a.out.join(s.name());
        report.write_dir(&dir)?;
        for f in &report.failures {
            eprintln!("warning: network {} replicate {} ({}) failed: {}", f.network, f.rep, f.variant, f.message);
        }
        reports.push(report);
    }

    let mut w = csv::Writer::from_writer(create(&a.out.join("report.csv"))?);
    for r in &reports {
        for row in &r.rows {
            w.serialize(row).map_err(netgps::Error::from)?;
        }
    }
    w.flush()?;
    let complete = reports.len() == scenarios.len() && reports.iter().all(|r| r.complete);
    for r in &reports {
        for row in r.rows.iter().filter(|row| row.estimand == "tau(0.5)" || row.estimand == "delta(0.5,0.4,0)") {
            println!(
                "{:<28} {:<13} {:<18} bias {:>8.4}  rmse {:>7.4}  coverage {:.3}  reps {}",
                row.scenario, row.estimator_variant, row.estimand, row.bias, row.rmse, row.coverage, row.reps
            );
        }
    }
    if !complete {
        return Err(Failure::interrupted("interrupted; partial report written and flagged incomplete"));
    }
    Ok(())
}
