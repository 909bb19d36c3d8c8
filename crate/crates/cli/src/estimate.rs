use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use netgps::community::{detect_communities, CommunityAssignment, CommunitySource};
use netgps::data::UnitTable;
use netgps::estimator::io::{write_adrf_csv, write_adrf_curve_csv, write_effects_csv, write_ppc_csv, EstimationSummary};
use netgps::estimator::{default_estimands, effects, estimate, ppc, EstimationConfig, Estimand, MatchOptions, PpcStatistic};
use netgps::graph::{read_edge_list, EdgeListOptions, EdgeMode};
use netgps::rng::derive_seed;

use crate::util::{combined_hash, content_hash, create, parse_grid, read_bytes, write_json};
use crate::{out_dir, CliResult, Failure, McmcArgs};

#[derive(Args)]
pub struct EstimateArgs {
    /// `src,dst[,weight]` edge list over the unit ids.
    #[arg(long)]
    edges: PathBuf,
    /// `id,z,y,x1,...,xp` unit table.
    #[arg(long)]
    units: PathBuf,
    /// `node,community` labels; detected from the network when omitted.
    #[arg(long)]
    communities: Option<PathBuf>,
    /// Treat edges as directed nominations.
    #[arg(long)]
    directed: bool,
    /// JSON run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Match on the individual propensity score instead of modeling it.
    #[arg(long)]
    matching: bool,
    /// Drop the spline terms from the outcome model.
    #[arg(long)]
    linear_only: bool,
    /// Drop the community random intercepts.
    #[arg(long)]
    no_re: bool,
    /// Exposure grid as `start:end:step`.
    #[arg(long)]
    grid: Option<String>,
    /// Run posterior predictive checks.
    #[arg(long)]
    ppc: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    knots: Option<usize>,
    #[command(flatten)]
    mcmc: McmcArgs,
}

/// Contents of `--config` and of `config.resolved.json`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateRun {
    pub estimation: EstimationConfig,
    pub directed: bool,
    pub ppc: bool,
    /// Effects to report; every `tau(g)` and adjacent `delta` when absent.
    pub estimands: Option<Vec<Estimand>>,
}

#[derive(Serialize)]
struct InputHash {
    name: &'static str,
    file: String,
    sha256: String,
}

#[derive(Serialize)]
struct Summary {
    input_hash: String,
    inputs: Vec<InputHash>,
    communities: CommunitySource,
    n_communities: usize,
    #[serde(flatten)]
    estimation: EstimationSummary,
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn resolve(a: &EstimateArgs) -> CliResult<EstimateRun> {
    let mut run = match &a.config {
        Some(p) => serde_json::from_slice::<EstimateRun>(&read_bytes(p)?)
            .map_err(|e| Failure::validation(format!("{}: {e}", p.display())))?,
        None => EstimateRun::default(),
    };
    let cfg = &mut run.estimation;
    if a.matching {
        cfg.matching = Some(MatchOptions::default());
    }
    if a.linear_only {
        cfg.outcome.linear_only = true;
    }
    if a.no_re {
        cfg.outcome.include_random_effects = false;
    }
    if let Some(g) = &a.grid {
        cfg.g_grid = parse_grid(g)?;
    }
    if let Some(s) = a.seed {
        cfg.mcmc.seed = s;
    }
    if let Some(k) = a.knots {
        cfg.knots = Some(k);
    }
    a.mcmc.apply(&mut cfg.mcmc);
    run.directed |= a.directed;
    run.ppc |= a.ppc;
    run.estimation.validate()?;
    Ok(run)
}

pub fn run(a: EstimateArgs) -> CliResult<()> {
    let run = resolve(&a)?;
    let cfg = &run.estimation;

    let units_bytes = read_bytes(&a.units)?;
    let edges_bytes = read_bytes(&a.edges)?;
    let units = UnitTable::read_csv(units_bytes.as_slice(), &a.units)?;
    let mode = if run.directed { EdgeMode::Directed } else { EdgeMode::Undirected };
    let net = read_edge_list(
        edges_bytes.as_slice(),
        &a.edges,
        EdgeListOptions {
            mode,
            n_nodes: Some(units.len()),
        },
    )?;
    let mut inputs = vec![
        InputHash {
            name: "edges",
            file: file_name(&a.edges),
            sha256: content_hash(&edges_bytes),
        },
        InputHash {
            name: "units",
            file: file_name(&a.units),
            sha256: content_hash(&units_bytes),
        },
    ];
    let communities = match &a.communities {
        Some(p) => {
            let bytes = read_bytes(p)?;
            inputs.push(InputHash {
                name: "communities",
                file: file_name(p),
                sha256: content_hash(&bytes),
            });
            CommunityAssignment::read_csv(bytes.as_slice(), p, units.len())?
        }
        None => detect_communities(&net, derive_seed(cfg.mcmc.seed, &[5]))?,
    };

    let result = estimate(&net, &units, &communities, cfg)?;
    let requests = run.estimands.clone().unwrap_or_else(|| default_estimands(&result.adrf));
    let effs = effects(&result.adrf, &requests)?;
    let checks = if run.ppc {
        ppc(&result, &PpcStatistic::defaults(), derive_seed(cfg.mcmc.seed, &[6]))
    } else {
        Vec::new()
    };

    out_dir(&a.out)?;
    let chains = a.out.join("chains");
    out_dir(&chains)?;
    write_adrf_csv(&result.adrf, create(&a.out.join("adrf.csv"))?)?;
    write_adrf_curve_csv(&result.adrf, create(&a.out.join("adrf_curve.csv"))?)?;
    write_effects_csv(&effs, create(&a.out.join("effects.csv"))?)?;
    if run.ppc {
        write_ppc_csv(&checks, create(&a.out.join("ppc.csv"))?)?;
    }
    result.ps.write_csv(create(&chains.join("ps.csv"))?)?;
    result.gps.write_csv(create(&chains.join("gps.csv"))?)?;
    result
        .outcome
        .write_csv(create(&chains.join("outcome.csv"))?, &result.linear_names)?;
    if a.communities.is_none() {
        communities.write_csv(create(&a.out.join("communities.detected.csv"))?)?;
    }
    let parts: Vec<(String, String)> = inputs.iter().map(|i| (i.name.to_string(), i.sha256.clone())).collect();
    write_json(
        &a.out.join("summary.json"),
        &Summary {
            input_hash: combined_hash(&parts),
            inputs,
            communities: communities.source,
            n_communities: communities.n_communities(),
            estimation: EstimationSummary::new(&result, &effs, &checks),
        },
    )?;
    write_json(&a.out.join("config.resolved.json"), &run)?;

    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    for e in &effs {
        println!(
            "{:<22} mean {:>9.4}  95% [{:.4}, {:.4}]",
            e.id, e.summary.mean, e.summary.q025, e.summary.q975
        );
    }
    Ok(())
}
