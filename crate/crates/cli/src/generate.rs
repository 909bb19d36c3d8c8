use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::Serialize;

use netgps::sim::{generate_network, generate_scenario_data, NetworkKind, OutcomeForm, Scenario};

use crate::util::{create, write_json};
use crate::{out_dir, CliResult, Form};

#[derive(Clone, Copy, ValueEnum)]
pub enum Model {
    Sbm,
    LatentCluster,
    School,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    model: Model,
    #[arg(long, default_value_t = 1000)]
    nodes: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Outcome model used to draw `y`.
    #[arg(long, value_enum, default_value = "linear")]
    outcome: Form,
    /// Draw outcomes without community random intercepts.
    #[arg(long)]
    no_re: bool,
    /// Write covariates only, leaving `z` and `y` empty.
    #[arg(long)]
    covariates_only: bool,
}

#[derive(Serialize)]
struct Resolved {
    model: &'static str,
    nodes: usize,
    seed: u64,
    outcome: &'static str,
    random_effects: bool,
    covariates_only: bool,
    directed: bool,
}

pub fn run(a: GenerateArgs) -> CliResult<()> {
    let network = match a.model {
        Model::Sbm => NetworkKind::Sbm,
        Model::LatentCluster => NetworkKind::LatentCluster,
        Model::School => NetworkKind::School,
    };
    let outcome = match a.outcome {
        Form::Linear => OutcomeForm::Linear,
        Form::Nonlinear => OutcomeForm::Nonlinear,
    };
    let scenario = Scenario {
        network,
        outcome,
        random_effects: !a.no_re,
        n: a.nodes,
        networks: 1,
        reps: 1,
        seed: a.seed,
    };
    let sim = generate_network(&scenario, 0)?;
    let units = if a.covariates_only {
        sim.units.clone()
    } else {
        let seed = netgps::rng::derive_seed(a.seed, &[0, 0]);
        generate_scenario_data(&scenario, &sim, seed)?.units
    };

    out_dir(&a.out)?;
    sim.network.write_edge_list(create(&a.out.join("edges.csv"))?)?;
    units.write_csv(create(&a.out.join("units.csv"))?)?;
    sim.communities.write_csv(create(&a.out.join("communities.csv"))?)?;
    write_json(
        &a.out.join("config.resolved.json"),
        &Resolved {
            model: network.name(),
            nodes: a.nodes,
            seed: a.seed,
            outcome: outcome.name(),
            random_effects: !a.no_re,
            covariates_only: a.covariates_only,
            directed: sim.network.is_directed(),
        },
    )?;

    let deg = sim.network.degrees();
    let n = deg.len() as f64;
    let mean = deg.iter().sum::<usize>() as f64 / n;
    let sd = (deg.iter().map(|&d| (d as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let isolated = deg.iter().filter(|&&d| d == 0).count();
    println!(
        "{} nodes, {} {} edges, mean degree {mean:.2} (sd {sd:.2}), {isolated} isolated, {} communities",
        deg.len(),
        sim.network.edge_count(),
        if sim.network.is_directed() { "directed" } else { "undirected" },
        sim.communities.n_communities()
    );
    Ok(())
}
