//! Simulation study: scenario grid, data-generating processes, ground truth
//! and the replication driver.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod dgp;
pub mod school;
pub mod study;

pub use dgp::{
    generate_network, generate_scenario_data, outcome_mean, structural_mean, true_individual_ps, truth_oracle,
    ScenarioData, SimNetwork, TruthTable, RE_VARIANCE, TREATMENT_EFFECT,
};
pub use school::{surrogate_school_network, SchoolConfig};
pub use study::{run_study, EstimateRecord, EstimatorVariant, ReplicateRecord, ReportRow, SimReport, StudyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkKind {
    Sbm,
    LatentCluster,
    School,
}

impl NetworkKind {
    pub const ALL: [NetworkKind; 3] = [NetworkKind::Sbm, NetworkKind::LatentCluster, NetworkKind::School];

    pub fn name(self) -> &'static str {
        match self {
            NetworkKind::Sbm => "sbm",
            NetworkKind::LatentCluster => "latent-cluster",
            NetworkKind::School => "school",
        }
    }
}

impl FromStr for NetworkKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NetworkKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown network model '{s}' (expected sbm, latent-cluster or school)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeForm {
    Linear,
    Nonlinear,
}

impl OutcomeForm {
    pub fn name(self) -> &'static str {
        match self {
            OutcomeForm::Linear => "linear",
            OutcomeForm::Nonlinear => "nonlinear",
        }
    }
}

/// One cell of the scenario grid together with its replication plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub network: NetworkKind,
    pub outcome: OutcomeForm,
    /// Community random intercepts with variance 2, or none.
    pub random_effects: bool,
    pub n: usize,
    pub networks: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Scenario {
    /// Full-size plan: n = 1000; five networks of 100 replicates for the
    /// generated graphs, one fixed school network with 500 replicates.
    pub fn full(network: NetworkKind, outcome: OutcomeForm, random_effects: bool, seed: u64) -> Self {
        let (networks, reps) = match network {
            NetworkKind::School => (1, 500),
            _ => (5, 100),
        };
        Scenario {
            network,
            outcome,
            random_effects,
            n: 1000,
            networks,
            reps,
            seed,
        }
    }

    /// Desk plan: n = 500, one network, 50 replicates.
    pub fn desk(network: NetworkKind, outcome: OutcomeForm, random_effects: bool, seed: u64) -> Self {
        Scenario {
            network,
            outcome,
            random_effects,
            n: 500,
            networks: 1,
            reps: 50,
            seed,
        }
    }

    /// Parse `<network>-<linear|nonlinear>-<re|nore>` into the full-size plan.
    pub fn parse(name: &str, seed: u64) -> Result<Self> {
        let bad = || Error::validation(format!("unknown scenario '{name}' (expected <sbm|latent-cluster|school>-<linear|nonlinear>-<re|nore>)"));
        let (rest, re) = name.rsplit_once('-').ok_or_else(bad)?;
        let (net, form) = rest.rsplit_once('-').ok_or_else(bad)?;
        let network: NetworkKind = net.parse().map_err(|_| bad())?;
        let outcome = match form {
            "linear" => OutcomeForm::Linear,
            "nonlinear" => OutcomeForm::Nonlinear,
            _ => return Err(bad()),
        };
        let random_effects = match re {
            "re" => true,
            "nore" => false,
            _ => return Err(bad()),
        };
        Ok(Scenario::full(network, outcome, random_effects, seed))
    }

    /// The twelve scenarios, full-size plans.
    pub fn all(seed: u64) -> Vec<Scenario> {
        let mut out = Vec::with_capacity(12);
        for network in NetworkKind::ALL {
            for outcome in [OutcomeForm::Linear, OutcomeForm::Nonlinear] {
                for re in [true, false] {
                    out.push(Scenario::full(network, outcome, re, seed));
                }
            }
        }
        out
    }

    /// Same scenario with the desk replication plan.
    pub fn into_desk(self) -> Self {
        Scenario::desk(self.network, self.outcome, self.random_effects, self.seed)
    }

    pub fn name(&self) -> String {
        format!(
            "{}-{}-{}",
            self.network.name(),
            self.outcome.name(),
            if self.random_effects { "re" } else { "nore" }
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 || self.networks == 0 {
            return Err(Error::validation("a scenario needs at least one network and one replicate"));
        }
        let min = match self.network {
            NetworkKind::School => 8,
            _ => 10,
        };
        if self.n < min {
            return Err(Error::validation(format!("{} nodes is too few for the {} model", self.n, self.network.name())));
        }
        Ok(())
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}
