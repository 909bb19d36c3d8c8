//! CSV and JSON export of estimation output.

use std::io::Write;

use serde::Serialize;

use super::{AdrfPosterior, EffectPosterior, EstimationResult, PpcResult};
use crate::error::Result;
use crate::mcmc::{quantile_sorted, ParamSummary};

/// `z,g,draw,value`.
pub fn write_adrf_csv<W: Write>(adrf: &AdrfPosterior, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["z", "g", "draw", "value"])?;
    for ((z, g), draws) in adrf.cells().zip(&adrf.draws) {
        for (m, v) in draws.iter().enumerate() {
            w.write_record([z.to_string(), format!("{g}"), m.to_string(), format!("{v}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `g,z,mean,lo,hi` with a 95% equal-tailed interval.
pub fn write_adrf_curve_csv<W: Write>(adrf: &AdrfPosterior, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["g", "z", "mean", "lo", "hi"])?;
    for &g in &adrf.g_values {
        for &z in &adrf.z_values {
            let d = &adrf.draws[adrf.cell_index(z, g).expect("grid cell")];
            let mut sorted = d.clone();
            sorted.sort_by(f64::total_cmp);
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            w.write_record([
                format!("{g}"),
                z.to_string(),
                format!("{mean}"),
                format!("{}", quantile_sorted(&sorted, 0.025)),
                format!("{}", quantile_sorted(&sorted, 0.975)),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `estimand,draw,value`.
pub fn write_effects_csv<W: Write>(effects: &[EffectPosterior], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["estimand", "draw", "value"])?;
    for e in effects {
        for (m, v) in e.draws.iter().enumerate() {
            w.write_record([e.id.clone(), m.to_string(), format!("{v}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `statistic,draw,replicate,observed`.
pub fn write_ppc_csv<W: Write>(results: &[PpcResult], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["statistic", "draw", "replicate", "observed"])?;
    for r in results {
        let id = r.statistic.id();
        for (m, v) in r.replicates.iter().enumerate() {
            w.write_record([id.clone(), m.to_string(), format!("{v}"), format!("{}", r.observed)])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct PpcSummary {
    pub statistic: String,
    pub observed: f64,
    pub p_value: f64,
}

#[derive(Debug, Serialize)]
pub struct AcceptanceSummary {
    pub ps: f64,
    pub gps: f64,
    pub outcome: crate::outcome::OutcomeAcceptance,
}

#[derive(Debug, Serialize)]
pub struct EstimationSummary {
    pub n_units: usize,
    pub n_draws: usize,
    pub adrf: Vec<ParamSummary>,
    pub effects: Vec<ParamSummary>,
    pub ppc: Vec<PpcSummary>,
    pub diagnostics: Vec<ParamSummary>,
    pub acceptance: AcceptanceSummary,
    pub mean_matched_units: Option<f64>,
    pub warnings: Vec<String>,
}

impl EstimationSummary {
    pub fn new(result: &EstimationResult, effects: &[EffectPosterior], ppc: &[PpcResult]) -> Self {
        EstimationSummary {
            n_units: result.n_units(),
            n_draws: result.adrf.n_draws(),
            adrf: result.adrf.summary(),
            effects: effects.iter().map(|e| e.summary.clone()).collect(),
            ppc: ppc
                .iter()
                .map(|r| PpcSummary {
                    statistic: r.statistic.id(),
                    observed: r.observed,
                    p_value: r.p_value,
                })
                .collect(),
            diagnostics: result.diagnostics(),
            acceptance: AcceptanceSummary {
                ps: result.ps.acceptance_rate,
                gps: result.gps.acceptance_rate,
                outcome: result.outcome.acceptance,
            },
            mean_matched_units: (!result.matched_sizes.is_empty())
                .then(|| result.matched_sizes.iter().sum::<usize>() as f64 / result.matched_sizes.len() as f64),
            warnings: result.warnings.clone(),
        }
    }
}
