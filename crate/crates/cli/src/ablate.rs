use std::path::{Path, PathBuf};

use clap::ValueEnum;
use log::{info, warn};
use serde::Serialize;

use crate::error::CliError;
use crate::run::{create_unique_dir, now, run_root, timestamped, train_run, write_json_atomic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Sparsity,
    Criterion,
    #[value(name = "sigma_init")]
    SigmaInit,
    /// Draws of the multi-step addition estimator.
    #[value(name = "mc_steps")]
    McSteps,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Sparsity => "sparsity",
            Axis::Criterion => "criterion",
            Axis::SigmaInit => "sigma_init",
            Axis::McSteps => "mc_steps",
        }
    }

    /// Config overrides that put a leg at `value`.
    pub fn overrides(self, value: &str) -> Vec<String> {
        match self {
            Axis::Sparsity => vec![format!("subspace.sparsity={value}")],
            Axis::Criterion => vec![format!("subspace.criterion=\"{value}\"")],
            Axis::SigmaInit => vec![format!("model.sigma_init={value}")],
            Axis::McSteps => vec![
                "subspace.addition=\"multi_step\"".into(),
                format!("subspace.mc_samples={value}"),
            ],
        }
    }
}

#[derive(Debug, Serialize)]
struct SweepManifest<'a> {
    config_path: String,
    overrides: &'a [String],
    axis: Axis,
    values: &'a [String],
    started_at: String,
}

/// One line of `ablate.csv`.
#[derive(Debug, Serialize)]
struct LegRow {
    value: String,
    status: &'static str,
    exit_code: u8,
    final_acc: Option<f64>,
    final_ece: Option<f64>,
    final_rmse: Option<f64>,
    flops_ratio: Option<f64>,
    active: Option<usize>,
    run_dir: String,
    error: String,
}

/// Train one leg per value under a shared sweep directory. Failed legs are
/// recorded with their exit code and the sweep moves on.
pub fn cmd_ablate(
    config: &Path,
    overrides: &[String],
    axis: Axis,
    values: &[String],
    name: Option<&str>,
) -> Result<PathBuf, CliError> {
    if values.is_empty() {
        return Err(CliError::Config("ablation needs at least one value".into()));
    }
    let default_name = timestamped(&format!("ablate-{}", axis.name()));
    let sweep = create_unique_dir(&run_root(), name.unwrap_or(&default_name))?;
    write_json_atomic(
        &sweep.join("sweep.json"),
        &SweepManifest {
            config_path: config.display().to_string(),
            overrides,
            axis,
            values,
            started_at: now(),
        },
    )?;
    let mut csv = csv::Writer::from_path(sweep.join("ablate.csv"))
        .map_err(|e| CliError::Io(e.to_string()))?;
    for (i, value) in values.iter().enumerate() {
        let mut leg_overrides = overrides.to_vec();
        leg_overrides.extend(axis.overrides(value));
        let leg_name = format!("leg-{i:02}");
        info!("{} = {value}: {leg_name}", axis.name());
        let outcome = train_run(config, &leg_overrides, &sweep, Some(&leg_name));
        let run_dir = outcome
            .run_dir
            .as_deref()
            .and_then(|d| d.strip_prefix(&sweep).ok())
            .map(|d| d.display().to_string())
            .unwrap_or_default();
        let row = match outcome.result {
            Ok(s) => {
                let last = s.final_metrics.as_ref();
                LegRow {
                    value: value.clone(),
                    status: s.status,
                    exit_code: 0,
                    final_acc: last.and_then(|r| r.acc),
                    final_ece: last.and_then(|r| r.ece),
                    final_rmse: last.and_then(|r| r.rmse),
                    flops_ratio: s.flops.map(|f| f.ratio),
                    active: last.map(|r| r.active),
                    run_dir,
                    error: String::new(),
                }
            }
            Err(e) => {
                warn!("{} = {value} failed: {e}", axis.name());
                LegRow {
                    value: value.clone(),
                    status: e.kind(),
                    exit_code: e.exit_code(),
                    final_acc: None,
                    final_ece: None,
                    final_rmse: None,
                    flops_ratio: None,
                    active: None,
                    run_dir,
                    error: e.to_string(),
                }
            }
        };
        csv.serialize(&row)
            .map_err(|e| CliError::Io(e.to_string()))?;
        csv.flush()?;
    }
    Ok(sweep)
}
