use std::path::Path;

use clap::ValueEnum;
use serde::Serialize;
use ssvi::checkpoint::Checkpoint;
use ssvi::config::RunConfig;
use ssvi::trainer::{evaluate, stream_rng, streams};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub split: Split,
    pub n: usize,
    pub samples: usize,
    pub nll: f64,
    pub acc: Option<f64>,
    pub ece: Option<f64>,
    pub rmse: Option<f64>,
}

/// Evaluate a saved network on one split of the dataset a config describes.
pub fn cmd_eval(
    checkpoint: &Path,
    config: &Path,
    overrides: &[String],
    split: Split,
    samples: usize,
    seed: u64,
) -> Result<EvalReport, CliError> {
    if samples == 0 {
        return Err(CliError::Config("--samples must be at least 1".into()));
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = RunConfig::load(config, overrides)?;
    let data = cfg.load_data(config.parent().unwrap_or(Path::new("")))?;
    let ds = match split {
        Split::Train => &data.train,
        Split::Test => &data.test,
    };
    let dims = ckpt.net.dims();
    if dims.first() != Some(&ds.in_dim()) || dims.last() != Some(&ds.out_dim()) {
        return Err(CliError::Data(format!(
            "network dims {dims:?} do not fit data with {} inputs and {} outputs",
            ds.in_dim(),
            ds.out_dim()
        )));
    }
    let s = evaluate(
        &ckpt.net,
        ds,
        samples,
        cfg.eval.ece_bins,
        &mut stream_rng(seed, streams::EVAL),
    )?;
    Ok(EvalReport {
        split,
        n: ds.len(),
        samples,
        nll: s.nll,
        acc: s.acc,
        ece: s.ece,
        rmse: s.rmse,
    })
}
