//! Run directories: manifest, metrics streams, checkpoints and summary of a
//! single training run.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use chrono::{SecondsFormat, Utc};
use log::info;
use serde::Serialize;
use ssvi::config::RunConfig;
use ssvi::metrics::{write_csv, FlopsEstimate, MetricsRecord};
use ssvi::trainer::{evaluate, stream_rng, EvalSummary, TrainError, TrainEvent, Trainer};

use crate::error::CliError;

/// Environment variable naming the directory all runs are created under.
pub const RUN_ROOT_ENV: &str = "SSVI_RUN_ROOT";

/// RNG stream of the post-training evaluation on the training set; the
/// trainer owns streams 0 to 5.
const SUMMARY_STREAM: u64 = 6;

pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn timestamped(prefix: &str) -> String {
    format!("{prefix}-{}", Utc::now().format("%Y%m%dT%H%M%S"))
}

/// Create `parent/name`, appending `-1`, `-2`, ... if it already exists.
pub fn create_unique_dir(parent: &Path, name: &str) -> io::Result<PathBuf> {
    fs::create_dir_all(parent)?;
    let mut i = 0;
    loop {
        let p = if i == 0 {
            parent.join(name)
        } else {
            parent.join(format!("{name}-{i}"))
        };
        match fs::create_dir(&p) {
            Ok(()) => return Ok(p),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => i += 1,
            Err(e) => return Err(e),
        }
    }
}

/// Write through a temporary sibling and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// File names inside the run directory.
#[derive(Debug, Clone, Serialize)]
pub struct Outputs {
    pub config: &'static str,
    pub metrics_jsonl: &'static str,
    pub metrics_csv: &'static str,
    pub mask_events: &'static str,
    pub checkpoint: &'static str,
    pub diagnostic: &'static str,
    pub summary: &'static str,
}

pub const OUTPUTS: Outputs = Outputs {
    config: "config.toml",
    metrics_jsonl: "metrics.jsonl",
    metrics_csv: "metrics.csv",
    mask_events: "mask_events.jsonl",
    checkpoint: "final.ckpt",
    diagnostic: "diagnostic.ckpt",
    summary: "summary.json",
};

/// Written once before training starts and never touched again; the end
/// time and outcome go to `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub config_path: String,
    pub overrides: Vec<String>,
    pub config: RunConfig,
    pub git_describe: String,
    pub seed: u64,
    pub started_at: String,
    pub run_dir: String,
    pub outputs: Outputs,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub status: &'static str,
    pub exit_code: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub started_at: String,
    pub finished_at: String,
    pub records: usize,
    pub final_metrics: Option<MetricsRecord>,
    /// Training-set evaluation of the final network.
    pub final_train: Option<EvalSummary>,
    pub flops: Option<FlopsEstimate>,
}

/// Outcome of [`train_run`]. The directory exists once the manifest has been
/// written, even if training then failed.
pub struct RunOutcome {
    pub run_dir: Option<PathBuf>,
    pub result: Result<RunSummary, CliError>,
}

/// Load the config, materialize the data, then train inside a fresh
/// directory `parent/name`.
pub fn train_run(
    config_path: &Path,
    overrides: &[String],
    parent: &Path,
    name: Option<&str>,
) -> RunOutcome {
    let mut run_dir = None;
    let result = train_inner(config_path, overrides, parent, name, &mut run_dir);
    RunOutcome { run_dir, result }
}

fn train_inner(
    config_path: &Path,
    overrides: &[String],
    parent: &Path,
    name: Option<&str>,
    run_dir: &mut Option<PathBuf>,
) -> Result<RunSummary, CliError> {
    let mut cfg = RunConfig::load(config_path, overrides)?;
    // the snapshot must reload from inside the run directory
    if !cfg.data.path.is_empty() {
        let base = config_path.parent().unwrap_or(Path::new(""));
        cfg.data.path = std::path::absolute(base.join(&cfg.data.path))?
            .display()
            .to_string();
    }
    let data = cfg.load_data(Path::new(""))?;
    let trainer = Trainer::new(cfg.train_config(), &data)?;

    let default_name = timestamped(&format!("seed{}", cfg.seed));
    let dir = create_unique_dir(parent, name.unwrap_or(&default_name))?;
    *run_dir = Some(dir.clone());
    let started_at = now();
    write_atomic(&dir.join(OUTPUTS.config), cfg.to_toml().as_bytes())?;
    let manifest = RunManifest {
        config_path: config_path.display().to_string(),
        overrides: overrides.to_vec(),
        config: cfg.clone(),
        git_describe: git_describe(),
        seed: cfg.seed,
        started_at: started_at.clone(),
        run_dir: dir.display().to_string(),
        outputs: OUTPUTS,
    };
    write_json_atomic(&dir.join("manifest.json"), &manifest)?;
    info!("run {} started", dir.display());

    let mut metrics = BufWriter::new(File::create(dir.join(OUTPUTS.metrics_jsonl))?);
    let mut events = BufWriter::new(File::create(dir.join(OUTPUTS.mask_events))?);
    let mut write_err: Option<io::Error> = None;
    let mut n_records = 0;
    let mut last_record = None;
    let outer = cfg.optim.outer_steps;
    let out = trainer.run_with(|ev| {
        let line = match ev {
            TrainEvent::Mask(e) => serde_json::to_string(e).map(|l| (l, false)),
            TrainEvent::Metrics(r) => {
                n_records += 1;
                last_record = Some(r.clone());
                info!(
                    "update {n_records}/{outer}: nll {:.4} acc {} sparsity {:.3}",
                    r.nll,
                    r.acc.map_or("-".into(), |a| format!("{a:.4}")),
                    r.sparsity
                );
                serde_json::to_string(r).map(|l| (l, true))
            }
        };
        if write_err.is_some() {
            return;
        }
        let res = line.map_err(io::Error::other).and_then(|(l, is_metrics)| {
            let w: &mut dyn Write = if is_metrics {
                &mut metrics
            } else {
                &mut events
            };
            writeln!(w, "{l}")
        });
        if let Err(e) = res {
            write_err = Some(e);
        }
    });
    metrics.flush()?;
    events.flush()?;
    if let Some(e) = write_err {
        return Err(e.into());
    }

    let finish = |status, err: &CliError| RunSummary {
        status,
        exit_code: err.exit_code(),
        error: Some(err.to_string()),
        started_at: started_at.clone(),
        finished_at: now(),
        records: n_records,
        final_metrics: last_record.clone(),
        final_train: None,
        flops: None,
    };
    let out = match out {
        Ok(out) => out,
        Err(TrainError::NonFinite {
            step,
            what,
            snapshot,
        }) => {
            let diag = dir.join(OUTPUTS.diagnostic);
            snapshot.save(&diag)?;
            let err = CliError::Numerical(format!(
                "non-finite {what} at step {step}; state before the step saved to {}",
                diag.display()
            ));
            write_json_atomic(&dir.join(OUTPUTS.summary), &finish("numerical-abort", &err))?;
            return Err(err);
        }
        Err(e) => {
            let err = CliError::from(e);
            write_json_atomic(&dir.join(OUTPUTS.summary), &finish("failed", &err))?;
            return Err(err);
        }
    };

    write_csv(
        &out.records,
        BufWriter::new(File::create(dir.join(OUTPUTS.metrics_csv))?),
    )
    .map_err(|e| CliError::Io(e.to_string()))?;
    out.checkpoint.save(&dir.join(OUTPUTS.checkpoint))?;
    let final_train = evaluate(
        &out.net,
        &data.train,
        cfg.eval.samples,
        cfg.eval.ece_bins,
        &mut stream_rng(cfg.seed, SUMMARY_STREAM),
    )?;
    let summary = RunSummary {
        status: "ok",
        exit_code: 0,
        error: None,
        started_at,
        finished_at: now(),
        records: out.records.len(),
        final_metrics: out.records.last().cloned(),
        final_train: Some(final_train),
        flops: Some(out.flops),
    };
    write_json_atomic(&dir.join(OUTPUTS.summary), &summary)?;
    info!("run {} finished", dir.display());
    Ok(summary)
}
