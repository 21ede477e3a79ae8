//! Run directory layout: metrics CSV, manifest and checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::{LoadedConfig, RunConfig};
use crate::error::{Error, Result};
use crate::sim::{run_with, RoundRecord, RunResult};

pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const TOOL_VERSION: &str = concat!("fedsel ", env!("CARGO_PKG_VERSION"));

/// Write `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    round: usize,
    selected: String,
    global_accuracy: f64,
    global_macro_f1: f64,
    round_latency: f64,
    cumulative_latency: f64,
    mean_reward: f64,
    agent_loss: Option<f64>,
    epsilon: Option<f64>,
}

impl From<&RoundRecord> for CsvRow {
    fn from(r: &RoundRecord) -> Self {
        CsvRow {
            round: r.round,
            selected: r
                .selected
                .iter()
                .map(|k| k.to_string())
                .collect::<Vec<_>>()
                .join(";"),
            global_accuracy: r.global_accuracy,
            global_macro_f1: r.global_macro_f1,
            round_latency: r.round_latency,
            cumulative_latency: r.cumulative_latency,
            mean_reward: r.mean_reward,
            agent_loss: r.agent_loss,
            epsilon: r.epsilon,
        }
    }
}

pub fn metrics_csv(records: &[RoundRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(CsvRow::from(r))
            .map_err(|e| Error::invalid(format!("writing metrics row: {e}")))?;
    }
    w.into_inner()
        .map_err(|e| Error::invalid(format!("flushing metrics: {e}")))
}

pub fn write_metrics(path: &Path, records: &[RoundRecord]) -> Result<()> {
    write_atomic(path, &metrics_csv(records)?)
}

pub fn read_metrics(path: &Path) -> Result<Vec<RoundRecord>> {
    let mut rd = csv::Reader::from_path(path)
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for row in rd.deserialize::<CsvRow>() {
        let row = row.map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        let selected = if row.selected.is_empty() {
            Vec::new()
        } else {
            row.selected
                .split(';')
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::invalid(format!("bad client id `{s}` in {}", path.display())))
                })
                .collect::<Result<Vec<usize>>>()?
        };
        out.push(RoundRecord {
            round: row.round,
            selected,
            global_accuracy: row.global_accuracy,
            global_macro_f1: row.global_macro_f1,
            round_latency: row.round_latency,
            cumulative_latency: row.cumulative_latency,
            mean_reward: row.mean_reward,
            agent_loss: row.agent_loss,
            epsilon: row.epsilon,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub policy: String,
    pub seed: u64,
    pub config: RunConfig,
    pub defaulted: Vec<String>,
    pub rounds_completed: usize,
    pub started_unix: u64,
    pub wall_time_secs: f64,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn checkpoint_path(dir: &Path, round: usize) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("round_{round:05}.json"))
}

/// Run to completion, streaming metrics and checkpoints into `dir`.
///
/// The metrics file is rewritten after every round so an interrupted run
/// leaves a complete prefix. A run with zero rounds only writes the
/// manifest.
pub fn run_to_dir(loaded: LoadedConfig, dir: &Path) -> Result<RunResult> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let started_unix = unix_now();
    let clock = Instant::now();
    let cfg = loaded.config.clone();
    let metrics_path = dir.join(METRICS_FILE);
    let mut files = Vec::new();
    let mut so_far: Vec<RoundRecord> = Vec::new();
    let result = run_with(cfg.clone(), |sim, out| {
        so_far.push(out.record.clone());
        write_metrics(&metrics_path, &so_far)?;
        let r = out.record.round;
        if cfg.checkpoint_every > 0 && (r % cfg.checkpoint_every == 0 || r == cfg.total_rounds) {
            let path = checkpoint_path(dir, r);
            write_atomic(&path, serde_json::to_string(&sim.checkpoint())?.as_bytes())?;
            files.push(format!("{CHECKPOINT_DIR}/round_{r:05}.json"));
        }
        Ok(())
    })?;
    if !result.records.is_empty() {
        files.insert(0, METRICS_FILE.to_string());
    }
    let manifest = Manifest {
        tool_version: TOOL_VERSION.to_string(),
        policy: cfg.policy.name().to_string(),
        seed: cfg.seed,
        rounds_completed: result.records.len(),
        config: cfg,
        defaulted: loaded.defaulted,
        started_unix,
        wall_time_secs: clock.elapsed().as_secs_f64(),
        files,
    };
    write_atomic(
        &dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let recs = vec![
            RoundRecord {
                round: 1,
                selected: vec![0, 4, 9],
                global_accuracy: 0.5,
                global_macro_f1: 0.25,
                round_latency: 1.5,
                cumulative_latency: 1.5,
                mean_reward: -0.1,
                agent_loss: Some(0.3),
                epsilon: Some(0.9),
            },
            RoundRecord {
                round: 2,
                selected: vec![],
                global_accuracy: 0.1 + 0.2,
                global_macro_f1: 0.0,
                round_latency: 2.0,
                cumulative_latency: 3.5,
                mean_reward: 0.0,
                agent_loss: None,
                epsilon: None,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metrics(&p, &recs).unwrap();
        assert_eq!(read_metrics(&p).unwrap(), recs);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("round,selected,global_accuracy"));
        assert!(text.contains(",0;4;9,"));
    }
}
