//! Run manifests: one JSON object per command invocation, appended as a
//! line to `runs.jsonl` in the output directory.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::{Error, Result};

pub const RUN_LOG: &str = "runs.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument vector, program name excluded.
    pub args: Vec<String>,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub version: String,
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub finished: Option<f64>,
    pub outputs: Vec<PathBuf>,
}

pub fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    pub fn start(command: &str, args: Vec<String>, config: &ExperimentConfig) -> Self {
        Self {
            command: command.into(),
            args,
            config: config.clone(),
            seed: config.train.seed,
            version: env!("CARGO_PKG_VERSION").into(),
            started: now(),
            finished: None,
            outputs: Vec::new(),
        }
    }

    /// Stamp the end time and append the manifest to `dir/runs.jsonl`.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished = Some(now());
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let path = dir.join(RUN_LOG);
        let mut line = serde_json::to_string(&self).map_err(|e| Error::format(&path, e.to_string()))?;
        line.push('\n');
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(Error::io(&path))?;
        f.write_all(line.as_bytes()).map_err(Error::io(&path))?;
        Ok(path)
    }
}

pub fn read_runs(path: &Path) -> Result<Vec<RunManifest>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifests_append() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        let mut a = RunManifest::start("train", vec!["train".into()], &cfg);
        a.outputs.push("x".into());
        a.finish(dir.path()).unwrap();
        RunManifest::start("eval", vec![], &cfg).finish(dir.path()).unwrap();
        let runs = read_runs(&dir.path().join(RUN_LOG)).unwrap();
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[0].command, "train");
        assert_eq!(runs[0].outputs, vec![PathBuf::from("x")]);
        assert!(runs[1].finished.unwrap() >= runs[1].started);
    }
}
