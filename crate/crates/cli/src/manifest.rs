//! Run manifest: what a `run` output directory contains and which
//! task x seed units are done.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::{write_atomic, CliError};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitStatus {
    Completed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub task_id: String,
    pub seed: u64,
    pub status: UnitStatus,
    /// Relative to the output directory.
    pub trajectory: PathBuf,
    pub n_nodes: usize,
    pub best_score: Option<f64>,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub agent: String,
    pub config_digest: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
    /// Keyed by [`unit_key`].
    pub units: BTreeMap<String, UnitRecord>,
    pub artifacts: Vec<PathBuf>,
}

pub fn unit_key(task_id: &str, seed: u64) -> String {
    format!("{task_id}@{seed}")
}

impl RunManifest {
    pub fn new(agent: &str, config_digest: &str) -> Self {
        Self {
            run_id: format!("{agent}-{}", &config_digest[..12]),
            agent: agent.to_string(),
            config_digest: config_digest.to_string(),
            started_at: Utc::now(),
            finished_at: None,
            units: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Option<Self>, CliError> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(CliError::io(format!("reading {}", path.display())))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| CliError::Config(format!("{}: corrupt manifest: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())
    }

    pub fn is_completed(&self, task_id: &str, seed: u64) -> bool {
        self.units
            .get(&unit_key(task_id, seed))
            .is_some_and(|u| u.status == UnitStatus::Completed)
    }

    pub fn record(&mut self, unit: UnitRecord) {
        let key = unit_key(&unit.task_id, unit.seed);
        if !self.artifacts.contains(&unit.trajectory) {
            self.artifacts.push(unit.trajectory.clone());
            self.artifacts.sort();
        }
        self.units.insert(key, unit);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("demo", &"ab".repeat(32));
        m.record(UnitRecord {
            task_id: "t".into(),
            seed: 3,
            status: UnitStatus::Completed,
            trajectory: "logs/demo/seed-3/t.jsonl".into(),
            n_nodes: 4,
            best_score: Some(0.5),
            error: None,
        });
        m.save(dir.path()).unwrap();
        let back = RunManifest::load(dir.path()).unwrap().unwrap();
        assert_eq!(back, m);
        assert!(back.is_completed("t", 3));
        assert!(!back.is_completed("t", 4));
        assert_eq!(back.run_id, format!("demo-{}", "ab".repeat(6)));
    }

    #[test]
    fn missing_manifest_is_none() {
        let dir = tempfile::tempdir().unwrap();
        assert!(RunManifest::load(dir.path()).unwrap().is_none());
    }
}
