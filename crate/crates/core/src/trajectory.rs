//! Append-only JSONL trajectory store and replay into solution trees.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ExecStatus, ExecutionOutcome, NodeId, Operator, SolutionNode, SolutionTree, TreeError};

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("replay failed: {0}")]
    Tree(#[from] TreeError),
}

/// One line of a trajectory log. Field set and order are fixed; absent
/// values are written as null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub run_id: String,
    pub task_id: String,
    pub node_id: NodeId,
    pub parent_id: Option<NodeId>,
    pub operator: Operator,
    pub draft_index: Option<u8>,
    pub plan: String,
    pub code: String,
    pub exec_status: ExecStatus,
    pub wall_time_s: f64,
    pub score: Option<f64>,
    pub created_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
}

impl TrajectoryRecord {
    pub fn from_node(run_id: &str, task_id: &str, node: &SolutionNode) -> Self {
        Self {
            run_id: run_id.to_string(),
            task_id: task_id.to_string(),
            node_id: node.node_id,
            parent_id: node.parent_id,
            operator: node.operator,
            draft_index: node.draft_index,
            plan: node.plan.clone(),
            code: node.code.clone(),
            exec_status: node.exec.status,
            wall_time_s: node.exec.wall_time_s,
            score: node.score,
            created_at: node.created_at,
            finished_at: node.finished_at,
        }
    }

    /// The node this record describes. Execution logs are not stored, so
    /// `log_excerpt` comes back empty.
    pub fn to_node(&self) -> SolutionNode {
        SolutionNode {
            node_id: self.node_id,
            parent_id: self.parent_id,
            operator: self.operator,
            draft_index: self.draft_index,
            plan: self.plan.clone(),
            code: self.code.clone(),
            exec: ExecutionOutcome {
                status: self.exec_status,
                wall_time_s: self.wall_time_s,
                log_excerpt: String::new(),
            },
            score: self.score,
            created_at: self.created_at,
            finished_at: self.finished_at,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Serialized appends to one log file.
pub struct TrajectoryWriter {
    path: String,
    file: Mutex<File>,
}

impl TrajectoryWriter {
    pub fn create(path: &Path) -> Result<Self, TrajectoryError> {
        Self::open_with(path, false)
    }

    pub fn append(path: &Path) -> Result<Self, TrajectoryError> {
        Self::open_with(path, true)
    }

    fn open_with(path: &Path, append: bool) -> Result<Self, TrajectoryError> {
        let io = |source| TrajectoryError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(io)?;
        Ok(Self {
            path: path.display().to_string(),
            file: Mutex::new(file),
        })
    }

    pub fn write(&self, record: &TrajectoryRecord) -> Result<(), TrajectoryError> {
        let mut line = record.to_json_line();
        line.push('\n');
        let mut f = self.file.lock().expect("trajectory file");
        f.write_all(line.as_bytes()).map_err(|source| TrajectoryError::Io {
            path: self.path.clone(),
            source,
        })
    }

    /// Appends every node of `tree` in insertion order, in one write.
    pub fn write_tree(&self, run_id: &str, tree: &SolutionTree) -> Result<(), TrajectoryError> {
        let mut buf = String::new();
        for node in tree.nodes() {
            buf.push_str(&TrajectoryRecord::from_node(run_id, &tree.task_id, node).to_json_line());
            buf.push('\n');
        }
        let mut f = self.file.lock().expect("trajectory file");
        f.write_all(buf.as_bytes())
            .and_then(|_| f.flush())
            .map_err(|source| TrajectoryError::Io {
                path: self.path.clone(),
                source,
            })
    }
}

pub fn read_records(path: &Path) -> Result<Vec<TrajectoryRecord>, TrajectoryError> {
    let file = File::open(path).map_err(|source| TrajectoryError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| TrajectoryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| TrajectoryError::Parse { line: i + 1, source })?,
        );
    }
    Ok(out)
}

/// A replayed tree together with the run that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayedTree {
    pub run_id: String,
    pub tree: SolutionTree,
}

/// Rebuilds one tree per (run_id, task_id), in order of first appearance.
pub fn replay(records: &[TrajectoryRecord]) -> Result<Vec<ReplayedTree>, TrajectoryError> {
    let mut out: Vec<ReplayedTree> = Vec::new();
    let mut index: HashMap<(&str, &str), usize> = HashMap::new();
    for r in records {
        let idx = *index
            .entry((r.run_id.as_str(), r.task_id.as_str()))
            .or_insert_with(|| {
                out.push(ReplayedTree {
                    run_id: r.run_id.clone(),
                    tree: SolutionTree::new(r.task_id.clone()),
                });
                out.len() - 1
            });
        out[idx].tree.add_node(r.to_node())?;
    }
    Ok(out)
}

pub fn load_trees(path: &Path) -> Result<Vec<ReplayedTree>, TrajectoryError> {
    replay(&read_records(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::logical_epoch;

    fn sample_tree() -> SolutionTree {
        let mut t = SolutionTree::new("linear-fit");
        let t0 = logical_epoch();
        t.add_node(SolutionNode {
            node_id: NodeId(0),
            parent_id: None,
            operator: Operator::Draft,
            draft_index: Some(1),
            plan: "Fit a linear model.".into(),
            code: "print(1)\n".into(),
            exec: ExecutionOutcome {
                status: ExecStatus::Buggy,
                wall_time_s: 300.0,
                log_excerpt: String::new(),
            },
            score: None,
            created_at: t0,
            finished_at: Some(t0 + chrono::Duration::seconds(360)),
        })
        .unwrap();
        t.add_node(SolutionNode {
            node_id: NodeId(1),
            parent_id: Some(NodeId(0)),
            operator: Operator::Debug,
            draft_index: None,
            plan: "Fix it \"quoted\" and unicode é.".into(),
            code: "x = 0.1 + 0.2\n".into(),
            exec: ExecutionOutcome {
                status: ExecStatus::Success,
                wall_time_s: 0.1 + 0.2,
                log_excerpt: String::new(),
            },
            score: Some(0.1 + 0.2),
            created_at: t0 + chrono::Duration::milliseconds(360_123),
            finished_at: None,
        })
        .unwrap();
        t
    }

    #[test]
    fn line_has_exact_fields() {
        let t = sample_tree();
        let rec = TrajectoryRecord::from_node("a.s0", "linear-fit", t.get(NodeId(0)).unwrap());
        let v: serde_json::Value = serde_json::from_str(&rec.to_json_line()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        let mut expected = vec![
            "run_id", "task_id", "node_id", "parent_id", "operator", "draft_index", "plan", "code",
            "exec_status", "wall_time_s", "score", "created_at", "finished_at",
        ];
        expected.sort();
        let mut keys = keys;
        keys.sort();
        assert_eq!(keys, expected);
        assert!(v["parent_id"].is_null());
        assert!(v["score"].is_null());
    }

    #[test]
    fn round_trip_reconstructs_tree() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let tree = sample_tree();
        let w = TrajectoryWriter::create(&path).unwrap();
        w.write_tree("a.s0", &tree).unwrap();
        let trees = load_trees(&path).unwrap();
        assert_eq!(trees.len(), 1);
        assert_eq!(trees[0].run_id, "a.s0");
        assert_eq!(trees[0].tree, tree);
    }

    #[test]
    fn malformed_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"run_id\": 1}\n").unwrap();
        assert!(matches!(read_records(&path), Err(TrajectoryError::Parse { line: 1, .. })));
    }
}
