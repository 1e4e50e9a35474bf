//! Domain model shared by every other module: tasks and their human
//! leaderboards, solution nodes, the search tree over them, and the
//! per-run experiment configuration.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taskenv::Grading;

/// Maximum number of initial ideas (Draft nodes) per tree.
pub const MAX_DRAFTS: usize = 5;

/// Default per-task wall-clock budget: 24 hours.
pub const DEFAULT_TIME_BUDGET_S: f64 = 86_400.0;

/// Default node cap per tree.
pub const DEFAULT_MAX_NODES: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("node {0} already exists in the tree")]
    DuplicateId(NodeId),
    #[error("parent {parent} of node {node} is not in the tree")]
    MissingParent { node: NodeId, parent: NodeId },
    #[error("tree already holds {MAX_DRAFTS} drafts")]
    DraftLimitExceeded,
    #[error("node {node} is malformed: {reason}")]
    InvalidNode { node: NodeId, reason: String },
    #[error("trajectory for task {expected} contains a node of task {found}")]
    TaskMismatch { expected: String, found: String },
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("task {0}: time budget must be positive")]
    NonPositiveBudget(String),
    #[error("task {0}: leaderboard needs at least one score")]
    EmptyLeaderboard(String),
    #[error("task {0}: leaderboard contains a non-finite score")]
    NonFiniteScore(String),
    #[error("duplicate task id {0} in suite")]
    DuplicateTask(String),
}

/// Identifier of a node within one tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Human final scores for one task, ordered from worst to best.
#[derive(Debug, Clone, PartialEq)]
pub struct Leaderboard {
    scores: Vec<f64>,
    higher_is_better: bool,
}

impl Leaderboard {
    pub fn new(mut scores: Vec<f64>, higher_is_better: bool) -> Result<Self, TaskError> {
        if scores.is_empty() {
            return Err(TaskError::EmptyLeaderboard(String::new()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(TaskError::NonFiniteScore(String::new()));
        }
        scores.sort_by(|a, b| a.total_cmp(b));
        if !higher_is_better {
            scores.reverse();
        }
        Ok(Self {
            scores,
            higher_is_better,
        })
    }

    /// Scores from worst to best.
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn n_teams(&self) -> usize {
        self.scores.len()
    }

    pub fn higher_is_better(&self) -> bool {
        self.higher_is_better
    }

    pub fn worst(&self) -> f64 {
        self.scores[0]
    }

    pub fn best(&self) -> f64 {
        self.scores[self.scores.len() - 1]
    }

    /// Number of human scores strictly better than `raw`.
    pub fn count_strictly_better(&self, raw: f64) -> usize {
        self.scores
            .iter()
            .filter(|&&h| is_better(h, raw, self.higher_is_better))
            .count()
    }

    /// Number of human scores strictly worse than `raw`.
    pub fn count_strictly_worse(&self, raw: f64) -> usize {
        self.scores
            .iter()
            .filter(|&&h| is_better(raw, h, self.higher_is_better))
            .count()
    }
}

/// `a` strictly better than `b` under the given orientation.
pub fn is_better(a: f64, b: f64, higher_is_better: bool) -> bool {
    if higher_is_better {
        a > b
    } else {
        a < b
    }
}

/// A benchmark task: what to solve, how it is graded, and the human
/// score distribution that medal, percentile and normalized-score
/// metrics are computed against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TaskDefinition", into = "TaskDefinition")]
pub struct TaskSpec {
    pub task_id: String,
    pub description: String,
    pub higher_is_better: bool,
    pub time_budget_s: f64,
    /// How submissions are checked and scored; absent for simulated tasks.
    pub grading: Option<Grading>,
    pub leaderboard: Leaderboard,
    /// Best achievable score, when known analytically.
    pub optimum: Option<f64>,
}

/// On-disk task definition document.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TaskDefinition {
    task_id: String,
    description: String,
    higher_is_better: bool,
    #[serde(default = "default_time_budget")]
    time_budget_s: f64,
    #[serde(default)]
    grading: Option<Grading>,
    leaderboard_scores: Vec<f64>,
    #[serde(default)]
    optimum: Option<f64>,
}

fn default_time_budget() -> f64 {
    DEFAULT_TIME_BUDGET_S
}

impl TryFrom<TaskDefinition> for TaskSpec {
    type Error = TaskError;

    fn try_from(def: TaskDefinition) -> Result<Self, Self::Error> {
        if !(def.time_budget_s > 0.0) {
            return Err(TaskError::NonPositiveBudget(def.task_id));
        }
        let leaderboard = match Leaderboard::new(def.leaderboard_scores, def.higher_is_better) {
            Ok(lb) => lb,
            Err(TaskError::EmptyLeaderboard(_)) => {
                return Err(TaskError::EmptyLeaderboard(def.task_id))
            }
            Err(_) => return Err(TaskError::NonFiniteScore(def.task_id)),
        };
        Ok(TaskSpec {
            task_id: def.task_id,
            description: def.description,
            higher_is_better: def.higher_is_better,
            time_budget_s: def.time_budget_s,
            grading: def.grading,
            leaderboard,
            optimum: def.optimum,
        })
    }
}

impl From<TaskSpec> for TaskDefinition {
    fn from(t: TaskSpec) -> Self {
        TaskDefinition {
            task_id: t.task_id,
            description: t.description,
            higher_is_better: t.higher_is_better,
            time_budget_s: t.time_budget_s,
            grading: t.grading,
            leaderboard_scores: t.leaderboard.scores,
            optimum: t.optimum,
        }
    }
}

/// Checks that task ids are unique within a suite.
pub fn check_suite(tasks: &[TaskSpec]) -> Result<(), TaskError> {
    let mut seen = std::collections::HashSet::new();
    for t in tasks {
        if !seen.insert(t.task_id.as_str()) {
            return Err(TaskError::DuplicateTask(t.task_id.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operator {
    Draft,
    Debug,
    Improve,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExecStatus {
    Success,
    Buggy,
    Timeout,
    InvalidSubmission,
    NotRun,
}

impl ExecStatus {
    /// Statuses a Debug operator may repair.
    pub fn is_failure(self) -> bool {
        matches!(
            self,
            ExecStatus::Buggy | ExecStatus::Timeout | ExecStatus::InvalidSubmission
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub status: ExecStatus,
    pub wall_time_s: f64,
    pub log_excerpt: String,
}

impl ExecutionOutcome {
    pub fn not_run() -> Self {
        Self {
            status: ExecStatus::NotRun,
            wall_time_s: 0.0,
            log_excerpt: String::new(),
        }
    }
}

/// One candidate solution: the idea, its code, and what happened when it ran.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionNode {
    pub node_id: NodeId,
    pub parent_id: Option<NodeId>,
    pub operator: Operator,
    pub draft_index: Option<u8>,
    pub plan: String,
    pub code: String,
    pub exec: ExecutionOutcome,
    pub score: Option<f64>,
    pub created_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
}

impl SolutionNode {
    pub fn is_success(&self) -> bool {
        self.exec.status == ExecStatus::Success
    }

    fn validate(&self) -> Result<(), TreeError> {
        let bad = |reason: &str| TreeError::InvalidNode {
            node: self.node_id,
            reason: reason.to_string(),
        };
        match self.operator {
            Operator::Draft => {
                if self.parent_id.is_some() {
                    return Err(bad("draft nodes have no parent"));
                }
                match self.draft_index {
                    Some(i) if (1..=MAX_DRAFTS as u8).contains(&i) => {}
                    _ => return Err(bad("draft_index must be in 1..=5")),
                }
            }
            Operator::Debug | Operator::Improve => {
                if self.parent_id.is_none() {
                    return Err(bad("debug/improve nodes need a parent"));
                }
                if self.draft_index.is_some() {
                    return Err(bad("only drafts carry a draft_index"));
                }
            }
        }
        if self.score.is_some() && self.exec.status != ExecStatus::Success {
            return Err(bad("score present on a non-successful node"));
        }
        if self.exec.wall_time_s < 0.0 || !self.exec.wall_time_s.is_finite() {
            return Err(bad("wall_time_s must be finite and non-negative"));
        }
        if let Some(finished) = self.finished_at {
            if finished < self.created_at {
                return Err(bad("finished_at precedes created_at"));
            }
        }
        Ok(())
    }
}

/// Search tree over candidate solutions for one task. Parent edges form a
/// forest rooted at the Draft nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionTree {
    pub task_id: String,
    nodes: BTreeMap<NodeId, SolutionNode>,
    order: Vec<NodeId>,
    root_draft_ids: Vec<NodeId>,
}

impl SolutionTree {
    pub fn new(task_id: impl Into<String>) -> Self {
        Self {
            task_id: task_id.into(),
            nodes: BTreeMap::new(),
            order: Vec::new(),
            root_draft_ids: Vec::new(),
        }
    }

    pub fn add_node(&mut self, node: SolutionNode) -> Result<(), TreeError> {
        if self.nodes.contains_key(&node.node_id) {
            return Err(TreeError::DuplicateId(node.node_id));
        }
        if node.operator == Operator::Draft && self.root_draft_ids.len() >= MAX_DRAFTS {
            return Err(TreeError::DraftLimitExceeded);
        }
        node.validate()?;
        if let Some(parent_id) = node.parent_id {
            let parent = self.nodes.get(&parent_id).ok_or(TreeError::MissingParent {
                node: node.node_id,
                parent: parent_id,
            })?;
            if node.created_at < parent.created_at {
                return Err(TreeError::InvalidNode {
                    node: node.node_id,
                    reason: "created before its parent".into(),
                });
            }
        }
        if let Some(last) = self.order.last().and_then(|id| self.nodes.get(id)) {
            if node.created_at < last.created_at {
                return Err(TreeError::InvalidNode {
                    node: node.node_id,
                    reason: "created_at earlier than the previous node".into(),
                });
            }
        }
        if node.operator == Operator::Draft {
            self.root_draft_ids.push(node.node_id);
        }
        self.order.push(node.node_id);
        self.nodes.insert(node.node_id, node);
        Ok(())
    }

    /// Records the execution result of a node already in the tree.
    pub fn record_outcome(
        &mut self,
        id: NodeId,
        exec: ExecutionOutcome,
        score: Option<f64>,
        finished_at: DateTime<Utc>,
    ) -> Result<(), TreeError> {
        let node = self.nodes.get_mut(&id).ok_or(TreeError::MissingParent {
            node: id,
            parent: id,
        })?;
        let mut updated = node.clone();
        updated.exec = exec;
        updated.score = score;
        updated.finished_at = Some(finished_at);
        updated.validate()?;
        *node = updated;
        Ok(())
    }

    pub fn get(&self, id: NodeId) -> Option<&SolutionNode> {
        self.nodes.get(&id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root_draft_ids(&self) -> &[NodeId] {
        &self.root_draft_ids
    }

    pub fn drafts(&self) -> impl Iterator<Item = &SolutionNode> {
        self.root_draft_ids.iter().map(|id| &self.nodes[id])
    }

    /// Nodes in insertion order.
    pub fn nodes(&self) -> impl Iterator<Item = &SolutionNode> {
        self.order.iter().map(|id| &self.nodes[id])
    }

    pub fn children(&self, id: NodeId) -> impl Iterator<Item = &SolutionNode> {
        self.nodes().filter(move |n| n.parent_id == Some(id))
    }

    /// Length of the chain of consecutive Debug nodes ending at `id`.
    pub fn debug_depth(&self, id: NodeId) -> usize {
        let mut depth = 0;
        let mut cur = self.nodes.get(&id);
        while let Some(node) = cur {
            if node.operator != Operator::Debug {
                break;
            }
            depth += 1;
            cur = node.parent_id.and_then(|p| self.nodes.get(&p));
        }
        depth
    }

    /// Next unused node id.
    pub fn next_id(&self) -> NodeId {
        NodeId(self.nodes.keys().next_back().map_or(0, |id| id.0 + 1))
    }

    /// The successful node with the best score; ties go to the earliest
    /// created node.
    pub fn best_node(&self, higher_is_better: bool) -> Option<&SolutionNode> {
        let mut best: Option<&SolutionNode> = None;
        for node in self.nodes() {
            let Some(score) = node.score.filter(|_| node.is_success()) else {
                continue;
            };
            best = match best {
                None => Some(node),
                Some(b) => {
                    let b_score = b.score.unwrap_or(f64::NAN);
                    if is_better(score, b_score, higher_is_better)
                        || (score == b_score && node.created_at < b.created_at)
                    {
                        Some(node)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scaffold {
    Greedy,
    Mcts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiversityMode {
    Baseline,
    Ablated,
}

/// How the search measures elapsed time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ClockMode {
    /// Wall-clock time.
    Real,
    /// Deterministic time: every completion and every execution is
    /// charged a fixed cost, timeouts are charged the execution limit.
    Logical {
        #[serde(default = "default_llm_cost")]
        llm_cost_s: f64,
        #[serde(default = "default_exec_cost")]
        exec_cost_s: f64,
    },
}

fn default_llm_cost() -> f64 {
    60.0
}

fn default_exec_cost() -> f64 {
    300.0
}

impl ClockMode {
    pub fn logical() -> Self {
        ClockMode::Logical {
            llm_cost_s: default_llm_cost(),
            exec_cost_s: default_exec_cost(),
        }
    }
}

/// Everything that determines one (agent, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub agent: String,
    pub scaffold: Scaffold,
    pub diversity_mode: DiversityMode,
    #[serde(default)]
    pub diversity_override: Option<crate::operators::DiversityConfig>,
    pub backend: crate::backend::BackendSpec,
    pub seed: u64,
    pub tasks: Vec<String>,
    pub budget: crate::search::SearchBudget,
    #[serde(default = "default_uct_c")]
    pub uct_c: f64,
    #[serde(default = "default_debug_limit")]
    pub debug_limit: usize,
    #[serde(default = "default_mcts_children")]
    pub mcts_max_children: usize,
    #[serde(default = "ClockMode::logical")]
    pub clock: ClockMode,
}

pub fn default_uct_c() -> f64 {
    1.414
}

pub fn default_debug_limit() -> usize {
    3
}

pub fn default_mcts_children() -> usize {
    2
}

impl ExperimentConfig {
    pub fn diversity(&self) -> crate::operators::DiversityConfig {
        self.diversity_override
            .unwrap_or_else(|| crate::operators::DiversityConfig::for_mode(self.diversity_mode))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    pub(crate) fn at(hour: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2025, 1, 1, hour, 0, 0).unwrap()
    }

    fn draft(id: u32, index: u8) -> SolutionNode {
        SolutionNode {
            node_id: NodeId(id),
            parent_id: None,
            operator: Operator::Draft,
            draft_index: Some(index),
            plan: format!("idea {index}"),
            code: String::new(),
            exec: ExecutionOutcome::not_run(),
            score: None,
            created_at: at(0),
            finished_at: None,
        }
    }

    fn success(mut node: SolutionNode, score: f64, created: DateTime<Utc>) -> SolutionNode {
        node.exec.status = ExecStatus::Success;
        node.score = Some(score);
        node.created_at = created;
        node
    }

    #[test]
    fn empty_tree_accepts_first_draft() {
        let mut tree = SolutionTree::new("t");
        tree.add_node(draft(0, 1)).unwrap();
        assert_eq!(tree.root_draft_ids(), &[NodeId(0)]);
    }

    #[test]
    fn sixth_draft_is_rejected() {
        let mut tree = SolutionTree::new("t");
        for i in 1..=5u8 {
            tree.add_node(draft(i as u32, i)).unwrap();
        }
        let err = tree.add_node(draft(6, 6)).unwrap_err();
        assert_eq!(err, TreeError::DraftLimitExceeded);
    }

    #[test]
    fn debug_with_missing_parent_is_rejected() {
        let mut tree = SolutionTree::new("t");
        tree.add_node(draft(0, 1)).unwrap();
        let mut dbg = draft(1, 1);
        dbg.operator = Operator::Debug;
        dbg.draft_index = None;
        dbg.parent_id = Some(NodeId(42));
        assert!(matches!(
            tree.add_node(dbg),
            Err(TreeError::MissingParent { .. })
        ));
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let mut tree = SolutionTree::new("t");
        tree.add_node(draft(0, 1)).unwrap();
        assert_eq!(
            tree.add_node(draft(0, 2)),
            Err(TreeError::DuplicateId(NodeId(0)))
        );
    }

    #[test]
    fn best_node_picks_max_score() {
        let mut tree = SolutionTree::new("t");
        tree.add_node(success(draft(0, 1), 0.71, at(1))).unwrap();
        tree.add_node(success(draft(1, 2), 0.83, at(2))).unwrap();
        assert_eq!(tree.best_node(true).unwrap().node_id, NodeId(1));
        assert_eq!(tree.best_node(false).unwrap().node_id, NodeId(0));
    }

    #[test]
    fn best_node_absent_without_success() {
        let mut tree = SolutionTree::new("t");
        let mut a = draft(0, 1);
        a.exec.status = ExecStatus::Buggy;
        let mut b = draft(1, 2);
        b.exec.status = ExecStatus::Timeout;
        tree.add_node(a).unwrap();
        tree.add_node(b).unwrap();
        assert!(tree.best_node(true).is_none());
    }

    #[test]
    fn best_node_ties_go_to_earliest() {
        let mut tree = SolutionTree::new("t");
        tree.add_node(success(draft(0, 1), 0.83, at(10))).unwrap();
        tree.add_node(success(draft(1, 2), 0.83, at(11))).unwrap();
        assert_eq!(tree.best_node(true).unwrap().created_at, at(10));
    }

    #[test]
    fn score_on_failed_node_is_rejected() {
        let mut tree = SolutionTree::new("t");
        let mut a = draft(0, 1);
        a.exec.status = ExecStatus::Buggy;
        a.score = Some(1.0);
        assert!(matches!(
            tree.add_node(a),
            Err(TreeError::InvalidNode { .. })
        ));
    }

    #[test]
    fn debug_depth_counts_consecutive_debugs() {
        let mut tree = SolutionTree::new("t");
        tree.add_node(draft(0, 1)).unwrap();
        for i in 1..=3 {
            let mut d = draft(i, 1);
            d.operator = Operator::Debug;
            d.draft_index = None;
            d.parent_id = Some(NodeId(i - 1));
            tree.add_node(d).unwrap();
        }
        assert_eq!(tree.debug_depth(NodeId(0)), 0);
        assert_eq!(tree.debug_depth(NodeId(3)), 3);
        assert_eq!(tree.next_id(), NodeId(4));
    }

    #[test]
    fn leaderboard_orders_worst_to_best() {
        let lb = Leaderboard::new(vec![0.5, 0.9, 0.1], true).unwrap();
        assert_eq!(lb.scores(), &[0.1, 0.5, 0.9]);
        let lb = Leaderboard::new(vec![0.5, 0.9, 0.1], false).unwrap();
        assert_eq!(lb.scores(), &[0.9, 0.5, 0.1]);
        assert_eq!(lb.best(), 0.1);
        assert_eq!(lb.count_strictly_better(0.5), 1);
        assert_eq!(lb.count_strictly_worse(0.5), 1);
    }
}
