//! Search policies over solution trees: greedy tree search and Monte Carlo
//! Tree Search with UCT selection.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendError;
use crate::diversity::ArchTaxonomy;
use crate::model::{
    ClockMode, ExecStatus, ExecutionOutcome, ExperimentConfig, NodeId, Operator, SolutionNode,
    SolutionTree, TaskSpec, TreeError, DEFAULT_MAX_NODES, DEFAULT_TIME_BUDGET_S, MAX_DRAFTS,
};
use crate::operators::{
    self, summarize_node, DiversityConfig, NodeStamp, OperatorContext, OperatorEnv, OperatorError,
};
use crate::taskenv::{self, Execution, SandboxError, SandboxPolicy, DEFAULT_EXEC_LIMIT_S};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchBudget {
    #[serde(default = "default_wall_clock")]
    pub wall_clock_s: f64,
    #[serde(default = "default_max_nodes")]
    pub max_nodes: usize,
    #[serde(default = "default_exec_limit")]
    pub per_node_exec_limit_s: f64,
}

fn default_wall_clock() -> f64 {
    DEFAULT_TIME_BUDGET_S
}

fn default_max_nodes() -> usize {
    DEFAULT_MAX_NODES
}

fn default_exec_limit() -> f64 {
    DEFAULT_EXEC_LIMIT_S
}

impl Default for SearchBudget {
    fn default() -> Self {
        Self {
            wall_clock_s: DEFAULT_TIME_BUDGET_S,
            max_nodes: DEFAULT_MAX_NODES,
            per_node_exec_limit_s: DEFAULT_EXEC_LIMIT_S,
        }
    }
}

impl SearchBudget {
    pub fn validate(&self) -> Result<(), SearchError> {
        let ok = self.wall_clock_s > 0.0
            && self.wall_clock_s.is_finite()
            && self.max_nodes > 0
            && self.per_node_exec_limit_s > 0.0
            && self.per_node_exec_limit_s.is_finite();
        if ok {
            Ok(())
        } else {
            Err(SearchError::InvalidBudget(*self))
        }
    }
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("budget values must all be positive: {0:?}")]
    InvalidBudget(SearchBudget),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("operator failed: {0}")]
    Operator(OperatorError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

impl From<OperatorError> for SearchError {
    fn from(e: OperatorError) -> Self {
        match e {
            OperatorError::Backend(b) => SearchError::Backend(b),
            other => SearchError::Operator(other),
        }
    }
}

/// Knobs of one search run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchParams {
    pub budget: SearchBudget,
    pub diversity: DiversityConfig,
    pub debug_limit: usize,
    pub uct_c: f64,
    pub mcts_max_children: usize,
    pub clock: ClockMode,
}

impl SearchParams {
    pub fn from_config(config: &ExperimentConfig) -> Self {
        Self {
            budget: config.budget,
            diversity: config.diversity(),
            debug_limit: config.debug_limit,
            uct_c: config.uct_c,
            mcts_max_children: config.mcts_max_children,
            clock: config.clock,
        }
    }
}

/// Runs a node's code and reports how it went.
pub trait NodeEvaluator: Sync {
    fn evaluate(
        &self,
        task: &TaskSpec,
        node: &SolutionNode,
        exec_limit_s: f64,
    ) -> Result<Execution, SearchError>;
}

/// Executes nodes as Python programs in per-node working directories.
#[derive(Debug, Clone)]
pub struct SandboxEvaluator {
    pub root: PathBuf,
    pub policy: SandboxPolicy,
    pub keep_workdirs: bool,
}

impl SandboxEvaluator {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            policy: SandboxPolicy::default(),
            keep_workdirs: false,
        }
    }
}

impl NodeEvaluator for SandboxEvaluator {
    fn evaluate(
        &self,
        task: &TaskSpec,
        node: &SolutionNode,
        exec_limit_s: f64,
    ) -> Result<Execution, SearchError> {
        let dir = self.root.join(&task.task_id).join(node.node_id.to_string());
        let policy = SandboxPolicy {
            time_limit_s: exec_limit_s,
            ..self.policy.clone()
        };
        let result = taskenv::execute(&node.code, task, &dir, &policy);
        if !self.keep_workdirs {
            let _ = std::fs::remove_dir_all(&dir);
        }
        Ok(result?)
    }
}

/// Collaborators of a search run.
pub struct SearchDeps<'a> {
    pub env: OperatorEnv<'a>,
    pub evaluator: &'a dyn NodeEvaluator,
    pub taxonomy: &'a ArchTaxonomy,
}

/// Fixed origin of logical timestamps.
pub fn logical_epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).single().expect("valid epoch")
}

/// Elapsed-time source for a run. In logical mode every completion and
/// execution advances time by a fixed amount, which makes runs
/// reproducible byte for byte.
#[derive(Debug, Clone)]
pub struct SearchClock {
    mode: ClockMode,
    started: Instant,
    origin: DateTime<Utc>,
    logical_s: f64,
}

impl SearchClock {
    pub fn new(mode: ClockMode) -> Self {
        let origin = match mode {
            ClockMode::Real => Utc::now(),
            ClockMode::Logical { .. } => logical_epoch(),
        };
        Self {
            mode,
            started: Instant::now(),
            origin,
            logical_s: 0.0,
        }
    }

    pub fn elapsed_s(&self) -> f64 {
        match self.mode {
            ClockMode::Real => self.started.elapsed().as_secs_f64(),
            ClockMode::Logical { .. } => self.logical_s,
        }
    }

    pub fn now(&self) -> DateTime<Utc> {
        match self.mode {
            ClockMode::Real => Utc::now(),
            ClockMode::Logical { .. } => {
                self.origin + chrono::Duration::microseconds((self.logical_s * 1e6).round() as i64)
            }
        }
    }

    fn charge_completion(&mut self) {
        if let ClockMode::Logical { llm_cost_s, .. } = self.mode {
            self.logical_s += llm_cost_s;
        }
    }

    /// Charges an execution and returns the wall time to record for it.
    fn charge_execution(&mut self, outcome: &ExecutionOutcome, exec_limit_s: f64) -> f64 {
        match self.mode {
            ClockMode::Real => outcome.wall_time_s,
            ClockMode::Logical { exec_cost_s, .. } => {
                let cost = if outcome.status == ExecStatus::Timeout {
                    exec_limit_s
                } else {
                    exec_cost_s.min(exec_limit_s)
                };
                self.logical_s += cost;
                cost
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Budget,
    NodeCap,
    NoLegalMove,
    Aborted,
}

/// Result of a search run. A backend failure leaves the partial tree in
/// place and the error in `error`.
#[derive(Debug)]
pub struct SearchOutcome {
    pub tree: SolutionTree,
    pub stop: StopReason,
    /// The budget ran out before all five drafts existed.
    pub budget_exhausted_before_draft: bool,
    pub error: Option<SearchError>,
    pub mcts_stats: Option<MctsStats>,
}

enum Step {
    Added(NodeId),
    Stopped(StopReason),
}

/// State shared by both policies: the tree, the clock and the operator
/// plumbing.
struct Runner<'a, 'd> {
    task: &'a TaskSpec,
    params: SearchParams,
    deps: &'a SearchDeps<'d>,
    tree: SolutionTree,
    clock: SearchClock,
}

impl<'a, 'd> Runner<'a, 'd> {
    fn new(task: &'a TaskSpec, params: SearchParams, deps: &'a SearchDeps<'d>) -> Self {
        Self {
            task,
            params,
            deps,
            tree: SolutionTree::new(task.task_id.clone()),
            clock: SearchClock::new(params.clock),
        }
    }

    fn limit_reached(&self) -> Option<StopReason> {
        if self.tree.len() >= self.params.budget.max_nodes {
            Some(StopReason::NodeCap)
        } else if self.clock.elapsed_s() >= self.params.budget.wall_clock_s {
            Some(StopReason::Budget)
        } else {
            None
        }
    }

    fn stamp(&self) -> NodeStamp {
        NodeStamp {
            node_id: self.tree.next_id(),
            created_at: self.clock.now(),
        }
    }

    fn sibling_summaries(&self) -> Vec<String> {
        self.tree
            .drafts()
            .map(|n| summarize_node(n, self.deps.taxonomy))
            .filter(|s| !s.is_empty())
            .collect()
    }

    /// Proposes a node with `op` on `target` (None for a draft), adds it to
    /// the tree and executes it unless the budget ran out meanwhile.
    fn expand(&mut self, op: Operator, target: Option<NodeId>) -> Result<Step, SearchError> {
        if let Some(reason) = self.limit_reached() {
            return Ok(Step::Stopped(reason));
        }
        let stamp = self.stamp();
        let node = match op {
            Operator::Draft => {
                let index = (self.tree.root_draft_ids().len() + 1) as u8;
                let siblings = self.sibling_summaries();
                let ctx =
                    OperatorContext::for_draft(self.task, index, self.params.diversity, &siblings);
                operators::draft(&self.deps.env, &ctx, stamp)?
            }
            Operator::Debug | Operator::Improve => {
                let target = self
                    .tree
                    .get(target.expect("debug and improve need a target"))
                    .expect("target in tree");
                let ctx = OperatorContext::for_target(self.task, target, self.params.diversity);
                if op == Operator::Debug {
                    operators::debug(&self.deps.env, &ctx, stamp)?
                } else {
                    operators::improve(&self.deps.env, &ctx, stamp)?
                }
            }
        };
        self.clock.charge_completion();
        let id = node.node_id;
        let parsed = node.exec.status == ExecStatus::NotRun;
        self.tree.add_node(node)?;
        if !parsed {
            return Ok(Step::Added(id));
        }
        if self.clock.elapsed_s() >= self.params.budget.wall_clock_s {
            // proposed but never started
            return Ok(Step::Added(id));
        }
        let limit = self.params.budget.per_node_exec_limit_s;
        let node = self.tree.get(id).expect("just added");
        let execution = self.deps.evaluator.evaluate(self.task, node, limit)?;
        let mut outcome = execution.outcome.clone();
        outcome.wall_time_s = self.clock.charge_execution(&outcome, limit);
        let score = execution.score();
        self.tree
            .record_outcome(id, outcome, score, self.clock.now())?;
        Ok(Step::Added(id))
    }

    fn finish(self, stop: StopReason, error: Option<SearchError>, stats: Option<MctsStats>) -> SearchOutcome {
        let budget_exhausted_before_draft = self.tree.root_draft_ids().len() < MAX_DRAFTS
            && matches!(stop, StopReason::Budget | StopReason::NodeCap);
        SearchOutcome {
            tree: self.tree,
            stop,
            budget_exhausted_before_draft,
            error,
            mcts_stats: stats,
        }
    }
}

/// Greedy move after the drafts: repair the earliest failed leaf whose
/// debug chain is still short enough, otherwise improve the best node.
pub fn greedy_next_move(tree: &SolutionTree, higher_is_better: bool, debug_limit: usize) -> Option<(Operator, NodeId)> {
    let failed_leaf = tree.nodes().find(|n| {
        n.exec.status.is_failure()
            && tree.children(n.node_id).next().is_none()
            && tree.debug_depth(n.node_id) < debug_limit
    });
    if let Some(n) = failed_leaf {
        return Some((Operator::Debug, n.node_id));
    }
    tree.best_node(higher_is_better)
        .map(|n| (Operator::Improve, n.node_id))
}

/// Greedy tree search: five sequential drafts, then repeated Debug or
/// Improve until the budget or the node cap is reached.
pub fn run_greedy(task: &TaskSpec, params: &SearchParams, deps: &SearchDeps<'_>) -> SearchOutcome {
    if let Err(e) = params.budget.validate() {
        let runner = Runner::new(task, *params, deps);
        return runner.finish(StopReason::Aborted, Some(e), None);
    }
    let mut runner = Runner::new(task, *params, deps);
    let result = (|| -> Result<StopReason, SearchError> {
        for _ in 0..MAX_DRAFTS {
            if let Step::Stopped(reason) = runner.expand(Operator::Draft, None)? {
                return Ok(reason);
            }
        }
        loop {
            let Some((op, target)) =
                greedy_next_move(&runner.tree, task.higher_is_better, params.debug_limit)
            else {
                return Ok(StopReason::NoLegalMove);
            };
            if let Step::Stopped(reason) = runner.expand(op, Some(target))? {
                return Ok(reason);
            }
        }
    })();
    match result {
        Ok(stop) => runner.finish(stop, None, None),
        Err(e) => runner.finish(StopReason::Aborted, Some(e), None),
    }
}

/// UCT choice among children given (visits, mean value). Unvisited
/// children come first; ties go to the earliest child.
pub fn uct_select(children: &[(u64, f64)], parent_visits: u64, c: f64) -> Option<usize> {
    if let Some(i) = children.iter().position(|&(v, _)| v == 0) {
        return Some(i);
    }
    let ln_parent = (parent_visits.max(1) as f64).ln();
    let mut best: Option<(usize, f64)> = None;
    for (i, &(visits, mean)) in children.iter().enumerate() {
        let u = mean + c * (ln_parent / visits as f64).sqrt();
        if best.is_none_or(|(_, b)| u > b) {
            best = Some((i, u));
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone, Default, PartialEq)]
struct RawStats {
    visits: u64,
    success_count: u64,
    /// Sum of oriented raw scores (higher is better) of successful
    /// evaluations backed up through this node.
    success_sum: f64,
}

/// Visit statistics of one node, with rewards normalized over the scores
/// seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStats {
    pub visit_count: u64,
    pub value_sum: f64,
    pub children: Vec<NodeId>,
}

impl NodeStats {
    pub fn mean_value(&self) -> f64 {
        if self.visit_count == 0 {
            0.0
        } else {
            self.value_sum / self.visit_count as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MctsStats {
    pub root: NodeStats,
    pub nodes: BTreeMap<NodeId, NodeStats>,
}

impl MctsStats {
    /// Every node has at least as many visits as its children combined.
    pub fn conservation_holds(&self) -> bool {
        let sum = |children: &[NodeId]| -> u64 {
            children.iter().map(|c| self.nodes[c].visit_count).sum()
        };
        self.root.visit_count >= sum(&self.root.children)
            && self.nodes.values().all(|n| n.visit_count >= sum(&n.children))
    }
}

/// Incremental MCTS driver; each `step` is one select, expand, evaluate,
/// backpropagate iteration.
pub struct MctsSearch<'a, 'd> {
    runner: Runner<'a, 'd>,
    root: RawStats,
    stats: BTreeMap<NodeId, RawStats>,
    score_range: Option<(f64, f64)>,
    iterations: u64,
    stopped: Option<StopReason>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MctsStep {
    Expanded(NodeId),
    Stopped(StopReason),
}

impl<'a, 'd> MctsSearch<'a, 'd> {
    pub fn new(
        task: &'a TaskSpec,
        params: &SearchParams,
        deps: &'a SearchDeps<'d>,
    ) -> Result<Self, SearchError> {
        params.budget.validate()?;
        Ok(Self {
            runner: Runner::new(task, *params, deps),
            root: RawStats::default(),
            stats: BTreeMap::new(),
            score_range: None,
            iterations: 0,
            stopped: None,
        })
    }

    pub fn tree(&self) -> &SolutionTree {
        &self.runner.tree
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    fn oriented(&self, score: f64) -> f64 {
        if self.runner.task.higher_is_better {
            score
        } else {
            -score
        }
    }

    fn normalized_sum(&self, s: &RawStats) -> f64 {
        if s.success_count == 0 {
            return 0.0;
        }
        match self.score_range {
            Some((lo, hi)) if hi > lo => (s.success_sum - s.success_count as f64 * lo) / (hi - lo),
            _ => s.success_count as f64,
        }
    }

    fn node_stats(&self, raw: &RawStats, children: Vec<NodeId>) -> NodeStats {
        NodeStats {
            visit_count: raw.visits,
            value_sum: self.normalized_sum(raw),
            children,
        }
    }

    fn child_ids(&self, id: Option<NodeId>) -> Vec<NodeId> {
        match id {
            None => self.runner.tree.root_draft_ids().to_vec(),
            Some(id) => self.runner.tree.children(id).map(|n| n.node_id).collect(),
        }
    }

    pub fn stats(&self) -> MctsStats {
        MctsStats {
            root: self.node_stats(&self.root, self.child_ids(None)),
            nodes: self
                .stats
                .iter()
                .map(|(id, raw)| (*id, self.node_stats(raw, self.child_ids(Some(*id)))))
                .collect(),
        }
    }

    fn legal_expansion(&self, id: NodeId) -> Option<Operator> {
        let tree = &self.runner.tree;
        let node = tree.get(id)?;
        if tree.children(id).count() >= self.runner.params.mcts_max_children {
            return None;
        }
        if node.exec.status.is_failure() {
            (tree.debug_depth(id) < self.runner.params.debug_limit).then_some(Operator::Debug)
        } else if node.is_success() {
            Some(Operator::Improve)
        } else {
            None
        }
    }

    fn exhausted(&self, id: NodeId) -> bool {
        self.legal_expansion(id).is_none()
            && self.child_ids(Some(id)).iter().all(|c| self.exhausted(*c))
    }

    fn root_exhausted(&self) -> bool {
        self.runner.tree.root_draft_ids().len() >= MAX_DRAFTS
            && self.child_ids(None).iter().all(|c| self.exhausted(*c))
    }

    fn descend(&self, parent_visits: u64, children: &[NodeId]) -> Option<NodeId> {
        let open: Vec<NodeId> = children.iter().copied().filter(|c| !self.exhausted(*c)).collect();
        let summary: Vec<(u64, f64)> = open
            .iter()
            .map(|c| {
                let raw = &self.stats[c];
                let mean = if raw.visits == 0 {
                    0.0
                } else {
                    self.normalized_sum(raw) / raw.visits as f64
                };
                (raw.visits, mean)
            })
            .collect();
        uct_select(&summary, parent_visits, self.runner.params.uct_c).map(|i| open[i])
    }

    /// Path from the root to the node to expand, and the operator to use.
    fn select(&self) -> Option<(Vec<NodeId>, Operator)> {
        if self.runner.tree.root_draft_ids().len() < MAX_DRAFTS {
            return Some((Vec::new(), Operator::Draft));
        }
        if self.root_exhausted() {
            return None;
        }
        let mut path = Vec::new();
        let mut cur = self.descend(self.root.visits, &self.child_ids(None))?;
        loop {
            path.push(cur);
            if let Some(op) = self.legal_expansion(cur) {
                return Some((path, op));
            }
            cur = self.descend(self.stats[&cur].visits, &self.child_ids(Some(cur)))?;
        }
    }

    fn backpropagate(&mut self, path: &[NodeId], new: NodeId) {
        let node = self.runner.tree.get(new).expect("expanded node");
        let success = node.score.filter(|_| node.is_success()).map(|s| self.oriented(s));
        if let Some(s) = success {
            self.score_range = Some(match self.score_range {
                None => (s, s),
                Some((lo, hi)) => (lo.min(s), hi.max(s)),
            });
        }
        let bump = |raw: &mut RawStats| {
            raw.visits += 1;
            if let Some(s) = success {
                raw.success_count += 1;
                raw.success_sum += s;
            }
        };
        bump(&mut self.root);
        for id in path.iter().chain(std::iter::once(&new)) {
            bump(self.stats.entry(*id).or_default());
        }
    }

    pub fn step(&mut self) -> Result<MctsStep, SearchError> {
        if let Some(reason) = self.stopped {
            return Ok(MctsStep::Stopped(reason));
        }
        let Some((path, op)) = self.select() else {
            self.stopped = Some(StopReason::NoLegalMove);
            return Ok(MctsStep::Stopped(StopReason::NoLegalMove));
        };
        match self.runner.expand(op, path.last().copied())? {
            Step::Stopped(reason) => {
                self.stopped = Some(reason);
                Ok(MctsStep::Stopped(reason))
            }
            Step::Added(id) => {
                self.stats.entry(id).or_default();
                self.backpropagate(&path, id);
                self.iterations += 1;
                Ok(MctsStep::Expanded(id))
            }
        }
    }

    pub fn run(mut self) -> SearchOutcome {
        loop {
            match self.step() {
                Ok(MctsStep::Expanded(_)) => {}
                Ok(MctsStep::Stopped(reason)) => return self.finish(reason, None),
                Err(e) => return self.finish(StopReason::Aborted, Some(e)),
            }
        }
    }

    fn finish(self, stop: StopReason, error: Option<SearchError>) -> SearchOutcome {
        let stats = self.stats();
        self.runner.finish(stop, error, Some(stats))
    }
}

pub fn run_mcts(task: &TaskSpec, params: &SearchParams, deps: &SearchDeps<'_>) -> SearchOutcome {
    match MctsSearch::new(task, params, deps) {
        Ok(search) => search.run(),
        Err(e) => Runner::new(task, *params, deps).finish(StopReason::Aborted, Some(e), None),
    }
}

/// Time spent on successfully implemented nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeAccounting {
    pub mean_exec_time_valid_s: Option<f64>,
    pub share_time_valid: f64,
}

pub fn node_time_accounting(tree: &SolutionTree) -> TimeAccounting {
    let (mut valid_sum, mut valid_n, mut total) = (0.0, 0usize, 0.0);
    for n in tree.nodes() {
        total += n.exec.wall_time_s;
        if n.is_success() {
            valid_sum += n.exec.wall_time_s;
            valid_n += 1;
        }
    }
    TimeAccounting {
        mean_exec_time_valid_s: (valid_n > 0).then(|| valid_sum / valid_n as f64),
        share_time_valid: if total > 0.0 { valid_sum / total } else { 0.0 },
    }
}
