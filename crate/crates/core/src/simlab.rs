//! Behavioral simulator: agents as idea samplers with a diversity knob and
//! per-approach implementability. Simulated runs produce ordinary solution
//! trees and attempt results, so every downstream analysis is shared with
//! real runs.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diversity::{
    distinct_arch_cdf, extract_labels, run_entropy, tree_level_diversity, ArchTaxonomy,
    DistinctArchCdf, EntropyPopulation,
};
use crate::metrics::{
    agent_metrics, metrics_csv, AttemptResult, BootstrapConfig, BootstrapError, ConfidenceInterval,
    MetricTable, MetricsError,
};
use crate::model::{
    ExecStatus, ExecutionOutcome, Leaderboard, NodeId, Operator, SolutionNode, SolutionTree,
    TaskSpec, DEFAULT_TIME_BUDGET_S, MAX_DRAFTS,
};
use crate::search::logical_epoch;
use crate::taskenv::human_leaderboard;

/// Logical seconds charged per simulated node (one completion plus one
/// execution).
const NODE_COST_S: i64 = 360;
const NODE_EXEC_S: f64 = 300.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("could not read scenario {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Bootstrap(#[from] BootstrapError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreDist {
    pub mean: f64,
    pub sd: f64,
}

/// How one agent samples and implements ideas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentBehaviorModel {
    /// Probability that a draft after the first reuses the previous
    /// draft's approach.
    pub similarity_bias: f64,
    pub arch_preference: BTreeMap<String, f64>,
    pub implement_skill: BTreeMap<String, f64>,
    /// Per task, per approach score distribution. Tasks missing here use
    /// the scenario's task-level model.
    #[serde(default)]
    pub score_model: BTreeMap<String, BTreeMap<String, ScoreDist>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimAgent {
    pub name: String,
    #[serde(flatten)]
    pub model: AgentBehaviorModel,
}

/// An approach and the keyword its plans mention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimApproach {
    pub name: String,
    pub keyword: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTask {
    pub task_id: String,
    #[serde(default = "yes")]
    pub higher_is_better: bool,
    pub score_range: (f64, f64),
    pub human_best: f64,
    pub human_worst: f64,
    #[serde(default)]
    pub broken_arch: Option<String>,
    pub score_model: BTreeMap<String, ScoreDist>,
}

fn yes() -> bool {
    true
}

fn default_drafts() -> usize {
    MAX_DRAFTS
}

fn default_n_teams() -> usize {
    100
}

fn default_seeds() -> u64 {
    1_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub name: String,
    #[serde(default = "default_drafts")]
    pub drafts_per_task: usize,
    #[serde(default = "default_n_teams")]
    pub n_teams: usize,
    #[serde(default = "default_seeds")]
    pub n_seeds: u64,
    /// Chance that a failed draft gets a successful Debug child.
    #[serde(default)]
    pub rescue_prob: f64,
    pub approaches: Vec<SimApproach>,
    pub tasks: Vec<SimTask>,
    pub agents: Vec<SimAgent>,
}

fn check_prob(what: &str, p: f64) -> Result<(), SimError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(SimError::Invalid(format!("{what} = {p} is not a probability")))
    }
}

impl SimScenario {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let s: SimScenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|source| SimError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Invalid(m));
        if self.drafts_per_task == 0 || self.drafts_per_task > MAX_DRAFTS {
            return bad(format!("drafts_per_task must be in 1..={MAX_DRAFTS}"));
        }
        if self.n_teams == 0 {
            return bad("n_teams must be positive".into());
        }
        if self.approaches.is_empty() || self.tasks.is_empty() || self.agents.is_empty() {
            return bad("scenario needs approaches, tasks and agents".into());
        }
        check_prob("rescue_prob", self.rescue_prob)?;
        let taxonomy = ArchTaxonomy::builtin();
        let known: Vec<&str> = self.approaches.iter().map(|a| a.name.as_str()).collect();
        for a in &self.approaches {
            let label = extract_labels(&plan_text(&a.keyword, 1), &taxonomy);
            if label.approach != a.name {
                return bad(format!(
                    "keyword {:?} is labelled {} rather than {}",
                    a.keyword, label.approach, a.name
                ));
            }
        }
        let mut ids = std::collections::BTreeSet::new();
        for t in &self.tasks {
            if !ids.insert(t.task_id.as_str()) {
                return bad(format!("duplicate task {}", t.task_id));
            }
            if !(t.score_range.0 < t.score_range.1) {
                return bad(format!("task {}: empty score range", t.task_id));
            }
            if let Some(b) = &t.broken_arch {
                if !known.contains(&b.as_str()) {
                    return bad(format!("task {}: unknown broken arch {b}", t.task_id));
                }
            }
            for a in &known {
                match t.score_model.get(*a) {
                    Some(d) if d.sd >= 0.0 && d.mean.is_finite() => {}
                    _ => return bad(format!("task {}: missing score model for {a}", t.task_id)),
                }
            }
        }
        for agent in &self.agents {
            let m = &agent.model;
            check_prob(&format!("{}.similarity_bias", agent.name), m.similarity_bias)?;
            let mut total = 0.0;
            for a in &known {
                let p = m.arch_preference.get(*a).copied().unwrap_or(0.0);
                check_prob(&format!("{}.arch_preference.{a}", agent.name), p)?;
                total += p;
                let skill = m.implement_skill.get(*a).copied().ok_or_else(|| {
                    SimError::Invalid(format!("{}: no implement_skill for {a}", agent.name))
                })?;
                check_prob(&format!("{}.implement_skill.{a}", agent.name), skill)?;
            }
            if let Some(extra) = m.arch_preference.keys().find(|k| !known.contains(&k.as_str())) {
                return bad(format!("{}: preference for unknown approach {extra}", agent.name));
            }
            if (total - 1.0).abs() > 1e-9 {
                return bad(format!("{}: arch_preference sums to {total}", agent.name));
            }
        }
        Ok(())
    }

    pub fn agent(&self, name: &str) -> Option<&SimAgent> {
        self.agents.iter().find(|a| a.name == name)
    }

    /// Task specs with the scenario's human leaderboards.
    pub fn task_specs(&self) -> Vec<TaskSpec> {
        self.tasks
            .iter()
            .map(|t| TaskSpec {
                task_id: t.task_id.clone(),
                description: format!("simulated task {}", t.task_id),
                higher_is_better: t.higher_is_better,
                time_budget_s: DEFAULT_TIME_BUDGET_S,
                grading: None,
                leaderboard: Leaderboard::new(
                    human_leaderboard(t.human_best, t.human_worst, self.n_teams),
                    t.higher_is_better,
                )
                .expect("finite leaderboard"),
                optimum: None,
            })
            .collect()
    }

    /// Copy of the scenario with the given agents.
    pub fn with_agents(&self, agents: Vec<SimAgent>) -> Self {
        Self {
            agents,
            ..self.clone()
        }
    }

    /// Agents identical to `template` except for their similarity bias.
    pub fn knob_sweep(&self, template: &SimAgent, biases: &[f64]) -> Self {
        let agents = biases
            .iter()
            .map(|&b| SimAgent {
                name: format!("bias-{b:.2}"),
                model: AgentBehaviorModel {
                    similarity_bias: b,
                    ..template.model.clone()
                },
            })
            .collect();
        self.with_agents(agents)
    }
}

const DEFAULT_APPROACHES: [(&str, &str); 4] = [
    ("Transformer", "t5"),
    ("CNN", "efficientnet"),
    ("GBDT", "lightgbm"),
    ("Linear", "logistic regression"),
];

fn default_agent(name: &str, similarity_bias: f64, preference: [f64; 4], skill: [f64; 4]) -> SimAgent {
    SimAgent {
        name: name.to_string(),
        model: AgentBehaviorModel {
            similarity_bias,
            arch_preference: DEFAULT_APPROACHES
                .iter()
                .zip(preference)
                .map(|((a, _), p)| (a.to_string(), p))
                .collect(),
            implement_skill: DEFAULT_APPROACHES
                .iter()
                .zip(skill)
                .map(|((a, _), p)| (a.to_string(), p))
                .collect(),
            score_model: BTreeMap::new(),
        },
    }
}

fn scenario_base(name: &str, tasks: Vec<SimTask>, agents: Vec<SimAgent>) -> SimScenario {
    SimScenario {
        name: name.to_string(),
        drafts_per_task: MAX_DRAFTS,
        n_teams: default_n_teams(),
        n_seeds: default_seeds(),
        rescue_prob: 0.0,
        approaches: DEFAULT_APPROACHES
            .iter()
            .map(|(n, k)| SimApproach {
                name: n.to_string(),
                keyword: k.to_string(),
            })
            .collect(),
        tasks,
        agents,
    }
}

const DEFAULT_N_TASKS: usize = 12;
const DEFAULT_PREFERENCE: [f64; 4] = [0.4, 0.25, 0.2, 0.15];
const DEFAULT_SKILL: [f64; 4] = [0.9, 0.9, 0.9, 0.9];

impl SimScenario {
    /// Two agents differing only in similarity bias, on tasks where the
    /// most preferred approach can never be implemented and the strongest
    /// approach differs from task to task.
    pub fn broken_arch() -> Self {
        let tasks = (0..DEFAULT_N_TASKS)
            .map(|k| {
                // the strongest workable approach rotates over CNN, GBDT, Linear
                let strong = 1 + k % 3;
                let score_model = DEFAULT_APPROACHES
                    .iter()
                    .enumerate()
                    .map(|(i, (a, _))| {
                        let mean = if i == strong { 0.86 } else { 0.70 };
                        (a.to_string(), ScoreDist { mean, sd: 0.05 })
                    })
                    .collect();
                SimTask {
                    task_id: format!("sim-{k:02}"),
                    higher_is_better: true,
                    score_range: (0.0, 1.0),
                    human_best: 0.95,
                    human_worst: 0.30,
                    broken_arch: Some(DEFAULT_APPROACHES[0].0.to_string()),
                    score_model,
                }
            })
            .collect();
        scenario_base(
            "broken-arch",
            tasks,
            vec![
                default_agent("baseline", 0.1, DEFAULT_PREFERENCE, DEFAULT_SKILL),
                default_agent("ablated", 0.5, DEFAULT_PREFERENCE, DEFAULT_SKILL),
            ],
        )
    }

    /// Same agents, but every approach is always implementable and scores
    /// the same on every task.
    pub fn null() -> Self {
        let mut s = Self::broken_arch();
        s.name = "null".into();
        for t in &mut s.tasks {
            t.broken_arch = None;
            for d in t.score_model.values_mut() {
                *d = ScoreDist { mean: 0.78, sd: 0.05 };
            }
        }
        for a in &mut s.agents {
            for p in a.model.implement_skill.values_mut() {
                *p = 1.0;
            }
        }
        s
    }
}

fn plan_text(keyword: &str, draft_index: usize) -> String {
    format!("Idea {draft_index}: train a {keyword} model on the provided features and predict the test set.")
}

fn unit_seed(seed: u64, task: usize, draft: usize) -> u64 {
    // splitmix64 over the packed coordinates
    let mut z = seed
        ^ (task as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (draft as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_categorical(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the total; take the last positive weight
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn truncated_normal(rng: &mut ChaCha8Rng, d: ScoreDist, lo: f64, hi: f64) -> f64 {
    for _ in 0..64 {
        let z: f64 = StandardNormal.sample(rng);
        let x = d.mean + d.sd * z;
        if (lo..=hi).contains(&x) {
            return x;
        }
    }
    d.mean.clamp(lo, hi)
}

/// One simulated (agent, seed) run over every task.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRun {
    pub agent: String,
    pub seed: u64,
    pub trees: Vec<SolutionTree>,
    pub attempts: Vec<AttemptResult>,
}

/// Simulates one run. Random draws are keyed by (seed, task, draft), so
/// agents given the same seed face the same luck.
pub fn simulate_run(agent: &SimAgent, scenario: &SimScenario, seed: u64) -> Result<SimRun, SimError> {
    let model = &agent.model;
    let names: Vec<&str> = scenario.approaches.iter().map(|a| a.name.as_str()).collect();
    let weights: Vec<f64> = names
        .iter()
        .map(|a| model.arch_preference.get(*a).copied().unwrap_or(0.0))
        .collect();
    let specs = scenario.task_specs();
    let mut trees = Vec::with_capacity(scenario.tasks.len());
    let mut attempts = Vec::with_capacity(scenario.tasks.len());
    for (ti, (task, spec)) in scenario.tasks.iter().zip(&specs).enumerate() {
        let mut tree = SolutionTree::new(task.task_id.clone());
        let mut clock = logical_epoch();
        let mut previous: Option<usize> = None;
        for d in 0..scenario.drafts_per_task {
            let mut rng = ChaCha8Rng::seed_from_u64(unit_seed(seed, ti, d));
            let u_copy: f64 = rng.random();
            let u_arch: f64 = rng.random();
            let u_impl: f64 = rng.random();
            let u_rescue: f64 = rng.random();
            let approach = match previous {
                Some(p) if u_copy < model.similarity_bias => p,
                _ => sample_categorical(&weights, u_arch),
            };
            previous = Some(approach);
            let name = names[approach];
            let broken = task.broken_arch.as_deref() == Some(name);
            let skill = if broken {
                0.0
            } else {
                model.implement_skill.get(name).copied().unwrap_or(0.0)
            };
            let dist = model
                .score_model
                .get(&task.task_id)
                .and_then(|m| m.get(name))
                .or_else(|| task.score_model.get(name))
                .copied()
                .expect("validated score model");
            let (lo, hi) = task.score_range;
            let success = u_impl < skill;
            let score = success.then(|| truncated_normal(&mut rng, dist, lo, hi));
            let draft_id = NodeId(tree.len() as u32);
            let created = clock;
            clock += chrono::Duration::seconds(NODE_COST_S);
            tree.add_node(SolutionNode {
                node_id: draft_id,
                parent_id: None,
                operator: Operator::Draft,
                draft_index: Some(d as u8 + 1),
                plan: plan_text(&scenario.approaches[approach].keyword, d + 1),
                code: format!("# simulated {name} solution\n"),
                exec: ExecutionOutcome {
                    status: if success { ExecStatus::Success } else { ExecStatus::Buggy },
                    wall_time_s: NODE_EXEC_S,
                    log_excerpt: String::new(),
                },
                score,
                created_at: created,
                finished_at: Some(clock),
            })
            .expect("simulated node is well formed");
            if !success && !broken && u_rescue < scenario.rescue_prob {
                let created = clock;
                clock += chrono::Duration::seconds(NODE_COST_S);
                let score = truncated_normal(&mut rng, dist, lo, hi);
                tree.add_node(SolutionNode {
                    node_id: NodeId(tree.len() as u32),
                    parent_id: Some(draft_id),
                    operator: Operator::Debug,
                    draft_index: None,
                    plan: format!("Fix the failing {} pipeline.", scenario.approaches[approach].keyword),
                    code: format!("# simulated {name} fix\n"),
                    exec: ExecutionOutcome {
                        status: ExecStatus::Success,
                        wall_time_s: NODE_EXEC_S,
                        log_excerpt: String::new(),
                    },
                    score: Some(score),
                    created_at: created,
                    finished_at: Some(clock),
                })
                .expect("simulated node is well formed");
            }
        }
        let raw = tree.best_node(task.higher_is_better).and_then(|n| n.score);
        attempts.push(AttemptResult::grade(task.task_id.clone(), seed, raw, &spec.leaderboard)?);
        trees.push(tree);
    }
    Ok(SimRun {
        agent: agent.name.clone(),
        seed,
        trees,
        attempts,
    })
}

/// Every agent of the scenario over seeds `0..n_seeds`, in parallel.
pub fn simulate_all(scenario: &SimScenario, n_seeds: u64) -> Result<Vec<SimRun>, SimError> {
    simulate_seeds(scenario, 0, n_seeds)
}

/// Every agent over seeds `first..first + n_seeds`, ordered by agent then
/// seed.
pub fn simulate_seeds(scenario: &SimScenario, first: u64, n_seeds: u64) -> Result<Vec<SimRun>, SimError> {
    scenario.validate()?;
    let units: Vec<(usize, u64)> = (0..scenario.agents.len())
        .flat_map(|a| (first..first + n_seeds).map(move |s| (a, s)))
        .collect();
    units
        .par_iter()
        .map(|&(a, s)| simulate_run(&scenario.agents[a], scenario, s))
        .collect()
}

/// Per-agent summary of a simulated experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentReport {
    pub agent: String,
    pub similarity_bias: f64,
    pub n_attempts: usize,
    /// Keyed by metric name: medal_rate, valid_submission_rate,
    /// avg_normalized_score, percentile, elo.
    pub metrics: BTreeMap<String, ConfidenceInterval>,
    pub cdf: DistinctArchCdf,
    /// Mean over runs of the pooled draft-approach entropy.
    pub mean_entropy_bits: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub scenario: String,
    pub n_seeds: u64,
    pub agents: Vec<AgentReport>,
}

impl ComparisonReport {
    pub fn agent(&self, name: &str) -> Option<&AgentReport> {
        self.agents.iter().find(|a| a.agent == name)
    }

    /// `agent,metric,value,ci_low,ci_high` rows.
    pub fn metrics_csv(&self) -> String {
        let order: Vec<String> = self.agents.iter().map(|a| a.agent.clone()).collect();
        let table: MetricTable = self
            .agents
            .iter()
            .map(|a| (a.agent.clone(), a.metrics.clone()))
            .collect();
        metrics_csv(&table, &order)
    }

    /// `agent,k,fraction` rows of the distinct-architecture CDF.
    pub fn cdf_csv(&self) -> String {
        let mut out = String::from("agent,k,fraction\n");
        for a in &self.agents {
            for (k, v) in a.cdf.values().iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", a.agent, k + 1, v));
            }
        }
        out
    }
}

/// Runs every agent for `n_seeds` seeds and reports each metric with a
/// stratified bootstrap interval (strata are tasks).
pub fn controlled_experiment(
    scenario: &SimScenario,
    n_seeds: u64,
    bootstrap: &BootstrapConfig,
) -> Result<ComparisonReport, SimError> {
    let runs = simulate_all(scenario, n_seeds)?;
    report_from_runs(scenario, n_seeds, &runs, bootstrap)
}

pub fn report_from_runs(
    scenario: &SimScenario,
    n_seeds: u64,
    runs: &[SimRun],
    bootstrap: &BootstrapConfig,
) -> Result<ComparisonReport, SimError> {
    let taxonomy = ArchTaxonomy::builtin();
    let hib: BTreeMap<String, bool> = scenario
        .tasks
        .iter()
        .map(|t| (t.task_id.clone(), t.higher_is_better))
        .collect();
    let mut by_agent: BTreeMap<String, Vec<AttemptResult>> = BTreeMap::new();
    for r in runs {
        by_agent
            .entry(r.agent.clone())
            .or_default()
            .extend(r.attempts.iter().cloned());
    }
    let mut table = agent_metrics(&by_agent, &hib, bootstrap)?.table;

    let mut agents = Vec::new();
    for agent in &scenario.agents {
        let own: Vec<&SimRun> = runs.iter().filter(|r| r.agent == agent.name).collect();
        let counts: Vec<usize> = own
            .iter()
            .flat_map(|r| r.trees.iter().map(|t| tree_level_diversity(t, &taxonomy)))
            .collect();
        let entropies: Vec<f64> = own
            .iter()
            .map(|r| run_entropy(&r.trees, &taxonomy, EntropyPopulation::Pooled).unwrap_or(0.0))
            .collect();
        agents.push(AgentReport {
            agent: agent.name.clone(),
            similarity_bias: agent.model.similarity_bias,
            n_attempts: by_agent.get(&agent.name).map_or(0, Vec::len),
            metrics: table.remove(&agent.name).unwrap_or_default(),
            cdf: distinct_arch_cdf(&counts).map_err(|e| SimError::Invalid(e.to_string()))?,
            mean_entropy_bits: entropies.iter().sum::<f64>() / entropies.len().max(1) as f64,
        });
    }
    Ok(ComparisonReport {
        scenario: scenario.name.clone(),
        n_seeds,
        agents,
    })
}
