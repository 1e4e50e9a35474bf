//! `ideaforest run`: every configured task x seed through the scaffold,
//! one trajectory log per unit, resumable through the manifest.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::Utc;
use ideaforest_core::backend::{BackendSpec, RequestLog};
use ideaforest_core::diversity::ArchTaxonomy;
use ideaforest_core::model::{Scaffold, TaskSpec};
use ideaforest_core::operators::{OperatorEnv, PromptTemplates};
use ideaforest_core::search::{run_greedy, run_mcts, SandboxEvaluator, SearchDeps, SearchError, SearchParams};
use ideaforest_core::trajectory::TrajectoryWriter;
use rayon::prelude::*;

use crate::config::LoadedConfig;
use crate::logs::{run_id, save_tasks, LOGS_DIR};
use crate::manifest::{RunManifest, UnitRecord, UnitStatus};
use crate::CliError;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    pub workers: usize,
    /// Replaces the configured seed list with this single seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub run_id: String,
    pub executed: usize,
    pub skipped: usize,
    pub aborted: usize,
}

enum UnitFailure {
    Unreachable(String),
    Aborted(String),
    Fatal(CliError),
}

struct UnitResult {
    record: UnitRecord,
    unreachable: bool,
}

fn trajectory_path(agent: &str, seed: u64, task_id: &str) -> PathBuf {
    Path::new(LOGS_DIR)
        .join(agent)
        .join(format!("seed-{seed}"))
        .join(format!("{task_id}.jsonl"))
}

fn run_unit(loaded: &LoadedConfig, out: &Path, task: &TaskSpec, seed: u64) -> Result<UnitResult, CliError> {
    let config = &loaded.config;
    let experiment = config.experiment(seed);
    let rel = trajectory_path(&config.agent, seed, &task.task_id);
    let backend = match config.backend.build(&loaded.base_dir, seed) {
        Ok(b) => b,
        Err(e) => {
            return match config.backend {
                BackendSpec::Remote { .. } => Err(CliError::BackendUnreachable(e.to_string())),
                BackendSpec::Scripted { .. } => Err(CliError::Config(format!("{}: {e}", loaded.path.display()))),
            }
        }
    };
    let run_id = run_id(&config.agent, seed);
    let requests_path = out
        .join("requests")
        .join(&config.agent)
        .join(format!("seed-{seed}"))
        .join(format!("{}.ndjson", task.task_id));
    if let Some(dir) = requests_path.parent() {
        std::fs::create_dir_all(dir).map_err(CliError::io(format!("creating {}", dir.display())))?;
    }
    let _ = std::fs::remove_file(&requests_path);
    let request_log = RequestLog::open(&requests_path).map_err(|e| CliError::Other(e.to_string()))?;
    let templates = PromptTemplates::builtin();
    let taxonomy = ArchTaxonomy::builtin();
    let work_root = out.join("work").join(&config.agent).join(format!("seed-{seed}"));
    let evaluator = SandboxEvaluator {
        root: work_root,
        policy: config.sandbox.policy(config.budget.per_node_exec_limit_s),
        keep_workdirs: config.sandbox.keep_workdirs,
    };
    let deps = SearchDeps {
        env: OperatorEnv {
            backend: backend.as_ref(),
            templates: &templates,
            temperature: config.backend.temperature(),
            run_id: &run_id,
            request_log: Some(&request_log),
        },
        evaluator: &evaluator,
        taxonomy: &taxonomy,
    };
    let params = SearchParams::from_config(&experiment);
    let outcome = match config.scaffold.kind {
        Scaffold::Greedy => run_greedy(task, &params, &deps),
        Scaffold::Mcts => run_mcts(task, &params, &deps),
    };

    let path = out.join(&rel);
    let tmp = path.with_extension("partial");
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(CliError::io(format!("creating {}", dir.display())))?;
    }
    TrajectoryWriter::create(&tmp)
        .and_then(|w| w.write_tree(&run_id, &outcome.tree))
        .map_err(|e| CliError::Other(e.to_string()))?;
    std::fs::rename(&tmp, &path).map_err(CliError::io(format!("renaming to {}", path.display())))?;

    let failure = outcome.error.as_ref().map(|e| match e {
        SearchError::Backend(b) if b.is_unreachable() => UnitFailure::Unreachable(e.to_string()),
        SearchError::InvalidBudget(_) => UnitFailure::Fatal(CliError::Config(e.to_string())),
        other => UnitFailure::Aborted(other.to_string()),
    });
    let (status, error, unreachable) = match failure {
        None => (UnitStatus::Completed, None, false),
        Some(UnitFailure::Unreachable(msg)) => (UnitStatus::Aborted, Some(msg), true),
        Some(UnitFailure::Aborted(msg)) => (UnitStatus::Aborted, Some(msg), false),
        Some(UnitFailure::Fatal(e)) => return Err(e),
    };
    if outcome.budget_exhausted_before_draft {
        tracing::warn!(task = %task.task_id, seed, "budget ran out before all five drafts");
    }
    let best_score = outcome
        .tree
        .best_node(task.higher_is_better)
        .and_then(|n| n.score);
    tracing::info!(task = %task.task_id, seed, nodes = outcome.tree.len(), ?best_score, ?status, "unit done");
    Ok(UnitResult {
        record: UnitRecord {
            task_id: task.task_id.clone(),
            seed,
            status,
            trajectory: rel,
            n_nodes: outcome.tree.len(),
            best_score,
            error,
        },
        unreachable,
    })
}

pub fn cmd_run(config_path: &Path, opts: &RunOptions) -> Result<RunSummary, CliError> {
    let mut loaded = LoadedConfig::load(config_path)?;
    if let Some(seed) = opts.seed {
        loaded.config.seeds = vec![seed];
    }
    let config = &loaded.config;
    let digest = config.digest();
    let out = &opts.out;
    std::fs::create_dir_all(out).map_err(CliError::io(format!("creating {}", out.display())))?;

    let mut manifest = match RunManifest::load(out)? {
        Some(m) if m.config_digest != digest => {
            return Err(CliError::Config(format!(
                "{} already holds run {} of a different configuration",
                out.display(),
                m.run_id
            )))
        }
        Some(m) => m,
        None => RunManifest::new(&config.agent, &digest),
    };
    manifest.finished_at = None;
    save_tasks(out, &loaded.tasks)?;
    let resolved = toml::to_string(config).map_err(|e| CliError::Other(e.to_string()))?;
    crate::write_atomic(&out.join("config.resolved.toml"), resolved.as_bytes())?;
    manifest.save(out)?;

    let mut pending = Vec::new();
    let mut skipped = 0;
    for &seed in &config.seeds {
        for task in &loaded.tasks {
            if manifest.is_completed(&task.task_id, seed) {
                skipped += 1;
            } else {
                pending.push((task, seed));
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| CliError::Other(e.to_string()))?;
    let manifest = Mutex::new(manifest);
    let results: Vec<Result<UnitResult, CliError>> = pool.install(|| {
        pending
            .par_iter()
            .map(|(task, seed)| {
                let r = run_unit(&loaded, out, task, *seed)?;
                let mut m = manifest.lock().expect("manifest lock");
                m.record(r.record.clone());
                m.save(out)?;
                Ok(r)
            })
            .collect()
    });
    let mut manifest = manifest.into_inner().expect("manifest lock");
    manifest.finished_at = Some(Utc::now());
    manifest.save(out)?;
    if !config.sandbox.keep_workdirs {
        let _ = std::fs::remove_dir_all(out.join("work"));
    }

    let mut units = Vec::new();
    for r in results {
        units.push(r?);
    }
    let aborted = units.iter().filter(|u| u.record.status == UnitStatus::Aborted).count();
    let unreachable = units.iter().filter(|u| u.unreachable).count();
    if unreachable > 0 && aborted == units.len() {
        let first = units.iter().find_map(|u| u.record.error.clone()).unwrap_or_default();
        return Err(CliError::BackendUnreachable(first));
    }
    if aborted > 0 {
        return Err(CliError::Partial {
            failed: aborted,
            total: units.len() + skipped,
        });
    }
    Ok(RunSummary {
        run_id: manifest.run_id,
        executed: units.len(),
        skipped,
        aborted,
    })
}
