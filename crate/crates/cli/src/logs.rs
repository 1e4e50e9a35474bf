//! Output-directory layout and loading of trajectory logs back into
//! per-(agent, seed) runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ideaforest_core::metrics::AttemptResult;
use ideaforest_core::model::{SolutionTree, TaskSpec};
use ideaforest_core::taskenv::{load_task_definitions, synthetic_task_pack, write_task_definitions};
use ideaforest_core::trajectory::load_trees;

use crate::CliError;

pub const TASKS_DIR: &str = "tasks";
pub const LOGS_DIR: &str = "logs";

/// Run identifier written into every trajectory record.
pub fn run_id(agent: &str, seed: u64) -> String {
    format!("{agent}.s{seed}")
}

pub fn parse_run_id(run_id: &str) -> Option<(String, u64)> {
    let (agent, seed) = run_id.rsplit_once(".s")?;
    Some((agent.to_string(), seed.parse().ok()?))
}

/// Every `*.jsonl` file under `dir`, sorted.
pub fn find_logs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(CliError::io(format!("listing {}", d.display())))?;
        for entry in entries {
            let path = entry.map_err(CliError::io(format!("listing {}", d.display())))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "jsonl") {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn save_tasks(dir: &Path, tasks: &[TaskSpec]) -> Result<(), CliError> {
    let tasks_dir = dir.join(TASKS_DIR);
    write_task_definitions(tasks, &tasks_dir).map_err(CliError::io(format!("writing {}", tasks_dir.display())))
}

/// Task definitions stored with the logs, or the built-in pack.
fn tasks_for(dir: &Path) -> Result<Vec<TaskSpec>, CliError> {
    let tasks_dir = dir.join(TASKS_DIR);
    if tasks_dir.is_dir() {
        load_task_definitions(&tasks_dir).map_err(CliError::io(format!("reading {}", tasks_dir.display())))
    } else {
        Ok(synthetic_task_pack())
    }
}

/// All trees of one (agent, seed), sorted by task id.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedRun {
    pub agent: String,
    pub seed: u64,
    pub trees: Vec<SolutionTree>,
}

#[derive(Debug, Clone)]
pub struct LogSet {
    /// Sorted by (agent, seed).
    pub runs: Vec<LoadedRun>,
    pub tasks: BTreeMap<String, TaskSpec>,
}

impl LogSet {
    pub fn load(dirs: &[PathBuf]) -> Result<Self, CliError> {
        let mut tasks = BTreeMap::new();
        let mut trees: BTreeMap<(String, u64), BTreeMap<String, SolutionTree>> = BTreeMap::new();
        let mut n_files = 0;
        for dir in dirs {
            if !dir.is_dir() {
                return Err(CliError::NoLogsFound(dir.clone()));
            }
            for t in tasks_for(dir)? {
                tasks.entry(t.task_id.clone()).or_insert(t);
            }
            for file in find_logs(dir)? {
                n_files += 1;
                let replayed = load_trees(&file)
                    .map_err(|e| CliError::Other(format!("{}: {e}", file.display())))?;
                for r in replayed {
                    let (agent, seed) = parse_run_id(&r.run_id).ok_or_else(|| {
                        CliError::Other(format!(
                            "{}: run id {:?} is not of the form <agent>.s<seed>",
                            file.display(),
                            r.run_id
                        ))
                    })?;
                    let task_id = r.tree.task_id.clone();
                    let slot = trees.entry((agent, seed)).or_default();
                    if slot.insert(task_id.clone(), r.tree).is_some() {
                        return Err(CliError::Other(format!(
                            "{}: second trajectory for run {} on task {task_id}",
                            file.display(),
                            r.run_id
                        )));
                    }
                }
            }
        }
        if n_files == 0 {
            let shown = dirs.first().cloned().unwrap_or_default();
            return Err(CliError::NoLogsFound(shown));
        }
        let runs = trees
            .into_iter()
            .map(|((agent, seed), by_task)| LoadedRun {
                agent,
                seed,
                trees: by_task.into_values().collect(),
            })
            .collect();
        Ok(Self { runs, tasks })
    }

    pub fn agents(&self) -> Vec<String> {
        let mut a: Vec<String> = self.runs.iter().map(|r| r.agent.clone()).collect();
        a.dedup();
        a
    }

    pub fn task(&self, task_id: &str) -> Result<&TaskSpec, CliError> {
        self.tasks
            .get(task_id)
            .ok_or_else(|| CliError::Other(format!("logs mention task {task_id} but no definition was found")))
    }

    /// One graded attempt per tree: the reported submission is the best
    /// node's score.
    pub fn attempts(&self, run: &LoadedRun) -> Result<Vec<AttemptResult>, CliError> {
        run.trees
            .iter()
            .map(|tree| {
                let task = self.task(&tree.task_id)?;
                let score = tree.best_node(task.higher_is_better).and_then(|n| n.score);
                AttemptResult::grade(&tree.task_id, run.seed, score, &task.leaderboard)
                    .map_err(|e| CliError::Other(format!("grading {}: {e}", tree.task_id)))
            })
            .collect()
    }

    /// Attempts of every agent, keyed by agent.
    pub fn attempts_by_agent(&self) -> Result<BTreeMap<String, Vec<AttemptResult>>, CliError> {
        let mut out: BTreeMap<String, Vec<AttemptResult>> = BTreeMap::new();
        for run in &self.runs {
            out.entry(run.agent.clone()).or_default().extend(self.attempts(run)?);
        }
        Ok(out)
    }

    pub fn higher_is_better(&self) -> BTreeMap<String, bool> {
        self.tasks
            .iter()
            .map(|(id, t)| (id.clone(), t.higher_is_better))
            .collect()
    }
}
