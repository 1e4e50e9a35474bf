//! Experiment configuration: one TOML document with `[scaffold]`,
//! `[diversity]`, `[backend]`, `[budget]` and `[tasks]` sections.

use std::path::{Path, PathBuf};

use ideaforest_core::backend::BackendSpec;
use ideaforest_core::model::{ClockMode, DiversityMode, ExperimentConfig, Scaffold, TaskSpec};
use ideaforest_core::operators::{DiversityConfig, DiversityInstruction};
use ideaforest_core::search::SearchBudget;
use ideaforest_core::taskenv::{load_task_definitions, synthetic_task_pack_with, NetworkPolicy, SandboxPolicy, DEFAULT_N_TEAMS};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub agent: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub scaffold: ScaffoldSection,
    #[serde(default)]
    pub diversity: DiversitySection,
    pub backend: BackendSpec,
    #[serde(default)]
    pub budget: SearchBudget,
    pub tasks: TasksSection,
    #[serde(default)]
    pub sandbox: SandboxSection,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaffoldSection {
    pub kind: Scaffold,
    #[serde(default = "ideaforest_core::model::default_debug_limit")]
    pub debug_limit: usize,
    #[serde(default = "ideaforest_core::model::default_uct_c")]
    pub uct_c: f64,
    #[serde(default = "ideaforest_core::model::default_mcts_children")]
    pub mcts_max_children: usize,
    #[serde(default = "ClockMode::logical")]
    pub clock: ClockMode,
}

/// `mode` picks a preset; the other keys override single mechanisms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiversitySection {
    #[serde(default = "default_mode")]
    pub mode: DiversityMode,
    #[serde(default)]
    pub sibling_memory: Option<bool>,
    #[serde(default)]
    pub adaptive_complexity: Option<bool>,
    #[serde(default)]
    pub instruction: Option<DiversityInstruction>,
}

fn default_mode() -> DiversityMode {
    DiversityMode::Baseline
}

impl Default for DiversitySection {
    fn default() -> Self {
        Self {
            mode: DiversityMode::Baseline,
            sibling_memory: None,
            adaptive_complexity: None,
            instruction: None,
        }
    }
}

impl DiversitySection {
    fn override_config(&self) -> Option<DiversityConfig> {
        if self.sibling_memory.is_none() && self.adaptive_complexity.is_none() && self.instruction.is_none() {
            return None;
        }
        let base = DiversityConfig::for_mode(self.mode);
        Some(DiversityConfig {
            sibling_memory: self.sibling_memory.unwrap_or(base.sibling_memory),
            adaptive_complexity: self.adaptive_complexity.unwrap_or(base.adaptive_complexity),
            diversity_instruction: self.instruction.unwrap_or(base.diversity_instruction),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TasksSection {
    pub ids: Vec<String>,
    /// Directory of task definition files; the built-in pack when absent.
    #[serde(default)]
    pub definitions: Option<PathBuf>,
    #[serde(default)]
    pub n_teams: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SandboxSection {
    #[serde(default = "default_memory_mb")]
    pub memory_limit_mb: Option<u64>,
    #[serde(default = "default_network")]
    pub network: NetworkPolicy,
    #[serde(default = "default_interpreter")]
    pub interpreter: PathBuf,
    #[serde(default)]
    pub keep_workdirs: bool,
}

fn default_memory_mb() -> Option<u64> {
    Some(4096)
}

fn default_network() -> NetworkPolicy {
    NetworkPolicy::Deny
}

fn default_interpreter() -> PathBuf {
    PathBuf::from("python3")
}

impl Default for SandboxSection {
    fn default() -> Self {
        Self {
            memory_limit_mb: default_memory_mb(),
            network: default_network(),
            interpreter: default_interpreter(),
            keep_workdirs: false,
        }
    }
}

impl SandboxSection {
    pub fn policy(&self, time_limit_s: f64) -> SandboxPolicy {
        SandboxPolicy {
            time_limit_s,
            memory_limit_bytes: self.memory_limit_mb.map(|mb| mb << 20),
            network: self.network,
            interpreter: self.interpreter.clone(),
        }
    }
}

/// A parsed configuration together with the directory relative paths
/// resolve against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub path: PathBuf,
    pub base_dir: PathBuf,
    pub config: RunConfig,
    pub tasks: Vec<TaskSpec>,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

fn config_error(path: &Path, text: &str, offset: Option<usize>, message: impl std::fmt::Display) -> CliError {
    let location = match offset {
        Some(o) => {
            let (line, col) = line_col(text, o);
            format!("{}:{line}:{col}", path.display())
        }
        None => path.display().to_string(),
    };
    CliError::Config(format!("{location}: {message}"))
}

impl RunConfig {
    /// Parses `text`; errors carry `path:line:col`.
    pub fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| {
            let offset = e.span().map(|s| s.start);
            config_error(path, text, offset, e.message())
        })?;
        let at = |needle: &str| text.find(needle);
        if config.agent.trim().is_empty() {
            return Err(config_error(path, text, at("agent"), "agent name is empty"));
        }
        if config.agent.contains(['/', '\\']) || config.agent.starts_with('.') {
            return Err(config_error(path, text, at("agent"), "agent name must be a plain file name"));
        }
        if config.seeds.is_empty() {
            return Err(config_error(path, text, at("seeds"), "at least one seed is required"));
        }
        if config.tasks.ids.is_empty() {
            return Err(config_error(path, text, at("[tasks]"), "no tasks listed"));
        }
        if let Err(e) = config.budget.validate() {
            return Err(config_error(path, text, at("[budget]"), e));
        }
        if !(config.backend.temperature() >= 0.0 && config.backend.temperature().is_finite()) {
            return Err(config_error(path, text, at("temperature"), "temperature must be >= 0"));
        }
        Ok(config)
    }

    /// Experiment configuration of one seed.
    pub fn experiment(&self, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            agent: self.agent.clone(),
            scaffold: self.scaffold.kind,
            diversity_mode: self.diversity.mode,
            diversity_override: self.diversity.override_config(),
            backend: self.backend.clone(),
            seed,
            tasks: self.tasks.ids.clone(),
            budget: self.budget,
            uct_c: self.scaffold.uct_c,
            debug_limit: self.scaffold.debug_limit,
            mcts_max_children: self.scaffold.mcts_max_children,
            clock: self.scaffold.clock,
        }
    }

    /// Stable hash of the parsed configuration: comments and formatting do
    /// not change it, any setting does.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical))
    }
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let config = RunConfig::parse(&text, path)?;
        let base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let available = match &config.tasks.definitions {
            Some(dir) => {
                let dir = base_dir.join(dir);
                load_task_definitions(&dir)
                    .map_err(|e| config_error(path, &text, text.find("definitions"), format!("{}: {e}", dir.display())))?
            }
            None => synthetic_task_pack_with(config.tasks.n_teams.unwrap_or(DEFAULT_N_TEAMS)),
        };
        let mut tasks = Vec::new();
        for id in &config.tasks.ids {
            let Some(t) = available.iter().find(|t| &t.task_id == id) else {
                let known: Vec<&str> = available.iter().map(|t| t.task_id.as_str()).collect();
                return Err(config_error(
                    path,
                    &text,
                    text.find(&format!("\"{id}\"")),
                    format!("unknown task {id:?} (known: {})", known.join(", ")),
                ));
            };
            if t.grading.is_none() {
                return Err(config_error(
                    path,
                    &text,
                    text.find(&format!("\"{id}\"")),
                    format!("task {id:?} has no grader and cannot be executed"),
                ));
            }
            tasks.push(t.clone());
        }
        Ok(Self {
            path: path.to_path_buf(),
            base_dir,
            config,
            tasks,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
agent = "demo"
seeds = [0, 1]

[scaffold]
kind = "greedy"

[backend]
kind = "scripted"
script = "demo.json"

[tasks]
ids = ["linear-fit"]
"#;

    fn parse(text: &str) -> Result<RunConfig, CliError> {
        RunConfig::parse(text, Path::new("exp.toml"))
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.budget, SearchBudget::default());
        assert_eq!(c.scaffold.debug_limit, 3);
        assert_eq!(c.diversity.mode, DiversityMode::Baseline);
        assert_eq!(c.experiment(1).diversity(), DiversityConfig::BASELINE);
        assert_eq!(c.sandbox.network, NetworkPolicy::Deny);
    }

    #[test]
    fn syntax_error_reports_line() {
        let bad = MINIMAL.replace("kind = \"greedy\"", "kind = greedy");
        let CliError::Config(msg) = parse(&bad).unwrap_err() else {
            panic!("wrong error kind");
        };
        assert!(msg.starts_with("exp.toml:6:"), "{msg}");
    }

    #[test]
    fn unknown_key_reports_line() {
        let bad = MINIMAL.replace("[tasks]", "[tasks]\nidz = [1]");
        let CliError::Config(msg) = parse(&bad).unwrap_err() else {
            panic!("wrong error kind");
        };
        assert!(msg.starts_with("exp.toml:13:"), "{msg}");
        assert!(msg.contains("idz"), "{msg}");
    }

    #[test]
    fn digest_ignores_formatting_but_not_settings() {
        let a = parse(MINIMAL).unwrap();
        let b = parse(&format!("# comment\n{MINIMAL}")).unwrap();
        let c = parse(&MINIMAL.replace("[0, 1]", "[0, 2]")).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn mechanism_override_starts_from_the_mode() {
        let text = MINIMAL.replace("[backend]", "[diversity]\nmode = \"ablated\"\nsibling_memory = false\n\n[backend]");
        let c = parse(&text).unwrap();
        let d = c.experiment(0).diversity();
        assert!(!d.sibling_memory);
        assert_eq!(d.diversity_instruction, DiversityInstruction::RequestSimilar);
    }

    #[test]
    fn invalid_budget_is_rejected() {
        let text = format!("{MINIMAL}\n[budget]\nmax_nodes = 0\n");
        assert!(matches!(parse(&text), Err(CliError::Config(_))));
    }
}
