//! `ideaforest simulate`: the controlled experiment on a simulated
//! scenario, with trajectory logs that `analyze` and `elo` read like real
//! ones.

use std::path::{Path, PathBuf};

use ideaforest_core::metrics::BootstrapConfig;
use ideaforest_core::simlab::{report_from_runs, simulate_seeds, ComparisonReport, SimScenario};
use ideaforest_core::trajectory::TrajectoryWriter;

use crate::logs::{run_id, save_tasks, LOGS_DIR};
use crate::{write_atomic, CliError};

pub const BUILTIN_SCENARIOS: [&str; 2] = ["broken-arch", "null"];

#[derive(Debug, Clone)]
pub struct SimulateOptions {
    /// A scenario file or a built-in scenario name.
    pub scenario: String,
    pub out: PathBuf,
    /// Defaults to the scenario's own seed count.
    pub n_seeds: Option<u64>,
    pub first_seed: u64,
    /// Replaces the agents by copies of the first one with these biases.
    pub sweep: Option<Vec<f64>>,
    pub write_logs: bool,
    pub bootstrap: BootstrapConfig,
}

pub fn load_scenario(spec: &str) -> Result<SimScenario, CliError> {
    let path = Path::new(spec);
    if path.is_file() {
        return SimScenario::load(path).map_err(|e| CliError::Config(format!("{spec}: {e}")));
    }
    match spec {
        "broken-arch" => Ok(SimScenario::broken_arch()),
        "null" => Ok(SimScenario::null()),
        _ => Err(CliError::Config(format!(
            "{spec}: no such scenario file, and not a built-in scenario ({})",
            BUILTIN_SCENARIOS.join(", ")
        ))),
    }
}

pub fn cmd_simulate(opts: &SimulateOptions) -> Result<ComparisonReport, CliError> {
    let mut scenario = load_scenario(&opts.scenario)?;
    if let Some(biases) = &opts.sweep {
        let template = scenario
            .agents
            .first()
            .cloned()
            .ok_or_else(|| CliError::Config("scenario has no agent to sweep".into()))?;
        scenario = scenario.knob_sweep(&template, biases);
    }
    scenario.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let n_seeds = opts.n_seeds.unwrap_or(scenario.n_seeds);
    if n_seeds == 0 {
        return Err(CliError::Config("at least one seed is required".into()));
    }
    let out = &opts.out;
    let runs = simulate_seeds(&scenario, opts.first_seed, n_seeds).map_err(|e| CliError::Config(e.to_string()))?;
    let report = report_from_runs(&scenario, n_seeds, &runs, &opts.bootstrap)
        .map_err(|e| CliError::Other(e.to_string()))?;

    write_atomic(&out.join("scenario.toml"), scenario.to_toml().as_bytes())?;
    save_tasks(out, &scenario.task_specs())?;
    if opts.write_logs {
        for agent in &scenario.agents {
            let path = out.join(LOGS_DIR).join(format!("{}.jsonl", agent.name));
            let tmp = path.with_extension("partial");
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(CliError::io(format!("creating {}", dir.display())))?;
            }
            let writer = TrajectoryWriter::create(&tmp).map_err(|e| CliError::Other(e.to_string()))?;
            for run in runs.iter().filter(|r| r.agent == agent.name) {
                let id = run_id(&run.agent, run.seed);
                for tree in &run.trees {
                    writer
                        .write_tree(&id, tree)
                        .map_err(|e| CliError::Other(e.to_string()))?;
                }
            }
            drop(writer);
            std::fs::rename(&tmp, &path).map_err(CliError::io(format!("renaming to {}", path.display())))?;
        }
    }
    write_atomic(&out.join("metrics.csv"), report.metrics_csv().as_bytes())?;
    write_atomic(&out.join("cdf.csv"), report.cdf_csv().as_bytes())?;
    Ok(report)
}
