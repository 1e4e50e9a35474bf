#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ideaforest_core::backend::{Script, ScriptedBackend};
use ideaforest_core::diversity::ArchTaxonomy;
use ideaforest_core::model::{ClockMode, Scaffold, TaskSpec};
use ideaforest_core::operators::{DiversityConfig, OperatorEnv, PromptTemplates};
use ideaforest_core::search::{
    run_greedy, run_mcts, SandboxEvaluator, SearchBudget, SearchDeps, SearchOutcome, SearchParams,
};
use ideaforest_core::taskenv::synthetic_task_pack;

pub fn demo_script_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/scripts/demo.json")
}

pub fn demo_script() -> Script {
    Script::load(&demo_script_path()).expect("demo script loads")
}

pub fn task(id: &str) -> TaskSpec {
    synthetic_task_pack()
        .into_iter()
        .find(|t| t.task_id == id)
        .expect("task in pack")
}

pub fn params(max_nodes: usize, debug_limit: usize) -> SearchParams {
    SearchParams {
        budget: SearchBudget {
            wall_clock_s: 86_400.0,
            max_nodes,
            per_node_exec_limit_s: 30.0,
        },
        diversity: DiversityConfig::BASELINE,
        debug_limit,
        uct_c: 1.414,
        mcts_max_children: 2,
        clock: ClockMode::logical(),
    }
}

pub fn run(
    scaffold: Scaffold,
    task: &TaskSpec,
    params: &SearchParams,
    script: Script,
    seed: u64,
    workdir: &Path,
) -> SearchOutcome {
    let backend = ScriptedBackend::new(script, seed).expect("script is valid");
    let templates = PromptTemplates::builtin();
    let taxonomy = ArchTaxonomy::builtin();
    let evaluator = SandboxEvaluator::new(workdir);
    let deps = SearchDeps {
        env: OperatorEnv {
            backend: &backend,
            templates: &templates,
            temperature: 0.6,
            run_id: "test",
            request_log: None,
        },
        evaluator: &evaluator,
        taxonomy: &taxonomy,
    };
    match scaffold {
        Scaffold::Greedy => run_greedy(task, params, &deps),
        Scaffold::Mcts => run_mcts(task, params, &deps),
    }
}
