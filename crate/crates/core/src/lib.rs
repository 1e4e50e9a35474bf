//! Tree-search research agents: solution trees, Draft/Debug/Improve
//! operators, greedy and MCTS search, a sandboxed task environment,
//! ideation-diversity measurement, benchmark metrics and a behavioral
//! simulator.

pub mod backend;
pub mod diversity;
pub mod metrics;
pub mod model;
pub mod operators;
pub mod search;
pub mod simlab;
pub mod taskenv;
pub mod trajectory;

pub use backend::{Backend, BackendError, BackendSpec, CompletionRequest, ScriptedBackend};
pub use diversity::{ArchLabel, ArchTaxonomy};
pub use metrics::{AttemptResult, ConfidenceInterval, EloTable, Medal};
pub use model::{
    ClockMode, DiversityMode, ExecStatus, ExecutionOutcome, ExperimentConfig, Leaderboard,
    NodeId, Operator, Scaffold, SolutionNode, SolutionTree, TaskSpec,
};
pub use operators::DiversityConfig;
pub use search::{SearchBudget, SearchOutcome, SearchParams};
