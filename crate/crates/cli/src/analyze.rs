//! `ideaforest analyze`: diversity, performance, correlation and time
//! tables (plus SVG charts) from a directory of trajectory logs. The
//! output depends on nothing but the directory contents.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ideaforest_core::diversity::{distinct_arch_cdf, run_entropy, tree_level_diversity, ArchTaxonomy, EntropyPopulation};
use ideaforest_core::metrics::{agent_metrics, metrics_csv, pearson_correlation, BootstrapConfig, REPORT_METRICS};
use ideaforest_core::model::MAX_DRAFTS;
use ideaforest_core::search::node_time_accounting;

use crate::logs::LogSet;
use crate::plot::{cdf_svg, scatter_svg, Series};
use crate::{write_atomic, CliError};

pub const DIVERSITY_HEADER: &str = "agent,seed,entropy_bits,per_task_entropy_bits,mean_tree_diversity,n_tasks";
pub const METRICS_HEADER: &str = "agent,metric,value,ci_low,ci_high";
pub const CORRELATIONS_HEADER: &str = "diversity,metric,pearson_r,n_points";
pub const TIME_HEADER: &str = "agent,seed,task_id,mean_exec_time_valid_s,share_time_valid";
pub const CDF_HEADER: &str = "agent,k,fraction";

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeSummary {
    pub agents: Vec<String>,
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

/// Per-agent diversity means, the x axis of the correlation table.
struct AgentDiversity {
    entropy_bits: f64,
    tree_diversity: f64,
}

/// Everything collected per agent across its runs.
#[derive(Default)]
struct AgentPool {
    entropies: Vec<f64>,
    mean_diversities: Vec<f64>,
    tree_counts: Vec<usize>,
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn cmd_analyze(log_dir: &Path, out: &Path, bootstrap: &BootstrapConfig) -> Result<AnalyzeSummary, CliError> {
    let logs = LogSet::load(&[log_dir.to_path_buf()])?;
    let taxonomy = ArchTaxonomy::builtin();
    let agents = logs.agents();
    let mut warnings = Vec::new();
    let mut files = Vec::new();
    let mut emit = |name: &str, body: String| -> Result<(), CliError> {
        let path = out.join(name);
        write_atomic(&path, body.as_bytes())?;
        files.push(path);
        Ok(())
    };

    // diversity.csv and time_accounting.csv
    let mut diversity = format!("{DIVERSITY_HEADER}\n");
    let mut time = format!("{TIME_HEADER}\n");
    let mut per_agent: BTreeMap<&str, AgentPool> = BTreeMap::new();
    for run in &logs.runs {
        let pooled = run_entropy(&run.trees, &taxonomy, EntropyPopulation::Pooled).ok();
        let per_task = run_entropy(&run.trees, &taxonomy, EntropyPopulation::PerTaskMean).ok();
        let counts: Vec<usize> = run
            .trees
            .iter()
            .map(|t| tree_level_diversity(t, &taxonomy))
            .filter(|c| (1..=MAX_DRAFTS).contains(c))
            .collect();
        let mean_div = mean(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
        writeln!(
            diversity,
            "{},{},{},{},{},{}",
            run.agent,
            run.seed,
            opt(pooled),
            opt(per_task),
            opt(mean_div),
            run.trees.len()
        )
        .unwrap();
        let slot = per_agent.entry(run.agent.as_str()).or_default();
        slot.entropies.extend(pooled);
        slot.mean_diversities.extend(mean_div);
        slot.tree_counts.extend(counts);
        for tree in &run.trees {
            let acc = node_time_accounting(tree);
            writeln!(
                time,
                "{},{},{},{},{}",
                run.agent,
                run.seed,
                tree.task_id,
                opt(acc.mean_exec_time_valid_s),
                acc.share_time_valid
            )
            .unwrap();
        }
    }
    emit("diversity.csv", diversity)?;
    emit("time_accounting.csv", time)?;

    // metrics.csv
    let attempts = logs.attempts_by_agent()?;
    let report = agent_metrics(&attempts, &logs.higher_is_better(), bootstrap)
        .map_err(|e| CliError::Other(format!("bootstrap: {e}")))?;
    if let Some(e) = &report.elo_error {
        warnings.push(format!("no Elo ratings: {e}"));
    }
    emit("metrics.csv", metrics_csv(&report.table, &agents))?;

    // cdf.csv
    let mut cdf = format!("{CDF_HEADER}\n");
    let mut cdf_series = Vec::new();
    for agent in &agents {
        let counts = &per_agent[agent.as_str()].tree_counts;
        match distinct_arch_cdf(counts) {
            Ok(c) => {
                for (k, v) in c.values().iter().enumerate() {
                    writeln!(cdf, "{agent},{},{v}", k + 1).unwrap();
                }
                cdf_series.push(Series {
                    label: agent.clone(),
                    points: c.values().iter().enumerate().map(|(k, v)| ((k + 1) as f64, *v)).collect(),
                });
            }
            Err(e) => warnings.push(format!("{agent}: no distinct-architecture CDF ({e})")),
        }
    }
    emit("cdf.csv", cdf)?;

    // correlations.csv over agent-level points
    let agent_div: BTreeMap<&str, AgentDiversity> = per_agent
        .iter()
        .filter_map(|(a, pool)| {
            Some((
                *a,
                AgentDiversity {
                    entropy_bits: mean(&pool.entropies)?,
                    tree_diversity: mean(&pool.mean_diversities)?,
                },
            ))
        })
        .collect();
    let mut corr = format!("{CORRELATIONS_HEADER}\n");
    type Measure = fn(&AgentDiversity) -> f64;
    let measures: [(&str, Measure); 2] = [
        ("entropy_bits", |d| d.entropy_bits),
        ("tree_level_diversity", |d| d.tree_diversity),
    ];
    if agents.len() < 3 {
        warnings.push(format!(
            "correlations need at least 3 agents, found {}; correlations.csv left empty",
            agents.len()
        ));
    } else {
        for (name, measure) in measures {
            for metric in REPORT_METRICS {
                let (xs, ys): (Vec<f64>, Vec<f64>) = agents
                    .iter()
                    .filter_map(|a| {
                        let x = measure(agent_div.get(a.as_str())?);
                        let y = report.table.get(a)?.get(metric)?.point;
                        Some((x, y))
                    })
                    .unzip();
                match pearson_correlation(&xs, &ys) {
                    Ok(r) => writeln!(corr, "{name},{metric},{r},{}", xs.len()).unwrap(),
                    Err(e) => warnings.push(format!("no correlation of {name} with {metric}: {e}")),
                }
            }
        }
    }
    emit("correlations.csv", corr)?;

    // charts
    let scatter: Vec<(String, f64, f64)> = agents
        .iter()
        .filter_map(|a| {
            let x = agent_div.get(a.as_str())?.entropy_bits;
            let y = report.table.get(a)?.get("medal_rate")?.point;
            Some((a.clone(), x, y))
        })
        .collect();
    emit(
        "diversity_vs_medal_rate.svg",
        scatter_svg("Ideation diversity vs medal rate", "entropy (bits)", "medal rate (%)", &scatter),
    )?;
    emit(
        "distinct_architectures_cdf.svg",
        cdf_svg("Distinct architectures among initial drafts", &cdf_series),
    )?;

    Ok(AnalyzeSummary {
        agents,
        files,
        warnings,
    })
}
