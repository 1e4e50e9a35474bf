//! Per-agent metric table with stratified bootstrap intervals, shared by
//! the simulator and the log analyzer.

use std::collections::{BTreeMap, BTreeSet};

use super::{
    compare_attempts, stratified_bootstrap_ci, stratified_bootstrap_cis, AttemptMetric, AttemptResult,
    BootstrapConfig, BootstrapError, ConfidenceInterval, EloError, PairwiseRecord, ELO_ANCHOR,
};

pub const ELO_METRIC: &str = "elo";

/// Column order of every metrics table.
pub const REPORT_METRICS: [&str; 5] = [
    "medal_rate",
    "valid_submission_rate",
    "avg_normalized_score",
    "percentile",
    ELO_METRIC,
];

/// Metric name to interval, per agent.
pub type MetricTable = BTreeMap<String, BTreeMap<String, ConfidenceInterval>>;

#[derive(Debug, Clone, PartialEq)]
pub struct AgentMetrics {
    pub table: MetricTable,
    /// Set when no Elo could be fitted (fewer than two agents are never a
    /// problem: a lone agent sits at the anchor).
    pub elo_error: Option<EloError>,
}

/// Every metric for every agent. Attempt strata are tasks; Elo resamples
/// (task, seed) units, each holding the head-to-head record of all agents
/// on that unit, and refits all ratings jointly per resample.
pub fn agent_metrics(
    attempts: &BTreeMap<String, Vec<AttemptResult>>,
    higher_is_better: &BTreeMap<String, bool>,
    bootstrap: &BootstrapConfig,
) -> Result<AgentMetrics, BootstrapError> {
    let task_ids: BTreeSet<&str> = attempts
        .values()
        .flatten()
        .map(|a| a.task_id.as_str())
        .collect();
    let mut table = MetricTable::new();
    for (agent, list) in attempts {
        let strata: Vec<Vec<&AttemptResult>> = task_ids
            .iter()
            .map(|t| list.iter().filter(|a| a.task_id == *t).collect::<Vec<_>>())
            .filter(|s| !s.is_empty())
            .collect();
        let mut row = BTreeMap::new();
        for m in AttemptMetric::ALL {
            let ci = stratified_bootstrap_ci(
                &strata,
                |s| m.aggregate(s.iter().flatten().map(|a| **a)).unwrap_or(f64::NAN),
                bootstrap,
            )?;
            row.insert(m.name().to_string(), ci);
        }
        table.insert(agent.clone(), row);
    }

    let mut elo_error = None;
    match elo_intervals(attempts, &task_ids, higher_is_better, bootstrap) {
        Ok(Some(cis)) => {
            for (agent, ci) in attempts.keys().zip(cis) {
                table.get_mut(agent).expect("row").insert(ELO_METRIC.into(), ci);
            }
        }
        Ok(None) => {}
        Err(e) => elo_error = Some(e),
    }
    Ok(AgentMetrics { table, elo_error })
}

fn elo_intervals(
    attempts: &BTreeMap<String, Vec<AttemptResult>>,
    task_ids: &BTreeSet<&str>,
    hib: &BTreeMap<String, bool>,
    bootstrap: &BootstrapConfig,
) -> Result<Option<Vec<ConfidenceInterval>>, EloError> {
    let agents: Vec<&String> = attempts.keys().collect();
    if agents.len() == 1 {
        let anchor = ConfidenceInterval {
            point: ELO_ANCHOR,
            low: ELO_ANCHOR,
            high: ELO_ANCHOR,
        };
        return Ok(Some(vec![anchor]));
    }
    let template = PairwiseRecord::new(agents.iter().map(|a| a.to_string()));
    let mut by_unit: BTreeMap<(&str, u64), Vec<(usize, &AttemptResult)>> = BTreeMap::new();
    for (agent, list) in attempts {
        let ai = template.index(agent).expect("registered");
        for a in list {
            by_unit.entry((a.task_id.as_str(), a.seed)).or_default().push((ai, a));
        }
    }
    let strata: Vec<Vec<PairwiseRecord>> = task_ids
        .iter()
        .map(|t| {
            let higher = hib.get(*t).copied().unwrap_or(true);
            by_unit
                .range((*t, 0)..=(*t, u64::MAX))
                .map(|(_, entries)| {
                    let mut rec = template.clone();
                    for i in 0..entries.len() {
                        for j in (i + 1)..entries.len() {
                            let (ai, a) = entries[i];
                            let (bj, b) = entries[j];
                            if ai != bj {
                                rec.record(ai, bj, compare_attempts(a, b, higher));
                            }
                        }
                    }
                    rec
                })
                .collect()
        })
        .collect();

    let mut total = template.clone();
    for rec in strata.iter().flatten() {
        total.merge(rec);
    }
    // surfaces a disconnected graph before resampling
    total.fit()?;

    let ratings = |s: &[Vec<&PairwiseRecord>]| {
        let mut total = template.clone();
        for rec in s.iter().flatten() {
            total.merge(rec);
        }
        match total.fit() {
            Ok(table) => agents
                .iter()
                .map(|a| table.rating(a).unwrap_or(f64::NAN))
                .collect(),
            Err(_) => vec![f64::NAN; agents.len()],
        }
    };
    match stratified_bootstrap_cis(&strata, ratings, bootstrap) {
        Ok(cis) => Ok(Some(cis)),
        Err(BootstrapError::NonFiniteStatistic) => {
            // some resample lost connectivity; keep the point estimate only
            let point = ratings(
                &strata
                    .iter()
                    .map(|s| s.iter().collect())
                    .collect::<Vec<_>>(),
            );
            tracing::warn!("Elo bootstrap hit a disconnected resample; intervals left undefined");
            Ok(Some(
                point
                    .into_iter()
                    .map(|p| ConfidenceInterval {
                        point: p,
                        low: f64::NAN,
                        high: f64::NAN,
                    })
                    .collect(),
            ))
        }
        Err(_) => Ok(None),
    }
}

/// `agent,metric,value,ci_low,ci_high` rows in [`REPORT_METRICS`] order.
pub fn metrics_csv(table: &MetricTable, agent_order: &[String]) -> String {
    let mut out = String::from("agent,metric,value,ci_low,ci_high\n");
    for agent in agent_order {
        let Some(row) = table.get(agent) else { continue };
        for metric in REPORT_METRICS {
            if let Some(ci) = row.get(metric) {
                out.push_str(&format!("{agent},{metric},{},{},{}\n", ci.point, ci.low, ci.high));
            }
        }
    }
    out
}
