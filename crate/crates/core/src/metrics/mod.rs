//! Benchmark performance metrics: Kaggle-style medals, valid submission
//! rate, normalized score, human percentile, Elo, plus the stratified
//! bootstrap and correlation used to report them.

mod bootstrap;
mod elo;
mod report;

pub use bootstrap::{
    pooled_mean, stratified_bootstrap_ci, stratified_bootstrap_cis, BootstrapConfig, BootstrapError,
    ConfidenceInterval,
};
pub use elo::{
    compare_attempts, expected_win_probability, head_to_head_matches, AgentRating, EloError, EloTable, Match, MatchOutcome,
    PairwiseRecord, ELO_ANCHOR,
};
pub use report::{agent_metrics, metrics_csv, AgentMetrics, MetricTable, ELO_METRIC, REPORT_METRICS};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Leaderboard;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("number of teams must be at least 1")]
    NonPositiveTeams,
    #[error("no attempts to aggregate")]
    EmptyInput,
    #[error("leaderboard scores are all equal")]
    DegenerateLeaderboard,
    #[error("input series have zero variance")]
    ZeroVariance,
    #[error("series lengths differ or are shorter than 3")]
    BadLength,
    #[error("score {0} is not finite")]
    NonFinite(f64),
}

/// Rank cutoffs (best rank = 1); a medal is won iff rank <= cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedalThresholds {
    pub bronze_rank: usize,
    pub silver_rank: usize,
    pub gold_rank: usize,
}

/// Kaggle medal cutoffs for a competition with `n_teams` teams.
/// Fractional cutoffs are floored.
pub fn medal_thresholds(n_teams: usize) -> Result<MedalThresholds, MetricsError> {
    let n = n_teams;
    let (bronze_rank, silver_rank, gold_rank) = match n {
        0 => return Err(MetricsError::NonPositiveTeams),
        1..=99 => (4 * n / 10, 2 * n / 10, n / 10),
        100..=249 => (4 * n / 10, 2 * n / 10, 10),
        250..=999 => (100, 50, 10 + 2 * n / 1000),
        _ => (n / 10, n / 20, 10 + 2 * n / 1000),
    };
    Ok(MedalThresholds {
        bronze_rank,
        silver_rank,
        gold_rank,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Medal {
    None,
    Bronze,
    Silver,
    Gold,
}

impl Medal {
    pub fn is_medal(self) -> bool {
        self != Medal::None
    }
}

/// Rank of a score among the humans: 1 + number of humans strictly better.
/// Ties with humans go to the agent.
pub fn agent_rank(raw_score: f64, leaderboard: &Leaderboard) -> usize {
    1 + leaderboard.count_strictly_better(raw_score)
}

pub fn award_medal(raw_score: f64, leaderboard: &Leaderboard) -> Medal {
    let Ok(t) = medal_thresholds(leaderboard.n_teams()) else {
        return Medal::None;
    };
    let rank = agent_rank(raw_score, leaderboard);
    if rank <= t.gold_rank {
        Medal::Gold
    } else if rank <= t.silver_rank {
        Medal::Silver
    } else if rank <= t.bronze_rank {
        Medal::Bronze
    } else {
        Medal::None
    }
}

/// Linear map with the worst human at 0 and the best at 1. Clamped below
/// at 0; beating the best human gives values above 1.
pub fn normalized_score(raw_score: f64, leaderboard: &Leaderboard) -> Result<f64, MetricsError> {
    if !raw_score.is_finite() {
        return Err(MetricsError::NonFinite(raw_score));
    }
    let (worst, best) = (leaderboard.worst(), leaderboard.best());
    if worst == best {
        return Err(MetricsError::DegenerateLeaderboard);
    }
    Ok(((raw_score - worst) / (best - worst)).max(0.0))
}

/// Share of human teams strictly outperformed, in percent.
pub fn percentile(raw_score: f64, leaderboard: &Leaderboard) -> f64 {
    100.0 * leaderboard.count_strictly_worse(raw_score) as f64 / leaderboard.n_teams() as f64
}

/// One agent attempt at one task with one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptResult {
    pub task_id: String,
    pub seed: u64,
    pub valid: bool,
    pub raw_score: Option<f64>,
    pub medal: Medal,
    pub normalized_score: f64,
    pub percentile: f64,
}

impl AttemptResult {
    /// Grades a final submission score; `None` is an attempt without a
    /// valid submission, which still counts with zero on every metric.
    pub fn grade(
        task_id: impl Into<String>,
        seed: u64,
        raw_score: Option<f64>,
        leaderboard: &Leaderboard,
    ) -> Result<Self, MetricsError> {
        let task_id = task_id.into();
        match raw_score {
            Some(raw) => Ok(Self {
                task_id,
                seed,
                valid: true,
                raw_score: Some(raw),
                medal: award_medal(raw, leaderboard),
                normalized_score: normalized_score(raw, leaderboard)?,
                percentile: percentile(raw, leaderboard),
            }),
            None => Ok(Self::invalid(task_id, seed)),
        }
    }

    pub fn invalid(task_id: impl Into<String>, seed: u64) -> Self {
        Self {
            task_id: task_id.into(),
            seed,
            valid: false,
            raw_score: None,
            medal: Medal::None,
            normalized_score: 0.0,
            percentile: 0.0,
        }
    }
}

fn mean_of<'a>(
    attempts: impl IntoIterator<Item = &'a AttemptResult>,
    f: impl Fn(&AttemptResult) -> f64,
) -> Result<f64, MetricsError> {
    let (sum, n) = attempts
        .into_iter()
        .fold((0.0, 0usize), |(s, n), a| (s + f(a), n + 1));
    if n == 0 {
        return Err(MetricsError::EmptyInput);
    }
    Ok(sum / n as f64)
}

/// Percentage of attempts that won any medal.
pub fn medal_rate<'a>(
    attempts: impl IntoIterator<Item = &'a AttemptResult>,
) -> Result<f64, MetricsError> {
    mean_of(attempts, |a| if a.medal.is_medal() { 100.0 } else { 0.0 })
}

/// Percentage of attempts with a valid submission.
pub fn valid_submission_rate<'a>(
    attempts: impl IntoIterator<Item = &'a AttemptResult>,
) -> Result<f64, MetricsError> {
    mean_of(attempts, |a| if a.valid { 100.0 } else { 0.0 })
}

pub fn mean_normalized_score<'a>(
    attempts: impl IntoIterator<Item = &'a AttemptResult>,
) -> Result<f64, MetricsError> {
    mean_of(attempts, |a| a.normalized_score)
}

pub fn mean_percentile<'a>(
    attempts: impl IntoIterator<Item = &'a AttemptResult>,
) -> Result<f64, MetricsError> {
    mean_of(attempts, |a| a.percentile)
}

/// The per-attempt metrics that aggregate by averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttemptMetric {
    MedalRate,
    ValidSubmissionRate,
    AvgNormalizedScore,
    Percentile,
}

impl AttemptMetric {
    pub const ALL: [AttemptMetric; 4] = [
        AttemptMetric::MedalRate,
        AttemptMetric::ValidSubmissionRate,
        AttemptMetric::AvgNormalizedScore,
        AttemptMetric::Percentile,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttemptMetric::MedalRate => "medal_rate",
            AttemptMetric::ValidSubmissionRate => "valid_submission_rate",
            AttemptMetric::AvgNormalizedScore => "avg_normalized_score",
            AttemptMetric::Percentile => "percentile",
        }
    }

    pub fn value(self, a: &AttemptResult) -> f64 {
        match self {
            AttemptMetric::MedalRate => {
                if a.medal.is_medal() {
                    100.0
                } else {
                    0.0
                }
            }
            AttemptMetric::ValidSubmissionRate => {
                if a.valid {
                    100.0
                } else {
                    0.0
                }
            }
            AttemptMetric::AvgNormalizedScore => a.normalized_score,
            AttemptMetric::Percentile => a.percentile,
        }
    }

    pub fn aggregate<'a>(
        self,
        attempts: impl IntoIterator<Item = &'a AttemptResult>,
    ) -> Result<f64, MetricsError> {
        mean_of(attempts, |a| self.value(a))
    }
}

pub fn pearson_correlation(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(MetricsError::BadLength);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
