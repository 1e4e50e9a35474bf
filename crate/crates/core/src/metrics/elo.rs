//! Elo ratings from all head-to-heads between agents, fitted as a
//! Bradley-Terry model by maximum likelihood.
//!
//! Ties count as half a win for each side. The fit is order-independent,
//! so the same match set always yields the same ratings. When the
//! likelihood has no finite maximum (some group of agents never loses a
//! match to the rest), every agent additionally plays one virtual tie
//! against a fixed 1500-rated opponent, which keeps ratings finite
//! without changing their order.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::f64::consts::LN_10;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use super::AttemptResult;

/// Mean rating of every fitted table.
pub const ELO_ANCHOR: f64 = 1500.0;

const ELO_SCALE: f64 = 400.0 / LN_10;
const GRAD_TOL: f64 = 1e-9;
const MAX_ITERS: usize = 200;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EloError {
    #[error("comparison graph is disconnected (agents: {0:?})")]
    DisconnectedComparisonGraph(Vec<String>),
    #[error("Bradley-Terry fit did not converge (gradient norm {0:e})")]
    NotConverged(f64),
}

/// Expected score of the higher-rated side for a rating gap.
pub fn expected_win_probability(rating_gap: f64) -> f64 {
    1.0 / (1.0 + 10f64.powf(-rating_gap / 400.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MatchOutcome {
    Win,
    Loss,
    Tie,
}

/// One head-to-head; the outcome is from `agent_a`'s side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Match {
    pub agent_a: String,
    pub agent_b: String,
    pub outcome: MatchOutcome,
}

/// All pairwise comparisons between agents' attempts on the same
/// (task, seed). Invalid attempts lose to valid ones and tie each other.
pub fn head_to_head_matches(
    attempts: &BTreeMap<String, Vec<AttemptResult>>,
    higher_is_better: impl Fn(&str) -> bool,
) -> Vec<Match> {
    let mut by_unit: BTreeMap<(&str, u64), Vec<(&str, &AttemptResult)>> = BTreeMap::new();
    for (agent, list) in attempts {
        for a in list {
            by_unit
                .entry((a.task_id.as_str(), a.seed))
                .or_default()
                .push((agent.as_str(), a));
        }
    }
    let mut matches = Vec::new();
    for ((task, _), entries) in by_unit {
        let hib = higher_is_better(task);
        for i in 0..entries.len() {
            for j in (i + 1)..entries.len() {
                let (agent_a, a) = entries[i];
                let (agent_b, b) = entries[j];
                if agent_a == agent_b {
                    continue;
                }
                matches.push(Match {
                    agent_a: agent_a.to_string(),
                    agent_b: agent_b.to_string(),
                    outcome: compare_attempts(a, b, hib),
                });
            }
        }
    }
    matches
}

pub fn compare_attempts(a: &AttemptResult, b: &AttemptResult, hib: bool) -> MatchOutcome {
    match (a.raw_score.filter(|_| a.valid), b.raw_score.filter(|_| b.valid)) {
        (None, None) => MatchOutcome::Tie,
        (Some(_), None) => MatchOutcome::Win,
        (None, Some(_)) => MatchOutcome::Loss,
        (Some(x), Some(y)) if x == y => MatchOutcome::Tie,
        (Some(x), Some(y)) => {
            if crate::model::is_better(x, y, hib) {
                MatchOutcome::Win
            } else {
                MatchOutcome::Loss
            }
        }
    }
}

/// Aggregated head-to-head record: `wins[i][j]` is i's score against j,
/// ties counting one half.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseRecord {
    agents: Vec<String>,
    wins: Vec<Vec<f64>>,
}

impl PairwiseRecord {
    pub fn new(agents: impl IntoIterator<Item = String>) -> Self {
        let agents: Vec<String> = agents
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let k = agents.len();
        Self {
            agents,
            wins: vec![vec![0.0; k]; k],
        }
    }

    pub fn from_matches(matches: &[Match]) -> Self {
        let mut rec = Self::new(
            matches
                .iter()
                .flat_map(|m| [m.agent_a.clone(), m.agent_b.clone()]),
        );
        for m in matches {
            let i = rec.index(&m.agent_a).expect("agent registered");
            let j = rec.index(&m.agent_b).expect("agent registered");
            rec.record(i, j, m.outcome);
        }
        rec
    }

    pub fn agents(&self) -> &[String] {
        &self.agents
    }

    pub fn index(&self, agent: &str) -> Option<usize> {
        self.agents.binary_search_by(|a| a.as_str().cmp(agent)).ok()
    }

    pub fn record(&mut self, i: usize, j: usize, outcome: MatchOutcome) {
        match outcome {
            MatchOutcome::Win => self.wins[i][j] += 1.0,
            MatchOutcome::Loss => self.wins[j][i] += 1.0,
            MatchOutcome::Tie => {
                self.wins[i][j] += 0.5;
                self.wins[j][i] += 0.5;
            }
        }
    }

    /// Adds another record over the same agents.
    pub fn merge(&mut self, other: &PairwiseRecord) {
        assert_eq!(self.agents, other.agents, "records cover different agents");
        for (row, other_row) in self.wins.iter_mut().zip(&other.wins) {
            for (w, o) in row.iter_mut().zip(other_row) {
                *w += o;
            }
        }
    }

    fn games(&self, i: usize, j: usize) -> f64 {
        self.wins[i][j] + self.wins[j][i]
    }

    pub fn n_matches(&self, i: usize) -> usize {
        (0..self.agents.len())
            .filter(|&j| j != i)
            .map(|j| self.games(i, j))
            .sum::<f64>()
            .round() as usize
    }

    fn reachable(&self, start: usize, edge: impl Fn(usize, usize) -> bool) -> Vec<bool> {
        let k = self.agents.len();
        let mut seen = vec![false; k];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            for j in 0..k {
                if !seen[j] && edge(i, j) {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen
    }

    fn is_connected(&self) -> bool {
        self.agents.len() >= 2
            && self
                .reachable(0, |i, j| self.games(i, j) > 0.0)
                .iter()
                .all(|&s| s)
    }

    /// The maximum-likelihood estimate exists iff the "scored at least
    /// something against" digraph is strongly connected.
    fn mle_exists(&self) -> bool {
        let fwd = self.reachable(0, |i, j| self.wins[i][j] > 0.0);
        let bwd = self.reachable(0, |i, j| self.wins[j][i] > 0.0);
        fwd.iter().chain(bwd.iter()).all(|&s| s)
    }

    pub fn fit(&self) -> Result<EloTable, EloError> {
        if !self.is_connected() {
            return Err(EloError::DisconnectedComparisonGraph(self.agents.clone()));
        }
        let regularized = !self.mle_exists();
        let theta = self.newton(regularized)?;
        let mean = theta.iter().sum::<f64>() / theta.len() as f64;
        let ratings = self
            .agents
            .iter()
            .zip(theta.iter())
            .enumerate()
            .map(|(i, (a, t))| {
                (
                    a.clone(),
                    AgentRating {
                        rating: ELO_ANCHOR + ELO_SCALE * (t - mean),
                        n_matches: self.n_matches(i),
                    },
                )
            })
            .collect();
        Ok(EloTable {
            ratings,
            regularized,
        })
    }

    // Gradient and negative Hessian of the log-likelihood in natural
    // (log-strength) units.
    fn derivatives(&self, theta: &DVector<f64>, regularized: bool) -> (f64, DVector<f64>, DMatrix<f64>) {
        let k = self.agents.len();
        let mut ll = 0.0;
        let mut grad = DVector::zeros(k);
        let mut info = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in (i + 1)..k {
                let n = self.games(i, j);
                if n == 0.0 {
                    continue;
                }
                let d = theta[i] - theta[j];
                let p = sigmoid(d);
                ll += self.wins[i][j] * log_sigmoid(d) + self.wins[j][i] * log_sigmoid(-d);
                let g = self.wins[i][j] - n * p;
                grad[i] += g;
                grad[j] -= g;
                let w = n * p * (1.0 - p);
                info[(i, i)] += w;
                info[(j, j)] += w;
                info[(i, j)] -= w;
                info[(j, i)] -= w;
            }
            if regularized {
                // one tie against a fixed opponent at theta = 0
                let d = theta[i];
                let p = sigmoid(d);
                ll += 0.5 * log_sigmoid(d) + 0.5 * log_sigmoid(-d);
                grad[i] += 0.5 - p;
                info[(i, i)] += p * (1.0 - p);
            }
        }
        (ll, grad, info)
    }

    fn newton(&self, regularized: bool) -> Result<DVector<f64>, EloError> {
        let k = self.agents.len();
        let mut theta = DVector::zeros(k);
        // Without the virtual opponent the likelihood is shift-invariant:
        // pin the last agent and solve for the rest.
        let free = if regularized { k } else { k - 1 };
        let (mut ll, mut grad, mut info) = self.derivatives(&theta, regularized);
        for _ in 0..MAX_ITERS {
            if grad.norm() < GRAD_TOL {
                return Ok(theta);
            }
            let sub_info = info.view((0, 0), (free, free)).into_owned();
            let sub_grad = grad.rows(0, free).into_owned();
            let step = match sub_info.clone().cholesky() {
                Some(chol) => chol.solve(&sub_grad),
                None => sub_info
                    .lu()
                    .solve(&sub_grad)
                    .ok_or(EloError::NotConverged(grad.norm()))?,
            };
            let mut scale = 1.0;
            loop {
                let mut cand = theta.clone();
                for i in 0..free {
                    cand[i] += scale * step[i];
                }
                let (cll, cgrad, cinfo) = self.derivatives(&cand, regularized);
                if cll >= ll - 1e-12 || scale < 1e-8 {
                    theta = cand;
                    ll = cll;
                    grad = cgrad;
                    info = cinfo;
                    break;
                }
                scale *= 0.5;
            }
        }
        if grad.norm() < GRAD_TOL {
            Ok(theta)
        } else {
            Err(EloError::NotConverged(grad.norm()))
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentRating {
    pub rating: f64,
    pub n_matches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EloTable {
    pub ratings: BTreeMap<String, AgentRating>,
    /// Whether the virtual-tie prior was needed for finite ratings.
    pub regularized: bool,
}

impl EloTable {
    pub fn fit(matches: &[Match]) -> Result<Self, EloError> {
        PairwiseRecord::from_matches(matches).fit()
    }

    pub fn rating(&self, agent: &str) -> Option<f64> {
        self.ratings.get(agent).map(|r| r.rating)
    }

    /// Expected score of `a` against `b`.
    pub fn expected(&self, a: &str, b: &str) -> Option<f64> {
        Some(expected_win_probability(self.rating(a)? - self.rating(b)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(a: &str, b: &str, outcome: MatchOutcome) -> Match {
        Match {
            agent_a: a.into(),
            agent_b: b.into(),
            outcome,
        }
    }

    #[test]
    fn hundred_point_gap_is_sixty_four_percent() {
        let p = expected_win_probability(100.0);
        assert!((p - 0.640).abs() < 0.001, "{p}");
        assert_eq!(expected_win_probability(0.0), 0.5);
    }

    #[test]
    fn ratings_centered_on_anchor() {
        let matches = vec![
            m("a", "b", MatchOutcome::Win),
            m("a", "b", MatchOutcome::Loss),
            m("b", "c", MatchOutcome::Win),
            m("c", "b", MatchOutcome::Win),
            m("a", "c", MatchOutcome::Tie),
        ];
        let table = EloTable::fit(&matches).unwrap();
        assert!(!table.regularized);
        let mean: f64 =
            table.ratings.values().map(|r| r.rating).sum::<f64>() / table.ratings.len() as f64;
        assert!((mean - ELO_ANCHOR).abs() < 1e-9);
        assert_eq!(table.ratings["a"].n_matches, 3);
    }

    #[test]
    fn single_agent_is_disconnected() {
        let rec = PairwiseRecord::new(["solo".to_string()]);
        assert!(matches!(
            rec.fit(),
            Err(EloError::DisconnectedComparisonGraph(_))
        ));
        let matches = vec![m("a", "b", MatchOutcome::Win), m("c", "d", MatchOutcome::Tie)];
        assert!(matches!(
            EloTable::fit(&matches),
            Err(EloError::DisconnectedComparisonGraph(_))
        ));
    }

    #[test]
    fn undefeated_agent_gets_finite_top_rating() {
        let matches: Vec<_> = (0..10).map(|_| m("a", "b", MatchOutcome::Win)).collect();
        let table = EloTable::fit(&matches).unwrap();
        assert!(table.regularized);
        let (a, b) = (table.rating("a").unwrap(), table.rating("b").unwrap());
        assert!(a.is_finite() && b.is_finite() && a > b);
    }
}
