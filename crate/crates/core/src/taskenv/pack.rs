//! Synthetic desk-scale tasks. Every task is generated from its
//! parameters alone, so the same definition always yields the same data,
//! the same hidden targets and the same grades.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::{Leaderboard, TaskSpec, DEFAULT_TIME_BUDGET_S};

use super::{Grading, SubmissionSchema};

pub const DEFAULT_N_TEAMS: usize = 100;

/// Generator and metric of a synthetic task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraderKind {
    /// y = coef[0]·x + coef[1]; RMSE.
    LinearFit,
    /// y = coef[0] + coef[1]·x + coef[2]·x²; MAE.
    PolynomialFit,
    /// y = coef[0]·exp(−coef[1]·t); RMSE.
    ExpDecay,
    /// Minimize coef[0] + Σ w_i (x_i − c_i)² with (w_i, c_i) = coef[1 + 2i ..];
    /// the score is the objective value.
    QuadraticMin,
    /// Label = [coef[0]·x + coef[1]·y + coef[2] > 0], points kept at a
    /// margin of at least `noise`; accuracy.
    SeparablePoints,
    /// Points around centroids (coef as x,y pairs) with spread `noise`,
    /// labelled by nearest true centroid; accuracy.
    NearestCentroid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraderParams {
    pub seed: u64,
    #[serde(default)]
    pub n_train: usize,
    pub n_test: usize,
    pub coef: Vec<f64>,
    #[serde(default)]
    pub noise: f64,
}

impl GraderKind {
    pub fn higher_is_better(self) -> bool {
        matches!(self, GraderKind::SeparablePoints | GraderKind::NearestCentroid)
    }
}

/// Materialized task data.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    /// Files written to the working directory: (name, contents).
    pub files: Vec<(String, String)>,
    /// Hidden target per submission row id.
    pub targets: Vec<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn noise_sampler(sd: f64) -> Option<Normal<f64>> {
    (sd > 0.0).then(|| Normal::new(0.0, sd).expect("finite sd"))
}

fn curve(kind: GraderKind, coef: &[f64], x: f64) -> f64 {
    match kind {
        GraderKind::LinearFit => coef[0] * x + coef[1],
        GraderKind::PolynomialFit => coef[0] + coef[1] * x + coef[2] * x * x,
        GraderKind::ExpDecay => coef[0] * (-coef[1] * x).exp(),
        _ => unreachable!("not a curve task"),
    }
}

fn x_range(kind: GraderKind) -> (f64, f64) {
    match kind {
        GraderKind::ExpDecay => (0.0, 5.0),
        _ => (-5.0, 5.0),
    }
}

fn fmt_num(x: f64) -> String {
    // shortest round-trip representation
    format!("{x}")
}

pub fn generate(kind: GraderKind, p: &GraderParams) -> TaskData {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    match kind {
        GraderKind::LinearFit | GraderKind::PolynomialFit | GraderKind::ExpDecay => {
            let (lo, hi) = x_range(kind);
            let noise = noise_sampler(p.noise);
            let mut train = String::from("id,x,y\n");
            for i in 0..p.n_train {
                let x = uniform(&mut rng, lo, hi);
                let eps = noise.map_or(0.0, |n| n.sample(&mut rng));
                let _ = writeln!(train, "{i},{},{}", fmt_num(x), fmt_num(curve(kind, &p.coef, x) + eps));
            }
            let mut test = String::from("id,x\n");
            let mut targets = Vec::with_capacity(p.n_test);
            for i in 0..p.n_test {
                let x = uniform(&mut rng, lo, hi);
                let _ = writeln!(test, "{i},{}", fmt_num(x));
                targets.push(curve(kind, &p.coef, x));
            }
            TaskData {
                files: vec![("train.csv".into(), train), ("test.csv".into(), test)],
                targets,
            }
        }
        GraderKind::QuadraticMin => {
            let mut problem = String::from("id,weight,center\n");
            for (i, pair) in p.coef[1..].chunks(2).enumerate() {
                let _ = writeln!(problem, "{i},{},{}", fmt_num(pair[0]), fmt_num(pair[1]));
            }
            let mut offset = String::from("offset\n");
            let _ = writeln!(offset, "{}", fmt_num(p.coef[0]));
            TaskData {
                files: vec![("problem.csv".into(), problem), ("offset.csv".into(), offset)],
                targets: p.coef[1..].chunks(2).map(|pair| pair[1]).collect(),
            }
        }
        GraderKind::SeparablePoints => {
            let (a, b, c) = (p.coef[0], p.coef[1], p.coef[2]);
            let norm = (a * a + b * b).sqrt();
            let sample = |rng: &mut ChaCha8Rng| loop {
                let x = uniform(rng, -5.0, 5.0);
                let y = uniform(rng, -5.0, 5.0);
                let s = (a * x + b * y + c) / norm;
                if s.abs() >= p.noise {
                    return (x, y, if s > 0.0 { 1.0 } else { 0.0 });
                }
            };
            let mut train = String::from("id,x1,x2,label\n");
            for i in 0..p.n_train {
                let (x, y, l) = sample(&mut rng);
                let _ = writeln!(train, "{i},{},{},{}", fmt_num(x), fmt_num(y), l as u8);
            }
            let mut test = String::from("id,x1,x2\n");
            let mut targets = Vec::new();
            for i in 0..p.n_test {
                let (x, y, l) = sample(&mut rng);
                let _ = writeln!(test, "{i},{},{}", fmt_num(x), fmt_num(y));
                targets.push(l);
            }
            TaskData {
                files: vec![("train.csv".into(), train), ("test.csv".into(), test)],
                targets,
            }
        }
        GraderKind::NearestCentroid => {
            let centroids: Vec<(f64, f64)> = p.coef.chunks(2).map(|c| (c[0], c[1])).collect();
            let spread = Normal::new(0.0, p.noise.max(1e-9)).expect("finite spread");
            let sample = |rng: &mut ChaCha8Rng| {
                let k = rng.random_range(0..centroids.len());
                let x = centroids[k].0 + spread.sample(rng);
                let y = centroids[k].1 + spread.sample(rng);
                let nearest = centroids
                    .iter()
                    .enumerate()
                    .map(|(j, c)| (j, (c.0 - x).powi(2) + (c.1 - y).powi(2)))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(j, _)| j)
                    .expect("at least one centroid");
                (x, y, nearest as f64)
            };
            let mut train = String::from("id,x1,x2,label\n");
            for i in 0..p.n_train {
                let (x, y, l) = sample(&mut rng);
                let _ = writeln!(train, "{i},{},{},{}", fmt_num(x), fmt_num(y), l as u8);
            }
            let mut test = String::from("id,x1,x2\n");
            let mut targets = Vec::new();
            for i in 0..p.n_test {
                let (x, y, l) = sample(&mut rng);
                let _ = writeln!(test, "{i},{},{}", fmt_num(x), fmt_num(y));
                targets.push(l);
            }
            TaskData {
                files: vec![("train.csv".into(), train), ("test.csv".into(), test)],
                targets,
            }
        }
    }
}

/// Score of predictions (row id order) against the hidden targets.
pub fn score(kind: GraderKind, p: &GraderParams, targets: &[f64], preds: &[f64]) -> f64 {
    let n = targets.len() as f64;
    match kind {
        GraderKind::LinearFit | GraderKind::ExpDecay => {
            let mse = targets
                .iter()
                .zip(preds)
                .map(|(t, y)| (t - y).powi(2))
                .sum::<f64>()
                / n;
            mse.sqrt()
        }
        GraderKind::PolynomialFit => {
            targets.iter().zip(preds).map(|(t, y)| (t - y).abs()).sum::<f64>() / n
        }
        GraderKind::QuadraticMin => {
            p.coef[0]
                + p.coef[1..]
                    .chunks(2)
                    .zip(preds)
                    .map(|(wc, x)| wc[0] * (x - wc[1]).powi(2))
                    .sum::<f64>()
        }
        GraderKind::SeparablePoints | GraderKind::NearestCentroid => {
            targets.iter().zip(preds).filter(|(t, y)| t == y).count() as f64 / n
        }
    }
}

pub fn is_label_task(kind: GraderKind) -> bool {
    matches!(kind, GraderKind::SeparablePoints | GraderKind::NearestCentroid)
}

/// A submission that scores the task optimum.
pub fn reference_submission(task: &TaskSpec) -> Option<String> {
    let g = task.grading.as_ref()?;
    let data = generate(g.kind, &g.params);
    let mut out = g.schema.columns.join(",");
    out.push('\n');
    for (i, t) in data.targets.iter().enumerate() {
        let _ = writeln!(out, "{i},{}", fmt_num(*t));
    }
    Some(out)
}

/// Synthetic human scores from `best` to `worst`, denser near the top.
pub fn human_leaderboard(best: f64, worst: f64, n_teams: usize) -> Vec<f64> {
    if n_teams == 1 {
        return vec![best];
    }
    (0..n_teams)
        .map(|i| {
            let u = i as f64 / (n_teams - 1) as f64;
            best + (worst - best) * u.powf(1.5)
        })
        .collect()
}

struct PackEntry {
    id: &'static str,
    kind: GraderKind,
    params: GraderParams,
    columns: [&'static str; 2],
    description: &'static str,
    human_best: f64,
    human_worst: f64,
    optimum: f64,
}

fn pack_entries() -> Vec<PackEntry> {
    vec![
        PackEntry {
            id: "linear-fit",
            kind: GraderKind::LinearFit,
            params: GraderParams {
                seed: 11,
                n_train: 200,
                n_test: 100,
                coef: vec![2.5, -1.0],
                noise: 0.5,
            },
            columns: ["id", "y"],
            description: "Regression. train.csv has columns id,x,y where y depends linearly on x plus Gaussian noise. Predict y for every row of test.csv (columns id,x). Write submission.csv with header id,y. Metric: RMSE against the noise-free target (lower is better).",
            human_best: 0.02,
            human_worst: 4.0,
            optimum: 0.0,
        },
        PackEntry {
            id: "poly-fit",
            kind: GraderKind::PolynomialFit,
            params: GraderParams {
                seed: 12,
                n_train: 200,
                n_test: 100,
                coef: vec![1.0, -0.5, 0.3],
                noise: 0.3,
            },
            columns: ["id", "y"],
            description: "Regression. train.csv has columns id,x,y where y is a smooth nonlinear function of x plus Gaussian noise. Predict y for every row of test.csv (columns id,x). Write submission.csv with header id,y. Metric: mean absolute error against the noise-free target (lower is better).",
            human_best: 0.02,
            human_worst: 2.5,
            optimum: 0.0,
        },
        PackEntry {
            id: "exp-decay",
            kind: GraderKind::ExpDecay,
            params: GraderParams {
                seed: 13,
                n_train: 150,
                n_test: 100,
                coef: vec![3.0, 0.8],
                noise: 0.05,
            },
            columns: ["id", "y"],
            description: "Regression. train.csv has columns id,x,y: a decaying signal measured at times x with small Gaussian noise. Predict y for every row of test.csv (columns id,x). Write submission.csv with header id,y. Metric: RMSE against the noise-free signal (lower is better).",
            human_best: 0.005,
            human_worst: 1.0,
            optimum: 0.0,
        },
        PackEntry {
            id: "quadratic-min",
            kind: GraderKind::QuadraticMin,
            params: GraderParams {
                seed: 14,
                n_train: 0,
                n_test: 4,
                coef: vec![1.5, 2.0, 0.5, 1.0, -1.0, 0.5, 3.0, 4.0, -2.0],
                noise: 0.0,
            },
            columns: ["id", "value"],
            description: "Optimization. problem.csv lists, per coordinate id, a positive weight and a center; offset.csv holds a constant. The objective is offset + sum over coordinates of weight*(value-center)^2. Write submission.csv with header id,value giving one value per coordinate. Metric: objective value (lower is better).",
            human_best: 1.501,
            human_worst: 40.0,
            optimum: 1.5,
        },
        PackEntry {
            id: "separable-points",
            kind: GraderKind::SeparablePoints,
            params: GraderParams {
                seed: 15,
                n_train: 300,
                n_test: 200,
                coef: vec![1.0, -2.0, 0.5],
                noise: 0.2,
            },
            columns: ["id", "label"],
            description: "Binary classification. train.csv has columns id,x1,x2,label with label in {0,1}; the classes are linearly separable. Predict label for every row of test.csv (columns id,x1,x2). Write submission.csv with header id,label. Metric: accuracy (higher is better).",
            human_best: 0.995,
            human_worst: 0.5,
            optimum: 1.0,
        },
        PackEntry {
            id: "centroid-classes",
            kind: GraderKind::NearestCentroid,
            params: GraderParams {
                seed: 16,
                n_train: 300,
                n_test: 200,
                coef: vec![-3.0, -3.0, 3.0, -2.0, 0.0, 3.5],
                noise: 1.2,
            },
            columns: ["id", "label"],
            description: "Multiclass classification. train.csv has columns id,x1,x2,label with label in {0,1,2}; each class is a blob around its own center. Predict label for every row of test.csv (columns id,x1,x2). Write submission.csv with header id,label. Metric: accuracy against the nearest true center (higher is better).",
            human_best: 0.97,
            human_worst: 0.34,
            optimum: 1.0,
        },
    ]
}

/// The synthetic task pack with `n_teams` humans per leaderboard.
pub fn synthetic_task_pack_with(n_teams: usize) -> Vec<TaskSpec> {
    let n_teams = n_teams.max(1);
    pack_entries()
        .into_iter()
        .map(|e| {
            let higher_is_better = e.kind.higher_is_better();
            TaskSpec {
                task_id: e.id.to_string(),
                description: e.description.to_string(),
                higher_is_better,
                time_budget_s: DEFAULT_TIME_BUDGET_S,
                grading: Some(Grading {
                    kind: e.kind,
                    schema: SubmissionSchema {
                        columns: e.columns.iter().map(|c| c.to_string()).collect(),
                        n_rows: e.params.n_test,
                    },
                    params: e.params,
                }),
                leaderboard: Leaderboard::new(
                    human_leaderboard(e.human_best, e.human_worst, n_teams),
                    higher_is_better,
                )
                .expect("finite synthetic leaderboard"),
                optimum: Some(e.optimum),
            }
        })
        .collect()
}

pub fn synthetic_task_pack() -> Vec<TaskSpec> {
    synthetic_task_pack_with(DEFAULT_N_TEAMS)
}

/// Writes one `<task_id>.json` definition per task.
pub fn write_task_definitions(tasks: &[TaskSpec], dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for t in tasks {
        let json = serde_json::to_string_pretty(t).expect("task serializes");
        std::fs::write(dir.join(format!("{}.json", t.task_id)), json)?;
    }
    Ok(())
}

/// Reads every `*.json` task definition in `dir`, sorted by task id.
pub fn load_task_definitions(dir: &Path) -> std::io::Result<Vec<TaskSpec>> {
    let mut tasks = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let text = std::fs::read_to_string(&path)?;
            let task: TaskSpec = serde_json::from_str(&text).map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}: {e}", path.display()))
            })?;
            tasks.push(task);
        }
    }
    tasks.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    Ok(tasks)
}
