//! Successive-halving grid search with k-fold cross-validation.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forest::{ForestParams, RandomForest};
use super::knn::Knn;
use super::metrics::{macro_f1, smape};
use super::tree::{Criterion, MaxFeatures, Row, TreeParams};
use crate::error::{invalid, Result};
use crate::rng::{derive_seed, label_hash, stream_rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Throughput,
    Starvation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Knn,
    RandomForest,
}

impl std::str::FromStr for ModelKind {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "knn" => Ok(Self::Knn),
            "rf" | "random_forest" | "random-forest" => Ok(Self::RandomForest),
            _ => invalid(format!("unknown model kind {s:?} (knn, rf)")),
        }
    }
}

/// Transform applied to regression targets before fitting; predictions are
/// mapped back before scoring or returning.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    #[default]
    Identity,
    Log1p,
}

impl Target {
    pub fn forward(self, y: f64) -> f64 {
        match self {
            Self::Identity => y,
            Self::Log1p => y.max(0.0).ln_1p(),
        }
    }

    pub fn inverse(self, v: f64) -> f64 {
        match self {
            Self::Identity => v,
            Self::Log1p => v.exp_m1(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Hyper {
    Knn { p: u8, leaf_size: usize },
    RandomForest(ForestParams),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "snake_case")]
pub enum Estimator {
    Constant(f64),
    Knn(Knn),
    RandomForest(RandomForest),
}

impl Estimator {
    pub fn fit(h: &Hyper, x: &[Row], y: &[f64], seed: u64) -> Self {
        match h {
            Hyper::Knn { p, leaf_size } => Self::Knn(Knn::fit(x, y, *p, *leaf_size)),
            Hyper::RandomForest(fp) => Self::RandomForest(RandomForest::fit(x, y, fp, seed)),
        }
    }

    #[inline]
    pub fn predict(&self, x: &Row) -> f64 {
        match self {
            Self::Constant(c) => *c,
            Self::Knn(k) => k.predict(x),
            Self::RandomForest(f) => f.predict(x),
        }
    }
}

/// The hyperparameter grid for one model family and task.
pub fn grid(kind: ModelKind, task: Task) -> Vec<Hyper> {
    match kind {
        ModelKind::Knn => [1u8, 2]
            .iter()
            .map(|&p| Hyper::Knn { p, leaf_size: 8 })
            .collect(),
        ModelKind::RandomForest => {
            let criteria: &[Criterion] = match task {
                Task::Throughput => &[
                    Criterion::SquaredError,
                    Criterion::AbsoluteError,
                    Criterion::FriedmanMse,
                    Criterion::Poisson,
                ],
                Task::Starvation => &[Criterion::Gini, Criterion::Entropy, Criterion::LogLoss],
            };
            let mut out = Vec::new();
            for &n_estimators in &[32, 128, 256] {
                for &max_depth in &[None, Some(5), Some(10), Some(20)] {
                    for &min_samples_split in &[2, 5, 10, 20] {
                        for &criterion in criteria {
                            for &min_samples_leaf in &[1, 2, 5, 10, 32, 128] {
                                for &max_features in
                                    &[MaxFeatures::All, MaxFeatures::Sqrt, MaxFeatures::Log2]
                                {
                                    out.push(Hyper::RandomForest(ForestParams {
                                        n_estimators,
                                        bootstrap: true,
                                        tree: TreeParams {
                                            criterion,
                                            max_depth,
                                            min_samples_split,
                                            min_samples_leaf,
                                            max_features,
                                            max_leaves: None,
                                        },
                                    }));
                                }
                            }
                        }
                    }
                }
            }
            out
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Upper bound on first-round candidates; larger grids are subsampled.
    pub budget: usize,
    pub folds: usize,
    pub seed: u64,
    #[serde(default)]
    pub target: Target,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            budget: 81,
            folds: 5,
            seed: 0,
            target: Target::Identity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub data_fraction: f64,
    pub candidates: usize,
    pub best_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    /// `smape` (lower is better) or `macro_f1` (higher is better).
    pub metric: String,
    pub best: Option<Hyper>,
    pub best_score: f64,
    pub rounds: Vec<RoundReport>,
}

/// Smallest number of rows a halving round is scored on.
const MIN_ROUND_ROWS: usize = 150;

pub(crate) fn score(task: Task, pred: &[f64], actual: &[f64]) -> Result<f64> {
    match task {
        Task::Throughput => smape(pred, actual),
        Task::Starvation => {
            let p: Vec<bool> = pred.iter().map(|&v| v > 0.5).collect();
            let a: Vec<bool> = actual.iter().map(|&v| v > 0.5).collect();
            macro_f1(&p, &a)
        }
    }
}

fn better(task: Task, a: f64, b: f64) -> bool {
    match task {
        Task::Throughput => a < b,
        Task::Starvation => a > b,
    }
}

fn cv_score(
    h: &Hyper,
    x: &[Row],
    y: &[f64],
    rows: &[usize],
    task: Task,
    cfg: &SearchConfig,
    tag: u64,
) -> Result<f64> {
    let k = cfg.folds.max(2).min(rows.len());
    let fold_scores: Vec<f64> = (0..k)
        .into_par_iter()
        .map(|f| {
            let (mut tx, mut ty, mut vx, mut vy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (j, &i) in rows.iter().enumerate() {
                if j % k == f {
                    vx.push(x[i]);
                    vy.push(y[i]);
                } else {
                    tx.push(x[i]);
                    ty.push(cfg.target.forward(y[i]));
                }
            }
            let est = Estimator::fit(h, &tx, &ty, derive_seed(cfg.seed, tag * 64 + f as u64));
            let pred: Vec<f64> = vx
                .iter()
                .map(|r| cfg.target.inverse(est.predict(r)))
                .collect();
            score(task, &pred, &vy)
        })
        .collect::<Result<_>>()?;
    Ok(fold_scores.iter().sum::<f64>() / k as f64)
}

/// Successive halving with factor 3: every round keeps the best third of
/// the candidates and triples the rows they are scored on, ending on the
/// full (shuffled) data once at most three candidates remain.
pub fn halving_search(
    candidates: Vec<Hyper>,
    x: &[Row],
    y: &[f64],
    task: Task,
    cfg: &SearchConfig,
) -> Result<(Hyper, CvReport)> {
    if candidates.is_empty() || x.len() != y.len() || x.len() < cfg.folds.max(2) {
        return invalid("search needs candidates and at least one row per fold");
    }
    let mut rng = stream_rng(cfg.seed, label_hash("search"));
    let mut pool = candidates;
    if pool.len() > cfg.budget.max(1) {
        pool.shuffle(&mut rng);
        pool.truncate(cfg.budget.max(1));
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.shuffle(&mut rng);

    let mut sizes = vec![pool.len()];
    while *sizes.last().expect("nonempty") > 3 {
        sizes.push(sizes.last().expect("nonempty").div_ceil(3));
    }
    let last = sizes.len() - 1;
    let min_rows = (MIN_ROUND_ROWS.max(cfg.folds * 2)).min(x.len());

    let mut pool: Vec<(usize, Hyper)> = pool.into_iter().enumerate().collect();
    let mut rounds = Vec::new();
    let mut scored = Vec::new();
    for r in 0..=last {
        let frac = 3f64.powi(r as i32 - last as i32);
        let n = ((x.len() as f64 * frac).ceil() as usize).clamp(min_rows, x.len());
        let rows = &order[..n];
        scored = pool
            .par_iter()
            .map(|(id, h)| {
                Ok((
                    *id,
                    h.clone(),
                    cv_score(h, x, y, rows, task, cfg, (r * 1000 + id) as u64)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        // order by score, then by candidate id so ties resolve the same way every run
        scored.sort_by(|a, b| {
            if better(task, a.2, b.2) {
                std::cmp::Ordering::Less
            } else if better(task, b.2, a.2) {
                std::cmp::Ordering::Greater
            } else {
                a.0.cmp(&b.0)
            }
        });
        rounds.push(RoundReport {
            data_fraction: n as f64 / x.len() as f64,
            candidates: scored.len(),
            best_score: scored[0].2,
        });
        if r < last {
            pool = scored
                .iter()
                .take(sizes[r + 1])
                .map(|(i, h, _)| (*i, h.clone()))
                .collect();
        }
    }
    let (_, best, best_score) = scored.swap_remove(0);
    let report = CvReport {
        metric: match task {
            Task::Throughput => "smape".into(),
            Task::Starvation => "macro_f1".into(),
        },
        best: Some(best.clone()),
        best_score,
        rounds,
    };
    Ok((best, report))
}
