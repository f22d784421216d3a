use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::LabeledSample;
use super::features::{FeatureVector, FEATURE_NAMES};
use super::search::{
    grid, halving_search, CvReport, Estimator, ModelKind, SearchConfig, Target, Task,
};
use super::tree::Row;
use crate::error::{invalid, Error, Result};

pub const MODEL_SCHEMA: &str = "lorapack-model v1";

/// Anything that can estimate a GPU's throughput (tokens/s) from features.
pub trait ThroughputPredictor: Sync {
    fn predict_throughput(&self, fv: &FeatureVector) -> f64;
}

/// Anything that can decide whether a GPU configuration starves.
pub trait StarvationPredictor: Sync {
    fn predict_starvation(&self, fv: &FeatureVector) -> bool;
}

impl<T: ThroughputPredictor + ?Sized> ThroughputPredictor for &T {
    fn predict_throughput(&self, fv: &FeatureVector) -> f64 {
        (**self).predict_throughput(fv)
    }
}

impl<T: StarvationPredictor + ?Sized> StarvationPredictor for &T {
    fn predict_starvation(&self, fv: &FeatureVector) -> bool {
        (**self).predict_starvation(fv)
    }
}

/// A trained surrogate with its provenance. The same layout serves both
/// tasks; the `task` field says how to read the estimator output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub schema: String,
    pub task: Task,
    pub kind: ModelKind,
    pub features: Vec<String>,
    pub seed: u64,
    pub profile_hash: String,
    pub cv: CvReport,
    pub warnings: Vec<String>,
    pub target: Target,
    pub estimator: Estimator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ThroughputModel(pub SurrogateModel);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StarvationModel(pub SurrogateModel);

impl SurrogateModel {
    #[inline]
    pub fn raw(&self, fv: &FeatureVector) -> f64 {
        self.predict_row(&fv.to_array())
    }

    #[inline]
    pub fn predict_row(&self, x: &Row) -> f64 {
        self.target.inverse(self.estimator.predict(x))
    }

    pub fn check(&self, task: Task) -> Result<()> {
        if self.schema != MODEL_SCHEMA {
            return invalid(format!("unsupported model schema {:?}", self.schema));
        }
        if self.task != task {
            return invalid(format!(
                "model was trained for {:?}, not {:?}",
                self.task, task
            ));
        }
        if self.features.iter().map(String::as_str).ne(FEATURE_NAMES) {
            return invalid(format!(
                "model features {:?} do not match {:?}",
                self.features, FEATURE_NAMES
            ));
        }
        Ok(())
    }

    fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    fn load(path: &Path, task: Task) -> Result<Self> {
        let m: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        m.check(task)?;
        Ok(m)
    }
}

fn check_features(fv: &FeatureVector) -> Result<()> {
    if fv.to_array().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        invalid(format!("feature vector has non-finite entries: {fv:?}"))
    }
}

impl ThroughputModel {
    pub fn predict(&self, fv: &FeatureVector) -> f64 {
        self.0.raw(fv).max(0.0)
    }

    pub fn try_predict(&self, fv: &FeatureVector) -> Result<f64> {
        check_features(fv)?;
        Ok(self.predict(fv))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.0.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        SurrogateModel::load(path, Task::Throughput).map(Self)
    }
}

impl StarvationModel {
    pub fn probability(&self, fv: &FeatureVector) -> f64 {
        self.0.raw(fv)
    }

    pub fn predict(&self, fv: &FeatureVector) -> bool {
        self.probability(fv) > 0.5
    }

    pub fn try_predict(&self, fv: &FeatureVector) -> Result<bool> {
        check_features(fv)?;
        Ok(self.predict(fv))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.0.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        SurrogateModel::load(path, Task::Starvation).map(Self)
    }
}

impl ThroughputPredictor for ThroughputModel {
    fn predict_throughput(&self, fv: &FeatureVector) -> f64 {
        self.predict(fv)
    }
}

impl StarvationPredictor for StarvationModel {
    fn predict_starvation(&self, fv: &FeatureVector) -> bool {
        self.predict(fv)
    }
}

/// Rows usable for training: infeasible configurations carry no throughput
/// signal and are screened by the memory model instead.
pub fn training_rows(samples: &[LabeledSample], task: Task) -> (Vec<Row>, Vec<f64>) {
    samples
        .iter()
        .filter(|s| !s.infeasible)
        .map(|s| {
            let y = match task {
                Task::Throughput => s.throughput,
                Task::Starvation => f64::from(u8::from(s.starved)),
            };
            (s.features.to_array(), y)
        })
        .unzip()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub kind: ModelKind,
    pub search: SearchConfig,
    pub profile_hash: String,
}

fn train(samples: &[LabeledSample], task: Task, opts: &TrainOptions) -> Result<SurrogateModel> {
    let (x, y) = training_rows(samples, task);
    if x.len() < 50 {
        return Err(Error::FitFailure(format!(
            "need at least 50 feasible samples, got {}",
            x.len()
        )));
    }
    let mut warnings = Vec::new();
    let mut search = opts.search.clone();
    if task == Task::Starvation {
        search.target = Target::Identity;
    }
    let (estimator, cv) = if y.iter().all(|&v| v == y[0]) {
        let msg = format!("target is constant ({}); using a constant predictor", y[0]);
        log::warn!("{msg}");
        warnings.push(msg);
        let cv = CvReport {
            metric: String::new(),
            best: None,
            best_score: f64::NAN,
            rounds: Vec::new(),
        };
        search.target = Target::Identity;
        (Estimator::Constant(y[0]), cv)
    } else {
        let (best, cv) = halving_search(grid(opts.kind, task), &x, &y, task, &search)?;
        let fit_y: Vec<f64> = y.iter().map(|&v| search.target.forward(v)).collect();
        (Estimator::fit(&best, &x, &fit_y, search.seed), cv)
    };
    Ok(SurrogateModel {
        schema: MODEL_SCHEMA.into(),
        task,
        kind: opts.kind,
        features: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        seed: opts.search.seed,
        profile_hash: opts.profile_hash.clone(),
        cv,
        warnings,
        target: search.target,
        estimator,
    })
}

pub fn train_regressor(samples: &[LabeledSample], opts: &TrainOptions) -> Result<ThroughputModel> {
    train(samples, Task::Throughput, opts).map(ThroughputModel)
}

pub fn train_classifier(samples: &[LabeledSample], opts: &TrainOptions) -> Result<StarvationModel> {
    train(samples, Task::Starvation, opts).map(StarvationModel)
}
