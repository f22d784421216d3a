//! Surrogate models trained on twin runs: features, datasets, CART forests,
//! nearest neighbours, hyperparameter search and rule distillation.

pub mod dataset;
pub mod distill;
pub mod features;
pub mod forest;
pub mod knn;
pub mod metrics;
pub mod model;
pub mod search;
pub mod tree;

pub use dataset::{generate_dataset, LabeledSample, ScenarioGrid};
pub use distill::{distill, distill_model, DistillOptions, RuleTree};
pub use features::{featurize, FeatureVector};
pub use metrics::{macro_f1, smape};
pub use model::{
    train_classifier, train_regressor, StarvationModel, StarvationPredictor, ThroughputModel,
    ThroughputPredictor, TrainOptions,
};
pub use search::{ModelKind, SearchConfig, Target, Task};
