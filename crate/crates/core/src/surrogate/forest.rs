use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{Row, Tree, TreeParams};
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_estimators: usize,
    pub bootstrap: bool,
    pub tree: TreeParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub params: ForestParams,
    pub trees: Vec<Tree>,
}

impl RandomForest {
    /// Trees are built in parallel; each draws from its own seeded stream,
    /// so the result does not depend on the thread count.
    pub fn fit(x: &[Row], y: &[f64], params: &ForestParams, seed: u64) -> Self {
        let n = x.len();
        let trees = (0..params.n_estimators)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, t as u64));
                let idx: Vec<usize> = if params.bootstrap {
                    (0..n).map(|_| rng.random_range(0..n)).collect()
                } else {
                    (0..n).collect()
                };
                Tree::fit(x, y, idx, &params.tree, &mut rng)
            })
            .collect();
        Self {
            params: params.clone(),
            trees,
        }
    }

    /// Mean of the tree outputs (class-1 probability for classifiers).
    pub fn predict(&self, x: &Row) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }
}
