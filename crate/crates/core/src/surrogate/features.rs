use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::workload::AdapterSpec;

pub const N_FEATURES: usize = 7;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "n_adapters",
    "rate_sum",
    "rate_std",
    "size_max",
    "size_mean",
    "size_std",
    "a_max",
];

/// Aggregate description of one GPU's workload and configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub n_adapters: f64,
    pub rate_sum: f64,
    pub rate_std: f64,
    pub size_max: f64,
    pub size_mean: f64,
    pub size_std: f64,
    pub a_max: f64,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; N_FEATURES] {
        [
            self.n_adapters,
            self.rate_sum,
            self.rate_std,
            self.size_max,
            self.size_mean,
            self.size_std,
            self.a_max,
        ]
    }

    pub fn from_array(a: [f64; N_FEATURES]) -> Self {
        Self {
            n_adapters: a[0],
            rate_sum: a[1],
            rate_std: a[2],
            size_max: a[3],
            size_mean: a[4],
            size_std: a[5],
            a_max: a[6],
        }
    }
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64, f64) {
    let (mut n, mut sum) = (0.0, 0.0);
    for x in xs.clone() {
        n += 1.0;
        sum += x;
    }
    let mean = sum / n;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (sum, mean, var.sqrt())
}

/// Order-independent summary statistics. Standard deviations use the
/// population convention.
pub fn featurize(adapters: &[AdapterSpec], a_max: usize) -> Result<FeatureVector> {
    if adapters.is_empty() {
        return invalid("cannot featurize an empty adapter set");
    }
    // sort so the float sums do not depend on input order
    let mut rates: Vec<f64> = adapters.iter().map(|a| a.rate).collect();
    rates.sort_by(f64::total_cmp);
    let mut sizes: Vec<f64> = adapters.iter().map(|a| f64::from(a.size)).collect();
    sizes.sort_by(f64::total_cmp);
    let (rate_sum, _, rate_std) = mean_std(rates.iter().copied());
    let (_, size_mean, size_std) = mean_std(sizes.iter().copied());
    Ok(FeatureVector {
        n_adapters: adapters.len() as f64,
        rate_sum,
        rate_std,
        size_max: *sizes.last().expect("nonempty"),
        size_mean,
        size_std,
        a_max: a_max as f64,
    })
}
