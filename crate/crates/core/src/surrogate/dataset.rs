use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::{featurize, FeatureVector};
use crate::error::{invalid, Error, Result};
use crate::perf_models::CalibrationProfile;
use crate::rng::{derive_seed, label_hash, stream_rng};
use crate::twin::{run_simulation_with, starvation_label, DeviceConfig, SimOptions};
use crate::workload::{synthesize_trace, AdapterSpec, LengthSampler, LengthSource, WorkloadSpec};

pub const DATASET_SCHEMA: &str = "lorapack-dataset v1";

pub const DEFAULT_SIZES: [u32; 3] = [8, 16, 32];
pub const DEFAULT_RATES: [f64; 10] = [
    3.2, 1.6, 0.8, 0.4, 0.1, 0.05, 0.025, 0.0125, 0.00625, 0.003125,
];

/// Workload families are all `combo`-element multisets of sizes paired with
/// `combo`-element multisets of rates; adapter `i` takes the `i % combo`-th
/// (size, rate) pair. Each family is crossed with every adapter count and
/// A_max value, then optionally subsampled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioGrid {
    pub sizes: Vec<u32>,
    pub rates: Vec<f64>,
    pub combo: usize,
    pub adapter_counts: Vec<usize>,
    pub a_max_values: Vec<usize>,
    /// Simulated seconds per scenario.
    pub duration: f64,
    /// Low-rate scenarios run longer so at least this many arrivals are
    /// expected, capped at `max_duration`.
    pub min_expected_requests: f64,
    pub max_duration: f64,
    pub input_len_mean: f64,
    pub output_len_mean: f64,
    /// Keep a seeded random subset of this many samples.
    pub max_samples: Option<usize>,
}

impl Default for ScenarioGrid {
    fn default() -> Self {
        Self {
            sizes: DEFAULT_SIZES.to_vec(),
            rates: DEFAULT_RATES.to_vec(),
            combo: 3,
            adapter_counts: vec![8, 16, 32, 64, 96, 128, 160, 192, 256, 320, 384],
            a_max_values: vec![8, 16, 32, 64, 96, 128, 160, 192, 256, 320, 384],
            duration: 300.0,
            min_expected_requests: 0.0,
            max_duration: 300.0,
            input_len_mean: 250.0,
            output_len_mean: 231.0,
            max_samples: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub sizes: Vec<u32>,
    pub rates: Vec<f64>,
    pub n_adapters: usize,
    pub a_max: usize,
}

impl Scenario {
    /// Identity of the workload, shared by every A_max of the same family and count.
    pub fn workload_key(&self) -> String {
        let s: Vec<String> = self.sizes.iter().map(u32::to_string).collect();
        let r: Vec<String> = self.rates.iter().map(f64::to_string).collect();
        format!("s{}_r{}_n{}", s.join("/"), r.join("/"), self.n_adapters)
    }

    pub fn key(&self) -> String {
        format!("{}_a{}", self.workload_key(), self.a_max)
    }

    pub fn adapters(&self) -> Vec<AdapterSpec> {
        let k = self.sizes.len();
        (0..self.n_adapters)
            .map(|i| AdapterSpec::new(format!("a{i}"), self.sizes[i % k], self.rates[i % k]))
            .collect()
    }
}

fn multisets<T: Copy>(items: &[T], k: usize) -> Vec<Vec<T>> {
    fn go<T: Copy>(items: &[T], k: usize, start: usize, cur: &mut Vec<T>, out: &mut Vec<Vec<T>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..items.len() {
            cur.push(items[i]);
            go(items, k, i, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(items, k, 0, &mut Vec::with_capacity(k), &mut out);
    out
}

impl ScenarioGrid {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty()
            || self.rates.is_empty()
            || self.adapter_counts.is_empty()
            || self.a_max_values.is_empty()
        {
            return invalid("scenario grid axes must be nonempty");
        }
        if self.combo == 0 || self.adapter_counts.contains(&0) || self.a_max_values.contains(&0) {
            return invalid("combo, adapter counts and A_max values must be positive");
        }
        if self.rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || self.sizes.contains(&0) {
            return invalid("rates must be finite and nonnegative, sizes positive");
        }
        if !(self.duration > 0.0 && self.max_duration >= self.duration) {
            return invalid("need 0 < duration <= max_duration");
        }
        Ok(())
    }

    /// All scenarios in canonical order, subsampled when `max_samples` is set.
    pub fn scenarios(&self, seed: u64) -> Result<Vec<Scenario>> {
        self.validate()?;
        let mut out = Vec::new();
        for sizes in multisets(&self.sizes, self.combo) {
            for rates in multisets(&self.rates, self.combo) {
                for &n in &self.adapter_counts {
                    for &a in &self.a_max_values {
                        out.push(Scenario {
                            sizes: sizes.clone(),
                            rates: rates.clone(),
                            n_adapters: n,
                            a_max: a,
                        });
                    }
                }
            }
        }
        if let Some(m) = self.max_samples {
            if m < out.len() {
                let mut pick: Vec<usize> = (0..out.len()).collect();
                pick.shuffle(&mut stream_rng(seed, label_hash("grid subsample")));
                pick.truncate(m);
                pick.sort_unstable();
                out = pick.into_iter().map(|i| out[i].clone()).collect();
            }
        }
        Ok(out)
    }

    pub fn duration_for(&self, rate_sum: f64) -> f64 {
        if self.min_expected_requests <= 0.0 {
            return self.duration;
        }
        let want = self.min_expected_requests / rate_sum;
        if want.is_finite() {
            want.clamp(self.duration, self.max_duration)
        } else {
            self.max_duration
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub key: String,
    pub seed: u64,
    pub duration: f64,
    pub features: FeatureVector,
    pub throughput: f64,
    pub starved: bool,
    /// The (A_max, S_max) pair has no KV capacity under the profile.
    pub infeasible: bool,
}

/// Run the twin for every scenario of `grid` not already in `existing`.
/// Results come back in canonical grid order; reruns with the same seed
/// reproduce the same samples.
pub fn generate_dataset(
    grid: &ScenarioGrid,
    profile: &CalibrationProfile,
    seed: u64,
    existing: &[LabeledSample],
) -> Result<Vec<LabeledSample>> {
    let scenarios = grid.scenarios(seed)?;
    if scenarios.is_empty() {
        return invalid("scenario grid is empty");
    }
    let done: BTreeMap<&str, &LabeledSample> =
        existing.iter().map(|s| (s.key.as_str(), s)).collect();
    scenarios
        .par_iter()
        .map(|sc| match done.get(sc.key().as_str()) {
            Some(s) => Ok((*s).clone()),
            None => simulate_scenario(grid, sc, profile, seed),
        })
        .collect()
}

/// Label one scenario with a twin run.
pub fn simulate_scenario(
    grid: &ScenarioGrid,
    sc: &Scenario,
    profile: &CalibrationProfile,
    seed: u64,
) -> Result<LabeledSample> {
    let adapters = sc.adapters();
    let features = featurize(&adapters, sc.a_max)?;
    let trace_seed = derive_seed(seed, label_hash(&sc.workload_key()));
    let duration = grid.duration_for(features.rate_sum);
    let s_max = adapters.iter().map(|a| a.size).max().unwrap_or(1);
    let mut sample = LabeledSample {
        key: sc.key(),
        seed: trace_seed,
        duration,
        features,
        throughput: 0.0,
        starved: true,
        infeasible: true,
    };
    if !profile.is_feasible(sc.a_max, s_max) {
        return Ok(sample);
    }
    let workload = WorkloadSpec {
        adapters,
        duration,
        input_len_mean: grid.input_len_mean,
        output_len_mean: grid.output_len_mean,
        length_source: LengthSource::MeanOnly,
    };
    let trace = synthesize_trace(
        &workload,
        trace_seed,
        &LengthSampler::LogNormal { sigma: 0.0 },
    )?;
    let options = SimOptions {
        record_requests: false,
        ..SimOptions::default()
    };
    let m = run_simulation_with(
        &trace,
        DeviceConfig::new(sc.a_max, s_max),
        profile,
        duration,
        options,
    )?;
    sample.throughput = m.throughput;
    sample.starved = starvation_label(&m);
    sample.infeasible = false;
    Ok(sample)
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    key: String,
    seed: u64,
    duration: f64,
    n_adapters: f64,
    rate_sum: f64,
    rate_std: f64,
    size_max: f64,
    size_mean: f64,
    size_std: f64,
    a_max: f64,
    throughput: f64,
    starved: bool,
    infeasible: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema: String,
    pub seed: u64,
    pub profile_hash: String,
}

/// Samples as CSV, preceded by one `# {header json}` line.
pub fn write_dataset(
    header: &DatasetHeader,
    samples: &[LabeledSample],
    mut w: impl Write,
) -> Result<()> {
    writeln!(w, "# {}", serde_json::to_string(header)?)?;
    let mut csv = csv::Writer::from_writer(w);
    for s in samples {
        let f = &s.features;
        csv.serialize(Row {
            key: s.key.clone(),
            seed: s.seed,
            duration: s.duration,
            n_adapters: f.n_adapters,
            rate_sum: f.rate_sum,
            rate_std: f.rate_std,
            size_max: f.size_max,
            size_mean: f.size_mean,
            size_std: f.size_std,
            a_max: f.a_max,
            throughput: s.throughput,
            starved: s.starved,
            infeasible: s.infeasible,
        })
        .map_err(|e| Error::Parse(e.to_string()))?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_dataset(mut r: impl BufRead) -> Result<(DatasetHeader, Vec<LabeledSample>)> {
    let mut first = String::new();
    r.read_line(&mut first)?;
    let header: DatasetHeader = first
        .strip_prefix("# ")
        .ok_or_else(|| Error::Parse("dataset file lacks a header line".into()))
        .and_then(|j| serde_json::from_str(j.trim()).map_err(Error::from))?;
    if header.schema != DATASET_SCHEMA {
        return Err(Error::Parse(format!(
            "unsupported dataset schema {:?}",
            header.schema
        )));
    }
    let mut samples = Vec::new();
    for row in csv::Reader::from_reader(r).deserialize::<Row>() {
        let row = row.map_err(|e| Error::Parse(e.to_string()))?;
        samples.push(LabeledSample {
            key: row.key,
            seed: row.seed,
            duration: row.duration,
            features: FeatureVector {
                n_adapters: row.n_adapters,
                rate_sum: row.rate_sum,
                rate_std: row.rate_std,
                size_max: row.size_max,
                size_mean: row.size_mean,
                size_std: row.size_std,
                a_max: row.a_max,
            },
            throughput: row.throughput,
            starved: row.starved,
            infeasible: row.infeasible,
        });
    }
    Ok((header, samples))
}

pub fn save_dataset(header: &DatasetHeader, samples: &[LabeledSample], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(header, samples, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<(DatasetHeader, Vec<LabeledSample>)> {
    read_dataset(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid() -> ScenarioGrid {
        ScenarioGrid {
            sizes: vec![8],
            rates: vec![0.4],
            combo: 1,
            adapter_counts: vec![8],
            a_max_values: vec![8, 16, 32],
            duration: 30.0,
            max_duration: 30.0,
            ..ScenarioGrid::default()
        }
    }

    #[test]
    fn one_scenario_three_a_max_values() {
        let p = CalibrationProfile::synthetic_fixture();
        let d = generate_dataset(&small_grid(), &p, 1, &[]).unwrap();
        assert_eq!(d.len(), 3);
        assert!(d.iter().all(|s| s.throughput > 0.0 && !s.infeasible));
        // same workload seed across A_max values
        assert!(d.iter().all(|s| s.seed == d[0].seed));
    }

    #[test]
    fn zero_rate_is_not_starved() {
        let p = CalibrationProfile::synthetic_fixture();
        let g = ScenarioGrid {
            rates: vec![0.0],
            a_max_values: vec![8],
            ..small_grid()
        };
        let d = generate_dataset(&g, &p, 1, &[]).unwrap();
        assert_eq!((d[0].throughput, d[0].starved), (0.0, false));
    }

    #[test]
    fn infeasible_points_are_flagged() {
        let p = CalibrationProfile::synthetic_fixture();
        let g = ScenarioGrid {
            sizes: vec![32],
            a_max_values: vec![384],
            ..small_grid()
        };
        let d = generate_dataset(&g, &p, 1, &[]).unwrap();
        assert!(d[0].infeasible && d[0].starved && d[0].throughput == 0.0);
    }

    #[test]
    fn resume_reuses_and_matches() {
        let p = CalibrationProfile::synthetic_fixture();
        let g = small_grid();
        let full = generate_dataset(&g, &p, 4, &[]).unwrap();
        let resumed = generate_dataset(&g, &p, 4, &full[..1]).unwrap();
        assert_eq!(full, resumed);
    }

    #[test]
    fn multiset_counts_and_subsample() {
        assert_eq!(multisets(&DEFAULT_RATES, 3).len(), 220);
        assert_eq!(multisets(&DEFAULT_SIZES, 3).len(), 10);
        let g = ScenarioGrid {
            max_samples: Some(50),
            ..ScenarioGrid::default()
        };
        let a = g.scenarios(3).unwrap();
        assert_eq!(a.len(), 50);
        assert_eq!(a, g.scenarios(3).unwrap());
    }

    #[test]
    fn csv_round_trip() {
        let p = CalibrationProfile::synthetic_fixture();
        let d = generate_dataset(&small_grid(), &p, 2, &[]).unwrap();
        let h = DatasetHeader {
            schema: DATASET_SCHEMA.into(),
            seed: 2,
            profile_hash: p.hash(),
        };
        let mut buf = Vec::new();
        write_dataset(&h, &d, &mut buf).unwrap();
        let (h2, d2) = read_dataset(buf.as_slice()).unwrap();
        assert_eq!((h2, d2), (h, d));
    }
}
