use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_simulation_with, starvation_label, DeviceConfig, SimOptions};
use crate::error::{invalid, Error, Result};
use crate::perf_models::CalibrationProfile;
use crate::rng::derive_seed;
use crate::workload::{synthesize_trace, AdapterSpec, LengthSampler, LengthSource, WorkloadSpec};

/// Homogeneous workload used for a packing sweep: `n` identical adapters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadTemplate {
    pub rate: f64,
    pub size: u32,
    pub duration: f64,
    pub input_len_mean: f64,
    pub output_len_mean: f64,
}

impl WorkloadTemplate {
    pub fn workload(&self, n: usize) -> WorkloadSpec {
        WorkloadSpec {
            adapters: (0..n)
                .map(|i| AdapterSpec::new(format!("a{i}"), self.size, self.rate))
                .collect(),
            duration: self.duration,
            input_len_mean: self.input_len_mean,
            output_len_mean: self.output_len_mean,
            length_source: LengthSource::MeanOnly,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DeviceSweep {
    /// Every count is simulated under each listed configuration.
    Fixed(Vec<DeviceConfig>),
    /// A_max follows the adapter count, so every adapter stays resident.
    MatchCount { s_max: u32 },
}

impl DeviceSweep {
    fn configs(&self, n: usize) -> Vec<DeviceConfig> {
        match self {
            Self::Fixed(c) => c.clone(),
            Self::MatchCount { s_max } => vec![DeviceConfig::new(n, *s_max)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n_adapters: usize,
    pub device: DeviceConfig,
    pub feasible: bool,
    pub throughput: f64,
    pub incoming_token_rate: f64,
    pub starved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    /// Index into `points` of the best non-starved point.
    pub max_pack: usize,
}

impl SweepResult {
    pub fn max_pack_point(&self) -> &SweepPoint {
        &self.points[self.max_pack]
    }
}

/// Simulate every (count, config) pair and locate the highest-throughput
/// point that is not starved. Infeasible configurations are reported but
/// never selected.
pub fn sweep_max_pack(
    template: &WorkloadTemplate,
    counts: &[usize],
    devices: &DeviceSweep,
    profile: &CalibrationProfile,
    seed: u64,
) -> Result<SweepResult> {
    if counts.is_empty() || matches!(devices, DeviceSweep::Fixed(c) if c.is_empty()) {
        return invalid("sweep grids must be nonempty");
    }
    let jobs: Vec<(usize, DeviceConfig)> = counts
        .iter()
        .flat_map(|&n| devices.configs(n).into_iter().map(move |d| (n, d)))
        .collect();
    let options = SimOptions {
        record_requests: false,
        ..SimOptions::default()
    };
    let points = jobs
        .par_iter()
        .map(|&(n, device)| {
            if !profile.is_feasible(device.a_max, device.s_max) {
                return Ok(SweepPoint {
                    n_adapters: n,
                    device,
                    feasible: false,
                    throughput: 0.0,
                    incoming_token_rate: 0.0,
                    starved: true,
                });
            }
            let trace = synthesize_trace(
                &template.workload(n),
                derive_seed(seed, n as u64),
                &LengthSampler::LogNormal { sigma: 0.0 },
            )?;
            let m =
                run_simulation_with(&trace, device, profile, template.duration, options.clone())?;
            Ok(SweepPoint {
                n_adapters: n,
                device,
                feasible: true,
                throughput: m.throughput,
                incoming_token_rate: m.incoming_token_rate,
                starved: starvation_label(&m),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_pack = points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.feasible && !p.starved)
        .max_by(|(i, x), (j, y)| x.throughput.total_cmp(&y.throughput).then(j.cmp(i)))
        .map(|(i, _)| i)
        .ok_or(Error::NoFeasiblePoint)?;
    Ok(SweepResult { points, max_pack })
}

/// Peak token rate the backbone sustains: one resident rank-8 adapter is
/// driven at doubling request rates until it starves, and the best
/// throughput seen is returned.
pub fn backbone_throughput(
    profile: &CalibrationProfile,
    input_len_mean: f64,
    output_len_mean: f64,
    seed: u64,
) -> Result<f64> {
    let options = SimOptions {
        record_requests: false,
        ..SimOptions::default()
    };
    let mut best: f64 = 0.0;
    let mut rate = 1.0;
    while rate <= 4096.0 {
        let template = WorkloadTemplate {
            rate,
            size: 8,
            duration: 120.0,
            input_len_mean,
            output_len_mean,
        };
        let trace = synthesize_trace(
            &template.workload(1),
            derive_seed(seed, rate as u64),
            &LengthSampler::LogNormal { sigma: 0.0 },
        )?;
        let m = run_simulation_with(
            &trace,
            DeviceConfig::new(1, 8),
            profile,
            template.duration,
            options.clone(),
        )?;
        best = best.max(m.throughput);
        if starvation_label(&m) {
            break;
        }
        rate *= 2.0;
    }
    Ok(best)
}
