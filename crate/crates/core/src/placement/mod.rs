//! Adapter-to-GPU placement: the testing-point greedy packer and the
//! baseline strategies it is compared against.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::perf_models::CalibrationProfile;
use crate::rng::{derive_seed, label_hash, stream_rng};
use crate::surrogate::{featurize, ScenarioGrid, StarvationPredictor, ThroughputPredictor};
use crate::twin::{run_simulation_with, DeviceConfig, SimOptions};
use crate::workload::{
    synthesize_trace, AdapterId, AdapterSpec, LengthSampler, LengthSource, WorkloadSpec,
};


pub const PLAN_SCHEMA: &str = "lorapack-plan v1";

pub const DEFAULT_TESTING_POINTS: [usize; 11] = [8, 16, 32, 64, 96, 128, 160, 192, 256, 320, 384];

/// KV capacity left after reserving `a_max` slots of rank `s_max`; a value
/// at or below zero marks the configuration as unusable.
pub trait MemoryModel: Sync {
    fn t_max(&self, a_max: usize, s_max: u32) -> f64;

    fn fits(&self, a_max: usize, s_max: u32) -> bool {
        self.t_max(a_max, s_max) > 0.0
    }
}

impl MemoryModel for CalibrationProfile {
    fn t_max(&self, a_max: usize, s_max: u32) -> f64 {
        match self.mem_max(a_max, s_max) {
            Ok(t) => t,
            Err(Error::MemoryExceeded { t_max, .. }) => t_max,
            Err(_) => f64::NEG_INFINITY,
        }
    }
}

impl<T: MemoryModel + ?Sized> MemoryModel for &T {
    fn t_max(&self, a_max: usize, s_max: u32) -> f64 {
        (**self).t_max(a_max, s_max)
    }
}

/// Memory model that accepts every configuration.
#[derive(Clone, Copy, Debug, Default)]
pub struct Unbounded;

impl MemoryModel for Unbounded {
    fn t_max(&self, _a_max: usize, _s_max: u32) -> f64 {
        f64::INFINITY
    }
}

pub struct PlacementProblem<'a> {
    pub adapters: Vec<AdapterSpec>,
    pub n_gpus: usize,
    pub throughput: &'a dyn ThroughputPredictor,
    pub starvation: &'a dyn StarvationPredictor,
    pub memory: &'a dyn MemoryModel,
    pub testing_points: Vec<usize>,
    pub input_len_mean: f64,
    pub output_len_mean: f64,
}

impl<'a> PlacementProblem<'a> {
    pub fn new(
        adapters: Vec<AdapterSpec>,
        n_gpus: usize,
        throughput: &'a dyn ThroughputPredictor,
        starvation: &'a dyn StarvationPredictor,
        memory: &'a dyn MemoryModel,
    ) -> Result<Self> {
        let p = Self {
            adapters,
            n_gpus,
            throughput,
            starvation,
            memory,
            testing_points: DEFAULT_TESTING_POINTS.to_vec(),
            input_len_mean: 250.0,
            output_len_mean: 231.0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_testing_points(mut self, points: Vec<usize>) -> Result<Self> {
        self.testing_points = points;
        self.validate()?;
        Ok(self)
    }

    pub fn with_lengths(mut self, input_len_mean: f64, output_len_mean: f64) -> Result<Self> {
        self.input_len_mean = input_len_mean;
        self.output_len_mean = output_len_mean;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.adapters.is_empty() {
            return invalid("placement needs at least one adapter");
        }
        if self.n_gpus == 0 {
            return invalid("placement needs at least one GPU");
        }
        if self.testing_points.is_empty()
            || self.testing_points[0] == 0
            || self.testing_points.windows(2).any(|w| w[1] <= w[0])
        {
            return invalid(format!(
                "testing points {:?} must be positive and strictly increasing",
                self.testing_points
            ));
        }
        if !(self.input_len_mean > 0.0 && self.output_len_mean > 0.0) {
            return invalid("mean request lengths must be positive");
        }
        let mut seen = std::collections::BTreeSet::new();
        for a in &self.adapters {
            a.validate()?;
            if !seen.insert(&a.id) {
                return invalid(format!("duplicate adapter id {}", a.id));
            }
        }
        Ok(())
    }

    pub fn mean_request_tokens(&self) -> f64 {
        self.input_len_mean + self.output_len_mean
    }

    fn specs(&self, idx: impl IntoIterator<Item = usize>) -> Vec<AdapterSpec> {
        idx.into_iter().map(|i| self.adapters[i].clone()).collect()
    }
}

/// Greedy bookkeeping for one GPU. Adapters are indices into the problem.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GpuState {
    pub committed: Vec<usize>,
    pub provisional: Vec<usize>,
    pub a_max: usize,
    pub s_max: u32,
}

impl GpuState {
    pub fn count(&self) -> usize {
        self.committed.len() + self.provisional.len()
    }

    fn all(&self) -> impl Iterator<Item = usize> + '_ {
        self.committed.iter().chain(&self.provisional).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TestOutcome {
    pub ok: bool,
    pub alloc_set: Vec<usize>,
    pub a_max: usize,
    /// Neither candidate configuration fits in memory.
    pub memory_infeasible: bool,
}

impl TestOutcome {
    fn reject(memory_infeasible: bool) -> Self {
        Self {
            ok: false,
            alloc_set: Vec::new(),
            a_max: 0,
            memory_infeasible,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpuAssignment {
    pub gpu: usize,
    pub adapters: Vec<AdapterId>,
    pub a_max: usize,
    pub s_max: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementResult {
    pub strategy: String,
    pub assignment: BTreeMap<AdapterId, usize>,
    /// Used GPUs only, in index order.
    pub gpus: Vec<GpuAssignment>,
    pub gpus_used: usize,
}

impl PlacementResult {
    fn build(
        strategy: &str,
        problem: &PlacementProblem,
        per_gpu: Vec<(usize, Vec<usize>, usize)>,
    ) -> Self {
        let mut assignment = BTreeMap::new();
        let mut gpus = Vec::new();
        for (gpu, members, a_max) in per_gpu {
            if members.is_empty() {
                continue;
            }
            for &i in &members {
                assignment.insert(problem.adapters[i].id.clone(), gpu);
            }
            gpus.push(GpuAssignment {
                gpu,
                s_max: members
                    .iter()
                    .map(|&i| problem.adapters[i].size)
                    .max()
                    .unwrap_or(0),
                adapters: members
                    .iter()
                    .map(|&i| problem.adapters[i].id.clone())
                    .collect(),
                a_max,
            });
        }
        gpus.sort_by_key(|g| g.gpu);
        Self {
            strategy: strategy.into(),
            gpus_used: gpus.len(),
            assignment,
            gpus,
        }
    }

    pub fn a_max_per_gpu(&self) -> BTreeMap<usize, usize> {
        self.gpus.iter().map(|g| (g.gpu, g.a_max)).collect()
    }

    /// Adapter specs of each used GPU, in plan order.
    pub fn workloads(&self, problem: &PlacementProblem) -> Vec<Vec<AdapterSpec>> {
        let by_id: BTreeMap<&AdapterId, &AdapterSpec> =
            problem.adapters.iter().map(|a| (&a.id, a)).collect();
        self.gpus
            .iter()
            .map(|g| g.adapters.iter().map(|id| by_id[id].clone()).collect())
            .collect()
    }

    /// Attach the models' verdict on every GPU of the placement.
    pub fn plan(&self, problem: &PlacementProblem, seed: u64, profile_hash: &str) -> Result<Plan> {
        let mut gpus = Vec::new();
        for (g, specs) in self.gpus.iter().zip(self.workloads(problem)) {
            let fv = featurize(&specs, g.a_max)?;
            gpus.push(GpuPlan {
                gpu: g.gpu,
                adapters: g.adapters.clone(),
                a_max: g.a_max,
                s_max: g.s_max,
                rate_sum: specs.iter().map(|a| a.rate).sum(),
                predicted_throughput: problem.throughput.predict_throughput(&fv),
                predicted_starved: problem.starvation.predict_starvation(&fv),
                memory_feasible: problem.memory.fits(g.a_max, g.s_max),
            });
        }
        Ok(Plan {
            schema: PLAN_SCHEMA.into(),
            strategy: self.strategy.clone(),
            seed,
            profile_hash: profile_hash.into(),
            gpus_available: problem.n_gpus,
            gpus_used: self.gpus_used,
            assignment: self.assignment.clone(),
            gpus,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpuPlan {
    pub gpu: usize,
    pub adapters: Vec<AdapterId>,
    pub a_max: usize,
    pub s_max: u32,
    pub rate_sum: f64,
    pub predicted_throughput: f64,
    pub predicted_starved: bool,
    pub memory_feasible: bool,
}

/// On-disk placement plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub schema: String,
    pub strategy: String,
    pub seed: u64,
    pub profile_hash: String,
    pub gpus_available: usize,
    pub gpus_used: usize,
    pub assignment: BTreeMap<AdapterId, usize>,
    pub gpus: Vec<GpuPlan>,
}

impl Plan {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if p.schema != PLAN_SCHEMA {
            return invalid(format!("unsupported plan schema {:?}", p.schema));
        }
        Ok(p)
    }
}

/// Largest sizes first; within a size, rate levels alternate from the top
/// and the bottom of the descending order. Adapters sharing a rate stay
/// together in id order, so the result does not depend on input order.
pub fn priority_sorting(adapters: &[AdapterSpec]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..adapters.len()).collect();
    idx.sort_by(|&a, &b| {
        let (x, y) = (&adapters[a], &adapters[b]);
        y.size
            .cmp(&x.size)
            .then(y.rate.total_cmp(&x.rate))
            .then(x.id.cmp(&y.id))
    });
    let mut out = Vec::with_capacity(idx.len());
    for group in idx.chunk_by(|&a, &b| adapters[a].size == adapters[b].size) {
        let levels: Vec<&[usize]> = group
            .chunk_by(|&a, &b| adapters[a].rate == adapters[b].rate)
            .collect();
        let (mut lo, mut hi) = (0, levels.len());
        while lo < hi {
            out.extend_from_slice(levels[lo]);
            lo += 1;
            if lo < hi {
                hi -= 1;
                out.extend_from_slice(levels[hi]);
            }
        }
    }
    out
}

/// Smallest testing point above the current setting, or the current one
/// once the top is reached.
pub fn next_gpu_config(state: &GpuState, testing_points: &[usize]) -> usize {
    testing_points
        .iter()
        .copied()
        .find(|&p| p > state.a_max)
        .unwrap_or(state.a_max)
}

/// Counts in the testing list trigger a test, and so does every adapter
/// added past the last testing point.
fn reach_testing_point(state: &GpuState, testing_points: &[usize]) -> bool {
    let n = state.count();
    testing_points.binary_search(&n).is_ok() || testing_points.last().is_some_and(|&top| n > top)
}

pub fn test_allocation(state: &GpuState, problem: &PlacementProblem) -> Result<TestOutcome> {
    if state.provisional.is_empty() {
        return invalid("test_allocation needs provisional adapters");
    }
    let all = problem.specs(state.all());
    let s_max = all.iter().map(|a| a.size).max().unwrap_or(0);
    let current = state.a_max;
    let next = next_gpu_config(state, &problem.testing_points);
    let usable = |p: usize| p > 0 && problem.memory.fits(p, s_max);
    let mut candidates = Vec::with_capacity(2);
    if usable(current) {
        candidates.push(current);
    }
    if next != current && usable(next) {
        candidates.push(next);
    }
    let best = match candidates[..] {
        [] => return Ok(TestOutcome::reject(true)),
        [p] => p,
        [p, q] => {
            let t = problem.throughput.predict_throughput(&featurize(&all, p)?);
            let t_next = problem.throughput.predict_throughput(&featurize(&all, q)?);
            if t_next > t {
                q
            } else {
                p
            }
        }
        _ => unreachable!(),
    };
    if problem
        .starvation
        .predict_starvation(&featurize(&all, best)?)
    {
        return Ok(TestOutcome::reject(false));
    }
    Ok(TestOutcome {
        ok: true,
        alloc_set: state.provisional.clone(),
        a_max: best,
        memory_infeasible: false,
    })
}

fn memory_error(problem: &PlacementProblem, state: &GpuState) -> Error {
    let s_max = state
        .all()
        .map(|i| problem.adapters[i].size)
        .max()
        .unwrap_or(0);
    let a_max = next_gpu_config(state, &problem.testing_points);
    Error::MemoryExceeded {
        a_max,
        s_max,
        t_max: problem.memory.t_max(a_max, s_max),
    }
}

fn commit(state: &mut GpuState, outcome: &TestOutcome, problem: &PlacementProblem) {
    state.committed.append(&mut state.provisional);
    state.a_max = outcome.a_max;
    state.s_max = state
        .committed
        .iter()
        .map(|&i| problem.adapters[i].size)
        .max()
        .unwrap_or(0);
}

/// Greedy first-fit packing that validates each GPU at the testing points
/// and keeps filling it until a test fails.
pub fn allocate(problem: &PlacementProblem) -> Result<PlacementResult> {
    problem.validate()?;
    let tps = &problem.testing_points;
    let mut pending: VecDeque<usize> = priority_sorting(&problem.adapters).into();
    let mut queue: VecDeque<usize> = (0..problem.n_gpus).collect();
    let mut gpus = vec![GpuState::default(); problem.n_gpus];

    while let Some(a) = pending.pop_front() {
        let Some(g) = queue.pop_front() else {
            return Err(Error::Starvation(format!(
                "{} adapters left unplaced after all {} GPUs were filled",
                pending.len() + 1,
                problem.n_gpus
            )));
        };
        let state = &mut gpus[g];
        state.provisional.push(a);
        if !reach_testing_point(state, tps) {
            queue.push_front(g);
            continue;
        }
        let outcome = test_allocation(state, problem)?;
        if outcome.ok {
            commit(state, &outcome, problem);
            queue.push_front(g);
        } else {
            if outcome.memory_infeasible {
                return Err(memory_error(problem, state));
            }
            // the GPU retires with its committed adapters
            for &i in state.provisional.iter().rev() {
                pending.push_front(i);
            }
            state.provisional.clear();
        }
    }

    for (g, state) in gpus.iter_mut().enumerate() {
        if state.provisional.is_empty() {
            continue;
        }
        let outcome = test_allocation(state, problem)?;
        if !outcome.ok {
            if outcome.memory_infeasible {
                return Err(memory_error(problem, state));
            }
            return Err(Error::Starvation(format!(
                "final validation of GPU {g} with {} adapters predicts starvation",
                state.count()
            )));
        }
        commit(state, &outcome, problem);
    }

    let per_gpu = gpus
        .into_iter()
        .enumerate()
        .map(|(g, s)| (g, s.committed, s.a_max))
        .collect();
    Ok(PlacementResult::build("proposed", problem, per_gpu))
}

/// Fill GPUs in input order until each one's offered token rate reaches
/// `backbone_cap`. With `halve`, A_max is half the adapter count.
pub fn max_base(
    problem: &PlacementProblem,
    backbone_cap: f64,
    halve: bool,
) -> Result<PlacementResult> {
    problem.validate()?;
    if !(backbone_cap > 0.0 && backbone_cap.is_finite()) {
        return invalid(format!(
            "backbone throughput cap {backbone_cap} must be positive"
        ));
    }
    let tokens = problem.mean_request_tokens();
    let mut groups: Vec<Vec<usize>> = vec![Vec::new()];
    let mut load = 0.0;
    for i in 0..problem.adapters.len() {
        if load >= backbone_cap {
            if groups.len() == problem.n_gpus {
                return Err(Error::Starvation(format!(
                    "offered load exceeds {backbone_cap} tok/s on each of {} GPUs",
                    problem.n_gpus
                )));
            }
            groups.push(Vec::new());
            load = 0.0;
        }
        groups.last_mut().expect("nonempty").push(i);
        load += problem.adapters[i].rate * tokens;
    }
    let per_gpu = groups
        .into_iter()
        .enumerate()
        .map(|(g, m)| {
            let a_max = if halve { m.len().div_ceil(2) } else { m.len() };
            (g, m, a_max)
        })
        .collect();
    Ok(PlacementResult::build(
        if halve { "maxbase-star" } else { "maxbase" },
        problem,
        per_gpu,
    ))
}

/// Uniform GPU per adapter and uniform A_max in 1..=count per GPU.
pub fn random_placement(problem: &PlacementProblem, seed: u64) -> Result<PlacementResult> {
    problem.validate()?;
    let mut rng = stream_rng(seed, label_hash("random-placement"));
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); problem.n_gpus];
    for i in 0..problem.adapters.len() {
        groups[rng.random_range(0..problem.n_gpus)].push(i);
    }
    let per_gpu = groups
        .into_iter()
        .enumerate()
        .map(|(g, m)| {
            let a_max = if m.is_empty() {
                0
            } else {
                rng.random_range(1..=m.len())
            };
            (g, m, a_max)
        })
        .collect();
    Ok(PlacementResult::build("random", problem, per_gpu))
}

/// Spread adapters over every GPU, heaviest first onto the least loaded one,
/// then reject the plan if any GPU is predicted to starve or overflow.
pub fn proposed_lat(problem: &PlacementProblem) -> Result<PlacementResult> {
    problem.validate()?;
    let mut order: Vec<usize> = (0..problem.adapters.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&problem.adapters[a], &problem.adapters[b]);
        y.rate.total_cmp(&x.rate).then(x.id.cmp(&y.id))
    });
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); problem.n_gpus];
    let mut loads = vec![0.0f64; problem.n_gpus];
    for i in order {
        let g = (0..problem.n_gpus)
            .min_by(|&a, &b| loads[a].total_cmp(&loads[b]).then(a.cmp(&b)))
            .expect("at least one GPU");
        groups[g].push(i);
        loads[g] += problem.adapters[i].rate;
    }
    for (g, m) in groups.iter().enumerate().filter(|(_, m)| !m.is_empty()) {
        let specs = problem.specs(m.iter().copied());
        let s_max = specs.iter().map(|a| a.size).max().unwrap_or(0);
        if !problem.memory.fits(m.len(), s_max) {
            return Err(Error::Starvation(format!(
                "GPU {g}: A_max={} with S_max={s_max} does not fit in memory",
                m.len()
            )));
        }
        if problem
            .starvation
            .predict_starvation(&featurize(&specs, m.len())?)
        {
            return Err(Error::Starvation(format!(
                "GPU {g} with {} adapters is predicted to starve",
                m.len()
            )));
        }
    }
    let per_gpu = groups
        .into_iter()
        .enumerate()
        .map(|(g, m)| {
            let n = m.len();
            (g, m, n)
        })
        .collect();
    Ok(PlacementResult::build("proposed-lat", problem, per_gpu))
}

/// Digital-twin verdict on one GPU of a placement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpuCheck {
    pub gpu: usize,
    pub memory_feasible: bool,
    pub starved: bool,
    pub throughput: f64,
    pub incoming_token_rate: f64,
}

/// Replay every GPU of `result` in the digital twin, with durations and
/// request lengths taken from `grid` so the verdict matches how training
/// labels were produced.
pub fn confirm_with_twin(
    result: &PlacementResult,
    problem: &PlacementProblem,
    profile: &CalibrationProfile,
    grid: &ScenarioGrid,
    seed: u64,
) -> Result<Vec<GpuCheck>> {
    let options = SimOptions {
        record_requests: false,
        ..SimOptions::default()
    };
    result
        .gpus
        .par_iter()
        .zip(result.workloads(problem))
        .map(|(g, adapters)| {
            if !profile.is_feasible(g.a_max, g.s_max) {
                return Ok(GpuCheck {
                    gpu: g.gpu,
                    memory_feasible: false,
                    starved: true,
                    throughput: 0.0,
                    incoming_token_rate: 0.0,
                });
            }
            let duration = grid.duration_for(adapters.iter().map(|a| a.rate).sum());
            let workload = WorkloadSpec {
                adapters,
                duration,
                input_len_mean: grid.input_len_mean,
                output_len_mean: grid.output_len_mean,
                length_source: LengthSource::MeanOnly,
            };
            let trace = synthesize_trace(
                &workload,
                derive_seed(seed, g.gpu as u64),
                &LengthSampler::LogNormal { sigma: 0.0 },
            )?;
            let m = run_simulation_with(
                &trace,
                DeviceConfig::new(g.a_max, g.s_max),
                profile,
                duration,
                options.clone(),
            )?;
            Ok(GpuCheck {
                gpu: g.gpu,
                memory_feasible: true,
                starved: m.starved(),
                throughput: m.throughput,
                incoming_token_rate: m.incoming_token_rate,
            })
        })
        .collect()
}
