//! Digital twin of a continuous-batching, multi-adapter serving engine.
//!
//! Each step injects arrivals, retires finished requests, admits pending
//! requests under the KV-cache and adapter-slot limits, charges the
//! scheduler/load/forward latencies from the calibration profile, and then
//! decodes one token for every running request. The clock only moves by
//! modelled latencies, so a run is a pure function of its inputs.

mod sweep;

pub use sweep::{
    backbone_throughput, sweep_max_pack, DeviceSweep, SweepPoint, SweepResult, WorkloadTemplate,
};

use std::collections::{BTreeSet, VecDeque};
use std::ops::Bound;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::perf_models::CalibrationProfile;
use crate::workload::RequestTrace;

/// Throughput below this fraction of the incoming token rate is starvation.
pub const STARVATION_THRESHOLD: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub a_max: usize,
    pub s_max: u32,
}

impl DeviceConfig {
    pub fn new(a_max: usize, s_max: u32) -> Self {
        Self { a_max, s_max }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Extra KV tokens a request must find free beyond its prompt to be admitted.
    pub kv_lookahead: u32,
    /// Leading fraction of simulated time excluded from aggregates.
    pub warmup_fraction: f64,
    /// Seconds between timeline samples.
    pub timeline_cadence: f64,
    /// Recount all state after every step and fail on any violation.
    pub verify: bool,
    pub record_requests: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            kv_lookahead: 16,
            warmup_fraction: 0.05,
            timeline_cadence: 1.0,
            verify: false,
            record_requests: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub arrival: f64,
    pub ttft_ms: f64,
    pub completion: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimelineSample {
    pub t: f64,
    pub running: usize,
    pub waiting: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    /// Input + output tokens per second over the measured window.
    pub throughput: f64,
    pub itl_mean_ms: f64,
    pub ttft_mean_ms: f64,
    /// Tokens per second carried by requests arriving in the measured window.
    pub incoming_token_rate: f64,
    pub measured_start: f64,
    pub measured_span: f64,
    pub measured_tokens: u64,
    pub completed_requests: usize,
    pub preemptions: u64,
    pub adapter_loads: u64,
    pub steps: u64,
    /// Mean number of running requests over decode steps in the window.
    pub mean_batch_size: f64,
    pub requests: Vec<RequestRecord>,
    pub timeline: Vec<TimelineSample>,
}

impl SimMetrics {
    pub fn starved(&self) -> bool {
        starvation_label(self)
    }
}

/// True when delivered throughput falls strictly below 90% of the incoming
/// token rate. Nothing arriving means nothing can starve.
pub fn starvation_label(metrics: &SimMetrics) -> bool {
    metrics.incoming_token_rate > 0.0
        && metrics.throughput < STARVATION_THRESHOLD * metrics.incoming_token_rate
}

#[derive(Clone, Debug)]
struct Req {
    arrival: f64,
    adapter: u32,
    input: u32,
    output: u32,
    generated: u32,
    /// Position in the pending order; preempted requests get ever smaller keys.
    seq: i64,
    first_token: f64,
    ever_admitted: bool,
}

impl Req {
    fn total(&self) -> u64 {
        u64::from(self.input) + u64::from(self.output)
    }

    fn kv(&self) -> u64 {
        u64::from(self.input) + u64::from(self.generated)
    }
}

/// Read-only view of the scheduler state at a step boundary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimSnapshot {
    pub clock: f64,
    pub pending: usize,
    pub running: usize,
    pub kv_tokens_used: u64,
    pub t_max: u64,
    pub loaded_adapters: usize,
    pub batch_adapters: usize,
}

/// Step-by-step simulator over one trace and one device configuration.
pub struct Simulator<'a> {
    profile: &'a CalibrationProfile,
    device: DeviceConfig,
    options: SimOptions,
    duration: f64,
    warmup_t: f64,

    reqs: Vec<Req>,
    adapter_size: Vec<u32>,
    next_arrival: usize,

    clock: f64,
    step_no: u64,
    t_max: u64,
    kv_used: u64,

    pending: Vec<VecDeque<u32>>,
    heads: BTreeSet<(i64, u32)>,
    pending_count: usize,
    front_seq: i64,

    running: Vec<u32>,
    running_per_adapter: Vec<u32>,
    batch_adapters: usize,

    loaded: Vec<bool>,
    loaded_count: usize,
    last_use: Vec<f64>,
    load_stamp: Vec<u64>,

    // token accounting over request totals
    injected_tokens: u64,
    pending_tokens: u64,
    running_tokens: u64,
    completed_tokens: u64,
    // token accounting over work delivered (prompt once + each generated token)
    delivered_tokens: u64,

    window_start: Option<f64>,
    window_tokens: u64,
    window_batch_sum: f64,
    window_decode_steps: u64,
    preemptions: u64,
    adapter_loads: u64,

    next_sample: f64,
    timeline: Vec<TimelineSample>,
    records: Vec<RequestRecord>,
    itl_sum: f64,
    itl_n: u64,
    ttft_sum: f64,
    ttft_n: u64,
    completed: usize,
}

impl<'a> Simulator<'a> {
    pub fn new(
        trace: &RequestTrace,
        device: DeviceConfig,
        profile: &'a CalibrationProfile,
        duration: f64,
        options: SimOptions,
    ) -> Result<Self> {
        if device.a_max == 0 {
            return invalid("A_max must be at least 1");
        }
        if !(duration > 0.0 && duration.is_finite()) {
            return invalid(format!("duration {duration} must be positive"));
        }
        if !(0.0..1.0).contains(&options.warmup_fraction) || !(options.timeline_cadence > 0.0) {
            return invalid("warmup_fraction must be in [0, 1) and timeline_cadence > 0");
        }
        trace.validate()?;
        let t_max = profile.mem_max(device.a_max, device.s_max)?.floor() as u64;

        let adapters = &trace.workload.adapters;
        let index: std::collections::BTreeMap<_, u32> = adapters
            .iter()
            .enumerate()
            .map(|(i, a)| (&a.id, i as u32))
            .collect();
        let adapter_size: Vec<u32> = adapters.iter().map(|a| a.size).collect();
        if let Some(a) = adapters.iter().find(|a| a.size > device.s_max) {
            return invalid(format!(
                "adapter {} has rank {} above S_max {}",
                a.id, a.size, device.s_max
            ));
        }
        let reqs = trace
            .events
            .iter()
            .enumerate()
            .map(|(i, e)| Req {
                arrival: e.arrival_time,
                adapter: index[&e.adapter_id],
                input: e.input_len,
                output: e.output_len,
                generated: 0,
                seq: i as i64,
                first_token: f64::NAN,
                ever_admitted: false,
            })
            .collect();

        let n = adapters.len();
        Ok(Self {
            profile,
            device,
            warmup_t: duration * options.warmup_fraction,
            options,
            duration,
            reqs,
            adapter_size,
            next_arrival: 0,
            clock: 0.0,
            step_no: 0,
            t_max,
            kv_used: 0,
            pending: vec![VecDeque::new(); n],
            heads: BTreeSet::new(),
            pending_count: 0,
            front_seq: 0,
            running: Vec::new(),
            running_per_adapter: vec![0; n],
            batch_adapters: 0,
            loaded: vec![false; n],
            loaded_count: 0,
            last_use: vec![f64::NEG_INFINITY; n],
            load_stamp: vec![u64::MAX; n],
            injected_tokens: 0,
            pending_tokens: 0,
            running_tokens: 0,
            completed_tokens: 0,
            delivered_tokens: 0,
            window_start: None,
            window_tokens: 0,
            window_batch_sum: 0.0,
            window_decode_steps: 0,
            preemptions: 0,
            adapter_loads: 0,
            next_sample: 0.0,
            timeline: Vec::new(),
            records: Vec::new(),
            itl_sum: 0.0,
            itl_n: 0,
            ttft_sum: 0.0,
            ttft_n: 0,
            completed: 0,
        })
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn snapshot(&self) -> SimSnapshot {
        SimSnapshot {
            clock: self.clock,
            pending: self.pending_count,
            running: self.running.len(),
            kv_tokens_used: self.kv_used,
            t_max: self.t_max,
            loaded_adapters: self.loaded_count,
            batch_adapters: self.batch_adapters,
        }
    }

    fn enqueue(&mut self, r: u32) {
        let req = &self.reqs[r as usize];
        let a = req.adapter;
        let key = (req.seq, a);
        let q = &mut self.pending[a as usize];
        match q.front() {
            Some(&head) if self.reqs[head as usize].seq <= key.0 => q.push_back(r),
            Some(&head) => {
                self.heads.remove(&(self.reqs[head as usize].seq, a));
                q.push_front(r);
                self.heads.insert(key);
            }
            None => {
                q.push_back(r);
                self.heads.insert(key);
            }
        }
        self.pending_count += 1;
        self.pending_tokens += self.reqs[r as usize].total();
    }

    fn pop_pending(&mut self, a: u32) -> u32 {
        let q = &mut self.pending[a as usize];
        let r = q.pop_front().expect("nonempty adapter queue");
        self.heads.remove(&(self.reqs[r as usize].seq, a));
        if let Some(&next) = q.front() {
            self.heads.insert((self.reqs[next as usize].seq, a));
        }
        self.pending_count -= 1;
        self.pending_tokens -= self.reqs[r as usize].total();
        r
    }

    /// Loaded adapters with no running requests, most recently used first,
    /// so popping yields the least-recently-used one.
    fn idle_loaded(&self) -> Vec<usize> {
        let mut v: Vec<usize> = (0..self.loaded.len())
            .filter(|&a| self.loaded[a] && self.running_per_adapter[a] == 0)
            .collect();
        v.sort_by(|&x, &y| {
            self.last_use[y]
                .total_cmp(&self.last_use[x])
                .then(y.cmp(&x))
        });
        v
    }

    fn in_window(&self) -> bool {
        self.window_start.is_some()
    }

    /// Advance the engine by one scheduling iteration.
    pub fn step(&mut self) -> Result<()> {
        // (1) arrivals
        while self.next_arrival < self.reqs.len()
            && self.reqs[self.next_arrival].arrival <= self.clock
        {
            let r = self.next_arrival as u32;
            self.injected_tokens += self.reqs[r as usize].total();
            self.enqueue(r);
            self.next_arrival += 1;
        }
        if self.window_start.is_none() && self.clock >= self.warmup_t {
            self.window_start = Some(self.warmup_t);
        }
        self.fill_timeline(self.clock);

        // (2) retire finished requests
        let mut i = 0;
        while i < self.running.len() {
            let r = self.running[i] as usize;
            if self.reqs[r].generated >= self.reqs[r].output {
                self.running.remove(i);
                self.release(r);
                let total = self.reqs[r].total();
                self.running_tokens -= total;
                self.completed_tokens += total;
            } else {
                i += 1;
            }
        }

        // (3) + (4) admission with adapter loading
        let load_ms = self.admit();

        // (5) latency of the post-admission batch
        let batch = self.running.len();
        let ms = self.profile.sched_ms(
            batch,
            self.pending_count,
            self.batch_adapters,
            self.loaded.len(),
        ) + load_ms
            + self.profile.model_ms(batch, self.batch_adapters);
        if ms > 0.0 {
            self.clock += ms / 1000.0;
        } else {
            // zero-cost idle step: jump to the next arrival
            let next = self
                .reqs
                .get(self.next_arrival)
                .map_or(self.duration, |r| r.arrival.min(self.duration));
            self.clock = next.max(self.clock + f64::EPSILON * self.clock.abs().max(1.0));
        }

        // (6) decode one token per running request, preempting on KV overflow
        while !self.running.is_empty() && self.kv_used + self.running.len() as u64 > self.t_max {
            let r = self.running.pop().expect("nonempty") as usize;
            self.release(r);
            self.running_tokens -= self.reqs[r].total();
            self.front_seq -= 1;
            self.reqs[r].seq = self.front_seq;
            self.enqueue(r as u32);
            self.preemptions += 1;
        }
        let counted = self.in_window();
        if counted && !self.running.is_empty() {
            self.window_batch_sum += self.running.len() as f64;
            self.window_decode_steps += 1;
        }
        for k in 0..self.running.len() {
            let r = self.running[k] as usize;
            let clock = self.clock;
            let window_start = self.window_start;
            let req = &mut self.reqs[r];
            req.generated += 1;
            self.kv_used += 1;
            self.delivered_tokens += 1;
            if counted {
                self.window_tokens += 1;
            }
            self.last_use[req.adapter as usize] = clock;
            if req.generated == 1 && req.first_token.is_nan() {
                req.first_token = clock;
                if window_start.is_some() {
                    self.ttft_sum += (clock - req.arrival) * 1000.0;
                    self.ttft_n += 1;
                }
            }
            if req.generated == req.output {
                self.completed += 1;
                if window_start.is_some() && req.output >= 2 {
                    self.itl_sum += (clock - req.first_token) * 1000.0 / f64::from(req.output - 1);
                    self.itl_n += 1;
                }
                if self.options.record_requests {
                    self.records.push(RequestRecord {
                        arrival: req.arrival,
                        ttft_ms: (req.first_token - req.arrival) * 1000.0,
                        completion: clock,
                    });
                }
            }
        }
        self.step_no += 1;
        debug_assert!(self.kv_used <= self.t_max);
        debug_assert!(self.loaded_count <= self.device.a_max);
        if self.options.verify {
            self.verify()?;
        }
        Ok(())
    }

    /// Free a running request's KV and its hold on its adapter.
    fn release(&mut self, r: usize) {
        let a = self.reqs[r].adapter as usize;
        self.kv_used -= self.reqs[r].kv();
        self.running_per_adapter[a] -= 1;
        if self.running_per_adapter[a] == 0 {
            self.batch_adapters -= 1;
        }
    }

    /// FIFO admission. A request whose adapter cannot get a slot is skipped;
    /// the first request that does not fit in KV memory stops the scan.
    /// Returns the adapter load latency charged this step (ms).
    fn admit(&mut self) -> f64 {
        let lookahead = u64::from(self.options.kv_lookahead);
        let mut load_ms = 0.0;
        let mut cursor: Option<(i64, u32)> = None;
        // built on first need; admissions during this pass only ever make
        // candidates busy, which the validity check below filters out
        let mut victims: Option<Vec<usize>> = None;
        loop {
            let next = match cursor {
                None => self.heads.iter().next().copied(),
                Some(c) => self
                    .heads
                    .range((Bound::Excluded(c), Bound::Unbounded))
                    .next()
                    .copied(),
            };
            let Some((seq, a)) = next else { break };
            cursor = Some((seq, a));
            let ai = a as usize;
            let r = *self.pending[ai].front().expect("head exists") as usize;

            let mut evict = None;
            if !self.loaded[ai] && self.loaded_count >= self.device.a_max {
                let list = victims.get_or_insert_with(|| self.idle_loaded());
                while list
                    .last()
                    .is_some_and(|&v| !self.loaded[v] || self.running_per_adapter[v] != 0)
                {
                    list.pop();
                }
                match list.last() {
                    Some(&v) => evict = Some(v),
                    None => continue,
                }
            }
            if self.kv_used + self.reqs[r].kv() + lookahead > self.t_max {
                break;
            }
            if !self.loaded[ai] {
                if let Some(v) = evict {
                    victims.as_mut().and_then(Vec::pop);
                    self.loaded[v] = false;
                    self.loaded_count -= 1;
                }
                self.loaded[ai] = true;
                self.loaded_count += 1;
                self.adapter_loads += 1;
                if self.load_stamp[ai] != self.step_no {
                    self.load_stamp[ai] = self.step_no;
                    load_ms += self.profile.lat_load(self.adapter_size[ai]);
                }
            }
            let popped = self.pop_pending(a) as usize;
            debug_assert_eq!(popped, r);
            let req = &mut self.reqs[r];
            self.kv_used += req.kv();
            self.running_tokens += req.total();
            if !req.ever_admitted {
                req.ever_admitted = true;
                self.delivered_tokens += u64::from(req.input);
                if self.window_start.is_some() {
                    self.window_tokens += u64::from(req.input);
                }
            }
            if self.running_per_adapter[ai] == 0 {
                self.batch_adapters += 1;
            }
            self.running_per_adapter[ai] += 1;
            self.last_use[ai] = self.clock;
            self.running.push(r as u32);
        }
        load_ms
    }

    /// Full recount of the state against the incremental counters.
    pub fn verify(&self) -> Result<()> {
        let fail = |detail: String| {
            Err(Error::InvariantViolation {
                clock: self.clock,
                detail,
            })
        };
        let kv: u64 = self
            .running
            .iter()
            .map(|&r| self.reqs[r as usize].kv())
            .sum();
        if kv != self.kv_used {
            return fail(format!("kv recount {kv} != tracked {}", self.kv_used));
        }
        if self.kv_used > self.t_max {
            return fail(format!("kv {} exceeds T_max {}", self.kv_used, self.t_max));
        }
        let loaded = self.loaded.iter().filter(|&&l| l).count();
        if loaded != self.loaded_count || loaded > self.device.a_max {
            return fail(format!(
                "{loaded} adapters loaded with A_max {}",
                self.device.a_max
            ));
        }
        if let Some(&r) = self
            .running
            .iter()
            .find(|&&r| !self.loaded[self.reqs[r as usize].adapter as usize])
        {
            return fail(format!("running request {r} uses an unloaded adapter"));
        }
        let pending: Vec<u32> = self.pending.iter().flatten().copied().collect();
        if pending.len() != self.pending_count {
            return fail("pending count drift".into());
        }
        let pending_tokens: u64 = pending.iter().map(|&r| self.reqs[r as usize].total()).sum();
        let running_tokens: u64 = self
            .running
            .iter()
            .map(|&r| self.reqs[r as usize].total())
            .sum();
        let mut live = vec![false; self.reqs.len()];
        for &r in pending.iter().chain(&self.running) {
            live[r as usize] = true;
        }
        let completed_tokens: u64 = self.reqs[..self.next_arrival]
            .iter()
            .zip(&live)
            .filter(|(_, &l)| !l)
            .map(|(q, _)| q.total())
            .sum();
        if pending_tokens != self.pending_tokens
            || running_tokens != self.running_tokens
            || completed_tokens != self.completed_tokens
        {
            return fail("pending/running/completed token counters drift".into());
        }
        if self.injected_tokens != self.completed_tokens + self.running_tokens + self.pending_tokens
        {
            return fail(format!(
                "token conservation: injected {} != completed {} + running {} + pending {}",
                self.injected_tokens,
                self.completed_tokens,
                self.running_tokens,
                self.pending_tokens
            ));
        }
        // delivered work = finished totals + progress of every admitted, unfinished request
        let progress: u64 = self
            .reqs
            .iter()
            .filter(|q| q.ever_admitted)
            .map(|q| u64::from(q.input) + u64::from(q.generated))
            .sum();
        if progress != self.delivered_tokens {
            return fail(format!(
                "delivered {} != progress {progress}",
                self.delivered_tokens
            ));
        }
        Ok(())
    }

    /// Run until the clock reaches the configured duration.
    pub fn run(mut self) -> Result<SimMetrics> {
        if self.reqs.is_empty() {
            return Ok(SimMetrics::default());
        }
        while self.clock < self.duration {
            self.skip_idle();
            self.step()?;
        }
        Ok(self.finish())
    }

    /// Take all idle steps before the next arrival at once. Each one would
    /// only add the empty-batch latency, so the clock lands on the same grid.
    fn skip_idle(&mut self) {
        if !self.running.is_empty() || self.pending_count > 0 {
            return;
        }
        let idle_s = (self.profile.sched_ms(0, 0, 0, self.loaded.len())
            + self.profile.model_ms(0, 0))
            / 1000.0;
        let target = self
            .reqs
            .get(self.next_arrival)
            .map_or(self.duration, |r| r.arrival.min(self.duration));
        if !(idle_s > 0.0) || target <= self.clock {
            return;
        }
        let k = ((target - self.clock) / idle_s).floor();
        if k >= 1.0 {
            let t = self.clock + k * idle_s;
            self.fill_timeline(t);
            self.clock = t;
            self.step_no += k as u64;
        }
    }

    fn fill_timeline(&mut self, until: f64) {
        while until >= self.next_sample {
            self.timeline.push(TimelineSample {
                t: self.next_sample,
                running: self.running.len(),
                waiting: self.pending_count,
            });
            self.next_sample += self.options.timeline_cadence;
        }
    }

    fn finish(self) -> SimMetrics {
        let (start, span) = match self.window_start {
            Some(s) if self.clock > s => (s, self.clock - s),
            _ => (self.clock, 0.0),
        };
        let arrival_span = self.duration - self.warmup_t;
        let incoming: u64 = self
            .reqs
            .iter()
            .filter(|r| r.arrival >= self.warmup_t)
            .map(Req::total)
            .sum();
        let mean = |s: f64, n: u64| if n == 0 { 0.0 } else { s / n as f64 };
        SimMetrics {
            throughput: if span > 0.0 {
                self.window_tokens as f64 / span
            } else {
                0.0
            },
            itl_mean_ms: mean(self.itl_sum, self.itl_n),
            ttft_mean_ms: mean(self.ttft_sum, self.ttft_n),
            incoming_token_rate: if arrival_span > 0.0 {
                incoming as f64 / arrival_span
            } else {
                0.0
            },
            measured_start: start,
            measured_span: span,
            measured_tokens: self.window_tokens,
            completed_requests: self.completed,
            preemptions: self.preemptions,
            adapter_loads: self.adapter_loads,
            steps: self.step_no,
            mean_batch_size: mean(self.window_batch_sum, self.window_decode_steps),
            requests: self.records,
            timeline: self.timeline,
        }
    }
}

/// Simulate `trace` on one device for `duration` simulated seconds.
pub fn run_simulation(
    trace: &RequestTrace,
    device: DeviceConfig,
    profile: &CalibrationProfile,
    duration: f64,
) -> Result<SimMetrics> {
    run_simulation_with(trace, device, profile, duration, SimOptions::default())
}

pub fn run_simulation_with(
    trace: &RequestTrace,
    device: DeviceConfig,
    profile: &CalibrationProfile,
    duration: f64,
    options: SimOptions,
) -> Result<SimMetrics> {
    Simulator::new(trace, device, profile, duration, options)?.run()
}
