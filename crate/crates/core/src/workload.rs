//! Workload definitions and seeded request-trace synthesis.
//!
//! Arrivals are generated per adapter from a renewal process (Poisson, or a
//! regime-switching mix of Poisson and log-normal epochs) and merged into a
//! single trace sorted by arrival time. All generators are pure functions of
//! their inputs and seed.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{derive_seed, label_hash, stream_rng};

pub const TRACE_SCHEMA: &str = "lorapack-trace v1";

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AdapterId(pub String);

impl AdapterId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AdapterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AdapterId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

/// One LoRA adapter: its rank and its mean request arrival rate (req/s).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub id: AdapterId,
    pub size: u32,
    pub rate: f64,
}

impl AdapterSpec {
    pub fn new(id: impl Into<String>, size: u32, rate: f64) -> Self {
        Self {
            id: AdapterId::new(id),
            size,
            rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let id = self.id.as_str();
        if id.is_empty() || id.contains(|c: char| c == ',' || c.is_whitespace()) {
            return invalid(format!(
                "adapter id {id:?} must be nonempty without commas or whitespace"
            ));
        }
        if self.size == 0 {
            return invalid(format!("adapter {id}: size must be positive"));
        }
        if !(self.rate >= 0.0 && self.rate.is_finite()) {
            return invalid(format!(
                "adapter {id}: rate {} must be finite and >= 0",
                self.rate
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthSource {
    PerRequestSampled,
    MeanOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub adapters: Vec<AdapterSpec>,
    pub duration: f64,
    pub input_len_mean: f64,
    pub output_len_mean: f64,
    pub length_source: LengthSource,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.adapters.is_empty() {
            return invalid("workload has no adapters");
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return invalid(format!("duration {} must be positive", self.duration));
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

    /// Mean tokens (input + output) carried by one request.
    pub fn mean_request_tokens(&self) -> f64 {
        self.input_len_mean + self.output_len_mean
    }

    /// Expected incoming token rate (tokens/s) implied by the adapter rates.
    pub fn expected_token_rate(&self) -> f64 {
        self.adapters.iter().map(|a| a.rate).sum::<f64>() * self.mean_request_tokens()
    }

    pub fn max_size(&self) -> u32 {
        self.adapters.iter().map(|a| a.size).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestEvent {
    pub arrival_time: f64,
    pub adapter_id: AdapterId,
    pub input_len: u32,
    pub output_len: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestTrace {
    pub events: Vec<RequestEvent>,
    pub workload: WorkloadSpec,
    pub seed: u64,
}

impl RequestTrace {
    pub fn validate(&self) -> Result<()> {
        self.workload.validate()?;
        let known: std::collections::BTreeSet<&AdapterId> =
            self.workload.adapters.iter().map(|a| &a.id).collect();
        let mut prev = 0.0_f64;
        for (i, e) in self.events.iter().enumerate() {
            if !(e.arrival_time >= 0.0 && e.arrival_time <= self.workload.duration) {
                return invalid(format!(
                    "event {i}: arrival {} outside [0, duration]",
                    e.arrival_time
                ));
            }
            if e.arrival_time < prev {
                return invalid(format!("event {i}: trace not sorted by arrival time"));
            }
            if !known.contains(&e.adapter_id) {
                return invalid(format!("event {i}: unknown adapter {}", e.adapter_id));
            }
            if e.input_len == 0 || e.output_len == 0 {
                return invalid(format!("event {i}: token lengths must be >= 1"));
            }
            prev = e.arrival_time;
        }
        Ok(())
    }

    pub fn total_tokens(&self) -> u64 {
        self.events
            .iter()
            .map(|e| u64::from(e.input_len) + u64::from(e.output_len))
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalDistribution {
    Poisson,
    LogNormal,
}

/// Non-stationary arrival regime: every `epoch_length` seconds the rate is
/// multiplied or divided by `factor`, clipped to `rate_bounds`, and the
/// inter-arrival distribution is redrawn from `distributions`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnpredictableRegime {
    pub epoch_length: f64,
    pub factor: f64,
    /// `None` means `[initial_rate / 8, initial_rate * 8]`.
    pub rate_bounds: Option<(f64, f64)>,
    pub distributions: Vec<ArrivalDistribution>,
    /// Shape of log-normal inter-arrival gaps.
    pub lognormal_sigma: f64,
}

impl Default for UnpredictableRegime {
    fn default() -> Self {
        Self {
            epoch_length: 300.0,
            factor: 2.0,
            rate_bounds: None,
            distributions: vec![ArrivalDistribution::Poisson, ArrivalDistribution::LogNormal],
            lognormal_sigma: 1.0,
        }
    }
}

impl UnpredictableRegime {
    pub fn bounds_for(&self, initial_rate: f64) -> (f64, f64) {
        self.rate_bounds
            .unwrap_or((initial_rate / 8.0, initial_rate * 8.0))
    }

    fn validate(&self, initial_rate: f64) -> Result<()> {
        if !(self.epoch_length > 0.0) {
            return invalid("epoch_length must be positive");
        }
        if !(self.factor > 1.0) {
            return invalid("factor must exceed 1");
        }
        if self.distributions.is_empty() {
            return invalid("regime needs at least one distribution");
        }
        if !(self.lognormal_sigma > 0.0) {
            return invalid("lognormal_sigma must be positive");
        }
        let (lo, hi) = self.bounds_for(initial_rate);
        if !(lo >= 0.0 && lo <= hi) {
            return invalid(format!("rate bounds [{lo}, {hi}] are not an interval"));
        }
        if !(initial_rate > 0.0) || initial_rate < lo || initial_rate > hi {
            return invalid(format!(
                "initial rate {initial_rate} outside bounds [{lo}, {hi}]"
            ));
        }
        Ok(())
    }
}

/// One epoch of an unpredictable arrival process.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Epoch {
    pub start: f64,
    pub distribution: ArrivalDistribution,
    pub rate: f64,
}

/// Arrival times of a homogeneous Poisson process on `[0, duration)`.
pub fn gen_poisson_arrivals(rate: f64, duration: f64, seed: u64) -> Result<Vec<f64>> {
    if !(rate >= 0.0 && rate.is_finite()) {
        return invalid(format!("rate {rate} must be finite and >= 0"));
    }
    if !(duration > 0.0 && duration.is_finite()) {
        return invalid(format!("duration {duration} must be positive"));
    }
    let mut out = Vec::with_capacity((rate * duration * 1.1) as usize + 4);
    if rate == 0.0 {
        return Ok(out);
    }
    let mut rng = stream_rng(seed, 0);
    renewal_fill(
        &mut out,
        &mut rng,
        0.0,
        duration,
        &Gap::Exp(Exp::new(rate).expect("rate > 0")),
    );
    Ok(out)
}

enum Gap {
    Exp(Exp<f64>),
    LogNormal(LogNormal<f64>),
}

impl Gap {
    fn new(dist: ArrivalDistribution, rate: f64, sigma: f64) -> Self {
        match dist {
            ArrivalDistribution::Poisson => Gap::Exp(Exp::new(rate).expect("rate > 0")),
            ArrivalDistribution::LogNormal => {
                // E[gap] = exp(mu + sigma^2 / 2) = 1 / rate
                let mu = (1.0 / rate).ln() - sigma * sigma / 2.0;
                Gap::LogNormal(LogNormal::new(mu, sigma).expect("sigma > 0"))
            }
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Gap::Exp(d) => d.sample(rng),
            Gap::LogNormal(d) => d.sample(rng),
        }
    }
}

/// Appends renewal-process arrivals started at `start` that fall in `[start, end)`.
fn renewal_fill<R: Rng + ?Sized>(out: &mut Vec<f64>, rng: &mut R, start: f64, end: f64, gap: &Gap) {
    let mut t = start;
    loop {
        let next = t + gap.sample(rng);
        if next >= end {
            break;
        }
        if next > t {
            out.push(next);
            t = next;
        }
    }
}

/// Rates for `n_epochs` epochs: epoch 0 keeps `initial`, later epochs scale the
/// previous rate up when `coin()` is true (down otherwise) and clip to bounds.
pub(crate) fn evolve_epoch_rates(
    initial: f64,
    n_epochs: usize,
    factor: f64,
    bounds: (f64, f64),
    mut coin: impl FnMut() -> bool,
) -> Vec<f64> {
    let mut rates = Vec::with_capacity(n_epochs);
    let mut rate = initial;
    for k in 0..n_epochs {
        if k > 0 {
            rate = if coin() { rate * factor } else { rate / factor };
            rate = rate.clamp(bounds.0, bounds.1);
        }
        rates.push(rate);
    }
    rates
}

/// Arrivals under a regime-switching process plus the per-epoch log.
pub fn gen_unpredictable_arrivals(
    initial_rate: f64,
    duration: f64,
    regime: &UnpredictableRegime,
    seed: u64,
) -> Result<(Vec<f64>, Vec<Epoch>)> {
    if !(duration > 0.0 && duration.is_finite()) {
        return invalid(format!("duration {duration} must be positive"));
    }
    regime.validate(initial_rate)?;
    let n_epochs = (duration / regime.epoch_length).ceil().max(1.0) as usize;
    let mut coin_rng = stream_rng(seed, 1);
    let rates = evolve_epoch_rates(
        initial_rate,
        n_epochs,
        regime.factor,
        regime.bounds_for(initial_rate),
        || coin_rng.random_bool(0.5),
    );
    let mut gap_rng = stream_rng(seed, 2);
    let mut times = Vec::new();
    let mut log = Vec::with_capacity(n_epochs);
    for (k, &rate) in rates.iter().enumerate() {
        let distribution =
            regime.distributions[coin_rng.random_range(0..regime.distributions.len())];
        let start = k as f64 * regime.epoch_length;
        let end = (start + regime.epoch_length).min(duration);
        log.push(Epoch {
            start,
            distribution,
            rate,
        });
        if rate > 0.0 {
            let gap = Gap::new(distribution, rate, regime.lognormal_sigma);
            renewal_fill(&mut times, &mut gap_rng, start, end, &gap);
        }
    }
    Ok((times, log))
}

/// Empirical (input_len, output_len) pairs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LengthCorpus {
    pub pairs: Vec<(u32, u32)>,
}

impl LengthCorpus {
    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::parse(std::io::BufReader::new(f))
    }

    pub fn parse(reader: impl BufRead) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty());
            let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
                return Err(Error::Parse(format!(
                    "length corpus line {}: expected two fields",
                    n + 1
                )));
            };
            let parse = |s: &str| {
                s.parse::<u32>().ok().filter(|v| *v >= 1).ok_or_else(|| {
                    Error::Parse(format!("length corpus line {}: bad length {s:?}", n + 1))
                })
            };
            pairs.push((parse(a)?, parse(b)?));
        }
        Ok(Self { pairs })
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        for (i, o) in &self.pairs {
            writeln!(w, "{i},{o}")?;
        }
        Ok(())
    }
}

/// Source of per-request token lengths for `PerRequestSampled` workloads.
#[derive(Clone, Debug, PartialEq)]
pub enum LengthSampler {
    /// Uniform draws with replacement from an empirical corpus.
    Corpus(LengthCorpus),
    /// Log-normal lengths whose means match the workload means.
    LogNormal { sigma: f64 },
}

type DrawLengths<'a> = Box<dyn FnMut(&mut rand_chacha::ChaCha8Rng) -> (u32, u32) + 'a>;

impl LengthSampler {
    fn sampler<'a>(&'a self, workload: &WorkloadSpec) -> Result<DrawLengths<'a>> {
        match self {
            LengthSampler::Corpus(c) => {
                if c.pairs.is_empty() {
                    return invalid("length corpus is empty");
                }
                Ok(Box::new(move |rng| {
                    c.pairs[rng.random_range(0..c.pairs.len())]
                }))
            }
            LengthSampler::LogNormal { sigma } => {
                if !(*sigma > 0.0) {
                    return invalid("length sigma must be positive");
                }
                let mk = |mean: f64| {
                    LogNormal::new(mean.ln() - sigma * sigma / 2.0, *sigma).expect("valid")
                };
                let din = mk(workload.input_len_mean);
                let dout = mk(workload.output_len_mean);
                Ok(Box::new(move |rng| {
                    let i = din.sample(rng).round().max(1.0) as u32;
                    let o = dout.sample(rng).round().max(1.0) as u32;
                    (i, o)
                }))
            }
        }
    }
}

fn round_half_up(x: f64) -> u32 {
    (x + 0.5).floor().max(1.0) as u32
}

fn assign_lengths(
    workload: &WorkloadSpec,
    seed: u64,
    sampler: &LengthSampler,
    arrivals: Vec<(f64, usize)>,
) -> Result<Vec<RequestEvent>> {
    let mut draw = match workload.length_source {
        LengthSource::MeanOnly => None,
        LengthSource::PerRequestSampled => Some(sampler.sampler(workload)?),
    };
    let fixed = (
        round_half_up(workload.input_len_mean),
        round_half_up(workload.output_len_mean),
    );
    let mut rng = stream_rng(seed, label_hash("lengths"));
    Ok(arrivals
        .into_iter()
        .map(|(t, a)| {
            let (input_len, output_len) = match draw.as_mut() {
                Some(f) => f(&mut rng),
                None => fixed,
            };
            RequestEvent {
                arrival_time: t,
                adapter_id: workload.adapters[a].id.clone(),
                input_len,
                output_len,
            }
        })
        .collect())
}

fn merge_sorted(mut arrivals: Vec<(f64, usize)>) -> Vec<(f64, usize)> {
    arrivals.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    arrivals
}

/// Poisson trace: per-adapter arrivals generated independently, then merged.
pub fn synthesize_trace(
    workload: &WorkloadSpec,
    seed: u64,
    sampler: &LengthSampler,
) -> Result<RequestTrace> {
    workload.validate()?;
    let mut arrivals = Vec::new();
    for (i, a) in workload.adapters.iter().enumerate() {
        let times =
            gen_poisson_arrivals(a.rate, workload.duration, derive_seed(seed, i as u64 + 1))?;
        arrivals.extend(times.into_iter().map(|t| (t, i)));
    }
    let events = assign_lengths(workload, seed, sampler, merge_sorted(arrivals))?;
    Ok(RequestTrace {
        events,
        workload: workload.clone(),
        seed,
    })
}

/// `n` adapters whose sizes and rates are drawn uniformly from the given
/// menus. Ids are zero-padded so they sort in creation order.
pub fn random_adapters(
    n: usize,
    sizes: &[u32],
    rates: &[f64],
    seed: u64,
) -> Result<Vec<AdapterSpec>> {
    if sizes.is_empty() || rates.is_empty() {
        return invalid("random adapters need nonempty size and rate menus");
    }
    let width = n.saturating_sub(1).to_string().len();
    let mut rng = stream_rng(seed, label_hash("random-adapters"));
    let out: Vec<AdapterSpec> = (0..n)
        .map(|i| {
            let size = sizes[rng.random_range(0..sizes.len())];
            let rate = rates[rng.random_range(0..rates.len())];
            AdapterSpec::new(format!("a{i:0width$}"), size, rate)
        })
        .collect();
    for a in &out {
        a.validate()?;
    }
    Ok(out)
}

/// Trace where each adapter follows its own regime-switching process,
/// starting from its configured rate. Epochs are not synchronized across
/// adapters in the random draws, only in their boundaries.
pub fn synthesize_unpredictable_trace(
    workload: &WorkloadSpec,
    regime: &UnpredictableRegime,
    seed: u64,
    sampler: &LengthSampler,
) -> Result<(RequestTrace, BTreeMap<AdapterId, Vec<Epoch>>)> {
    workload.validate()?;
    let mut arrivals = Vec::new();
    let mut logs = BTreeMap::new();
    for (i, a) in workload.adapters.iter().enumerate() {
        if a.rate == 0.0 {
            logs.insert(a.id.clone(), Vec::new());
            continue;
        }
        let (times, log) = gen_unpredictable_arrivals(
            a.rate,
            workload.duration,
            regime,
            derive_seed(seed, i as u64 + 1),
        )?;
        arrivals.extend(times.into_iter().map(|t| (t, i)));
        logs.insert(a.id.clone(), log);
    }
    let events = assign_lengths(workload, seed, sampler, merge_sorted(arrivals))?;
    Ok((
        RequestTrace {
            events,
            workload: workload.clone(),
            seed,
        },
        logs,
    ))
}

/// Replace every request's lengths with the (half-up rounded) trace averages.
pub fn mean_lengths(trace: &RequestTrace) -> Result<RequestTrace> {
    let n = trace.events.len() as u64;
    if n == 0 {
        return invalid("cannot average lengths of an empty trace");
    }
    let (si, so) = trace.events.iter().fold((0u64, 0u64), |(si, so), e| {
        (si + u64::from(e.input_len), so + u64::from(e.output_len))
    });
    let avg = |s: u64| ((2 * s + n) / (2 * n)).max(1) as u32;
    let (mi, mo) = (avg(si), avg(so));
    let mut out = trace.clone();
    for e in &mut out.events {
        e.input_len = mi;
        e.output_len = mo;
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct TraceHeader {
    schema: String,
    seed: u64,
    workload: WorkloadSpec,
}

pub fn write_trace(trace: &RequestTrace, mut w: impl Write) -> Result<()> {
    let header = TraceHeader {
        schema: TRACE_SCHEMA.to_string(),
        seed: trace.seed,
        workload: trace.workload.clone(),
    };
    writeln!(w, "# {TRACE_SCHEMA}")?;
    writeln!(w, "# {}", serde_json::to_string(&header)?)?;
    writeln!(w, "arrival_time_s,adapter_id,input_len,output_len")?;
    for e in &trace.events {
        writeln!(
            w,
            "{},{},{},{}",
            e.arrival_time, e.adapter_id, e.input_len, e.output_len
        )?;
    }
    Ok(())
}

pub fn save_trace(trace: &RequestTrace, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_trace(trace, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn read_trace(reader: impl BufRead) -> Result<RequestTrace> {
    let mut lines = reader.lines();
    let mut next = || -> Result<Option<String>> { lines.next().transpose().map_err(Error::from) };
    let first = next()?.ok_or_else(|| Error::Parse("empty trace file".into()))?;
    if first.trim() != format!("# {TRACE_SCHEMA}") {
        return Err(Error::Parse(format!(
            "unsupported trace schema line {first:?}"
        )));
    }
    let header_line = next()?.ok_or_else(|| Error::Parse("missing trace header".into()))?;
    let header: TraceHeader = serde_json::from_str(header_line.trim_start_matches('#').trim())
        .map_err(|e| Error::Parse(format!("trace header: {e}")))?;
    let _columns = next()?;
    let mut events = Vec::new();
    let mut lineno = 3;
    while let Some(line) = next()? {
        lineno += 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::Parse(format!(
                "trace line {lineno}: expected 4 fields"
            )));
        }
        let bad = |what: &str| Error::Parse(format!("trace line {lineno}: bad {what}"));
        events.push(RequestEvent {
            arrival_time: f[0].trim().parse().map_err(|_| bad("arrival time"))?,
            adapter_id: AdapterId::new(f[1].trim()),
            input_len: f[2].trim().parse().map_err(|_| bad("input_len"))?,
            output_len: f[3].trim().parse().map_err(|_| bad("output_len"))?,
        });
    }
    let trace = RequestTrace {
        events,
        workload: header.workload,
        seed: header.seed,
    };
    trace.validate()?;
    Ok(trace)
}

pub fn load_trace(path: &Path) -> Result<RequestTrace> {
    read_trace(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_adapter(rate: f64, duration: f64, source: LengthSource) -> WorkloadSpec {
        WorkloadSpec {
            adapters: vec![AdapterSpec::new("a0", 8, rate)],
            duration,
            input_len_mean: 250.0,
            output_len_mean: 231.0,
            length_source: source,
        }
    }

    #[test]
    fn zero_rate_is_empty() {
        assert!(gen_poisson_arrivals(0.0, 3600.0, 7).unwrap().is_empty());
    }

    #[test]
    fn poisson_count_within_three_sigma() {
        for seed in 0..5 {
            let n = gen_poisson_arrivals(1.0, 10_000.0, seed).unwrap().len();
            assert!((9700..=10300).contains(&n), "seed {seed}: {n}");
        }
    }

    #[test]
    fn poisson_is_deterministic_and_strictly_increasing() {
        let a = gen_poisson_arrivals(2.5, 500.0, 42).unwrap();
        assert_eq!(a, gen_poisson_arrivals(2.5, 500.0, 42).unwrap());
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(a.iter().all(|&t| (0.0..500.0).contains(&t)));
    }

    #[test]
    fn poisson_rejects_bad_arguments() {
        assert!(matches!(
            gen_poisson_arrivals(-1.0, 10.0, 0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            gen_poisson_arrivals(1.0, 0.0, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn unpredictable_epoch_count() {
        let (_, log) =
            gen_unpredictable_arrivals(0.4, 900.0, &UnpredictableRegime::default(), 3).unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(log[0].rate, 0.4);
        assert_eq!(log[1].start, 300.0);
    }

    #[test]
    fn forced_doubling_trace() {
        let rates = evolve_epoch_rates(0.4, 3, 2.0, (0.05, 3.2), || true);
        assert_eq!(rates, vec![0.4, 0.8, 1.6]);
        // clipped at the upper bound afterwards
        let rates = evolve_epoch_rates(0.4, 6, 2.0, (0.05, 3.2), || true);
        assert_eq!(rates, vec![0.4, 0.8, 1.6, 3.2, 3.2, 3.2]);
    }

    #[test]
    fn point_bounds_pin_rate() {
        let regime = UnpredictableRegime {
            rate_bounds: Some((0.4, 0.4)),
            ..Default::default()
        };
        let (_, log) = gen_unpredictable_arrivals(0.4, 3000.0, &regime, 11).unwrap();
        assert!(log.iter().all(|e| e.rate == 0.4));
    }

    #[test]
    fn initial_rate_outside_bounds_rejected() {
        let regime = UnpredictableRegime {
            rate_bounds: Some((1.0, 2.0)),
            ..Default::default()
        };
        assert!(matches!(
            gen_unpredictable_arrivals(0.4, 900.0, &regime, 1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn rates_never_leave_default_bounds() {
        let regime = UnpredictableRegime::default();
        for seed in 0..20 {
            let (_, log) = gen_unpredictable_arrivals(1.0, 30_000.0, &regime, seed).unwrap();
            assert!(log.iter().all(|e| (0.125..=8.0).contains(&e.rate)));
        }
    }

    #[test]
    fn zero_rate_workload_gives_empty_trace() {
        let w = one_adapter(0.0, 100.0, LengthSource::MeanOnly);
        let t = synthesize_trace(&w, 1, &LengthSampler::LogNormal { sigma: 0.5 }).unwrap();
        assert!(t.events.is_empty());
    }

    #[test]
    fn mean_only_uses_workload_means() {
        let w = one_adapter(0.5, 200.0, LengthSource::MeanOnly);
        let t = synthesize_trace(&w, 1, &LengthSampler::Corpus(LengthCorpus::default())).unwrap();
        assert!(!t.events.is_empty());
        assert!(t
            .events
            .iter()
            .all(|e| e.input_len == 250 && e.output_len == 231));
    }

    #[test]
    fn empty_corpus_rejected_when_sampling() {
        let w = one_adapter(0.5, 200.0, LengthSource::PerRequestSampled);
        assert!(matches!(
            synthesize_trace(&w, 1, &LengthSampler::Corpus(LengthCorpus::default())),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn per_adapter_counts_within_clt_bounds() {
        let w = WorkloadSpec {
            adapters: vec![
                AdapterSpec::new("a", 8, 0.1),
                AdapterSpec::new("b", 16, 0.3),
            ],
            duration: 1e5,
            input_len_mean: 100.0,
            output_len_mean: 100.0,
            length_source: LengthSource::MeanOnly,
        };
        let t = synthesize_trace(&w, 9, &LengthSampler::LogNormal { sigma: 1.0 }).unwrap();
        t.validate().unwrap();
        for a in &w.adapters {
            let n = t.events.iter().filter(|e| e.adapter_id == a.id).count() as f64;
            let mean = a.rate * w.duration;
            assert!(
                (n - mean).abs() <= 3.0 * mean.sqrt(),
                "{}: {n} vs {mean}",
                a.id
            );
        }
    }

    #[test]
    fn corpus_sampling_draws_from_corpus() {
        let corpus = LengthCorpus {
            pairs: vec![(10, 20), (30, 40)],
        };
        let w = one_adapter(1.0, 100.0, LengthSource::PerRequestSampled);
        let t = synthesize_trace(&w, 2, &LengthSampler::Corpus(corpus.clone())).unwrap();
        assert!(t
            .events
            .iter()
            .all(|e| corpus.pairs.contains(&(e.input_len, e.output_len))));
    }

    fn trace_with_lengths(lengths: &[(u32, u32)]) -> RequestTrace {
        RequestTrace {
            events: lengths
                .iter()
                .enumerate()
                .map(|(i, &(input_len, output_len))| RequestEvent {
                    arrival_time: i as f64,
                    adapter_id: "a0".into(),
                    input_len,
                    output_len,
                })
                .collect(),
            workload: one_adapter(1.0, 100.0, LengthSource::PerRequestSampled),
            seed: 0,
        }
    }

    #[test]
    fn mean_lengths_averages() {
        let t = mean_lengths(&trace_with_lengths(&[(100, 50), (300, 150)])).unwrap();
        assert!(t
            .events
            .iter()
            .all(|e| (e.input_len, e.output_len) == (200, 100)));
        assert_eq!(t.events[1].arrival_time, 1.0);
    }

    #[test]
    fn mean_lengths_rounds_half_up_and_is_idempotent() {
        let t = trace_with_lengths(&[(1, 1), (2, 2)]);
        let once = mean_lengths(&t).unwrap();
        assert_eq!(once.events[0].input_len, 2);
        assert_eq!(mean_lengths(&once).unwrap(), once);
        let uniform = trace_with_lengths(&[(7, 9), (7, 9)]);
        assert_eq!(mean_lengths(&uniform).unwrap(), uniform);
    }

    #[test]
    fn mean_lengths_rejects_empty() {
        assert!(mean_lengths(&trace_with_lengths(&[])).is_err());
    }

    #[test]
    fn trace_file_round_trip() {
        let w = WorkloadSpec {
            adapters: vec![
                AdapterSpec::new("x", 8, 0.7),
                AdapterSpec::new("y", 32, 0.2),
            ],
            duration: 300.0,
            input_len_mean: 120.0,
            output_len_mean: 80.0,
            length_source: LengthSource::PerRequestSampled,
        };
        let t = synthesize_trace(&w, 5, &LengthSampler::LogNormal { sigma: 0.8 }).unwrap();
        let mut buf = Vec::new();
        write_trace(&t, &mut buf).unwrap();
        let back = read_trace(buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn corpus_parse_accepts_commas_and_spaces() {
        let c = LengthCorpus::parse("# comment\n10,20\n5 7\n\n".as_bytes()).unwrap();
        assert_eq!(c.pairs, vec![(10, 20), (5, 7)]);
        assert!(LengthCorpus::parse("1,2,3\n".as_bytes()).is_err());
    }
}
