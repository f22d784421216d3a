//! Calibrated latency and memory models driving the digital twin.
//!
//! Four estimators are kept: `mem_max` (KV-token capacity left after the
//! adapter reservation), `lat_sched`, `lat_load` and `lat_model`. The two
//! analytical ones are linear in their constants; the other two are lookup
//! tables interpolated between profiled points.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};

pub const PROFILE_SCHEMA: &str = "lorapack-profile v1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    /// Scheduler cost per batched request (ms).
    pub k1: f64,
    /// Scheduler cost per pending request (ms).
    pub k2: f64,
    /// Scheduler scan penalty (ms per pending request, scaled by A_B / A).
    pub k3: f64,
    /// Backbone latency slope (ms per batched request).
    pub k4: f64,
    /// Backbone latency intercept (ms).
    pub k5: f64,
    /// Adapter overhead slope (per distinct adapter in the batch).
    pub k6: f64,
    /// Adapter overhead intercept.
    pub k7: f64,
    /// KV tokens available with no adapter reservation.
    pub gpu_capacity_tokens: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemPoint {
    pub a_max: u32,
    pub s_max: u32,
    pub t_max: f64,
}

/// Complete rectangular grid of `(A_max, S_max) -> T_max` measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<MemPoint>", into = "Vec<MemPoint>")]
pub struct MemTable {
    a_values: Vec<f64>,
    s_values: Vec<f64>,
    /// Row-major, `grid[ia * s_values.len() + is]`.
    grid: Vec<f64>,
}

impl TryFrom<Vec<MemPoint>> for MemTable {
    type Error = String;

    fn try_from(points: Vec<MemPoint>) -> Result<Self, String> {
        if points.is_empty() {
            return Err("mem_table is empty".into());
        }
        let mut a: Vec<u32> = points.iter().map(|p| p.a_max).collect();
        let mut s: Vec<u32> = points.iter().map(|p| p.s_max).collect();
        a.sort_unstable();
        a.dedup();
        s.sort_unstable();
        s.dedup();
        if points.len() != a.len() * s.len() {
            return Err(format!(
                "mem_table must be a complete grid: {} points for {}x{} axes",
                points.len(),
                a.len(),
                s.len()
            ));
        }
        let mut grid = vec![f64::NAN; a.len() * s.len()];
        for p in &points {
            let ia = a.binary_search(&p.a_max).expect("axis value");
            let is = s.binary_search(&p.s_max).expect("axis value");
            let cell = &mut grid[ia * s.len() + is];
            if !cell.is_nan() {
                return Err(format!(
                    "duplicate mem_table point ({}, {})",
                    p.a_max, p.s_max
                ));
            }
            *cell = p.t_max;
        }
        Ok(Self {
            a_values: a.into_iter().map(f64::from).collect(),
            s_values: s.into_iter().map(f64::from).collect(),
            grid,
        })
    }
}

impl From<MemTable> for Vec<MemPoint> {
    fn from(t: MemTable) -> Self {
        t.points()
    }
}

/// Index of the left end of the segment used to interpolate at `x`, plus the
/// (possibly out-of-range) fractional position inside it.
fn segment(axis: &[f64], x: f64) -> (usize, f64) {
    if axis.len() == 1 {
        return (0, 0.0);
    }
    let i = match axis.iter().position(|&v| v > x) {
        Some(0) => 0,
        Some(p) => p - 1,
        None => axis.len() - 2,
    }
    .min(axis.len() - 2);
    (i, (x - axis[i]) / (axis[i + 1] - axis[i]))
}

impl MemTable {
    pub fn points(&self) -> Vec<MemPoint> {
        let ns = self.s_values.len();
        let mut out = Vec::with_capacity(self.grid.len());
        for (ia, a) in self.a_values.iter().enumerate() {
            for (is, s) in self.s_values.iter().enumerate() {
                out.push(MemPoint {
                    a_max: *a as u32,
                    s_max: *s as u32,
                    t_max: self.grid[ia * ns + is],
                });
            }
        }
        out
    }

    fn at(&self, ia: usize, is: usize) -> f64 {
        self.grid[ia * self.s_values.len() + is]
    }

    /// Bilinear interpolation, extrapolating linearly off the grid.
    pub fn interpolate(&self, a: f64, s: f64) -> f64 {
        let (ia, ta) = segment(&self.a_values, a);
        let (is, ts) = segment(&self.s_values, s);
        let ia1 = (ia + 1).min(self.a_values.len() - 1);
        let is1 = (is + 1).min(self.s_values.len() - 1);
        let v00 = self.at(ia, is);
        let v01 = self.at(ia, is1);
        let v10 = self.at(ia1, is);
        let v11 = self.at(ia1, is1);
        let lo = v00 + (v01 - v00) * ts;
        let hi = v10 + (v11 - v10) * ts;
        lo + (hi - lo) * ta
    }

    fn check_monotone(&self) -> Result<()> {
        let (na, ns) = (self.a_values.len(), self.s_values.len());
        for ia in 0..na {
            for is in 0..ns {
                let v = self.at(ia, is);
                if ia + 1 < na && self.at(ia + 1, is) > v {
                    return invalid("mem_table must be nonincreasing in A_max");
                }
                if is + 1 < ns && self.at(ia, is + 1) > v {
                    return invalid("mem_table must be nonincreasing in S_max");
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadPoint {
    pub size: u32,
    pub latency_ms: f64,
}

/// Adapter size -> CPU-to-GPU load latency, sorted by size.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<LoadPoint>", into = "Vec<LoadPoint>")]
pub struct LoadTable {
    points: Vec<LoadPoint>,
}

impl TryFrom<Vec<LoadPoint>> for LoadTable {
    type Error = String;

    fn try_from(mut points: Vec<LoadPoint>) -> Result<Self, String> {
        points.sort_by_key(|p| p.size);
        if points.windows(2).any(|w| w[0].size == w[1].size) {
            return Err("duplicate size in load_table".into());
        }
        Ok(Self { points })
    }
}

impl From<LoadTable> for Vec<LoadPoint> {
    fn from(t: LoadTable) -> Self {
        t.points
    }
}

impl LoadTable {
    pub fn points(&self) -> &[LoadPoint] {
        &self.points
    }

    pub fn interpolate(&self, size: f64) -> f64 {
        match self.points.len() {
            0 => 0.0,
            1 => self.points[0].latency_ms.max(0.0),
            _ => {
                let xs: Vec<f64> = self.points.iter().map(|p| f64::from(p.size)).collect();
                let (i, t) = segment(&xs, size);
                let (y0, y1) = (self.points[i].latency_ms, self.points[i + 1].latency_ms);
                (y0 + (y1 - y0) * t).max(0.0)
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfileMeta {
    pub hardware: String,
    pub model_name: String,
    /// True when the numbers are synthetic rather than measured.
    #[serde(default)]
    pub fixture: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    pub schema: String,
    pub constants: Constants,
    pub mem_table: MemTable,
    pub load_table: LoadTable,
    pub meta: ProfileMeta,
}

impl CalibrationProfile {
    pub fn new(
        constants: Constants,
        mem_table: MemTable,
        load_table: LoadTable,
        meta: ProfileMeta,
    ) -> Result<Self> {
        let p = Self {
            schema: PROFILE_SCHEMA.to_string(),
            constants,
            mem_table,
            load_table,
            meta,
        };
        p.validate()?;
        Ok(p)
    }

    /// Synthetic H100-class profile used when no benchmark data is available.
    /// Every number here is a fixture, not a measurement.
    pub fn synthetic_fixture() -> Self {
        let constants = Constants {
            k1: 0.01,
            k2: 0.00002,
            k3: 0.0002,
            k4: 0.12,
            k5: 18.0,
            k6: 0.0015,
            k7: 1.10,
            gpu_capacity_tokens: FIXTURE_CAPACITY,
        };
        let mut points = Vec::new();
        for &a in &[1u32, 8, 16, 32, 64, 96, 128, 160, 192, 256, 320, 384] {
            for &s in &[8u32, 16, 32] {
                points.push(MemPoint {
                    a_max: a,
                    s_max: s,
                    t_max: fixture_t_max(a, s),
                });
            }
        }
        let load = vec![
            LoadPoint {
                size: 8,
                latency_ms: 15.0,
            },
            LoadPoint {
                size: 16,
                latency_ms: 25.0,
            },
            LoadPoint {
                size: 32,
                latency_ms: 45.0,
            },
        ];
        Self::new(
            constants,
            MemTable::try_from(points).expect("fixture grid"),
            LoadTable::try_from(load).expect("fixture load table"),
            ProfileMeta {
                hardware: "synthetic-fixture".into(),
                model_name: "synthetic-7b".into(),
                fixture: true,
            },
        )
        .expect("fixture profile is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.constants;
        let all = [
            c.k1,
            c.k2,
            c.k3,
            c.k4,
            c.k5,
            c.k6,
            c.k7,
            c.gpu_capacity_tokens,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return invalid("profile constants must be finite");
        }
        if !(c.k4 > 0.0) || c.k5 < 0.0 || c.k6 < 0.0 || c.k7 < 1.0 {
            return invalid("profile requires k4 > 0, k5 >= 0, k6 >= 0, k7 >= 1");
        }
        if c.k1 < 0.0 || c.k2 < 0.0 || c.k3 < 0.0 {
            return invalid("scheduler constants must be >= 0");
        }
        if !(c.gpu_capacity_tokens > 0.0) {
            return invalid("gpu_capacity_tokens must be positive");
        }
        self.mem_table.check_monotone()?;
        if self
            .load_table
            .points
            .windows(2)
            .any(|w| w[1].latency_ms < w[0].latency_ms)
        {
            return invalid("load_table must be nondecreasing in size");
        }
        Ok(())
    }

    /// KV-token capacity with `a_max` reserved slots of rank `s_max`.
    pub fn mem_max(&self, a_max: usize, s_max: u32) -> Result<f64> {
        if s_max == 0 {
            return invalid("S_max must be positive");
        }
        let cap = self.constants.gpu_capacity_tokens;
        if a_max == 0 {
            return Ok(cap);
        }
        let t = self
            .mem_table
            .interpolate(a_max as f64, f64::from(s_max))
            .min(cap);
        if t <= 0.0 {
            return Err(Error::MemoryExceeded {
                a_max,
                s_max,
                t_max: t,
            });
        }
        Ok(t)
    }

    pub fn is_feasible(&self, a_max: usize, s_max: u32) -> bool {
        self.mem_max(a_max, s_max).is_ok()
    }

    /// Scheduler latency (ms).
    pub fn lat_sched(
        &self,
        batch: usize,
        pending: usize,
        batch_adapters: usize,
        total_adapters: usize,
    ) -> Result<f64> {
        if batch_adapters > 0 && total_adapters == 0 {
            return invalid("A_B > 0 requires A >= 1");
        }
        Ok(self.sched_ms(batch, pending, batch_adapters, total_adapters))
    }

    #[inline]
    pub(crate) fn sched_ms(
        &self,
        batch: usize,
        pending: usize,
        batch_adapters: usize,
        total_adapters: usize,
    ) -> f64 {
        let c = &self.constants;
        let rp = pending as f64;
        let scan = if batch_adapters == 0 {
            0.0
        } else {
            c.k3 * rp * (batch_adapters as f64 / total_adapters as f64)
        };
        c.k1 * batch as f64 + c.k2 * rp + scan
    }

    /// CPU-to-GPU load latency for an adapter of rank `size` (ms).
    pub fn lat_load(&self, size: u32) -> f64 {
        self.load_table.interpolate(f64::from(size))
    }

    /// Multiplicative compute overhead of `adapters` distinct adapters.
    #[inline]
    pub fn overhead(&self, adapters: usize) -> f64 {
        if adapters == 0 {
            1.0
        } else {
            self.constants.k6 * adapters as f64 + self.constants.k7
        }
    }

    #[inline]
    pub fn backbone_ms(&self, batch: usize) -> f64 {
        self.constants.k4 * batch as f64 + self.constants.k5
    }

    /// Forward-pass latency of a batch of `batch` requests spanning `adapters` distinct adapters (ms).
    pub fn lat_model(&self, batch: usize, adapters: usize) -> Result<f64> {
        if adapters > batch {
            return invalid(format!(
                "{adapters} distinct adapters cannot appear in a batch of {batch}"
            ));
        }
        Ok(self.model_ms(batch, adapters))
    }

    #[inline]
    pub(crate) fn model_ms(&self, batch: usize, adapters: usize) -> f64 {
        self.backbone_ms(batch) * self.overhead(adapters)
    }

    /// Short content hash identifying this profile in artifact headers.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("profile serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: Self = serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        if p.schema != PROFILE_SCHEMA {
            return Err(Error::Parse(format!(
                "unsupported profile schema {:?}",
                p.schema
            )));
        }
        p.validate()?;
        Ok(p)
    }
}

const FIXTURE_CAPACITY: f64 = 90_000.0;
/// KV tokens displaced per reserved slot per unit of rank in the fixture.
const FIXTURE_TOKENS_PER_RANK: f64 = 8.0;

fn fixture_t_max(a_max: u32, s_max: u32) -> f64 {
    (FIXTURE_CAPACITY - FIXTURE_TOKENS_PER_RANK * f64::from(a_max) * f64::from(s_max)).max(0.0)
}

/// A profiling measurement. One record per line in sample files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProfilingSample {
    SchedLat {
        batch: u32,
        pending: u32,
        batch_adapters: u32,
        total_adapters: u32,
        observed_ms: f64,
    },
    ModelLat {
        batch: u32,
        adapters: u32,
        observed_ms: f64,
    },
    LoadLat {
        size: u32,
        observed_ms: f64,
    },
    MemCap {
        a_max: u32,
        s_max: u32,
        observed_tokens: f64,
    },
}

impl ProfilingSample {
    fn observed(&self) -> f64 {
        match *self {
            ProfilingSample::SchedLat { observed_ms, .. }
            | ProfilingSample::ModelLat { observed_ms, .. }
            | ProfilingSample::LoadLat { observed_ms, .. } => observed_ms,
            ProfilingSample::MemCap {
                observed_tokens, ..
            } => observed_tokens,
        }
    }
}

pub fn read_samples(reader: impl BufRead) -> Result<Vec<ProfilingSample>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let s: ProfilingSample = serde_json::from_str(line)
            .map_err(|e| Error::Parse(format!("sample line {}: {e}", n + 1)))?;
        if !(s.observed() >= 0.0) {
            return Err(Error::Parse(format!(
                "sample line {}: observed value must be >= 0",
                n + 1
            )));
        }
        out.push(s);
    }
    Ok(out)
}

pub fn write_samples(samples: &[ProfilingSample], mut w: impl Write) -> Result<()> {
    for s in samples {
        writeln!(w, "{}", serde_json::to_string(s)?)?;
    }
    Ok(())
}

/// Noiseless profiling samples generated from `profile`, covering every
/// constant group and every table point.
pub fn synthetic_samples(profile: &CalibrationProfile) -> Vec<ProfilingSample> {
    let mut out = Vec::new();
    for &b in &[1u32, 2, 4, 8, 16, 32, 64, 128, 256] {
        out.push(ProfilingSample::ModelLat {
            batch: b,
            adapters: 0,
            observed_ms: profile.model_ms(b as usize, 0),
        });
        for &a in &[1u32, 2, 4, 8, 16, 32, 64] {
            if a <= b {
                out.push(ProfilingSample::ModelLat {
                    batch: b,
                    adapters: a,
                    observed_ms: profile.model_ms(b as usize, a as usize),
                });
            }
        }
    }
    for &b in &[0u32, 8, 64, 200] {
        for &rp in &[0u32, 50, 400, 2000] {
            for &(ab, at) in &[(0u32, 16u32), (4, 16), (8, 8), (16, 128)] {
                out.push(ProfilingSample::SchedLat {
                    batch: b,
                    pending: rp,
                    batch_adapters: ab,
                    total_adapters: at,
                    observed_ms: profile.sched_ms(
                        b as usize,
                        rp as usize,
                        ab as usize,
                        at as usize,
                    ),
                });
            }
        }
    }
    for p in profile.load_table.points() {
        out.push(ProfilingSample::LoadLat {
            size: p.size,
            observed_ms: p.latency_ms,
        });
    }
    for p in profile.mem_table.points() {
        out.push(ProfilingSample::MemCap {
            a_max: p.a_max,
            s_max: p.s_max,
            observed_tokens: p.t_max,
        });
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupResidual {
    pub n: usize,
    pub max_abs_error: f64,
    pub rms_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub groups: BTreeMap<String, GroupResidual>,
    pub warnings: Vec<String>,
}

impl FitReport {
    pub fn max_abs_error(&self) -> f64 {
        self.groups
            .values()
            .map(|g| g.max_abs_error)
            .fold(0.0, f64::max)
    }

    fn record(&mut self, name: &str, residuals: impl Iterator<Item = f64>) {
        let r: Vec<f64> = residuals.collect();
        if r.is_empty() {
            return;
        }
        let max_abs_error = r.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let rms_error = (r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64).sqrt();
        self.groups.insert(
            name.to_string(),
            GroupResidual {
                n: r.len(),
                max_abs_error,
                rms_error,
            },
        );
    }
}

/// Ordinary least squares; fails when the design matrix is rank deficient.
pub(crate) fn least_squares(rows: &[Vec<f64>], y: &[f64], group: &str) -> Result<Vec<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.len() < ncols.max(2) {
        return Err(Error::FitFailure(format!(
            "{group}: need at least {} samples, got {}",
            ncols.max(2),
            rows.len()
        )));
    }
    let design = DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]);
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin <= smax * 1e-10 {
        return Err(Error::FitFailure(format!(
            "{group}: rank-deficient design (identical abscissae?)"
        )));
    }
    let sol = svd
        .solve(&DVector::from_column_slice(y), 0.0)
        .map_err(|e| Error::FitFailure(format!("{group}: {e}")))?;
    Ok(sol.iter().copied().collect())
}

/// Fit every constant group and copy the tables from profiling samples.
pub fn fit_calibration(
    samples: &[ProfilingSample],
    meta: ProfileMeta,
) -> Result<(CalibrationProfile, FitReport)> {
    if samples.is_empty() {
        return Err(Error::FitFailure("no profiling samples".into()));
    }
    let mut report = FitReport::default();

    let mut backbone = Vec::new();
    let mut with_adapters = Vec::new();
    let mut sched = Vec::new();
    let mut loads: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut mem = Vec::new();
    for s in samples {
        match *s {
            ProfilingSample::ModelLat {
                batch,
                adapters: 0,
                observed_ms,
            } => backbone.push((f64::from(batch), observed_ms)),
            ProfilingSample::ModelLat {
                batch,
                adapters,
                observed_ms,
            } => with_adapters.push((batch, adapters, observed_ms)),
            ProfilingSample::SchedLat {
                batch,
                pending,
                batch_adapters,
                total_adapters,
                observed_ms,
            } => sched.push((batch, pending, batch_adapters, total_adapters, observed_ms)),
            ProfilingSample::LoadLat { size, observed_ms } => {
                loads.entry(size).or_default().push(observed_ms)
            }
            ProfilingSample::MemCap {
                a_max,
                s_max,
                observed_tokens,
            } => mem.push((a_max, s_max, observed_tokens)),
        }
    }

    let rows: Vec<Vec<f64>> = backbone.iter().map(|&(b, _)| vec![b, 1.0]).collect();
    let ys: Vec<f64> = backbone.iter().map(|&(_, y)| y).collect();
    let kb = least_squares(&rows, &ys, "backbone (ModelLat, A=0)")?;
    let (k4, k5) = (kb[0], kb[1]);

    let (k6, k7) = if with_adapters.is_empty() {
        report
            .warnings
            .push("no ModelLat samples with adapters; overhead fixed to 1".into());
        (0.0, 1.0)
    } else {
        let rows: Vec<Vec<f64>> = with_adapters
            .iter()
            .map(|&(_, a, _)| vec![f64::from(a), 1.0])
            .collect();
        let ys: Vec<f64> = with_adapters
            .iter()
            .map(|&(b, _, y)| y / (k4 * f64::from(b) + k5))
            .collect();
        let ko = least_squares(&rows, &ys, "adapter overhead (ModelLat, A>=1)")?;
        (ko[0], ko[1])
    };

    let (k1, k2, k3) = if sched.is_empty() {
        report
            .warnings
            .push("no SchedLat samples; scheduler latency fixed to 0".into());
        (0.0, 0.0, 0.0)
    } else {
        let mut rows = Vec::with_capacity(sched.len());
        for &(b, rp, ab, at, _) in &sched {
            if ab > 0 && at == 0 {
                return Err(Error::FitFailure(
                    "SchedLat sample with A_B > 0 and A = 0".into(),
                ));
            }
            let frac = if ab == 0 {
                0.0
            } else {
                f64::from(ab) / f64::from(at)
            };
            rows.push(vec![f64::from(b), f64::from(rp), f64::from(rp) * frac]);
        }
        let ys: Vec<f64> = sched.iter().map(|s| s.4).collect();
        let ks = least_squares(&rows, &ys, "scheduler (SchedLat)")?;
        (ks[0], ks[1], ks[2])
    };

    let load_points: Vec<LoadPoint> = loads
        .iter()
        .map(|(&size, v)| LoadPoint {
            size,
            latency_ms: v.iter().sum::<f64>() / v.len() as f64,
        })
        .collect();
    let load_table = LoadTable::try_from(load_points).map_err(Error::FitFailure)?;

    let capacity_samples: Vec<f64> = mem.iter().filter(|m| m.0 == 0).map(|m| m.2).collect();
    let grid: Vec<MemPoint> = mem
        .iter()
        .filter(|m| m.0 > 0)
        .map(|&(a_max, s_max, t_max)| MemPoint {
            a_max,
            s_max,
            t_max,
        })
        .collect();
    if grid.is_empty() {
        return Err(Error::FitFailure("no MemCap samples with A_max > 0".into()));
    }
    let mem_table = MemTable::try_from(grid).map_err(Error::FitFailure)?;
    let gpu_capacity_tokens = if capacity_samples.is_empty() {
        mem_table.grid.iter().copied().fold(f64::MIN, f64::max)
    } else {
        capacity_samples.iter().copied().fold(f64::MIN, f64::max)
    };

    let profile = CalibrationProfile::new(
        Constants {
            k1,
            k2,
            k3,
            k4,
            k5,
            k6,
            k7,
            gpu_capacity_tokens,
        },
        mem_table,
        load_table,
        meta,
    )
    .map_err(|e| Error::FitFailure(format!("fitted profile violates invariants: {e}")))?;

    report.record(
        "model_lat",
        backbone
            .iter()
            .map(|&(b, y)| y - profile.model_ms(b as usize, 0))
            .chain(
                with_adapters
                    .iter()
                    .map(|&(b, a, y)| y - profile.model_ms(b as usize, a as usize)),
            ),
    );
    report.record(
        "sched_lat",
        sched.iter().map(|&(b, rp, ab, at, y)| {
            y - profile.sched_ms(b as usize, rp as usize, ab as usize, at as usize)
        }),
    );
    report.record(
        "load_lat",
        loads
            .iter()
            .flat_map(|(&s, v)| v.iter().map(move |y| (s, *y)))
            .map(|(s, y)| y - profile.lat_load(s)),
    );
    report.record(
        "mem_cap",
        mem.iter().filter(|m| m.0 > 0).map(|&(a, s, y)| {
            y - profile
                .mem_table
                .interpolate(f64::from(a), f64::from(s))
                .min(profile.constants.gpu_capacity_tokens)
        }),
    );
    Ok((profile, report))
}
