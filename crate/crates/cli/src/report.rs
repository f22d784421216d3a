//! Tab-separated report tables. Column order is fixed per kind and rows are
//! sorted by (x-point, series), so identical inputs give identical bytes.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use lorapack_core::placement::{GpuCheck, Plan};
use lorapack_core::twin::{SweepResult, TimelineSample};
use serde::{Deserialize, Serialize};

use crate::artifacts::REPORT_SCHEMA;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportKind {
    Sweep,
    Timeline,
    Gpus,
}

impl ReportKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sweep => "sweep",
            Self::Timeline => "timeline",
            Self::Gpus => "gpus",
        }
    }

    fn columns(self) -> &'static [&'static str] {
        match self {
            Self::Sweep => &[
                "n_adapters",
                "series",
                "a_max",
                "s_max",
                "feasible",
                "throughput",
                "incoming_token_rate",
                "starved",
                "max_pack",
            ],
            Self::Timeline => &["series", "t", "running", "waiting"],
            Self::Gpus => &[
                "n_adapters",
                "strategy",
                "status",
                "gpus_available",
                "gpus_used",
                "predicted_starved_gpus",
                "dt_starved_gpus",
                "dt_memory_infeasible_gpus",
            ],
        }
    }
}

pub struct Table {
    kind: ReportKind,
    seeds: BTreeSet<u64>,
    profiles: BTreeSet<String>,
    rows: Vec<(Vec<String>, Vec<String>)>,
}

fn num(v: f64) -> String {
    format!("{v:.3}")
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "-".into(), |v| v.to_string())
}

impl Table {
    pub fn new(kind: ReportKind) -> Self {
        Self {
            kind,
            seeds: BTreeSet::new(),
            profiles: BTreeSet::new(),
            rows: Vec::new(),
        }
    }

    pub fn source(&mut self, seed: u64, profile_hash: &str) {
        self.seeds.insert(seed);
        self.profiles.insert(profile_hash.to_string());
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn add_sweep(&mut self, series: &str, sweep: &SweepResult) {
        for (i, p) in sweep.points.iter().enumerate() {
            let key = vec![
                format!("{:08}", p.n_adapters),
                series.to_string(),
                format!("{:08}", p.device.a_max),
            ];
            self.rows.push((
                key,
                vec![
                    p.n_adapters.to_string(),
                    series.to_string(),
                    p.device.a_max.to_string(),
                    p.device.s_max.to_string(),
                    u8::from(p.feasible).to_string(),
                    num(p.throughput),
                    num(p.incoming_token_rate),
                    u8::from(p.starved).to_string(),
                    u8::from(i == sweep.max_pack).to_string(),
                ],
            ));
        }
    }

    pub fn add_timeline(&mut self, series: &str, timeline: &[TimelineSample]) {
        for (i, s) in timeline.iter().enumerate() {
            self.rows.push((
                vec![series.to_string(), format!("{i:010}")],
                vec![
                    series.to_string(),
                    num(s.t),
                    s.running.to_string(),
                    s.waiting.to_string(),
                ],
            ));
        }
    }

    pub fn add_placement(&mut self, row: &PlacementRow) {
        self.rows.push((
            vec![format!("{:08}", row.n_adapters), row.strategy.clone()],
            vec![
                row.n_adapters.to_string(),
                row.strategy.clone(),
                row.status.clone(),
                row.gpus_available.to_string(),
                opt(row.gpus_used),
                opt(row.predicted_starved_gpus),
                opt(row.dt_starved_gpus),
                opt(row.dt_memory_infeasible_gpus),
            ],
        ));
    }

    pub fn render(&self) -> String {
        let join = |v: Vec<String>| {
            if v.is_empty() {
                "-".to_string()
            } else {
                v.join(",")
            }
        };
        let mut out = format!(
            "# {REPORT_SCHEMA} kind={} seed={} profile_hash={}\n",
            self.kind.name(),
            join(self.seeds.iter().map(u64::to_string).collect()),
            join(self.profiles.iter().cloned().collect()),
        );
        out.push_str(&self.kind.columns().join("\t"));
        out.push('\n');
        let mut rows: Vec<_> = self.rows.iter().collect();
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        for (_, cells) in rows {
            let _ = writeln!(out, "{}", cells.join("\t"));
        }
        out
    }
}

/// One placement attempt: a plan when the strategy succeeded, the error
/// class otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementRow {
    pub n_adapters: usize,
    pub strategy: String,
    pub status: String,
    pub gpus_available: usize,
    pub gpus_used: Option<usize>,
    pub predicted_starved_gpus: Option<usize>,
    pub dt_starved_gpus: Option<usize>,
    pub dt_memory_infeasible_gpus: Option<usize>,
}

impl PlacementRow {
    pub fn from_plan(plan: &Plan, checks: Option<&[GpuCheck]>) -> Self {
        Self {
            n_adapters: plan.assignment.len(),
            strategy: plan.strategy.clone(),
            status: "ok".into(),
            gpus_available: plan.gpus_available,
            gpus_used: Some(plan.gpus_used),
            predicted_starved_gpus: Some(plan.gpus.iter().filter(|g| g.predicted_starved).count()),
            dt_starved_gpus: checks
                .map(|c| c.iter().filter(|g| g.memory_feasible && g.starved).count()),
            dt_memory_infeasible_gpus: checks
                .map(|c| c.iter().filter(|g| !g.memory_feasible).count()),
        }
    }

    pub fn failed(n_adapters: usize, strategy: &str, gpus_available: usize, status: &str) -> Self {
        Self {
            n_adapters,
            strategy: strategy.into(),
            status: status.into(),
            gpus_available,
            gpus_used: None,
            predicted_starved_gpus: None,
            dt_starved_gpus: None,
            dt_memory_infeasible_gpus: None,
        }
    }
}
