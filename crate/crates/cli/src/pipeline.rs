//! dataset -> train -> distill -> place -> report, driven by one TOML file.
//!
//! Each stage records a digest of its inputs under `<out>/.stamps` and is
//! skipped on rerun when the digest and its outputs are unchanged.

use std::fs;
use std::path::{Path, PathBuf};

use lorapack_core::surrogate::dataset::{load_dataset, save_dataset, DEFAULT_RATES, DEFAULT_SIZES};
use lorapack_core::surrogate::ScenarioGrid;
use lorapack_core::twin::{
    run_simulation_with, DeviceConfig, DeviceSweep, SimOptions, WorkloadTemplate,
};
use lorapack_core::workload::{random_adapters, synthesize_trace, AdapterSpec, LengthSampler};
use lorapack_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    read_envelope, read_workload, require, stamp, write_json, write_text, Envelope, Stamps,
    PLACEMENTS_SCHEMA,
};
use crate::commands::{
    build_dataset, check_path, confirm, dataset_header, distill_models, load_models, model_paths,
    place_one, rule_paths, run_sweep, save_rules, train_models, write_checks, Ctx, PlaceSetup,
    Predictors, Strategy, TrainSettings,
};
use crate::report::{PlacementRow, ReportKind, Table};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Setup = 0,
    Dataset = 1,
    Train = 2,
    Distill = 3,
    Place = 4,
    Report = 5,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Setup => "setup",
            Self::Dataset => "dataset",
            Self::Train => "train",
            Self::Distill => "distill",
            Self::Place => "place",
            Self::Report => "report",
        }
    }
}

#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub error: Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub dataset: bool,
    pub train: bool,
    pub distill: bool,
    pub place: bool,
    pub report: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self {
            dataset: true,
            train: true,
            distill: true,
            place: true,
            report: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSettings {
    pub budget: usize,
}

impl Default for DistillSettings {
    fn default() -> Self {
        Self { budget: 32 }
    }
}

/// Random adapters drawn from the size and rate menus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSettings {
    pub n_adapters: usize,
    pub sizes: Vec<u32>,
    pub rates: Vec<f64>,
}

impl Default for GenerateSettings {
    fn default() -> Self {
        Self {
            n_adapters: 64,
            sizes: DEFAULT_SIZES.to_vec(),
            rates: DEFAULT_RATES.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlaceSettings {
    pub gpus: usize,
    pub strategies: Vec<Strategy>,
    /// Workload file; when absent adapters come from `generate`.
    pub workload: Option<PathBuf>,
    pub generate: GenerateSettings,
    /// Leading-prefix sizes of the workload to place; empty means all of it.
    pub adapter_counts: Vec<usize>,
    pub testing_points: Option<Vec<usize>>,
    pub backbone_cap: Option<f64>,
    /// Replay every plan in the twin.
    pub confirm: bool,
}

impl Default for PlaceSettings {
    fn default() -> Self {
        Self {
            gpus: 4,
            strategies: Strategy::ALL.to_vec(),
            workload: None,
            generate: GenerateSettings::default(),
            adapter_counts: Vec::new(),
            testing_points: None,
            backbone_cap: None,
            confirm: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub rate: f64,
    pub size: u32,
    pub counts: Vec<usize>,
    pub duration: f64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            rate: 0.4,
            size: 8,
            counts: vec![8, 16, 24, 32, 40, 48, 56, 64, 96, 128],
            duration: 300.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSettings {
    pub sweep: SweepSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Calibration profile; the synthetic fixture when absent.
    pub profile: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub stages: Stages,
    pub dataset: ScenarioGrid,
    pub train: TrainSettings,
    pub distill: DistillSettings,
    pub place: PlaceSettings,
    pub report: ReportSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            profile: None,
            out_dir: PathBuf::from("pipeline-out"),
            stages: Stages::default(),
            dataset: ScenarioGrid::default(),
            train: TrainSettings::default(),
            distill: DistillSettings::default(),
            place: PlaceSettings::default(),
            report: ReportSettings::default(),
        }
    }
}

impl PipelineConfig {
    /// Parse a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = crate::artifacts::read_structured(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.profile.as_mut() {
            rebase(p);
        }
        if let Some(p) = cfg.place.workload.as_mut() {
            rebase(p);
        }
        rebase(&mut cfg.out_dir);
        Ok(cfg)
    }
}

struct Layout {
    dataset: PathBuf,
    models: PathBuf,
    plans: PathBuf,
    reports: PathBuf,
}

impl Layout {
    fn new(out: &Path) -> Self {
        Self {
            dataset: out.join("dataset.csv"),
            models: out.join("models"),
            plans: out.join("plans"),
            reports: out.join("reports"),
        }
    }

    fn placements(&self) -> PathBuf {
        self.plans.join("placements.json")
    }
}

fn file_digest(paths: &[PathBuf]) -> Result<String> {
    let mut bytes = Vec::new();
    for p in paths {
        bytes.push(stamp(&fs::read(p)?)?);
    }
    stamp(&bytes)
}

pub fn run(cfg: &PipelineConfig) -> std::result::Result<(), StageError> {
    let at = |stage: Stage| move |error: Error| StageError { stage, error };
    let ctx = Ctx::new(cfg.seed, cfg.profile.as_deref(), cfg.out_dir.clone())
        .map_err(at(Stage::Setup))?;
    fs::create_dir_all(&ctx.out_dir).map_err(|e| at(Stage::Setup)(e.into()))?;
    let layout = Layout::new(&ctx.out_dir);
    let stamps = Stamps::new(&ctx.out_dir);
    log::info!(
        "pipeline seed {} profile {} -> {}",
        ctx.seed,
        ctx.profile_hash,
        ctx.out_dir.display()
    );

    if cfg.stages.dataset {
        dataset_stage(&ctx, cfg, &layout, &stamps).map_err(at(Stage::Dataset))?;
    }
    if cfg.stages.train {
        train_stage(&ctx, cfg, &layout, &stamps).map_err(at(Stage::Train))?;
    }
    if cfg.stages.distill {
        distill_stage(&ctx, cfg, &layout, &stamps).map_err(at(Stage::Distill))?;
    }
    if cfg.stages.place {
        place_stage(&ctx, cfg, &layout).map_err(at(Stage::Place))?;
    }
    if cfg.stages.report {
        report_stage(&ctx, cfg, &layout).map_err(at(Stage::Report))?;
    }
    Ok(())
}

fn dataset_stage(ctx: &Ctx, cfg: &PipelineConfig, layout: &Layout, stamps: &Stamps) -> Result<()> {
    let digest = stamp(&(&cfg.dataset, ctx.seed, &ctx.profile_hash))?;
    if stamps.fresh("dataset", &digest, std::slice::from_ref(&layout.dataset)) {
        log::info!("dataset: up to date");
        return Ok(());
    }
    // Samples are keyed by scenario, so those already labelled under the
    // same seed and profile are reused.
    let existing = match load_dataset(&layout.dataset) {
        Ok((h, s)) if h == dataset_header(ctx) => s,
        _ => Vec::new(),
    };
    let samples = build_dataset(ctx, &cfg.dataset, &existing)?;
    save_dataset(&dataset_header(ctx), &samples, &layout.dataset)?;
    stamps.record("dataset", &digest)
}

fn train_stage(ctx: &Ctx, cfg: &PipelineConfig, layout: &Layout, stamps: &Stamps) -> Result<()> {
    require(&layout.dataset, "dataset")?;
    let digest = stamp(&(
        file_digest(std::slice::from_ref(&layout.dataset))?,
        &cfg.train,
        ctx.seed,
    ))?;
    let outputs = model_paths(&layout.models);
    if stamps.fresh("train", &digest, &outputs) {
        log::info!("train: up to date");
        return Ok(());
    }
    let samples = crate::commands::read_dataset_for(ctx, &layout.dataset)?;
    let (thr, starv) = train_models(ctx, &samples, &cfg.train)?;
    fs::create_dir_all(&layout.models)?;
    thr.save(&outputs[0])?;
    starv.save(&outputs[1])?;
    stamps.record("train", &digest)
}

fn distill_stage(ctx: &Ctx, cfg: &PipelineConfig, layout: &Layout, stamps: &Stamps) -> Result<()> {
    require(&layout.dataset, "dataset")?;
    let models = model_paths(&layout.models);
    for m in &models {
        require(m, "model")?;
    }
    let mut inputs = vec![layout.dataset.clone()];
    inputs.extend(models);
    let digest = stamp(&(file_digest(&inputs)?, &cfg.distill))?;
    let outputs = rule_paths(&layout.models);
    if stamps.fresh("distill", &digest, &outputs) {
        log::info!("distill: up to date");
        return Ok(());
    }
    let samples = crate::commands::read_dataset_for(ctx, &layout.dataset)?;
    let (thr, starv) = load_models(&layout.models)?;
    let (t, s) = distill_models(&thr, &starv, &samples, cfg.distill.budget)?;
    save_rules(&layout.models, &t, &s)?;
    stamps.record("distill", &digest)
}

fn pipeline_adapters(ctx: &Ctx, cfg: &PipelineConfig) -> Result<(Vec<AdapterSpec>, f64, f64)> {
    match &cfg.place.workload {
        Some(p) => {
            let w = read_workload(p)?;
            Ok((w.adapters, w.input_len_mean, w.output_len_mean))
        }
        None => {
            let g = &cfg.place.generate;
            Ok((
                random_adapters(g.n_adapters, &g.sizes, &g.rates, ctx.seed)?,
                cfg.dataset.input_len_mean,
                cfg.dataset.output_len_mean,
            ))
        }
    }
}

/// Outcome classes a strategy may legitimately end in; anything else
/// aborts the stage.
fn placement_failure(e: &Error) -> Option<&'static str> {
    match e {
        Error::Starvation(_) => Some("starvation"),
        Error::MemoryExceeded { .. } => Some("memory-exceeded"),
        _ => None,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Placements {
    rows: Vec<PlacementRow>,
}

fn place_stage(ctx: &Ctx, cfg: &PipelineConfig, layout: &Layout) -> Result<()> {
    let p = &cfg.place;
    if p.strategies.is_empty() {
        return Err(Error::InvalidArgument("place.strategies is empty".into()));
    }
    let predictors = Predictors::load(&layout.models, &p.strategies)?;
    let (adapters, input_len_mean, output_len_mean) = pipeline_adapters(ctx, cfg)?;
    let counts = if p.adapter_counts.is_empty() {
        vec![adapters.len()]
    } else {
        p.adapter_counts.clone()
    };
    if let Some(&n) = counts.iter().find(|&&n| n == 0 || n > adapters.len()) {
        return Err(Error::InvalidArgument(format!(
            "adapter count {n} outside 1..={} of the workload",
            adapters.len()
        )));
    }
    fs::create_dir_all(&layout.plans)?;
    let mut cap = p.backbone_cap;
    let mut rows = Vec::new();
    for &n in &counts {
        let setup = PlaceSetup {
            adapters: &adapters[..n],
            input_len_mean,
            output_len_mean,
            gpus: p.gpus,
            testing_points: p.testing_points.clone(),
            backbone_cap: p.backbone_cap,
        };
        for &strategy in &p.strategies {
            let path = layout.plans.join(format!("{}-n{n}.json", strategy.name()));
            match place_one(ctx, &setup, &predictors, strategy, &mut cap) {
                Ok((result, plan)) => {
                    plan.save(&path)?;
                    let checks = if p.confirm {
                        let c = confirm(ctx, &setup, &result, &cfg.dataset)?;
                        write_checks(&check_path(&path), ctx, &c)?;
                        Some(c)
                    } else {
                        None
                    };
                    rows.push(PlacementRow::from_plan(&plan, checks.as_deref()));
                }
                Err(e) => {
                    let Some(class) = placement_failure(&e) else {
                        return Err(e);
                    };
                    log::info!("{} with {n} adapters: {e}", strategy.name());
                    for stale in [check_path(&path), path] {
                        let _ = fs::remove_file(stale);
                    }
                    rows.push(PlacementRow::failed(n, strategy.name(), p.gpus, class));
                }
            }
        }
    }
    write_json(
        &layout.placements(),
        &Envelope::new(
            PLACEMENTS_SCHEMA,
            ctx.seed,
            &ctx.profile_hash,
            Placements { rows },
        ),
    )
}

fn report_stage(ctx: &Ctx, cfg: &PipelineConfig, layout: &Layout) -> Result<()> {
    require(&layout.placements(), "placement summary")?;
    let s = &cfg.report.sweep;
    let template = WorkloadTemplate {
        rate: s.rate,
        size: s.size,
        duration: s.duration,
        input_len_mean: cfg.dataset.input_len_mean,
        output_len_mean: cfg.dataset.output_len_mean,
    };
    let sweep = run_sweep(
        ctx,
        template.clone(),
        &s.counts,
        DeviceSweep::MatchCount { s_max: s.size },
    )?;
    write_json(&layout.reports.join("sweep.json"), &sweep)?;
    let series = format!("rate{}-size{}", s.rate, s.size);
    let mut table = Table::new(ReportKind::Sweep);
    table.source(ctx.seed, &ctx.profile_hash);
    table.add_sweep(&series, &sweep.body.result);
    write_text(&layout.reports.join("sweep.tsv"), &table.render())?;

    // Queue timelines at the knee and just past it.
    let points = &sweep.body.result.points;
    let knee = sweep.body.result.max_pack;
    let mut timeline = Table::new(ReportKind::Timeline);
    timeline.source(ctx.seed, &ctx.profile_hash);
    for (label, i) in [
        ("max-pack", Some(knee)),
        ("overloaded", (knee + 1 < points.len()).then_some(knee + 1)),
    ] {
        let Some(i) = i else { continue };
        let n = points[i].n_adapters;
        if !points[i].feasible {
            continue;
        }
        let trace = synthesize_trace(
            &template.workload(n),
            lorapack_core::rng::derive_seed(ctx.seed, n as u64),
            &LengthSampler::LogNormal { sigma: 0.0 },
        )?;
        let options = SimOptions {
            record_requests: false,
            ..SimOptions::default()
        };
        let m = run_simulation_with(
            &trace,
            DeviceConfig::new(n, s.size),
            &ctx.profile,
            s.duration,
            options,
        )?;
        timeline.add_timeline(&format!("{label}-n{n}"), &m.timeline);
    }
    write_text(&layout.reports.join("timeline.tsv"), &timeline.render())?;

    let placements = read_envelope::<Placements>(&layout.placements(), PLACEMENTS_SCHEMA)?;
    let mut gpus = Table::new(ReportKind::Gpus);
    gpus.source(placements.seed, &placements.profile_hash);
    for row in &placements.body.rows {
        gpus.add_placement(row);
    }
    write_text(&layout.reports.join("gpus.tsv"), &gpus.render())
}
