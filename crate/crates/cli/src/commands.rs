use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use lorapack_core::perf_models::{
    fit_calibration, read_samples, synthetic_samples, write_samples, CalibrationProfile,
    ProfileMeta,
};
use lorapack_core::placement::{
    allocate, confirm_with_twin, max_base, proposed_lat, random_placement, GpuCheck,
    PlacementProblem, PlacementResult, Plan,
};
use lorapack_core::surrogate::dataset::{
    load_dataset, save_dataset, DatasetHeader, DATASET_SCHEMA,
};
use lorapack_core::surrogate::model::training_rows;
use lorapack_core::surrogate::{
    distill_model, generate_dataset, train_classifier, train_regressor, DistillOptions,
    LabeledSample, ModelKind, RuleTree, ScenarioGrid, SearchConfig, StarvationModel,
    StarvationPredictor, Target, ThroughputModel, ThroughputPredictor, TrainOptions,
};
use lorapack_core::twin::{
    backbone_throughput, run_simulation_with, sweep_max_pack, DeviceConfig, DeviceSweep,
    SimMetrics, SimOptions, SweepResult, WorkloadTemplate,
};
use lorapack_core::workload::{
    load_trace, save_trace, synthesize_trace, synthesize_unpredictable_trace, LengthCorpus,
    LengthSampler, RequestTrace, UnpredictableRegime, WorkloadSpec,
};
use lorapack_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    read_envelope, read_workload, require, write_json, write_text, Envelope, CHECK_SCHEMA,
    FIT_REPORT_SCHEMA, METRICS_SCHEMA, SWEEP_SCHEMA,
};

/// State shared by every subcommand: the global flags, resolved.
pub struct Ctx {
    pub seed: u64,
    pub profile: CalibrationProfile,
    pub profile_hash: String,
    pub out_dir: PathBuf,
}

impl Ctx {
    pub fn new(seed: u64, profile: Option<&Path>, out_dir: PathBuf) -> Result<Self> {
        let profile = match profile {
            Some(p) => CalibrationProfile::load(p)?,
            None => CalibrationProfile::synthetic_fixture(),
        };
        Ok(Self {
            seed,
            profile_hash: profile.hash(),
            profile,
            out_dir,
        })
    }

    pub fn out(&self, given: Option<&Path>, default: &str) -> PathBuf {
        given.map_or_else(|| self.out_dir.join(default), Path::to_path_buf)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Proposed,
    ProposedFast,
    Maxbase,
    MaxbaseStar,
    Random,
    ProposedLat,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Self::Proposed,
        Self::ProposedFast,
        Self::Maxbase,
        Self::MaxbaseStar,
        Self::Random,
        Self::ProposedLat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Proposed => "proposed",
            Self::ProposedFast => "proposed-fast",
            Self::Maxbase => "maxbase",
            Self::MaxbaseStar => "maxbase-star",
            Self::Random => "random",
            Self::ProposedLat => "proposed-lat",
        }
    }

    pub fn needs_rules(self) -> bool {
        self == Self::ProposedFast
    }

    fn needs_cap(self) -> bool {
        matches!(self, Self::Maxbase | Self::MaxbaseStar)
    }
}

pub fn parse_target(s: &str) -> Result<Target> {
    match s {
        "identity" => Ok(Target::Identity),
        "log1p" => Ok(Target::Log1p),
        _ => Err(Error::InvalidArgument(format!(
            "unknown target {s:?} (identity, log1p)"
        ))),
    }
}

// calibrate

pub fn calibrate(ctx: &Ctx, samples: &Path, meta: ProfileMeta, out: Option<&Path>) -> Result<()> {
    let samples = read_samples(BufReader::new(File::open(samples)?))?;
    let (profile, report) = fit_calibration(&samples, meta)?;
    let path = ctx.out(out, "profile.json");
    crate::artifacts::ensure_parent(&path)?;
    profile.save(&path)?;
    let report_path = path.with_extension("residuals.json");
    write_json(
        &report_path,
        &Envelope::new(FIT_REPORT_SCHEMA, ctx.seed, &profile.hash(), &report),
    )?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    println!(
        "profile {} ({} samples, max |residual| {:.3e}) -> {}",
        profile.hash(),
        samples.len(),
        report.max_abs_error(),
        path.display()
    );
    Ok(())
}

pub fn write_fixture_samples(path: &Path) -> Result<()> {
    crate::artifacts::ensure_parent(path)?;
    let samples = synthetic_samples(&CalibrationProfile::synthetic_fixture());
    write_samples(&samples, std::io::BufWriter::new(File::create(path)?))
}

// trace

pub fn sampler(corpus: Option<&Path>, sigma: f64) -> Result<LengthSampler> {
    Ok(match corpus {
        Some(p) => LengthSampler::Corpus(LengthCorpus::read(p)?),
        None => LengthSampler::LogNormal { sigma },
    })
}

pub fn trace(
    ctx: &Ctx,
    workload: &Path,
    sampler: &LengthSampler,
    unpredictable: bool,
    out: Option<&Path>,
) -> Result<()> {
    let w = read_workload(workload)?;
    let path = ctx.out(out, "trace.csv");
    crate::artifacts::ensure_parent(&path)?;
    let trace = if unpredictable {
        let (trace, epochs) =
            synthesize_unpredictable_trace(&w, &UnpredictableRegime::default(), ctx.seed, sampler)?;
        write_json(&path.with_extension("epochs.json"), &epochs)?;
        trace
    } else {
        synthesize_trace(&w, ctx.seed, sampler)?
    };
    save_trace(&trace, &path)?;
    println!(
        "{} requests over {} s -> {}",
        trace.events.len(),
        w.duration,
        path.display()
    );
    Ok(())
}

// simulate

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsBody {
    pub device: DeviceConfig,
    pub duration: f64,
    pub trace_seed: u64,
    pub n_adapters: usize,
    pub starved: bool,
    #[serde(flatten)]
    pub metrics: SimMetrics,
}

pub struct SimulateArgs<'a> {
    pub trace: Option<&'a Path>,
    pub workload: Option<&'a Path>,
    pub sampler: &'a LengthSampler,
    pub a_max: usize,
    pub s_max: Option<u32>,
    pub duration: Option<f64>,
    pub verify: bool,
    pub record_requests: bool,
    pub out: Option<&'a Path>,
}

pub fn simulate(ctx: &Ctx, args: &SimulateArgs) -> Result<()> {
    let trace: RequestTrace = match (args.trace, args.workload) {
        (Some(t), None) => load_trace(t)?,
        (None, Some(w)) => {
            let w = read_workload(w)?;
            synthesize_trace(&w, ctx.seed, args.sampler)?
        }
        _ => {
            return Err(Error::InvalidArgument(
                "give exactly one of --trace or --workload".into(),
            ))
        }
    };
    let s_max = args.s_max.unwrap_or_else(|| trace.workload.max_size());
    let duration = args.duration.unwrap_or(trace.workload.duration);
    let device = DeviceConfig::new(args.a_max, s_max);
    let options = SimOptions {
        verify: args.verify,
        record_requests: args.record_requests,
        ..SimOptions::default()
    };
    let metrics = run_simulation_with(&trace, device, &ctx.profile, duration, options)?;
    println!(
        "throughput {:.1} tok/s, incoming {:.1} tok/s, starved {}, {} steps",
        metrics.throughput,
        metrics.incoming_token_rate,
        metrics.starved(),
        metrics.steps
    );
    let body = MetricsBody {
        device,
        duration,
        trace_seed: trace.seed,
        n_adapters: trace.workload.adapters.len(),
        starved: metrics.starved(),
        metrics,
    };
    write_json(
        &ctx.out(args.out, "metrics.json"),
        &Envelope::new(METRICS_SCHEMA, ctx.seed, &ctx.profile_hash, body),
    )
}

// sweep

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepBody {
    pub template: WorkloadTemplate,
    pub devices: DeviceSweep,
    #[serde(flatten)]
    pub result: SweepResult,
}

pub fn run_sweep(
    ctx: &Ctx,
    template: WorkloadTemplate,
    counts: &[usize],
    devices: DeviceSweep,
) -> Result<Envelope<SweepBody>> {
    let result = sweep_max_pack(&template, counts, &devices, &ctx.profile, ctx.seed)?;
    Ok(Envelope::new(
        SWEEP_SCHEMA,
        ctx.seed,
        &ctx.profile_hash,
        SweepBody {
            template,
            devices,
            result,
        },
    ))
}

pub fn sweep(
    ctx: &Ctx,
    template: WorkloadTemplate,
    counts: &[usize],
    devices: DeviceSweep,
    out: Option<&Path>,
) -> Result<()> {
    let env = run_sweep(ctx, template, counts, devices)?;
    let p = env.body.result.max_pack_point();
    println!(
        "max pack: {} adapters (A_max {}, S_max {}) at {:.1} tok/s",
        p.n_adapters, p.device.a_max, p.device.s_max, p.throughput
    );
    write_json(&ctx.out(out, "sweep.json"), &env)
}

// dataset

pub fn build_dataset(
    ctx: &Ctx,
    grid: &ScenarioGrid,
    existing: &[LabeledSample],
) -> Result<Vec<LabeledSample>> {
    let samples = generate_dataset(grid, &ctx.profile, ctx.seed, existing)?;
    let starved = samples.iter().filter(|s| s.starved).count();
    let infeasible = samples.iter().filter(|s| s.infeasible).count();
    log::info!(
        "{} samples, {starved} starved, {infeasible} memory-infeasible",
        samples.len()
    );
    Ok(samples)
}

pub fn dataset_header(ctx: &Ctx) -> DatasetHeader {
    DatasetHeader {
        schema: DATASET_SCHEMA.into(),
        seed: ctx.seed,
        profile_hash: ctx.profile_hash.clone(),
    }
}

pub fn dataset(ctx: &Ctx, grid: &ScenarioGrid, resume: bool, out: Option<&Path>) -> Result<()> {
    let path = ctx.out(out, "dataset.csv");
    let mut existing = Vec::new();
    if resume && path.exists() {
        let (h, s) = load_dataset(&path)?;
        if h == dataset_header(ctx) {
            log::info!("resuming from {} samples", s.len());
            existing = s;
        } else {
            log::warn!(
                "{} was made under another seed or profile; regenerating",
                path.display()
            );
        }
    }
    let samples = build_dataset(ctx, grid, &existing)?;
    crate::artifacts::ensure_parent(&path)?;
    save_dataset(&dataset_header(ctx), &samples, &path)?;
    println!("{} samples -> {}", samples.len(), path.display());
    Ok(())
}

pub fn read_dataset_for(ctx: &Ctx, path: &Path) -> Result<Vec<LabeledSample>> {
    let (h, samples) = load_dataset(path)?;
    if h.profile_hash != ctx.profile_hash {
        log::warn!(
            "{} was labelled under profile {}, not {}",
            path.display(),
            h.profile_hash,
            ctx.profile_hash
        );
    }
    Ok(samples)
}

// train / distill

pub fn model_paths(dir: &Path) -> [PathBuf; 2] {
    [dir.join("throughput.json"), dir.join("starvation.json")]
}

pub fn rule_paths(dir: &Path) -> [PathBuf; 2] {
    [
        dir.join("throughput.rules.json"),
        dir.join("starvation.rules.json"),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub kind: String,
    pub budget: usize,
    pub folds: usize,
    pub target: String,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            kind: "rf".into(),
            budget: SearchConfig::default().budget,
            folds: 5,
            target: "log1p".into(),
        }
    }
}

pub fn train_models(
    ctx: &Ctx,
    samples: &[LabeledSample],
    s: &TrainSettings,
) -> Result<(ThroughputModel, StarvationModel)> {
    let opts = TrainOptions {
        kind: s.kind.parse::<ModelKind>()?,
        search: SearchConfig {
            budget: s.budget,
            folds: s.folds,
            seed: ctx.seed,
            target: parse_target(&s.target)?,
        },
        profile_hash: ctx.profile_hash.clone(),
    };
    let thr = train_regressor(samples, &opts)?;
    let starv = train_classifier(samples, &opts)?;
    log::info!(
        "throughput CV {} {:.3}, starvation CV {} {:.3}",
        thr.0.cv.metric,
        thr.0.cv.best_score,
        starv.0.cv.metric,
        starv.0.cv.best_score
    );
    Ok((thr, starv))
}

pub fn train(ctx: &Ctx, dataset: &Path, settings: &TrainSettings, models: &Path) -> Result<()> {
    let samples = read_dataset_for(ctx, dataset)?;
    let (thr, starv) = train_models(ctx, &samples, settings)?;
    std::fs::create_dir_all(models)?;
    let [tp, sp] = model_paths(models);
    thr.save(&tp)?;
    starv.save(&sp)?;
    println!(
        "throughput CV {} {:.3}; starvation CV {} {:.3} -> {}",
        thr.0.cv.metric,
        thr.0.cv.best_score,
        starv.0.cv.metric,
        starv.0.cv.best_score,
        models.display()
    );
    Ok(())
}

pub fn load_models(dir: &Path) -> Result<(ThroughputModel, StarvationModel)> {
    let [tp, sp] = model_paths(dir);
    require(&tp, "throughput model")?;
    require(&sp, "starvation model")?;
    Ok((ThroughputModel::load(&tp)?, StarvationModel::load(&sp)?))
}

pub fn load_rules(dir: &Path) -> Result<(RuleTree, RuleTree)> {
    let [tp, sp] = rule_paths(dir);
    require(&tp, "throughput rules")?;
    require(&sp, "starvation rules")?;
    Ok((RuleTree::load(&tp)?, RuleTree::load(&sp)?))
}

pub fn distill_models(
    thr: &ThroughputModel,
    starv: &StarvationModel,
    samples: &[LabeledSample],
    budget: usize,
) -> Result<(RuleTree, RuleTree)> {
    let (x, _) = training_rows(samples, lorapack_core::surrogate::Task::Throughput);
    let t = distill_model(&thr.0, &x, &DistillOptions::new(budget, thr.0.task))?;
    let s = distill_model(&starv.0, &x, &DistillOptions::new(budget, starv.0.task))?;
    Ok((t, s))
}

pub fn save_rules(dir: &Path, thr: &RuleTree, starv: &RuleTree) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (rt, path) in [thr, starv].into_iter().zip(rule_paths(dir)) {
        rt.save(&path)?;
        let header = format!(
            "# {} task={:?} seed={} profile_hash={} rules={}\n",
            rt.schema, rt.task, rt.seed, rt.profile_hash, rt.rule_count
        );
        write_text(&path.with_extension("txt"), &(header + &rt.export()))?;
    }
    Ok(())
}

pub fn distill(ctx: &Ctx, dataset: &Path, models: &Path, budget: usize) -> Result<()> {
    let samples = read_dataset_for(ctx, dataset)?;
    let (thr, starv) = load_models(models)?;
    let (t, s) = distill_models(&thr, &starv, &samples, budget)?;
    save_rules(models, &t, &s)?;
    println!(
        "throughput: {} rules, SMAPE {:.2} vs teacher; starvation: {} rules, F1 {:.3} vs teacher",
        t.rule_count, t.fidelity, s.rule_count, s.fidelity
    );
    Ok(())
}

// place

pub struct Predictors {
    pub full: Option<(ThroughputModel, StarvationModel)>,
    pub rules: Option<(RuleTree, RuleTree)>,
}

impl Predictors {
    pub fn load(dir: &Path, strategies: &[Strategy]) -> Result<Self> {
        let rules = if strategies.iter().any(|s| s.needs_rules()) {
            Some(load_rules(dir)?)
        } else {
            None
        };
        let full = if strategies.iter().any(|s| !s.needs_rules()) {
            Some(load_models(dir)?)
        } else {
            None
        };
        Ok(Self { full, rules })
    }

    pub fn for_strategy(
        &self,
        s: Strategy,
    ) -> (&dyn ThroughputPredictor, &dyn StarvationPredictor) {
        if s.needs_rules() {
            let (t, st) = self.rules.as_ref().expect("rules loaded");
            (t, st)
        } else {
            let (t, st) = self.full.as_ref().expect("models loaded");
            (t, st)
        }
    }
}

pub struct PlaceSetup<'a> {
    pub adapters: &'a [lorapack_core::workload::AdapterSpec],
    pub input_len_mean: f64,
    pub output_len_mean: f64,
    pub gpus: usize,
    pub testing_points: Option<Vec<usize>>,
    pub backbone_cap: Option<f64>,
}

pub fn backbone_cap(ctx: &Ctx, input_len_mean: f64, output_len_mean: f64) -> Result<f64> {
    let cap = backbone_throughput(&ctx.profile, input_len_mean, output_len_mean, ctx.seed)?;
    log::info!("backbone throughput cap {cap:.1} tok/s");
    Ok(cap)
}

/// Run one strategy and annotate the result with the predictors' verdict.
pub fn place_one(
    ctx: &Ctx,
    setup: &PlaceSetup,
    predictors: &Predictors,
    strategy: Strategy,
    cap: &mut Option<f64>,
) -> Result<(PlacementResult, Plan)> {
    let (tp, sp) = predictors.for_strategy(strategy);
    let mut problem =
        PlacementProblem::new(setup.adapters.to_vec(), setup.gpus, tp, sp, &ctx.profile)?
            .with_lengths(setup.input_len_mean, setup.output_len_mean)?;
    if let Some(points) = &setup.testing_points {
        problem = problem.with_testing_points(points.clone())?;
    }
    if strategy.needs_cap() && cap.is_none() {
        *cap = Some(match setup.backbone_cap {
            Some(c) => c,
            None => backbone_cap(ctx, setup.input_len_mean, setup.output_len_mean)?,
        });
    }
    let mut result = match strategy {
        Strategy::Proposed | Strategy::ProposedFast => allocate(&problem)?,
        Strategy::Maxbase => max_base(&problem, cap.unwrap(), false)?,
        Strategy::MaxbaseStar => max_base(&problem, cap.unwrap(), true)?,
        Strategy::Random => random_placement(&problem, ctx.seed)?,
        Strategy::ProposedLat => proposed_lat(&problem)?,
    };
    result.strategy = strategy.name().into();
    let plan = result.plan(&problem, ctx.seed, &ctx.profile_hash)?;
    Ok((result, plan))
}

/// Placeholder predictors for problems that only carry adapters through to
/// the twin.
struct NoPrediction;

impl ThroughputPredictor for NoPrediction {
    fn predict_throughput(&self, _: &lorapack_core::surrogate::FeatureVector) -> f64 {
        0.0
    }
}

impl StarvationPredictor for NoPrediction {
    fn predict_starvation(&self, _: &lorapack_core::surrogate::FeatureVector) -> bool {
        false
    }
}

pub fn confirm(
    ctx: &Ctx,
    setup: &PlaceSetup,
    result: &PlacementResult,
    grid: &ScenarioGrid,
) -> Result<Vec<GpuCheck>> {
    let problem = PlacementProblem::new(
        setup.adapters.to_vec(),
        setup.gpus,
        &NoPrediction,
        &NoPrediction,
        &ctx.profile,
    )?;
    confirm_with_twin(result, &problem, &ctx.profile, grid, ctx.seed)
}

pub fn write_checks(path: &Path, ctx: &Ctx, checks: &[GpuCheck]) -> Result<()> {
    #[derive(Serialize)]
    struct Body<'a> {
        gpus: &'a [GpuCheck],
    }
    write_json(
        path,
        &Envelope::new(
            CHECK_SCHEMA,
            ctx.seed,
            &ctx.profile_hash,
            Body { gpus: checks },
        ),
    )
}

pub fn read_checks(path: &Path) -> Result<Vec<GpuCheck>> {
    #[derive(Deserialize)]
    struct Body {
        gpus: Vec<GpuCheck>,
    }
    Ok(read_envelope::<Body>(path, CHECK_SCHEMA)?.body.gpus)
}

pub fn check_path(plan: &Path) -> PathBuf {
    plan.with_extension("check.json")
}

/// Grid whose durations and lengths a twin confirmation of `w` should use.
pub fn confirm_grid(w: &WorkloadSpec) -> ScenarioGrid {
    ScenarioGrid {
        duration: w.duration,
        max_duration: w.duration,
        input_len_mean: w.input_len_mean,
        output_len_mean: w.output_len_mean,
        ..ScenarioGrid::default()
    }
}

pub struct PlaceArgs<'a> {
    pub workload: &'a Path,
    pub gpus: usize,
    pub models: &'a Path,
    pub strategy: Strategy,
    pub backbone_cap: Option<f64>,
    pub testing_points: Option<Vec<usize>>,
    pub confirm: bool,
    pub out: Option<&'a Path>,
}

pub fn place(ctx: &Ctx, args: &PlaceArgs) -> Result<()> {
    let w = read_workload(args.workload)?;
    let predictors = Predictors::load(args.models, &[args.strategy])?;
    let setup = PlaceSetup {
        adapters: &w.adapters,
        input_len_mean: w.input_len_mean,
        output_len_mean: w.output_len_mean,
        gpus: args.gpus,
        testing_points: args.testing_points.clone(),
        backbone_cap: args.backbone_cap,
    };
    let (result, plan) = place_one(ctx, &setup, &predictors, args.strategy, &mut None)?;
    let path = ctx.out(args.out, "plan.json");
    crate::artifacts::ensure_parent(&path)?;
    plan.save(&path)?;
    println!(
        "{}: {} adapters on {} of {} GPUs -> {}",
        plan.strategy,
        plan.assignment.len(),
        plan.gpus_used,
        plan.gpus_available,
        path.display()
    );
    if args.confirm {
        let checks = confirm(ctx, &setup, &result, &confirm_grid(&w))?;
        let bad = checks.iter().filter(|c| c.starved).count();
        println!(
            "twin check: {bad} of {} GPUs starved or infeasible",
            checks.len()
        );
        write_checks(&check_path(&path), ctx, &checks)?;
    }
    Ok(())
}
