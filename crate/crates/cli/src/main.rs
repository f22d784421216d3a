//! `lorapack`: calibrate, simulate, train and place from the command line.
//!
//! Exit codes: 0 success, 1 I/O or parse, 2 invalid argument, 3 starvation,
//! 4 memory exceeded, 5 fit failure, 6 no feasible point, 7 invariant
//! violation. `pipeline` reports `10 * stage + class`, with stages numbered
//! dataset 1, train 2, distill 3, place 4, report 5.

mod artifacts;
mod commands;
mod pipeline;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lorapack_core::perf_models::ProfileMeta;
use lorapack_core::surrogate::ScenarioGrid;
use lorapack_core::twin::{DeviceConfig, DeviceSweep, WorkloadTemplate};
use lorapack_core::Error;

use crate::artifacts::{read_envelope, read_structured, write_text, METRICS_SCHEMA, SWEEP_SCHEMA};
use crate::commands::{
    Ctx, MetricsBody, PlaceArgs, SimulateArgs, Strategy, SweepBody, TrainSettings,
};
use crate::pipeline::PipelineConfig;
use crate::report::{PlacementRow, ReportKind, Table};

#[derive(Parser)]
#[command(
    name = "lorapack",
    version,
    about = "LoRA adapter placement with a serving digital twin"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Base seed for every random stream [default: 0].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Calibration profile JSON; the synthetic fixture when omitted.
    #[arg(long, global = true)]
    profile: Option<PathBuf>,
    /// Directory for outputs that are not given an explicit path [default: .].
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for parallel stages; all cores when omitted.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a calibration profile to profiling samples.
    Calibrate {
        #[arg(long)]
        samples: PathBuf,
        /// Write the synthetic fixture's samples to --samples first.
        #[arg(long)]
        write_fixture_samples: bool,
        #[arg(long, default_value = "")]
        hardware: String,
        #[arg(long, default_value = "")]
        model_name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthesize a request trace for a workload file.
    Trace {
        #[arg(long)]
        workload: PathBuf,
        /// Two-column (input, output) length corpus to sample from.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Log-normal spread of lengths around the workload means.
        #[arg(long, default_value_t = 0.5)]
        sigma: f64,
        /// Regime-switching arrivals instead of stationary Poisson.
        #[arg(long)]
        unpredictable: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the digital twin on one device.
    Simulate {
        #[arg(long, conflicts_with = "workload")]
        trace: Option<PathBuf>,
        #[arg(long)]
        workload: Option<PathBuf>,
        /// Length corpus for sampled workloads.
        #[arg(long, requires = "workload")]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5, requires = "workload")]
        sigma: f64,
        #[arg(long)]
        a_max: usize,
        /// Defaults to the largest adapter rank in the workload.
        #[arg(long)]
        s_max: Option<u32>,
        /// Simulated seconds; defaults to the workload duration.
        #[arg(long)]
        duration: Option<f64>,
        /// Recount scheduler state after every step.
        #[arg(long)]
        verify: bool,
        /// Omit per-request records from the metrics file.
        #[arg(long)]
        no_requests: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep adapter counts at a fixed rate and size and locate Max_pack.
    Sweep {
        #[arg(long)]
        rate: f64,
        #[arg(long)]
        size: u32,
        #[arg(long, value_delimiter = ',', required = true)]
        counts: Vec<usize>,
        #[arg(long, default_value_t = 300.0)]
        duration: f64,
        /// Fixed A_max values; by default A_max follows the adapter count.
        #[arg(long, value_delimiter = ',')]
        a_max: Vec<usize>,
        /// Defaults to --size.
        #[arg(long)]
        s_max: Option<u32>,
        #[arg(long, default_value_t = 250.0)]
        input_len_mean: f64,
        #[arg(long, default_value_t = 231.0)]
        output_len_mean: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Label a scenario grid with twin runs.
    Dataset {
        /// Scenario grid (TOML or JSON); built-in defaults when omitted.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        max_samples: Option<usize>,
        /// Reuse samples already in the output file.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train throughput and starvation surrogates.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// rf or knn.
        #[arg(long, default_value = "rf")]
        kind: String,
        #[arg(long, default_value_t = TrainSettings::default().budget)]
        budget: usize,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        /// identity or log1p, applied to the throughput target.
        #[arg(long, default_value = "log1p")]
        target: String,
        /// Output directory [default: <out-dir>/models].
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Distill trained surrogates into shallow rule trees.
    Distill {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        budget: usize,
    },
    /// Place a workload's adapters on GPUs.
    Place {
        #[arg(long)]
        workload: PathBuf,
        #[arg(long)]
        gpus: usize,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "proposed")]
        strategy: Strategy,
        /// Per-GPU token rate cap for the MaxBase baselines; measured with
        /// the twin when omitted.
        #[arg(long)]
        backbone_cap: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        testing_points: Option<Vec<usize>>,
        /// Replay each GPU of the plan in the twin.
        #[arg(long)]
        confirm: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge metrics, sweep or plan files into one table.
    Report {
        #[arg(long, value_enum)]
        kind: ReportKind,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run dataset, train, distill, place and report from a config file.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
    },
}

fn class(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Json(_) | Error::Parse(_) => 1,
        Error::InvalidArgument(_) => 2,
        Error::Starvation(_) => 3,
        Error::MemoryExceeded { .. } => 4,
        Error::FitFailure(_) => 5,
        Error::NoFeasiblePoint => 6,
        Error::InvariantViolation { .. } => 7,
    }
}

fn series(path: &Path) -> String {
    path.file_stem()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

fn report(kind: ReportKind, inputs: &[PathBuf]) -> lorapack_core::Result<Table> {
    let mut table = Table::new(kind);
    for path in inputs {
        match kind {
            ReportKind::Timeline => {
                let m = read_envelope::<MetricsBody>(path, METRICS_SCHEMA)?;
                table.source(m.seed, &m.profile_hash);
                table.add_timeline(&series(path), &m.body.metrics.timeline);
            }
            ReportKind::Sweep => {
                let s = read_envelope::<SweepBody>(path, SWEEP_SCHEMA)?;
                table.source(s.seed, &s.profile_hash);
                table.add_sweep(&series(path), &s.body.result);
            }
            ReportKind::Gpus => {
                let plan = lorapack_core::placement::Plan::load(path)?;
                let check = commands::check_path(path);
                let checks = if check.exists() {
                    Some(commands::read_checks(&check)?)
                } else {
                    None
                };
                table.source(plan.seed, &plan.profile_hash);
                table.add_placement(&PlacementRow::from_plan(&plan, checks.as_deref()));
            }
        }
    }
    Ok(table)
}

fn run(cli: Cli) -> Result<(), u8> {
    let g = cli.global;
    if let Some(n) = g.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    if let Command::Pipeline { config } = &cli.command {
        let mut cfg = PipelineConfig::load(config).map_err(|e| {
            log::error!("setup: {e}");
            class(&e)
        })?;
        if let Some(s) = g.seed {
            cfg.seed = s;
        }
        if let Some(p) = g.profile {
            cfg.profile = Some(p);
        }
        if let Some(d) = g.out_dir {
            cfg.out_dir = d;
        }
        return pipeline::run(&cfg).map_err(|e| {
            log::error!("stage {}: {}", e.stage.name(), e.error);
            10 * e.stage as u8 + class(&e.error)
        });
    }

    let fail = |e: Error| {
        log::error!("{e}");
        class(&e)
    };
    let out_dir = g.out_dir.unwrap_or_else(|| PathBuf::from("."));
    let ctx = Ctx::new(g.seed.unwrap_or(0), g.profile.as_deref(), out_dir).map_err(fail)?;
    let models_dir = |m: Option<PathBuf>| m.unwrap_or_else(|| ctx.out_dir.join("models"));
    let result = match cli.command {
        Command::Calibrate {
            samples,
            write_fixture_samples,
            hardware,
            model_name,
            out,
        } => (|| {
            if write_fixture_samples {
                commands::write_fixture_samples(&samples)?;
            }
            let meta = ProfileMeta {
                hardware,
                model_name,
                fixture: write_fixture_samples,
            };
            commands::calibrate(&ctx, &samples, meta, out.as_deref())
        })(),
        Command::Trace {
            workload,
            corpus,
            sigma,
            unpredictable,
            out,
        } => commands::sampler(corpus.as_deref(), sigma)
            .and_then(|s| commands::trace(&ctx, &workload, &s, unpredictable, out.as_deref())),
        Command::Simulate {
            trace,
            workload,
            corpus,
            sigma,
            a_max,
            s_max,
            duration,
            verify,
            no_requests,
            out,
        } => commands::sampler(corpus.as_deref(), sigma).and_then(|sampler| {
            commands::simulate(
                &ctx,
                &SimulateArgs {
                    trace: trace.as_deref(),
                    workload: workload.as_deref(),
                    sampler: &sampler,
                    a_max,
                    s_max,
                    duration,
                    verify,
                    record_requests: !no_requests,
                    out: out.as_deref(),
                },
            )
        }),
        Command::Sweep {
            rate,
            size,
            counts,
            duration,
            a_max,
            s_max,
            input_len_mean,
            output_len_mean,
            out,
        } => {
            let s_max = s_max.unwrap_or(size);
            let devices = if a_max.is_empty() {
                DeviceSweep::MatchCount { s_max }
            } else {
                DeviceSweep::Fixed(a_max.iter().map(|&a| DeviceConfig::new(a, s_max)).collect())
            };
            let template = WorkloadTemplate {
                rate,
                size,
                duration,
                input_len_mean,
                output_len_mean,
            };
            commands::sweep(&ctx, template, &counts, devices, out.as_deref())
        }
        Command::Dataset {
            grid,
            max_samples,
            resume,
            out,
        } => (|| {
            let mut grid: ScenarioGrid = match &grid {
                Some(p) => read_structured(p)?,
                None => ScenarioGrid::default(),
            };
            if max_samples.is_some() {
                grid.max_samples = max_samples;
            }
            commands::dataset(&ctx, &grid, resume, out.as_deref())
        })(),
        Command::Train {
            dataset,
            kind,
            budget,
            folds,
            target,
            models,
        } => commands::train(
            &ctx,
            &dataset,
            &TrainSettings {
                kind,
                budget,
                folds,
                target,
            },
            &models_dir(models),
        ),
        Command::Distill {
            dataset,
            models,
            budget,
        } => commands::distill(&ctx, &dataset, &models_dir(models), budget),
        Command::Place {
            workload,
            gpus,
            models,
            strategy,
            backbone_cap,
            testing_points,
            confirm,
            out,
        } => commands::place(
            &ctx,
            &PlaceArgs {
                workload: &workload,
                gpus,
                models: &models_dir(models),
                strategy,
                backbone_cap,
                testing_points,
                confirm,
                out: out.as_deref(),
            },
        ),
        Command::Report { kind, inputs, out } => report(kind, &inputs).and_then(|t| {
            let path = ctx.out(out.as_deref(), &format!("{}.tsv", kind.name()));
            println!("{} rows -> {}", t.len(), path.display());
            write_text(&path, &t.render())
        }),
        Command::Pipeline { .. } => unreachable!("handled above"),
    };
    result.map_err(fail)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => ExitCode::from(code),
    }
}
