use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use diffrep::diffusion::{Teacher, TrainLog};
use diffrep::distill::{LossKind, StudentNet};
use diffrep::pipeline::{
    self, ablation_modes, build_teacher, emit_ablation_report, emit_run_report, prepare_data, run_ablation,
    run_experiment, run_linear_study, run_stage1, run_stage2, teacher_hash, trace_csv, trace_svg, with_mode,
    write_atomic, write_json, write_timing, AblationReport, ExperimentConfig, ExperimentData, LinearStudyConfig,
    RunReport, SeedRun, TimeSelection, SCHEMA_VERSION,
};
use diffrep::probe::probe_teacher;
use diffrep::Error;
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "diffrep",
    version,
    about = "Toy diffusion teachers, feature probes and time-selective distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoising teacher and save its checkpoint.
    TrainDpm(Common),
    /// Spectra, effective rank and separability of teacher features over t.
    Probe(Common),
    /// Closed-form linear denoiser trade-off across diffusion steps.
    LinearDpm(LinearArgs),
    /// Stage one only: distil students and save them.
    Distill(Common),
    /// Both stages, or stage two on a saved student with --student.
    Finetune(FinetuneArgs),
    /// Compare time-selection modes against one shared teacher.
    Ablate(Common),
    /// Re-render CSV and SVG files from an existing report.json.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run seeds with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// reinforced | fixed:<t> | random | none
    #[arg(long)]
    mode: Option<String>,
    /// hint | at | rkd
    #[arg(long)]
    loss: Option<String>,
    /// Comma-separated time indices (probe grid, or fixed grid for ablate).
    #[arg(long = "t-grid")]
    t_grid: Option<String>,
    /// Load this teacher checkpoint instead of training one.
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    /// Saved student to finetune; skips stage one.
    #[arg(long)]
    student: Option<PathBuf>,
}

#[derive(Args)]
struct LinearArgs {
    /// JSON linear-study config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Comma-separated diffusion steps in 1..=T.
    #[arg(long = "t-grid")]
    t_grid: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding report.json.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(err) if err.is_numerical() => 3,
        Some(
            Error::Config(_) | Error::InvalidArgument(_) | Error::Shape(_) | Error::Json(_) | Error::Format { .. },
        ) => 2,
        _ => 1,
    }
}

fn parse_grid(s: &str) -> Result<Vec<usize>, Error> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad --t-grid entry {v:?}")))
        })
        .collect()
}

fn load_config(args: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            ExperimentConfig::from_json(&text).with_context(|| format!("config {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if let Some(m) = &args.mode {
        cfg.selection = m.parse::<TimeSelection>()?;
    }
    if let Some(l) = &args.loss {
        cfg.distill.loss = l.parse::<LossKind>()?;
        cfg.distill.weight = None;
    }
    cfg.out_dir = Some(args.out.clone());
    cfg.validate()?;
    write_json(&args.out.join("config.json"), &cfg)?;
    Ok(cfg)
}

struct Timer(Vec<(&'static str, f64)>, Instant);

impl Timer {
    fn new() -> Self {
        Timer(Vec::new(), Instant::now())
    }

    fn lap(&mut self, name: &'static str) {
        self.0.push((name, self.1.elapsed().as_secs_f64()));
        self.1 = Instant::now();
    }

    fn write(&self, dir: &Path) -> anyhow::Result<()> {
        Ok(write_timing(dir, &self.0)?)
    }
}

fn teacher_for(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    path: Option<&Path>,
) -> anyhow::Result<(Teacher, Option<TrainLog>)> {
    match path {
        Some(p) => {
            let t = Teacher::load(p)?;
            if t.arch != cfg.teacher.arch {
                return Err(Error::Config(format!(
                    "teacher {} does not match the configured architecture",
                    p.display()
                ))
                .into());
            }
            Ok((t, None))
        }
        None => {
            let (t, log) = build_teacher(cfg, data)?;
            Ok((t, Some(log)))
        }
    }
}

#[derive(Serialize)]
struct TeacherReport {
    schema_version: u32,
    config_hash: String,
    teacher_hash: String,
    initial_loss: f64,
    final_loss: f64,
    epoch_losses: Vec<f64>,
}

#[derive(Serialize)]
struct ProbeOutput<'a> {
    schema_version: u32,
    config_hash: String,
    teacher_hash: String,
    probe: &'a diffrep::probe::ProbeReport,
}

#[derive(Serialize)]
struct DistillOutput {
    schema_version: u32,
    config_hash: String,
    teacher_hash: String,
    mode: TimeSelection,
    runs: Vec<SeedRun>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::TrainDpm(args) => {
            let mut cfg = load_config(&args)?;
            if let Some(s) = args.seed {
                cfg.teacher.seed = s;
            }
            let mut timer = Timer::new();
            let data = prepare_data(&cfg)?;
            let (teacher, log) = build_teacher(&cfg, &data)?;
            timer.lap("train_teacher");
            teacher.save(&args.out.join("teacher.bin"))?;
            let report = TeacherReport {
                schema_version: SCHEMA_VERSION,
                config_hash: cfg.hash(),
                teacher_hash: teacher_hash(&teacher)?,
                initial_loss: log.initial_loss,
                final_loss: log.final_loss,
                epoch_losses: log.epoch_losses.clone(),
            };
            write_json(&args.out.join("report.json"), &report)?;
            let mut csv = String::from("epoch,loss\n");
            for (i, l) in log.epoch_losses.iter().enumerate() {
                csv.push_str(&format!("{i},{l}\n"));
            }
            write_atomic(&args.out.join("teacher_loss.csv"), csv.as_bytes())?;
            let svg = pipeline::svg::line_chart(
                "Teacher training loss",
                "epoch",
                "loss",
                &[pipeline::svg::Series::indexed("loss", &log.epoch_losses)],
            );
            write_atomic(&args.out.join("teacher_loss.svg"), svg.as_bytes())?;
            timer.write(&args.out)?;
            println!(
                "teacher loss {:.4} -> {:.4}; saved {}",
                log.initial_loss,
                log.final_loss,
                args.out.join("teacher.bin").display()
            );
        }
        Command::Probe(args) => {
            let mut cfg = load_config(&args)?;
            if let Some(g) = &args.t_grid {
                cfg.probe_grid = parse_grid(g)?;
                cfg.validate()?;
            }
            let mut timer = Timer::new();
            let data = prepare_data(&cfg)?;
            let (teacher, _) = teacher_for(&cfg, &data, args.teacher.as_deref())?;
            timer.lap("teacher");
            let probe = probe_teacher(&teacher, &data.train, &cfg.probe_grid)?;
            timer.lap("probe");
            let out = ProbeOutput {
                schema_version: SCHEMA_VERSION,
                config_hash: cfg.hash(),
                teacher_hash: teacher_hash(&teacher)?,
                probe: &probe,
            };
            write_json(&args.out.join("report.json"), &out)?;
            write_atomic(&args.out.join("probe.csv"), probe.to_csv().as_bytes())?;
            write_atomic(&args.out.join("probe.svg"), probe.to_svg(4).as_bytes())?;
            timer.write(&args.out)?;
            for r in &probe.rows {
                println!(
                    "t={:>4} erank {:.3} separability {:.3}",
                    r.t, r.effective_rank, r.separability
                );
            }
        }
        Command::LinearDpm(args) => {
            let mut cfg = match &args.config {
                Some(p) => {
                    let text =
                        std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                    serde_json::from_str::<LinearStudyConfig>(&text).map_err(|e| Error::Config(e.to_string()))?
                }
                None => LinearStudyConfig::default(),
            };
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            if let Some(g) = &args.t_grid {
                cfg.t_grid = parse_grid(g)?;
            }
            let report = run_linear_study(&cfg).map_err(|e| match e {
                Error::InvalidArgument(m) => Error::Config(m),
                other => other,
            })?;
            report.emit(&args.out)?;
            for r in &report.rows {
                println!("t={:>5} alpha_bar {:.4e} kappa {:.4}", r.t, r.alpha_bar, r.kappa);
            }
        }
        Command::Distill(args) => {
            let cfg = load_config(&args)?;
            let mut timer = Timer::new();
            let data = prepare_data(&cfg)?;
            let (teacher, _) = teacher_for(&cfg, &data, args.teacher.as_deref())?;
            timer.lap("teacher");
            let mut runs = Vec::new();
            for &seed in &cfg.seeds {
                let s1 = run_stage1(&cfg, Some(&teacher), &data, seed)?;
                s1.student.save(&args.out.join(format!("student_{seed}.bin")))?;
                runs.push(SeedRun {
                    seed,
                    stage1_losses: s1.losses,
                    finetune_losses: Vec::new(),
                    train_accuracy: s1.student.accuracy(&data.labeled.x, &data.labeled.y)?,
                    test_accuracy: s1.student.accuracy(&data.test.x, &data.test.y)?,
                    final_mean_t: None,
                    final_mean_t_quantile: None,
                    trace: s1.trace,
                });
            }
            timer.lap("distill");
            let out = DistillOutput {
                schema_version: SCHEMA_VERSION,
                config_hash: cfg.hash(),
                teacher_hash: teacher_hash(&teacher)?,
                mode: cfg.selection,
                runs,
            };
            write_json(&args.out.join("report.json"), &out)?;
            let as_run = RunReport {
                schema_version: SCHEMA_VERSION,
                config_hash: out.config_hash.clone(),
                teacher_hash: Some(out.teacher_hash.clone()),
                mode: cfg.selection,
                steps: cfg.steps(),
                classes: cfg.dataset.classes(),
                runs: out.runs,
                mean_test_accuracy: 0.0,
                std_test_accuracy: 0.0,
            };
            write_atomic(&args.out.join("trace.csv"), trace_csv(&as_run).as_bytes())?;
            write_atomic(&args.out.join("time_trace.svg"), trace_svg(&as_run).as_bytes())?;
            timer.write(&args.out)?;
            println!("distilled {} student(s) into {}", cfg.seeds.len(), args.out.display());
        }
        Command::Finetune(args) => {
            let cfg = load_config(&args.common)?;
            let out_dir = &args.common.out;
            let mut timer = Timer::new();
            let data = prepare_data(&cfg)?;
            let report = match &args.student {
                Some(p) => {
                    let mut student = StudentNet::load(p)?;
                    let seed = cfg.seeds[0];
                    let ft = run_stage2(&mut student, &cfg, &data, seed)?;
                    RunReport {
                        schema_version: SCHEMA_VERSION,
                        config_hash: cfg.hash(),
                        teacher_hash: None,
                        mode: cfg.selection,
                        steps: cfg.steps(),
                        classes: cfg.dataset.classes(),
                        runs: vec![SeedRun {
                            seed,
                            stage1_losses: Vec::new(),
                            finetune_losses: ft.epoch_losses,
                            train_accuracy: ft.train_accuracy,
                            test_accuracy: ft.test_accuracy,
                            final_mean_t: None,
                            final_mean_t_quantile: None,
                            trace: Vec::new(),
                        }],
                        mean_test_accuracy: ft.test_accuracy,
                        std_test_accuracy: 0.0,
                    }
                }
                None => {
                    let teacher = match cfg.selection {
                        TimeSelection::None => None,
                        _ => Some(teacher_for(&cfg, &data, args.common.teacher.as_deref())?.0),
                    };
                    timer.lap("teacher");
                    run_experiment(&cfg, teacher.as_ref(), &data)?
                }
            };
            timer.lap("run");
            emit_run_report(&report, out_dir)?;
            timer.write(out_dir)?;
            println!(
                "{}: test accuracy {:.4} ± {:.4} over {} seed(s)",
                report.mode,
                report.mean_test_accuracy,
                report.std_test_accuracy,
                report.runs.len()
            );
        }
        Command::Ablate(args) => {
            let mut cfg = load_config(&args)?;
            if let Some(g) = &args.t_grid {
                cfg.fixed_grid = parse_grid(g)?;
                cfg.validate()?;
            }
            let mut timer = Timer::new();
            let data = prepare_data(&cfg)?;
            let (teacher, _) = teacher_for(&cfg, &data, args.teacher.as_deref())?;
            timer.lap("teacher");
            let modes = match &args.mode {
                Some(_) => vec![cfg.selection],
                None => ablation_modes(&cfg),
            };
            let configs: Vec<ExperimentConfig> = modes.into_iter().map(|m| with_mode(&cfg, m)).collect();
            let report = run_ablation(&configs, &teacher, &data)?;
            timer.lap("ablation");
            emit_ablation_report(&report, &args.out)?;
            timer.write(&args.out)?;
            print_ablation(&report);
        }
        Command::Report(args) => {
            let path = args.out.join("report.json");
            let bytes = std::fs::read(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if let Ok(r) = serde_json::from_slice::<AblationReport>(&bytes) {
                emit_ablation_report(&r, &args.out)?;
                print_ablation(&r);
            } else {
                let r: RunReport = serde_json::from_slice(&bytes)
                    .map_err(|e| Error::Config(format!("{} is not a run or ablation report: {e}", path.display())))?;
                emit_run_report(&r, &args.out)?;
                println!(
                    "{}: test accuracy {:.4} ± {:.4}",
                    r.mode, r.mean_test_accuracy, r.std_test_accuracy
                );
            }
        }
    }
    Ok(())
}

fn print_ablation(r: &AblationReport) {
    for row in &r.rows {
        println!("{:>12}  {:.4} ± {:.4}", row.mode.to_string(), row.mean, row.std);
    }
    for c in &r.checks {
        println!(
            "{} {}: {:.4} vs {:.4}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.lhs,
            c.rhs
        );
    }
}
