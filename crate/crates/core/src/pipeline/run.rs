use serde::{Deserialize, Serialize};

use super::config::{sha256_hex, ExperimentConfig, TimeSelection};
use crate::autonet::encode_params;
use crate::datasets::{split, LabeledDataset};
use crate::diffusion::{train_teacher, Teacher, TrainLog};
use crate::distill::{distill_step, finetune, FinetuneResult, StudentArch, StudentNet};
use crate::error::ensure;
use crate::numeric::RngStream;
use crate::policy::{sample_time, AuxDecoder, FeatureSource, RewardRecord, TimePolicy, TimeSelector};
use crate::{Error, Result};

/// Version of the JSON report layout.
pub const SCHEMA_VERSION: u32 = 1;

const STREAM_DATA: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_LABELS: u64 = 3;
const STREAM_TEACHER: u64 = 4;
const STREAM_STUDENT: u64 = 10;
const STREAM_STAGE1: u64 = 11;
const STREAM_POLICY: u64 = 12;
const STREAM_STAGE2: u64 = 13;

/// Train/test split plus the labelled part of the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    /// Normalized to zero mean; used unlabelled for teacher training and distillation.
    pub train: LabeledDataset,
    pub labeled: LabeledDataset,
    /// Normalized with the training statistics.
    pub test: LabeledDataset,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let ds = cfg.dataset.generate(&mut RngStream::new(cfg.data_seed, STREAM_DATA))?;
    let (mut train, mut test) = split(
        &ds,
        cfg.train_fraction,
        &mut RngStream::new(cfg.data_seed, STREAM_SPLIT),
    )?;
    train.normalize();
    test.normalize_with(&train.mean, train.std)?;
    let labeled = match cfg.labels_per_class {
        None => train.clone(),
        Some(l) => {
            let mut rng = RngStream::new(cfg.data_seed, STREAM_LABELS);
            let order = rng.permutation(train.len());
            let mut taken = vec![0; train.k];
            let mut idx: Vec<usize> = order
                .into_iter()
                .filter(|&i| {
                    let c = train.y[i];
                    taken[c] += 1;
                    taken[c] <= l
                })
                .collect();
            idx.sort_unstable();
            train.subset(&idx)
        }
    };
    Ok(ExperimentData { train, labeled, test })
}

pub fn build_teacher(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<(Teacher, TrainLog)> {
    let schedule = cfg.teacher.schedule()?;
    train_teacher(
        &cfg.teacher.arch,
        &schedule,
        &data.train,
        &cfg.teacher.training,
        &mut RngStream::new(cfg.teacher.seed, STREAM_TEACHER),
    )
}

/// SHA-256 over the teacher's raw and EMA weights and its architecture.
pub fn teacher_hash(teacher: &Teacher) -> Result<String> {
    let meta = serde_json::json!({"arch": teacher.arch, "schedule": teacher.schedule});
    let mut bytes = encode_params(&teacher.params, &meta)?;
    bytes.extend(encode_params(&teacher.ema_params, &serde_json::Value::Null)?);
    Ok(sha256_hex(&bytes))
}

pub fn student_arch(cfg: &ExperimentConfig) -> StudentArch {
    StudentArch {
        input_dim: cfg.dataset.dim(),
        hidden: cfg.student_hidden.clone(),
        classes: cfg.dataset.classes(),
        teacher_width: cfg.teacher.arch.mid_width(),
    }
}

/// One row of the time-selection trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub mean_t: f64,
    pub std_t: f64,
    pub mean_reward: f64,
    pub entropy: f64,
}

impl TraceRow {
    fn from_record(step: usize, r: &RewardRecord) -> Self {
        Self {
            step,
            mean_t: r.mean_time(),
            std_t: r.std_time(),
            mean_reward: r.mean_reward(),
            entropy: r.entropy,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub student: StudentNet,
    /// Mean weighted distillation loss per epoch.
    pub losses: Vec<f64>,
    /// One row per distillation step in reinforced mode, empty otherwise.
    pub trace: Vec<TraceRow>,
    pub steps_per_epoch: usize,
}

/// Distils a freshly initialized student from the teacher under the
/// configured time selection.
pub fn run_stage1(
    cfg: &ExperimentConfig,
    teacher: Option<&Teacher>,
    data: &ExperimentData,
    seed: u64,
) -> Result<Stage1Output> {
    let arch = student_arch(cfg);
    let mut student = StudentNet::new(arch, &mut RngStream::new(seed, STREAM_STUDENT))?;
    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(cfg.distill.batch_size);
    if cfg.selection == TimeSelection::None {
        return Ok(Stage1Output {
            student,
            losses: Vec::new(),
            trace: Vec::new(),
            steps_per_epoch,
        });
    }
    let teacher = teacher.ok_or_else(|| Error::Config("stage one needs a trained teacher".into()))?;
    let t_count = teacher.steps();
    ensure!(
        t_count == cfg.steps(),
        Config,
        "teacher has T = {t_count}, config expects {}",
        cfg.steps()
    );
    ensure!(
        teacher.arch.mid_width() == student.arch.teacher_width,
        Config,
        "teacher feature width differs from the student projector"
    );
    let mut rng = RngStream::new(seed, STREAM_STAGE1);
    let mut selector = match cfg.selection {
        TimeSelection::Reinforced => {
            let mut prng = RngStream::new(seed, STREAM_POLICY);
            let policy = TimePolicy::new(data.train.dim(), cfg.policy_hidden, t_count, &mut prng)?;
            let decoder = AuxDecoder::new(teacher.feature_dim(), data.train.k, &mut prng)?;
            Some(TimeSelector::new(policy, decoder, cfg.joint.clone())?)
        }
        _ => None,
    };
    let shared_labels = data.labeled.len() == data.train.len();
    let mut label_cursor = Vec::new();
    let mut opt = cfg.distill.optimizer.build()?;
    let mut losses = Vec::with_capacity(cfg.distill.epochs);
    let mut trace = Vec::new();
    for epoch in 0..cfg.distill.epochs {
        let order = rng.permutation(n);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.distill.batch_size) {
            let x = data.train.x.select_rows(chunk);
            let times = match (cfg.selection, selector.as_mut()) {
                (TimeSelection::Fixed(t), _) => vec![t; chunk.len()],
                (TimeSelection::Random, _) => (0..chunk.len()).map(|_| rng.below(t_count)).collect(),
                (TimeSelection::Reinforced, Some(sel)) => {
                    let step = trace.len();
                    if shared_labels {
                        let y: Vec<usize> = chunk.iter().map(|&i| data.train.y[i]).collect();
                        let rec = sel.joint_step(teacher, &x, &y, &mut rng)?;
                        trace.push(TraceRow::from_record(step, &rec));
                        rec.times
                    } else {
                        let idx = next_labeled(&mut label_cursor, data.labeled.len(), chunk.len(), &mut rng);
                        let xl = data.labeled.x.select_rows(&idx);
                        let yl: Vec<usize> = idx.iter().map(|&i| data.labeled.y[i]).collect();
                        let rec = sel.joint_step(teacher, &xl, &yl, &mut rng)?;
                        trace.push(TraceRow::from_record(step, &rec));
                        sample_time(&sel.policy, &x, &mut rng)?
                    }
                }
                _ => unreachable!("stage one skipped for mode none"),
            };
            let loss = distill_step(&mut student, &mut opt, teacher, &x, &times, &cfg.distill)
                .map_err(|e| diverged(e, epoch))?;
            total += loss;
        }
        losses.push(total / steps_per_epoch as f64);
    }
    Ok(Stage1Output {
        student,
        losses,
        trace,
        steps_per_epoch,
    })
}

/// Draws `m` labelled indices by walking successive permutations.
fn next_labeled(cursor: &mut Vec<usize>, n: usize, m: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut out = Vec::with_capacity(m);
    while out.len() < m {
        if cursor.is_empty() {
            *cursor = rng.permutation(n);
            cursor.reverse();
        }
        out.push(cursor.pop().expect("refilled"));
    }
    out
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite(w) => Error::Diverged(format!("distillation epoch {epoch}: non-finite {w}")),
        other => other,
    }
}

/// Finetunes the whole student on the labelled split and scores it on the test split.
pub fn run_stage2(
    student: &mut StudentNet,
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    seed: u64,
) -> Result<FinetuneResult> {
    finetune(
        student,
        &data.labeled,
        &data.test,
        &cfg.finetune,
        &mut RngStream::new(seed, STREAM_STAGE2),
    )
}

/// Outcome of both stages for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub stage1_losses: Vec<f64>,
    pub finetune_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Mean selected time index over the last stage-one epoch (reinforced only).
    pub final_mean_t: Option<f64>,
    /// `final_mean_t / T`, in `[0, 1)`.
    pub final_mean_t_quantile: Option<f64>,
    pub trace: Vec<TraceRow>,
}

/// Result of a single-mode run over all configured seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub teacher_hash: Option<String>,
    pub mode: TimeSelection,
    pub steps: usize,
    pub classes: usize,
    pub runs: Vec<SeedRun>,
    pub mean_test_accuracy: f64,
    pub std_test_accuracy: f64,
}

pub fn run_seed(
    cfg: &ExperimentConfig,
    teacher: Option<&Teacher>,
    data: &ExperimentData,
    seed: u64,
) -> Result<SeedRun> {
    let before = teacher.map(teacher_hash).transpose()?;
    let s1 = run_stage1(cfg, teacher, data, seed)?;
    if let Some(t) = teacher {
        ensure!(
            Some(teacher_hash(t)?) == before,
            InvalidArgument,
            "stage one modified the teacher"
        );
    }
    let mut student = s1.student;
    let ft = run_stage2(&mut student, cfg, data, seed)?;
    let final_mean_t = (!s1.trace.is_empty()).then(|| {
        let last = &s1.trace[s1.trace.len().saturating_sub(s1.steps_per_epoch)..];
        last.iter().map(|r| r.mean_t).sum::<f64>() / last.len() as f64
    });
    Ok(SeedRun {
        seed,
        stage1_losses: s1.losses,
        finetune_losses: ft.epoch_losses,
        train_accuracy: ft.train_accuracy,
        test_accuracy: ft.test_accuracy,
        final_mean_t,
        final_mean_t_quantile: final_mean_t.map(|m| m / cfg.steps() as f64),
        trace: s1.trace,
    })
}

/// Both stages for every configured seed.
pub fn run_experiment(cfg: &ExperimentConfig, teacher: Option<&Teacher>, data: &ExperimentData) -> Result<RunReport> {
    cfg.validate()?;
    let runs = cfg
        .seeds
        .iter()
        .map(|&s| run_seed(cfg, teacher, data, s))
        .collect::<Result<Vec<_>>>()?;
    let acc: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
    let (mean, std) = mean_std(&acc);
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.hash(),
        teacher_hash: teacher.map(teacher_hash).transpose()?,
        mode: cfg.selection,
        steps: cfg.steps(),
        classes: cfg.dataset.classes(),
        runs,
        mean_test_accuracy: mean,
        std_test_accuracy: std,
    })
}

/// Mean and unbiased standard deviation (zero for fewer than two values).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: TimeSelection,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    /// Hash of the base config with the mode field ignored.
    pub config_hash: String,
    pub teacher_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub checks: Vec<OrderingCheck>,
    pub runs: Vec<RunReport>,
}

impl AblationReport {
    pub fn row(&self, mode: TimeSelection) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }
}

/// Default mode set: no distillation, random, every fixed grid index, reinforced.
pub fn ablation_modes(cfg: &ExperimentConfig) -> Vec<TimeSelection> {
    let mut modes = vec![TimeSelection::None, TimeSelection::Random];
    modes.extend(cfg.fixed_grid.iter().map(|&t| TimeSelection::Fixed(t)));
    modes.push(TimeSelection::Reinforced);
    modes
}

/// Runs every config against one shared teacher. All configs must agree on
/// everything that determines the teacher, and on the seeds.
pub fn run_ablation(configs: &[ExperimentConfig], teacher: &Teacher, data: &ExperimentData) -> Result<AblationReport> {
    let base = configs
        .first()
        .ok_or_else(|| Error::Config("ablation needs at least one mode".into()))?;
    for c in configs {
        ensure!(
            c.teacher_key() == base.teacher_key(),
            Config,
            "ablation configs use different teachers"
        );
        ensure!(c.seeds == base.seeds, Config, "ablation configs use different seeds");
    }
    let hash = teacher_hash(teacher)?;
    let mut runs = Vec::with_capacity(configs.len());
    for c in configs {
        let r = run_experiment(c, Some(teacher), data)?;
        ensure!(
            r.teacher_hash.as_deref() == Some(hash.as_str()),
            InvalidArgument,
            "teacher changed during ablation"
        );
        runs.push(r);
    }
    let rows: Vec<AblationRow> = runs
        .iter()
        .map(|r| {
            let accuracies: Vec<f64> = r.runs.iter().map(|s| s.test_accuracy).collect();
            let (mean, std) = mean_std(&accuracies);
            AblationRow {
                mode: r.mode,
                accuracies,
                mean,
                std,
            }
        })
        .collect();
    let mut unmoded = base.clone();
    unmoded.selection = TimeSelection::None;
    let report = AblationReport {
        schema_version: SCHEMA_VERSION,
        config_hash: unmoded.hash(),
        teacher_hash: hash,
        seeds: base.seeds.clone(),
        checks: ordering_checks(&rows, base.steps()),
        rows,
        runs,
    };
    Ok(report)
}

/// `reinforced >= random`, `reinforced >= fixed(T-1)`, `fixed(T-1) <= none`,
/// each evaluated when both modes are present.
pub fn ordering_checks(rows: &[AblationRow], steps: usize) -> Vec<OrderingCheck> {
    let get = |m: TimeSelection| rows.iter().find(|r| r.mode == m).map(|r| r.mean);
    let last = TimeSelection::Fixed(steps - 1);
    let pairs = [
        (TimeSelection::Reinforced, TimeSelection::Random),
        (TimeSelection::Reinforced, last),
        (TimeSelection::None, last),
    ];
    pairs
        .iter()
        .filter_map(|&(hi, lo)| {
            let (a, b) = (get(hi)?, get(lo)?);
            Some(OrderingCheck {
                name: format!("{hi} >= {lo}"),
                lhs: a,
                rhs: b,
                passed: a >= b,
            })
        })
        .collect()
}

/// Copy of `cfg` with another time selection.
pub fn with_mode(cfg: &ExperimentConfig, mode: TimeSelection) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.selection = mode;
    c
}
