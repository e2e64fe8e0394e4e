use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autonet::{
    denoiser_forward, ema_update, load_params, save_params, DenoiserArch, DenoiserOutput, Objective, OptimizerConfig,
    ParamStore,
};
use crate::datasets::LabeledDataset;
use crate::error::ensure;
use crate::numeric::{Matrix, RngStream};
use crate::{Error, Result};

use super::objective::{batch_loss, sample_batch, DdpmObjective, EpsPredictor};
use super::NoiseSchedule;

const EMA_PREFIX: &str = "ema.";

/// Pretrained denoiser. Inference uses the EMA weights.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub arch: DenoiserArch,
    pub schedule: NoiseSchedule,
    pub params: ParamStore,
    pub ema_params: ParamStore,
}

impl Teacher {
    pub fn new(arch: DenoiserArch, schedule: NoiseSchedule, params: ParamStore) -> Result<Self> {
        arch.validate()?;
        ensure!(
            arch.time_steps == schedule.steps(),
            Config,
            "network embeds {} timesteps but schedule has T = {}",
            arch.time_steps,
            schedule.steps()
        );
        Ok(Self {
            arch,
            schedule,
            ema_params: params.clone(),
            params,
        })
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    /// EMA-weight forward pass with network time indices `0..T`.
    pub fn forward(&self, x: &Matrix, times: &[usize]) -> Result<DenoiserOutput> {
        denoiser_forward(&self.ema_params, &self.arch, x, times)
    }

    /// Mid-block features of `x` at time index `t` for every row.
    pub fn features(&self, x: &Matrix, t: usize) -> Result<Matrix> {
        Ok(self.forward(x, &vec![t; x.rows()])?.z_mid)
    }

    fn sidecar(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes the weights file and a JSON sidecar (`<path>.json`) holding
    /// the architecture and schedule.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut store = self.params.clone();
        store.extend(self.ema_params.prefixed(EMA_PREFIX))?;
        let meta = serde_json::json!({"kind": "teacher"});
        save_params(path, &store, &meta)?;
        let sidecar = TeacherSidecar {
            arch: self.arch.clone(),
            schedule: self.schedule.clone(),
        };
        crate::pipeline::write_atomic(&Self::sidecar(path), &serde_json::to_vec_pretty(&sidecar)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side_path = Self::sidecar(path);
        let text = fs::read(&side_path).map_err(|e| Error::io(&side_path, e))?;
        let side: TeacherSidecar = serde_json::from_slice(&text)?;
        let (store, _) = load_params(path)?;
        let mut params = ParamStore::new();
        let mut ema = ParamStore::new();
        for (name, m) in store.iter() {
            match name.strip_prefix(EMA_PREFIX) {
                Some(rest) => ema.insert(rest, m.clone())?,
                None => params.insert(name, m.clone())?,
            }
        }
        let expected = side.arch.init(&mut RngStream::new(0, 0))?;
        if !expected.same_layout(&params) || !expected.same_layout(&ema) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "tensor layout does not match the recorded architecture".into(),
            });
        }
        let mut teacher = Teacher::new(side.arch, side.schedule.rebuild()?, params)?;
        teacher.ema_params = ema;
        Ok(teacher)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TeacherSidecar {
    arch: DenoiserArch,
    schedule: NoiseSchedule,
}

impl EpsPredictor for Teacher {
    fn dim(&self) -> usize {
        self.arch.input_dim
    }

    fn predict_eps(&self, xt: &Matrix, steps: &[usize]) -> Result<Matrix> {
        Ok(self.forward(xt, &net_times(steps, self.steps())?)?.eps_hat)
    }
}

/// Teacher training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_ema")]
    pub ema_decay: f64,
    /// Caps the decay at `(1 + n) / (10 + n)` after `n` updates.
    #[serde(default = "yes")]
    pub ema_warmup: bool,
}

fn default_ema() -> f64 {
    0.999
}

fn yes() -> bool {
    true
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            optimizer: OptimizerConfig::default(),
            ema_decay: default_ema(),
            ema_warmup: true,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, Config, "epochs must be >= 1");
        ensure!(self.batch_size >= 1, Config, "batch size must be >= 1");
        ensure!(
            (0.0..1.0).contains(&self.ema_decay),
            Config,
            "EMA decay must lie in [0, 1)"
        );
        Ok(())
    }
}

/// Loss history of a teacher run. `initial_loss` and `final_loss` use the
/// same fixed noise draw over the whole training set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

struct ParamsPredictor<'a> {
    arch: &'a DenoiserArch,
    params: &'a ParamStore,
}

impl EpsPredictor for ParamsPredictor<'_> {
    fn dim(&self) -> usize {
        self.arch.input_dim
    }

    fn predict_eps(&self, xt: &Matrix, steps: &[usize]) -> Result<Matrix> {
        let times = net_times(steps, self.arch.time_steps)?;
        Ok(denoiser_forward(self.params, self.arch, xt, &times)?.eps_hat)
    }
}

fn net_times(steps: &[usize], t_max: usize) -> Result<Vec<usize>> {
    steps
        .iter()
        .map(|&s| {
            if s == 0 || s > t_max {
                Err(Error::InvalidArgument(format!("step {s} outside [1, {t_max}]")))
            } else {
                Ok(s - 1)
            }
        })
        .collect()
}

fn diverged(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::Diverged(format!("epoch {epoch}, step {step}: non-finite {what}")),
        other => other,
    }
}

/// Minimizes the noise-prediction loss over `data` with minibatch steps,
/// keeping an EMA copy of the weights.
pub fn train_teacher(
    arch: &DenoiserArch,
    schedule: &NoiseSchedule,
    data: &LabeledDataset,
    config: &TeacherConfig,
    rng: &mut RngStream,
) -> Result<(Teacher, TrainLog)> {
    config.validate()?;
    ensure!(
        data.dim() == arch.input_dim,
        Shape,
        "data dim {} but arch input {}",
        data.dim(),
        arch.input_dim
    );
    ensure!(!data.is_empty(), InvalidArgument, "empty training set");
    if let Some(m) = data.x.col_means().into_iter().find(|m| m.abs() > 1e-6) {
        return Err(Error::InvalidArgument(format!(
            "training data must be zero-mean, found column mean {m}"
        )));
    }
    let params = arch.init(&mut rng.child(1))?;
    let mut teacher = Teacher::new(arch.clone(), schedule.clone(), params)?;
    let eval_batch = sample_batch(&data.x, schedule, &mut rng.child(2))?;
    let eval = |p: &ParamStore| -> Result<f64> {
        let pred = ParamsPredictor { arch, params: p };
        Ok(batch_loss(&pred, &eval_batch)?.loss)
    };
    let initial_loss = eval(&teacher.params).map_err(|e| diverged(e, 0, 0))?;

    let mut opt = config.optimizer.build()?;
    let mut updates = 0usize;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = rng.permutation(data.len());
        let mut total = 0.0;
        let mut batches = 0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = sample_batch(&data.x.select_rows(chunk), schedule, rng)?;
            let obj = DdpmObjective { arch, batch: &batch };
            let (loss, g) = obj
                .loss_and_grad(&teacher.params)
                .map_err(|e| diverged(e, epoch, step))?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("epoch {epoch}, step {step}: loss {loss}")));
            }
            opt.step(&mut teacher.params, &g)?;
            teacher
                .params
                .check_finite("teacher parameters")
                .map_err(|e| diverged(e, epoch, step))?;
            let decay = if config.ema_warmup {
                config.ema_decay.min((1 + updates) as f64 / (10 + updates) as f64)
            } else {
                config.ema_decay
            };
            ema_update(&mut teacher.ema_params, &teacher.params, decay)?;
            updates += 1;
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    let final_loss = eval(&teacher.params).map_err(|e| diverged(e, config.epochs, 0))?;
    Ok((
        teacher,
        TrainLog {
            initial_loss,
            final_loss,
            epoch_losses,
        },
    ))
}
