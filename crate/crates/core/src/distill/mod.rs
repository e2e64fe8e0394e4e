//! Feature distillation from a frozen teacher into a student perceptron, and
//! supervised finetuning of the student.

mod losses;
mod student;

pub use losses::{at_loss, hint_loss, rkd_loss, LossGrad, LossKind};
pub use student::{
    student_backward, student_forward, DistillObjective, StudentArch, StudentForward, StudentNet, TaskObjective,
};

use serde::{Deserialize, Serialize};

use crate::autonet::{Objective, Optimizer, OptimizerConfig};
use crate::datasets::LabeledDataset;
use crate::diffusion::Teacher;
use crate::error::ensure;
use crate::numeric::{Matrix, RngStream};
use crate::{Error, Result};

/// Stage-one settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub loss: LossKind,
    /// Defaults to the loss kind's standard weight.
    #[serde(default)]
    pub weight: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

impl DistillConfig {
    pub fn new(loss: LossKind, epochs: usize, batch_size: usize) -> Self {
        Self {
            loss,
            weight: None,
            epochs,
            batch_size,
            optimizer: OptimizerConfig::default(),
        }
    }

    pub fn weight(&self) -> f64 {
        self.weight.unwrap_or_else(|| self.loss.default_weight())
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weight();
        ensure!(
            w > 0.0 && w.is_finite(),
            Config,
            "distillation weight must be positive, got {w}"
        );
        ensure!(self.batch_size >= 1, Config, "batch size must be >= 1");
        if self.loss == LossKind::Rkd {
            ensure!(self.batch_size >= 3, Config, "relational loss needs batch size >= 3");
        }
        Ok(())
    }
}

/// One optimizer step on `weight · L_kd` between the student's projected
/// features and the teacher's mid-block features of clean `x` at `times`
/// (one network time index per row). Returns the weighted loss before the step.
pub fn distill_step(
    student: &mut StudentNet,
    opt: &mut Optimizer,
    teacher: &Teacher,
    x: &Matrix,
    times: &[usize],
    cfg: &DistillConfig,
) -> Result<f64> {
    let zt = teacher.forward(x, times)?.z_mid;
    let obj = DistillObjective {
        arch: &student.arch,
        x,
        teacher_features: &zt,
        kind: cfg.loss,
        weight: cfg.weight(),
    };
    let (loss, grads) = obj.loss_and_grad(&student.params)?;
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("distillation loss {loss}")));
    }
    opt.step(&mut student.params, &grads)?;
    student.params.check_finite("student parameters")?;
    Ok(loss)
}

/// Stage-two settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Mean minibatch cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Minimizes cross-entropy of the whole student on `train`; reports accuracy
/// on `train` and on held-out `test`.
pub fn finetune(
    student: &mut StudentNet,
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &FinetuneConfig,
    rng: &mut RngStream,
) -> Result<FinetuneResult> {
    ensure!(cfg.batch_size >= 1, Config, "batch size must be >= 1");
    ensure!(!train.is_empty(), InvalidArgument, "empty training set");
    ensure!(
        train.k <= student.arch.classes,
        Shape,
        "{} classes but head has {}",
        train.k,
        student.arch.classes
    );
    let mut opt = cfg.optimizer.build()?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = rng.permutation(train.len());
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = train.x.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| train.y[i]).collect();
            let obj = TaskObjective {
                arch: &student.arch,
                x: &x,
                y: &y,
            };
            let (loss, grads) = obj.loss_and_grad(&student.params).map_err(|e| match e {
                Error::NonFinite(w) => Error::Diverged(format!("finetune epoch {epoch}: non-finite {w}")),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("finetune epoch {epoch}: loss {loss}")));
            }
            opt.step(&mut student.params, &grads)?;
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(FinetuneResult {
        train_accuracy: student.accuracy(&train.x, &train.y)?,
        test_accuracy: student.accuracy(&test.x, &test.y)?,
        epoch_losses,
    })
}
