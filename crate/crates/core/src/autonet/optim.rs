use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::ensure;
use crate::Result;

/// Momentum SGD with L2 weight decay added to the gradient:
/// `g' = g + wd·θ; v = μ·v + g'; θ = θ - lr·v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lr >= 0.0 && self.lr.is_finite(),
            InvalidArgument,
            "learning rate must be >= 0, got {}",
            self.lr
        );
        ensure!(
            (0.0..1.0).contains(&self.momentum),
            InvalidArgument,
            "momentum must lie in [0, 1), got {}",
            self.momentum
        );
        ensure!(self.weight_decay >= 0.0, InvalidArgument, "weight decay must be >= 0");
        Ok(())
    }
}

/// Velocity buffer, created lazily on the first step.
#[derive(Debug, Clone, Default)]
pub struct SgdState {
    velocity: Option<ParamStore>,
}

pub fn sgd_step(params: &mut ParamStore, grads: &ParamStore, cfg: &SgdConfig, state: &mut SgdState) -> Result<()> {
    cfg.validate()?;
    params.check_layout(grads, "sgd step")?;
    let velocity = state.velocity.get_or_insert_with(|| params.zeros_like());
    for ((_, p), ((_, g), (_, v))) in params.iter_mut().zip(grads.iter().zip(velocity.iter_mut())) {
        for ((pv, &gv), vv) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(v.as_mut_slice()) {
            let g_eff = gv + cfg.weight_decay * *pv;
            *vv = cfg.momentum * *vv + g_eff;
            *pv -= cfg.lr * *vv;
        }
    }
    Ok(())
}

/// Adam with L2 decay folded into the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    step: u64,
    m: Option<ParamStore>,
    v: Option<ParamStore>,
}

pub fn adam_step(params: &mut ParamStore, grads: &ParamStore, cfg: &AdamConfig, state: &mut AdamState) -> Result<()> {
    ensure!(
        cfg.lr >= 0.0,
        InvalidArgument,
        "learning rate must be >= 0, got {}",
        cfg.lr
    );
    params.check_layout(grads, "adam step")?;
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    let m = state.m.get_or_insert_with(|| params.zeros_like());
    let v = state.v.get_or_insert_with(|| params.zeros_like());
    for (((_, p), (_, g)), ((_, mm), (_, vv))) in
        params.iter_mut().zip(grads.iter()).zip(m.iter_mut().zip(v.iter_mut()))
    {
        for (((pv, &gv), mv), vv) in p
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(mm.as_mut_slice())
            .zip(vv.as_mut_slice())
        {
            let g_eff = gv + cfg.weight_decay * *pv;
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * g_eff;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * g_eff * g_eff;
            *pv -= cfg.lr * (*mv / bc1) / ((*vv / bc2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Optimizer choice as it appears in configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    },
    Adam {
        lr: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let s = SgdConfig::default();
        OptimizerConfig::Sgd {
            lr: s.lr,
            momentum: s.momentum,
            weight_decay: s.weight_decay,
        }
    }
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn build(&self) -> Result<Optimizer> {
        Ok(match *self {
            OptimizerConfig::Sgd {
                lr,
                momentum,
                weight_decay,
            } => {
                let cfg = SgdConfig {
                    lr,
                    momentum,
                    weight_decay,
                };
                cfg.validate()?;
                Optimizer::Sgd(cfg, SgdState::default())
            }
            OptimizerConfig::Adam { lr, weight_decay } => {
                ensure!(lr >= 0.0, InvalidArgument, "learning rate must be >= 0, got {lr}");
                Optimizer::Adam(
                    AdamConfig {
                        lr,
                        beta1: default_beta1(),
                        beta2: default_beta2(),
                        eps: default_eps(),
                        weight_decay,
                    },
                    AdamState::default(),
                )
            }
        })
    }
}

/// Stateful optimizer.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd(SgdConfig, SgdState),
    Adam(AdamConfig, AdamState),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        match self {
            Optimizer::Sgd(cfg, state) => sgd_step(params, grads, cfg, state),
            Optimizer::Adam(cfg, state) => adam_step(params, grads, cfg, state),
        }
    }

    /// Multiplies the learning rate (step decay schedules).
    pub fn scale_lr(&mut self, factor: f64) {
        match self {
            Optimizer::Sgd(cfg, _) => cfg.lr *= factor,
            Optimizer::Adam(cfg, _) => cfg.lr *= factor,
        }
    }
}

/// `ema = m·ema + (1 - m)·params`.
pub fn ema_update(ema: &mut ParamStore, params: &ParamStore, m: f64) -> Result<()> {
    ensure!(
        (0.0..1.0).contains(&m),
        InvalidArgument,
        "EMA momentum must lie in [0, 1), got {m}"
    );
    ema.check_layout(params, "ema update")?;
    for ((_, e), (_, p)) in ema.iter_mut().zip(params.iter()) {
        for (ev, &pv) in e.as_mut_slice().iter_mut().zip(p.as_slice()) {
            *ev = m * *ev + (1.0 - m) * pv;
        }
    }
    Ok(())
}
