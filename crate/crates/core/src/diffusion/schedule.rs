use serde::{Deserialize, Serialize};

use crate::error::ensure;
use crate::numeric::Matrix;
use crate::Result;

/// Variance schedule over diffusion steps `1..=T`.
///
/// Arrays are stored zero-based: `beta[s - 1]` is `β_s`. Step 0 is the clean
/// data, with `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    #[serde(skip)]
    alpha: Vec<f64>,
    #[serde(skip)]
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        ensure!(
            beta.len() >= 2,
            InvalidArgument,
            "schedule needs T >= 2 steps, got {}",
            beta.len()
        );
        if let Some((i, b)) = beta.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(crate::Error::InvalidArgument(format!(
                "beta_{} = {b} outside (0, 1)",
                i + 1
            )));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { beta, alpha, alpha_bar })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `β_s` for `s` in `1..=T`.
    pub fn beta(&self, s: usize) -> f64 {
        self.beta[s - 1]
    }

    pub fn alpha(&self, s: usize) -> f64 {
        self.alpha[s - 1]
    }

    /// `ᾱ_s` for `s` in `0..=T`.
    pub fn alpha_bar(&self, s: usize) -> f64 {
        if s == 0 {
            1.0
        } else {
            self.alpha_bar[s - 1]
        }
    }

    pub(crate) fn rebuild(self) -> Result<Self> {
        Self::from_betas(self.beta)
    }
}

/// `β` linear from `beta1` to `beta_t` over `T` steps, endpoints included.
pub fn linear_beta_schedule(t: usize, beta1: f64, beta_t: f64) -> Result<NoiseSchedule> {
    ensure!(t >= 2, InvalidArgument, "schedule needs T >= 2 steps, got {t}");
    ensure!(
        0.0 < beta1 && beta1 <= beta_t && beta_t < 1.0,
        InvalidArgument,
        "need 0 < beta1 <= betaT < 1, got ({beta1}, {beta_t})"
    );
    let step = (beta_t - beta1) / (t - 1) as f64;
    let beta = (0..t).map(|i| beta1 + step * i as f64).collect();
    NoiseSchedule::from_betas(beta)
}

/// `√ᾱ_s x0 + √(1-ᾱ_s) ε` row by row, with step `steps[r]` for row `r`.
/// Steps range over `0..=T`.
pub fn forward_sample(x0: &Matrix, steps: &[usize], eps: &Matrix, schedule: &NoiseSchedule) -> Result<Matrix> {
    ensure!(
        x0.shape() == eps.shape(),
        Shape,
        "x0 is {:?} but eps is {:?}",
        x0.shape(),
        eps.shape()
    );
    ensure!(
        steps.len() == x0.rows(),
        Shape,
        "{} steps for {} rows",
        steps.len(),
        x0.rows()
    );
    if let Some(&bad) = steps.iter().find(|&&s| s > schedule.steps()) {
        return Err(crate::Error::InvalidArgument(format!(
            "step {bad} outside [0, {}]",
            schedule.steps()
        )));
    }
    let mut xt = Matrix::zeros(x0.rows(), x0.cols());
    for (r, &s) in steps.iter().enumerate() {
        let ab = schedule.alpha_bar(s);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for ((o, &x), &e) in xt.row_mut(r).iter_mut().zip(x0.row(r)).zip(eps.row(r)) {
            *o = a * x + b * e;
        }
    }
    Ok(xt)
}

/// Noised batch. `steps` are diffusion steps in `1..=T`; the network sees
/// index `step - 1`.
#[derive(Debug, Clone)]
pub struct DiffusionBatch {
    pub x0: Matrix,
    pub steps: Vec<usize>,
    pub eps: Matrix,
    pub xt: Matrix,
}

impl DiffusionBatch {
    pub fn new(x0: Matrix, steps: Vec<usize>, eps: Matrix, schedule: &NoiseSchedule) -> Result<Self> {
        let xt = forward_sample(&x0, &steps, &eps, schedule)?;
        Ok(Self { x0, steps, eps, xt })
    }

    /// Network timestep indices `step - 1`.
    pub fn net_times(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.saturating_sub(1)).collect()
    }
}
