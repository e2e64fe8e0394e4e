//! Small neural-network engine with exact, hand-derived gradients.
//!
//! Networks are fixed layer graphs (perceptrons, an optional single-head
//! attention block, a time-conditioned denoiser). Each forward pass returns a
//! cache that its backward pass consumes; the [`Objective`] trait ties a
//! scalar loss to that pair so gradients can be checked against central
//! differences.

mod denoiser;
mod io;
mod loss;
mod mlp;
mod optim;
mod params;

pub use denoiser::{
    denoiser_backward, denoiser_forward, time_embedding, AttentionRecord, DenoiserArch, DenoiserCache, DenoiserOutput,
};
pub use io::{decode_params, encode_params, load_params, save_params};
pub use loss::{accuracy, argmax, cross_entropy, CrossEntropy};
pub use mlp::{mlp_backward, mlp_forward, MlpCache, MlpGrads, MlpSpec};
pub use optim::{
    adam_step, ema_update, sgd_step, AdamConfig, AdamState, Optimizer, OptimizerConfig, SgdConfig, SgdState,
};
pub use params::{init_weight, ParamStore};

use crate::numeric::{central_diff, close};
use crate::Result;

/// Scalar loss over a parameter store with an exact gradient.
pub trait Objective {
    fn loss(&self, params: &ParamStore) -> Result<f64>;

    fn loss_and_grad(&self, params: &ParamStore) -> Result<(f64, ParamStore)>;
}

/// Exact gradient of `objective` at `params`.
pub fn grad<O: Objective + ?Sized>(objective: &O, params: &ParamStore) -> Result<ParamStore> {
    let (loss, g) = objective.loss_and_grad(params)?;
    if !loss.is_finite() {
        return Err(crate::Error::NonFinite("objective value".into()));
    }
    g.check_finite("gradient")?;
    Ok(g)
}

/// Central-difference gradient of `objective`, flattened in store order.
pub fn numerical_grad<O: Objective + ?Sized>(objective: &O, params: &ParamStore, h: f64) -> Result<Vec<f64>> {
    central_diff(|flat| objective.loss(&params.unflatten(flat)?), &params.flatten(), h)
}

/// Outcome of comparing exact and finite-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub coordinates: usize,
    pub failures: usize,
    pub max_abs_err: f64,
    /// `(name, flat index within tensor, exact, numerical)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Checks every coordinate with `|exact - fd| <= atol + rtol·max(|exact|, |fd|)`.
pub fn gradient_check<O: Objective + ?Sized>(
    objective: &O,
    params: &ParamStore,
    h: f64,
    rtol: f64,
    atol: f64,
) -> Result<GradCheck> {
    let exact = grad(objective, params)?;
    let fd = numerical_grad(objective, params, h)?;
    let mut check = GradCheck {
        coordinates: fd.len(),
        failures: 0,
        max_abs_err: 0.0,
        worst: None,
    };
    let mut k = 0;
    for (name, m) in exact.iter() {
        for (i, &e) in m.as_slice().iter().enumerate() {
            let n = fd[k];
            let err = (e - n).abs();
            if !close(e, n, rtol, atol) {
                check.failures += 1;
            }
            if err >= check.max_abs_err {
                check.max_abs_err = err;
                check.worst = Some((name.to_string(), i, e, n));
            }
            k += 1;
        }
    }
    Ok(check)
}

/// `‖flatten(params)‖²`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SquaredNorm;

impl Objective for SquaredNorm {
    fn loss(&self, params: &ParamStore) -> Result<f64> {
        Ok(params.sum_sq())
    }

    fn loss_and_grad(&self, params: &ParamStore) -> Result<(f64, ParamStore)> {
        let mut g = params.clone();
        g.scale(2.0);
        Ok((params.sum_sq(), g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{standard_normal, Matrix, RngStream};

    #[test]
    fn squared_norm_gradient_is_twice_params() {
        let mut rng = RngStream::new(2, 0);
        let mut p = ParamStore::new();
        p.insert("a", standard_normal(&mut rng, 3, 2)).unwrap();
        let g = grad(&SquaredNorm, &p).unwrap();
        for (a, b) in g.flatten().iter().zip(p.flatten()) {
            assert_eq!(*a, 2.0 * b);
        }
        assert!(gradient_check(&SquaredNorm, &p, 1e-5, 1e-4, 1e-6).unwrap().passed());
    }

    /// Loss depends only on block "used".
    struct PartialLoss;

    impl Objective for PartialLoss {
        fn loss(&self, p: &ParamStore) -> Result<f64> {
            Ok(p.get("used")?.as_slice().iter().map(|v| v.sin()).sum())
        }

        fn loss_and_grad(&self, p: &ParamStore) -> Result<(f64, ParamStore)> {
            let mut g = p.zeros_like();
            *g.get_mut("used")? = p.get("used")?.map(f64::cos);
            Ok((self.loss(p)?, g))
        }
    }

    #[test]
    fn independent_block_has_zero_gradient() {
        let mut p = ParamStore::new();
        p.insert("used", Matrix::from_vec(1, 2, vec![0.2, 0.4]).unwrap())
            .unwrap();
        p.insert("unused", Matrix::from_vec(1, 2, vec![5.0, 6.0]).unwrap())
            .unwrap();
        let g = grad(&PartialLoss, &p).unwrap();
        assert!(g.get("unused").unwrap().as_slice().iter().all(|&v| v == 0.0));
        let fd = numerical_grad(&PartialLoss, &p, 1e-5).unwrap();
        assert_eq!(&fd[2..], &[0.0, 0.0]);
    }
}
