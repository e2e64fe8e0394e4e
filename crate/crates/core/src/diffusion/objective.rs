use crate::autonet::{denoiser_backward, denoiser_forward, DenoiserArch, Objective, ParamStore};
use crate::error::ensure;
use crate::numeric::{standard_normal, Matrix, RngStream};
use crate::Result;

use super::{DiffusionBatch, NoiseSchedule};

/// Anything that predicts the injected noise from `(x_t, step)`.
/// Steps are diffusion steps in `1..=T`.
pub trait EpsPredictor {
    fn dim(&self) -> usize;

    fn predict_eps(&self, xt: &Matrix, steps: &[usize]) -> Result<Matrix>;
}

/// Loss value plus per-sample squared errors.
#[derive(Debug, Clone)]
pub struct DdpmLoss {
    pub loss: f64,
    pub per_sample: Vec<f64>,
}

fn squared_errors(eps: &Matrix, eps_hat: &Matrix) -> Result<DdpmLoss> {
    let diff = eps_hat.sub(eps)?;
    let per_sample: Vec<f64> = (0..diff.rows())
        .map(|r| diff.row(r).iter().map(|v| v * v).sum())
        .collect();
    let loss = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(DdpmLoss { loss, per_sample })
}

/// Draws steps uniformly from `1..=T` and standard-normal noise for `x0`.
pub fn sample_batch(x0: &Matrix, schedule: &NoiseSchedule, rng: &mut RngStream) -> Result<DiffusionBatch> {
    ensure!(x0.rows() > 0, InvalidArgument, "empty batch");
    let steps = (0..x0.rows()).map(|_| 1 + rng.below(schedule.steps())).collect();
    let eps = standard_normal(rng, x0.rows(), x0.cols());
    DiffusionBatch::new(x0.clone(), steps, eps, schedule)
}

/// Error of `model` on a freshly noised batch.
pub fn ddpm_loss<M: EpsPredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x0: &Matrix,
    rng: &mut RngStream,
) -> Result<DdpmLoss> {
    ensure!(
        x0.cols() == model.dim(),
        Shape,
        "data dim {} but model dim {}",
        x0.cols(),
        model.dim()
    );
    let batch = sample_batch(x0, schedule, rng)?;
    batch_loss(model, &batch)
}

/// Error of `model` on a fixed batch.
pub fn batch_loss<M: EpsPredictor + ?Sized>(model: &M, batch: &DiffusionBatch) -> Result<DdpmLoss> {
    let eps_hat = model.predict_eps(&batch.xt, &batch.steps)?;
    squared_errors(&batch.eps, &eps_hat)
}

/// Noise-prediction loss on a fixed batch as a function of denoiser parameters.
pub struct DdpmObjective<'a> {
    pub arch: &'a DenoiserArch,
    pub batch: &'a DiffusionBatch,
}

impl Objective for DdpmObjective<'_> {
    fn loss(&self, params: &ParamStore) -> Result<f64> {
        let out = denoiser_forward(params, self.arch, &self.batch.xt, &self.batch.net_times())?;
        Ok(squared_errors(&self.batch.eps, &out.eps_hat)?.loss)
    }

    fn loss_and_grad(&self, params: &ParamStore) -> Result<(f64, ParamStore)> {
        let out = denoiser_forward(params, self.arch, &self.batch.xt, &self.batch.net_times())?;
        let diff = out.eps_hat.sub(&self.batch.eps)?;
        let loss = diff.sum_sq() / diff.rows() as f64;
        let d_eps = diff.scale(2.0 / diff.rows() as f64);
        let grads = denoiser_backward(params, self.arch, &out.cache, Some(&d_eps), None)?;
        Ok((loss, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autonet::gradient_check;
    use crate::diffusion::linear_beta_schedule;

    /// Predictor wired to return the true noise of a known batch.
    struct Oracle(Matrix);

    impl EpsPredictor for Oracle {
        fn dim(&self) -> usize {
            self.0.cols()
        }

        fn predict_eps(&self, _: &Matrix, _: &[usize]) -> Result<Matrix> {
            Ok(self.0.clone())
        }
    }

    struct Zero(usize);

    impl EpsPredictor for Zero {
        fn dim(&self) -> usize {
            self.0
        }

        fn predict_eps(&self, xt: &Matrix, _: &[usize]) -> Result<Matrix> {
            Ok(Matrix::zeros(xt.rows(), self.0))
        }
    }

    #[test]
    fn oracle_wiring_gives_zero_loss() {
        let s = linear_beta_schedule(50, 1e-4, 0.02).unwrap();
        let x0 = standard_normal(&mut RngStream::new(1, 0), 32, 4);
        let batch = sample_batch(&x0, &s, &mut RngStream::new(2, 0)).unwrap();
        let l = batch_loss(&Oracle(batch.eps.clone()), &batch).unwrap();
        assert_eq!(l.loss, 0.0);
    }

    #[test]
    fn zero_network_loss_is_dimension() {
        let s = linear_beta_schedule(50, 1e-4, 0.02).unwrap();
        let d = 6;
        let n = 20_000;
        let x0 = Matrix::zeros(n, d);
        let l = ddpm_loss(&Zero(d), &s, &x0, &mut RngStream::new(3, 0)).unwrap();
        // Var of a chi-square(d) is 2d.
        let se = (2.0 * d as f64 / n as f64).sqrt();
        assert!((l.loss - d as f64).abs() < 4.0 * se, "{}", l.loss);
    }

    #[test]
    fn loss_is_batch_order_invariant() {
        let s = linear_beta_schedule(20, 1e-4, 0.02).unwrap();
        let arch = DenoiserArch::bottleneck(3, 8, 4, 20);
        let params = arch.init(&mut RngStream::new(4, 0)).unwrap();
        let x0 = standard_normal(&mut RngStream::new(5, 0), 16, 3);
        let batch = sample_batch(&x0, &s, &mut RngStream::new(6, 0)).unwrap();
        let order: Vec<usize> = (0..16).rev().collect();
        let shuffled = DiffusionBatch::new(
            batch.x0.select_rows(&order),
            order.iter().map(|&i| batch.steps[i]).collect(),
            batch.eps.select_rows(&order),
            &s,
        )
        .unwrap();
        let a = DdpmObjective {
            arch: &arch,
            batch: &batch,
        }
        .loss(&params)
        .unwrap();
        let b = DdpmObjective {
            arch: &arch,
            batch: &shuffled,
        }
        .loss(&params)
        .unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let s = linear_beta_schedule(10, 1e-4, 0.02).unwrap();
        let arch = DenoiserArch::bottleneck(3, 6, 2, 10);
        let params = arch.init(&mut RngStream::new(7, 0)).unwrap();
        let x0 = standard_normal(&mut RngStream::new(8, 0), 5, 3);
        let batch = sample_batch(&x0, &s, &mut RngStream::new(9, 0)).unwrap();
        let check = gradient_check(
            &DdpmObjective {
                arch: &arch,
                batch: &batch,
            },
            &params,
            1e-5,
            1e-4,
            1e-7,
        )
        .unwrap();
        assert!(check.passed(), "{check:?}");
    }
}
