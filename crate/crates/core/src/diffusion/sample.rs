use crate::error::ensure;
use crate::numeric::{standard_normal, Matrix, RngStream};
use crate::Result;

use super::objective::EpsPredictor;
use super::NoiseSchedule;

/// Runs the reverse chain from `x_T ~ N(0, I)` down to step 1 with the
/// noise-prediction mean and variance `β_s`; the last step adds no noise.
pub fn ancestral_sample<M: EpsPredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    n: usize,
    rng: &mut RngStream,
) -> Result<Matrix> {
    ensure!(n >= 1, InvalidArgument, "sample count must be >= 1");
    let d = model.dim();
    let mut x = standard_normal(rng, n, d);
    for s in (1..=schedule.steps()).rev() {
        let eps_hat = model.predict_eps(&x, &vec![s; n])?;
        let coef = schedule.beta(s) / (1.0 - schedule.alpha_bar(s)).sqrt();
        let inv_sqrt_alpha = 1.0 / schedule.alpha(s).sqrt();
        let sigma = schedule.beta(s).sqrt();
        for r in 0..n {
            let e = eps_hat.row(r).to_vec();
            for (v, ev) in x.row_mut(r).iter_mut().zip(e) {
                *v = inv_sqrt_alpha * (*v - coef * ev);
                if s > 1 {
                    *v += sigma * rng.normal();
                }
            }
        }
        x.check_finite("reverse chain")?;
    }
    Ok(x)
}

/// Sample energy distance `2E|X-Y| - E|X-X'| - E|Y-Y'|` (V-statistic form).
pub fn energy_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    ensure!(a.cols() == b.cols(), Shape, "dims {} vs {}", a.cols(), b.cols());
    ensure!(a.rows() > 0 && b.rows() > 0, InvalidArgument, "empty sample");
    let mean_dist = |p: &Matrix, q: &Matrix| {
        let mut total = 0.0;
        for i in 0..p.rows() {
            for j in 0..q.rows() {
                total += p
                    .row(i)
                    .iter()
                    .zip(q.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
            }
        }
        total / (p.rows() * q.rows()) as f64
    };
    Ok(2.0 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b))
}
