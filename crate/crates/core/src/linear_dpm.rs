//! Closed-form analysis of a linear denoiser with a skip connection.
//!
//! The denoiser predicts `ε̂ = P x_t` with `P = W_D W_E + W_S`. For zero-mean
//! data with covariance `Σ` the expected loss splits into a data term
//! `ᾱ·tr(P Σ Pᵀ)` and a term `‖I − √(1−ᾱ) P‖²_F` that only involves the noise.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::ensure;
use crate::numeric::{solve_spd, standard_normal, sym_eigen, Matrix, RngStream};
use crate::{Error, Result};

/// Encoder `W_E` (d × L), decoder `W_D` (L × d), skip `W_S` (L × L).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub w_e: Matrix,
    pub w_d: Matrix,
    pub w_s: Matrix,
}

impl LinearModel {
    pub fn new(w_e: Matrix, w_d: Matrix, w_s: Matrix) -> Result<Self> {
        let (d, l) = w_e.shape();
        ensure!(d < l, Shape, "bottleneck requires d < L, got d = {d}, L = {l}");
        ensure!(
            w_d.shape() == (l, d),
            Shape,
            "W_D is {:?}, expected ({l}, {d})",
            w_d.shape()
        );
        ensure!(
            w_s.shape() == (l, l),
            Shape,
            "W_S is {:?}, expected ({l}, {l})",
            w_s.shape()
        );
        Ok(Self { w_e, w_d, w_s })
    }

    /// Entries i.i.d. `N(0, scale²)`.
    pub fn random(d: usize, l: usize, scale: f64, rng: &mut RngStream) -> Result<Self> {
        Self::new(
            standard_normal(rng, d, l).scale(scale),
            standard_normal(rng, l, d).scale(scale),
            standard_normal(rng, l, l).scale(scale),
        )
    }

    pub fn dim(&self) -> usize {
        self.w_s.rows()
    }

    pub fn composite(&self) -> CompositeMap {
        let mut p = self.w_d.matmul(&self.w_e).expect("shapes checked at construction");
        p.axpy(1.0, &self.w_s).expect("shapes checked at construction");
        CompositeMap { p }
    }
}

/// The end-to-end map `P` (L × L).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeMap {
    pub p: Matrix,
}

impl CompositeMap {
    pub fn new(p: Matrix) -> Result<Self> {
        ensure!(p.rows() == p.cols(), Shape, "P must be square, got {:?}", p.shape());
        p.check_finite("P")?;
        Ok(Self { p })
    }

    pub fn dim(&self) -> usize {
        self.p.rows()
    }
}

/// Symmetric PSD data covariance with its eigendecomposition.
#[derive(Debug, Clone)]
pub struct DataCovariance {
    sigma: Matrix,
    /// Eigenvalues, non-increasing.
    eigenvalues: Vec<f64>,
    /// `Σ^{1/2}` factor `V diag(√λ)`, so `x = factor·z` has covariance `Σ`.
    factor: Matrix,
}

impl DataCovariance {
    pub fn new(sigma: Matrix) -> Result<Self> {
        ensure!(
            sigma.rows() == sigma.cols(),
            Shape,
            "covariance must be square, got {:?}",
            sigma.shape()
        );
        sigma.check_finite("covariance")?;
        let asym = sigma.asymmetry();
        ensure!(
            asym <= 1e-10,
            InvalidArgument,
            "covariance not symmetric (max |Σ - Σᵀ| = {asym:e})"
        );
        let eig = sym_eigen(&sigma)?;
        if let Some(&neg) = eig.values.iter().find(|&&v| v < -1e-10) {
            return Err(Error::InvalidArgument(format!(
                "covariance not PSD: eigenvalue {neg:e}"
            )));
        }
        let l = sigma.rows();
        let factor = Matrix::from_fn(l, l, |i, j| eig.vectors[(i, j)] * eig.values[j].max(0.0).sqrt());
        Ok(Self {
            sigma,
            eigenvalues: eig.values,
            factor,
        })
    }

    pub fn identity(l: usize) -> Self {
        Self::new(Matrix::identity(l)).expect("identity is PSD")
    }

    /// `A Aᵀ` with `A` standard normal (L × rank), divided by `rank`.
    pub fn random(l: usize, rank: usize, rng: &mut RngStream) -> Result<Self> {
        ensure!(rank >= 1, InvalidArgument, "rank must be >= 1");
        let a = standard_normal(rng, l, rank);
        let mut s = a.matmul_t(&a)?.scale(1.0 / rank as f64);
        symmetrize(&mut s);
        Self::new(s)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.sigma
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn dim(&self) -> usize {
        self.sigma.rows()
    }

    /// `n` rows drawn from `N(0, Σ)`.
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Matrix {
        let z = standard_normal(rng, n, self.dim());
        z.matmul_t(&self.factor).expect("square factor")
    }
}

fn symmetrize(m: &mut Matrix) {
    let n = m.rows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn check_alpha_bar(alpha_bar: f64) -> Result<()> {
    ensure!(
        alpha_bar > 0.0 && alpha_bar < 1.0,
        InvalidArgument,
        "alpha_bar must lie in (0, 1), got {alpha_bar}"
    );
    Ok(())
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

/// Estimates `E‖ε − P x_t‖²` with `x0 ~ N(0, Σ)`, `ε ~ N(0, I)`.
pub fn mc_loss(
    model: &LinearModel,
    cov: &DataCovariance,
    alpha_bar: f64,
    n_samples: usize,
    rng: &mut RngStream,
) -> Result<McEstimate> {
    mc_loss_map(&model.composite(), cov, alpha_bar, n_samples, rng)
}

/// [`mc_loss`] for a bare composite map.
pub fn mc_loss_map(
    p: &CompositeMap,
    cov: &DataCovariance,
    alpha_bar: f64,
    n_samples: usize,
    rng: &mut RngStream,
) -> Result<McEstimate> {
    check_alpha_bar(alpha_bar)?;
    ensure!(
        n_samples >= 100,
        InvalidArgument,
        "need at least 100 samples, got {n_samples}"
    );
    ensure!(
        p.dim() == cov.dim(),
        Shape,
        "P is {0}x{0} but Σ is {1}x{1}",
        p.dim(),
        cov.dim()
    );
    let x0 = cov.sample(n_samples, rng);
    let eps = standard_normal(rng, n_samples, cov.dim());
    let mut xt = x0.scale(alpha_bar.sqrt());
    xt.axpy((1.0 - alpha_bar).sqrt(), &eps)?;
    let resid = eps.sub(&xt.matmul_t(&p.p)?)?;
    let terms: Vec<f64> = (0..n_samples)
        .map(|r| resid.row(r).iter().map(|v| v * v).sum())
        .collect();
    let n = n_samples as f64;
    let mean = terms.iter().sum::<f64>() / n;
    let var = terms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(McEstimate {
        estimate: mean,
        std_error: (var / n).sqrt(),
    })
}

/// Closed-form loss and its two terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticLoss {
    pub total: f64,
    pub representation: f64,
    pub regularization: f64,
}

/// `ᾱ·tr(P Σ Pᵀ) + ‖I − √(1−ᾱ) P‖²_F`.
pub fn analytic_loss(p: &CompositeMap, sigma: &Matrix, alpha_bar: f64) -> Result<AnalyticLoss> {
    let l = p.dim();
    ensure!(
        sigma.shape() == (l, l),
        Shape,
        "P is {l}x{l} but Σ is {:?}",
        sigma.shape()
    );
    let ps = p.p.matmul(sigma)?;
    let representation = alpha_bar * ps.hadamard(&p.p)?.sum();
    let c = (1.0 - alpha_bar).sqrt();
    let mut r = Matrix::identity(l);
    r.axpy(-c, &p.p)?;
    let regularization = r.sum_sq();
    Ok(AnalyticLoss {
        total: representation + regularization,
        representation,
        regularization,
    })
}

/// Gradient of the analytic loss in `P`: `2ᾱ P Σ − 2c (I − c P)`, `c = √(1−ᾱ)`.
pub fn analytic_grad(p: &CompositeMap, sigma: &Matrix, alpha_bar: f64) -> Result<Matrix> {
    let l = p.dim();
    ensure!(
        sigma.shape() == (l, l),
        Shape,
        "P is {l}x{l} but Σ is {:?}",
        sigma.shape()
    );
    let c = (1.0 - alpha_bar).sqrt();
    let mut g = p.p.matmul(sigma)?.scale(2.0 * alpha_bar);
    let mut r = Matrix::identity(l);
    r.axpy(-c, &p.p)?;
    g.axpy(-2.0 * c, &r)?;
    Ok(g)
}

/// Minimizer `√(1−ᾱ) (ᾱ Σ + (1−ᾱ) I)⁻¹`.
pub fn optimal_composite(cov: &DataCovariance, alpha_bar: f64) -> Result<CompositeMap> {
    check_alpha_bar(alpha_bar)?;
    let l = cov.dim();
    let mut a = cov.matrix().scale(alpha_bar);
    a.axpy(1.0 - alpha_bar, &Matrix::identity(l))?;
    let rhs = Matrix::identity(l).scale((1.0 - alpha_bar).sqrt());
    let mut p = solve_spd(&a, &rhs)?;
    symmetrize(&mut p);
    CompositeMap::new(p)
}

/// Plain gradient descent on the analytic loss from `init`.
pub fn gradient_descent(
    init: &CompositeMap,
    sigma: &Matrix,
    alpha_bar: f64,
    lr: f64,
    steps: usize,
) -> Result<CompositeMap> {
    check_alpha_bar(alpha_bar)?;
    let mut p = init.clone();
    for _ in 0..steps {
        let g = analytic_grad(&p, sigma, alpha_bar)?;
        p.p.axpy(-lr, &g)?;
    }
    p.p.check_finite("gradient descent iterate")?;
    Ok(p)
}

/// One row of the trade-off table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub t: usize,
    pub alpha_bar: f64,
    /// Singular values of the optimal map, non-increasing.
    pub sigma: Vec<f64>,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffTable {
    pub rows: Vec<TradeoffRow>,
}

/// Singular values and condition number of the optimal map at one `ᾱ`.
pub fn tradeoff_at(eigenvalues: &[f64], alpha_bar: f64) -> (Vec<f64>, f64) {
    let c = (1.0 - alpha_bar).sqrt();
    let denom = |l: f64| alpha_bar * l.max(0.0) + 1.0 - alpha_bar;
    let mut sigma: Vec<f64> = eigenvalues.iter().map(|&l| c / denom(l)).collect();
    sigma.sort_by(|a, b| b.total_cmp(a));
    let lmax = eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lmin = eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    (sigma, denom(lmax) / denom(lmin))
}

/// Spectrum of the optimal map at each step of `t_grid` (steps in `1..=T`).
pub fn tradeoff_curve(cov: &DataCovariance, schedule: &NoiseSchedule, t_grid: &[usize]) -> Result<TradeoffTable> {
    ensure!(!t_grid.is_empty(), InvalidArgument, "empty t grid");
    let ev = cov.eigenvalues();
    let (lmax, lmin) = (ev[0], ev[ev.len() - 1]);
    ensure!(
        lmax > lmin,
        InvalidArgument,
        "need distinct extreme eigenvalues, got {lmax} and {lmin}"
    );
    let mut rows = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        ensure!(
            (1..=schedule.steps()).contains(&t),
            InvalidArgument,
            "grid step {t} outside [1, {}]",
            schedule.steps()
        );
        let alpha_bar = schedule.alpha_bar(t);
        let (sigma, kappa) = tradeoff_at(ev, alpha_bar);
        rows.push(TradeoffRow {
            t,
            alpha_bar,
            sigma,
            kappa,
        });
    }
    Ok(TradeoffTable { rows })
}

impl TradeoffTable {
    /// Columns `t,alpha_bar,sigma_1..sigma_L,kappa`.
    pub fn to_csv(&self) -> String {
        let l = self.rows.first().map_or(0, |r| r.sigma.len());
        let mut s = String::from("t,alpha_bar");
        for i in 1..=l {
            let _ = write!(s, ",sigma_{i}");
        }
        s.push_str(",kappa\n");
        for r in &self.rows {
            let _ = write!(s, "{},{:?}", r.t, r.alpha_bar);
            for v in &r.sigma {
                let _ = write!(s, ",{v:?}");
            }
            let _ = writeln!(s, ",{:?}", r.kappa);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::linear_beta_schedule;
    use crate::numeric::{central_diff, svd};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn zero_map_costs_dimension() {
        let cov = DataCovariance::random(5, 5, &mut RngStream::new(1, 0)).unwrap();
        let p = CompositeMap::new(Matrix::zeros(5, 5)).unwrap();
        assert_eq!(analytic_loss(&p, cov.matrix(), 0.3).unwrap().total, 5.0);
        let mc = mc_loss_map(&p, &cov, 0.3, 20_000, &mut RngStream::new(2, 0)).unwrap();
        assert!(close(mc.estimate, 5.0, 3.0 * mc.std_error));
    }

    #[test]
    fn regularizer_root() {
        let ab: f64 = 0.4;
        let p = CompositeMap::new(Matrix::identity(4).scale(1.0 / (1.0f64 - ab).sqrt())).unwrap();
        let zero = DataCovariance::new(Matrix::zeros(4, 4)).unwrap();
        let mc = mc_loss_map(&p, &zero, ab, 1000, &mut RngStream::new(3, 0)).unwrap();
        assert!(mc.estimate < 1e-20);
        let id = analytic_loss(&p, &Matrix::identity(4), ab).unwrap();
        assert!(close(id.total, ab * 4.0 / (1.0 - ab), 1e-12));
        assert!(id.regularization < 1e-24);
    }

    #[test]
    fn random_model_matches_monte_carlo() {
        let mut rng = RngStream::new(4, 0);
        let model = LinearModel::random(3, 6, 0.5, &mut rng).unwrap();
        let cov = DataCovariance::random(6, 4, &mut rng).unwrap();
        let mc = mc_loss(&model, &cov, 0.5, 50_000, &mut rng).unwrap();
        let exact = analytic_loss(&model.composite(), cov.matrix(), 0.5).unwrap();
        assert!(
            close(mc.estimate, exact.total, 3.0 * mc.std_error),
            "{mc:?} vs {exact:?}"
        );
    }

    #[test]
    fn optimum_closed_forms() {
        let zero = DataCovariance::new(Matrix::zeros(3, 3)).unwrap();
        let p = optimal_composite(&zero, 0.36).unwrap();
        assert!(p.p.sub(&Matrix::identity(3).scale(1.0 / 0.8)).unwrap().max_abs() < 1e-12);
        let p = optimal_composite(&DataCovariance::identity(3), 0.5).unwrap();
        assert!(p.p.sub(&Matrix::identity(3).scale(0.5f64.sqrt())).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn optimum_is_stationary_and_reached_by_descent() {
        let mut rng = RngStream::new(5, 0);
        let cov = DataCovariance::random(4, 6, &mut rng).unwrap();
        let ab = 0.5;
        let star = optimal_composite(&cov, ab).unwrap();
        let fd = central_diff(
            |flat| {
                let p = CompositeMap::new(Matrix::from_vec(4, 4, flat.to_vec())?)?;
                Ok(analytic_loss(&p, cov.matrix(), ab)?.total)
            },
            star.p.as_slice(),
            1e-5,
        )
        .unwrap();
        assert!(fd.iter().all(|g| g.abs() < 1e-6), "{fd:?}");
        assert!(analytic_grad(&star, cov.matrix(), ab).unwrap().max_abs() < 1e-12);

        let init = CompositeMap::new(standard_normal(&mut rng, 4, 4).scale(0.1)).unwrap();
        let gd = gradient_descent(&init, cov.matrix(), ab, 0.05, 5000).unwrap();
        assert!(gd.p.sub(&star.p).unwrap().frobenius() < 1e-4);
    }

    #[test]
    fn tradeoff_plug_in_and_svd_cross_check() {
        let cov = DataCovariance::new(Matrix::from_diag(&[4.0, 1.0])).unwrap();
        let (sigma, kappa) = tradeoff_at(cov.eigenvalues(), 0.5);
        assert!(close(sigma[0], 0.5f64.sqrt() / 1.0, 1e-12));
        assert!(close(sigma[1], 0.5f64.sqrt() / 2.5, 1e-12));
        assert!(close(kappa, 2.5, 1e-12));
        let sv = svd(&optimal_composite(&cov, 0.5).unwrap().p).unwrap().sigma;
        assert!(close(sv[0], sigma[0], 1e-12) && close(sv[1], sigma[1], 1e-12));
        assert!(close(sigma[1], 0.2828, 1e-4) && close(sigma[0], 0.7071, 1e-4));
    }

    #[test]
    fn tradeoff_limits_and_monotonicity() {
        let ev = [3.0, 1.0, 0.5];
        let (s, k) = tradeoff_at(&ev, 1e-12);
        assert!(s.iter().all(|v| close(*v, 1.0, 1e-9)) && close(k, 1.0, 1e-9));
        let (_, k) = tradeoff_at(&ev, 1.0 - 1e-12);
        assert!(close(k, 6.0, 1e-9));

        let cov = DataCovariance::new(Matrix::from_diag(&ev)).unwrap();
        let s = linear_beta_schedule(100, 1e-4, 0.02).unwrap();
        let grid: Vec<usize> = (1..=100).collect();
        let table = tradeoff_curve(&cov, &s, &grid).unwrap();
        assert!(table.rows.windows(2).all(|w| w[1].kappa <= w[0].kappa));
        let csv = table.to_csv();
        assert!(csv.starts_with("t,alpha_bar,sigma_1,sigma_2,sigma_3,kappa\n"));
        assert_eq!(csv.lines().count(), 101);
        assert!(tradeoff_curve(&cov, &s, &[]).is_err());
        assert!(tradeoff_curve(&cov, &s, &[101]).is_err());
        assert!(tradeoff_curve(&DataCovariance::identity(3), &s, &[1]).is_err());
    }

    #[test]
    fn covariance_validation() {
        assert!(DataCovariance::new(Matrix::from_diag(&[1.0, -0.1])).is_err());
        let asym = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.4, 1.0]]).unwrap();
        assert!(DataCovariance::new(asym).is_err());
        assert!(LinearModel::random(4, 4, 1.0, &mut RngStream::new(0, 0)).is_err());
        let cov = DataCovariance::new(Matrix::from_rows(&[vec![2.0, 0.6], vec![0.6, 1.0]]).unwrap()).unwrap();
        let x = cov.sample(50_000, &mut RngStream::new(6, 0));
        let emp = x.t_matmul(&x).unwrap().scale(1.0 / 50_000.0);
        assert!(emp.sub(cov.matrix()).unwrap().max_abs() < 0.05);
    }
}
