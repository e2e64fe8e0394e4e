use serde::{Deserialize, Serialize};

use crate::error::ensure;
use crate::numeric::Matrix;
use crate::{Error, Result};

/// Feature-matching loss family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Hint,
    At,
    Rkd,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Hint, LossKind::At, LossKind::Rkd];

    pub fn default_weight(self) -> f64 {
        match self {
            LossKind::Hint => 1.0,
            LossKind::At => 1000.0,
            LossKind::Rkd => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Hint => "hint",
            LossKind::At => "at",
            LossKind::Rkd => "rkd",
        }
    }

    pub fn eval(self, zs: &Matrix, zt: &Matrix) -> Result<LossGrad> {
        match self {
            LossKind::Hint => hint_loss(zs, zt),
            LossKind::At => at_loss(zs, zt),
            LossKind::Rkd => rkd_loss(zs, zt),
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hint" => Ok(LossKind::Hint),
            "at" => Ok(LossKind::At),
            "rkd" => Ok(LossKind::Rkd),
            other => Err(Error::Config(format!(
                "unknown loss {other:?} (expected hint, at or rkd)"
            ))),
        }
    }
}

/// Loss value and its gradient with respect to the student features.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub d_zs: Matrix,
}

fn same_shape(zs: &Matrix, zt: &Matrix) -> Result<()> {
    ensure!(
        zs.shape() == zt.shape(),
        Shape,
        "student features {:?} vs teacher features {:?}; project the student first",
        zs.shape(),
        zt.shape()
    );
    ensure!(zs.rows() > 0, InvalidArgument, "empty batch");
    Ok(())
}

/// `(1/n) Σ_i ‖zs_i − zt_i‖²`.
pub fn hint_loss(zs: &Matrix, zt: &Matrix) -> Result<LossGrad> {
    same_shape(zs, zt)?;
    let n = zs.rows() as f64;
    let diff = zs.sub(zt)?;
    Ok(LossGrad {
        loss: diff.sum_sq() / n,
        d_zs: diff.scale(2.0 / n),
    })
}

/// Squares each entry and scales the row to unit length.
fn attention_map(row: &[f64]) -> Option<(Vec<f64>, f64)> {
    let q: Vec<f64> = row.iter().map(|v| v * v).collect();
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    (norm > 0.0).then(|| (q.iter().map(|v| v / norm).collect(), norm))
}

/// `(1/n) Σ_i ‖a(zs_i) − a(zt_i)‖²` with `a(z) = z∘z / ‖z∘z‖`.
pub fn at_loss(zs: &Matrix, zt: &Matrix) -> Result<LossGrad> {
    same_shape(zs, zt)?;
    let n = zs.rows();
    let mut loss = 0.0;
    let mut d_zs = Matrix::zeros(n, zs.cols());
    for r in 0..n {
        let zero = || Error::InvalidArgument(format!("feature row {r} is all zeros"));
        let (u, qnorm) = attention_map(zs.row(r)).ok_or_else(zero)?;
        let (v, _) = attention_map(zt.row(r)).ok_or_else(zero)?;
        let g: Vec<f64> = u.iter().zip(&v).map(|(a, b)| 2.0 * (a - b) / n as f64).collect();
        loss += u.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let gu: f64 = g.iter().zip(&u).map(|(a, b)| a * b).sum();
        for (c, d) in d_zs.row_mut(r).iter_mut().enumerate() {
            let dq = (g[c] - gu * u[c]) / qnorm;
            *d = dq * 2.0 * zs[(r, c)];
        }
    }
    Ok(LossGrad {
        loss: loss / n as f64,
        d_zs,
    })
}

fn pairwise(z: &Matrix) -> Matrix {
    let n = z.rows();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = z
                .row(i)
                .iter()
                .zip(z.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

/// Mean of the positive off-diagonal entries and their count.
fn mean_positive(d: &Matrix) -> (f64, usize) {
    let n = d.rows();
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..n {
        for j in 0..n {
            if i != j && d[(i, j)] > 0.0 {
                sum += d[(i, j)];
                count += 1;
            }
        }
    }
    (if count > 0 { sum / count as f64 } else { 0.0 }, count)
}

fn huber(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Distance-wise relational loss: Huber (δ = 1) between the pairwise
/// distance matrices, each divided by its mean positive distance, averaged
/// over ordered pairs `i ≠ j`.
pub fn rkd_loss(zs: &Matrix, zt: &Matrix) -> Result<LossGrad> {
    ensure!(
        zs.rows() == zt.rows(),
        Shape,
        "batch sizes {} vs {}",
        zs.rows(),
        zt.rows()
    );
    let n = zs.rows();
    ensure!(
        n >= 3,
        InvalidArgument,
        "relational loss needs a batch of at least 3, got {n}"
    );
    let ds = pairwise(zs);
    let dt = pairwise(zt);
    let (mu_s, m_s) = mean_positive(&ds);
    let (mu_t, _) = mean_positive(&dt);
    ensure!(mu_s > 0.0, InvalidArgument, "student features are all identical");
    ensure!(mu_t > 0.0, InvalidArgument, "teacher features are all identical");
    let pairs = (n * (n - 1)) as f64;
    let mut loss = 0.0;
    let mut g = Matrix::zeros(n, n);
    let mut d_mu = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (h, dh) = huber(ds[(i, j)] / mu_s - dt[(i, j)] / mu_t);
            loss += h;
            g[(i, j)] = dh / (mu_s * pairs);
            d_mu -= dh * ds[(i, j)] / (mu_s * mu_s * pairs);
        }
    }
    let mut d_zs = Matrix::zeros(n, zs.cols());
    for i in 0..n {
        for j in 0..n {
            let dij = ds[(i, j)];
            if i == j || dij <= 0.0 {
                continue;
            }
            let coef = (g[(i, j)] + d_mu / m_s as f64) / dij;
            // d(dij)/d(zs_i) = (zs_i - zs_j) / dij, and the mirror for zs_j.
            for c in 0..zs.cols() {
                let diff = coef * (zs[(i, c)] - zs[(j, c)]);
                d_zs[(i, c)] += diff;
                d_zs[(j, c)] -= diff;
            }
        }
    }
    Ok(LossGrad {
        loss: loss / pairs,
        d_zs,
    })
}
