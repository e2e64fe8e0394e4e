//! Small dense decompositions: one-sided Jacobi SVD, cyclic Jacobi symmetric
//! eigen-decomposition, Cholesky.

use super::{dot, Matrix};
use crate::error::ensure;
use crate::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// Thin SVD `M = U diag(sigma) Vᵀ` with `sigma` sorted non-increasing.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `rows x k` with orthonormal columns, `k = min(rows, cols)`.
    pub u: Matrix,
    pub sigma: Vec<f64>,
    /// `cols x k` with orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (x, s) in us.row_mut(r).iter_mut().zip(&self.sigma) {
                *x *= s;
            }
        }
        us.matmul_t(&self.v).expect("svd factors are conformable")
    }
}

/// Singular value decomposition by one-sided (Hestenes) Jacobi rotations.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    ensure!(
        !m.is_empty(),
        InvalidArgument,
        "svd of an empty {}x{} matrix",
        m.rows(),
        m.cols()
    );
    m.check_finite("svd input")?;
    if m.rows() < m.cols() {
        let t = svd_tall(&m.transpose());
        return Ok(SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        });
    }
    Ok(svd_tall(m))
}

/// Requires `rows >= cols`. Works on columns of `m`, accumulating rotations in `v`.
fn svd_tall(m: &Matrix) -> SvdResult {
    let (rows, n) = m.shape();
    // column-major working copies make the column rotations contiguous
    let mut a: Vec<Vec<f64>> = (0..n).map(|c| m.col(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigma: Vec<f64> = a.iter().map(|col| dot(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));
    let sigma_max = order.first().map_or(0.0, |&i| sigma[i]);
    let tiny = sigma_max * 1e-13 * (rows.max(n) as f64) + f64::MIN_POSITIVE;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sorted_sigma = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (k, &i) in order.iter().enumerate() {
        let s = sigma[i];
        if s > tiny {
            u_cols.push(a[i].iter().map(|x| x / s).collect());
        } else {
            sigma[i] = 0.0;
            u_cols.push(vec![0.0; rows]);
            deficient.push(k);
        }
        v_cols.push(v[i].clone());
        sorted_sigma.push(sigma[i]);
    }
    complete_orthonormal(&mut u_cols, &deficient);

    SvdResult {
        u: Matrix::from_fn(rows, n, |r, c| u_cols[c][r]),
        sigma: sorted_sigma,
        v: Matrix::from_fn(n, n, |r, c| v_cols[c][r]),
    }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Replaces the listed (zero) columns with unit vectors orthogonal to every
/// other column, by Gram-Schmidt against the standard basis.
fn complete_orthonormal(cols: &mut [Vec<f64>], missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let dim = cols[0].len();
    let mut basis = 0;
    for &k in missing {
        while basis < dim {
            let mut cand = vec![0.0; dim];
            cand[basis] = 1.0;
            basis += 1;
            for _ in 0..2 {
                for (j, other) in cols.iter().enumerate() {
                    if j == k || other.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let proj = dot(&cand, other);
                    for (c, o) in cand.iter_mut().zip(other) {
                        *c -= proj * o;
                    }
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if norm > 1e-6 {
                cols[k] = cand.into_iter().map(|c| c / norm).collect();
                break;
            }
        }
    }
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigen {
    /// Sorted non-increasing.
    pub values: Vec<f64>,
    /// Column `i` is the eigenvector for `values[i]`.
    pub vectors: Matrix,
}

/// Cyclic Jacobi eigenvalue iteration. Input symmetry is checked to `1e-10`
/// relative to the largest entry.
pub fn sym_eigen(m: &Matrix) -> Result<SymEigen> {
    ensure!(
        m.rows() == m.cols() && !m.is_empty(),
        Shape,
        "eigen of non-square {}x{}",
        m.rows(),
        m.cols()
    );
    m.check_finite("eigen input")?;
    let scale = m.max_abs().max(1.0);
    ensure!(
        m.asymmetry() <= 1e-10 * scale,
        InvalidArgument,
        "matrix is not symmetric (asymmetry {:.3e})",
        m.asymmetry()
    );
    let n = m.rows();
    let mut a = m.clone();
    let mut v = Matrix::identity(n);
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off <= 1e-30 * scale * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    Ok(SymEigen {
        values: order.iter().map(|&i| a[(i, i)]).collect(),
        vectors: Matrix::from_fn(n, n, |r, c| v[(r, order[c])]),
    })
}

/// Lower-triangular `L` with `L Lᵀ = m` for symmetric positive definite `m`.
pub fn cholesky(m: &Matrix) -> Result<Matrix> {
    ensure!(
        m.rows() == m.cols(),
        Shape,
        "cholesky of non-square {}x{}",
        m.rows(),
        m.cols()
    );
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "matrix is not positive definite (pivot {i} = {s:.3e})"
                    )));
                }
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Ok(l)
}

/// Solves `m X = b` for symmetric positive definite `m`.
pub fn solve_spd(m: &Matrix, b: &Matrix) -> Result<Matrix> {
    let l = cholesky(m)?;
    ensure!(
        b.rows() == m.rows(),
        Shape,
        "rhs has {} rows, system has {}",
        b.rows(),
        m.rows()
    );
    let n = m.rows();
    let mut x = b.clone();
    for c in 0..b.cols() {
        // forward: L y = b
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    Ok(x)
}
