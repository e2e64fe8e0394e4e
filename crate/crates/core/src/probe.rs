//! Per-timestep diagnostics of teacher features: singular spectra, effective
//! rank, attention spread and cluster separability.
//!
//! Features are mid-block activations on clean inputs with the timestep fed
//! through the embedding only.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::diffusion::Teacher;
use crate::error::ensure;
use crate::numeric::{svd, Matrix};
use crate::pipeline::svg::{line_chart, Series};
use crate::{Error, Result};

/// Attention maps are averaged over this many inputs by default.
pub const ATTENTION_SAMPLES: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    pub z: Matrix,
    /// Network time index the features were taken at.
    pub t: usize,
    pub layer: String,
}

impl FeatureBatch {
    pub fn new(z: Matrix, t: usize, layer: impl Into<String>) -> Result<Self> {
        z.check_finite("features")?;
        Ok(Self {
            z,
            t,
            layer: layer.into(),
        })
    }
}

fn check_time(teacher: &Teacher, t: usize) -> Result<()> {
    ensure!(
        t < teacher.steps(),
        InvalidArgument,
        "time index {t} outside [0, {})",
        teacher.steps()
    );
    Ok(())
}

/// Mid-block features of clean `x` at time index `t` (`0..T`).
pub fn extract_features(teacher: &Teacher, x: &Matrix, t: usize) -> Result<FeatureBatch> {
    check_time(teacher, t)?;
    FeatureBatch::new(teacher.features(x, t)?, t, "mid")
}

/// Singular values of the column-centered feature matrix, non-increasing.
pub fn singular_spectrum(f: &FeatureBatch) -> Result<Vec<f64>> {
    ensure!(
        f.z.rows() >= 2,
        InvalidArgument,
        "need at least 2 samples, got {}",
        f.z.rows()
    );
    Ok(svd(&f.z.centered())?.sigma)
}

/// Spectrum divided by its largest value (all zeros stay zero).
pub fn normalized_spectrum(sigma: &[f64]) -> Vec<f64> {
    let top = sigma.iter().copied().fold(0.0, f64::max);
    if top > 0.0 {
        sigma.iter().map(|s| s / top).collect()
    } else {
        sigma.to_vec()
    }
}

/// `exp(H(p))` with `p_i = σ_i / Σσ`.
pub fn erank_from_singular_values(sigma: &[f64]) -> Result<f64> {
    let total: f64 = sigma.iter().sum();
    ensure!(
        total > 0.0 && total.is_finite(),
        InvalidArgument,
        "effective rank needs a nonzero finite spectrum"
    );
    let h: f64 = sigma
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    Ok(h.exp())
}

pub fn effective_rank(f: &FeatureBatch) -> Result<f64> {
    erank_from_singular_values(&singular_spectrum(f)?)
}

/// Attention statistics at one time index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMass {
    pub t: usize,
    /// Row-stochastic map averaged over inputs.
    pub map: Matrix,
    /// `1 - mean diagonal weight`.
    pub off_diagonal: f64,
}

/// Averages the attention map over the first `n_samples` rows of `x`.
pub fn attention_mass(teacher: &Teacher, x: &Matrix, t: usize, n_samples: usize) -> Result<AttentionMass> {
    check_time(teacher, t)?;
    ensure!(
        teacher.arch.attention_tokens.is_some(),
        InvalidArgument,
        "teacher has no attention block"
    );
    ensure!(n_samples >= 1, InvalidArgument, "need at least one sample");
    let n = n_samples.min(x.rows());
    ensure!(n >= 1, InvalidArgument, "no inputs");
    let xs = x.select_rows(&(0..n).collect::<Vec<_>>());
    let out = teacher.forward(&xs, &vec![t; n])?;
    let rec = out
        .attn
        .ok_or_else(|| Error::InvalidArgument("teacher has no attention block".into()))?;
    Ok(AttentionMass {
        t,
        off_diagonal: rec.off_diagonal_mass(),
        map: rec.map,
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette coefficient under Euclidean distance.
pub fn cluster_separability(f: &FeatureBatch, y: &[usize]) -> Result<f64> {
    let n = f.z.rows();
    ensure!(y.len() == n, Shape, "{} labels for {n} samples", y.len());
    let k = y.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; k];
    for &c in y {
        counts[c] += 1;
    }
    let present: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();
    ensure!(
        present.len() >= 2,
        InvalidArgument,
        "need at least 2 classes, got {}",
        present.len()
    );
    if let Some(&c) = present.iter().find(|&&c| counts[c] < 2) {
        return Err(Error::InvalidArgument(format!("class {c} has a single sample")));
    }
    let mut any_nonzero = false;
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                let d = dist(f.z.row(i), f.z.row(j));
                any_nonzero |= d > 0.0;
                sums[y[j]] += d;
            }
        }
        let own = y[i];
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = present
            .iter()
            .filter(|&&c| c != own)
            .map(|&c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    ensure!(
        any_nonzero,
        InvalidArgument,
        "all features identical; silhouette undefined"
    );
    Ok(total / n as f64)
}

/// Statistics at one time index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub t: usize,
    pub spectrum: Vec<f64>,
    pub normalized_spectrum: Vec<f64>,
    pub effective_rank: f64,
    pub separability: f64,
    pub attention_off_diagonal: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
}

/// Probes `teacher` at every time index of `t_grid` on the rows of `data`.
pub fn probe_teacher(teacher: &Teacher, data: &LabeledDataset, t_grid: &[usize]) -> Result<ProbeReport> {
    ensure!(!t_grid.is_empty(), InvalidArgument, "empty t grid");
    let mut rows = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let f = extract_features(teacher, &data.x, t)?;
        let spectrum = singular_spectrum(&f)?;
        let attention_off_diagonal = match teacher.arch.attention_tokens {
            Some(_) => Some(attention_mass(teacher, &data.x, t, ATTENTION_SAMPLES)?.off_diagonal),
            None => None,
        };
        rows.push(ProbeRow {
            t,
            normalized_spectrum: normalized_spectrum(&spectrum),
            effective_rank: erank_from_singular_values(&spectrum)?,
            separability: cluster_separability(&f, &data.y)?,
            spectrum,
            attention_off_diagonal,
        });
    }
    Ok(ProbeReport { rows })
}

impl ProbeReport {
    pub fn row(&self, t: usize) -> Option<&ProbeRow> {
        self.rows.iter().find(|r| r.t == t)
    }

    /// One row per time index: scalar statistics, then raw and normalized
    /// singular values.
    pub fn to_csv(&self) -> String {
        let m = self.rows.first().map_or(0, |r| r.spectrum.len());
        let mut s = String::from("t,effective_rank,separability,attention_off_diagonal");
        for i in 1..=m {
            let _ = write!(s, ",sigma_{i}");
        }
        for i in 1..=m {
            let _ = write!(s, ",sigma_norm_{i}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{:?},{:?},", r.t, r.effective_rank, r.separability);
            if let Some(a) = r.attention_off_diagonal {
                let _ = write!(s, "{a:?}");
            }
            for v in r.spectrum.iter().chain(&r.normalized_spectrum) {
                let _ = write!(s, ",{v:?}");
            }
            s.push('\n');
        }
        s
    }

    /// Effective rank and the top normalized singular values against `t`.
    pub fn to_svg(&self, top_k: usize) -> String {
        let xs: Vec<f64> = self.rows.iter().map(|r| r.t as f64).collect();
        let mut series = vec![Series::new(
            "effective rank",
            xs.iter().zip(&self.rows).map(|(&x, r)| (x, r.effective_rank)).collect(),
        )];
        let m = self.rows.first().map_or(0, |r| r.spectrum.len()).min(top_k);
        for i in 0..m {
            series.push(Series::new(
                format!("sigma_{} (normalized)", i + 1),
                xs.iter()
                    .zip(&self.rows)
                    .map(|(&x, r)| (x, r.normalized_spectrum[i]))
                    .collect(),
            ));
        }
        line_chart("Feature spectrum vs timestep", "t", "value", &series)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autonet::DenoiserArch;
    use crate::diffusion::linear_beta_schedule;
    use crate::numeric::{standard_normal, sym_eigen, RngStream};

    fn batch(z: Matrix) -> FeatureBatch {
        FeatureBatch::new(z, 0, "test").unwrap()
    }

    #[test]
    fn erank_examples() {
        assert!((erank_from_singular_values(&[1.0; 4]).unwrap() - 4.0).abs() < 1e-12);
        assert!((erank_from_singular_values(&[1.0, 0.0, 0.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        let e = erank_from_singular_values(&[2.0, 1.0, 1.0]).unwrap();
        assert!((e - 1.0397207708399179f64.exp()).abs() < 1e-12);
        assert!((e - 2.8284).abs() < 1e-4);
        assert!(erank_from_singular_values(&[0.0, 0.0]).is_err());
        assert!(effective_rank(&batch(Matrix::filled(5, 3, 2.0))).is_err());
    }

    #[test]
    fn spectrum_properties() {
        let mut rng = RngStream::new(1, 0);
        let z = standard_normal(&mut rng, 30, 5);
        let s = singular_spectrum(&batch(z.clone())).unwrap();
        let c = z.centered();
        let ev = sym_eigen(&c.t_matmul(&c).unwrap()).unwrap().values;
        for (a, b) in s.iter().zip(&ev) {
            assert!((a * a - b).abs() < 1e-9 * b.max(1.0));
        }
        let scaled = singular_spectrum(&batch(z.scale(3.0))).unwrap();
        for (a, b) in s.iter().zip(&scaled) {
            assert!((3.0 * a - b).abs() < 1e-9);
        }
        let e1 = effective_rank(&batch(z.clone())).unwrap();
        let e2 = effective_rank(&batch(z.scale(0.01))).unwrap();
        assert!((e1 - e2).abs() < 1e-9);
        assert!(e1 >= 1.0 && e1 <= 5.0);

        let mut doubled = Vec::new();
        for r in 0..30 {
            doubled.push(z.row(r).to_vec());
            doubled.push(z.row(r).to_vec());
        }
        let d = singular_spectrum(&batch(Matrix::from_rows(&doubled).unwrap())).unwrap();
        assert_eq!(d.iter().filter(|&&v| v > 1e-9).count(), 5);
    }

    #[test]
    fn silhouette_extremes() {
        let z = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 1e-6], vec![100.0, 0.0], vec![100.0, 1e-6]]).unwrap();
        let s = cluster_separability(&batch(z), &[0, 0, 1, 1]).unwrap();
        assert!(s > 0.999);
        let same = batch(Matrix::zeros(4, 2));
        assert!(cluster_separability(&same, &[0, 0, 1, 1]).is_err());
        let z = standard_normal(&mut RngStream::new(2, 0), 6, 2);
        assert!(cluster_separability(&batch(z.clone()), &[0; 6]).is_err());
        assert!(cluster_separability(&batch(z), &[0, 0, 0, 0, 0, 1]).is_err());
    }

    #[test]
    fn silhouette_of_permuted_labels_is_near_zero() {
        let (ds, _) = crate::datasets::gaussian_mixture(3, 4, 300, 0.2, &mut RngStream::new(3, 0)).unwrap();
        let f = batch(ds.x.clone());
        assert!(cluster_separability(&f, &ds.y).unwrap() > 0.5);
        for seed in 0..3 {
            let mut y = ds.y.clone();
            RngStream::new(seed, 7).shuffle(&mut y);
            assert!(cluster_separability(&f, &y).unwrap().abs() < 0.1);
        }
    }

    fn tiny_teacher(attention: Option<usize>) -> Teacher {
        let arch = DenoiserArch {
            attention_tokens: attention,
            ..DenoiserArch::bottleneck(4, 8, 3, 10)
        };
        let params = arch.init(&mut RngStream::new(4, 0)).unwrap();
        Teacher::new(arch, linear_beta_schedule(10, 1e-3, 0.2).unwrap(), params).unwrap()
    }

    #[test]
    fn features_are_deterministic_and_mid_width() {
        let t = tiny_teacher(None);
        let x = standard_normal(&mut RngStream::new(5, 0), 16, 4);
        let a = extract_features(&t, &x, 3).unwrap();
        assert_eq!(a, extract_features(&t, &x, 3).unwrap());
        assert_eq!(a.z.cols(), 3);
        let b = extract_features(&t, &x, 9).unwrap();
        assert!(a.z.sub(&b.z).unwrap().frobenius() > 0.0);
        assert!(extract_features(&t, &x, 10).is_err());
        assert!(attention_mass(&t, &x, 0, 128).is_err());
    }

    #[test]
    fn attention_mass_rows_and_degenerate_token() {
        let t = tiny_teacher(Some(2));
        let x = standard_normal(&mut RngStream::new(6, 0), 200, 4);
        let m = attention_mass(&t, &x, 5, ATTENTION_SAMPLES).unwrap();
        for r in 0..2 {
            assert!((m.map.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!((0.0..=1.0).contains(&m.off_diagonal));
        let single = tiny_teacher(Some(1));
        let m = attention_mass(&single, &x, 0, ATTENTION_SAMPLES).unwrap();
        assert_eq!(m.map, Matrix::from_rows(&[vec![1.0]]).unwrap());
        assert_eq!(m.off_diagonal, 0.0);
    }

    #[test]
    fn report_exports() {
        let t = tiny_teacher(Some(2));
        let (ds, _) = crate::datasets::gaussian_mixture(2, 4, 40, 0.3, &mut RngStream::new(7, 0)).unwrap();
        let rep = probe_teacher(&t, &ds, &[0, 4, 9]).unwrap();
        for r in &rep.rows {
            assert!(r.effective_rank >= 1.0 && r.effective_rank <= 3.0 + 1e-12);
            assert!(r.attention_off_diagonal.is_some());
        }
        let csv = rep.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv
            .starts_with("t,effective_rank,separability,attention_off_diagonal,sigma_1,sigma_2,sigma_3,sigma_norm_1"));
        assert!(rep.to_svg(2).contains("polyline"));
    }
}
