//! Seeded synthetic labeled datasets.
//!
//! Every generator returns zero-mean data: the per-dimension mean is removed
//! and the result divided by one global scale so the average per-dimension
//! variance is one. Diffusion training assumes `E[x0] = 0`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autonet::{decode_params, encode_params, ParamStore};
use crate::error::ensure;
use crate::numeric::{Matrix, RngStream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub k: usize,
    /// Per-dimension mean removed by the last normalization.
    pub mean: Vec<f64>,
    /// Global scale divided out by the last normalization.
    pub std: f64,
}

impl LabeledDataset {
    /// Wraps raw data without normalizing it.
    pub fn new(x: Matrix, y: Vec<usize>, k: usize) -> Result<Self> {
        ensure!(x.rows() == y.len(), Shape, "{} rows but {} labels", x.rows(), y.len());
        ensure!(k >= 1, InvalidArgument, "class count must be positive");
        if let Some(&bad) = y.iter().find(|&&c| c >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} outside [0, {k})")));
        }
        x.check_finite("dataset")?;
        let d = x.cols();
        Ok(Self {
            x,
            y,
            k,
            mean: vec![0.0; d],
            std: 1.0,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for &c in &self.y {
            counts[c] += 1;
        }
        counts
    }

    /// Removes the column means, then divides by `sqrt(mean column variance)`.
    pub fn normalize(&mut self) {
        let mean = self.x.col_means();
        let mut x = self.x.centered();
        let n = x.rows().max(1) as f64;
        let var = x.sum_sq() / (n * x.cols().max(1) as f64);
        let std = if var > 1e-24 { var.sqrt() } else { 1.0 };
        x.as_mut_slice().iter_mut().for_each(|v| *v /= std);
        self.x = x;
        self.mean = mean;
        self.std = std;
    }

    /// Applies a normalization computed elsewhere, typically on a training split.
    pub fn normalize_with(&mut self, mean: &[f64], std: f64) -> Result<()> {
        ensure!(
            mean.len() == self.dim(),
            Shape,
            "mean has {} entries for {} columns",
            mean.len(),
            self.dim()
        );
        ensure!(
            std > 0.0 && std.is_finite(),
            InvalidArgument,
            "scale must be positive, got {std}"
        );
        let d = self.dim();
        for (i, v) in self.x.as_mut_slice().iter_mut().enumerate() {
            *v = (*v - mean[i % d]) / std;
        }
        self.mean = mean.to_vec();
        self.std = std;
        Ok(())
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            k: self.k,
            mean: self.mean.clone(),
            std: self.std,
        }
    }

    /// Header `x0,..,x{d-1},label`, one sample per row.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for j in 0..self.dim() {
            let _ = write!(s, "x{j},");
        }
        s.push_str("label\n");
        for r in 0..self.len() {
            for v in self.x.row(r) {
                let _ = write!(s, "{v:?},");
            }
            let _ = writeln!(s, "{}", self.y[r]);
        }
        s
    }

    /// Parses [`to_csv`](Self::to_csv) output. `k` is taken as `max label + 1`.
    pub fn from_csv(text: &str) -> Result<LabeledDataset> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::InvalidArgument("empty csv".into()))?;
        let d = header.split(',').count().saturating_sub(1);
        ensure!(d > 0, InvalidArgument, "csv header has no feature columns");
        let mut data = Vec::new();
        let mut y = Vec::new();
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            ensure!(
                fields.len() == d + 1,
                Shape,
                "csv row {i} has {} fields, expected {}",
                fields.len(),
                d + 1
            );
            for f in &fields[..d] {
                data.push(
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::InvalidArgument(format!("csv row {i}: {e}")))?,
                );
            }
            y.push(
                fields[d]
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| Error::InvalidArgument(format!("csv row {i} label: {e}")))?,
            );
        }
        let k = y.iter().max().map_or(1, |m| m + 1);
        LabeledDataset::new(Matrix::from_vec(y.len(), d, data)?, y, k)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        crate::pipeline::write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn load_csv(path: &Path) -> Result<LabeledDataset> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }

    /// Binary form in the parameter-file format: tensors `x` (n x d), `y`
    /// (n x 1 labels as floats), `mean` (1 x d); `k` and `std` in the header meta.
    pub fn save_binary(&self, path: &Path) -> Result<()> {
        let mut store = ParamStore::new();
        store.insert("x", self.x.clone())?;
        store.insert(
            "y",
            Matrix::from_vec(self.len(), 1, self.y.iter().map(|&c| c as f64).collect())?,
        )?;
        store.insert("mean", Matrix::from_vec(1, self.mean.len(), self.mean.clone())?)?;
        let meta = serde_json::json!({"kind": "dataset", "k": self.k, "std": self.std});
        crate::pipeline::write_atomic(path, &encode_params(&store, &meta)?)
    }

    pub fn load_binary(path: &Path) -> Result<LabeledDataset> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (store, meta) = decode_params(&bytes, path)?;
        let k = meta["k"].as_u64().ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: "missing k".into(),
        })? as usize;
        let y = store.get("y")?.as_slice().iter().map(|&v| v as usize).collect();
        let mut ds = LabeledDataset::new(store.get("x")?.clone(), y, k)?;
        ds.mean = store.get("mean")?.as_slice().to_vec();
        ds.std = meta["std"].as_f64().unwrap_or(1.0);
        Ok(ds)
    }
}

/// Description of a dataset generator, as stored in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Gaussian clusters; class `c` owns `modes_per_class` clusters.
    Mixture {
        k: usize,
        d: usize,
        n: usize,
        spread: f64,
        #[serde(default = "one")]
        modes_per_class: usize,
    },
    Bars {
        k: usize,
        n: usize,
        noise: f64,
    },
}

fn one() -> usize {
    1
}

impl DatasetSpec {
    pub fn generate(&self, rng: &mut RngStream) -> Result<LabeledDataset> {
        match *self {
            DatasetSpec::Mixture {
                k,
                d,
                n,
                spread,
                modes_per_class,
            } => multimodal_mixture(k, modes_per_class, d, n, spread, rng).map(|(ds, _)| ds),
            DatasetSpec::Bars { k, n, noise } => bars8x8(k, n, noise, rng),
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            DatasetSpec::Mixture { k, .. } | DatasetSpec::Bars { k, .. } => k,
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            DatasetSpec::Mixture { d, .. } => d,
            DatasetSpec::Bars { .. } => 64,
        }
    }
}

/// `k`-class Gaussian mixture: class `c` is `N(μ_c, spread² I)` with `μ_c`
/// uniform on the unit sphere. Labels cycle `0..k` so classes are balanced.
/// Returns the dataset and the (pre-normalization) class means.
pub fn gaussian_mixture(
    k: usize,
    d: usize,
    n: usize,
    spread: f64,
    rng: &mut RngStream,
) -> Result<(LabeledDataset, Matrix)> {
    multimodal_mixture(k, 1, d, n, spread, rng)
}

/// Mixture with `modes` clusters per class (cluster `j` belongs to class
/// `j mod k`). With `modes > 1` classes are not linearly separable.
pub fn multimodal_mixture(
    k: usize,
    modes: usize,
    d: usize,
    n: usize,
    spread: f64,
    rng: &mut RngStream,
) -> Result<(LabeledDataset, Matrix)> {
    ensure!(k >= 2, InvalidArgument, "need at least 2 classes, got {k}");
    ensure!(d >= 2, InvalidArgument, "need at least 2 dimensions, got {d}");
    ensure!(modes >= 1, InvalidArgument, "need at least one mode per class");
    ensure!(
        n >= k * modes,
        InvalidArgument,
        "{n} samples cannot cover {} clusters",
        k * modes
    );
    ensure!(
        spread >= 0.0 && spread.is_finite(),
        InvalidArgument,
        "spread must be finite and >= 0"
    );
    let clusters = k * modes;
    let mut centers = Matrix::zeros(clusters, d);
    for c in 0..clusters {
        let dir: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (dst, v) in centers.row_mut(c).iter_mut().zip(dir) {
            *dst = v / norm;
        }
    }
    let order = rng.permutation(n);
    let mut x = Matrix::zeros(n, d);
    let mut y = vec![0; n];
    for (slot, &i) in order.iter().enumerate() {
        let cluster = i % clusters;
        y[slot] = cluster % k;
        for (j, v) in x.row_mut(slot).iter_mut().enumerate() {
            *v = centers[(cluster, j)] + spread * rng.normal();
        }
    }
    let mut ds = LabeledDataset::new(x, y, k)?;
    ds.normalize();
    Ok((ds, centers))
}

/// Fixed 8x8 pattern of class `c`: even classes are a horizontal bar on row
/// `c`, odd classes a vertical bar on column `c`.
pub fn bar_pattern(c: usize) -> [f64; 64] {
    let mut img = [0.0; 64];
    for i in 0..8 {
        let idx = if c % 2 == 0 { c * 8 + i } else { i * 8 + c };
        img[idx] = 1.0;
    }
    img
}

/// 8x8 bar images (flattened to 64) plus `N(0, noise²)` pixel noise.
pub fn bars8x8(k: usize, n: usize, noise: f64, rng: &mut RngStream) -> Result<LabeledDataset> {
    ensure!(
        (2..=8).contains(&k),
        InvalidArgument,
        "bars8x8 supports 2..=8 classes, got {k}"
    );
    ensure!(n >= k, InvalidArgument, "{n} samples cannot cover {k} classes");
    ensure!(
        noise >= 0.0 && noise.is_finite(),
        InvalidArgument,
        "noise must be finite and >= 0"
    );
    let order = rng.permutation(n);
    let mut x = Matrix::zeros(n, 64);
    let mut y = vec![0; n];
    for (slot, &i) in order.iter().enumerate() {
        let c = i % k;
        y[slot] = c;
        let pattern = bar_pattern(c);
        for (v, p) in x.row_mut(slot).iter_mut().zip(pattern) {
            *v = p + noise * rng.normal();
        }
    }
    let mut ds = LabeledDataset::new(x, y, k)?;
    ds.normalize();
    Ok(ds)
}

/// Class-stratified split: each class contributes `round(n_c·fraction)`
/// samples to train, clamped to `[1, n_c - 1]`.
pub fn split(
    ds: &LabeledDataset,
    train_fraction: f64,
    rng: &mut RngStream,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let (train, test) = split_indices(ds, train_fraction, rng)?;
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Index form of [`split`]; both lists are sorted.
pub fn split_indices(
    ds: &LabeledDataset,
    train_fraction: f64,
    rng: &mut RngStream,
) -> Result<(Vec<usize>, Vec<usize>)> {
    ensure!(
        train_fraction > 0.0 && train_fraction < 1.0,
        InvalidArgument,
        "train fraction must lie in (0, 1), got {train_fraction}"
    );
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.k];
    for (i, &c) in ds.y.iter().enumerate() {
        by_class[c].push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, mut idx) in by_class.into_iter().enumerate() {
        ensure!(
            idx.len() >= 2,
            InvalidArgument,
            "class {c} has {} samples, need >= 2 to split",
            idx.len()
        );
        rng.shuffle(&mut idx);
        let take = ((idx.len() as f64 * train_fraction).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..take]);
        test.extend_from_slice(&idx[take..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
