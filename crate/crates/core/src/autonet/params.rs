use crate::error::ensure;
use crate::numeric::{Matrix, RngStream};
use crate::{Error, Result};

/// Named parameter tensors.
///
/// Flattening concatenates tensors in insertion order, each row-major. That
/// order never changes after construction, so flat vectors from the same store
/// layout are interchangeable.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<(String, Matrix)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<()> {
        let name = name.into();
        ensure!(
            !self.entries.iter().any(|(n, _)| *n == name),
            InvalidArgument,
            "duplicate parameter name {name}"
        );
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.entries.iter_mut().map(|(n, m)| (n.as_str(), m))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, m) in &self.entries {
            out.extend_from_slice(m.as_slice());
        }
        out
    }

    /// New store with this layout and values taken from `flat`.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamStore> {
        ensure!(
            flat.len() == self.num_params(),
            Shape,
            "flat vector has {} values, store holds {}",
            flat.len(),
            self.num_params()
        );
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.entries.len());
        for (n, m) in &self.entries {
            let len = m.len();
            let values = flat[offset..offset + len].to_vec();
            entries.push((n.clone(), Matrix::from_vec(m.rows(), m.cols(), values)?));
            offset += len;
        }
        Ok(ParamStore { entries })
    }

    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, m)| (n.clone(), Matrix::zeros(m.rows(), m.cols())))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ma), (b, mb))| a == b && ma.shape() == mb.shape())
    }

    pub(crate) fn check_layout(&self, other: &ParamStore, what: &str) -> Result<()> {
        ensure!(self.same_layout(other), Shape, "{what}: parameter layouts differ");
        Ok(())
    }

    /// `self += scale * other`, entry by entry.
    pub fn axpy(&mut self, scale: f64, other: &ParamStore) -> Result<()> {
        self.check_layout(other, "axpy")?;
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            a.axpy(scale, b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for (_, m) in &mut self.entries {
            m.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Accumulates `value` into the named tensor, which must exist.
    pub fn accumulate(&mut self, name: &str, value: &Matrix) -> Result<()> {
        self.get_mut(name)?.axpy(1.0, value)
    }

    pub fn sum_sq(&self) -> f64 {
        self.entries.iter().map(|(_, m)| m.sum_sq()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        for (n, m) in &self.entries {
            m.check_finite(&format!("{what} {n}"))?;
        }
        Ok(())
    }

    /// Sub-store with the tensors whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .cloned()
                .collect(),
        }
    }

    /// Copy with every name prefixed by `prefix`.
    pub fn prefixed(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, m)| (format!("{prefix}{n}"), m.clone()))
                .collect(),
        }
    }

    /// Merges the entries of `other` (names must not collide).
    pub fn extend(&mut self, other: ParamStore) -> Result<()> {
        for (n, m) in other.entries {
            self.insert(n, m)?;
        }
        Ok(())
    }

    /// Overwrites tensors present in `other` by name.
    pub fn overwrite_from(&mut self, other: &ParamStore) -> Result<()> {
        for (n, m) in &other.entries {
            let dst = self.get_mut(n)?;
            ensure!(dst.shape() == m.shape(), Shape, "overwrite of {n}: shape differs");
            *dst = m.clone();
        }
        Ok(())
    }

    /// Largest absolute entry-wise difference.
    pub fn max_abs_diff(&self, other: &ParamStore) -> Result<f64> {
        self.check_layout(other, "diff")?;
        Ok(self
            .flatten()
            .iter()
            .zip(other.flatten())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }
}

/// Weight matrix `fan_in x fan_out` drawn from `U(-b, b)` with
/// `b = sqrt(3 / fan_in)`, i.e. unit-variance pre-activations for unit inputs.
pub fn init_weight(rng: &mut RngStream, fan_in: usize, fan_out: usize) -> Matrix {
    let bound = (3.0 / fan_in.max(1) as f64).sqrt();
    Matrix::from_fn(fan_in, fan_out, |_, _| rng.uniform_range(-bound, bound))
}
