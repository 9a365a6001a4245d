use crate::error::{Error, Result};

/// Dense observations, one row per point, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    values: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("dataset dimension must be at least 1".into()));
        }
        if values.is_empty() || values.len() % dim != 0 {
            return Err(Error::InvalidInput(format!(
                "dataset needs a positive multiple of {dim} values, got {}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite entry at row {}, column {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Dataset { dim, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        if let Some(i) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::InvalidInput(format!("row {i} has a different dimension")));
        }
        Dataset::new(dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_rows(&self) -> usize {
        self.values.len() / self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Stacks datasets in order, preserving row order within each.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot concatenate zero datasets".into()))?;
        if parts.iter().any(|d| d.dim != first.dim) {
            return Err(Error::InvalidInput("datasets differ in dimension".into()));
        }
        let mut values = Vec::with_capacity(parts.iter().map(|d| d.values.len()).sum());
        for d in parts {
            values.extend_from_slice(&d.values);
        }
        Ok(Dataset { dim: first.dim, values })
    }

    /// Rows at the given indices, in index order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let mut values = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.n_rows() {
                return Err(Error::InvalidInput(format!("row index {i} out of range")));
            }
            values.extend_from_slice(self.row(i));
        }
        Dataset::new(self.dim, values)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for r in self.rows() {
            for (a, b) in m.iter_mut().zip(r) {
                *a += b;
            }
        }
        let n = self.n_rows() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}
