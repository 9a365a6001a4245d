//! Flat parameter vectors used by the linear estimators.
//!
//! Block order:
//! * GMM: `alpha_1..alpha_{m-1}`, all means, then each covariance as its
//!   upper triangle read row by row (off-diagonals stored once, unscaled).
//! * PPCA: `mu`, `W` column-major, `sigma^2`.
//! * Mixture of PPCA: `alpha_1..alpha_{m-1}`, then `[mu, W, sigma^2]` per
//!   component.
//!
//! The last mixture weight is implied by the sum-to-one constraint.

use nalgebra::{DMatrix, DVector};

use super::{Family, GmmParams, MixPpcaParams, Model, PpcaParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Layout {
    pub family: Family,
    pub m: usize,
    pub p: usize,
    pub q: usize,
}

impl Layout {
    pub fn of(model: &Model) -> Layout {
        Layout {
            family: model.family(),
            m: model.n_components(),
            p: model.dim(),
            q: model.latent_dim(),
        }
    }

    pub fn weight_len(&self) -> usize {
        match self.family {
            Family::Ppca => 0,
            Family::Gmm | Family::MixPpca => self.m - 1,
        }
    }

    pub fn cov_len(&self) -> usize {
        self.p * (self.p + 1) / 2
    }

    pub(crate) fn ppca_block_len(&self) -> usize {
        self.p + self.p * self.q + 1
    }

    pub fn dim(&self) -> usize {
        match self.family {
            Family::Gmm => self.weight_len() + self.m * (self.p + self.cov_len()),
            Family::Ppca => self.ppca_block_len(),
            Family::MixPpca => self.weight_len() + self.m * self.ppca_block_len(),
        }
    }

    pub(crate) fn gmm_mean_offset(&self, s: usize) -> usize {
        self.weight_len() + s * self.p
    }

    pub(crate) fn gmm_cov_offset(&self, s: usize) -> usize {
        self.weight_len() + self.m * self.p + s * self.cov_len()
    }

    pub(crate) fn ppca_offset(&self, s: usize) -> usize {
        self.weight_len() + s * self.ppca_block_len()
    }
}

/// A parameter vector tagged with the layout it was flattened from.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams {
    values: Vec<f64>,
    layout: Layout,
}

impl FlatParams {
    pub fn new(values: Vec<f64>, layout: Layout) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(Error::InvalidInput(format!(
                "layout expects {} values, got {}",
                layout.dim(),
                values.len()
            )));
        }
        Ok(FlatParams { values, layout })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn guard(&self, other: &FlatParams) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::NotApplicable(format!(
                "parameter layouts differ ({:?} vs {:?})",
                self.layout, other.layout
            )));
        }
        Ok(())
    }

    /// `self + scale * other`.
    pub fn add_scaled(&self, other: &FlatParams, scale: f64) -> Result<FlatParams> {
        self.guard(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + scale * b).collect();
        Ok(FlatParams { values, layout: self.layout })
    }

    pub fn sub(&self, other: &FlatParams) -> Result<FlatParams> {
        self.add_scaled(other, -1.0)
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<FlatParams> {
        FlatParams::new(values, self.layout)
    }

    /// Coordinate-wise mean; all inputs must share one layout.
    pub fn mean(items: &[FlatParams]) -> Result<FlatParams> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot average zero parameter vectors".into()))?;
        let mut acc = vec![0.0; first.len()];
        for it in items {
            first.guard(it)?;
            for (a, v) in acc.iter_mut().zip(&it.values) {
                *a += v;
            }
        }
        let d = items.len() as f64;
        acc.iter_mut().for_each(|a| *a /= d);
        Ok(FlatParams { values: acc, layout: first.layout })
    }
}

fn push_upper(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    let p = m.nrows();
    for i in 0..p {
        for j in i..p {
            out.push(m[(i, j)]);
        }
    }
}

fn read_upper(v: &[f64], p: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(p, p);
    let mut k = 0;
    for i in 0..p {
        for j in i..p {
            m[(i, j)] = v[k];
            m[(j, i)] = v[k];
            k += 1;
        }
    }
    m
}

fn push_ppca(out: &mut Vec<f64>, c: &PpcaParams) {
    out.extend(c.mean.iter());
    out.extend(c.loading.iter()); // nalgebra storage is column-major
    out.push(c.noise_var);
}

fn read_ppca(v: &[f64], p: usize, q: usize) -> Result<PpcaParams> {
    let mean = DVector::from_column_slice(&v[..p]);
    let loading = DMatrix::from_column_slice(p, q, &v[p..p + p * q]);
    PpcaParams::new(mean, loading, v[p + p * q])
}

fn read_weights(v: &[f64], m: usize) -> Vec<f64> {
    let mut w: Vec<f64> = v[..m - 1].to_vec();
    let last = 1.0 - w.iter().sum::<f64>();
    w.push(last);
    w
}

pub(super) fn flatten(model: &Model) -> FlatParams {
    let layout = Layout::of(model);
    let mut values = Vec::with_capacity(layout.dim());
    match model {
        Model::Gmm(g) => {
            values.extend_from_slice(&g.weights[..g.weights.len() - 1]);
            for mu in &g.means {
                values.extend(mu.iter());
            }
            for c in &g.covariances {
                push_upper(&mut values, c);
            }
        }
        Model::Ppca(c) => push_ppca(&mut values, c),
        Model::MixPpca(mx) => {
            values.extend_from_slice(&mx.weights[..mx.weights.len() - 1]);
            for c in &mx.components {
                push_ppca(&mut values, c);
            }
        }
    }
    debug_assert_eq!(values.len(), layout.dim());
    FlatParams { values, layout }
}

pub(super) fn unflatten(flat: &FlatParams) -> Result<Model> {
    let l = flat.layout;
    let v = &flat.values;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::DegenerateParameter("flat parameters contain non-finite values".into()));
    }
    match l.family {
        Family::Gmm => {
            let weights = read_weights(v, l.m);
            let means = (0..l.m)
                .map(|s| DVector::from_column_slice(&v[l.gmm_mean_offset(s)..l.gmm_mean_offset(s) + l.p]))
                .collect();
            let covs = (0..l.m)
                .map(|s| read_upper(&v[l.gmm_cov_offset(s)..], l.p))
                .collect();
            Ok(Model::Gmm(GmmParams::new(weights, means, covs)?))
        }
        Family::Ppca => Ok(Model::Ppca(read_ppca(v, l.p, l.q)?)),
        Family::MixPpca => {
            let weights = read_weights(v, l.m);
            let comps = (0..l.m)
                .map(|s| read_ppca(&v[l.ppca_offset(s)..], l.p, l.q))
                .collect::<Result<Vec<_>>>()?;
            Ok(Model::MixPpca(MixPpcaParams::new(weights, comps)?))
        }
    }
}
