use nalgebra::DMatrix;

use super::{Density, Layout, Model};
use crate::error::Result;
use crate::linalg;

struct ScoreTerm {
    mean: Vec<f64>,
    /// Row-major precision matrix of the component's marginal Gaussian.
    precision: Vec<f64>,
    /// PPCA loading for the `W` block, absent for GMM components.
    loading: Option<DMatrix<f64>>,
}

/// Evaluates `d log p(x | theta) / d theta` for many points at one `theta`.
///
/// With `e = x - mu`, `P` the component precision and `r_s` the
/// responsibility:
/// * mean block: `r_s P e`
/// * `G = (P e e^T P - P) / 2` is the gradient with respect to the
///   covariance treated as an unconstrained matrix; the symmetric
///   upper-triangle coordinates get `G_ii` on the diagonal and `2 G_ij`
///   off it, PPCA gets `2 G W` for the loading and `tr G` for `sigma^2`
/// * free weights: `r_s / alpha_s - r_m / alpha_m`.
pub struct ScoreEvaluator {
    layout: Layout,
    density: Density,
    weights: Vec<f64>,
    terms: Vec<ScoreTerm>,
}

impl ScoreEvaluator {
    pub fn new(model: &Model) -> Result<Self> {
        let density = Density::new(model)?;
        let gaussians = model.component_gaussians();
        let loadings: Vec<Option<DMatrix<f64>>> = match model {
            Model::Gmm(g) => vec![None; g.n_components()],
            Model::Ppca(c) => vec![Some(c.loading().clone())],
            Model::MixPpca(mx) => mx.components().iter().map(|c| Some(c.loading().clone())).collect(),
        };
        let terms = gaussians
            .iter()
            .zip(loadings)
            .map(|((_, mu, cov), loading)| {
                let l = linalg::cholesky_lower(cov, "component covariance")?;
                let prec = linalg::spd_inverse_from_cholesky(&l);
                Ok(ScoreTerm {
                    mean: mu.iter().copied().collect(),
                    precision: linalg::row_major(&prec),
                    loading,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ScoreEvaluator {
            layout: model.layout(),
            density,
            weights: model.weights(),
            terms,
        })
    }

    pub fn len(&self) -> usize {
        self.layout.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Writes the score at `x` into `out` (length [`Self::len`]).
    pub fn score_into(&self, x: &[f64], out: &mut [f64]) {
        let l = &self.layout;
        let p = l.p;
        let m = self.terms.len();
        let mut scratch = vec![0.0; p];
        let mut resp = vec![0.0; m];
        let lse = self.density.log_joint(x, &mut scratch, &mut resp);
        for r in resp.iter_mut() {
            *r = (*r - lse).exp();
        }
        out.iter_mut().for_each(|v| *v = 0.0);

        let wl = l.weight_len();
        if wl > 0 {
            let last = resp[m - 1] / self.weights[m - 1];
            for s in 0..wl {
                out[s] = resp[s] / self.weights[s] - last;
            }
        }

        let mut e = vec![0.0; p];
        let mut v = vec![0.0; p];
        let mut g = vec![0.0; p * p];
        for (s, term) in self.terms.iter().enumerate() {
            let r = resp[s];
            for i in 0..p {
                e[i] = x[i] - term.mean[i];
            }
            for i in 0..p {
                v[i] = (0..p).map(|j| term.precision[i * p + j] * e[j]).sum();
            }
            for i in 0..p {
                for j in 0..p {
                    g[i * p + j] = 0.5 * (v[i] * v[j] - term.precision[i * p + j]);
                }
            }
            match &term.loading {
                None => {
                    let mo = l.gmm_mean_offset(s);
                    for i in 0..p {
                        out[mo + i] = r * v[i];
                    }
                    let mut k = l.gmm_cov_offset(s);
                    for i in 0..p {
                        for j in i..p {
                            let gij = if i == j { g[i * p + i] } else { 2.0 * g[i * p + j] };
                            out[k] = r * gij;
                            k += 1;
                        }
                    }
                }
                Some(w) => {
                    let q = w.ncols();
                    let base = l.ppca_offset(s);
                    for i in 0..p {
                        out[base + i] = r * v[i];
                    }
                    for c in 0..q {
                        for i in 0..p {
                            let gw: f64 = (0..p).map(|j| g[i * p + j] * w[(j, c)]).sum();
                            out[base + p + c * p + i] = r * 2.0 * gw;
                        }
                    }
                    let trace: f64 = (0..p).map(|i| g[i * p + i]).sum();
                    out[base + p + p * q] = r * trace;
                }
            }
        }
    }
}
