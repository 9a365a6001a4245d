//! The three model families (Gaussian mixture, probabilistic PCA and
//! mixture of PPCA), their densities, samplers and scores.
//!
//! PPCA densities are always evaluated through the marginal Gaussian
//! `N(mu, W W^T + sigma^2 I)`; the latent variable is never integrated
//! numerically. Mixture densities use log-sum-exp over components.

mod flat;
mod score;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{self, LN_2PI};

pub use flat::{FlatParams, Layout};
pub use score::ScoreEvaluator;

const WEIGHT_SUM_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Gmm,
    Ppca,
    MixPpca,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Gmm => "gmm",
            Family::Ppca => "ppca",
            Family::MixPpca => "mix_ppca",
        }
    }

    /// PPCA-based families are only identifiable up to a rotation of W.
    pub fn is_rotation_invariant(self) -> bool {
        matches!(self, Family::Ppca | Family::MixPpca)
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn validate_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::InvalidInput("a mixture needs at least one component".into()));
    }
    if let Some(s) = weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::DegenerateParameter(format!(
            "mixture weight {s} is not strictly positive ({})",
            weights[s]
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::DegenerateParameter(format!("mixture weights sum to {sum}, not 1")));
    }
    Ok(())
}

fn validate_covariance(cov: &DMatrix<f64>, p: usize, what: &str) -> Result<()> {
    if cov.shape() != (p, p) {
        return Err(Error::InvalidInput(format!("{what} must be {p}x{p}")));
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("{what} has non-finite entries")));
    }
    let scale = cov.iter().fold(1.0_f64, |a, b| a.max(b.abs()));
    if linalg::max_asymmetry(cov) > SYMMETRY_TOL * scale {
        return Err(Error::DegenerateParameter(format!("{what} is not symmetric")));
    }
    linalg::cholesky_lower(cov, what).map(|_| ())
}

/// Gaussian mixture `sum_s alpha_s N(mu_s, Sigma_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
}

impl GmmParams {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        validate_weights(&weights)?;
        let m = weights.len();
        if means.len() != m || covariances.len() != m {
            return Err(Error::InvalidInput(format!(
                "{m} weights but {} means and {} covariances",
                means.len(),
                covariances.len()
            )));
        }
        let p = means[0].len();
        if p == 0 {
            return Err(Error::InvalidInput("dimension must be at least 1".into()));
        }
        for (s, (mu, cov)) in means.iter().zip(&covariances).enumerate() {
            if mu.len() != p || mu.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("mean {s} is invalid")));
            }
            validate_covariance(cov, p, &format!("covariance {s}"))?;
        }
        Ok(GmmParams { weights, means, covariances })
    }

    pub fn single(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        GmmParams::new(vec![1.0], vec![mean], vec![covariance])
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }
}

/// Probabilistic PCA: `x = mu + W t + eps`, `t ~ N(0, I_q)`,
/// `eps ~ N(0, sigma^2 I_p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PpcaParams {
    mean: DVector<f64>,
    loading: DMatrix<f64>,
    noise_var: f64,
}

impl PpcaParams {
    pub fn new(mean: DVector<f64>, loading: DMatrix<f64>, noise_var: f64) -> Result<Self> {
        let p = mean.len();
        let (rows, q) = loading.shape();
        if rows != p {
            return Err(Error::InvalidInput(format!("loading has {rows} rows, mean has {p}")));
        }
        if q == 0 || q >= p {
            return Err(Error::InvalidInput(format!("latent dimension q={q} must satisfy 1 <= q < p={p}")));
        }
        if mean.iter().chain(loading.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("PPCA parameters must be finite".into()));
        }
        if !(noise_var.is_finite() && noise_var > 0.0) {
            return Err(Error::DegenerateParameter(format!("noise variance {noise_var} is not positive")));
        }
        Ok(PpcaParams { mean, loading, noise_var })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn loading(&self) -> &DMatrix<f64> {
        &self.loading
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.loading.ncols()
    }

    /// `W W^T + sigma^2 I`.
    pub fn marginal_covariance(&self) -> DMatrix<f64> {
        let p = self.dim();
        let mut c = &self.loading * self.loading.transpose();
        for i in 0..p {
            c[(i, i)] += self.noise_var;
        }
        linalg::symmetrize(&mut c);
        c
    }

    /// `W W^T`, the rotation-invariant part of the loading.
    pub fn loading_gram(&self) -> DMatrix<f64> {
        let mut g = &self.loading * self.loading.transpose();
        linalg::symmetrize(&mut g);
        g
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixPpcaParams {
    weights: Vec<f64>,
    components: Vec<PpcaParams>,
}

impl MixPpcaParams {
    pub fn new(weights: Vec<f64>, components: Vec<PpcaParams>) -> Result<Self> {
        validate_weights(&weights)?;
        if components.len() != weights.len() {
            return Err(Error::InvalidInput(format!(
                "{} weights but {} components",
                weights.len(),
                components.len()
            )));
        }
        let (p, q) = (components[0].dim(), components[0].latent_dim());
        if components.iter().any(|c| c.dim() != p || c.latent_dim() != q) {
            return Err(Error::InvalidInput("mixture components must share p and q".into()));
        }
        Ok(MixPpcaParams { weights, components })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[PpcaParams] {
        &self.components
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }
}

/// A fitted or true parameter value of one of the supported families.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Gmm(GmmParams),
    Ppca(PpcaParams),
    MixPpca(MixPpcaParams),
}

impl Model {
    pub fn family(&self) -> Family {
        match self {
            Model::Gmm(_) => Family::Gmm,
            Model::Ppca(_) => Family::Ppca,
            Model::MixPpca(_) => Family::MixPpca,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Model::Gmm(g) => g.dim(),
            Model::Ppca(c) => c.dim(),
            Model::MixPpca(mx) => mx.components[0].dim(),
        }
    }

    /// Latent dimension for PPCA families, 0 for GMM.
    pub fn latent_dim(&self) -> usize {
        match self {
            Model::Gmm(_) => 0,
            Model::Ppca(c) => c.latent_dim(),
            Model::MixPpca(mx) => mx.components[0].latent_dim(),
        }
    }

    pub fn n_components(&self) -> usize {
        match self {
            Model::Gmm(g) => g.n_components(),
            Model::Ppca(_) => 1,
            Model::MixPpca(mx) => mx.n_components(),
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        match self {
            Model::Gmm(g) => g.weights.clone(),
            Model::Ppca(_) => vec![1.0],
            Model::MixPpca(mx) => mx.weights.clone(),
        }
    }

    /// `(weight, mean, covariance)` of each component's marginal Gaussian.
    pub fn component_gaussians(&self) -> Vec<(f64, DVector<f64>, DMatrix<f64>)> {
        match self {
            Model::Gmm(g) => (0..g.n_components())
                .map(|s| (g.weights[s], g.means[s].clone(), g.covariances[s].clone()))
                .collect(),
            Model::Ppca(c) => vec![(1.0, c.mean.clone(), c.marginal_covariance())],
            Model::MixPpca(mx) => mx
                .weights
                .iter()
                .zip(&mx.components)
                .map(|(&w, c)| (w, c.mean.clone(), c.marginal_covariance()))
                .collect(),
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::of(self)
    }

    /// Number of free parameters, equal to the flat layout dimension.
    pub fn param_count(&self) -> usize {
        self.layout().dim()
    }

    pub fn prepare(&self) -> Result<Density> {
        Density::new(self)
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(self.prepare()?.log_density(x))
    }

    pub fn log_densities(&self, data: &Dataset) -> Result<Vec<f64>> {
        check_dim(self.dim(), data.dim())?;
        let density = self.prepare()?;
        let mut scratch = vec![0.0; data.dim()];
        let mut joint = vec![0.0; density.n_components()];
        Ok(data
            .rows()
            .map(|x| density.log_joint(x, &mut scratch, &mut joint))
            .collect())
    }

    /// Draws `count` i.i.d. points. Mixtures draw the component index first;
    /// PPCA draws the latent vector and then the observation noise.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Dataset> {
        if count == 0 {
            return Err(Error::InvalidInput("sample count must be at least 1".into()));
        }
        let p = self.dim();
        let mut values = Vec::with_capacity(count * p);
        match self {
            Model::Gmm(g) => {
                let factors = g
                    .covariances
                    .iter()
                    .enumerate()
                    .map(|(s, c)| linalg::cholesky_lower(c, &format!("covariance {s}")))
                    .collect::<Result<Vec<_>>>()?;
                let mut z = vec![0.0; p];
                for _ in 0..count {
                    let s = pick_component(&g.weights, rng);
                    z.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
                    let l = &factors[s];
                    for i in 0..p {
                        let mut v = g.means[s][i];
                        for j in 0..=i {
                            v += l[(i, j)] * z[j];
                        }
                        values.push(v);
                    }
                }
            }
            Model::Ppca(c) => {
                for _ in 0..count {
                    push_ppca_draw(c, rng, &mut values);
                }
            }
            Model::MixPpca(mx) => {
                for _ in 0..count {
                    let s = pick_component(&mx.weights, rng);
                    push_ppca_draw(&mx.components[s], rng, &mut values);
                }
            }
        }
        Dataset::new(p, values)
    }

    /// Gradient of `log p(x | theta)` in the flat parameterization.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        let eval = ScoreEvaluator::new(self)?;
        let mut out = vec![0.0; eval.len()];
        eval.score_into(x, &mut out);
        Ok(out)
    }

    pub fn flatten(&self) -> FlatParams {
        flat::flatten(self)
    }

    pub fn unflatten(flat: &FlatParams) -> Result<Model> {
        flat::unflatten(flat)
    }

    /// Reorders components so that new component `r` is old component
    /// `order[r]`. Single-component models are returned unchanged.
    pub fn reorder(&self, order: &[usize]) -> Result<Model> {
        let m = self.n_components();
        let mut seen = vec![false; m];
        if order.len() != m || order.iter().any(|&i| i >= m || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::InvalidInput("component order is not a permutation".into()));
        }
        Ok(match self {
            Model::Gmm(g) => Model::Gmm(GmmParams {
                weights: order.iter().map(|&i| g.weights[i]).collect(),
                means: order.iter().map(|&i| g.means[i].clone()).collect(),
                covariances: order.iter().map(|&i| g.covariances[i].clone()).collect(),
            }),
            Model::Ppca(c) => Model::Ppca(c.clone()),
            Model::MixPpca(mx) => Model::MixPpca(MixPpcaParams {
                weights: order.iter().map(|&i| mx.weights[i]).collect(),
                components: order.iter().map(|&i| mx.components[i].clone()).collect(),
            }),
        })
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::InvalidInput(format!("expected dimension {expected}, got {got}")));
    }
    Ok(())
}

fn pick_component<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    if weights.len() == 1 {
        return 0;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (s, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return s;
        }
    }
    weights.len() - 1
}

fn push_ppca_draw<R: Rng + ?Sized>(c: &PpcaParams, rng: &mut R, out: &mut Vec<f64>) {
    let (p, q) = (c.dim(), c.latent_dim());
    let t: Vec<f64> = (0..q).map(|_| StandardNormal.sample(rng)).collect();
    let sd = c.noise_var.sqrt();
    for i in 0..p {
        let mut v = c.mean[i];
        for (j, tj) in t.iter().enumerate() {
            v += c.loading[(i, j)] * tj;
        }
        let e: f64 = StandardNormal.sample(rng);
        out.push(v + sd * e);
    }
}

/// One Gaussian component with a cached Cholesky factor.
#[derive(Debug, Clone)]
pub(crate) struct GaussianTerm {
    pub(crate) log_weight: f64,
    pub(crate) mean: Vec<f64>,
    /// Row-major lower Cholesky factor of the covariance.
    pub(crate) chol: Vec<f64>,
    /// `-p/2 ln(2 pi) - 1/2 ln det Sigma`.
    pub(crate) log_norm: f64,
}

impl GaussianTerm {
    pub(crate) fn new(weight: f64, mean: &DVector<f64>, cov: &DMatrix<f64>, what: &str) -> Result<Self> {
        let p = mean.len();
        let l = linalg::cholesky_lower(cov, what)?;
        let log_norm = -0.5 * (p as f64) * LN_2PI - 0.5 * linalg::log_det_from_cholesky(&l);
        Ok(GaussianTerm {
            log_weight: weight.ln(),
            mean: mean.iter().copied().collect(),
            chol: linalg::row_major(&l),
            log_norm,
        })
    }

    #[inline]
    pub(crate) fn log_pdf(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        let p = self.mean.len();
        for i in 0..p {
            scratch[i] = x[i] - self.mean[i];
        }
        linalg::forward_solve_in_place(&self.chol, p, scratch);
        let q: f64 = scratch.iter().map(|v| v * v).sum();
        self.log_norm - 0.5 * q
    }
}

/// A model prepared for repeated density evaluation.
#[derive(Debug, Clone)]
pub struct Density {
    p: usize,
    terms: Vec<GaussianTerm>,
}

impl Density {
    pub fn new(model: &Model) -> Result<Self> {
        let terms = model
            .component_gaussians()
            .iter()
            .enumerate()
            .map(|(s, (w, mu, cov))| GaussianTerm::new(*w, mu, cov, &format!("component {s} covariance")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Density { p: model.dim(), terms })
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn n_components(&self) -> usize {
        self.terms.len()
    }

    /// `log p(x)`; the caller guarantees `x.len() == dim()`.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut scratch = vec![0.0; self.p];
        let mut joint = vec![0.0; self.terms.len()];
        self.log_joint(x, &mut scratch, &mut joint)
    }

    /// Fills `joint[s] = log alpha_s + log N_s(x)` and returns their
    /// log-sum-exp.
    #[inline]
    pub(crate) fn log_joint(&self, x: &[f64], scratch: &mut [f64], joint: &mut [f64]) -> f64 {
        self.fill_joint(x, scratch, joint);
        log_sum_exp(joint)
    }

    #[inline]
    pub(crate) fn fill_joint(&self, x: &[f64], scratch: &mut [f64], joint: &mut [f64]) {
        for (j, t) in joint.iter_mut().zip(&self.terms) {
            *j = t.log_weight + t.log_pdf(x, scratch);
        }
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return max;
    }
    max + v.iter().map(|a| (a - max).exp()).sum::<f64>().ln()
}
