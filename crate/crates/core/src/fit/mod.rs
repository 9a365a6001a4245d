//! Weighted maximum-likelihood fitting by EM, and BIC selection of the
//! number of mixture components.
//!
//! Weights multiply every point's responsibilities in all sufficient
//! statistics; the effective sample size is the weight total. Covariance
//! blocks are regularized each M-step by adding `r * I` to the weighted
//! scatter, with `r = ridge * max(tr(S)/p, 1)` fixed per fit from the
//! global weighted scatter `S`.
//!
//! With `r > 0` the M-step maximizes a penalized objective in which each
//! component's density carries an extra factor `exp(-r tr(Sigma_s^-1) / 2)`.
//! That objective is what EM increases, so it is what the reports trace;
//! for the default ridge it differs from the log-likelihood by a negligible
//! amount.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{ConfigIssue, Error, Result};
use crate::linalg;
use crate::model::{Density, Family, GmmParams, MixPpcaParams, Model, PpcaParams};
use crate::seed;

/// Allowed per-iteration decrease of the objective, relative to its
/// magnitude, before EM is considered non-monotone.
pub const MONOTONE_SLACK: f64 = 1e-9;

/// Inner PPCA updates per M-step for the mixture-of-PPCA family.
const MIX_PPCA_INNER_STEPS: usize = 3;

/// Family and dimensions of a model to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    pub p: usize,
    #[serde(default = "one")]
    pub m: usize,
    #[serde(default)]
    pub q: usize,
}

fn one() -> usize {
    1
}

impl ModelSpec {
    pub fn gmm(p: usize, m: usize) -> Self {
        ModelSpec { family: Family::Gmm, p, m, q: 0 }
    }

    pub fn ppca(p: usize, q: usize) -> Self {
        ModelSpec { family: Family::Ppca, p, m: 1, q }
    }

    pub fn mix_ppca(p: usize, m: usize, q: usize) -> Self {
        ModelSpec { family: Family::MixPpca, p, m, q }
    }

    pub fn of(model: &Model) -> Self {
        ModelSpec {
            family: model.family(),
            p: model.dim(),
            m: model.n_components(),
            q: model.latent_dim(),
        }
    }

    pub fn with_components(self, m: usize) -> Self {
        ModelSpec { m, ..self }
    }

    pub fn issues(&self, prefix: &str) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut bad = |field: &str, message: String| {
            out.push(ConfigIssue { field: format!("{prefix}{field}"), message })
        };
        if self.p == 0 {
            bad("p", "must be at least 1".into());
        }
        if self.m == 0 {
            bad("m", "must be at least 1".into());
        }
        match self.family {
            Family::Gmm => {}
            Family::Ppca | Family::MixPpca => {
                if self.q == 0 || self.q >= self.p {
                    bad("q", format!("must satisfy 1 <= q < p (q={}, p={})", self.q, self.p));
                }
                if self.family == Family::Ppca && self.m != 1 {
                    bad("m", "ppca has exactly one component".into());
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues("");
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(
                issues.iter().map(|i| format!("{}: {}", i.field, i.message)).collect::<Vec<_>>().join("; "),
            ))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub max_iters: usize,
    /// Stop when `|L_t - L_{t-1}| <= rel_tol * |L_t|`.
    pub rel_tol: f64,
    /// Random initializations for fits without a given starting point.
    /// Restart `r` draws from `seed::derive(base, r)` where `base` is the
    /// first `u64` drawn from the caller's generator.
    pub restarts: usize,
    pub ridge: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { max_iters: 500, rel_tol: 1e-8, restarts: 5, ridge: 1e-6 }
    }
}

impl FitConfig {
    pub fn issues(&self, prefix: &str) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        if self.max_iters == 0 {
            out.push(ConfigIssue { field: format!("{prefix}max_iters"), message: "must be at least 1".into() });
        }
        if !(self.rel_tol > 0.0 && self.rel_tol.is_finite()) {
            out.push(ConfigIssue { field: format!("{prefix}rel_tol"), message: "must be positive".into() });
        }
        if self.restarts == 0 {
            out.push(ConfigIssue { field: format!("{prefix}restarts"), message: "must be at least 1".into() });
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            out.push(ConfigIssue { field: format!("{prefix}ridge"), message: "must be nonnegative".into() });
        }
        out
    }

    fn validate(&self) -> Result<()> {
        match self.issues("").first() {
            None => Ok(()),
            Some(i) => Err(Error::InvalidInput(format!("{}: {}", i.field, i.message))),
        }
    }

    fn ridge_for(&self, scatter: &DMatrix<f64>) -> f64 {
        let p = scatter.nrows() as f64;
        self.ridge * (scatter.trace() / p).max(1.0)
    }

    fn ridge_for_data(&self, data: &WeightedDataset) -> f64 {
        self.ridge_for(&data.weighted_scatter(&data.weighted_mean()))
    }
}

/// Observations with nonnegative per-row weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedDataset {
    data: Dataset,
    weights: Vec<f64>,
}

impl WeightedDataset {
    pub fn new(data: Dataset, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != data.n_rows() {
            return Err(Error::InvalidInput(format!(
                "{} weights for {} rows",
                weights.len(),
                data.n_rows()
            )));
        }
        if let Some(j) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidInput(format!("weight of row {j} is {}", weights[j])));
        }
        if !weights.iter().any(|w| *w > 0.0) {
            return Err(Error::InvalidInput("at least one weight must be positive".into()));
        }
        Ok(WeightedDataset { data, weights })
    }

    pub fn uniform(data: Dataset) -> Self {
        let weights = vec![1.0; data.n_rows()];
        WeightedDataset { data, weights }
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    fn weighted_mean(&self) -> DVector<f64> {
        let p = self.data.dim();
        let mut mu = DVector::zeros(p);
        for (x, w) in self.data.rows().zip(&self.weights) {
            for i in 0..p {
                mu[i] += w * x[i];
            }
        }
        mu / self.total_weight()
    }

    /// Weighted scatter about `center`, divided by the weight total.
    fn weighted_scatter(&self, center: &DVector<f64>) -> DMatrix<f64> {
        let p = self.data.dim();
        let mut s = DMatrix::zeros(p, p);
        let mut e = vec![0.0; p];
        for (x, w) in self.data.rows().zip(&self.weights) {
            for i in 0..p {
                e[i] = x[i] - center[i];
            }
            for i in 0..p {
                let wi = w * e[i];
                for j in i..p {
                    s[(i, j)] += wi * e[j];
                }
            }
        }
        let total = self.total_weight();
        for i in 0..p {
            for j in i..p {
                let v = s[(i, j)] / total;
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub model: Model,
    /// Penalized weighted log-likelihood (see module docs).
    pub final_objective: f64,
    /// Number of M-steps taken.
    pub iterations: usize,
    pub converged: bool,
    /// Objective at every evaluated iterate, first to last.
    pub objective_trace: Vec<f64>,
}

impl FitReport {
    /// Largest decrease between consecutive objective values, relative to
    /// the objective's magnitude (0 for a monotone trace).
    pub fn worst_relative_decrease(&self) -> f64 {
        self.objective_trace
            .windows(2)
            .map(|w| ((w[0] - w[1]) / w[1].abs().max(1.0)).max(0.0))
            .fold(0.0, f64::max)
    }
}

fn check_inputs(data: &WeightedDataset, p: usize) -> Result<()> {
    if data.data.n_rows() < 2 {
        return Err(Error::DegenerateFit("fitting needs at least 2 rows".into()));
    }
    if data.data.dim() != p {
        return Err(Error::InvalidInput(format!(
            "data has dimension {}, model expects {p}",
            data.data.dim()
        )));
    }
    Ok(())
}

/// Best-of-restarts weighted MLE. Each restart draws its own random
/// initialization; the highest final objective wins, ties going to the
/// lower restart index.
pub fn fit_mle<R: Rng + ?Sized>(
    data: &WeightedDataset,
    spec: &ModelSpec,
    config: &FitConfig,
    rng: &mut R,
) -> Result<FitReport> {
    spec.validate()?;
    config.validate()?;
    check_inputs(data, spec.p)?;
    let base: u64 = rng.random();
    let runs: Vec<Result<FitReport>> = (0..config.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rr = seed::rng_from(seed::derive(base, r as u64));
            let init = initialize(data, spec, config, &mut rr)?;
            run_em(data, init, config)
        })
        .collect();
    best_of(runs)
}

fn best_of(runs: Vec<Result<FitReport>>) -> Result<FitReport> {
    let mut best: Option<FitReport> = None;
    let mut first_err = None;
    for run in runs {
        match run {
            Ok(rep) => {
                if best.as_ref().is_none_or(|b| rep.final_objective > b.final_objective) {
                    best = Some(rep);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| first_err.expect("at least one restart"))
}

/// Single EM run started at `init`.
pub fn fit_mle_from(data: &WeightedDataset, init: &Model, config: &FitConfig) -> Result<FitReport> {
    config.validate()?;
    check_inputs(data, init.dim())?;
    run_em(data, init.clone(), config)
}

/// MLE on the concatenation of all partitions, in partition order.
pub fn fit_global_mle<R: Rng + ?Sized>(
    partitions: &[Dataset],
    spec: &ModelSpec,
    config: &FitConfig,
    rng: &mut R,
) -> Result<FitReport> {
    let all = Dataset::concat(partitions)?;
    fit_mle(&WeightedDataset::uniform(all), spec, config, rng)
}

pub fn log_likelihood(model: &Model, data: &Dataset) -> Result<f64> {
    Ok(model.log_densities(data)?.iter().sum())
}

/// `-2 * (unweighted log-likelihood) + param_count * ln(rows)`.
pub fn bic(report: &FitReport, data: &WeightedDataset) -> Result<f64> {
    let ll = log_likelihood(&report.model, &data.data)?;
    let k = report.model.param_count() as f64;
    Ok(-2.0 * ll + k * (data.data.n_rows() as f64).ln())
}

/// Fits `m = 1..=m_max` components and keeps the lowest-BIC fit (ties go
/// to the smaller `m`). `spec.m` is ignored; PPCA has a single component.
pub fn select_components<R: Rng + ?Sized>(
    data: &Dataset,
    spec: &ModelSpec,
    m_max: usize,
    config: &FitConfig,
    rng: &mut R,
) -> Result<FitReport> {
    if m_max == 0 {
        return Err(Error::InvalidInput("m_max must be at least 1".into()));
    }
    let wd = WeightedDataset::uniform(data.clone());
    let top = if spec.family == Family::Ppca { 1 } else { m_max };
    let base: u64 = rng.random();
    let fits: Vec<(usize, Result<(FitReport, f64)>)> = (1..=top)
        .into_par_iter()
        .map(|m| {
            let mut rr = seed::rng_from(seed::derive(base, m as u64));
            let res = fit_mle(&wd, &spec.with_components(m), config, &mut rr)
                .and_then(|rep| bic(&rep, &wd).map(|b| (rep, b)));
            (m, res)
        })
        .collect();
    let mut best: Option<(FitReport, f64)> = None;
    let mut failures = Vec::new();
    for (m, res) in fits {
        match res {
            Ok((rep, b)) if b.is_finite() => {
                if best.as_ref().is_none_or(|(_, bb)| b < *bb) {
                    best = Some((rep, b));
                }
            }
            Ok(_) => failures.push(format!("m={m}: non-finite BIC")),
            Err(e) => failures.push(format!("m={m}: {e}")),
        }
    }
    best.map(|(rep, _)| rep)
        .ok_or_else(|| Error::DegenerateFit(format!("every component count failed ({})", failures.join("; "))))
}

// ---------------------------------------------------------------------
// initialization

fn initialize<R: Rng + ?Sized>(
    data: &WeightedDataset,
    spec: &ModelSpec,
    config: &FitConfig,
    rng: &mut R,
) -> Result<Model> {
    let center = data.weighted_mean();
    let mut scatter = data.weighted_scatter(&center);
    let r = config.ridge_for(&scatter);
    for i in 0..spec.p {
        scatter[(i, i)] += r;
    }
    let m = spec.m;
    let weights = uniform_weights(m);
    let built = match spec.family {
        Family::Gmm => {
            let means = kmeanspp_centers(data, m, rng);
            GmmParams::new(weights, means, vec![scatter; m]).map(Model::Gmm)
        }
        Family::Ppca => ppca_from_scatter(center, &scatter, spec.q, rng).map(Model::Ppca),
        Family::MixPpca => {
            let means = kmeanspp_centers(data, m, rng);
            let template = ppca_from_scatter(center, &scatter, spec.q, rng)?;
            let comps = means
                .into_iter()
                .map(|mu| PpcaParams::new(mu, template.loading().clone(), template.noise_var()))
                .collect::<Result<Vec<_>>>()?;
            MixPpcaParams::new(weights, comps).map(Model::MixPpca)
        }
    };
    built.map_err(|e| Error::DegenerateFit(format!("initialization failed: {e}")))
}

fn uniform_weights(m: usize) -> Vec<f64> {
    let mut w = vec![1.0 / m as f64; m];
    let head: f64 = w[..m - 1].iter().sum();
    w[m - 1] = 1.0 - head;
    w
}

fn pick_weighted<R: Rng + ?Sized>(scores: &[f64], total: f64, rng: &mut R) -> usize {
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (j, s) in scores.iter().enumerate() {
        if *s > 0.0 {
            acc += s;
            last_positive = j;
            if target < acc {
                return j;
            }
        }
    }
    last_positive
}

/// k-means++ seeding where row `j` is drawn with probability proportional
/// to `w_j * D(x_j)^2`.
fn kmeanspp_centers<R: Rng + ?Sized>(data: &WeightedDataset, m: usize, rng: &mut R) -> Vec<DVector<f64>> {
    let rows = &data.data;
    let w = &data.weights;
    let first = pick_weighted(w, data.total_weight(), rng);
    let mut centers = vec![DVector::from_column_slice(rows.row(first))];
    let mut d2: Vec<f64> = rows.rows().map(|x| sq_dist(x, rows.row(first))).collect();
    while centers.len() < m {
        let scores: Vec<f64> = d2.iter().zip(w).map(|(d, wj)| d * wj).collect();
        let total: f64 = scores.iter().sum();
        let next = if total > 0.0 {
            pick_weighted(&scores, total, rng)
        } else {
            pick_weighted(w, data.total_weight(), rng)
        };
        let c = rows.row(next);
        for (dj, x) in d2.iter_mut().zip(rows.rows()) {
            *dj = dj.min(sq_dist(x, c));
        }
        centers.push(DVector::from_column_slice(c));
    }
    centers
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// PPCA maximum-likelihood solution for a given scatter, rotated by a
/// random orthonormal matrix.
fn ppca_from_scatter<R: Rng + ?Sized>(
    mean: DVector<f64>,
    scatter: &DMatrix<f64>,
    q: usize,
    rng: &mut R,
) -> Result<PpcaParams> {
    let p = scatter.nrows();
    let eig = SymmetricEigen::new(scatter.clone());
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let sigma2 = order[q..].iter().map(|&i| eig.eigenvalues[i]).sum::<f64>() / (p - q) as f64;
    if !(sigma2 > 0.0) {
        return Err(Error::DegenerateFit("scatter has no noise subspace (rank deficient)".into()));
    }
    let mut w = DMatrix::zeros(p, q);
    for (c, &i) in order[..q].iter().enumerate() {
        let scale = (eig.eigenvalues[i] - sigma2).max(1e-12 * sigma2).sqrt();
        w.set_column(c, &(eig.eigenvectors.column(i) * scale));
    }
    let w = w * linalg::random_orthonormal(q, rng);
    PpcaParams::new(mean, w, sigma2)
}

// ---------------------------------------------------------------------
// EM

fn run_em(data: &WeightedDataset, init: Model, config: &FitConfig) -> Result<FitReport> {
    match init {
        Model::Ppca(_) => run_ppca_em(data, init, config),
        _ => run_mixture_em(data, init, config),
    }
}

fn check_step(trace: &[f64], obj: f64) -> Result<()> {
    if !obj.is_finite() {
        return Err(Error::NumericalFailure(format!("objective became {obj}")));
    }
    if let Some(&prev) = trace.last() {
        debug_assert!(
            obj >= prev - MONOTONE_SLACK * prev.abs().max(1.0),
            "EM objective decreased from {prev} to {obj}"
        );
    }
    Ok(())
}

fn finish(model: Model, trace: Vec<f64>, iterations: usize, converged: bool) -> FitReport {
    FitReport {
        model,
        final_objective: *trace.last().expect("at least one evaluation"),
        iterations,
        converged,
        objective_trace: trace,
    }
}

fn has_converged(trace: &[f64], rel_tol: f64) -> bool {
    match trace {
        [.., a, b] => (b - a).abs() <= rel_tol * b.abs(),
        _ => false,
    }
}

/// EM for the two mixture families (a single-component GMM is a mixture
/// with one term).
fn run_mixture_em(data: &WeightedDataset, mut model: Model, config: &FitConfig) -> Result<FitReport> {
    let n = data.data.n_rows();
    let ridge = config.ridge_for_data(data);
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut resp = vec![0.0; n * model.n_components()];
    loop {
        let m = model.n_components();
        let density = Density::new(&model).map_err(|e| Error::DegenerateFit(e.to_string()))?;
        let penalty = ridge_penalties(&model, ridge)?;
        let obj = e_step(&density, &penalty, data, &mut resp[..n * m]);
        check_step(&trace, obj)?;
        trace.push(obj);
        if has_converged(&trace, config.rel_tol) {
            return Ok(finish(model, trace, iterations, true));
        }
        if iterations == config.max_iters {
            return Ok(finish(model, trace, iterations, false));
        }
        model = m_step(&model, data, &resp[..n * m], ridge)?;
        iterations += 1;
    }
}

/// `-r tr(Sigma_s^-1) / 2` per component.
fn ridge_penalties(model: &Model, ridge: f64) -> Result<Vec<f64>> {
    if ridge == 0.0 {
        return Ok(vec![0.0; model.n_components()]);
    }
    model
        .component_gaussians()
        .iter()
        .map(|(_, _, cov)| {
            let l = linalg::cholesky_lower(cov, "component covariance")
                .map_err(|e| Error::DegenerateFit(e.to_string()))?;
            Ok(-0.5 * ridge * linalg::spd_inverse_from_cholesky(&l).trace())
        })
        .collect()
}

/// Stores `w_j * r_js` in `resp` (row-major `n x m`) and returns the
/// weighted objective.
fn e_step(density: &Density, penalty: &[f64], data: &WeightedDataset, resp: &mut [f64]) -> f64 {
    let m = density.n_components();
    let mut scratch = vec![0.0; density.dim()];
    let mut obj = 0.0;
    for ((x, &w), r) in data.data.rows().zip(&data.weights).zip(resp.chunks_exact_mut(m)) {
        density.fill_joint(x, &mut scratch, r);
        for (v, pen) in r.iter_mut().zip(penalty) {
            *v += pen;
        }
        let lse = crate::model::log_sum_exp(r);
        for v in r.iter_mut() {
            *v = w * (*v - lse).exp();
        }
        if w > 0.0 {
            obj += w * lse;
        }
    }
    obj
}

fn m_step(model: &Model, data: &WeightedDataset, resp: &[f64], ridge: f64) -> Result<Model> {
    let rows = &data.data;
    let p = rows.dim();
    let m = model.n_components();
    let total = data.total_weight();
    let mut mass = vec![0.0; m];
    let mut means = vec![DVector::<f64>::zeros(p); m];
    for (x, r) in rows.rows().zip(resp.chunks_exact(m)) {
        for s in 0..m {
            mass[s] += r[s];
            for i in 0..p {
                means[s][i] += r[s] * x[i];
            }
        }
    }
    let floor = 1e-12 * total;
    if let Some(s) = mass.iter().position(|&ns| !(ns > floor)) {
        return Err(Error::DegenerateFit(format!("component {s} lost all responsibility")));
    }
    for s in 0..m {
        means[s] /= mass[s];
    }
    let mut scatters = vec![DMatrix::<f64>::zeros(p, p); m];
    let mut e = vec![0.0; p];
    for (x, r) in rows.rows().zip(resp.chunks_exact(m)) {
        for s in 0..m {
            let rs = r[s];
            if rs == 0.0 {
                continue;
            }
            for i in 0..p {
                e[i] = x[i] - means[s][i];
            }
            let sc = &mut scatters[s];
            for i in 0..p {
                let ri = rs * e[i];
                for j in i..p {
                    sc[(i, j)] += ri * e[j];
                }
            }
        }
    }
    for s in 0..m {
        let sc = &mut scatters[s];
        for i in 0..p {
            for j in i..p {
                let v = sc[(i, j)] / mass[s];
                sc[(i, j)] = v;
                sc[(j, i)] = v;
            }
        }
        for i in 0..p {
            sc[(i, i)] += ridge;
        }
    }
    let weights: Vec<f64> = {
        let mut w: Vec<f64> = mass.iter().map(|ns| ns / total).collect();
        let sum: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= sum);
        w
    };
    let built = match model {
        Model::Gmm(_) => GmmParams::new(weights, means, scatters).map(Model::Gmm),
        Model::MixPpca(mx) => {
            let comps = mx
                .components()
                .iter()
                .zip(means)
                .zip(&scatters)
                .map(|((c, mu), s)| {
                    let (mut w, mut sigma2) = (c.loading().clone(), c.noise_var());
                    for _ in 0..MIX_PPCA_INNER_STEPS {
                        (w, sigma2) = ppca_em_update(s, &w, sigma2)?;
                    }
                    PpcaParams::new(mu, w, sigma2)
                })
                .collect::<Result<Vec<_>>>();
            comps.and_then(|c| MixPpcaParams::new(weights, c)).map(Model::MixPpca)
        }
        Model::Ppca(_) => unreachable!("single PPCA uses its own EM loop"),
    };
    built.map_err(|e| Error::DegenerateFit(format!("M-step produced invalid parameters: {e}")))
}

/// One closed-form PPCA EM update of `(W, sigma^2)` for scatter `S`:
///
/// ```text
/// M      = W^T W + sigma^2 I
/// W'     = S W (sigma^2 I + M^{-1} W^T S W)^{-1}
/// sigma2'= tr(S - S W M^{-1} W'^T) / p
/// ```
fn ppca_em_update(s: &DMatrix<f64>, w: &DMatrix<f64>, sigma2: f64) -> Result<(DMatrix<f64>, f64)> {
    let (p, q) = w.shape();
    let eye = DMatrix::<f64>::identity(q, q);
    let m = w.transpose() * w + &eye * sigma2;
    let m_inv = m
        .try_inverse()
        .ok_or_else(|| Error::DegenerateFit("PPCA M matrix is singular".into()))?;
    let sw = s * w;
    let inner = &eye * sigma2 + &m_inv * w.transpose() * &sw;
    let inner_inv = inner
        .try_inverse()
        .ok_or_else(|| Error::DegenerateFit("PPCA update matrix is singular".into()))?;
    let w_new = &sw * inner_inv;
    let correction = (&sw * &m_inv * w_new.transpose()).trace();
    let sigma2_new = (s.trace() - correction) / p as f64;
    if !(sigma2_new > 0.0 && sigma2_new.is_finite()) {
        return Err(Error::DegenerateFit(format!("PPCA noise variance became {sigma2_new}")));
    }
    Ok((w_new, sigma2_new))
}

/// Weighted log-likelihood of a single PPCA model through the data's
/// weighted mean and scatter.
fn ppca_objective(c: &PpcaParams, total: f64, center: &DVector<f64>, scatter: &DMatrix<f64>) -> Result<f64> {
    let p = c.dim() as f64;
    let cov = c.marginal_covariance();
    let l = linalg::cholesky_lower(&cov, "PPCA covariance").map_err(|e| Error::DegenerateFit(e.to_string()))?;
    let prec = linalg::spd_inverse_from_cholesky(&l);
    let d = center - c.mean();
    let quad = (&prec * scatter).trace() + (d.transpose() * &prec * &d)[(0, 0)];
    Ok(-0.5 * total * (p * linalg::LN_2PI + linalg::log_det_from_cholesky(&l) + quad))
}

fn run_ppca_em(data: &WeightedDataset, init: Model, config: &FitConfig) -> Result<FitReport> {
    let Model::Ppca(mut c) = init else { unreachable!() };
    let total = data.total_weight();
    let center = data.weighted_mean();
    let scatter = data.weighted_scatter(&center);
    let mut reg = scatter.clone();
    let r = config.ridge_for(&scatter);
    for i in 0..reg.nrows() {
        reg[(i, i)] += r;
    }
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let obj = ppca_objective(&c, total, &center, &reg)?;
        check_step(&trace, obj)?;
        trace.push(obj);
        if has_converged(&trace, config.rel_tol) {
            return Ok(finish(Model::Ppca(c), trace, iterations, true));
        }
        if iterations == config.max_iters {
            return Ok(finish(Model::Ppca(c), trace, iterations, false));
        }
        let (w, sigma2) = ppca_em_update(&reg, c.loading(), c.noise_var())?;
        c = PpcaParams::new(center.clone(), w, sigma2).map_err(|e| Error::DegenerateFit(e.to_string()))?;
        iterations += 1;
    }
}
