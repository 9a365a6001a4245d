//! Combination of local models into one global estimate.
//!
//! Every estimator starts from a [`LocalEnsemble`] of local fits. The
//! KL-based estimators also need a [`BootstrapSet`]: `n` draws from each
//! local model and a refit on each draw.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fit::{fit_mle_from, FitConfig, WeightedDataset};
use crate::linalg;
use crate::matching::align_to;
use crate::model::{Family, FlatParams, GmmParams, Layout, Model, ScoreEvaluator};
use crate::seed;

/// Local fits `theta_hat_k` and the shard sizes they were fitted on.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalEnsemble {
    locals: Vec<Model>,
    shard_sizes: Vec<usize>,
}

impl LocalEnsemble {
    pub fn new(locals: Vec<Model>, shard_sizes: Vec<usize>) -> Result<Self> {
        let first = locals.first().ok_or_else(|| Error::InvalidInput("ensemble needs at least one local model".into()))?;
        if shard_sizes.len() != locals.len() {
            return Err(Error::InvalidInput(format!(
                "{} shard sizes for {} local models",
                shard_sizes.len(),
                locals.len()
            )));
        }
        if let Some(k) = locals.iter().position(|m| m.family() != first.family() || m.dim() != first.dim()) {
            return Err(Error::InvalidInput(format!(
                "local {k} is {} with p={}, local 0 is {} with p={}",
                locals[k].family(),
                locals[k].dim(),
                first.family(),
                first.dim()
            )));
        }
        Ok(LocalEnsemble { locals, shard_sizes })
    }

    pub fn locals(&self) -> &[Model] {
        &self.locals
    }

    pub fn shard_sizes(&self) -> &[usize] {
        &self.shard_sizes
    }

    pub fn len(&self) -> usize {
        self.locals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locals.is_empty()
    }

    /// The common layout, if every local has the same one.
    pub fn shared_layout(&self) -> Option<Layout> {
        let first = self.locals[0].layout();
        self.locals.iter().all(|m| m.layout() == first).then_some(first)
    }

    fn require_shared_layout(&self) -> Result<Layout> {
        self.shared_layout().ok_or_else(|| {
            let shapes: Vec<String> = self.locals.iter().map(|m| format!("m={}", m.n_components())).collect();
            Error::NotApplicable(format!("local models have different layouts ({})", shapes.join(", ")))
        })
    }
}

/// Parametric bootstrap draws `per_machine[k] ~ p(x | theta_hat_k)` and
/// the refits `reestimates[k]` (`theta_tilde_k`) on them.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapSet {
    per_machine: Vec<Dataset>,
    reestimates: Vec<Model>,
}

impl BootstrapSet {
    pub fn new(per_machine: Vec<Dataset>, reestimates: Vec<Model>) -> Result<Self> {
        let first = per_machine.first().ok_or_else(|| Error::InvalidInput("bootstrap set is empty".into()))?;
        let n = first.n_rows();
        if n < 2 {
            return Err(Error::InvalidInput("bootstrap samples need at least 2 rows".into()));
        }
        if per_machine.len() != reestimates.len() {
            return Err(Error::InvalidInput(format!(
                "{} bootstrap samples for {} refits",
                per_machine.len(),
                reestimates.len()
            )));
        }
        if let Some(k) = per_machine.iter().position(|d| d.n_rows() != n) {
            return Err(Error::InvalidInput(format!("bootstrap sample {k} has {} rows, expected {n}", per_machine[k].n_rows())));
        }
        Ok(BootstrapSet { per_machine, reestimates })
    }

    pub fn per_machine(&self) -> &[Dataset] {
        &self.per_machine
    }

    pub fn reestimates(&self) -> &[Model] {
        &self.reestimates
    }

    /// Rows per machine.
    pub fn n(&self) -> usize {
        self.per_machine[0].n_rows()
    }

    pub fn len(&self) -> usize {
        self.per_machine.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_machine.is_empty()
    }

    /// All bootstrap rows, machine by machine.
    pub fn pooled(&self) -> Dataset {
        Dataset::concat(&self.per_machine).expect("validated bootstrap samples")
    }

    /// Same samples with the refits replaced.
    pub fn with_reestimates(&self, reestimates: Vec<Model>) -> Result<Self> {
        BootstrapSet::new(self.per_machine.clone(), reestimates)
    }

    fn check_against(&self, ensemble: &LocalEnsemble) -> Result<()> {
        if self.len() != ensemble.len() {
            return Err(Error::InvalidInput(format!(
                "bootstrap set has {} machines, ensemble has {}",
                self.len(),
                ensemble.len()
            )));
        }
        Ok(())
    }
}

/// Mean outer product of scores, laid out like the model's flat
/// parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherMatrix {
    pub matrix: DMatrix<f64>,
    pub layout: Layout,
}

/// Draws `n` points from each local model and refits on them, starting EM
/// at that local model. Machine `k` uses the stream `derive(base, k)`.
pub fn draw_bootstrap<R: Rng + ?Sized>(
    ensemble: &LocalEnsemble,
    n: usize,
    config: &FitConfig,
    rng: &mut R,
) -> Result<BootstrapSet> {
    if n < 2 {
        return Err(Error::InvalidInput(format!("bootstrap size must be at least 2, got {n}")));
    }
    let base: u64 = rng.random();
    let single = FitConfig { restarts: 1, ..*config };
    let results: Vec<Result<(Dataset, Model)>> = ensemble
        .locals
        .par_iter()
        .enumerate()
        .map(|(k, local)| {
            let mut rr = seed::rng_from(seed::derive(base, k as u64));
            let sample = local.sample(n, &mut rr)?;
            let refit = fit_mle_from(&WeightedDataset::uniform(sample.clone()), local, &single)?;
            Ok((sample, refit.model))
        })
        .collect();
    let mut per_machine = Vec::with_capacity(results.len());
    let mut reestimates = Vec::with_capacity(results.len());
    for (k, r) in results.into_iter().enumerate() {
        let (s, m) = r.map_err(|e| e.context(format!("machine {k}")))?;
        per_machine.push(s);
        reestimates.push(m);
    }
    BootstrapSet::new(per_machine, reestimates)
}

/// Starting point for the pooled fits: the matched linear average when the
/// locals share a layout and it is a valid model, otherwise local 0.
pub fn pooled_init(ensemble: &LocalEnsemble) -> Model {
    if ensemble.shared_layout().is_some() {
        if let Ok(m) = matched_linear_average(ensemble) {
            return m;
        }
    }
    ensemble.locals[0].clone()
}

/// MLE on all bootstrap rows with uniform weights, one EM run from `init`.
pub fn kl_naive(boot: &BootstrapSet, init: &Model, config: &FitConfig) -> Result<Model> {
    let data = WeightedDataset::uniform(boot.pooled());
    let single = FitConfig { restarts: 1, ..*config };
    Ok(fit_mle_from(&data, init, &single)?.model)
}

/// `(1/n) sum_j s(x_j) s(x_j)^T` with `s` the score of `model`.
pub fn empirical_fisher(model: &Model, samples: &Dataset) -> Result<FisherMatrix> {
    let eval = ScoreEvaluator::new(model)?;
    fisher_from_scores(&eval, samples)
}

fn fisher_from_scores(eval: &ScoreEvaluator, samples: &Dataset) -> Result<FisherMatrix> {
    let dim = eval.len();
    if samples.dim() != eval.layout().p {
        return Err(Error::InvalidInput(format!(
            "samples have dimension {}, model has {}",
            samples.dim(),
            eval.layout().p
        )));
    }
    let mut acc = DMatrix::<f64>::zeros(dim, dim);
    let mut s = vec![0.0; dim];
    for (j, x) in samples.rows().enumerate() {
        eval.score_into(x, &mut s);
        if let Some(i) = s.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure(format!("score entry {i} at row {j} is {}", s[i])));
        }
        let sv = DVector::from_column_slice(&s);
        acc.syger(1.0, &sv, &sv, 1.0);
    }
    acc /= samples.n_rows() as f64;
    linalg::symmetrize(&mut acc);
    Ok(FisherMatrix { matrix: acc, layout: *eval.layout() })
}

/// `B_k = -(sum_i I_i + lambda I)^-1 I_k` with
/// `lambda = 1e-8 * mean diagonal of sum_i I_i`.
pub fn control_coefficients(fishers: &[FisherMatrix]) -> Result<Vec<DMatrix<f64>>> {
    let first = fishers.first().ok_or_else(|| Error::InvalidInput("no Fisher matrices".into()))?;
    if fishers.iter().any(|f| f.layout != first.layout) {
        return Err(Error::NotApplicable("Fisher matrices have different layouts".into()));
    }
    let dim = first.matrix.nrows();
    let mut total = DMatrix::<f64>::zeros(dim, dim);
    for f in fishers {
        total += &f.matrix;
    }
    let lambda = 1e-8 * total.trace() / dim as f64;
    for i in 0..dim {
        total[(i, i)] += lambda;
    }
    let chol = total
        .cholesky()
        .ok_or_else(|| Error::NumericalFailure("summed Fisher information is not positive definite".into()))?;
    Ok(fishers.iter().map(|f| -chol.solve(&f.matrix)).collect())
}

/// Locals and refits reordered to match local 0's component order.
/// Refit `k` shares local `k`'s ordering, so both get the same reordering.
fn aligned_pairs(ensemble: &LocalEnsemble, boot: &BootstrapSet) -> Result<Vec<(Model, Model)>> {
    let reference = &ensemble.locals[0];
    ensemble
        .locals
        .iter()
        .zip(&boot.reestimates)
        .enumerate()
        .map(|(k, (local, refit))| {
            if k == 0 || local.n_components() == 1 {
                return Ok((local.clone(), refit.clone()));
            }
            let a = crate::matching::match_components(local, reference)?;
            let order = a.alignment();
            Ok((local.reorder(&order)?, refit.reorder(&order)?))
        })
        .collect()
}

/// `theta_KL + sum_k B_k (theta_tilde_k - theta_hat_k)` in flat
/// coordinates, with the Fisher matrix of each local estimated on its own
/// bootstrap sample. Mixture components are first matched to local 0.
pub fn kl_control(ensemble: &LocalEnsemble, boot: &BootstrapSet, theta_kl: &Model) -> Result<Model> {
    boot.check_against(ensemble)?;
    let layout = ensemble.require_shared_layout()?;
    if theta_kl.layout() != layout {
        return Err(Error::NotApplicable("pooled estimate and locals have different layouts".into()));
    }
    if boot.reestimates.iter().any(|m| m.layout() != layout) {
        return Err(Error::NotApplicable("refits and locals have different layouts".into()));
    }
    let pairs = aligned_pairs(ensemble, boot)?;
    let fishers = pairs
        .par_iter()
        .zip(&boot.per_machine)
        .map(|((local, _), sample)| empirical_fisher(local, sample))
        .collect::<Result<Vec<_>>>()?;
    let coefs = control_coefficients(&fishers)?;
    let base = align_to(theta_kl, &ensemble.locals[0])?;
    apply_correction(&base, &pairs, &coefs)
}

/// Adds `sum_k B_k (theta_tilde_k - theta_hat_k)` to `base`.
pub fn apply_correction(base: &Model, pairs: &[(Model, Model)], coefs: &[DMatrix<f64>]) -> Result<Model> {
    let flat = base.flatten();
    let mut v = DVector::from_column_slice(flat.values());
    for ((local, refit), b) in pairs.iter().zip(coefs) {
        let diff = refit.flatten().sub(&local.flatten())?;
        v += b * DVector::from_column_slice(diff.values());
    }
    Model::unflatten(&flat.with_values(v.as_slice().to_vec())?)
}

/// Log importance weights `log p(x|theta_hat_k) - log p(x|theta_tilde_k)`
/// for every pooled row, machine by machine. With `max_log_ratio` set,
/// larger log-weights are clipped to it.
pub fn log_importance_weights(
    ensemble: &LocalEnsemble,
    boot: &BootstrapSet,
    max_log_ratio: Option<f64>,
) -> Result<Vec<f64>> {
    boot.check_against(ensemble)?;
    let per: Vec<Result<Vec<f64>>> = ensemble
        .locals
        .par_iter()
        .zip(&boot.reestimates)
        .zip(&boot.per_machine)
        .enumerate()
        .map(|(k, ((local, refit), sample))| {
            let num = local.log_densities(sample)?;
            let den = refit.log_densities(sample)?;
            num.iter()
                .zip(&den)
                .enumerate()
                .map(|(j, (a, b))| {
                    let lw = a - b;
                    if lw.is_nan() || lw == f64::INFINITY || (lw == f64::NEG_INFINITY && max_log_ratio.is_none()) {
                        return Err(Error::NumericalFailure(format!(
                            "importance weight of machine {k} row {j} (pooled row {}) is not finite",
                            k * sample.n_rows() + j
                        )));
                    }
                    Ok(match max_log_ratio {
                        Some(c) => lw.min(c),
                        None => lw,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(boot.len() * boot.n());
    for r in per {
        out.extend(r?);
    }
    Ok(out)
}

pub fn importance_weights(ensemble: &LocalEnsemble, boot: &BootstrapSet, max_log_ratio: Option<f64>) -> Result<Vec<f64>> {
    let lw = log_importance_weights(ensemble, boot, max_log_ratio)?;
    lw.iter()
        .enumerate()
        .map(|(j, l)| {
            let w = l.exp();
            if w.is_finite() && w > 0.0 {
                Ok(w)
            } else {
                Err(Error::NumericalFailure(format!("importance weight of pooled row {j} is {w}")))
            }
        })
        .collect()
}

/// Weighted MLE on all bootstrap rows with the importance weights, one EM
/// run from `init`.
pub fn kl_weighted(
    ensemble: &LocalEnsemble,
    boot: &BootstrapSet,
    init: &Model,
    config: &FitConfig,
    max_log_ratio: Option<f64>,
) -> Result<Model> {
    let weights = importance_weights(ensemble, boot, max_log_ratio)?;
    let data = WeightedDataset::new(boot.pooled(), weights)?;
    let single = FitConfig { restarts: 1, ..*config };
    Ok(fit_mle_from(&data, init, &single)?.model)
}

/// Coordinate-wise mean of the locals' flat parameters.
pub fn linear_average(ensemble: &LocalEnsemble) -> Result<Model> {
    ensemble.require_shared_layout()?;
    average_flat(&ensemble.locals)
}

fn average_flat(models: &[Model]) -> Result<Model> {
    let flats: Vec<FlatParams> = models.iter().map(Model::flatten).collect();
    Model::unflatten(&FlatParams::mean(&flats)?)
}

/// Linear average after reordering each local's components to match
/// local 0.
pub fn matched_linear_average(ensemble: &LocalEnsemble) -> Result<Model> {
    ensemble.require_shared_layout()?;
    let reference = &ensemble.locals[0];
    let aligned = ensemble
        .locals
        .iter()
        .map(|m| align_to(m, reference))
        .collect::<Result<Vec<_>>>()?;
    average_flat(&aligned)
}

fn check_theta(boot: &BootstrapSet, theta: &Model) -> Result<()> {
    if boot.per_machine[0].dim() != theta.dim() {
        return Err(Error::InvalidInput(format!(
            "model dimension {} does not match bootstrap dimension {}",
            theta.dim(),
            boot.per_machine[0].dim()
        )));
    }
    Ok(())
}

/// `(1/n) sum_k sum_j log p(x_j^k | theta)`.
pub fn eval_eta_naive(boot: &BootstrapSet, theta: &Model) -> Result<f64> {
    check_theta(boot, theta)?;
    let total: f64 = theta.log_densities(&boot.pooled())?.iter().sum();
    Ok(total / boot.n() as f64)
}

/// `(1/n) sum_k sum_j w_j^k log p(x_j^k | theta)` with the importance
/// weights of [`importance_weights`].
pub fn eval_eta_weighted(ensemble: &LocalEnsemble, boot: &BootstrapSet, theta: &Model) -> Result<f64> {
    check_theta(boot, theta)?;
    let w = importance_weights(ensemble, boot, None)?;
    let ll = theta.log_densities(&boot.pooled())?;
    let total: f64 = w.iter().zip(&ll).map(|(a, b)| a * b).sum();
    Ok(total / boot.n() as f64)
}

/// Moment matching of single-Gaussian locals, weighting each local by its
/// shard size:
/// `mu = sum_k c_k mu_k`, `Sigma = sum_k c_k (Sigma_k + mu_k mu_k^T) - mu mu^T`.
pub fn exact_kl_gaussian(ensemble: &LocalEnsemble) -> Result<Model> {
    let mut gaussians = Vec::with_capacity(ensemble.len());
    for (k, m) in ensemble.locals.iter().enumerate() {
        match m {
            Model::Gmm(g) if g.n_components() == 1 => gaussians.push((&g.means()[0], &g.covariances()[0])),
            other => {
                return Err(Error::NotApplicable(format!(
                    "exact KL combination needs single Gaussians, local {k} is {} with m={}",
                    other.family(),
                    other.n_components()
                )))
            }
        }
    }
    let total: f64 = ensemble.shard_sizes.iter().map(|&s| s as f64).sum();
    if !(total > 0.0) {
        return Err(Error::InvalidInput("shard sizes sum to zero".into()));
    }
    let p = ensemble.locals[0].dim();
    let mut mu = DVector::<f64>::zeros(p);
    let mut second = DMatrix::<f64>::zeros(p, p);
    for ((m, c), &size) in gaussians.iter().zip(&ensemble.shard_sizes) {
        let w = size as f64 / total;
        mu += *m * w;
        second += (*c + linalg::outer(m, m)) * w;
    }
    let mut cov = second - linalg::outer(&mu, &mu);
    linalg::symmetrize(&mut cov);
    Ok(Model::Gmm(GmmParams::single(mu, cov)?))
}

/// Whether `family` has identifiable flat parameters, so that linear
/// combination of locals is meaningful.
pub fn linear_ops_identifiable(family: Family) -> bool {
    !family.is_rotation_invariant()
}
