//! Component matching between mixtures and permutation-aware parameter
//! error.
//!
//! Components are compared through their Gaussian marginals (for PPCA
//! components, `N(mu, W W^T + sigma^2 I)`) with the symmetric KL
//! divergence, and the cheapest bijection is found exactly.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Model, PpcaParams};

/// `permutation[s]` is the reference component matched to source
/// component `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub permutation: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    /// Order that lines the source up with the reference:
    /// `source.reorder(&a.alignment())` has component `r` matched to
    /// reference component `r`.
    pub fn alignment(&self) -> Vec<usize> {
        let mut order = vec![0; self.permutation.len()];
        for (s, &r) in self.permutation.iter().enumerate() {
            order[r] = s;
        }
        order
    }
}

struct Prepared {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    log_det: f64,
}

impl Prepared {
    fn new(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let chol = linalg::cholesky_lower(cov, "KL covariance")?;
        let log_det = linalg::log_det_from_cholesky(&chol);
        Ok(Prepared { mean: mean.clone(), cov: cov.clone(), chol, log_det })
    }
}

fn kl_prepared(a: &Prepared, b: &Prepared) -> f64 {
    let p = a.mean.len() as f64;
    let solve_b = |m: &DMatrix<f64>| -> DMatrix<f64> {
        let y = b.chol.solve_lower_triangular(m).expect("nonsingular factor");
        b.chol.transpose().solve_upper_triangular(&y).expect("nonsingular factor")
    };
    let trace = solve_b(&a.cov).trace();
    let diff = &b.mean - &a.mean;
    let z = b.chol.solve_lower_triangular(&diff).expect("nonsingular factor");
    0.5 * (trace + z.norm_squared() - p + b.log_det - a.log_det)
}

/// `KL(N(mu_a, cov_a) || N(mu_b, cov_b))`.
pub fn gaussian_kl(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> Result<f64> {
    check_dims(mu_a, cov_a, mu_b, cov_b)?;
    Ok(kl_prepared(&Prepared::new(mu_a, cov_a)?, &Prepared::new(mu_b, cov_b)?))
}

pub fn symmetric_kl(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> Result<f64> {
    check_dims(mu_a, cov_a, mu_b, cov_b)?;
    let a = Prepared::new(mu_a, cov_a)?;
    let b = Prepared::new(mu_b, cov_b)?;
    Ok(kl_prepared(&a, &b) + kl_prepared(&b, &a))
}

fn check_dims(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> Result<()> {
    let p = mu_a.len();
    if cov_a.shape() != (p, p) || mu_b.len() != p || cov_b.shape() != (p, p) {
        return Err(Error::InvalidInput("Gaussians must share one dimension".into()));
    }
    Ok(())
}

/// Symmetric-KL cost between every source and reference component.
/// Entry `(s, r)` compares source `s` with reference `r`; rounding
/// negatives are clamped to zero.
pub fn cost_matrix(source: &Model, reference: &Model) -> Result<DMatrix<f64>> {
    if source.family() != reference.family() || source.dim() != reference.dim() {
        return Err(Error::NotApplicable(format!(
            "cannot match {} (p={}) against {} (p={})",
            source.family(),
            source.dim(),
            reference.family(),
            reference.dim()
        )));
    }
    if source.n_components() != reference.n_components() {
        return Err(Error::NotApplicable(format!(
            "cannot match {} components against {}",
            source.n_components(),
            reference.n_components()
        )));
    }
    let prep = |m: &Model| -> Result<Vec<Prepared>> {
        m.component_gaussians().iter().map(|(_, mu, cov)| Prepared::new(mu, cov)).collect()
    };
    let src = prep(source)?;
    let refs = prep(reference)?;
    let m = src.len();
    Ok(DMatrix::from_fn(m, m, |s, r| {
        (kl_prepared(&src[s], &refs[r]) + kl_prepared(&refs[r], &src[s])).max(0.0)
    }))
}

pub fn match_components(source: &Model, reference: &Model) -> Result<Assignment> {
    let cost = cost_matrix(source, reference)?;
    solve_assignment(&cost)
}

/// Minimum-cost bijection rows → columns of a square, finite, nonnegative
/// cost matrix. Among optimal bijections the lexicographically smallest
/// is returned, where two totals are tied when they agree to
/// `1e-12 * max(1, total)`.
pub fn solve_assignment(cost: &DMatrix<f64>) -> Result<Assignment> {
    let m = cost.nrows();
    if cost.ncols() != m || m == 0 {
        return Err(Error::InvalidInput(format!("cost matrix must be square and nonempty, got {:?}", cost.shape())));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NumericalFailure("cost matrix has non-finite entries".into()));
    }
    let (_, best) = hungarian(cost);
    let tol = 1e-12 * best.abs().max(1.0);

    let mut permutation = vec![usize::MAX; m];
    let mut used = vec![false; m];
    let mut fixed_cost = 0.0;
    for s in 0..m {
        let rows: Vec<usize> = (s + 1..m).collect();
        for r in 0..m {
            if used[r] {
                continue;
            }
            let cols: Vec<usize> = (0..m).filter(|&c| !used[c] && c != r).collect();
            let rest = if rows.is_empty() {
                0.0
            } else {
                hungarian(&DMatrix::from_fn(rows.len(), cols.len(), |i, j| cost[(rows[i], cols[j])])).1
            };
            if fixed_cost + cost[(s, r)] + rest <= best + tol {
                permutation[s] = r;
                used[r] = true;
                fixed_cost += cost[(s, r)];
                break;
            }
        }
        debug_assert!(permutation[s] != usize::MAX, "tie-break lost the optimum");
    }
    Ok(Assignment { permutation, total_cost: fixed_cost.max(0.0) })
}

/// Shortest augmenting path Hungarian algorithm with potentials, O(m^3).
/// Returns the row → column assignment and its cost.
fn hungarian(cost: &DMatrix<f64>) -> (Vec<usize>, f64) {
    let n = cost.nrows();
    // 1-based arrays with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    let total = row_to_col.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
    (row_to_col, total)
}

/// Reorders `estimate` so its components line up with `truth`.
pub fn align_to(estimate: &Model, truth: &Model) -> Result<Model> {
    if estimate.n_components() == 1 {
        return Ok(estimate.clone());
    }
    let a = match_components(estimate, truth)?;
    estimate.reorder(&a.alignment())
}

/// Squared error between `estimate` and `truth` after component matching,
/// summed over all mixture weights and, per component, the mean and
/// covariance entries (GMM) or the mean, the entries of `W W^T`, and
/// `sigma^2` (PPCA).
pub fn param_mse(estimate: &Model, truth: &Model) -> Result<f64> {
    if estimate.family() != truth.family()
        || estimate.dim() != truth.dim()
        || estimate.latent_dim() != truth.latent_dim()
        || estimate.n_components() != truth.n_components()
    {
        return Err(Error::NotApplicable(format!(
            "estimate ({}, p={}, m={}) and truth ({}, p={}, m={}) are not comparable",
            estimate.family(),
            estimate.dim(),
            estimate.n_components(),
            truth.family(),
            truth.dim(),
            truth.n_components()
        )));
    }
    let aligned = align_to(estimate, truth)?;
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let ppca_err = |a: &PpcaParams, b: &PpcaParams| {
        sq(a.mean().as_slice(), b.mean().as_slice())
            + sq(a.loading_gram().as_slice(), b.loading_gram().as_slice())
            + (a.noise_var() - b.noise_var()).powi(2)
    };
    let total = match (&aligned, truth) {
        (Model::Gmm(a), Model::Gmm(b)) => {
            let mut t = sq(a.weights(), b.weights());
            for s in 0..a.n_components() {
                t += sq(a.means()[s].as_slice(), b.means()[s].as_slice());
                t += sq(a.covariances()[s].as_slice(), b.covariances()[s].as_slice());
            }
            t
        }
        (Model::Ppca(a), Model::Ppca(b)) => ppca_err(a, b),
        (Model::MixPpca(a), Model::MixPpca(b)) => {
            sq(a.weights(), b.weights())
                + a.components().iter().zip(b.components()).map(|(x, y)| ppca_err(x, y)).sum::<f64>()
        }
        _ => unreachable!("families checked above"),
    };
    Ok(total)
}
