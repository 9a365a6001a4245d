//! One experimental replicate: truth, data, locals, bootstrap, estimators.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use super::config::{EstimatorKind, ExperimentConfig, SweepPoint};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{self, BootstrapSet, LocalEnsemble};
use crate::fit::{self, ModelSpec, WeightedDataset};
use crate::matching::{param_mse, symmetric_kl};
use crate::model::{Family, GmmParams, MixPpcaParams, Model, PpcaParams};
use crate::seed;

/// Minimum pairwise symmetric KL between generated mixture components.
pub const MIN_SEPARATION: f64 = 4.0;
const MAX_GENERATION_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Status {
    Ok,
    NotApplicable,
    Failed(String),
}

impl Status {
    pub fn label(&self) -> String {
        match self {
            Status::Ok => "ok".into(),
            Status::NotApplicable => "not_applicable".into(),
            Status::Failed(reason) => format!("failed: {reason}"),
        }
    }

    pub fn parse(s: &str) -> Option<Status> {
        match s {
            "ok" => Some(Status::Ok),
            "not_applicable" => Some(Status::NotApplicable),
            _ => s.strip_prefix("failed: ").map(|r| Status::Failed(r.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub estimator: EstimatorKind,
    pub total_size: usize,
    pub d: usize,
    pub n: usize,
    pub trial: usize,
    pub seed: u64,
    pub status: Status,
    /// Missing when the estimate's component count differs from the truth.
    pub mse: Option<f64>,
    /// Mean log-density of the holdout sample.
    pub test_loglik: Option<f64>,
    pub selected_m: Option<usize>,
    pub wallclock_ms: u64,
    /// Clip applied to log importance weights, if any.
    pub weight_clip: Option<f64>,
    /// Position of the sweep value in the config.
    pub point_index: usize,
}

/// Random well-separated, well-conditioned model of the given shape.
///
/// Mixture means lie on the sphere of radius `5 sqrt(p)`, GMM covariances
/// are `I` plus a symmetric perturbation of spectral norm at most 0.3, and
/// weights follow Dirichlet(5, ..., 5). PPCA loadings have entries
/// `N(0, 1/q)` and noise variance 0.5. Mixtures are redrawn until every
/// pair of components has symmetric KL of at least [`MIN_SEPARATION`].
pub fn generate_true_model<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Model> {
    spec.validate()?;
    let (p, m, q) = (spec.p, spec.m, spec.q);
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        let model = match spec.family {
            Family::Gmm => {
                let means = (0..m).map(|_| sphere_point(p, 5.0 * (p as f64).sqrt(), rng)).collect();
                let covs = (0..m).map(|_| perturbed_identity(p, 0.3, rng)).collect();
                Model::Gmm(GmmParams::new(dirichlet(m, 5.0, rng), means, covs)?)
            }
            Family::Ppca => {
                let mean = DVector::from_fn(p, |_, _| normal(rng));
                Model::Ppca(PpcaParams::new(mean, random_loading(p, q, rng), 0.5)?)
            }
            Family::MixPpca => {
                let comps = (0..m)
                    .map(|_| {
                        let mean = sphere_point(p, 5.0 * (p as f64).sqrt(), rng);
                        PpcaParams::new(mean, random_loading(p, q, rng), 0.5)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Model::MixPpca(MixPpcaParams::new(dirichlet(m, 5.0, rng), comps)?)
            }
        };
        if min_separation(&model)? >= MIN_SEPARATION {
            return Ok(model);
        }
    }
    Err(Error::InvalidInput(format!(
        "could not draw {m} components with symmetric KL >= {MIN_SEPARATION} in p={p}"
    )))
}

/// Smallest symmetric KL between two components (infinite for m = 1).
pub fn min_separation(model: &Model) -> Result<f64> {
    let comps = model.component_gaussians();
    let mut min = f64::INFINITY;
    for a in 0..comps.len() {
        for b in a + 1..comps.len() {
            min = min.min(symmetric_kl(&comps[a].1, &comps[a].2, &comps[b].1, &comps[b].2)?);
        }
    }
    Ok(min)
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn sphere_point<R: Rng + ?Sized>(p: usize, radius: f64, rng: &mut R) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(p, |_, _| normal(rng));
        let norm = v.norm();
        if norm > 1e-12 {
            return v * (radius / norm);
        }
    }
}

fn perturbed_identity<R: Rng + ?Sized>(p: usize, max_norm: f64, rng: &mut R) -> DMatrix<f64> {
    let a = DMatrix::from_fn(p, p, |_, _| normal(rng));
    let sym = (&a + a.transpose()) * 0.5;
    let spectral = SymmetricEigen::new(sym.clone()).eigenvalues.abs().max();
    let scale = if spectral > 0.0 { max_norm * rng.random::<f64>() / spectral } else { 0.0 };
    let mut cov = DMatrix::identity(p, p) + sym * scale;
    crate::linalg::symmetrize(&mut cov);
    cov
}

fn random_loading<R: Rng + ?Sized>(p: usize, q: usize, rng: &mut R) -> DMatrix<f64> {
    let scale = 1.0 / (q as f64).sqrt();
    DMatrix::from_fn(p, q, |_, _| normal(rng) * scale)
}

fn dirichlet<R: Rng + ?Sized>(m: usize, concentration: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("valid gamma parameters");
    let raw: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
    let total: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.iter().map(|g| g / total).collect();
    let head: f64 = w[..m - 1].iter().sum();
    w[m - 1] = 1.0 - head;
    w
}

/// Random split into `d` disjoint shards of equal size.
pub fn partition<R: Rng + ?Sized>(data: &Dataset, d: usize, rng: &mut R) -> Result<Vec<Dataset>> {
    let rows = data.n_rows();
    if d == 0 || rows % d != 0 {
        return Err(Error::InvalidInput(format!("{rows} rows cannot be split into {d} equal shards")));
    }
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(rng);
    order.chunks(rows / d).map(|idx| data.select(idx)).collect()
}

fn holdout_mean(model: &Model, holdout: &Dataset) -> Result<f64> {
    Ok(fit::log_likelihood(model, holdout)? / holdout.n_rows() as f64)
}

/// Everything shared by the estimators at one (N, d).
struct Shards {
    ensemble: LocalEnsemble,
}

struct TrialContext<'a> {
    cfg: &'a ExperimentConfig,
    trial: usize,
    truth: Model,
    holdout: Dataset,
}

impl TrialContext<'_> {
    fn rng(&self, tag: &str) -> seed::StageRng {
        seed::stage_rng(self.cfg.master_seed, self.trial as u64, tag)
    }

    fn seed(&self, tag: &str) -> u64 {
        seed::stage_seed(self.cfg.master_seed, self.trial as u64, tag)
    }

    fn fit_local(&self, data: &Dataset, tag: &str) -> Result<Model> {
        let mut rng = self.rng(tag);
        let report = match self.cfg.m_max {
            Some(m_max) => fit::select_components(data, &self.cfg.model, m_max, &self.cfg.fit, &mut rng)?,
            None => fit::fit_mle(&WeightedDataset::uniform(data.clone()), &self.cfg.model, &self.cfg.fit, &mut rng)?,
        };
        Ok(report.model)
    }
}

/// Runs every sweep point of one trial.
pub fn run_trial(cfg: &ExperimentConfig, trial: usize) -> Result<Vec<TrialRecord>> {
    let points = cfg.points()?;
    let kinds = cfg.estimator_kinds();
    if kinds.is_empty() {
        return Ok(Vec::new());
    }
    let master = cfg.master_seed;
    let truth = match &cfg.truth {
        Some(t) => t.build(&cfg.model)?,
        None => generate_true_model(&cfg.model, &mut seed::stage_rng(master, trial as u64, "truth"))?,
    };
    let holdout = truth.sample(cfg.holdout_size, &mut seed::stage_rng(master, trial as u64, "holdout"))?;
    let ctx = TrialContext { cfg, trial, truth, holdout };

    let mut data_cache: BTreeMap<usize, Dataset> = BTreeMap::new();
    let mut shard_cache: BTreeMap<(usize, usize), std::result::Result<Shards, String>> = BTreeMap::new();
    let mut global_cache: BTreeMap<usize, (u64, Result<(Model, u64)>)> = BTreeMap::new();
    let mut records = Vec::new();

    for pt in &points {
        let big_n = pt.total_size;
        if !data_cache.contains_key(&big_n) {
            let data = ctx.truth.sample(big_n, &mut ctx.rng(&format!("data/N={big_n}")))?;
            data_cache.insert(big_n, data);
        }
        let data = &data_cache[&big_n];

        if kinds.contains(&EstimatorKind::Global) && !global_cache.contains_key(&big_n) {
            let tag = format!("global/N={big_n}");
            let start = Instant::now();
            let res = match cfg.m_max {
                None => fit::fit_global_mle(std::slice::from_ref(data), &cfg.model, &cfg.fit, &mut ctx.rng(&tag)),
                Some(m_max) => fit::select_components(data, &cfg.model, m_max, &cfg.fit, &mut ctx.rng(&tag)),
            }
            .map(|r| (r.model, start.elapsed().as_millis() as u64));
            global_cache.insert(big_n, (ctx.seed(&tag), res));
        }

        let key = (big_n, pt.d);
        if !shard_cache.contains_key(&key) {
            let built = build_shards(&ctx, data, pt).map_err(|e| e.to_string());
            shard_cache.insert(key, built);
        }

        for &kind in &kinds {
            let base = TrialRecord {
                estimator: kind,
                total_size: big_n,
                d: pt.d,
                n: pt.n,
                trial,
                seed: 0,
                status: Status::Ok,
                mse: None,
                test_loglik: None,
                selected_m: None,
                wallclock_ms: 0,
                weight_clip: if kind == EstimatorKind::KlWeighted { cfg.weight_clip } else { None },
                point_index: pt.index,
            };
            if kind == EstimatorKind::Global {
                let (seed, res) = &global_cache[&big_n];
                let rec = TrialRecord { seed: *seed, ..base };
                records.push(match res {
                    Ok((model, ms)) => finish_ok(&ctx, rec, model, *ms, cfg.m_max.is_some()),
                    Err(e) => TrialRecord { status: status_of(e), ..rec },
                });
            }
        }

        let shards = match &shard_cache[&key] {
            Ok(s) => s,
            Err(reason) => {
                for &kind in kinds.iter().filter(|k| **k != EstimatorKind::Global) {
                    records.push(failed_record(&ctx, pt, kind, format!("local fits: {reason}")));
                }
                continue;
            }
        };
        records.extend(run_point(&ctx, pt, &kinds, shards));
    }
    records.sort_by_key(|r| (r.trial, r.estimator, r.point_index));
    Ok(records)
}

fn build_shards(ctx: &TrialContext, data: &Dataset, pt: &SweepPoint) -> Result<Shards> {
    let (big_n, d) = (pt.total_size, pt.d);
    let parts = partition(data, d, &mut ctx.rng(&format!("partition/N={big_n}/d={d}")))?;
    let locals = parts
        .par_iter()
        .enumerate()
        .map(|(k, part)| {
            ctx.fit_local(part, &format!("local/N={big_n}/d={d}/k={k}"))
                .map_err(|e| e.context(format!("local {k}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let ensemble = LocalEnsemble::new(locals, vec![big_n / d; d])?;
    Ok(Shards { ensemble })
}

fn status_of(e: &Error) -> Status {
    if e.is_not_applicable() {
        Status::NotApplicable
    } else {
        Status::Failed(e.to_string())
    }
}

fn failed_record(ctx: &TrialContext, pt: &SweepPoint, kind: EstimatorKind, reason: String) -> TrialRecord {
    TrialRecord {
        estimator: kind,
        total_size: pt.total_size,
        d: pt.d,
        n: pt.n,
        trial: ctx.trial,
        seed: ctx.seed(&estimator_tag(pt, kind)),
        status: Status::Failed(reason),
        mse: None,
        test_loglik: None,
        selected_m: None,
        wallclock_ms: 0,
        weight_clip: None,
        point_index: pt.index,
    }
}

fn estimator_tag(pt: &SweepPoint, kind: EstimatorKind) -> String {
    format!("estimate/N={}/d={}/n={}/{}", pt.total_size, pt.d, pt.n, kind.name())
}

fn finish_ok(ctx: &TrialContext, rec: TrialRecord, model: &Model, ms: u64, bic_mode: bool) -> TrialRecord {
    let mse = match param_mse(model, &ctx.truth) {
        Ok(v) => Some(v),
        Err(e) if e.is_not_applicable() => None,
        Err(e) => return TrialRecord { status: Status::Failed(format!("mse: {e}")), ..rec },
    };
    let ll = match holdout_mean(model, &ctx.holdout) {
        Ok(v) => v,
        Err(e) => return TrialRecord { status: Status::Failed(format!("holdout: {e}")), ..rec },
    };
    TrialRecord {
        status: Status::Ok,
        mse,
        test_loglik: Some(ll),
        selected_m: bic_mode.then(|| model.n_components()),
        wallclock_ms: if ctx.cfg.record_timing { ms } else { 0 },
        ..rec
    }
}

/// Why linear combination is refused for this ensemble, if it is.
fn linear_refusal(cfg: &ExperimentConfig, ens: &LocalEnsemble, kind: EstimatorKind) -> Option<String> {
    let family = ens.locals()[0].family();
    if family.is_rotation_invariant() && !cfg.ppca_linear {
        return Some(format!("{kind} is not applicable to {family} models (loadings are rotation-ambiguous)"));
    }
    if ens.shared_layout().is_none() {
        return Some(format!("{kind} needs locals with one layout"));
    }
    let m = ens.locals()[0].n_components();
    let needs_matching = matches!(kind, EstimatorKind::MatchedLinear | EstimatorKind::KlControl);
    if needs_matching && m > 1 && !cfg.matching {
        return Some(format!("{kind} needs component matching, which is disabled"));
    }
    None
}

fn run_point(ctx: &TrialContext, pt: &SweepPoint, kinds: &[EstimatorKind], shards: &Shards) -> Vec<TrialRecord> {
    let cfg = ctx.cfg;
    let ens = &shards.ensemble;
    let bic_mode = cfg.m_max.is_some();
    let boot_tag = format!("boot/N={}/d={}/n={}", pt.total_size, pt.d, pt.n);
    let boot: std::result::Result<BootstrapSet, String> =
        estimators::draw_bootstrap(ens, pt.n, &cfg.fit, &mut ctx.rng(&boot_tag)).map_err(|e| e.to_string());
    let wants = |k| kinds.contains(&k);
    let init = if cfg.matching { estimators::pooled_init(ens) } else { ens.locals()[0].clone() };

    // kl_naive feeds kl_control and, under BIC selection, kl_weighted.
    let needs_naive = wants(EstimatorKind::KlNaive)
        || wants(EstimatorKind::KlControl)
        || (bic_mode && wants(EstimatorKind::KlWeighted));
    let naive: Option<(Result<Model>, u64)> = match (&boot, needs_naive) {
        (Ok(b), true) => {
            let start = Instant::now();
            let res = if bic_mode {
                let tag = estimator_tag(pt, EstimatorKind::KlNaive);
                fit::select_components(&b.pooled(), &cfg.model, cfg.m_max.unwrap_or(1), &cfg.fit, &mut ctx.rng(&tag))
                    .map(|r| r.model)
            } else {
                estimators::kl_naive(b, &init, &cfg.fit)
            };
            Some((res, start.elapsed().as_millis() as u64))
        }
        _ => None,
    };

    let mut out = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        if kind == EstimatorKind::Global {
            continue;
        }
        let rec = TrialRecord {
            seed: ctx.seed(&estimator_tag(pt, kind)),
            weight_clip: if kind == EstimatorKind::KlWeighted { cfg.weight_clip } else { None },
            ..failed_record(ctx, pt, kind, String::new())
        };
        let start = Instant::now();
        let result: Result<(Model, u64)> = match kind {
            EstimatorKind::Linear | EstimatorKind::MatchedLinear => match linear_refusal(cfg, ens, kind) {
                Some(why) => Err(Error::NotApplicable(why)),
                None => {
                    let m = if kind == EstimatorKind::Linear {
                        estimators::linear_average(ens)
                    } else {
                        estimators::matched_linear_average(ens)
                    };
                    m.map(|m| (m, start.elapsed().as_millis() as u64))
                }
            },
            _ => match &boot {
                Err(reason) => Err(Error::DegenerateFit(format!("bootstrap: {reason}"))),
                Ok(b) => match kind {
                    EstimatorKind::KlNaive => take_naive(&naive),
                    EstimatorKind::KlControl => match linear_refusal(cfg, ens, kind) {
                        Some(why) => Err(Error::NotApplicable(why)),
                        None => take_naive(&naive).and_then(|(theta, ms)| {
                            let s = Instant::now();
                            estimators::kl_control(ens, b, &theta).map(|m| (m, ms + s.elapsed().as_millis() as u64))
                        }),
                    },
                    EstimatorKind::KlWeighted => {
                        if bic_mode {
                            take_naive(&naive).and_then(|(theta, ms)| {
                                let s = Instant::now();
                                estimators::kl_weighted(ens, b, &theta, &cfg.fit, cfg.weight_clip)
                                    .map(|m| (m, ms + s.elapsed().as_millis() as u64))
                            })
                        } else {
                            estimators::kl_weighted(ens, b, &init, &cfg.fit, cfg.weight_clip)
                                .map(|m| (m, start.elapsed().as_millis() as u64))
                        }
                    }
                    _ => unreachable!("handled above"),
                },
            },
        };
        out.push(match result {
            Ok((model, ms)) => finish_ok(ctx, rec, &model, ms, bic_mode),
            Err(e) => TrialRecord { status: status_of(&e), ..rec },
        });
    }
    out
}

fn take_naive(naive: &Option<(Result<Model>, u64)>) -> Result<(Model, u64)> {
    match naive {
        Some((Ok(m), ms)) => Ok((m.clone(), *ms)),
        Some((Err(e), _)) => Err(e.clone().context("kl_naive")),
        None => Err(Error::DegenerateFit("kl_naive was not computed".into())),
    }
}

/// All trials of a configuration, in parallel. Records are ordered by
/// (trial, estimator, sweep position) whatever the scheduling.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<TrialRecord>> {
    cfg.validate()?;
    let per_trial = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(cfg, t))
        .collect::<Result<Vec<_>>>()?;
    let mut all: Vec<TrialRecord> = per_trial.into_iter().flatten().collect();
    all.sort_by_key(|r| (r.trial, r.estimator, r.point_index));
    Ok(all)
}
