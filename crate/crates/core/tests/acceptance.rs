//! End-to-end acceptance checks. Each test prints one PASS/FAIL line and
//! then asserts it.

use klfuse::estimators::{
    draw_bootstrap, empirical_fisher, eval_eta_naive, eval_eta_weighted, exact_kl_gaussian, kl_control, kl_naive,
    pooled_init, LocalEnsemble,
};
use klfuse::fit::{fit_global_mle, fit_mle, FitConfig, ModelSpec, WeightedDataset, MONOTONE_SLACK};
use klfuse::harness::{
    fit_loglog_slope, mean_mse_by, partition, run_sweep, write_records, EstimatorKind, ExperimentConfig, SlopeAxis,
    Status, TrialRecord,
};
use klfuse::matching::{cost_matrix, solve_assignment};
use klfuse::nalgebra::{DMatrix, DVector, SymmetricEigen};
use klfuse::seed::rng_from;
use klfuse::{Dataset, GmmParams, MixPpcaParams, Model, PpcaParams};
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Writes to the stderr handle directly so the line survives test output capture.
fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("criterion {id} {name}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {id} {name} failed: {detail}");
}

fn of_kind(records: &[TrialRecord], kind: EstimatorKind) -> Vec<TrialRecord> {
    records.iter().filter(|r| r.estimator == kind).cloned().collect()
}

fn failures(records: &[TrialRecord]) -> usize {
    records.iter().filter(|r| r.status != Status::Ok).count()
}

fn gauss(mu: DVector<f64>, cov: DMatrix<f64>) -> Model {
    Model::Gmm(GmmParams::single(mu, cov).unwrap())
}

/// Largest block-wise relative error `|a_b - b_b| / |b_b|` over the mean
/// and covariance blocks of two single Gaussians.
fn block_rel_error(a: &Model, b: &Model) -> f64 {
    let (Model::Gmm(a), Model::Gmm(b)) = (a, b) else { panic!("single Gaussians expected") };
    let mean = (&a.means()[0] - &b.means()[0]).norm() / b.means()[0].norm().max(f64::MIN_POSITIVE);
    let cov = (&a.covariances()[0] - &b.covariances()[0]).norm() / b.covariances()[0].norm();
    mean.max(cov)
}

#[test]
fn criterion_1_rate_separation() {
    let cfg = ExperimentConfig::from_json_str(
        r#"{
            "model": {"family": "gmm", "p": 3, "m": 3},
            "N": 1000000, "d": 10,
            "sweep": {"axis": "n", "values": [128, 256, 512, 1024, 2048]},
            "estimators": ["kl_naive", "kl_control", "kl_weighted"],
            "trials": 20, "master_seed": 2024, "holdout_size": 1000
        }"#,
    )
    .unwrap();
    let records = run_sweep(&cfg).unwrap();
    let mut detail = Vec::new();
    let mut pass = true;
    for (kind, lo, hi) in [
        (EstimatorKind::KlNaive, -1.3, -0.7),
        (EstimatorKind::KlWeighted, -2.5, -1.5),
        (EstimatorKind::KlControl, -2.5, -1.5),
    ] {
        let fit = fit_loglog_slope(&of_kind(&records, kind), SlopeAxis::BootstrapSize).unwrap();
        pass &= fit.slope >= lo && fit.slope <= hi;
        detail.push(format!("{kind} slope {:.3} in [{lo}, {hi}]", fit.slope));
    }
    detail.push(format!("{} non-ok records", failures(&records)));
    verdict(1, "rate separation", pass, &detail.join(", "));
}

#[test]
fn criterion_2_machine_scaling() {
    let cfg = ExperimentConfig::from_json_str(
        r#"{
            "model": {"family": "ppca", "p": 5, "q": 4},
            "N": 1000000, "d": 2, "n_tot": 4096,
            "sweep": {"axis": "d", "values": [2, 4, 8, 16]},
            "estimators": ["kl_naive", "kl_weighted"],
            "trials": 10, "master_seed": 2025, "holdout_size": 1000
        }"#,
    )
    .unwrap();
    let records = run_sweep(&cfg).unwrap();
    let naive = mean_mse_by(&of_kind(&records, EstimatorKind::KlNaive), SlopeAxis::Machines);
    let max = naive.iter().map(|p| p.1).fold(f64::MIN, f64::max);
    let min = naive.iter().map(|p| p.1).fold(f64::MAX, f64::min);
    let weighted = fit_loglog_slope(&of_kind(&records, EstimatorKind::KlWeighted), SlopeAxis::Machines).unwrap();
    let pass = naive.len() == 4
        && max < 2.0 * min
        && weighted.slope >= 0.5
        && weighted.slope <= 1.5;
    let detail = format!(
        "kl_naive max/min mse {:.3} < 2, kl_weighted d-slope {:.3} in [0.5, 1.5], {} non-ok records, mean mse naive {:?} weighted {:?}",
        max / min,
        weighted.slope,
        failures(&records),
        naive.iter().map(|p| format!("{:.3e}", p.1)).collect::<Vec<_>>(),
        weighted.points.iter().map(|p| format!("{:.3e}", p.1)).collect::<Vec<_>>()
    );
    verdict(2, "d-scaling at fixed n_tot", pass, &detail);
}

#[test]
fn criterion_3_variance_dominance() {
    let truth = gauss(DVector::from_vec(vec![1.0, -0.5]), DMatrix::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 0.8]));
    let cfg = FitConfig::default();
    let d = 5;
    let data = truth.sample(5000, &mut rng_from(31)).unwrap();
    let shards = partition(&data, d, &mut rng_from(32)).unwrap();
    let locals = shards
        .iter()
        .enumerate()
        .map(|(k, s)| {
            fit_mle(&WeightedDataset::uniform(s.clone()), &ModelSpec::gmm(2, 1), &cfg, &mut rng_from(40 + k as u64))
                .unwrap()
                .model
        })
        .collect();
    let ens = LocalEnsemble::new(locals, vec![1000; d]).unwrap();
    let mut pass = true;
    let mut detail = Vec::new();
    for n in [100usize, 1000] {
        let mut naive = Vec::with_capacity(200);
        let mut weighted = Vec::with_capacity(200);
        for r in 0..200u64 {
            let boot = draw_bootstrap(&ens, n, &cfg, &mut rng_from(10_000 * n as u64 + r)).unwrap();
            naive.push(eval_eta_naive(&boot, &truth).unwrap());
            weighted.push(eval_eta_weighted(&ens, &boot, &truth).unwrap());
        }
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        let (vn, vw) = (var(&naive), var(&weighted));
        pass &= vw <= 1.05 * vn;
        detail.push(format!("n={n}: var ratio {:.4} <= 1.05", vw / vn));
    }
    verdict(3, "variance dominance", pass, &detail.join(", "));
}

#[test]
fn criterion_4_exponential_family_exactness() {
    let truth = gauss(
        DVector::from_vec(vec![2.0, -1.0, 0.5]),
        DMatrix::from_row_slice(3, 3, &[1.0, 0.3, -0.2, 0.3, 2.0, 0.4, -0.2, 0.4, 0.7]),
    );
    let cfg = FitConfig::default();
    let spec = ModelSpec::gmm(3, 1);
    let data = truth.sample(20_000, &mut rng_from(4)).unwrap();
    let shards = partition(&data, 10, &mut rng_from(5)).unwrap();
    let locals = shards
        .iter()
        .map(|s| fit_mle(&WeightedDataset::uniform(s.clone()), &spec, &cfg, &mut rng_from(6)).unwrap().model)
        .collect();
    let ens = LocalEnsemble::new(locals, vec![2000; 10]).unwrap();
    let exact = exact_kl_gaussian(&ens).unwrap();
    let global = fit_global_mle(&shards, &spec, &cfg, &mut rng_from(7)).unwrap().model;
    let err = block_rel_error(&exact, &global);
    verdict(4, "exponential-family exactness", err <= 1e-6, &format!("max block relative error {err:.3e} <= 1e-6"));
}

#[test]
fn criterion_5_single_machine_control_identity() {
    let truth = gauss(DVector::from_vec(vec![0.5, 1.5]), DMatrix::from_row_slice(2, 2, &[1.0, -0.3, -0.3, 0.6]));
    let cfg = FitConfig::default();
    let data = truth.sample(2000, &mut rng_from(50)).unwrap();
    let local = fit_mle(&WeightedDataset::uniform(data), &ModelSpec::gmm(2, 1), &cfg, &mut rng_from(51)).unwrap().model;
    let ens = LocalEnsemble::new(vec![local.clone()], vec![2000]).unwrap();
    let boot = draw_bootstrap(&ens, 500, &cfg, &mut rng_from(52)).unwrap();
    let naive = kl_naive(&boot, &pooled_init(&ens), &cfg).unwrap();
    let control = kl_control(&ens, &boot, &naive).unwrap();
    let err = block_rel_error(&control, &local);
    verdict(5, "d=1 control-variate identity", err <= 1e-5, &format!("max block relative error {err:.3e} <= 1e-5"));
}

#[test]
fn criterion_6_bic_setting() {
    let mut pass = true;
    let mut detail = Vec::new();
    for big_n in [10_000usize, 100_000] {
        let cfg = ExperimentConfig::from_json_str(&format!(
            r#"{{
                "model": {{"family": "gmm", "p": 3, "m": 10}},
                "N": {big_n}, "d": 10, "n": 600, "m_max": 15,
                "estimators": ["kl_naive", "kl_weighted"],
                "trials": 10, "master_seed": 2026, "holdout_size": 2000,
                "fit": {{"restarts": 1, "max_iters": 200, "rel_tol": 1e-6}}
            }}"#
        ))
        .unwrap();
        let records = run_sweep(&cfg).unwrap();
        let naive = of_kind(&records, EstimatorKind::KlNaive);
        let weighted = of_kind(&records, EstimatorKind::KlWeighted);
        let wins = naive
            .iter()
            .zip(&weighted)
            .filter(|(a, b)| match (a.test_loglik, b.test_loglik) {
                (Some(x), Some(y)) => y >= x,
                _ => false,
            })
            .count();
        pass &= wins >= 8;
        detail.push(format!("N={big_n}: kl_weighted >= kl_naive in {wins}/10 trials, {} non-ok records", failures(&records)));
    }
    verdict(6, "BIC setting", pass, &detail.join(", "));
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn random_weights<R: Rng>(m: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..m).map(|_| 0.5 + rng.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let head: f64 = w[..m - 1].iter().sum();
    w[m - 1] = 1.0 - head;
    w
}

fn random_model<R: Rng>(rng: &mut R) -> Model {
    let spd = |p: usize, rng: &mut R| {
        let a = DMatrix::from_fn(p, p, |_, _| normal(rng));
        let c = &a * a.transpose() * 0.3 + DMatrix::identity(p, p) * 0.5;
        (&c + c.transpose()) * 0.5
    };
    let ppca = |p: usize, q: usize, rng: &mut R| {
        let mean = DVector::from_fn(p, |_, _| normal(rng));
        let w = DMatrix::from_fn(p, q, |_, _| 0.8 * normal(rng));
        PpcaParams::new(mean, w, 0.3 + rng.random::<f64>()).unwrap()
    };
    match rng.random_range(0..3) {
        0 => {
            let (p, m) = (rng.random_range(1..4), rng.random_range(1..4));
            let means = (0..m).map(|_| DVector::from_fn(p, |_, _| 2.0 * normal(rng))).collect();
            let covs = (0..m).map(|_| spd(p, rng)).collect();
            Model::Gmm(GmmParams::new(random_weights(m, rng), means, covs).unwrap())
        }
        1 => {
            let p = rng.random_range(2..5);
            let q = rng.random_range(1..p);
            Model::Ppca(ppca(p, q, rng))
        }
        _ => {
            let (p, m) = (rng.random_range(2..5), rng.random_range(1..4));
            let q = rng.random_range(1..p);
            let comps = (0..m).map(|_| ppca(p, q, rng)).collect();
            Model::MixPpca(MixPpcaParams::new(random_weights(m, rng), comps).unwrap())
        }
    }
}

/// Worst relative mismatch between analytic and central-difference scores.
fn score_fd_check(cases: usize) -> (usize, f64) {
    let mut rng = rng_from(700);
    let mut bad = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let model = random_model(&mut rng);
        let x: Vec<f64> = (0..model.dim()).map(|_| 1.5 * normal(&mut rng)).collect();
        let score = model.score(&x).unwrap();
        let flat = model.flatten();
        let mut case_bad = false;
        for i in 0..flat.len() {
            let h = 1e-6 * flat.values()[i].abs().max(1.0);
            let at = |delta: f64| {
                let mut v = flat.values().to_vec();
                v[i] += delta;
                Model::unflatten(&flat.with_values(v).unwrap()).unwrap().log_density(&x).unwrap()
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            let rel = (score[i] - fd).abs() / score[i].abs().max(1.0);
            worst = worst.max(rel);
            case_bad |= rel > 1e-4;
        }
        bad += case_bad as usize;
    }
    (bad, worst)
}

fn brute_force_min(cost: &DMatrix<f64>) -> (Vec<usize>, f64) {
    let m = cost.nrows();
    let mut perm: Vec<usize> = (0..m).collect();
    let mut best = (perm.clone(), f64::INFINITY);
    // Heap's algorithm does not enumerate lexicographically; collect all and sort.
    let mut all = Vec::new();
    fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == 1 {
            out.push(a.clone());
            return;
        }
        heap(k - 1, a, out);
        for i in 0..k - 1 {
            if k % 2 == 0 {
                a.swap(i, k - 1);
            } else {
                a.swap(0, k - 1);
            }
            heap(k - 1, a, out);
        }
    }
    heap(m, &mut perm, &mut all);
    all.sort();
    for p in all {
        let c: f64 = p.iter().enumerate().map(|(s, &r)| cost[(s, r)]).sum();
        if c < best.1 {
            best = (p, c);
        }
    }
    best
}

#[test]
fn criterion_7_property_suites() {
    let mut lines = Vec::new();
    let mut pass = true;

    let (bad, worst) = score_fd_check(100);
    pass &= bad == 0;
    lines.push(format!("score/finite-difference {bad}/100 cases off (worst rel {worst:.1e})"));

    // EM monotonicity: every fit below is also debug-asserted step by step.
    let mut rng = rng_from(701);
    let mut worst_drop: f64 = 0.0;
    for t in 0..30u64 {
        let model = random_model(&mut rng);
        let spec = ModelSpec::of(&model);
        let data = model.sample(400, &mut rng).unwrap();
        let weights: Vec<f64> = (0..400).map(|_| 0.1 + rng.random::<f64>()).collect();
        let wd = WeightedDataset::new(data, weights).unwrap();
        let fit = fit_mle(&wd, &spec, &FitConfig { restarts: 2, ..FitConfig::default() }, &mut rng_from(t)).unwrap();
        worst_drop = worst_drop.max(fit.worst_relative_decrease());
    }
    pass &= worst_drop <= MONOTONE_SLACK;
    lines.push(format!("EM monotone (worst relative drop {worst_drop:.1e})"));

    let mut fisher_ok = true;
    for _ in 0..30 {
        let model = random_model(&mut rng);
        let n = rng.random_range(2..300);
        let samples = model.sample(n, &mut rng).unwrap();
        let f = empirical_fisher(&model, &samples).unwrap().matrix;
        let asym = (&f - f.transpose()).abs().max();
        let min = SymmetricEigen::new(f.clone()).eigenvalues.min();
        fisher_ok &= asym <= 1e-10 && min >= -1e-8 * f.norm().max(1.0);
    }
    pass &= fisher_ok;
    lines.push(format!("Fisher symmetric PSD {fisher_ok}"));

    let mut match_ok = true;
    for case in 0..200 {
        let m = 1 + case % 6;
        let a = random_gmm(m, &mut rng);
        let b = random_gmm(m, &mut rng);
        let cost = cost_matrix(&a, &b).unwrap();
        let got = solve_assignment(&cost).unwrap();
        let (perm, total) = brute_force_min(&cost);
        match_ok &= got.permutation == perm && (got.total_cost - total).abs() <= 1e-9 * total.max(1.0);
    }
    pass &= match_ok;
    lines.push(format!("matching equals brute force {match_ok}"));

    let mut round_trip = true;
    for _ in 0..200 {
        let model = random_model(&mut rng);
        let back = Model::unflatten(&model.flatten()).unwrap();
        round_trip &= back.flatten().values() == model.flatten().values();
    }
    pass &= round_trip;
    lines.push(format!("flatten round trip {round_trip}"));

    let mut law = true;
    for _ in 0..50 {
        let d = rng.random_range(1..9);
        let rows = d * rng.random_range(1..20);
        let data = Dataset::new(1, (0..rows).map(|i| i as f64).collect()).unwrap();
        let parts = partition(&data, d, &mut rng).unwrap();
        let mut all: Vec<f64> = parts.iter().flat_map(|p| p.as_slice().to_vec()).collect();
        all.sort_by(f64::total_cmp);
        law &= all == data.as_slice() && parts.iter().all(|p| p.n_rows() == rows / d);
    }
    pass &= law;
    lines.push(format!("partition multiset law {law}"));

    let mut slope_err: f64 = 0.0;
    for (c, k) in [(7.0, -2.0), (0.3, -1.0), (2.0, 0.0), (11.0, -1.5)] {
        let recs: Vec<TrialRecord> = [100usize, 200, 400, 800, 1600].iter().map(|&n| record(n, c * (n as f64).powf(k))).collect();
        let fit = fit_loglog_slope(&recs, SlopeAxis::BootstrapSize).unwrap();
        slope_err = slope_err.max((fit.slope - k).abs());
    }
    pass &= slope_err < 1e-9;
    lines.push(format!("slope regression exact (max error {slope_err:.1e})"));

    let cfg = ExperimentConfig::from_json_str(
        r#"{
            "model": {"family": "gmm", "p": 2, "m": 2},
            "N": 4000, "d": 4,
            "sweep": {"axis": "n", "values": [64, 128]},
            "estimators": ["global", "linear", "matched_linear", "kl_naive", "kl_control", "kl_weighted"],
            "trials": 2, "master_seed": 7, "holdout_size": 200
        }"#,
    )
    .unwrap();
    let bytes = |recs: &[TrialRecord]| {
        let mut b = Vec::new();
        write_records(&mut b, recs).unwrap();
        b
    };
    let first = bytes(&run_sweep(&cfg).unwrap());
    let second = bytes(&run_sweep(&cfg).unwrap());
    let same = first == second;
    pass &= same;
    lines.push(format!("pipeline byte determinism {same}"));

    verdict(7, "property suites", pass, &lines.join("; "));
}

fn random_gmm<R: Rng>(m: usize, rng: &mut R) -> Model {
    let p = 2;
    let means = (0..m).map(|_| DVector::from_fn(p, |_, _| 3.0 * normal(rng))).collect();
    let covs = (0..m)
        .map(|_| {
            let a = DMatrix::from_fn(p, p, |_, _| normal(rng));
            &a * a.transpose() * 0.5 + DMatrix::identity(p, p) * 0.3
        })
        .collect();
    Model::Gmm(GmmParams::new(random_weights(m, rng), means, covs).unwrap())
}

fn record(n: usize, mse: f64) -> TrialRecord {
    TrialRecord {
        estimator: EstimatorKind::KlWeighted,
        total_size: 1_000_000,
        d: 10,
        n,
        trial: 0,
        seed: 0,
        status: Status::Ok,
        mse: Some(mse),
        test_loglik: None,
        selected_m: None,
        wallclock_ms: 0,
        weight_clip: None,
        point_index: 0,
    }
}
