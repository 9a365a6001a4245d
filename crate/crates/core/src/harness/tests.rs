use super::*;
use crate::fit::ModelSpec;
use crate::seed::rng_from;
use proptest::prelude::*;

fn base_config() -> ExperimentConfig {
    ExperimentConfig::from_json_str(
        r#"{
            "model": {"family": "gmm", "p": 2, "m": 2},
            "N": 2000, "d": 4, "n": 100,
            "estimators": ["kl_naive", "kl_weighted", "kl_control", "linear", "matched_linear"],
            "trials": 2, "master_seed": 42,
            "fit": {"restarts": 2},
            "holdout_size": 200
        }"#,
    )
    .unwrap()
}

fn csv_bytes(records: &[TrialRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_records(&mut buf, records).unwrap();
    buf
}

#[test]
fn generated_models_have_shape_and_separation() {
    for spec in [ModelSpec::gmm(3, 3), ModelSpec::gmm(3, 10), ModelSpec::mix_ppca(5, 3, 2), ModelSpec::ppca(5, 4)] {
        let a = generate_true_model(&spec, &mut rng_from(1)).unwrap();
        let b = generate_true_model(&spec, &mut rng_from(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_components(), spec.m);
        assert_eq!(a.dim(), spec.p);
        assert!(min_separation(&a).unwrap() >= 4.0);
    }
    let g = generate_true_model(&ModelSpec::gmm(3, 3), &mut rng_from(2)).unwrap();
    for (w, mu, cov) in g.component_gaussians() {
        assert!(w > 0.0);
        assert!((mu.norm() - 5.0 * 3f64.sqrt()).abs() < 1e-9);
        let eig = nalgebra::SymmetricEigen::new(cov).eigenvalues;
        assert!(eig.max() <= 1.3 + 1e-12 && eig.min() >= 0.7 - 1e-12);
    }
}

#[test]
fn partition_keeps_the_multiset() {
    let data = crate::dataset::Dataset::new(1, (0..60).map(|i| i as f64).collect()).unwrap();
    for d in [1, 3, 60] {
        let parts = partition(&data, d, &mut rng_from(d as u64)).unwrap();
        assert_eq!(parts.len(), d);
        assert!(parts.iter().all(|p| p.n_rows() == 60 / d));
        let mut all: Vec<f64> = parts.iter().flat_map(|p| p.as_slice().to_vec()).collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, data.as_slice());
    }
    assert!(partition(&data, 7, &mut rng_from(0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn partition_law(rows in 1usize..40, d_pick in 0usize..8, seed in any::<u64>()) {
        let divisors: Vec<usize> = (1..=rows).filter(|d| rows % d == 0).collect();
        let d = divisors[d_pick % divisors.len()];
        let data = crate::dataset::Dataset::new(2, (0..2 * rows).map(|i| (i % 7) as f64 + 0.5 * i as f64).collect()).unwrap();
        let parts = partition(&data, d, &mut rng_from(seed)).unwrap();
        let mut got: Vec<Vec<u64>> = parts.iter().flat_map(|p| p.rows().map(|r| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>()).collect();
        let mut want: Vec<Vec<u64>> = data.rows().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        got.sort();
        want.sort();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn slope_is_exact_on_power_laws(c in 0.01f64..100.0, k in -3.0f64..1.0) {
        let recs: Vec<TrialRecord> = [64usize, 128, 256, 512, 1024].iter().flat_map(|&n| {
            (0..3).map(move |t| fake_record(n, t, c * (n as f64).powf(k)))
        }).collect();
        let fit = fit_loglog_slope(&recs, SlopeAxis::BootstrapSize).unwrap();
        prop_assert!((fit.slope - k).abs() < 1e-9);
        prop_assert!((fit.intercept - c.ln()).abs() < 1e-9);
    }
}

fn fake_record(n: usize, trial: usize, mse: f64) -> TrialRecord {
    TrialRecord {
        estimator: EstimatorKind::KlNaive,
        total_size: 1_000_000,
        d: 10,
        n,
        trial,
        seed: 0,
        status: Status::Ok,
        mse: Some(mse),
        test_loglik: Some(-1.0),
        selected_m: None,
        wallclock_ms: 0,
        weight_clip: None,
        point_index: 0,
    }
}

#[test]
fn slope_examples() {
    let mk = |f: fn(f64) -> f64| -> Vec<TrialRecord> {
        [10usize, 20, 40, 80].iter().map(|&n| fake_record(n, 0, f(n as f64))).collect()
    };
    let s = fit_loglog_slope(&mk(|n| 7.0 * n.powi(-2)), SlopeAxis::BootstrapSize).unwrap();
    assert!((s.slope + 2.0).abs() < 1e-9 && (s.r_squared - 1.0).abs() < 1e-12);
    assert!((fit_loglog_slope(&mk(|n| 3.0 / n), SlopeAxis::BootstrapSize).unwrap().slope + 1.0).abs() < 1e-9);
    assert!(fit_loglog_slope(&mk(|_| 0.5), SlopeAxis::BootstrapSize).unwrap().slope.abs() < 1e-12);
    let two: Vec<TrialRecord> = [10usize, 20].iter().map(|&n| fake_record(n, 0, 1.0)).collect();
    assert!(fit_loglog_slope(&two, SlopeAxis::BootstrapSize).is_err());
}

#[test]
fn config_validation_names_fields() {
    let mut cfg = base_config();
    cfg.trials = 0;
    cfg.estimators.push("median".into());
    cfg.d = 3;
    let Err(crate::Error::Config(issues)) = cfg.validate() else { panic!() };
    let fields: Vec<&str> = issues.iter().map(|i| i.field.as_str()).collect();
    assert!(fields.contains(&"trials"), "{fields:?}");
    assert!(fields.contains(&"estimators[5]"), "{fields:?}");
    let unknown = issues.iter().find(|i| i.field == "estimators[5]").unwrap();
    assert!(unknown.message.contains("kl_weighted") && unknown.message.contains("global"));

    let mut cfg = base_config();
    cfg.d = 3;
    let Err(crate::Error::Config(issues)) = cfg.validate() else { panic!() };
    assert_eq!(issues[0].field, "N");

    let err = ExperimentConfig::from_json_str(r#"{"model": {"family": "gmm", "p": 2}, "N": 10, "d": 1, "n": 5, "estimators": [], "trials": "x", "master_seed": 1}"#)
        .unwrap_err();
    let crate::Error::Config(issues) = err else { panic!() };
    assert_eq!(issues[0].field, "trials");
    let err = ExperimentConfig::from_json_str(r#"{"model": {"family": "gmm", "p": 2, "colour": 1}}"#).unwrap_err();
    assert!(err.to_string().contains("model"), "{err}");
}

#[test]
fn sweep_points_follow_rules() {
    let mut cfg = base_config();
    cfg.n = None;
    cfg.n_tot = Some(4096);
    cfg.total_size = 1 << 16;
    cfg.sweep = Some(Sweep { axis: SweepAxis::Machines, values: vec![2.0, 4.0, 8.0, 16.0] });
    let pts = cfg.points().unwrap();
    assert_eq!(pts.iter().map(|p| (p.d, p.n)).collect::<Vec<_>>(), vec![(2, 2048), (4, 1024), (8, 512), (16, 256)]);

    let mut cfg = base_config();
    cfg.n = None;
    cfg.total_size = 10_000;
    cfg.d = 10;
    cfg.sweep = Some(Sweep { axis: SweepAxis::Alpha, values: vec![0.5, 1.0] });
    let pts = cfg.points().unwrap();
    assert_eq!(pts.iter().map(|p| p.n).collect::<Vec<_>>(), vec![32, 1000]);

    let mut cfg = base_config();
    cfg.sweep = Some(Sweep { axis: SweepAxis::BootstrapSize, values: vec![10.0] });
    assert!(cfg.validate().is_err(), "n and an n sweep together");
}

#[test]
fn sweep_counts_records() {
    let mut cfg = base_config();
    cfg.n = None;
    cfg.sweep = Some(Sweep { axis: SweepAxis::BootstrapSize, values: vec![50.0, 100.0, 200.0] });
    cfg.estimators = vec!["kl_naive".into(), "kl_weighted".into()];
    let recs = run_sweep(&cfg).unwrap();
    assert_eq!(recs.len(), 12);
    assert!(recs.iter().all(|r| r.status == Status::Ok && r.mse.is_some()));
    cfg.estimators.clear();
    assert!(run_sweep(&cfg).unwrap().is_empty());
}

#[test]
fn global_only_gives_one_ok_record() {
    let mut cfg = base_config();
    cfg.estimators = vec!["global".into()];
    cfg.trials = 1;
    let recs = run_sweep(&cfg).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].status, Status::Ok);
}

#[test]
fn identical_configs_give_identical_bytes() {
    let cfg = base_config();
    let a = csv_bytes(&run_sweep(&cfg).unwrap());
    let b = csv_bytes(&run_sweep(&cfg).unwrap());
    assert_eq!(a, b);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let c = csv_bytes(&pool.install(|| run_sweep(&cfg).unwrap()));
    assert_eq!(a, c);
}

#[test]
fn ppca_linear_estimators_are_not_applicable() {
    let cfg = ExperimentConfig::from_json_str(
        r#"{
            "model": {"family": "mix_ppca", "p": 5, "m": 2, "q": 2},
            "N": 2000, "d": 4, "n": 200,
            "estimators": ["linear", "matched_linear", "kl_naive", "kl_control", "kl_weighted"],
            "trials": 1, "master_seed": 3, "fit": {"restarts": 2}, "holdout_size": 100
        }"#,
    )
    .unwrap();
    let recs = run_sweep(&cfg).unwrap();
    for r in &recs {
        let expect_na = matches!(r.estimator, EstimatorKind::Linear | EstimatorKind::MatchedLinear | EstimatorKind::KlControl);
        assert_eq!(r.status == Status::NotApplicable, expect_na, "{:?}", r);
        assert_eq!(r.mse.is_some(), !expect_na);
    }
    let mut allowed = cfg.clone();
    allowed.ppca_linear = true;
    let recs = run_sweep(&allowed).unwrap();
    assert!(recs.iter().all(|r| r.status == Status::Ok), "{recs:?}");
}

#[test]
fn failures_stay_in_their_records() {
    let mut cfg = base_config();
    cfg.model = ModelSpec::gmm(3, 1);
    cfg.n = Some(2);
    cfg.fit.ridge = 0.0;
    cfg.trials = 1;
    let recs = run_sweep(&cfg).unwrap();
    for r in &recs {
        match r.estimator {
            EstimatorKind::Linear | EstimatorKind::MatchedLinear => assert_eq!(r.status, Status::Ok),
            _ => {
                assert!(matches!(r.status, Status::Failed(_)), "{r:?}");
                assert!(r.mse.is_none() && r.test_loglik.is_none());
            }
        }
    }
    let mut only = cfg.clone();
    only.estimators = vec!["linear".into(), "matched_linear".into()];
    let alone = run_sweep(&only).unwrap();
    let together: Vec<&TrialRecord> = recs
        .iter()
        .filter(|r| matches!(r.estimator, EstimatorKind::Linear | EstimatorKind::MatchedLinear))
        .collect();
    assert_eq!(alone.iter().collect::<Vec<_>>(), together);
}

#[test]
fn bic_mode_records_selected_components() {
    let cfg = ExperimentConfig::from_json_str(
        r#"{
            "model": {"family": "gmm", "p": 2, "m": 3},
            "N": 3000, "d": 3, "n": 300, "m_max": 4,
            "estimators": ["global", "linear", "kl_naive", "kl_weighted"],
            "trials": 1, "master_seed": 9, "fit": {"restarts": 2}, "holdout_size": 100
        }"#,
    )
    .unwrap();
    let recs = run_sweep(&cfg).unwrap();
    for r in &recs {
        if r.status == Status::Ok {
            assert!(r.selected_m.is_some(), "{r:?}");
        }
    }
    let naive = recs.iter().find(|r| r.estimator == EstimatorKind::KlNaive).unwrap();
    let weighted = recs.iter().find(|r| r.estimator == EstimatorKind::KlWeighted).unwrap();
    assert_eq!(naive.selected_m, weighted.selected_m);
}

#[test]
fn records_round_trip_through_csv() {
    let recs = run_sweep(&base_config()).unwrap();
    let bytes = csv_bytes(&recs);
    let text = String::from_utf8(bytes.clone()).unwrap();
    assert!(text.starts_with("estimator,N,d,n,trial,seed,status,mse,test_loglik,selected_m,wallclock_ms\n"));
    let back = read_records(&bytes[..]).unwrap();
    assert_eq!(back.len(), recs.len());
    for (a, b) in back.iter().zip(&recs) {
        assert_eq!(a.mse, b.mse);
        assert_eq!(a.test_loglik, b.test_loglik);
        assert_eq!(a.status, b.status);
        assert_eq!(a.seed, b.seed);
    }
    assert_eq!(csv_bytes(&back), bytes);
    let missing = "estimator,N,d\nkl_naive,1,1\n";
    let err = read_records(missing.as_bytes()).unwrap_err();
    assert!(err.to_string().contains("n"), "{err}");
}

#[test]
fn ingest_examples() {
    let ds = ingest_reader("1,2\n3,4\n5,6\n".as_bytes(), &CsvSchema::default()).unwrap();
    assert_eq!((ds.n_rows(), ds.dim()), (3, 2));
    let schema = CsvSchema { has_header: true, label_column: Some(0), ..CsvSchema::default() };
    let ds = ingest_reader("y,a,b\ncat,1,2\ndog,3,4\n".as_bytes(), &schema).unwrap();
    assert_eq!(ds.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    let text = "1,2\n1,2\n1,2\n1,2\n1,2\n1,2\n1,x\n1,2\n";
    let err = ingest_reader(text.as_bytes(), &CsvSchema::default()).unwrap_err();
    assert!(matches!(err, crate::Error::Parse { line: 7, .. }), "{err}");
    let err = ingest_reader("1,2\n3\n".as_bytes(), &CsvSchema::default()).unwrap_err();
    assert!(matches!(err, crate::Error::Parse { line: 2, .. }), "{err}");
    assert!(ingest_reader("".as_bytes(), &CsvSchema::default()).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    std::fs::write(&path, "0.5,1\n2,3\n").unwrap();
    assert_eq!(ingest_csv(&path, &CsvSchema::default()).unwrap().n_rows(), 2);
}

#[test]
fn seed_override_replaces_master_seed() {
    let mut cfg = base_config();
    std::env::set_var("KLFUSE_SEED_OVERRIDE", "77");
    cfg.apply_seed_override().unwrap();
    std::env::set_var("KLFUSE_SEED_OVERRIDE", "nope");
    assert!(cfg.clone().apply_seed_override().is_err());
    std::env::remove_var("KLFUSE_SEED_OVERRIDE");
    assert_eq!(cfg.master_seed, 77);
}
