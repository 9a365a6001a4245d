//! Shared fixtures for the benchmarks.

use klfuse::estimators::{draw_bootstrap, BootstrapSet, LocalEnsemble};
use klfuse::fit::{fit_mle, FitConfig, ModelSpec, WeightedDataset};
use klfuse::harness::{generate_true_model, partition};
use klfuse::seed::rng_from;
use klfuse::{Dataset, Model};

pub struct Fixture {
    pub truth: Model,
    pub data: Dataset,
    pub ensemble: LocalEnsemble,
    pub boot: BootstrapSet,
}

/// GMM truth, `d` local fits on `rows` points, and a bootstrap of size `n`.
pub fn gmm_fixture(p: usize, m: usize, rows: usize, d: usize, n: usize) -> Fixture {
    let spec = ModelSpec::gmm(p, m);
    let cfg = FitConfig { restarts: 2, ..FitConfig::default() };
    let truth = generate_true_model(&spec, &mut rng_from(1)).expect("truth");
    let data = truth.sample(rows, &mut rng_from(2)).expect("sample");
    let shards = partition(&data, d, &mut rng_from(3)).expect("partition");
    let locals = shards
        .iter()
        .map(|s| fit_mle(&WeightedDataset::uniform(s.clone()), &spec, &cfg, &mut rng_from(4)).expect("local").model)
        .collect();
    let ensemble = LocalEnsemble::new(locals, vec![rows / d; d]).expect("ensemble");
    let boot = draw_bootstrap(&ensemble, n, &cfg, &mut rng_from(5)).expect("bootstrap");
    Fixture { truth, data, ensemble, boot }
}
