//! Library pipeline on a small simulated collection: emit, ingest, fit,
//! check, impute, pool.

use lifecourse::impute::{impute_missing, ols_slope, rubin_pool};
use lifecourse::io::{ingest_reader, write_dataset};
use lifecourse::ppc::{residual_pair, variance_ratio};
use lifecourse::rhat::convergence_report;
use lifecourse::sampler::{run_sampler, InitStrategy, SamplerConfig};
use lifecourse::simulate::{apply_deletion, desk_profiles, desk_truth, simulate_dataset, DeletionRule};
use lifecourse::spec::ModelSpec;
use lifecourse::state::Variant;

#[test]
fn simulate_ingest_fit_impute_pool() {
    let spec = ModelSpec::default();
    let truth = desk_truth(&spec, 3).unwrap();
    let (data, gt) = simulate_dataset(&desk_profiles(20, 3), &spec, &truth, 42).unwrap();

    let mut csv = Vec::new();
    write_dataset(&data, &spec, &mut csv).unwrap();
    let ingested = ingest_reader(&csv[..], &spec).unwrap();
    assert_eq!(ingested.data, data);

    let rule = DeletionRule { factor: 2, cohort: Some(1), age_below: None };
    let (reduced, held) = apply_deletion(&data, &rule).unwrap();
    assert!(!held.is_empty());

    let config = SamplerConfig {
        superchains: 2,
        subchains: 2,
        iterations: 40,
        warmup: 20,
        seed: 9,
        init: InitStrategy::TruthJitter,
        ..SamplerConfig::default()
    };
    let draws = run_sampler(&reduced, &spec, &config, Some(&gt.state)).unwrap();
    assert_eq!(draws.n_post(), 80);
    let report = convergence_report(&draws).unwrap();
    assert_eq!(report.rows.len(), draws.n_paths());

    let which = draws.equally_spaced(10).unwrap();
    let (obs, rep) = residual_pair(&draws, &reduced, &spec, Variant::Full, &which, 1).unwrap();
    let ratios = variance_ratio(&obs, &rep, 3, spec.n_windows()).unwrap();
    assert!(ratios.iter().filter_map(|r| r.ratio).all(|r| r > 0.0 && r.is_finite()));

    let set = impute_missing(&draws, &reduced, &spec, 8, 3).unwrap();
    assert_eq!(set.datasets.len(), 8);
    assert!(set.datasets.iter().all(|d| d.n_missing() == 0));
    for h in &held {
        let v: Vec<f64> = set.datasets.iter().map(|d| d.records[h.record].values[2].unwrap()).collect();
        assert!(v.windows(2).any(|w| w[0] != w[1]));
    }
    let est: Vec<(f64, f64)> = set.datasets.iter().map(|d| ols_slope(d, 2).unwrap()).collect();
    let pooled = rubin_pool(&est).unwrap();
    assert!(pooled.total >= pooled.within && pooled.between > 0.0);

    // same seed, same imputations
    assert_eq!(impute_missing(&draws, &reduced, &spec, 8, 3).unwrap(), set);
}
