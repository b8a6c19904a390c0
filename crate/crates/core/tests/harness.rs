use deepjoint::eval::{robustness_harness, HarnessOptions};
use deepjoint::synthgen::{generate, RegimeConfig};
use deepjoint::training::{ModelConfig, TrainConfig, Variant};

fn quick(variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        variant,
        batch_size: 50,
        max_epochs: 8,
        multitask_epochs: 4,
        learning_rate: 5e-3,
        seed,
        model: ModelConfig { rnn_layers: 1, hidden: 6, head_layers: 1, head_nodes: 8 },
        ..TrainConfig::default()
    }
}

#[test]
fn identical_groups_give_zero_deltas() {
    let ds = generate(200, &RegimeConfig::informative(3, 1)).unwrap();
    let opts = HarnessOptions { n_bootstrap: 20, seed: 4, ..HarnessOptions::default() };
    let report = robustness_harness(&ds, &ds, &quick(Variant::DeepJointFeature, 2), &opts).unwrap();
    assert_eq!(report.in_domain, report.transfer);
    assert_eq!(report.deltas.len(), 3);
    for d in &report.deltas {
        assert_eq!((d.c_index.mean, d.c_index.lo, d.c_index.hi), (0.0, 0.0, 0.0));
        assert_eq!((d.brier.mean, d.brier.lo, d.brier.hi), (0.0, 0.0, 0.0));
    }
}

#[test]
fn oversampling_equal_sized_groups_changes_nothing() {
    let a = generate(150, &RegimeConfig::informative(2, 2)).unwrap();
    let b = generate(150, &RegimeConfig::informative(2, 3)).unwrap();
    let cfg = quick(Variant::Feature, 1);
    let on = HarnessOptions { n_bootstrap: 10, oversample: true, ..HarnessOptions::default() };
    let off = HarnessOptions { oversample: false, ..on.clone() };
    assert_eq!(robustness_harness(&a, &b, &cfg, &on).unwrap(), robustness_harness(&a, &b, &cfg, &off).unwrap());
}

#[test]
fn disjoint_samples_of_one_regime_show_no_systematic_gap() {
    let mut covered = 0;
    let mut mean_delta = 0.0;
    for seed in 0..5u64 {
        let a = generate(400, &RegimeConfig::informative(3, 1000 + seed)).unwrap();
        let b = generate(400, &RegimeConfig::informative(3, 2000 + seed)).unwrap();
        let opts = HarnessOptions { n_bootstrap: 50, seed, horizons: vec![1.0, 7.0], ..HarnessOptions::default() };
        let report = robustness_harness(&a, &b, &quick(Variant::Feature, seed), &opts).unwrap();
        let d = report.deltas[1].c_index;
        mean_delta += d.mean / 5.0;
        if d.lo <= 0.0 && 0.0 <= d.hi {
            covered += 1;
        }
    }
    assert!(covered >= 4, "zero inside {covered} of 5 intervals");
    assert!(mean_delta.abs() < 0.05, "mean delta {mean_delta}");
}

#[test]
fn tiny_groups_are_rejected() {
    let a = generate(1, &RegimeConfig::informative(2, 2)).unwrap();
    let b = generate(100, &RegimeConfig::informative(2, 3)).unwrap();
    assert!(robustness_harness(&a, &b, &quick(Variant::Last, 0), &HarnessOptions::default()).is_err());
}
