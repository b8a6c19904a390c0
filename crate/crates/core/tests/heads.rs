use deepjoint::autodiff::{finite_difference_check, AdamConfig, AdamState, Graph, ParamStore, Tensor};
use deepjoint::heads::{
    breslow_baseline, cox_partial_nll, cumulative_hazard, intensity, survival_curve, tpp_nll, SurvivalEstimate,
    TemporalHeadParams,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// A temporal head with every parameter redrawn from a wide normal.
fn random_temporal(seed: u64, embed: usize, layers: usize, nodes: usize) -> (ParamStore, TemporalHeadParams, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let head = TemporalHeadParams::init(&mut store, embed, layers, nodes, &mut rng);
    let normal = Normal::new(0.0, 1.5).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = normal.sample(&mut rng);
        }
    }
    let h = Tensor::row((0..embed).map(|_| normal.sample(&mut rng)).collect());
    (store, head, h)
}

fn hazard_grid(store: &ParamStore, head: &TemporalHeadParams, h: &Tensor, grid: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let p = g.bind(store);
    let rows: Vec<Vec<f64>> = grid.iter().map(|_| h.row_slice(0).to_vec()).collect();
    let hv = g.constant(Tensor::from_rows(&rows).unwrap());
    let tv = g.constant(Tensor::column(grid.to_vec()));
    let (lam, rate) = head.hazard(&mut g, &p, hv, tv).unwrap();
    (g.value(lam).data().to_vec(), g.value(rate).data().to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn temporal_head_is_a_valid_cumulative_hazard(seed in any::<u64>(), layers in 1usize..4) {
        let (store, head, h) = random_temporal(seed, 4, layers, 8);
        let grid: Vec<f64> = (0..100).map(|k| f64::from(k) * 0.25).collect();
        let (lam, rate) = hazard_grid(&store, &head, &h, &grid);
        prop_assert_eq!(lam[0], 0.0);
        prop_assert_eq!(cumulative_hazard(&store, &head, &h, 0.0).unwrap(), 0.0);
        for w in lam.windows(2) {
            prop_assert!(w[1] >= w[0]);
        }
        for (&l, &r) in lam.iter().zip(&rate) {
            prop_assert!(r >= 0.0);
            let s = (-l).exp();
            prop_assert!(s > 0.0 && s <= 1.0);
        }
    }
}

#[test]
fn intensity_is_the_time_derivative() {
    for seed in 0..20 {
        let (store, head, h) = random_temporal(seed, 3, 2, 6);
        for &t in &[0.05, 0.7, 3.0, 12.0] {
            let eps = 1e-6;
            let fd = (cumulative_hazard(&store, &head, &h, t + eps).unwrap()
                - cumulative_hazard(&store, &head, &h, t - eps).unwrap())
                / (2.0 * eps);
            let exact = intensity(&store, &head, &h, t).unwrap();
            assert!((fd - exact).abs() <= 1e-6 * exact.abs().max(1.0), "{fd} vs {exact}");
        }
    }
}

#[test]
fn tpp_nll_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for layers in 1..=3 {
        let mut store = ParamStore::new();
        let head = TemporalHeadParams::init(&mut store, 3, layers, 5, &mut rng);
        let hs = Tensor::new(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let gaps = Tensor::column(vec![0.25, 1.5, 0.75, 4.0]);
        let report = finite_difference_check(
            |g, p| {
                let h = g.constant(hs.clone());
                let t = g.constant(gaps.clone());
                tpp_nll(g, p, &head, h, t)
            },
            &store,
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "layers {layers}: max rel err {}", report.max_rel_err());
    }
}

/// Proportional hazards data with one covariate and distinct times.
fn ph_sample(n: usize, beta: f64, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut x = Vec::with_capacity(n);
    let mut times = Vec::with_capacity(n);
    let mut events = Vec::with_capacity(n);
    for _ in 0..n {
        let xi: f64 = normal.sample(&mut rng);
        let t = -(1.0 - rng.random::<f64>()).ln() / (0.2 * (beta * xi).exp());
        let c = rng.random_range(0.5..15.0);
        x.push(xi);
        times.push(t.min(c));
        events.push(t <= c);
    }
    (x, times, events)
}

/// Newton-Raphson on the partial likelihood written as explicit sums.
fn newton_beta(x: &[f64], times: &[f64], events: &[bool]) -> f64 {
    let mut beta = 0.0;
    for _ in 0..50 {
        let (mut grad, mut hess) = (0.0, 0.0);
        for i in (0..x.len()).filter(|&i| events[i]) {
            let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
            for k in (0..x.len()).filter(|&k| times[k] >= times[i]) {
                let w = (beta * x[k]).exp();
                s0 += w;
                s1 += w * x[k];
                s2 += w * x[k] * x[k];
            }
            let m = s1 / s0;
            grad += m - x[i];
            hess += s2 / s0 - m * m;
        }
        let step = grad / hess;
        beta -= step;
        if step.abs() < 1e-14 {
            break;
        }
    }
    beta
}

#[test]
fn cox_adam_fit_matches_newton() {
    let (x, times, events) = ph_sample(500, 0.8, 42);
    let target = newton_beta(&x, &times, &events);

    let mut store = ParamStore::new();
    let beta = store.insert("beta", Tensor::scalar(0.0));
    let xs = Tensor::column(x.clone());
    let mut adam = AdamState::new(&store, AdamConfig { lr: 0.05, ..AdamConfig::default() });
    for lr in [0.05, 5e-3, 5e-4, 5e-5] {
        adam.config.lr = lr;
        for _ in 0..600 {
            let mut g = Graph::new();
            let p = g.bind(&store);
            let xv = g.constant(xs.clone());
            let scores = g.matmul(xv, p[beta]).unwrap();
            let loss = cox_partial_nll(&mut g, scores, &times, &events).unwrap();
            let grads = g.backward(loss.value).unwrap().params(&g, &p);
            adam.step(&mut store, &grads, &[beta]).unwrap();
        }
    }
    let fitted = store.get(beta).item().unwrap();
    assert!((fitted - target).abs() < 1e-4, "adam {fitted} vs newton {target}");
    assert!((target - 0.8).abs() < 0.2);
}

#[test]
fn survival_curves_are_proper() {
    let (x, times, events) = ph_sample(300, 1.0, 9);
    let scores: Vec<f64> = x.iter().map(|v| 0.9 * v).collect();
    let baseline = breslow_baseline(&scores, &times, &events).unwrap();
    let horizons: Vec<f64> = (0..60).map(|k| f64::from(k) * 0.25).collect();
    for &s in &scores {
        let curve = survival_curve(&SurvivalEstimate { risk_score: s, baseline: &baseline }, &horizons);
        assert_eq!(curve[0], 1.0);
        assert!(curve.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(curve.windows(2).all(|w| w[1] <= w[0]));
    }
}
