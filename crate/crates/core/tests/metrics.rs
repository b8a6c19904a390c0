use deepjoint::eval::{bootstrap_ci, brier_td, c_index_td, km_censoring, PredictionSet, G_FLOOR};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HORIZONS: [f64; 3] = [1.0, 7.0, 14.0];

/// Product-limit censoring survival, quadratic in n. `strict` gives G(t-).
fn brute_g(times: &[f64], events: &[bool], t: f64, strict: bool) -> f64 {
    let mut cuts: Vec<f64> = times
        .iter()
        .zip(events)
        .filter(|(&s, &e)| !e && if strict { s < t } else { s <= t })
        .map(|(&s, _)| s)
        .collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    cuts.iter()
        .map(|&s| {
            let at_risk = times.iter().filter(|&&x| x >= s).count() as f64;
            let censored = times.iter().zip(events).filter(|(&x, &e)| x == s && !e).count() as f64;
            1.0 - censored / at_risk
        })
        .product()
}

fn brute_c_index(p: &PredictionSet, h: usize) -> Option<f64> {
    let tau = p.horizons[h];
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..p.len() {
        if !p.events[i] || p.times[i] > tau {
            continue;
        }
        let w = 1.0 / brute_g(&p.times, &p.events, p.times[i], true).max(G_FLOOR).powi(2);
        for j in 0..p.len() {
            if p.times[i] < p.times[j] {
                den += w;
                let (ri, rj) = (p.risks[i][h], p.risks[j][h]);
                num += w * if ri > rj { 1.0 } else if ri == rj { 0.5 } else { 0.0 };
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

fn brute_brier(p: &PredictionSet, h: usize) -> f64 {
    let tau = p.horizons[h];
    let g_tau = brute_g(&p.times, &p.events, tau, false).max(G_FLOOR);
    let mut total = 0.0;
    for i in 0..p.len() {
        let s = 1.0 - p.risks[i][h];
        if p.times[i] <= tau && p.events[i] {
            total += s * s / brute_g(&p.times, &p.events, p.times[i], true).max(G_FLOOR);
        }
        if p.times[i] > tau {
            total += (1.0 - s).powi(2) / g_tau;
        }
    }
    total / p.len() as f64
}

/// Times on a coarse grid so ties in time occur; risks partly tied too.
fn random_instance(rng: &mut ChaCha8Rng, censoring: bool) -> PredictionSet {
    let n = rng.random_range(2..=50);
    let times: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(1..=40u32)) * 0.5).collect();
    let events: Vec<bool> = (0..n).map(|_| !censoring || rng.random_bool(0.6)).collect();
    let risks = (0..n)
        .map(|_| {
            let mut r: Vec<f64> = (0..3).map(|_| f64::from(rng.random_range(0..20u32)) / 19.0).collect();
            r.sort_by(f64::total_cmp);
            r
        })
        .collect();
    PredictionSet::new(HORIZONS.to_vec(), risks, times, events).unwrap()
}

#[test]
fn metrics_match_brute_force_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut compared = 0;
    for censoring in [false, true] {
        for _ in 0..100 {
            let p = random_instance(&mut rng, censoring);
            for (h, &tau) in HORIZONS.iter().enumerate() {
                match (c_index_td(&p, tau), brute_c_index(&p, h)) {
                    (Ok(fast), Some(slow)) => {
                        assert!((fast - slow).abs() <= 1e-12, "c-index {fast} vs {slow}");
                        compared += 1;
                    }
                    (Err(_), None) => {}
                    (a, b) => panic!("definedness disagrees: {a:?} vs {b:?}"),
                }
                if brute_g(&p.times, &p.events, tau, false) > 0.0 {
                    let fast = brier_td(&p, tau).unwrap();
                    assert!((fast - brute_brier(&p, h)).abs() <= 1e-12);
                } else {
                    assert!(brier_td(&p, tau).is_err());
                }
            }
        }
    }
    assert!(compared > 400);
}

#[test]
fn km_matches_product_limit() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let p = random_instance(&mut rng, true);
        let g = km_censoring(&p.times, &p.events);
        for k in 0..45 {
            let t = f64::from(k) * 0.5;
            assert!((g.at(t) - brute_g(&p.times, &p.events, t, false)).abs() < 1e-14);
            assert!((g.before(t) - brute_g(&p.times, &p.events, t, true)).abs() < 1e-14);
        }
    }
}

#[test]
fn c_index_is_antisymmetric_without_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let n = rng.random_range(5..40);
        let times: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..20.0)).collect();
        let events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        let risks: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(0.0..1.0)]).collect();
        let flipped = risks.iter().map(|r| vec![1.0 - r[0]]).collect();
        let a = PredictionSet::new(vec![14.0], risks, times.clone(), events.clone()).unwrap();
        let b = PredictionSet::new(vec![14.0], flipped, times, events).unwrap();
        if let Ok(c) = c_index_td(&a, 14.0) {
            assert!((c + c_index_td(&b, 14.0).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn uncensored_brier_is_mean_squared_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let p = random_instance(&mut rng, false);
        for (h, &tau) in HORIZONS.iter().enumerate() {
            let mse = p
                .times
                .iter()
                .zip(&p.risks)
                .map(|(&t, r)| {
                    let alive = if t > tau { 1.0 } else { 0.0 };
                    (alive - (1.0 - r[h])).powi(2)
                })
                .sum::<f64>()
                / p.len() as f64;
            assert!((brier_td(&p, tau).unwrap() - mse).abs() < 1e-12);
        }
    }
}

#[test]
fn bootstrap_interval_narrows_with_more_patients() {
    let sample = |n: usize, seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut risks = Vec::new();
        let mut times = Vec::new();
        let mut events = Vec::new();
        for _ in 0..n {
            let x: f64 = rng.random_range(-1.0..1.0);
            let t = -(1.0 - rng.random::<f64>()).ln() / (0.1 * (1.5 * x).exp());
            let c = rng.random_range(5.0..30.0);
            times.push(t.min(c));
            events.push(t <= c);
            risks.push(vec![1.0 / (1.0 + (-x).exp())]);
        }
        PredictionSet::new(vec![7.0], risks, times, events).unwrap()
    };
    let mut narrower = 0;
    for seed in 0..5 {
        let small = bootstrap_ci(|p| c_index_td(p, 7.0), &sample(100, seed), 100, seed).unwrap();
        let large = bootstrap_ci(|p| c_index_td(p, 7.0), &sample(1000, seed + 100), 100, seed).unwrap();
        if large.hi - large.lo < small.hi - small.lo {
            narrower += 1;
        }
    }
    assert_eq!(narrower, 5);
}

proptest! {
    #[test]
    fn metrics_ignore_patient_order(seed in 0u64..10_000, rot in 1usize..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_instance(&mut rng, true);
        let mut idx: Vec<usize> = (0..p.len()).collect();
        idx.rotate_left(rot % p.len());
        idx.reverse();
        let q = p.subset(&idx);
        for &tau in &HORIZONS {
            match (c_index_td(&p, tau), c_index_td(&q, tau)) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "definedness changed under reordering"),
            }
            if let Ok(a) = brier_td(&p, tau) {
                prop_assert!((a - brier_td(&q, tau).unwrap()).abs() < 1e-12);
            }
        }
    }
}
