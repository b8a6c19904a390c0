use deepjoint::autodiff::{Graph, ParamStore, Tensor};
use deepjoint::data::{
    impute_locf_patient_mean, load_dataset, split_random, split_weekday_weekend, write_dataset, NormalizationStats,
    SplitSpec,
};
use deepjoint::encoder::{assemble_inputs, grud_forward, lstm_forward, AssembledInput, GrudParams, InputMode, LstmParams};
use deepjoint::synthgen::{generate, RegimeConfig};
use deepjoint::training::window_records;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn backward_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = store.insert_uniform("w", 3, 2, 1.0, &mut rng);
        let v = store.insert_uniform("v", 2, 1, 1.0, &mut rng);
        let x = Tensor::new(4, 3, (0..12).map(|i| f64::from(i) * 0.1 - 0.5).collect()).unwrap();
        // f = sum(tanh(x w) v), h = sum(softplus(x w)^2)
        let build = |g: &mut Graph, p: &deepjoint::autodiff::ParamBinding| {
            let xv = g.constant(x.clone());
            let z = g.matmul(xv, p[w]).unwrap();
            let t = g.tanh(z).unwrap();
            let f = g.matmul(t, p[v]).unwrap();
            let f = g.sum(f).unwrap();
            let s = g.softplus(z).unwrap();
            let s = g.square(s).unwrap();
            let h = g.sum(s).unwrap();
            (f, h)
        };
        let grads = |pick: Option<(f64, f64)>| {
            let mut g = Graph::new();
            let p = g.bind(&store);
            let (f, h) = build(&mut g, &p);
            let root = match pick {
                Some((a, b)) => {
                    let fa = g.scale(f, a).unwrap();
                    let hb = g.scale(h, b).unwrap();
                    g.add(fa, hb).unwrap()
                }
                None => f,
            };
            g.backward(root).unwrap().params(&g, &p)
        };
        let gf = grads(None);
        let gh = {
            let mut g = Graph::new();
            let p = g.bind(&store);
            let (_, h) = build(&mut g, &p);
            g.backward(h).unwrap().params(&g, &p)
        };
        let combined = grads(Some((a, b)));
        for id in [w, v] {
            for ((c, f), h) in combined.get(id).data().iter().zip(gf.get(id).data()).zip(gh.get(id).data()) {
                prop_assert!((c - (a * f + b * h)).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn parameters_off_the_root_path_get_exact_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let used = store.insert_uniform("used", 2, 2, 1.0, &mut rng);
    let unused = store.insert_uniform("unused", 2, 2, 1.0, &mut rng);
    let mut g = Graph::new();
    let p = g.bind(&store);
    let sq = g.square(p[used]).unwrap();
    let _dangling = g.exp(p[unused]).unwrap();
    let root = g.sum(sq).unwrap();
    let grads = g.backward(root).unwrap().params(&g, &p);
    assert!(grads.get(unused).data().iter().all(|&v| v == 0.0));
    assert!(grads.get(used).data().iter().any(|&v| v != 0.0));
}

fn sample_records(n: usize, seed: u64) -> Vec<deepjoint::data::PatientRecord> {
    window_records(&generate(n, &RegimeConfig::informative(3, seed)).unwrap()).unwrap()
}

#[test]
fn encoders_emit_one_state_per_step_deterministically() {
    let records = sample_records(10, 2);
    let stats = NormalizationStats::fit(&records).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let width = InputMode::Featurized.input_width(3);
    let lstm = LstmParams::init(&mut store, "lstm", width, 5, 2, &mut rng);
    let grud = GrudParams::init(&mut store, "grud", 3, 5, vec![0.0; 3], &mut rng);
    for r in &records {
        let imputed = impute_locf_patient_mean(&stats.apply(r)).unwrap();
        let run = || {
            let mut g = Graph::new();
            let p = g.bind(&store);
            let AssembledInput::Sequence(rows) = assemble_inputs(&imputed, InputMode::Featurized).unwrap() else {
                panic!("featurized input is a sequence");
            };
            let x = g.constant(Tensor::from_rows(&rows).unwrap());
            let seq = lstm_forward(&mut g, &p, &lstm, x).unwrap();
            let AssembledInput::Grud { values, masks, deltas_hours } =
                assemble_inputs(&imputed, InputMode::GrudStyle).unwrap()
            else {
                panic!("grud input");
            };
            let gseq = grud_forward(&mut g, &p, &grud, &values, &masks, &deltas_hours).unwrap();
            assert_eq!(seq.len(), r.n_steps());
            assert_eq!(gseq.len(), r.n_steps());
            let mut bits = Vec::new();
            for &h in seq.hidden.iter().chain(&gseq.hidden) {
                assert_eq!(g.value(h).shape(), [1, 5]);
                bits.extend(g.value(h).data().iter().map(|v| v.to_bits()));
            }
            bits
        };
        assert_eq!(run(), run());
    }
}

#[test]
fn imputation_keeps_observed_entries_and_masks() {
    for r in sample_records(50, 3) {
        let imputed = impute_locf_patient_mean(&r).unwrap();
        assert_eq!(imputed.masks, r.masks);
        assert!(imputed.is_imputed());
        for (a, b) in r.values.iter().flatten().zip(imputed.values.iter().flatten()) {
            if a.is_some() {
                assert_eq!(a, b);
            }
        }
    }
}

#[test]
fn normalization_ignores_held_out_records() {
    let ds = generate(100, &RegimeConfig::informative(3, 5)).unwrap();
    let (train, mut test) = split_random(&ds, &SplitSpec { seed: 3, ..SplitSpec::default() });
    let before = NormalizationStats::fit(&window_records(&train).unwrap()).unwrap();
    for r in &mut test.records {
        for v in r.values.iter_mut().flatten().flatten() {
            *v += 100.0;
        }
    }
    let after = NormalizationStats::fit(&window_records(&train).unwrap()).unwrap();
    assert_eq!(before, after);
}

#[test]
fn weekday_and_weekend_partition_the_cohort() {
    let ds = generate(300, &RegimeConfig::informative(2, 6)).unwrap();
    let (wd, we) = split_weekday_weekend(&ds);
    assert_eq!(wd.len() + we.len(), ds.len());
    assert!(!wd.is_empty() && !we.is_empty());
    let mut ids: Vec<_> = wd.records.iter().chain(&we.records).map(|r| r.id.clone()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), ds.len());
}

#[test]
fn loader_reports_bad_rows_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let l = dir.path().join("l.csv");
    let o = dir.path().join("o.csv");
    std::fs::write(&o, "patient_id,followup_days,event,admission_weekday,admission_hour\na,3.5,1,2,10\nb,0.5,0,1,1\n").unwrap();
    std::fs::write(&l, "patient_id,time_minutes,lab_name,value\na,30,hgb,10.1\nc,40,hgb,9\n").unwrap();
    let err = load_dataset(&l, &o).unwrap_err().to_string();
    assert!(err.contains("o.csv:3"), "{err}");
    assert!(err.contains("l.csv:3"), "{err}");

    let ds = generate(5, &RegimeConfig::informative(2, 0)).unwrap();
    write_dataset(&ds, &l, &o).unwrap();
    assert_eq!(load_dataset(&l, &o).unwrap().lab_names, ds.lab_names);
}
