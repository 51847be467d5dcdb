//! Invariants that hold for arbitrary inputs.

use indexmap::IndexMap;
use lhgnn_core::audio::{mel_energies, AudioClip, FeatureStats, SAMPLE_RATE};
use lhgnn_core::clustering::{fuzzy_cmeans, memberships};
use lhgnn_core::knn::knn;
use lhgnn_core::lhg::max_relative;
use lhgnn_core::model::{Checkpoint, ForwardCtx, Lhgnn};
use lhgnn_core::train::{
    adamw_step, average_checkpoints, mean_average_precision, mixup, OptimConfig, OptimState,
};
use lhgnn_core::{ModelConfig, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn nodes_strategy(max_n: usize, max_c: usize) -> impl Strategy<Value = Tensor<f64>> {
    (4..=max_n, 1..=max_c).prop_flat_map(|(n, c)| {
        prop::collection::vec(-5.0f64..5.0, n * c)
            .prop_map(move |d| Tensor::from_vec(&[n, c], d).unwrap())
    })
}

fn lattice_strategy() -> impl Strategy<Value = Tensor<f64>> {
    (4usize..40, 1usize..6).prop_flat_map(|(n, c)| {
        prop::collection::vec(-20i32..20, n * c).prop_map(move |d| {
            Tensor::from_vec(&[n, c], d.into_iter().map(f64::from).collect()).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn membership_rows_are_distributions(x in nodes_strategy(64, 8), p in 2usize..6) {
        let p = p.min(x.shape()[0]);
        let (state, set) = fuzzy_cmeans(&x, p, 1, 2.0, 2).unwrap();
        for i in 0..x.shape()[0] {
            let row = state.memberships.row(i);
            prop_assert!(row.iter().all(|&u| (0.0..=1.0).contains(&u)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert_eq!(set.of(i).len(), 1);
        }
        let again = memberships(&x, &state.centroids, 2.0).unwrap();
        prop_assert_eq!(&again, &state.memberships);
    }

    #[test]
    fn knn_is_permutation_equivariant(x in nodes_strategy(48, 6), seed in any::<u64>()) {
        let n = x.shape()[0];
        let k = 3.min(n - 1);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        // row perm[i] of the shuffled matrix is row i of the original
        let mut inverse = vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let shuffled = x.select_rows(&inverse);
        let a = knn(&x, k).unwrap();
        let b = knn(&shuffled, k).unwrap();
        for i in 0..n {
            let mapped: Vec<usize> = b.of(perm[i]).iter().map(|&j| inverse[j]).collect();
            prop_assert_eq!(a.of(i), mapped.as_slice());
        }
    }

    #[test]
    fn knn_and_max_relative_ignore_translation(x in lattice_strategy(), shift in prop::collection::vec(-50i32..50, 6)) {
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let moved = Tensor::from_vec(&[n, c], x.data().iter().enumerate().map(|(i, &v)| v + shift[i % c] as f64).collect()).unwrap();
        let k = 2.min(n - 1);
        prop_assert_eq!(knn(&x, k).unwrap(), knn(&moved, k).unwrap());
        let others = x.select_rows(&[1, 2, 3]);
        let moved_others = moved.select_rows(&[1, 2, 3]);
        let center = Tensor::from_vec(&[c], x.row(0).to_vec()).unwrap();
        let moved_center = Tensor::from_vec(&[c], moved.row(0).to_vec()).unwrap();
        prop_assert_eq!(max_relative(&center, &others).unwrap(), max_relative(&moved_center, &moved_others).unwrap());
    }

    #[test]
    fn map_is_invariant_under_monotone_transforms(
        s in 2usize..40, k in 1usize..6, seed in any::<u64>(), scale in 1i32..9, offset in -100i32..100,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f32> = (0..s * k).map(|_| rng.gen_range(0..1000) as f32).collect();
        let mut targets: Vec<f32> = (0..s * k).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        targets[0] = 1.0;
        let moved: Vec<f32> = scores.iter().map(|&v| scale as f32 * v + offset as f32).collect();
        let t = Tensor::from_vec(&[s, k], targets).unwrap();
        let a = mean_average_precision(&Tensor::from_vec(&[s, k], scores).unwrap(), &t).unwrap();
        let b = mean_average_precision(&Tensor::from_vec(&[s, k], moved).unwrap(), &t).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn mixup_preserves_label_mass(
        ya in prop::collection::vec(0u8..2, 8), yb in prop::collection::vec(0u8..2, 8), lambda in 0.0f64..=1.0,
    ) {
        let ya: Vec<f32> = ya.into_iter().map(f32::from).collect();
        let yb: Vec<f32> = yb.into_iter().map(f32::from).collect();
        let x = Tensor::zeros(&[2, 2]);
        let (_, y) = mixup((&x, &ya), (&x, &yb), lambda).unwrap();
        let want = lambda * ya.iter().sum::<f32>() as f64 + (1.0 - lambda) * yb.iter().sum::<f32>() as f64;
        prop_assert!((y.iter().sum::<f32>() as f64 - want).abs() < 1e-5);
    }

    #[test]
    fn checkpoint_averaging_is_linear(
        vals in prop::collection::vec(-10.0f32..10.0, 12), wa in 0.05f64..1.0, wb in 0.05f64..1.0, wc in 0.05f64..1.0,
    ) {
        let ck = |v: &[f32]| {
            let mut tensors = IndexMap::new();
            tensors.insert("t".to_string(), Tensor::from_vec(&[4], v.to_vec()).unwrap());
            Checkpoint { config: serde_json::Value::Null, tensors }
        };
        let (a, b, c) = (ck(&vals[..4]), ck(&vals[4..8]), ck(&vals[8..]));
        let total = wa + wb + wc;
        let (wa, wb, wc) = (wa / total, wb / total, wc / total);
        let ab = average_checkpoints(&[a.clone(), b.clone()], &[wa / (wa + wb), wb / (wa + wb)]).unwrap();
        let nested = average_checkpoints(&[ab, c.clone()], &[wa + wb, wc]).unwrap();
        let direct = average_checkpoints(&[a, b, c], &[wa, wb, wc]).unwrap();
        prop_assert!(nested.tensors["t"].max_abs_diff(&direct.tensors["t"]) < 1e-5);
    }

    #[test]
    fn mel_energy_scales_with_amplitude_squared(seed in any::<u64>(), alpha in 0.1f32..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<f32> = (0..2000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let clip = |s: Vec<f32>| AudioClip { samples: s, sample_rate: SAMPLE_RATE };
        let base = mel_energies(&clip(samples.clone())).unwrap();
        let scaled = mel_energies(&clip(samples.iter().map(|v| v * alpha).collect())).unwrap();
        let a2 = alpha * alpha;
        for (b, s) in base.data().iter().zip(scaled.data()) {
            prop_assert!((s - a2 * b).abs() <= 1e-4 * (a2 * b).abs() + 1e-9);
        }
    }
}

#[test]
fn normalized_features_have_zero_mean_unit_std() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let clips: Vec<Tensor<f32>> = (0..6)
        .map(|_| {
            Tensor::from_vec(
                &[32, 8],
                (0..256).map(|_| rng.gen_range(-9.0f32..-2.0)).collect(),
            )
            .unwrap()
        })
        .collect();
    let stats = FeatureStats::compute(clips.len(), |i| Ok(clips[i].clone())).unwrap();
    let all: Vec<f64> = clips
        .iter()
        .flat_map(|c| {
            c.data()
                .iter()
                .map(|&v| ((v - stats.mean) / stats.std) as f64)
                .collect::<Vec<_>>()
        })
        .collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let std = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
    assert!(mean.abs() < 0.01, "{mean}");
    assert!((std - 1.0).abs() < 0.01, "{std}");
}

#[test]
fn adamw_descends_a_quadratic_bowl() {
    let curv = [0.5, 1.0, 3.0, 10.0];
    let mut store = ParamStore::new();
    store
        .insert(
            "w",
            Tensor::from_vec(&[4], vec![1.0, -2.0, 0.7, -0.9]).unwrap(),
            true,
        )
        .unwrap();
    let cfg = OptimConfig {
        weight_decay: 0.0,
        ..OptimConfig::default()
    };
    let mut state = OptimState::new(&store, cfg);
    let loss = |s: &ParamStore<f64>| {
        s.get("w")
            .unwrap()
            .data()
            .iter()
            .zip(curv)
            .map(|(w, a)| 0.5 * a * w * w)
            .sum::<f64>()
    };
    let mut prev = loss(&store);
    for step in 0..100 {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(&store, "w").unwrap();
        let a = tape
            .constant(Tensor::from_vec(&[4], curv.iter().map(|a| a / 2.0).collect()).unwrap())
            .unwrap();
        let sq = tape.mul(w, w).unwrap();
        let weighted = tape.mul(sq, a).unwrap();
        let l = tape.sum(weighted).unwrap();
        let grads = tape.backward(l, &store).unwrap();
        adamw_step(&mut store, &grads, &mut state, 1e-3).unwrap();
        let now = loss(&store);
        assert!(now < prev, "step {step}: {now} ≥ {prev}");
        prev = now;
    }
}

#[test]
fn zeroed_projections_make_a_block_the_identity() {
    let model = Lhgnn::new(ModelConfig::tiny(3)).unwrap();
    let mut store = model.init_params::<f32>(8).unwrap();
    let p = "stages.1.blocks.0";
    for suffix in [
        "graph.proj.weight",
        "graph.proj.bias",
        "ffn.proj.weight",
        "ffn.proj.bias",
    ] {
        let name = format!("{p}.{suffix}");
        let shape = store.get(&name).unwrap().shape().to_vec();
        store.set(&name, Tensor::zeros(&shape)).unwrap();
    }
    let geo = &model.stages()[1];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 2 * geo.height * geo.width * geo.channels;
    let x = Tensor::from_vec(
        &[2, geo.height, geo.width, geo.channels],
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let mut tape = Tape::inference();
    let mut ctx = ForwardCtx::train();
    let xv = tape.constant(x.clone()).unwrap();
    let y = model
        .lhg_block(&mut tape, &store, &mut ctx, 1, 0, xv)
        .unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn stem_parameter_count_has_a_closed_form() {
    for stem in [vec![4, 4, 8, 8], vec![40, 40, 80, 8], vec![3, 5, 7, 8]] {
        let mut cfg = ModelConfig::tiny(3);
        cfg.stem_channels = stem.clone();
        let model = Lhgnn::new(cfg).unwrap();
        let store = model.init_params::<f32>(0).unwrap();
        let counted: usize = store
            .iter()
            .filter(|(n, e)| n.starts_with("stem.") && e.requires_grad)
            .map(|(_, e)| e.tensor.len())
            .sum();
        let mut cin = 1;
        let mut want = 0;
        for c in stem {
            want += 9 * cin * c + c + 2 * c;
            cin = c;
        }
        assert_eq!(counted, want);
    }
}

#[test]
fn forward_is_deterministic() {
    let model = Lhgnn::new(ModelConfig::tiny(4)).unwrap();
    let store = model.init_params::<f32>(3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_vec(
        &[3, 64, 16, 1],
        (0..3 * 64 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let run = || {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::train();
        let xv = tape.constant(x.clone()).unwrap();
        let y = model.forward(&mut tape, &store, &mut ctx, xv).unwrap();
        tape.value(y)
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
    assert_eq!(
        model.predict(&store, x.clone()).unwrap(),
        model.predict(&store, x).unwrap()
    );
}
