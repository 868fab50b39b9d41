use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volseg::data::{channels_to_labels, labels_to_channels, Volume, VolumeKind, LABELS};
use volseg::losses::{hybrid_loss, LossConfig};
use volseg::network::{build_model, count_parameters, forward, forward_traced, shape_plan, ModelConfig, NormConfig};
use volseg::optim::{apply_l2, poly_lr, ScheduleConfig};
use volseg::{Mode, Tape, Tensor};

fn norm_strategy() -> impl Strategy<Value = NormConfig> {
    prop_oneof![
        Just(NormConfig::Group { size: 2 }),
        Just(NormConfig::GroupCount { groups: 2 }),
        Just(NormConfig::Instance),
        Just(NormConfig::Batch { momentum: 0.1 }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_shapes_follow_plan(
        init_filters in prop::sample::select(vec![2usize, 4]),
        blocks in prop::collection::vec(1usize..3, 1..4),
        norm in norm_strategy(),
        mult in prop::array::uniform3(1usize..3),
        batch in 1usize..3,
        seed in any::<u64>(),
    ) {
        let cfg = ModelConfig { init_filters, blocks_per_level: blocks, norm, ..ModelConfig::default() };
        let k = cfg.spatial_divisor();
        let ext = mult.map(|m| m * k.max(2));
        let cfg = ModelConfig { input_crop: ext, ..cfg };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = build_model::<f32, _>(&cfg, &mut rng).unwrap();
        prop_assert_eq!(count_parameters(&store), store.params.iter().map(|p| p.value.numel()).sum::<usize>());
        let mut tape = Tape::inference();
        let vars = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_fn(vec![batch, 4, ext[0], ext[1], ext[2]], |_| rng.random_range(-1.0..1.0)));
        let trace = forward_traced(&mut tape, &mut store, &vars, x, Mode::Train, &mut rng).unwrap();
        let plan = shape_plan(&cfg, [4, ext[0], ext[1], ext[2]]).unwrap();
        prop_assert_eq!(trace.layers.len(), plan.len());
        for ((name, shape), row) in trace.layers.iter().zip(&plan) {
            prop_assert_eq!(name, &row.layer);
            prop_assert_eq!(shape[0], batch);
            prop_assert_eq!(&shape[1..], &row.shape[..]);
        }
    }

    #[test]
    fn labels_channels_round_trip(
        ext in prop::array::uniform3(1usize..6),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = ext.iter().product();
        let data = (0..n).map(|_| LABELS[rng.random_range(0..4)] as f32).collect();
        let label = Volume::new(1, ext, [1.0, 1.5, 2.0], data, VolumeKind::LabelMap).unwrap();
        let ch = labels_to_channels(&label).unwrap();
        let probs = Tensor::new(vec![3, ext[0], ext[1], ext[2]], ch.data.clone()).unwrap();
        prop_assert_eq!(channels_to_labels(&probs, label.spacing, 0.5).unwrap(), label);
    }

    #[test]
    fn poly_lr_non_increasing(total in 1usize..500, alpha0 in 1e-6f64..1e-1) {
        let cfg = ScheduleConfig { alpha0, total_epochs: total, ..ScheduleConfig::default() };
        let lrs: Vec<f64> = (0..=total).map(|e| poly_lr(e, &cfg).unwrap()).collect();
        prop_assert_eq!(lrs[0], alpha0);
        prop_assert_eq!(lrs[total], 0.0);
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}

/// `apply_l2` equals the tape gradient of `L + lambda * sum ||w||^2` over kernels.
#[test]
fn l2_matches_augmented_objective() {
    let cfg = ModelConfig { init_filters: 2, blocks_per_level: vec![1, 1], input_crop: [4, 4, 4], norm: NormConfig::Instance, ..ModelConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let store = build_model::<f64, _>(&cfg, &mut rng).unwrap();
    let x = Tensor::from_fn(vec![1, 4, 4, 4, 4], |_| rng.random_range(-1.0..1.0));
    let truth = Tensor::from_fn(vec![1, 3, 4, 4, 4], |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
    let lambda = 0.37;
    for include_pointwise in [true, false] {
        let grads = |augment: bool| {
            let mut s = store.clone();
            let mut tape = Tape::new();
            let vars = s.bind(&mut tape);
            let xi = tape.constant(x.clone());
            let out = forward(&mut tape, &mut s, &vars, xi, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let tr = tape.constant(truth.clone());
            let mut total = hybrid_loss(&mut tape, out, tr, &LossConfig::default()).unwrap().total;
            if augment {
                let mut terms = vec![(total, 1.0)];
                for (p, &v) in store.params.iter().zip(&vars) {
                    if p.kind.is_kernel() && (include_pointwise || p.value.shape()[2..] != [1, 1, 1]) {
                        let sq = tape.mul(v, v).unwrap();
                        terms.push((tape.sum(sq).unwrap(), lambda));
                    }
                }
                total = tape.weighted_sum(&terms).unwrap();
            }
            tape.backward(total).unwrap();
            s.gradients(&mut tape, &vars).unwrap()
        };
        let mut coupled = grads(false);
        apply_l2(&store, &mut coupled, lambda, include_pointwise).unwrap();
        let augmented = grads(true);
        for (a, b) in coupled.iter().zip(&augmented) {
            assert!(a.max_abs_diff(b) <= 1e-12, "pointwise {include_pointwise}: {}", a.max_abs_diff(b));
        }
    }
}
