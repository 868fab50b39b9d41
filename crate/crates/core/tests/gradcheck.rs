use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volseg::autodiff::{ConvAlgo, RunningStats};
use volseg::gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
use volseg::losses::{hybrid_loss, LossConfig, Reduction};
use volseg::network::{build_model, forward, ModelConfig, NormConfig};
use volseg::{Mode, Result, Tape, Tensor, Var};

const TOL: f64 = 1e-4;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values in `±[0.1, 1)`, away from kinks at zero.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

fn binary(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
}

/// Scalar `sum(y * w)` with a fixed random `w`.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(uniform(&shape, -1.0, 1.0, &mut rng));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn check(name: &str, inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> GradcheckReport {
    let r = gradcheck(inputs, f, GradcheckOptions::default()).unwrap();
    assert!(r.passes(TOL), "{name}: max rel err {} at {:?}", r.max_rel_err, r.worst);
    assert!(r.checked > 0);
    r
}

#[test]
fn conv3d_both_algorithms() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = uniform(&[2, 3, 4, 6, 4], -1.0, 1.0, &mut rng);
    let k = uniform(&[4, 3, 3, 3, 3], -1.0, 1.0, &mut rng);
    let b = uniform(&[4], -1.0, 1.0, &mut rng);
    for algo in [ConvAlgo::Direct, ConvAlgo::Blocked] {
        for (stride, padding) in [(1, 1), (2, 1), (1, 0)] {
            check(&format!("conv {algo:?} s{stride} p{padding}"), &[x.clone(), k.clone(), b.clone()], |t, v| {
                t.set_conv_algo(algo);
                let y = t.conv3d(v[0], v[1], Some(v[2]), stride, padding)?;
                project(t, y, 7)
            });
        }
    }
}

#[test]
fn pointwise_conv_without_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = uniform(&[1, 5, 3, 3, 3], -1.0, 1.0, &mut rng);
    let k = uniform(&[2, 5, 1, 1, 1], -1.0, 1.0, &mut rng);
    check("conv1x1x1", &[x, k], |t, v| {
        let y = t.conv1x1x1(v[0], v[1], None)?;
        project(t, y, 3)
    });
}

#[test]
fn normalizations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = uniform(&[2, 4, 3, 2, 3], -2.0, 2.0, &mut rng);
    let g = uniform(&[4], 0.5, 1.5, &mut rng);
    let b = uniform(&[4], -0.5, 0.5, &mut rng);
    let inputs = [x, g, b];
    check("group_norm", &inputs, |t, v| {
        let y = t.group_norm(v[0], 2, v[1], v[2], 1e-5)?;
        project(t, y, 11)
    });
    check("instance_norm", &inputs, |t, v| {
        let y = t.instance_norm(v[0], v[1], v[2], 1e-5)?;
        project(t, y, 12)
    });
    check("batch_norm", &inputs, |t, v| {
        let mut stats = RunningStats::new(4, 0.1);
        let y = t.batch_norm(v[0], v[1], v[2], 1e-5, Mode::Train, &mut stats)?;
        project(t, y, 13)
    });
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = away_from_zero(&[2, 3, 4], &mut rng);
    let b = uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
    check("relu", &[a.clone()], |t, v| {
        let y = t.relu(v[0])?;
        project(t, y, 1)
    });
    check("sigmoid", &[b.clone()], |t, v| {
        let y = t.sigmoid(v[0])?;
        project(t, y, 2)
    });
    check("add", &[a.clone(), b.clone()], |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, 3)
    });
    check("mul", &[a.clone(), b.clone()], |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, 4)
    });
    check("weighted_sum", &[a, b], |t, v| {
        let (sa, sb) = (project(t, v[0], 5)?, project(t, v[1], 6)?);
        let sq = t.mul(sa, sb)?;
        t.weighted_sum(&[(sa, 0.5), (sb, -2.0), (sq, 1.5)])
    });
}

#[test]
fn upsample_and_dropout() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = uniform(&[1, 2, 3, 2, 4], -1.0, 1.0, &mut rng);
    check("upsample", &[x.clone()], |t, v| {
        let y = t.upsample_trilinear2x(v[0])?;
        project(t, y, 8)
    });
    let x = uniform(&[2, 6, 2, 2, 2], -1.0, 1.0, &mut rng);
    check("spatial_dropout", &[x], |t, v| {
        let y = t.spatial_dropout(v[0], 0.5, Mode::Train, &mut ChaCha8Rng::seed_from_u64(9))?;
        project(t, y, 9)
    });
}

#[test]
fn loss_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let shape = [1, 3, 4, 3, 5];
    let pred = uniform(&shape, 0.05, 0.95, &mut rng);
    let truth = binary(&shape, &mut rng);
    let cfg = LossConfig::default();
    let with_truth = |f: fn(&mut Tape<f64>, Var, Var) -> Result<Var>| {
        let truth = truth.clone();
        move |t: &mut Tape<f64>, v: &[Var]| {
            let tr = t.constant(truth.clone());
            f(t, v[0], tr)
        }
    };
    check("soft_dice", &[pred.clone()], with_truth(|t, p, q| t.soft_dice_loss(p, q, 1e-5)));
    check("focal", &[pred.clone()], with_truth(|t, p, q| t.focal_loss(p, q, 2.0, 1e-8, false)));
    check("focal symmetric", &[pred.clone()], with_truth(|t, p, q| t.focal_loss(p, q, 2.0, 1e-8, true)));
    check("acl_volume", &[pred.clone()], with_truth(|t, p, q| t.acl_volume(p, q, 1.0, 0.0, 1.0)));
    check("acl_length", &[pred.clone()], |t, v| t.acl_length(v[0], 1e-8, 1.0));
    for reduction in [Reduction::Sum, Reduction::MeanPerVoxel] {
        let cfg = LossConfig { reduction, ..cfg.clone() };
        check("hybrid", &[pred.clone()], |t, v| {
            let tr = t.constant(truth.clone());
            Ok(hybrid_loss(t, v[0], tr, &cfg)?.total)
        });
    }
}

#[test]
fn tiny_model_end_to_end() {
    let cfg = ModelConfig {
        init_filters: 4,
        norm: NormConfig::GroupCount { groups: 2 },
        input_crop: [8, 8, 8],
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let store = build_model::<f64, _>(&cfg, &mut rng).unwrap();
    let x = uniform(&[1, 4, 8, 8, 8], -1.0, 1.0, &mut rng);
    let truth = binary(&[1, 3, 8, 8, 8], &mut rng);
    let loss_cfg = LossConfig::default();
    let inputs: Vec<Tensor<f64>> = store.params.iter().map(|p| p.value.clone()).collect();
    let f = |t: &mut Tape<f64>, v: &[Var]| {
        let mut s = store.clone();
        let input = t.constant(x.clone());
        let out = forward(t, &mut s, v, input, Mode::Train, &mut ChaCha8Rng::seed_from_u64(11))?;
        let tr = t.constant(truth.clone());
        Ok(hybrid_loss(t, out, tr, &loss_cfg)?.total)
    };
    let opts = GradcheckOptions { max_elements: Some(12), ..GradcheckOptions::default() };
    let r = gradcheck(&inputs, f, opts).unwrap();
    assert!(r.passes(TOL), "tiny model: max rel err {} at {:?}", r.max_rel_err, r.worst);
    assert!(r.checked >= inputs.len());
}
