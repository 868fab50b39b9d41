//! One PASS/FAIL line per acceptance criterion; exits non-zero if any fails.
//!
//! `VOLSEG_ACCEPTANCE_ONLY=1,7` restricts the run to the listed criteria.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volseg::autodiff::{ConvAlgo, RunningStats};
use volseg::checkpoint::Checkpoint;
use volseg::data::{
    channels_to_labels, labels_to_channels, read_native, read_nifti, write_native, write_nifti, NiftiDType, Volume,
    VolumeKind,
};
use volseg::gradcheck::{gradcheck, GradcheckOptions};
use volseg::losses::{hybrid_loss, LossConfig, Reduction};
use volseg::metrics::{dice_metric, hausdorff, sensitivity_specificity, Mask};
use volseg::network::{build_model, forward, shape_plan, ModelConfig, NormConfig};
use volseg::optim::{poly_lr, ScheduleConfig};
use volseg::{Mode, Tape, Tensor, Var};
use volseg_cli::infer::{crop_channels, pad_volume};
use volseg_cli::io::read_label;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err(format!($($arg)*));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

const TABLE: [(&str, [usize; 4]); 16] = [
    ("Input", [4, 160, 192, 128]),
    ("InitConv", [32, 160, 192, 128]),
    ("EncoderBlock0", [32, 160, 192, 128]),
    ("EncoderDown1", [64, 80, 96, 64]),
    ("EncoderBlock1", [64, 80, 96, 64]),
    ("EncoderDown2", [128, 40, 48, 32]),
    ("EncoderBlock2", [128, 40, 48, 32]),
    ("EncoderDown3", [256, 20, 24, 16]),
    ("EncoderBlock3", [256, 20, 24, 16]),
    ("DecoderUp2", [128, 40, 48, 32]),
    ("DecoderBlock2", [128, 40, 48, 32]),
    ("DecoderUp1", [64, 80, 96, 64]),
    ("DecoderBlock1", [64, 80, 96, 64]),
    ("DecoderUp0", [32, 160, 192, 128]),
    ("DecoderBlock0", [32, 160, 192, 128]),
    ("DecoderEnd", [3, 160, 192, 128]),
];

fn architecture() -> Outcome {
    let start = Instant::now();
    let plan = shape_plan(&ModelConfig::default(), [4, 160, 192, 128]).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    ensure!(plan.len() == TABLE.len(), "{} rows, expected {}", plan.len(), TABLE.len());
    for (row, (name, shape)) in plan.iter().zip(TABLE) {
        ensure!(row.layer == name && row.shape == shape, "{} {:?} vs {name} {shape:?}", row.layer, row.shape);
    }
    ensure!(secs < 1.0, "took {secs:.3}s");
    Ok(format!("{} rows match, {:.1} ms", plan.len(), secs * 1e3))
}

// ---------------------------------------------------------------- 2

const GRAD_TOL: f64 = 1e-4;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn signed(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

fn binary(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
}

fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> volseg::Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(uniform(&shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn gradients() -> Outcome {
    type Check = (String, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> volseg::Result<Var>>);
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checks: Vec<Check> = Vec::new();

    let x = uniform(&[2, 3, 4, 6, 4], -1.0, 1.0, &mut rng);
    let k = uniform(&[4, 3, 3, 3, 3], -1.0, 1.0, &mut rng);
    let b = uniform(&[4], -1.0, 1.0, &mut rng);
    for algo in [ConvAlgo::Direct, ConvAlgo::Blocked] {
        for (stride, pad) in [(1, 1), (2, 1)] {
            checks.push((
                format!("conv3d {algo:?} s{stride}"),
                vec![x.clone(), k.clone(), b.clone()],
                Box::new(move |t, v| {
                    t.set_conv_algo(algo);
                    let y = t.conv3d(v[0], v[1], Some(v[2]), stride, pad)?;
                    project(t, y, 7)
                }),
            ));
        }
    }
    let x1 = uniform(&[1, 5, 3, 3, 3], -1.0, 1.0, &mut rng);
    let k1 = uniform(&[2, 5, 1, 1, 1], -1.0, 1.0, &mut rng);
    checks.push((
        "conv1x1x1".into(),
        vec![x1, k1],
        Box::new(|t, v| {
            let y = t.conv1x1x1(v[0], v[1], None)?;
            project(t, y, 3)
        }),
    ));
    let xn = uniform(&[2, 4, 3, 2, 3], -2.0, 2.0, &mut rng);
    let g = uniform(&[4], 0.5, 1.5, &mut rng);
    let be = uniform(&[4], -0.5, 0.5, &mut rng);
    let norm_in = vec![xn, g, be];
    checks.push((
        "group_norm".into(),
        norm_in.clone(),
        Box::new(|t, v| {
            let y = t.group_norm(v[0], 2, v[1], v[2], 1e-5)?;
            project(t, y, 11)
        }),
    ));
    checks.push((
        "instance_norm".into(),
        norm_in.clone(),
        Box::new(|t, v| {
            let y = t.instance_norm(v[0], v[1], v[2], 1e-5)?;
            project(t, y, 12)
        }),
    ));
    checks.push((
        "batch_norm".into(),
        norm_in,
        Box::new(|t, v| {
            let mut stats = RunningStats::new(4, 0.1);
            let y = t.batch_norm(v[0], v[1], v[2], 1e-5, Mode::Train, &mut stats)?;
            project(t, y, 13)
        }),
    ));
    let a = signed(&[2, 3, 4], &mut rng);
    let c = uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
    checks.push(("relu".into(), vec![a.clone()], Box::new(|t, v| t.relu(v[0]).and_then(|y| project(t, y, 1)))));
    checks.push(("sigmoid".into(), vec![c.clone()], Box::new(|t, v| t.sigmoid(v[0]).and_then(|y| project(t, y, 2)))));
    checks.push((
        "add".into(),
        vec![a.clone(), c.clone()],
        Box::new(|t, v| t.add(v[0], v[1]).and_then(|y| project(t, y, 3))),
    ));
    checks.push((
        "mul".into(),
        vec![a.clone(), c.clone()],
        Box::new(|t, v| t.mul(v[0], v[1]).and_then(|y| project(t, y, 4))),
    ));
    checks.push((
        "weighted_sum".into(),
        vec![a, c],
        Box::new(|t, v| {
            let (sa, sb) = (project(t, v[0], 5)?, project(t, v[1], 6)?);
            let sq = t.mul(sa, sb)?;
            t.weighted_sum(&[(sa, 0.5), (sb, -2.0), (sq, 1.5)])
        }),
    ));
    let xu = uniform(&[1, 2, 3, 2, 4], -1.0, 1.0, &mut rng);
    checks.push((
        "upsample".into(),
        vec![xu],
        Box::new(|t, v| t.upsample_trilinear2x(v[0]).and_then(|y| project(t, y, 8))),
    ));
    let xd = uniform(&[2, 6, 2, 2, 2], -1.0, 1.0, &mut rng);
    checks.push((
        "spatial_dropout".into(),
        vec![xd],
        Box::new(|t, v| {
            let y = t.spatial_dropout(v[0], 0.5, Mode::Train, &mut ChaCha8Rng::seed_from_u64(9))?;
            project(t, y, 9)
        }),
    ));

    let shape = [1, 3, 4, 3, 5];
    let pred = uniform(&shape, 0.05, 0.95, &mut rng);
    let truth = binary(&shape, &mut rng);
    let with_truth = |name: &str, f: fn(&mut Tape<f64>, Var, Var) -> volseg::Result<Var>| -> Check {
        let truth = truth.clone();
        (
            name.into(),
            vec![pred.clone()],
            Box::new(move |t, v| {
                let tr = t.constant(truth.clone());
                f(t, v[0], tr)
            }),
        )
    };
    checks.push(with_truth("soft_dice", |t, p, q| t.soft_dice_loss(p, q, 1e-5)));
    checks.push(with_truth("focal", |t, p, q| t.focal_loss(p, q, 2.0, 1e-8, false)));
    checks.push(with_truth("acl_volume", |t, p, q| t.acl_volume(p, q, 1.0, 0.0, 1.0)));
    checks.push(with_truth("acl_length", |t, p, _| t.acl_length(p, 1e-8, 1.0)));
    for reduction in [Reduction::Sum, Reduction::MeanPerVoxel] {
        let cfg = LossConfig { reduction, ..LossConfig::default() };
        let truth = truth.clone();
        checks.push((
            format!("hybrid {reduction:?}"),
            vec![pred.clone()],
            Box::new(move |t, v| {
                let tr = t.constant(truth.clone());
                Ok(hybrid_loss(t, v[0], tr, &cfg)?.total)
            }),
        ));
    }

    let mut worst = 0.0f64;
    for (name, inputs, f) in &checks {
        let r = gradcheck(inputs, f, GradcheckOptions::default()).map_err(err)?;
        ensure!(r.passes(GRAD_TOL), "{name}: max rel err {:.3e}", r.max_rel_err);
        worst = worst.max(r.max_rel_err);
    }

    let cfg = ModelConfig { init_filters: 4, norm: NormConfig::GroupCount { groups: 2 }, input_crop: [8; 3], ..ModelConfig::default() };
    let store = build_model::<f64, _>(&cfg, &mut rng).map_err(err)?;
    let x = uniform(&[1, 4, 8, 8, 8], -1.0, 1.0, &mut rng);
    let truth = binary(&[1, 3, 8, 8, 8], &mut rng);
    let inputs: Vec<Tensor<f64>> = store.params.iter().map(|p| p.value.clone()).collect();
    let model = |t: &mut Tape<f64>, v: &[Var]| {
        let mut s = store.clone();
        let input = t.constant(x.clone());
        let out = forward(t, &mut s, v, input, Mode::Train, &mut ChaCha8Rng::seed_from_u64(11))?;
        let tr = t.constant(truth.clone());
        Ok(hybrid_loss(t, out, tr, &LossConfig::default())?.total)
    };
    let opts = GradcheckOptions { max_elements: Some(12), ..GradcheckOptions::default() };
    let r = gradcheck(&inputs, model, opts).map_err(err)?;
    ensure!(r.passes(GRAD_TOL), "tiny model: max rel err {:.3e}", r.max_rel_err);
    worst = worst.max(r.max_rel_err);

    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 300.0, "took {secs:.0}s");
    Ok(format!("{} checks, max rel err {worst:.2e}, {secs:.1}s", checks.len() + 1))
}

// ---------------------------------------------------------------- 3

fn loss_identities() -> Outcome {
    let shape = vec![1, 3, 12, 10, 10];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let truth = Tensor::<f64>::from_fn(shape.clone(), |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(truth.clone());
    let q = tape.constant(truth.clone());
    let dice = tape.soft_dice_loss(p, q, 1e-5).map_err(err)?;
    let dice = tape.value(dice).data()[0];
    ensure!(dice <= 1e-4, "dice loss {dice:e} on perfect prediction");

    let fg_ones = Tensor::<f64>::from_fn(shape.clone(), |i| if truth.data()[i] == 1.0 { 1.0 } else { 0.3 });
    let pf = tape.constant(fg_ones);
    let focal = tape.focal_loss(pf, q, 2.0, 1e-8, false).map_err(err)?;
    let focal = tape.value(focal).data()[0];
    ensure!(focal == 0.0, "focal {focal:e} with p = 1 on foreground");

    let vol = tape.acl_volume(p, q, 1.0, 0.0, 1.0).map_err(err)?;
    let vol = tape.value(vol).data()[0];
    ensure!(vol == 0.0, "acl volume {vol:e} on perfect prediction");

    let eps = 1e-8;
    let n: usize = shape.iter().product();
    let mut worst = 0.0f64;
    for c in [0.0, 0.25, 0.7, 1.0] {
        let pc = tape.constant(Tensor::from_fn(shape.clone(), |_| c));
        let len = tape.acl_length(pc, eps, 1.0).map_err(err)?;
        let len = tape.value(len).data()[0];
        let want = n as f64 * eps.sqrt();
        worst = worst.max((len - want).abs() / want);
    }
    ensure!(worst < 1e-12, "acl length off by rel {worst:e}");
    Ok(format!("dice {dice:.1e} on {} voxels, focal 0, volume 0, length rel err {worst:.0e}", n))
}

// ---------------------------------------------------------------- 4

fn schedule() -> Outcome {
    let cfg = ScheduleConfig::default();
    let at = |e| poly_lr(e, &cfg).map_err(err);
    let (a, b, c) = (at(0)?, at(cfg.total_epochs)?, at(150)?);
    ensure!(cfg.total_epochs == 300, "total epochs {}", cfg.total_epochs);
    ensure!(a == 1e-4, "poly_lr(0) = {a:e}");
    ensure!(b == 0.0, "poly_lr(300) = {b:e}");
    ensure!((c - 5.3589e-5).abs() <= 1e-9, "poly_lr(150) = {c:e}");
    Ok(format!("{a:e}, {b:e}, {c:.6e}"))
}

// ---------------------------------------------------------------- 5

fn boundary_points(m: &Mask) -> Vec<[usize; 3]> {
    let e = m.extents;
    let inside = |p: [isize; 3]| {
        (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < e[a])
            && m.data[(p[0] as usize * e[1] + p[1] as usize) * e[2] + p[2] as usize]
    };
    let faces = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
    let mut out = Vec::new();
    for d in 0..e[0] {
        for h in 0..e[1] {
            for w in 0..e[2] {
                let p = [d as isize, h as isize, w as isize];
                if inside(p) && faces.iter().any(|o| !inside([p[0] + o[0], p[1] + o[1], p[2] + o[2]])) {
                    out.push([d, h, w]);
                }
            }
        }
    }
    out
}

fn brute_hausdorff(p: &Mask, t: &Mask, s: [f64; 3], q: f64) -> Option<f64> {
    let (bp, bt) = (boundary_points(p), boundary_points(t));
    if bp.is_empty() || bt.is_empty() {
        return None;
    }
    let dist = |a: [usize; 3], b: [usize; 3]| {
        let t: [f64; 3] = std::array::from_fn(|i| a[i].abs_diff(b[i]) as f64 * s[i]);
        t[0] * t[0] + (t[1] * t[1] + t[2] * t[2])
    };
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| -> Vec<f64> {
        from.iter().map(|&a| to.iter().map(|&b| dist(a, b)).fold(f64::INFINITY, f64::min).sqrt()).collect()
    };
    let mut all = directed(&bp, &bt);
    all.extend(directed(&bt, &bp));
    all.sort_by(|a, b| a.total_cmp(b));
    let r = q / 100.0 * (all.len() - 1) as f64;
    let (lo, hi) = (r.floor() as usize, r.ceil() as usize);
    Some(all[lo] + (all[hi] - all[lo]) * (r - lo as f64))
}

fn metrics_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let spacings = [1.0, 0.5, 1.5, 2.0, 0.75];
    let mut defined = 0;
    for i in 0..200 {
        let e: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=8));
        let density = rng.random_range(0.02..0.6);
        let p = Mask::from_fn(e, |_, _, _| rng.random_bool(density));
        let t = Mask::from_fn(e, |_, _, _| rng.random_bool(density));
        let s: [f64; 3] = std::array::from_fn(|_| spacings[rng.random_range(0..spacings.len())]);
        for q in [100.0, 95.0] {
            let got = hausdorff(&p, &t, s, q).map_err(err)?;
            ensure!(got == brute_hausdorff(&p, &t, s, q), "pair {i} q{q}: {got:?}");
            defined += got.is_some() as usize;
        }
        let (mut tp, mut fp, mut tn, mut fn_) = (0.0, 0.0, 0.0, 0.0);
        for (&a, &b) in p.data.iter().zip(&t.data) {
            match (a, b) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, false) => tn += 1.0,
                (false, true) => fn_ += 1.0,
            }
        }
        let dice = if tp + fp + fn_ == 0.0 { 1.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        let sens = if tp + fn_ == 0.0 { if fp == 0.0 { 1.0 } else { 0.0 } } else { tp / (tp + fn_) };
        let spec = if tn + fp == 0.0 { 1.0 } else { tn / (tn + fp) };
        ensure!(dice_metric(&p, &t).map_err(err)? == dice, "pair {i}: dice");
        ensure!(sensitivity_specificity(&p, &t).map_err(err)? == (sens, spec), "pair {i}: sensitivity/specificity");
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("200 pairs, {defined} defined distances, {secs:.2}s"))
}

// ---------------------------------------------------------------- 6, 7

fn volseg(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_volseg")).args(args).output().map_err(err)?;
    if !out.status.success() {
        return Err(format!("volseg {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(())
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

struct Run {
    val_dice: Vec<f64>,
    final_checkpoint: PathBuf,
}

fn final_run(run_dir: &Path) -> Result<Run, String> {
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run_dir.join("report.json")).map_err(err)?).map_err(err)?;
    let last = report["epochs"].as_array().and_then(|e| e.last()).ok_or("no epochs in report")?;
    let val_dice = last["val_dice"].as_array().ok_or("no val_dice")?.iter().filter_map(|v| v.as_f64()).collect();
    Ok(Run { val_dice, final_checkpoint: PathBuf::from(report["final_checkpoint"].as_str().ok_or("no final checkpoint")?) })
}

fn write_config(dir: &Path, data: &Path, epochs: usize, crop: usize, every: usize) -> Result<PathBuf, String> {
    let cfg = format!(
        "seed = 7\nbatch_size = 1\ncheckpoint_every = {every}\nvalidation_fraction = 0.2\n\
         [dataset]\npath = \"{}\"\n\
         [model]\ninit_filters = 8\ninput_crop = [{crop}, {crop}, {crop}]\n\
         [loss]\nreduction = \"mean_per_voxel\"\nsymmetric_focal = true\n\
         [schedule]\ntotal_epochs = {epochs}\n",
        p(data)
    );
    let path = dir.join("train.toml");
    fs::write(&path, cfg).map_err(err)?;
    Ok(path)
}

const WT_MIN: f64 = 0.80;
const TC_ET_MIN: f64 = 0.70;

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(err)?;
    let data = tmp.path().join("data");
    volseg(&["synth", "--out", p(&data), "--cases", "50", "--size", "48x48x48", "--seed", "11"])?;
    let cfg = write_config(tmp.path(), &data, 25, 32, 0)?;
    let run_dir = tmp.path().join("run");
    volseg(&["train", "--config", p(&cfg), "--run-dir", p(&run_dir)])?;
    let run = final_run(&run_dir)?;
    let secs = start.elapsed().as_secs_f64();
    let d = &run.val_dice;
    ensure!(d.len() == 3, "validation dice {d:?}");
    let detail = format!("WT {:.3} TC {:.3} ET {:.3}, {:.1} min", d[0], d[1], d[2], secs / 60.0);
    ensure!(d[0] >= WT_MIN && d[1] >= TC_ET_MIN && d[2] >= TC_ET_MIN, "{detail}");
    ensure!(secs <= 45.0 * 60.0, "{detail}");
    Ok(detail)
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let data = tmp.path().join("data");
    volseg(&["synth", "--out", p(&data), "--cases", "5", "--size", "24x24x24", "--seed", "3"])?;
    let cfg = write_config(tmp.path(), &data, 4, 16, 2)?;
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for dir in [&a, &b] {
        volseg(&["--threads", "1", "train", "--config", p(&cfg), "--run-dir", p(dir)])?;
    }
    let mid = a.join("checkpoints").join("epoch_0002.ckpt");
    volseg(&["--threads", "1", "train", "--config", p(&cfg), "--run-dir", p(&c), "--resume", p(&mid)])?;
    let bytes = |d: &Path| final_run(d).and_then(|r| fs::read(r.final_checkpoint).map_err(err));
    let (fa, fb, fc) = (bytes(&a)?, bytes(&b)?, bytes(&c)?);
    ensure!(fa == fb, "two runs differ");
    ensure!(fa == fc, "resumed run differs from uninterrupted run");
    Ok(format!("final checkpoints identical ({} bytes), resume from epoch 2 identical", fa.len()))
}

// ---------------------------------------------------------------- 8

fn io_round_trips() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let e = [5, 7, 3];
    let n = 105;
    let image = Volume::new(1, e, [0.9, 1.1, 2.5], (0..n).map(|_| rng.random_range(-1e3f32..1e3)).collect(), VolumeKind::Image)
        .map_err(err)?;
    let label_data: Vec<f32> = (0..n).map(|i| [0.0f32, 1.0, 2.0, 4.0][i % 4]).collect();
    let label = Volume::new(1, e, [1.0; 3], label_data, VolumeKind::LabelMap).map_err(err)?;
    let bits = |v: &Volume| v.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();

    for name in ["img.nii", "img.nii.gz"] {
        let path = tmp.path().join(name);
        write_nifti(&image, &path, NiftiDType::F32).map_err(err)?;
        let back = read_nifti(&path, VolumeKind::Image).map_err(err)?;
        let stored = image.spacing.map(|x| x as f32 as f64);
        ensure!(bits(&back) == bits(&image) && back.extents == e && back.spacing == stored, "{name} round trip");
    }
    for dtype in [NiftiDType::U8, NiftiDType::I16] {
        let path = tmp.path().join("seg.nii.gz");
        write_nifti(&label, &path, dtype).map_err(err)?;
        ensure!(read_nifti(&path, VolumeKind::LabelMap).map_err(err)?.data == label.data, "{dtype:?} label round trip");
    }
    let native = tmp.path().join("img.json");
    write_native(&image, &native, &["t1"]).map_err(err)?;
    let back = read_native(&native).map_err(err)?;
    ensure!(bits(&back) == bits(&image) && back.spacing == image.spacing, "native round trip");

    let channels = labels_to_channels(&label).map_err(err)?;
    let [d, h, w] = e;
    let probs = channels.to_tensor().reshape(vec![3, d, h, w]).map_err(err)?;
    ensure!(channels_to_labels(&probs, label.spacing, 0.5).map_err(err)?.data == label.data, "labels/channels round trip");

    let multi = Volume::new(3, [45, 50, 47], [1.0; 3], (0..3 * 45 * 50 * 47).map(|i| i as f32).collect(), VolumeKind::Image)
        .map_err(err)?;
    let padded = pad_volume(&multi, 8);
    ensure!(padded.extents == [48, 56, 48], "padded to {:?}", padded.extents);
    let cropped = crop_channels(&padded.to_tensor().reshape(vec![3, 48, 56, 48]).map_err(err)?, multi.extents).map_err(err)?;
    ensure!(cropped.data() == multi.data.as_slice(), "pad/crop round trip");

    // CLI inference on a volume whose extents are not multiples of 8.
    let data = tmp.path().join("odd");
    volseg(&["synth", "--out", p(&data), "--cases", "1", "--size", "21x18x19"])?;
    let store = build_model::<f32, _>(&ModelConfig { init_filters: 8, input_crop: [16; 3], ..ModelConfig::default() }, &mut rng)
        .map_err(err)?;
    let ckpt = tmp.path().join("m.ckpt");
    Checkpoint::new(store).save(&ckpt).map_err(err)?;
    let out = tmp.path().join("pred");
    volseg(&["infer", "--checkpoint", p(&ckpt), "--input", p(&data), "--out", p(&out), "--format", "nifti"])?;
    let pred = read_label(&out, "case_0000").map_err(err)?;
    ensure!(pred.extents == [21, 18, 19], "inferred extents {:?}", pred.extents);
    Ok("nifti f32/u8/i16, native, labels/channels and 45x50x47 / 21x18x19 padding all exact".into())
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 8] = [
        (1, "architecture fidelity", architecture),
        (2, "gradient correctness", gradients),
        (3, "loss identities", loss_identities),
        (4, "schedule", schedule),
        (5, "metric oracle equivalence", metrics_oracle),
        (6, "end-to-end learning", end_to_end),
        (7, "determinism", determinism),
        (8, "i/o", io_round_trips),
    ];
    let only: Option<Vec<u32>> =
        std::env::var("VOLSEG_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        match f() {
            Ok(detail) => println!("criterion {id} ({name}): PASS  {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id} ({name}): FAIL  {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
