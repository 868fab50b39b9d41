//! Whole-volume inference with checkpoint ensembling.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use volseg::checkpoint::Checkpoint;
use volseg::data::{channels_to_labels, normalize_nonzero, Case, DatasetIndex, Volume};
use volseg::network::{forward, ParameterStore};
use volseg::{Error, Mode, Result, Tape, Tensor};

use crate::io::{write_label, CaseSource, LabelFormat};

pub const THRESHOLD: f32 = 0.5;

/// Smallest multiple of `k` that is `>= e` on every axis.
pub fn padded_extents(e: [usize; 3], k: usize) -> [usize; 3] {
    e.map(|v| v.div_ceil(k) * k)
}

/// Zero-pad at the high end of every axis up to a multiple of `k`.
pub fn pad_volume(v: &Volume, k: usize) -> Volume {
    v.window([0, 0, 0], padded_extents(v.extents, k))
}

/// Leading `extents` corner of a `[C, D, H, W]` tensor.
pub fn crop_channels(t: &Tensor<f32>, extents: [usize; 3]) -> Result<Tensor<f32>> {
    let s = t.shape();
    if s.len() != 4 || (0..3).any(|a| extents[a] > s[a + 1]) {
        return Err(Error::Shape(format!("cannot crop {s:?} to {extents:?}")));
    }
    let mut out = Vec::with_capacity(s[0] * extents.iter().product::<usize>());
    let data = t.data();
    for c in 0..s[0] {
        for d in 0..extents[0] {
            for h in 0..extents[1] {
                let start = ((c * s[1] + d) * s[2] + h) * s[3];
                out.extend_from_slice(&data[start..start + extents[2]]);
            }
        }
    }
    Tensor::new(vec![s[0], extents[0], extents[1], extents[2]], out)
}

pub fn load_models(paths: &[PathBuf]) -> Result<Vec<ParameterStore<f32>>> {
    if paths.is_empty() {
        return Err(Error::Argument("at least one --checkpoint is required".into()));
    }
    let models: Vec<ParameterStore<f32>> = paths.iter().map(|p| Checkpoint::<f32>::load(p).map(|c| c.store)).collect::<Result<_>>()?;
    let first = &models[0].config;
    for (m, p) in models.iter().zip(paths) {
        if m.config.in_channels != first.in_channels || m.config.out_channels != 3 {
            return Err(Error::Config(format!(
                "{}: model maps {} -> {} channels, expected {} -> 3",
                p.display(),
                m.config.in_channels,
                m.config.out_channels,
                first.in_channels
            )));
        }
    }
    Ok(models)
}

/// Sigmoid outputs `[3, D, H, W]` of one model for a normalized image.
pub fn model_probs(store: &mut ParameterStore<f32>, image: &Volume) -> Result<Tensor<f32>> {
    if image.channels != store.config.in_channels {
        return Err(Error::Shape(format!("image has {} channels, model expects {}", image.channels, store.config.in_channels)));
    }
    let padded = pad_volume(image, store.config.spatial_divisor());
    let e = padded.extents;
    let mut tape = Tape::inference();
    let vars = store.bind(&mut tape);
    let x = tape.constant(padded.to_tensor().reshape(vec![1, image.channels, e[0], e[1], e[2]])?);
    // Eval mode draws nothing from the generator.
    let y = forward(&mut tape, store, &vars, x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
    let out = tape.value(y).clone();
    let c = out.shape()[1];
    crop_channels(&out.reshape(vec![c, e[0], e[1], e[2]])?, image.extents)
}

/// Mean of the members' sigmoid outputs, accumulated in f64.
pub fn ensemble_probs(models: &mut [ParameterStore<f32>], image: &Volume) -> Result<Tensor<f32>> {
    let mut acc: Option<(Vec<usize>, Vec<f64>)> = None;
    for m in models.iter_mut() {
        let p = model_probs(m, image)?;
        match &mut acc {
            None => acc = Some((p.shape().to_vec(), p.data().iter().map(|&v| v as f64).collect())),
            Some((_, sum)) => sum.iter_mut().zip(p.data()).for_each(|(s, &v)| *s += v as f64),
        }
    }
    let (shape, sum) = acc.ok_or_else(|| Error::Argument("empty ensemble".into()))?;
    let k = models.len() as f64;
    Tensor::new(shape, sum.into_iter().map(|s| (s / k) as f32).collect())
}

/// Normalize, predict and convert to a label map with the image's extents.
pub fn predict_case(models: &mut [ParameterStore<f32>], case: &Case) -> Result<Volume> {
    let image = normalize_nonzero(&case.image)?;
    let probs = ensemble_probs(models, &image)?;
    channels_to_labels(&probs, case.image.spacing, THRESHOLD)
}

pub fn cmd_infer(checkpoints: &[PathBuf], input: &Path, out: &Path, format: LabelFormat) -> Result<Vec<PathBuf>> {
    let mut models = load_models(checkpoints)?;
    let source = CaseSource::open(input)?;
    let ids = source.ids();
    let mut written = Vec::with_capacity(ids.len());
    for id in &ids {
        let case = source.load(id)?;
        let start = std::time::Instant::now();
        let label = predict_case(&mut models, &case)?;
        let path = write_label(out, id, &label, format)?;
        log::info!(
            "event=infer case={id} extents={:?} members={} seconds={:.3} out={}",
            case.image.extents,
            models.len(),
            start.elapsed().as_secs_f64(),
            path.display()
        );
        written.push(path);
    }
    let index = DatasetIndex::new(ids, serde_json::json!({ "predictions": checkpoints }));
    std::fs::write(out.join(volseg::data::INDEX_FILE), serde_json::to_string_pretty(&index)? + "\n")?;
    Ok(written)
}
