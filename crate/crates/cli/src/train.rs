//! `volseg train`: epoch loop, validation, checkpoints and resume.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;
use volseg::checkpoint::Checkpoint;
use volseg::data::{
    augment, channels_to_labels, dataset_ids, labels_to_channels, load_case, normalize_nonzero, random_crop, Case, REGIONS,
};
use volseg::losses::{hybrid_loss, LossReport};
use volseg::metrics::{dice_metric, Mask};
use volseg::network::{build_model, forward, ParameterStore};
use volseg::optim::{adam_step, apply_l2, poly_lr, AdamState};
use volseg::rng::{hash_str, stream};
use volseg::{Error, Mode, Result, Tape, Tensor};

use crate::config::TrainConfig;
use crate::infer::{ensemble_probs, THRESHOLD};

pub const CONFIG_ECHO: &str = "config.toml";
pub const LOG_FILE: &str = "train.log";
pub const REPORT_FILE: &str = "report.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

/// The `round(fraction * n)` ids with the smallest hashes are held out;
/// both lists keep the input order.
pub fn split_ids(ids: &[String], fraction: f64) -> Split {
    let mut ranked: Vec<&String> = ids.iter().collect();
    ranked.sort_by_key(|id| (hash_str(id), id.as_str()));
    let k = (fraction * ids.len() as f64).round() as usize;
    let held: Vec<&String> = ranked[..k.min(ids.len())].to_vec();
    let (validation, train) = ids.iter().cloned().partition(|id| held.contains(&id));
    Split { train, validation }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub loss: f64,
    pub dice: f64,
    pub focal: f64,
    pub acl_volume: f64,
    pub acl_length: f64,
    /// Mean validation dice for WT, TC, ET; empty without a validation set.
    pub val_dice: Vec<f64>,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        let mut s = format!(
            "event=epoch epoch={} lr={} steps={} loss={} dice={} focal={} acl_volume={} acl_length={}",
            self.epoch, self.lr, self.steps, self.loss, self.dice, self.focal, self.acl_volume, self.acl_length
        );
        for (r, d) in REGIONS.iter().zip(&self.val_dice) {
            s += &format!(" val_dice_{}={d}", r.to_lowercase());
        }
        s + &format!(" seconds={:.2}", self.seconds)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub split: Split,
    pub epochs: Vec<EpochRecord>,
    pub final_checkpoint: PathBuf,
}

/// Line-oriented log written to the run directory and mirrored to `log`.
struct RunLog {
    file: File,
}

impl RunLog {
    fn open(path: &Path, append: bool) -> Result<Self> {
        let file = OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(path)?;
        Ok(RunLog { file })
    }

    fn info(&mut self, line: &str) -> Result<()> {
        log::info!("{line}");
        writeln!(self.file, "level=info {line}")?;
        Ok(())
    }

    fn debug(&mut self, line: &str) -> Result<()> {
        log::debug!("{line}");
        writeln!(self.file, "level=debug {line}")?;
        Ok(())
    }
}

const TAG_SHUFFLE: &str = "shuffle";
const TAG_SAMPLE: &str = "sample";
const TAG_DROPOUT: &str = "dropout";
const TAG_INIT: &str = "init";

/// Run state stored in a checkpoint header. Paths are left out so runs in
/// different directories produce identical checkpoints.
fn run_state(cfg: &TrainConfig, completed: usize) -> Result<serde_json::Value> {
    let mut c = cfg.clone();
    c.run_dir = PathBuf::new();
    c.dataset.path = PathBuf::new();
    c.checkpoint_every = 0;
    Ok(json!({ "completed_epochs": completed, "train": serde_json::to_value(&c)? }))
}

fn resumed_epochs(ckpt: &Checkpoint<f32>, cfg: &TrainConfig) -> Result<usize> {
    let completed = ckpt.extra["completed_epochs"]
        .as_u64()
        .ok_or_else(|| Error::Format("checkpoint carries no training state".into()))? as usize;
    if run_state(cfg, completed)? != ckpt.extra {
        return Err(Error::Config("checkpoint was written with a different training configuration".into()));
    }
    if completed > cfg.epochs() {
        return Err(Error::Config(format!("checkpoint is at epoch {completed}, beyond total_epochs {}", cfg.epochs())));
    }
    Ok(completed)
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub split: Split,
    /// Normalized cases by id.
    cases: BTreeMap<String, Case>,
    pub store: ParameterStore<f32>,
    pub adam: AdamState<f32>,
    /// Epochs completed so far.
    pub epoch: usize,
    log: RunLog,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, resume: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(cfg.run_dir.join("checkpoints"))?;
        fs::write(cfg.run_dir.join(CONFIG_ECHO), cfg.to_toml()?)?;
        let mut log = RunLog::open(&cfg.run_dir.join(LOG_FILE), resume.is_some())?;

        let ids = dataset_ids(&cfg.dataset.path, cfg.dataset.format)?;
        let split = split_ids(&ids, cfg.validation_fraction);
        if split.train.is_empty() {
            return Err(Error::Config(format!("no training cases left from {} ids", ids.len())));
        }
        let mut cases = BTreeMap::new();
        for id in &ids {
            let mut case = load_case(&cfg.dataset.path, cfg.dataset.format, id)?;
            if case.label.is_none() {
                return Err(Error::Config(format!("case {id} has no label map")));
            }
            if case.image.channels != cfg.model.in_channels {
                return Err(Error::Config(format!(
                    "case {id} has {} channels, model expects {}",
                    case.image.channels, cfg.model.in_channels
                )));
            }
            case.image = normalize_nonzero(&case.image)?;
            cases.insert(id.clone(), case);
        }

        let (store, adam, epoch) = match resume {
            Some(path) => {
                let ckpt = Checkpoint::<f32>::load(path)?;
                let epoch = resumed_epochs(&ckpt, &cfg)?;
                let adam = ckpt.adam.ok_or_else(|| Error::Format(format!("{}: no optimizer state", path.display())))?;
                (ckpt.store, adam, epoch)
            }
            None => {
                let store = build_model::<f32, _>(&cfg.model, &mut stream(cfg.seed, &[hash_str(TAG_INIT)]))?;
                let adam = AdamState::new(&store, cfg.schedule.adam);
                (store, adam, 0)
            }
        };
        log.info(&format!(
            "event=start train={} validation={} parameters={} start_epoch={} total_epochs={} seed={}",
            split.train.len(),
            split.validation.len(),
            volseg::network::count_parameters(&store),
            epoch,
            cfg.epochs(),
            cfg.seed
        ))?;
        Ok(Trainer { cfg, split, cases, store, adam, epoch, log })
    }

    fn batch(&self, epoch: usize, ids: &[String], first: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut images = Vec::with_capacity(ids.len());
        let mut labels = Vec::with_capacity(ids.len());
        for (j, id) in ids.iter().enumerate() {
            let mut rng = stream(self.cfg.seed, &[hash_str(TAG_SAMPLE), epoch as u64, (first + j) as u64]);
            let mut case = random_crop(&self.cases[id], self.cfg.model.input_crop, &mut rng);
            if self.cfg.augment {
                case = augment(&case, &mut rng)?;
            }
            let label = labels_to_channels(case.label.as_ref().expect("labelled"))?;
            let [d, h, w] = case.image.extents;
            images.push(case.image.to_tensor().reshape(vec![1, case.image.channels, d, h, w])?);
            labels.push(label.to_tensor().reshape(vec![1, 3, d, h, w])?);
        }
        Ok((Tensor::stack(&images)?, Tensor::stack(&labels)?))
    }

    fn step(&mut self, epoch: usize, step: usize, x: Tensor<f32>, y: Tensor<f32>, lr: f64) -> Result<LossReport> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let mut rng = stream(self.cfg.seed, &[hash_str(TAG_DROPOUT), epoch as u64, step as u64]);
        let out = forward(&mut tape, &mut self.store, &vars, xv, Mode::Train, &mut rng)?;
        let loss = hybrid_loss(&mut tape, out, yv, &self.cfg.loss)?;
        if !loss.report.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at epoch {epoch} step {step}: dice={} focal={} acl_volume={} acl_length={}",
                loss.report.dice, loss.report.focal, loss.report.acl_volume, loss.report.acl_length
            )));
        }
        tape.backward(loss.total)?;
        let mut grads = self.store.gradients(&mut tape, &vars)?;
        apply_l2(&self.store, &mut grads, self.cfg.schedule.l2_weight, self.cfg.schedule.l2_pointwise)?;
        adam_step(&mut self.store, &grads, &mut self.adam, lr)?;
        Ok(loss.report)
    }

    /// Mean WT/TC/ET dice of whole-volume predictions on the held-out cases.
    pub fn validate(&mut self) -> Result<Vec<f64>> {
        if self.split.validation.is_empty() {
            return Ok(Vec::new());
        }
        let mut sums = [0.0; 3];
        for id in &self.split.validation {
            let case = &self.cases[id];
            let probs = ensemble_probs(std::slice::from_mut(&mut self.store), &case.image)?;
            let pred = labels_to_channels(&channels_to_labels(&probs, case.image.spacing, THRESHOLD)?)?;
            let truth = labels_to_channels(case.label.as_ref().expect("labelled"))?;
            for (c, s) in sums.iter_mut().enumerate() {
                *s += dice_metric(&Mask::from_channel(&pred, c), &Mask::from_channel(&truth, c))?;
            }
        }
        Ok(sums.iter().map(|s| s / self.split.validation.len() as f64).collect())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint<f32>> {
        Ok(Checkpoint { store: self.store.clone(), adam: Some(self.adam.clone()), extra: run_state(&self.cfg, self.epoch)? })
    }

    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let start = Instant::now();
        let epoch = self.epoch;
        let lr = poly_lr(epoch, &self.cfg.schedule)?;
        let mut order = self.split.train.clone();
        order.shuffle(&mut stream(self.cfg.seed, &[hash_str(TAG_SHUFFLE), epoch as u64]));
        let mut sums = [0.0f64; 5];
        let mut steps = 0;
        for (s, ids) in order.chunks(self.cfg.batch_size).enumerate() {
            let first = s * self.cfg.batch_size;
            for id in ids {
                self.log.debug(&format!("event=sample epoch={epoch} step={s} case={id}"))?;
            }
            let (x, y) = self.batch(epoch, ids, first)?;
            let r = self.step(epoch, s, x, y, lr)?;
            for (acc, v) in sums.iter_mut().zip([r.total, r.dice, r.focal, r.acl_volume, r.acl_length]) {
                *acc += v;
            }
            steps += 1;
        }
        let n = steps as f64;
        let val_dice = self.validate()?;
        self.epoch += 1;
        let rec = EpochRecord {
            epoch,
            lr,
            steps,
            loss: sums[0] / n,
            dice: sums[1] / n,
            focal: sums[2] / n,
            acl_volume: sums[3] / n,
            acl_length: sums[4] / n,
            val_dice,
            seconds: start.elapsed().as_secs_f64(),
        };
        self.log.info(&rec.log_line())?;
        let every = self.cfg.checkpoint_every;
        if every > 0 && self.epoch % every == 0 && self.epoch < self.cfg.epochs() {
            let path = self.cfg.run_dir.join("checkpoints").join(format!("epoch_{:04}.ckpt", self.epoch));
            self.checkpoint()?.save(&path)?;
            self.log.info(&format!("event=checkpoint epoch={} path={}", self.epoch, path.display()))?;
        }
        Ok(rec)
    }

    /// Train up to `total_epochs`, write the final checkpoint and report.
    pub fn run(mut self) -> Result<TrainReport> {
        let mut epochs = Vec::new();
        while self.epoch < self.cfg.epochs() {
            epochs.push(self.run_epoch()?);
        }
        let path = self.cfg.run_dir.join("checkpoints").join(FINAL_CHECKPOINT);
        self.checkpoint()?.save(&path)?;
        self.log.info(&format!("event=done epochs={} path={}", self.epoch, path.display()))?;
        let report = TrainReport { split: self.split.clone(), epochs, final_checkpoint: path };
        fs::write(self.cfg.run_dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
        Ok(report)
    }
}

pub fn cmd_train(cfg: TrainConfig, resume: Option<&Path>) -> Result<TrainReport> {
    Trainer::new(cfg, resume)?.run()
}
