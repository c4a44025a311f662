//! Training loop and evaluation.

use std::path::Path;
use std::time::Instant;

use facedepth_autograd::tensor::tensor;
use facedepth_autograd::{Adam, ParamStore, Session, Tensor};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::depth_gt::{patch_targets, PatchGrid};
use crate::error::{Error, Result};
use crate::losses::{depth_terms, total_graph};
use crate::metrics::{accuracy, auc, MetricsReport};
use crate::model::{fake_probabilities, Detector};
use crate::raster::batch_tensor;
use crate::seeding::derive_indexed;
use crate::synth::{Dataset, SampleRecord};

pub const EVAL_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Depth supervision only; the classifier is untouched.
    Depth,
    Joint,
}

/// Loss terms of one optimizer step. `loss_patch_mse_raw` is the summed
/// absolute patch error of the batch, `loss_patch_mse` the per-sample value
/// that enters the objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub batch: usize,
    pub loss_total: f64,
    pub loss_classification: Option<f64>,
    pub ssim: Option<f64>,
    pub loss_ssim: Option<f64>,
    pub loss_patch_mse_raw: Option<f64>,
    pub loss_patch_mse: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Stage,
    pub mean_loss: f64,
    /// Accuracy of the in-flight predictions on training batches.
    pub running_train_acc: Option<f64>,
    pub val: Option<MetricsReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config_hash: String,
    pub seed: u64,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    /// Seconds per epoch. Not part of the reproducible trajectory.
    pub wall_clock: Vec<f64>,
}

impl RunLog {
    /// Equality of everything except wall-clock timings.
    pub fn trajectory_eq(&self, other: &RunLog) -> bool {
        self.config_hash == other.config_hash
            && self.seed == other.seed
            && self.steps == other.steps
            && self.epochs == other.epochs
            && self.best_epoch == other.best_epoch
    }
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: RunLog,
}

/// Records converted to tensors-ready form for one model.
pub struct Prepared<'a> {
    pub records: Vec<&'a SampleRecord>,
    pub targets: Option<Vec<Vec<f64>>>,
}

impl<'a> Prepared<'a> {
    pub fn new(records: &'a [SampleRecord], config: &TrainConfig) -> Result<Self> {
        let model = config.model_config();
        let size = model.image_size();
        if let Some(r) = records.iter().find(|r| r.image.height() != size || r.image.width() != size) {
            return Err(Error::config(format!(
                "record {} is {}x{} but the model expects {size}x{size}",
                r.id,
                r.image.height(),
                r.image.width()
            )));
        }
        let targets = if model.use_fdmt {
            let grid = PatchGrid::square(size, model.fdmt.patches_per_side)?;
            Some(
                records
                    .iter()
                    .map(|r| patch_targets(&r.oracle_depth, &r.mask, config.lambda, &grid).map(|v| v.0))
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        Ok(Self {
            records: records.iter().collect(),
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>, Option<Tensor>)> {
        let images = batch_tensor(idx.iter().map(|&i| &self.records[i].image))?;
        let labels = idx.iter().map(|&i| self.records[i].label.class_index()).collect();
        let targets = self.targets.as_ref().map(|t| {
            let p = t[0].len();
            tensor(&[idx.len(), p], idx.iter().flat_map(|&i| t[i].iter().copied()).collect())
        });
        Ok((images, labels, targets))
    }
}

fn nonfinite(step: usize, what: &str, value: f64, snapshot: Option<(&Path, Checkpoint, &RunLog)>) -> Error {
    let mut detail = format!("{what} = {value}");
    if let Some((dir, ckpt, log)) = snapshot {
        let written = std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(dir, e))
            .and_then(|_| ckpt.save(&dir.join("nonfinite.ckpt")))
            .and_then(|_| {
                let p = dir.join("nonfinite_log.json");
                std::fs::write(&p, serde_json::to_vec_pretty(log)?).map_err(|e| Error::io(&p, e))
            });
        match written {
            Ok(()) => detail.push_str(&format!("; snapshot in {}", dir.display())),
            Err(e) => detail.push_str(&format!("; snapshot failed: {e}")),
        }
    }
    Error::NonFinite { step, detail }
}

/// Train on `dataset.train`, selecting the epoch with the best validation
/// accuracy (the last epoch when there is no validation split). On a
/// non-finite loss or gradient the run aborts; with `snapshot_dir` set, the
/// current weights and log are written there first.
pub fn train(config: &TrainConfig, dataset: &Dataset, snapshot_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let model_cfg = config.model_config();
    let train_records = match config.train_limit {
        Some(n) => &dataset.train[..n.min(dataset.train.len())],
        None => &dataset.train[..],
    };
    if train_records.is_empty() {
        return Err(Error::contract("training split is empty"));
    }
    let train_set = Prepared::new(train_records, config)?;
    let val_set = Prepared::new(&dataset.val, config)?;
    let (det, mut params) = Detector::new(&model_cfg, config.seed)?;
    let mut adam = Adam::new(config.learning_rate, config.weight_decay);
    let weights = config.loss_weights();
    let ssim_c = config.ssim_constants();
    let checkpoint = |params: &ParamStore, epoch: usize| Checkpoint {
        model: model_cfg.clone(),
        train: config.clone(),
        epoch,
        params: params.clone(),
    };

    let mut log = RunLog {
        config_hash: config.hash(),
        seed: config.seed,
        steps: Vec::new(),
        epochs: Vec::new(),
        best_epoch: None,
        wall_clock: Vec::new(),
    };
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let stage = if epoch < config.staged_epochs { Stage::Depth } else { Stage::Joint };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed(config.seed, "shuffle", epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0usize, 0usize);

        for idx in order.chunks(config.batch_size) {
            let (images, labels, targets) = train_set.batch(idx)?;
            let mut s = Session::train(&params);
            let x = s.input(images);
            let mut entry = StepLog {
                epoch,
                step,
                batch: idx.len(),
                loss_total: 0.0,
                loss_classification: None,
                ssim: None,
                loss_ssim: None,
                loss_patch_mse_raw: None,
                loss_patch_mse: None,
                grad_norm: 0.0,
            };
            let loss = match stage {
                Stage::Depth => {
                    let fdmt = det.fdmt.as_ref().expect("validated: staged training needs fdmt");
                    let out = fdmt.forward(&mut s, x)?;
                    let t = s.input(targets.expect("fdmt targets"));
                    let d = depth_terms(&mut s, out.depth, t, ssim_c)?;
                    entry.ssim = Some(s.scalar(d.ssim));
                    entry.loss_ssim = Some(s.scalar(d.ssim_loss));
                    entry.loss_patch_mse_raw = Some(s.scalar(d.mse_raw));
                    entry.loss_patch_mse = Some(s.scalar(d.mse));
                    let a = s.scale(d.ssim_loss, weights.alpha);
                    let b = s.scale(d.mse, weights.beta);
                    s.add(a, b)
                }
                Stage::Joint => {
                    let fwd = det.forward(&mut s, x)?;
                    let cls = s.cross_entropy(fwd.logits(), &labels);
                    entry.loss_classification = Some(s.scalar(cls));
                    let probs = fake_probabilities(s.value(fwd.logits()));
                    hits += probs.iter().zip(&labels).filter(|(p, &l)| (**p >= 0.5) == (l == 1)).count();
                    seen += labels.len();
                    let d = match (fwd.depth, targets) {
                        (Some(out), Some(t)) => {
                            let t = s.input(t);
                            let d = depth_terms(&mut s, out.depth, t, ssim_c)?;
                            entry.ssim = Some(s.scalar(d.ssim));
                            entry.loss_ssim = Some(s.scalar(d.ssim_loss));
                            entry.loss_patch_mse_raw = Some(s.scalar(d.mse_raw));
                            entry.loss_patch_mse = Some(s.scalar(d.mse));
                            Some(d)
                        }
                        _ => None,
                    };
                    total_graph(&mut s, cls, d.as_ref(), weights)
                }
            };
            entry.loss_total = s.scalar(loss);
            if !entry.loss_total.is_finite() {
                let snap = snapshot_dir.map(|d| (d, checkpoint(&params, epoch), &log));
                return Err(nonfinite(step, "loss", entry.loss_total, snap));
            }
            let grads = s.param_grads(loss);
            entry.grad_norm = grads.sq_norm().sqrt();
            if !entry.grad_norm.is_finite() {
                let snap = snapshot_dir.map(|d| (d, checkpoint(&params, epoch), &log));
                return Err(nonfinite(step, "gradient norm", entry.grad_norm, snap));
            }
            drop(s);
            adam.step(&mut params, &grads);
            loss_sum += entry.loss_total * idx.len() as f64;
            log.steps.push(entry);
            step += 1;
        }

        let val = if val_set.is_empty() || stage == Stage::Depth {
            None
        } else {
            Some(evaluate_prepared(&det, &params, &val_set, config, "val")?)
        };
        let mean_loss = loss_sum / train_set.len() as f64;
        let running = (seen > 0).then(|| hits as f64 / seen as f64);
        info!(
            "epoch {epoch} {stage:?}: loss {mean_loss:.4} train_acc {} val_acc {}",
            running.map_or("-".into(), |a| format!("{a:.4}")),
            val.as_ref().map_or("-".into(), |m| format!("{:.4}", m.acc)),
        );
        if stage == Stage::Joint {
            let score = val.as_ref().map_or(f64::INFINITY, |m| m.acc);
            if best.as_ref().is_none_or(|(b, _)| score > *b || score.is_infinite()) {
                best = Some((score, checkpoint(&params, epoch)));
                log.best_epoch = Some(epoch);
            }
        }
        log.epochs.push(EpochLog {
            epoch,
            stage,
            mean_loss,
            running_train_acc: running,
            val,
        });
        log.wall_clock.push(started.elapsed().as_secs_f64());
    }

    let last = checkpoint(&params, config.epochs - 1);
    let best = match best {
        Some((_, c)) => c,
        None => {
            warn!("no joint epoch completed; using final weights");
            last.clone()
        }
    };
    Ok(TrainOutcome { best, last, log })
}

/// Per-sample outputs of an inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub fake_probability: Vec<f64>,
    /// Ground-truth labels, `true` for fake.
    pub truth: Vec<bool>,
    /// `[n][P]` predicted patch depth when the model has a depth branch.
    pub depth: Option<Vec<Vec<f64>>>,
    pub loss_classification: f64,
    pub ssim: Option<f64>,
    pub loss_ssim: Option<f64>,
    pub loss_patch_mse: Option<f64>,
}

impl Predictions {
    /// Thresholded at probability 0.5.
    pub fn predicted_fake(&self) -> Vec<bool> {
        self.fake_probability.iter().map(|&q| q >= 0.5).collect()
    }
}

pub fn predict_prepared(det: &Detector, params: &ParamStore, data: &Prepared, config: &TrainConfig) -> Result<Predictions> {
    if data.is_empty() {
        return Err(Error::Metric("cannot evaluate an empty split".into()));
    }
    let ssim_c = config.ssim_constants();
    let mut out = Predictions {
        fake_probability: Vec::with_capacity(data.len()),
        truth: Vec::with_capacity(data.len()),
        depth: det.fdmt.as_ref().map(|_| Vec::with_capacity(data.len())),
        loss_classification: 0.0,
        ssim: None,
        loss_ssim: None,
        loss_patch_mse: None,
    };
    let (mut ce, mut ssim, mut mse) = (0.0, 0.0, 0.0);
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(EVAL_BATCH) {
        let (images, labels, targets) = data.batch(idx)?;
        let mut s = Session::inference(params);
        let x = s.input(images);
        let fwd = det.forward(&mut s, x)?;
        let cls = s.cross_entropy(fwd.logits(), &labels);
        ce += s.scalar(cls) * idx.len() as f64;
        out.fake_probability.extend(fake_probabilities(s.value(fwd.logits())));
        out.truth.extend(labels.iter().map(|&l| l == 1));
        if let (Some(d), Some(t)) = (fwd.depth, targets) {
            let t = s.input(t);
            let terms = depth_terms(&mut s, d.depth, t, ssim_c)?;
            ssim += s.scalar(terms.ssim) * idx.len() as f64;
            mse += s.scalar(terms.mse_raw);
            let depth = out.depth.as_mut().expect("depth branch present");
            depth.extend(s.value(d.depth).rows().into_iter().map(|r| r.to_vec()));
        }
    }
    let n = data.len() as f64;
    out.loss_classification = ce / n;
    if out.depth.is_some() {
        out.ssim = Some(ssim / n);
        out.loss_ssim = Some(1.0 - ssim / n);
        out.loss_patch_mse = Some(mse / n);
    }
    Ok(out)
}

pub fn evaluate_prepared(
    det: &Detector,
    params: &ParamStore,
    data: &Prepared,
    config: &TrainConfig,
    split: &str,
) -> Result<MetricsReport> {
    let p = predict_prepared(det, params, data, config)?;
    let w = config.loss_weights();
    let loss_total = p.loss_classification
        + p.loss_ssim.map_or(0.0, |v| w.alpha * v)
        + p.loss_patch_mse.map_or(0.0, |v| w.beta * v);
    Ok(MetricsReport {
        split: split.to_string(),
        samples: data.len(),
        acc: accuracy(&p.predicted_fake(), &p.truth)?,
        auc: auc(&p.fake_probability, &p.truth)?,
        loss_classification: p.loss_classification,
        loss_total,
        ssim: p.ssim,
        loss_ssim: p.loss_ssim,
        loss_patch_mse: p.loss_patch_mse,
        config_hash: config.hash(),
        seed: config.seed,
    })
}

/// Evaluate a checkpoint on a set of records. Weights are not modified.
pub fn evaluate(ckpt: &Checkpoint, records: &[SampleRecord], split: &str) -> Result<MetricsReport> {
    let (det, params) = ckpt.instantiate()?;
    let data = Prepared::new(records, &ckpt.train)?;
    evaluate_prepared(&det, &params, &data, &ckpt.train, split)
}

pub fn predict(ckpt: &Checkpoint, records: &[SampleRecord]) -> Result<Predictions> {
    let (det, params) = ckpt.instantiate()?;
    let data = Prepared::new(records, &ckpt.train)?;
    predict_prepared(&det, &params, &data, &ckpt.train)
}
