//! Optimisation loop, evaluation driver and run artifacts.

pub mod checkpoint;
pub mod model;
pub mod optim;
pub mod schedule;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use model::{downsize_mask, Arch, Model, ModelKind, ModelSpec};
pub use optim::{clip_grad_norm, AdamConfig, AdamState};
pub use schedule::{lr_at, ScheduleConfig, DMGFORMER_MAX_LR, TRSNET_MAX_LR};

use crate::autograd::{Graph, Mode};
use crate::error::{Error, Result};
use crate::loss::{focal_loss, FocalLossConfig, LossMode};
use crate::mask::Mask;
use crate::metrics::{metrics, ConfusionMatrix, Metrics};
use crate::synth::{augment, AugmentPolicy, SegmentationSample, Task};
use crate::tensor::Tensor;
use crate::tiling::{jitter_crops, pad_image, pad_mask, JitterSpec, PaddingVariant, DEFAULT_MAX_SHIFT};

pub const DEFAULT_BATCH: usize = 4;
pub const DEFAULT_CLIP_NORM: f64 = 5.0;

fn default_batch() -> usize {
    DEFAULT_BATCH
}

fn default_clip() -> f64 {
    DEFAULT_CLIP_NORM
}

fn default_jitter() -> usize {
    DEFAULT_MAX_SHIFT
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Global gradient-norm ceiling; `0` disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    pub loss: FocalLossConfig,
    /// Per-sample augmentation, redrawn every epoch.
    #[serde(default)]
    pub augment: Option<AugmentPolicy>,
    /// Crop-origin jitter of tiled models, in pixels.
    #[serde(default = "default_jitter")]
    pub jitter: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults for `kind` on `task`: the model's peak rate, focal loss in
    /// the task's mode, and no augmentation.
    pub fn new(kind: ModelKind, task: Task, epochs: usize, seed: u64) -> Self {
        let max_lr = if kind == ModelKind::DmgFormer { DMGFORMER_MAX_LR } else { TRSNET_MAX_LR };
        let loss = match task.mode() {
            LossMode::Multiclass => FocalLossConfig::multiclass(),
            LossMode::Multilabel => FocalLossConfig::multilabel(),
        };
        TrainConfig {
            epochs,
            batch_size: DEFAULT_BATCH,
            schedule: ScheduleConfig::new(max_lr),
            adam: AdamConfig::default(),
            clip_norm: DEFAULT_CLIP_NORM,
            loss,
            augment: None,
            jitter: DEFAULT_MAX_SHIFT,
            seed,
        }
    }

    pub fn validate(&self, task: Task, classes: usize) -> Result<()> {
        self.schedule.validate()?;
        self.loss.validate(classes)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.loss.mode != task.mode() {
            return Err(Error::Config(format!("task {task:?} needs {:?} loss", task.mode())));
        }
        if classes != task.classes() {
            return Err(Error::Config(format!("model has {classes} outputs, task {task:?} has {}", task.classes())));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mean_iou: f64,
    /// Rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_iou: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

/// The label mask a model's output is scored against.
pub fn eval_target(spec: &ModelSpec, task: Task, s: &SegmentationSample) -> Mask {
    downsize_mask(&task.target(s), spec.output_divisor())
}

/// Confusion counts of `model` over `samples`; tiled models use `1 + ai`
/// padding placements.
pub fn evaluate(model: &Model, task: Task, samples: &[SegmentationSample], ai: usize) -> Result<Evaluation> {
    let mode = task.mode();
    let n = task.classes();
    let parts = samples
        .par_iter()
        .map(|s| -> Result<ConfusionMatrix> {
            let pred = model.predict(&s.image, mode, ai)?;
            let truth = eval_target(&model.spec, task, s);
            let mut cm = ConfusionMatrix::new(n);
            match mode {
                LossMode::Multiclass => cm.accumulate(&pred.data, &truth.data)?,
                LossMode::Multilabel => cm.accumulate_binary(&pred.data, &truth.data, truth.height * truth.width)?,
            }
            Ok(cm)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut confusion = ConfusionMatrix::new(n);
    for p in &parts {
        confusion.merge(p)?;
    }
    let metrics = metrics(&confusion);
    Ok(Evaluation { confusion, metrics })
}

/// Training pairs of one sample: the whole image, or jittered grid crops
/// under a random padding placement for tiled models.
fn training_items(model: &Model, task: Task, s: &SegmentationSample, jitter: usize, seed: u64) -> Result<Vec<(Tensor<f32>, Mask)>> {
    let target = eval_target(&model.spec, task, s);
    match model.grid(s.width(), s.height())? {
        None => Ok(vec![(s.image.clone(), target)]),
        Some(grid) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let variants = PaddingVariant::all();
            let v = variants[rng.gen_range(0..variants.len())];
            let img = pad_image(&s.image, &grid, v)?;
            let m = pad_mask(&target, &grid, v)?;
            jitter_crops(&img, &m, &grid, &JitterSpec { max_shift: jitter, seed: rng.next_u64() })
        }
    }
}

/// Trains `model` in place and leaves it holding the parameters of the
/// epoch with the best validation mean IoU. With an empty `val` the
/// training samples are scored instead. When `checkpoint` is set the best
/// parameters are also written there each time they improve.
pub fn train(
    model: &mut Model,
    task: Task,
    train_set: &[SegmentationSample],
    val: &[SegmentationSample],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    cfg.validate(task, model.spec.classes())?;
    let val = if val.is_empty() { train_set } else { val };
    let items_per_sample = model.grid(train_set[0].width(), train_set[0].height())?.map_or(1, |g| g.tiles());
    let per_epoch = (train_set.len() * items_per_sample).div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut adam = AdamState::new(&model.store, cfg.adam);
    let mut best: Option<(f64, usize, crate::autograd::ParamStore<f32>)> = None;
    let mut saved: Option<PathBuf> = None;
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let seeds: Vec<u64> = (0..train_set.len()).map(|_| rng.next_u64()).collect();
        let per_sample = train_set
            .par_iter()
            .zip(&seeds)
            .map(|(s, &seed)| {
                let s = match &cfg.augment {
                    Some(p) => augment(s, p, seed),
                    None => s.clone(),
                };
                training_items(model, task, &s, cfg.jitter, seed ^ 0x9e37_79b9_7f4a_7c15)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut items: Vec<(Tensor<f32>, Mask)> = per_sample.into_iter().flatten().collect();
        items.shuffle(&mut rng);

        let (mut loss_sum, mut lr) = (0.0, 0.0);
        for batch in items.chunks(cfg.batch_size) {
            lr = lr_at(step, total, &cfg.schedule);
            let images: Vec<&Tensor<f32>> = batch.iter().map(|(t, _)| t).collect();
            let masks: Vec<&Mask> = batch.iter().map(|(_, m)| m).collect();
            let x = Tensor::stack(&images)?;
            let targets = Mask::stack(&masks)?;
            let (loss, grads, stats) = {
                let mut g = Graph::new(&model.store, Mode::Train);
                let xv = g.input(x);
                let y = model.forward(&mut g, xv)?;
                let l = focal_loss(&mut g, y, &targets, &cfg.loss)?;
                let loss = g.value(l).data()[0] as f64;
                if !loss.is_finite() {
                    None
                } else {
                    let grads = g.backward(l)?;
                    Some((loss, grads, g.take_stat_updates()))
                }
            }
            .map_or((f64::NAN, None, Vec::new()), |(l, g, s)| (l, Some(g), s));
            let diverged = || Error::Diverged { epoch, step, last_good: saved.clone() };
            let Some(grads) = grads else {
                if let Some((_, _, store)) = best.take() {
                    model.store = store;
                }
                return Err(diverged());
            };
            model.store.zero_grads();
            model.store.accumulate(&grads);
            model.store.apply_stat_updates(stats);
            if cfg.clip_norm > 0.0 {
                clip_grad_norm(&mut model.store, cfg.clip_norm);
            }
            if let Err(e) = adam.step(&mut model.store, lr) {
                if let Some((_, _, store)) = best.take() {
                    model.store = store;
                }
                return Err(match e {
                    Error::NonFinite(_) => diverged(),
                    e => e,
                });
            }
            loss_sum += loss * batch.len() as f64;
            step += 1;
        }
        model.store.zero_grads();
        let iou = evaluate(model, task, val, 0)?.metrics.mean.iou;
        let rec = EpochRecord { epoch, train_loss: loss_sum / items.len() as f64, val_mean_iou: iou, lr };
        on_epoch(&rec);
        history.push(rec);
        if best.as_ref().is_none_or(|(b, _, _)| iou > *b) {
            if let Some(dir) = checkpoint {
                save_checkpoint(model, dir, serde_json::json!({"epoch": epoch, "val_mean_iou": iou, "step": step}))?;
                saved = Some(dir.to_path_buf());
            }
            best = Some((iou, epoch, model.store.clone()));
        }
    }
    let (best_val_iou, best_epoch) = match best {
        Some((iou, epoch, store)) => {
            model.store = store;
            (iou, epoch)
        }
        None => (f64::NAN, 0),
    };
    Ok(TrainReport { history, best_epoch, best_val_iou, steps: step })
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_mean_iou,lr";

pub fn history_csv(rows: &[EpochRecord]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_mean_iou, r.lr));
    }
    s
}

pub fn write_history(path: impl AsRef<Path>, rows: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(history_csv(rows).as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SceneParams};

    fn scenes(n: usize, side: usize) -> Vec<SegmentationSample> {
        generate_dataset(n, side, side, 5, &SceneParams::default()).unwrap().samples
    }

    #[test]
    fn one_epoch_two_samples_one_row() {
        let data = scenes(2, 32);
        let mut model = Model::new(&ModelSpec::tiny(ModelKind::TrsNet, 8), 0).unwrap();
        let cfg = TrainConfig::new(ModelKind::TrsNet, Task::Components, 1, 0);
        let r = train(&mut model, Task::Components, &data, &[], &cfg, None, |_| {}).unwrap();
        assert_eq!(r.history.len(), 1);
        assert_eq!(r.steps, 1);
        assert!(r.history[0].train_loss.is_finite());
        let csv = history_csv(&r.history);
        assert!(csv.starts_with("epoch,train_loss,val_mean_iou,lr\n1,"));
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn fixed_seed_gives_identical_curves() {
        let data = scenes(3, 32);
        let run = || {
            let mut model = Model::new(&ModelSpec::tiny(ModelKind::BaselineUniform, 3), 1).unwrap();
            let mut cfg = TrainConfig::new(ModelKind::BaselineUniform, Task::CrackRebarSpall, 2, 9);
            cfg.batch_size = 2;
            cfg.augment = Some(AugmentPolicy::default());
            let r = train(&mut model, Task::CrackRebarSpall, &data, &data[..1], &cfg, None, |_| {}).unwrap();
            (r, model.logits(&data[0].image).unwrap())
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la.data(), lb.data());
    }

    #[test]
    fn tiled_model_trains_on_crops() {
        let data = scenes(1, 32);
        let mut model = Model::new(&ModelSpec::tiny(ModelKind::DmgFormer, 3), 0).unwrap();
        let cfg = TrainConfig::new(ModelKind::DmgFormer, Task::CrackRebarSpall, 1, 0);
        let r = train(&mut model, Task::CrackRebarSpall, &data, &[], &cfg, None, |_| {}).unwrap();
        // A 32×32 image is a 2×2 grid of 16×16 crops: one batch of four.
        assert_eq!(r.steps, 1);
    }

    #[test]
    fn task_and_model_mismatch_rejected() {
        let data = scenes(1, 32);
        let mut model = Model::new(&ModelSpec::tiny(ModelKind::TrsNet, 3), 0).unwrap();
        let cfg = TrainConfig::new(ModelKind::TrsNet, Task::Components, 1, 0);
        assert!(train(&mut model, Task::Components, &data, &[], &cfg, None, |_| {}).is_err());
        assert!(train(&mut model, Task::CrackRebarSpall, &[], &[], &cfg, None, |_| {}).is_err());
    }

    #[test]
    fn divergence_keeps_last_good_checkpoint() {
        let data = scenes(2, 32);
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::new(&ModelSpec::tiny(ModelKind::TrsNet, 8), 0).unwrap();
        let mut cfg = TrainConfig::new(ModelKind::TrsNet, Task::Components, 3, 0);
        cfg.batch_size = 2;
        let mut epochs = 0;
        let r = train(&mut model, Task::Components, &data, &[], &cfg, Some(dir.path()), |_| epochs += 1);
        assert!(r.is_ok() && epochs == 3);
        // A NaN weight makes the first loss of the next run non-finite.
        let id = model.store.trainable().next().unwrap();
        model.store.get_mut(id).data_mut()[0] = f32::NAN;
        let err = train(&mut model, Task::Components, &data, &[], &cfg, Some(dir.path()), |_| {}).unwrap_err();
        match err {
            Error::Diverged { epoch: 1, step: 0, last_good: None } => {}
            e => panic!("{e:?}"),
        }
        assert!(checkpoint::read_manifest(dir.path()).is_ok());
    }
}
