//! Training: box pre-training, point fine-tuning on fine and/or coarse
//! annotations, and classifier evaluation over ground-truth segments.
//!
//! Training reads annotations only; proposal masks are never consulted.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{image_tensor_from_rgb, PointBatch, PointPrompt, VitP};
use crate::optim::{clip_global_norm, global_grad_norm, lr_at, ScheduleConfig, Sgd};
use crate::pipeline::{central_point, highest_value_point, random_point, PointRule, VOID_ID};
use crate::synth::{AnnotatedImage, Dataset, Split};
use crate::tensor::{NoGradGuard, Scalar};
use crate::util::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStage {
    Box,
    Point,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnotationSource {
    Fine,
    Coarse,
    Box,
}

/// Schedule knobs with the total step count left optional; when absent it
/// is derived from epochs and dataset size.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: Option<usize>,
    pub clip_norm: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            base_lr: 1e-2,
            warmup_steps: 1000,
            total_steps: None,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub stage: TrainStage,
    pub annotation_sources: Vec<AnnotationSource>,
    pub points_per_image: usize,
    pub epochs: usize,
    /// Images per optimizer step (gradient accumulation).
    pub batch_size: usize,
    pub schedule: TrainSchedule,
    /// SGD momentum; zero (the default) is plain SGD.
    pub momentum: f64,
    pub seed: u64,
    /// Evaluate point accuracy on the val split after each epoch.
    pub val_eval: Option<PointRule>,
    /// Stop once per-epoch val accuracy reaches this level.
    pub stop_at_val: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: TrainStage::Point,
            annotation_sources: vec![AnnotationSource::Fine],
            points_per_image: 64,
            epochs: 10,
            batch_size: 1,
            schedule: TrainSchedule::default(),
            momentum: 0.0,
            seed: 7,
            val_eval: None,
            stop_at_val: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        match self.stage {
            TrainStage::Box => {
                if self.annotation_sources != [AnnotationSource::Box] {
                    return Err(Error::Config(
                        "box stage requires annotation_sources = [box]".into(),
                    ));
                }
            }
            TrainStage::Point => {
                if self.annotation_sources.is_empty()
                    || self
                        .annotation_sources
                        .iter()
                        .any(|s| *s == AnnotationSource::Box)
                {
                    return Err(Error::Config(
                        "point stage requires a nonempty subset of {fine, coarse}".into(),
                    ));
                }
            }
        }
        if self.points_per_image == 0 {
            return Err(Error::Config("points_per_image must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// JSON-lines training log records.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: usize,
        lr: f64,
        loss: f64,
        grad_norm: f64,
        clip_scale: f64,
    },
    Epoch {
        epoch: usize,
        mean_loss: f64,
        train_accuracy: f64,
        lr: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        val_accuracy: Option<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
    pub total_steps: usize,
    pub final_val_accuracy: Option<f64>,
}

/// Uniform labeled pixels from the chosen annotation map; each prompt is
/// the pixel center as a zero-size box, labeled with the pixel's class.
pub fn sample_point_targets(
    ann: &AnnotatedImage,
    source: AnnotationSource,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PointBatch> {
    let map = match source {
        AnnotationSource::Fine => &ann.fine,
        AnnotationSource::Coarse => &ann.coarse,
        AnnotationSource::Box => {
            return Err(Error::InvalidInput("box source has no point map".into()))
        }
    };
    let labeled: Vec<usize> = (0..map.len()).filter(|&px| map[px] != VOID_ID).collect();
    if labeled.is_empty() {
        return Err(Error::InvalidInput("annotation map has no labeled pixels".into()));
    }
    let class_table: BTreeMap<u16, u16> = ann.id_to_class.iter().copied().collect();
    let mut prompts = Vec::with_capacity(n);
    for _ in 0..n {
        let px = labeled[rng.gen_range(0..labeled.len())];
        let (r, c) = (px / ann.width, px % ann.width);
        let id = map[px];
        let class = *class_table.get(&id).ok_or_else(|| {
            Error::InvalidInput(format!("instance id {} missing from class table", id))
        })?;
        prompts.push(PointPrompt::from_pixel(r, c, ann.height, ann.width)?.with_label(class as usize));
    }
    PointBatch::new(prompts)
}

/// Box prompts: every box once when n covers them, then uniform top-up;
/// otherwise n uniform draws with replacement.
pub fn box_targets(ann: &AnnotatedImage, n: usize, rng: &mut ChaCha8Rng) -> Result<PointBatch> {
    if ann.boxes.is_empty() {
        return Err(Error::InvalidInput("image has no box annotations".into()));
    }
    let mut prompts = Vec::with_capacity(n);
    let push = |idx: usize, prompts: &mut Vec<PointPrompt>| -> Result<()> {
        let b = &ann.boxes[idx];
        prompts.push(
            PointPrompt::boxed(b.cx, b.cy, b.w, b.h)?.with_label(b.class_id as usize),
        );
        Ok(())
    };
    if n >= ann.boxes.len() {
        for idx in 0..ann.boxes.len() {
            push(idx, &mut prompts)?;
        }
    }
    while prompts.len() < n {
        push(rng.gen_range(0..ann.boxes.len()), &mut prompts)?;
    }
    PointBatch::new(prompts)
}

fn targets_for_image(
    ann: &AnnotatedImage,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<PointBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed,
        &[ann.index as u64, epoch as u64, 0x54],
    ));
    let n = cfg.points_per_image;
    match cfg.stage {
        TrainStage::Box => box_targets(ann, n, &mut rng),
        TrainStage::Point => {
            let sources = &cfg.annotation_sources;
            if sources.len() == 1 {
                sample_point_targets(ann, sources[0], n, &mut rng)
            } else {
                // equal per-image quotas; the odd point alternates by index
                let extra_to_fine = ann.index % 2 == 0;
                let n_fine = n / 2 + if n % 2 == 1 && extra_to_fine { 1 } else { 0 };
                let n_coarse = n - n_fine;
                let mut prompts = Vec::with_capacity(n);
                if n_fine > 0 {
                    prompts.extend(
                        sample_point_targets(ann, AnnotationSource::Fine, n_fine, &mut rng)?
                            .prompts()
                            .iter()
                            .copied(),
                    );
                }
                if n_coarse > 0 {
                    prompts.extend(
                        sample_point_targets(ann, AnnotationSource::Coarse, n_coarse, &mut rng)?
                            .prompts()
                            .iter()
                            .copied(),
                    );
                }
                PointBatch::new(prompts)
            }
        }
    }
}

/// Run the training loop; parameters are updated in place.
pub fn train(model: &VitP<f32>, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            log: Vec::new(),
            total_steps: 0,
            final_val_accuracy: None,
        });
    }
    let train_images = dataset.split_images(Split::Train);
    if train_images.is_empty() {
        return Err(Error::InvalidInput("train split is empty".into()));
    }
    let steps_per_epoch = train_images.len().div_ceil(cfg.batch_size);
    let computed_total = cfg.epochs * steps_per_epoch;
    let total_steps = cfg.schedule.total_steps.unwrap_or(computed_total);
    if total_steps < computed_total {
        return Err(Error::Config(format!(
            "total_steps {} below the {} steps this run will take",
            total_steps, computed_total
        )));
    }
    let schedule = ScheduleConfig {
        base_lr: cfg.schedule.base_lr,
        warmup_steps: cfg.schedule.warmup_steps,
        total_steps,
        clip_norm: cfg.schedule.clip_norm,
    };
    schedule.validate()?;

    let mut sgd = Sgd::new(cfg.momentum);
    let mut log = Vec::new();
    let mut step = 0usize;
    let mut final_val = None;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_images.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64, 0x5A]));
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.gen_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        let mut epoch_prompts = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let mut batch_loss: Option<crate::tensor::Tensor<f32>> = None;
            for &oi in chunk {
                let ann = train_images[oi];
                let batch = targets_for_image(ann, cfg, epoch)?;
                let labels = batch.labels()?;
                let image = image_tensor_from_rgb::<f32>(&ann.rgb, ann.height, ann.width)?;
                let step_result = (|| -> Result<_> {
                    let logits = model.forward(&image, &batch)?;
                    count_correct(&logits.values(), &labels, model.cfg.num_classes, &mut epoch_correct);
                    epoch_prompts += labels.len();
                    logits.cross_entropy(&labels)
                })();
                let loss = match step_result {
                    Ok(l) => l,
                    Err(Error::NonFinite { .. }) => return Err(Error::NanLoss { step }),
                    Err(e) => return Err(e),
                };
                batch_loss = Some(match batch_loss {
                    None => loss,
                    Some(acc) => acc.add(&loss)?,
                });
            }
            let loss = batch_loss
                .expect("non-empty chunk")
                .scale(1.0 / chunk.len() as f32)?;
            let loss_value = loss.item()?.to_f64();
            if !loss_value.is_finite() {
                return Err(Error::NanLoss { step });
            }
            match loss.backward() {
                Ok(()) => {}
                Err(Error::NonFinite { .. }) => return Err(Error::NanLoss { step }),
                Err(e) => return Err(e),
            }
            let grad_norm = global_grad_norm(&model.params)?;
            if !grad_norm.is_finite() {
                return Err(Error::NanLoss { step });
            }
            let clip_scale = clip_global_norm(&model.params, schedule.clip_norm)?;
            let lr = lr_at(step.min(total_steps), &schedule)?;
            sgd.step(&model.params, lr)?;
            epoch_loss += loss_value;
            log.push(LogRecord::Step {
                step,
                lr,
                loss: loss_value,
                grad_norm,
                clip_scale,
            });
        }
        let val_accuracy = match cfg.val_eval {
            Some(rule) => Some(eval_classifier(model, dataset, rule, cfg.seed)?.overall),
            None => None,
        };
        if val_accuracy.is_some() {
            final_val = val_accuracy;
        }
        log.push(LogRecord::Epoch {
            epoch,
            mean_loss: epoch_loss / steps_per_epoch as f64,
            train_accuracy: if epoch_prompts == 0 {
                0.0
            } else {
                epoch_correct as f64 / epoch_prompts as f64
            },
            lr: lr_at(step.min(total_steps), &schedule)?,
            val_accuracy,
        });
        if let (Some(target), Some(acc)) = (cfg.stop_at_val, val_accuracy) {
            if acc >= target {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        log,
        total_steps: step,
        final_val_accuracy: final_val,
    })
}

fn count_correct(logits: &[f32], labels: &[usize], k: usize, correct: &mut usize) {
    for (row, &label) in logits.chunks(k).zip(labels) {
        if crate::util::argmax(row) == Some(label) {
            *correct += 1;
        }
    }
}

/// Top-1 accuracy over ground-truth segments of the val split.
#[derive(Debug, Clone)]
pub struct AccuracyReport {
    pub overall: f64,
    /// class -> (correct, total)
    pub per_class: BTreeMap<u16, (usize, usize)>,
    pub total_segments: usize,
}

/// Classify one point per ground-truth segment (chosen by `rule` from the
/// segment's binary mask) and compare against the segment class.
pub fn eval_classifier(
    model: &VitP<f32>,
    dataset: &Dataset,
    rule: PointRule,
    seed: u64,
) -> Result<AccuracyReport> {
    eval_classifier_impl(dataset, rule, seed, |image, batch| {
        let guard = NoGradGuard::new();
        let logits = model.forward(image, batch)?;
        let k = model.cfg.num_classes;
        let out = logits
            .values()
            .chunks(k)
            .map(|row| crate::util::argmax(row).unwrap_or(0))
            .collect();
        drop(guard);
        Ok(out)
    })
}

pub(crate) fn eval_classifier_impl(
    dataset: &Dataset,
    rule: PointRule,
    seed: u64,
    predict: impl Fn(&crate::tensor::Tensor<f32>, &PointBatch) -> Result<Vec<usize>>,
) -> Result<AccuracyReport> {
    let val = dataset.split_images(Split::Val);
    if val.is_empty() {
        return Err(Error::InvalidInput("val split is empty".into()));
    }
    let mut per_class: BTreeMap<u16, (usize, usize)> = BTreeMap::new();
    let mut total = 0usize;
    let mut correct_total = 0usize;
    for ann in val {
        let segments = ann.segments();
        if segments.is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[ann.index as u64, 0x45]));
        let mut prompts = Vec::with_capacity(segments.len());
        let mut classes = Vec::with_capacity(segments.len());
        for (_, class, seg) in &segments {
            let mask: Vec<f32> = seg.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let (r, c) = match rule {
                PointRule::Highest => highest_value_point(&mask, ann.height, ann.width)?,
                PointRule::Central => central_point(&mask, ann.height, ann.width, 0.5)?,
                PointRule::Random => random_point(&mask, ann.height, ann.width, 0.5, &mut rng)?,
            };
            prompts.push(PointPrompt::from_pixel(r, c, ann.height, ann.width)?);
            classes.push(*class);
        }
        let image = image_tensor_from_rgb::<f32>(&ann.rgb, ann.height, ann.width)?;
        let preds = predict(&image, &PointBatch::new(prompts)?)?;
        for (pred, &class) in preds.iter().zip(&classes) {
            let entry = per_class.entry(class).or_insert((0, 0));
            entry.1 += 1;
            total += 1;
            if *pred == class as usize {
                entry.0 += 1;
                correct_total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::InvalidInput("no ground-truth segments to evaluate".into()));
    }
    Ok(AccuracyReport {
        overall: correct_total as f64 / total as f64,
        per_class,
        total_segments: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{generate, SynthConfig};

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            image_size: (32, 32),
            patch_size: 8,
            embed_dim: 32,
            depth: 2,
            heads: 4,
            num_classes: 6,
            mlp_ratio: 2.0,
            channels: 3,
        }
    }

    fn tiny_synth(n: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            num_images: n,
            image_size: (32, 32),
            seed,
            ..SynthConfig::default()
        }
    }

    fn quick_train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            points_per_image: 8,
            schedule: TrainSchedule {
                warmup_steps: 10,
                ..TrainSchedule::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn coarse_samples_stay_in_eroded_cores() {
        let ds = generate(&tiny_synth(10, 3)).unwrap();
        for ann in &ds.images {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let batch =
                sample_point_targets(ann, AnnotationSource::Coarse, 50, &mut rng).unwrap();
            for p in batch.prompts() {
                let c = (p.x * ann.width as f64 - 0.5).round() as usize;
                let r = (p.y * ann.height as f64 - 0.5).round() as usize;
                assert_ne!(ann.coarse[r * ann.width + c], VOID_ID);
                assert_eq!(p.w, 0.0);
                assert_eq!(p.h, 0.0);
            }
        }
    }

    #[test]
    fn single_pixel_coarse_seed_always_sampled() {
        let ds = generate(&tiny_synth(4, 9)).unwrap();
        let mut ann = ds.images[0].clone();
        // shrink the coarse map to a single labeled pixel
        let keep = ann.coarse.iter().position(|&v| v != VOID_ID).unwrap();
        let id = ann.coarse[keep];
        for (px, v) in ann.coarse.iter_mut().enumerate() {
            if px != keep {
                *v = VOID_ID;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = sample_point_targets(&ann, AnnotationSource::Coarse, 1, &mut rng).unwrap();
        let p = batch.prompts()[0];
        let c = (p.x * ann.width as f64 - 0.5).round() as usize;
        let r = (p.y * ann.height as f64 - 0.5).round() as usize;
        assert_eq!(r * ann.width + c, keep);
        assert_eq!(p.label, Some(ann.class_of(id).unwrap() as usize));
    }

    #[test]
    fn point_sampling_tracks_area_proportions() {
        let ds = generate(&tiny_synth(2, 5)).unwrap();
        let ann = &ds.images[0];
        let mut area: BTreeMap<u16, usize> = BTreeMap::new();
        for &id in &ann.fine {
            *area.entry(ann.class_of(id).unwrap()).or_insert(0) += 1;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut sampled: BTreeMap<u16, usize> = BTreeMap::new();
        let draws = 100_000usize;
        let batch = sample_point_targets(ann, AnnotationSource::Fine, draws, &mut rng).unwrap();
        for p in batch.prompts() {
            *sampled.entry(p.label.unwrap() as u16).or_insert(0) += 1;
        }
        let total_px = (ann.width * ann.height) as f64;
        for (class, &n) in &sampled {
            let expect = area[class] as f64 / total_px;
            let got = n as f64 / draws as f64;
            assert!(
                (got - expect).abs() <= 0.03,
                "class {}: {} vs {}",
                class,
                got,
                expect
            );
        }
    }

    #[test]
    fn box_targets_cover_all_boxes() {
        let ds = generate(&tiny_synth(6, 8)).unwrap();
        for ann in &ds.images {
            let count = ann.boxes.len();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let batch = box_targets(ann, count, &mut rng).unwrap();
            assert_eq!(batch.len(), count);
            for (p, b) in batch.prompts().iter().zip(&ann.boxes) {
                assert_eq!(p.label, Some(b.class_id as usize));
                assert_eq!((p.x, p.y, p.w, p.h), (b.cx, b.cy, b.w, b.h));
                assert!(p.w > 0.0 && p.h > 0.0);
            }
        }
    }

    #[test]
    fn zero_epochs_leaves_model_untouched() {
        let ds = generate(&tiny_synth(4, 2)).unwrap();
        let model = VitP::<f32>::new(tiny_model_cfg(), 1).unwrap();
        let before: Vec<Vec<u32>> = model
            .params
            .names()
            .iter()
            .map(|n| model.params.get(n).unwrap().values().iter().map(|v| v.to_bits()).collect())
            .collect();
        let cfg = TrainConfig {
            epochs: 0,
            ..quick_train_cfg()
        };
        let out = train(&model, &ds, &cfg).unwrap();
        assert_eq!(out.total_steps, 0);
        let after: Vec<Vec<u32>> = model
            .params
            .names()
            .iter()
            .map(|n| model.params.get(n).unwrap().values().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn initial_loss_near_ln_k_on_balanced_data() {
        let ds = generate(&tiny_synth(30, 6)).unwrap();
        let model = VitP::<f32>::new(tiny_model_cfg(), 11).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            points_per_image: 64,
            schedule: TrainSchedule {
                base_lr: 0.0, // probe the loss without moving parameters
                ..TrainSchedule::default()
            },
            ..TrainConfig::default()
        };
        // base_lr 0 fails validation on purpose; probe via a manual pass
        assert!(train(&model, &ds, &cfg).is_err());

        let ann = &ds.images[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut losses = Vec::new();
        for ann in ds.images.iter().take(10) {
            let batch = sample_point_targets(ann, AnnotationSource::Fine, 64, &mut rng).unwrap();
            let labels = batch.labels().unwrap();
            let image = image_tensor_from_rgb::<f32>(&ann.rgb, ann.height, ann.width).unwrap();
            let loss = model
                .forward(&image, &batch)
                .unwrap()
                .cross_entropy(&labels)
                .unwrap()
                .item()
                .unwrap();
            losses.push(loss as f64);
        }
        let _ = ann;
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        let ln_k = (tiny_model_cfg().num_classes as f64).ln();
        assert!(
            (mean - ln_k).abs() <= 0.1 * ln_k,
            "mean initial loss {} vs ln K {}",
            mean,
            ln_k
        );
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let ds = generate(&tiny_synth(6, 4)).unwrap();
        let run = || {
            let model = VitP::<f32>::new(tiny_model_cfg(), 5).unwrap();
            let cfg = quick_train_cfg();
            train(&model, &ds, &cfg).unwrap();
            model
                .params
                .names()
                .iter()
                .map(|n| {
                    model
                        .params
                        .get(n)
                        .unwrap()
                        .values()
                        .iter()
                        .map(|v| v.to_bits())
                        .collect::<Vec<_>>()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn training_loss_decreases_on_small_set() {
        let ds = generate(&tiny_synth(10, 13)).unwrap();
        let model = VitP::<f32>::new(tiny_model_cfg(), 2).unwrap();
        let cfg = TrainConfig {
            epochs: 8,
            points_per_image: 16,
            schedule: TrainSchedule {
                warmup_steps: 20,
                ..TrainSchedule::default()
            },
            ..TrainConfig::default()
        };
        let out = train(&model, &ds, &cfg).unwrap();
        let epoch_losses: Vec<f64> = out
            .log
            .iter()
            .filter_map(|r| match r {
                LogRecord::Epoch { mean_loss, .. } => Some(*mean_loss),
                _ => None,
            })
            .collect();
        assert_eq!(epoch_losses.len(), 8);
        assert!(
            epoch_losses.last().unwrap() < &(epoch_losses[0] * 0.8),
            "losses {:?}",
            epoch_losses
        );
    }

    #[test]
    fn fine_plus_coarse_quota_balanced() {
        let ds = generate(&tiny_synth(4, 21)).unwrap();
        let cfg = TrainConfig {
            annotation_sources: vec![AnnotationSource::Fine, AnnotationSource::Coarse],
            points_per_image: 9,
            ..quick_train_cfg()
        };
        for ann in &ds.images {
            let batch = targets_for_image(ann, &cfg, 0).unwrap();
            assert_eq!(batch.len(), 9);
            // count prompts that landed outside the coarse map: those must be
            // fine-sourced; quota says the split is floor/ceil of n/2
            let coarse_hits = batch
                .prompts()
                .iter()
                .filter(|p| {
                    let c = (p.x * ann.width as f64 - 0.5).round() as usize;
                    let r = (p.y * ann.height as f64 - 0.5).round() as usize;
                    ann.coarse[r * ann.width + c] != VOID_ID
                })
                .count();
            // fine samples can coincide with coarse cores, so the coarse
            // quota is a lower bound on hits
            let n_fine_expected = 4 + usize::from(ann.index % 2 == 0);
            assert!(coarse_hits >= 9 - n_fine_expected);
        }
    }

    #[test]
    fn nan_loss_aborts_with_step() {
        let ds = generate(&tiny_synth(4, 1)).unwrap();
        let model = VitP::<f32>::new(tiny_model_cfg(), 3).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            points_per_image: 8,
            schedule: TrainSchedule {
                base_lr: 1e18,
                warmup_steps: 1,
                clip_norm: 1e20,
                ..TrainSchedule::default()
            },
            ..TrainConfig::default()
        };
        match train(&model, &ds, &cfg) {
            Err(Error::NanLoss { step }) => assert!(step >= 1),
            other => panic!("expected NaN abort, got {:?}", other.map(|o| o.total_steps)),
        }
    }

    #[test]
    fn oracle_predictor_scores_one() {
        let ds = generate(&tiny_synth(10, 17)).unwrap();
        let report = eval_classifier_impl(&ds, PointRule::Central, 0, |_, batch| {
            // diagnostic oracle: look up the true class of each prompt pixel
            // via the batch order (the caller pairs predictions positionally)
            Ok(vec![usize::MAX; batch.len()])
        })
        .unwrap();
        assert_eq!(report.overall, 0.0);

        // real oracle: echo the ground-truth classes
        let val = ds.split_images(Split::Val);
        let mut expected: Vec<Vec<usize>> = Vec::new();
        for ann in &val {
            expected.push(ann.segments().iter().map(|(_, c, _)| *c as usize).collect());
        }
        let idx = std::cell::Cell::new(0usize);
        let report = eval_classifier_impl(&ds, PointRule::Central, 0, |_, _| {
            let out = expected[idx.get()].clone();
            idx.set(idx.get() + 1);
            Ok(out)
        })
        .unwrap();
        assert_eq!(report.overall, 1.0);

        // per-class accuracies aggregate to the overall value
        let (c, t) = report
            .per_class
            .values()
            .fold((0, 0), |acc, (c, t)| (acc.0 + c, acc.1 + t));
        assert_eq!(t, report.total_segments);
        assert_eq!(c as f64 / t as f64, report.overall);
    }

    #[test]
    fn untrained_model_scores_near_chance() {
        let ds = generate(&tiny_synth(1600, 23)).unwrap();
        let model = VitP::<f32>::new(tiny_model_cfg(), 29).unwrap();
        let report = eval_classifier(&model, &ds, PointRule::Central, 0).unwrap();
        assert!(report.total_segments >= 500, "{} segments", report.total_segments);
        let chance = 1.0 / tiny_model_cfg().num_classes as f64;
        assert!(
            report.overall >= chance * 0.5 && report.overall <= chance * 1.5,
            "accuracy {} vs chance {}",
            report.overall,
            chance
        );
    }
}
