//! JSON run configuration. Every field is optional in the file and falls
//! back to a documented default; unknown keys are rejected with the key
//! named in the error. The fully resolved document is echoed into every
//! command output for provenance and round-trips through serde unchanged.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pipeline::FusionConfig;
use crate::synth::{default_classes, ClassSpec, ProposalNoise, SynthConfig};
use crate::trainer::{AnnotationSource, TrainConfig, TrainSchedule, TrainStage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub synth: SynthSection,
    pub fusion: FusionConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub image_size: (usize, usize),
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub mlp_ratio: f64,
    pub channels: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            image_size: m.image_size,
            patch_size: m.patch_size,
            embed_dim: m.embed_dim,
            depth: m.depth,
            heads: m.heads,
            num_classes: m.num_classes,
            mlp_ratio: m.mlp_ratio,
            channels: m.channels,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            num_classes: self.num_classes,
            mlp_ratio: self.mlp_ratio,
            channels: self.channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub base_lr: f64,
    pub warmup_steps: usize,
    /// Derived from epochs and dataset size when absent.
    pub total_steps: Option<usize>,
    pub clip_norm: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            base_lr: 1e-2,
            warmup_steps: 1000,
            total_steps: None,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub num_images: usize,
    pub image_size: (usize, usize),
    pub classes: Vec<ClassSpec>,
    pub shapes_per_image: (usize, usize),
    pub coarse_erosion: usize,
    pub seed: u64,
    pub proposal_noise: ProposalNoise,
    pub distractors: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        SynthSection {
            num_images: s.num_images,
            image_size: s.image_size,
            classes: default_classes(),
            shapes_per_image: s.shapes_per_image,
            coarse_erosion: s.coarse_erosion,
            seed: s.seed,
            proposal_noise: s.proposal_noise,
            distractors: s.distractors,
        }
    }
}

impl SynthSection {
    pub fn to_synth_config(&self) -> SynthConfig {
        SynthConfig {
            num_images: self.num_images,
            image_size: self.image_size,
            classes: self.classes.clone(),
            shapes_per_image: self.shapes_per_image,
            coarse_erosion: self.coarse_erosion,
            seed: self.seed,
            proposal_noise: self.proposal_noise,
            distractors: self.distractors,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Point-stage sampling sources, any of "fine" / "coarse".
    pub annotation_sources: Vec<String>,
    pub points_per_image: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
    /// Point rule for per-epoch val accuracy ("highest" / "central" /
    /// "random"); absent disables per-epoch evaluation.
    pub val_eval: Option<String>,
    /// Stop early once val accuracy reaches this level.
    pub stop_at_val: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            annotation_sources: vec!["fine".into()],
            points_per_image: 64,
            epochs: 10,
            batch_size: 1,
            momentum: 0.0,
            seed: 7,
            val_eval: None,
            stop_at_val: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub point_rule: String,
    pub object_thresh: f64,
    pub overlap_thresh: f64,
    pub score_thresh: f64,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            point_rule: "highest".into(),
            object_thresh: 0.8,
            overlap_thresh: 0.8,
            score_thresh: 0.05,
            seed: 7,
        }
    }
}

impl RunConfig {
    /// Load from a JSON file, or defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {}", p.display(), e)))
            }
        }
    }

    /// Override every section seed (the CLI `--seed` flag).
    pub fn apply_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
    }

    pub fn to_train_config(&self, stage: TrainStage) -> Result<TrainConfig> {
        let annotation_sources = match stage {
            TrainStage::Box => vec![AnnotationSource::Box],
            TrainStage::Point => self
                .train
                .annotation_sources
                .iter()
                .map(|s| match s.as_str() {
                    "fine" => Ok(AnnotationSource::Fine),
                    "coarse" => Ok(AnnotationSource::Coarse),
                    other => Err(Error::Config(format!(
                        "unknown annotation source '{}' (want fine/coarse)",
                        other
                    ))),
                })
                .collect::<Result<Vec<_>>>()?,
        };
        let val_eval = match &self.train.val_eval {
            None => None,
            Some(rule) => Some(rule.parse()?),
        };
        Ok(TrainConfig {
            stage,
            annotation_sources,
            points_per_image: self.train.points_per_image,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            schedule: TrainSchedule {
                base_lr: self.schedule.base_lr,
                warmup_steps: self.schedule.warmup_steps,
                total_steps: self.schedule.total_steps,
                clip_norm: self.schedule.clip_norm,
            },
            momentum: self.train.momentum,
            seed: self.train.seed,
            val_eval,
            stop_at_val: self.train.stop_at_val,
        })
    }
}
