//! Declarative run configuration: one TOML file, with command-line flags
//! taking precedence over file values.

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use bpt_core::learning::{OptimizerKind, Schedule, Task, TrainConfig};
use bpt_core::model::{AttnThreshold, ModelConfig, Twin};

use crate::synth::PlacesParams;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// "synthetic-classification", "synthetic-places", or "manifest".
    pub kind: String,
    pub path: Option<String>,
    pub n_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub points_per_cloud: usize,
    pub n_places: usize,
    pub revisits_per_place: usize,
    pub yaw_range: f64,
    pub noise_sigma: f64,
    pub dropout_max_angle: f64,
    pub grid_spacing: f64,
    pub pos_threshold: f64,
    pub neg_threshold: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let p = PlacesParams::default();
        DatasetSection {
            kind: String::new(),
            path: None,
            n_classes: 4,
            train_per_class: 50,
            test_per_class: 20,
            points_per_cloud: 256,
            n_places: p.n_places,
            revisits_per_place: p.revisits_per_place,
            yaw_range: p.yaw_range,
            noise_sigma: p.noise_sigma,
            dropout_max_angle: p.dropout_max_angle,
            grid_spacing: p.grid_spacing,
            pos_threshold: p.pos_threshold,
            neg_threshold: p.neg_threshold,
        }
    }
}

impl DatasetSection {
    pub fn places_params(&self) -> PlacesParams {
        PlacesParams {
            n_places: self.n_places,
            revisits_per_place: self.revisits_per_place,
            points_per_cloud: self.points_per_cloud,
            yaw_range: self.yaw_range,
            noise_sigma: self.noise_sigma,
            dropout_max_angle: self.dropout_max_angle,
            grid_spacing: self.grid_spacing,
            pos_threshold: self.pos_threshold,
            neg_threshold: self.neg_threshold,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// "desk-classifier", "desk-descriptor", or "reference-classification".
    pub preset: String,
    /// "binary" or "fp".
    pub twin: String,
    /// "paper" (0.5) or "median" (extension).
    pub attn_threshold: String,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: String::new(),
            twin: "binary".into(),
            attn_threshold: "paper".into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    /// "sgd" or "adam".
    pub optimizer: String,
    pub lr: f64,
    pub momentum: f64,
    /// "cosine" or "linear".
    pub schedule: String,
    pub lr_min: f64,
    pub lr_final: f64,
    pub gamma: f64,
    pub theta: f64,
    pub n_positives: usize,
    pub n_negatives: usize,
    pub anchors_per_epoch: Option<usize>,
    pub label_smoothing: f64,
    pub shadow_clip: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 0, // per-command default applied if 0
            batch_size: 32,
            optimizer: String::new(),
            lr: 0.0,
            momentum: 0.9,
            schedule: String::new(),
            lr_min: 0.0,
            lr_final: 1e-5,
            gamma: 0.5,
            theta: 0.2,
            n_positives: 2,
            n_negatives: 8,
            anchors_per_epoch: None,
            label_smoothing: 0.2,
            shadow_clip: 1.05,
            grad_clip: 5.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub positive_radius: f64,
    pub fps_seed: usize,
    pub bops_divisor: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { positive_radius: 0.5, fps_seed: 0, bops_divisor: 64 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Resolve the model configuration (preset + twin + threshold).
    pub fn model_config(&self, default_preset: &str) -> anyhow::Result<ModelConfig> {
        let preset = if self.model.preset.is_empty() {
            default_preset
        } else {
            self.model.preset.as_str()
        };
        let mut cfg = match preset {
            "desk-classifier" => ModelConfig::desk_classifier(self.dataset.n_classes),
            "desk-descriptor" => ModelConfig::desk_descriptor(),
            "reference-classification" => {
                ModelConfig::reference_classification(self.dataset.n_classes.max(40))
            }
            other => bail!("unknown model preset {other:?}"),
        };
        cfg.twin = match self.model.twin.as_str() {
            "binary" => Twin::Binary,
            "fp" => Twin::FullPrecision,
            other => bail!("unknown twin {other:?} (use binary|fp)"),
        };
        cfg.attn_threshold = match self.model.attn_threshold.as_str() {
            "paper" => AttnThreshold::PaperLiteral,
            "median" => AttnThreshold::MedianPerRow,
            other => bail!("unknown attn_threshold {other:?} (use paper|median)"),
        };
        cfg.n_points = self.dataset.points_per_cloud;
        Ok(cfg)
    }

    /// Resolve the training configuration for a task, filling recipe defaults
    /// for unset fields.
    pub fn train_config(&self, task: Task, seed: u64) -> anyhow::Result<TrainConfig> {
        let mut cfg = match task {
            Task::Classification => {
                TrainConfig::classification(if self.train.epochs == 0 { 60 } else { self.train.epochs })
            }
            Task::PlaceRecognition => {
                TrainConfig::place_recognition(if self.train.epochs == 0 { 20 } else { self.train.epochs })
            }
        };
        cfg.batch_size = self.train.batch_size;
        cfg.gamma = self.train.gamma;
        cfg.theta = self.train.theta;
        cfg.n_positives = self.train.n_positives;
        cfg.n_negatives = self.train.n_negatives;
        cfg.anchors_per_epoch = self.train.anchors_per_epoch;
        cfg.label_smoothing = self.train.label_smoothing;
        cfg.shadow_clip = self.train.shadow_clip;
        cfg.grad_clip = if self.train.grad_clip > 0.0 { Some(self.train.grad_clip) } else { None };
        cfg.seed = seed;
        if !self.train.optimizer.is_empty() {
            let lr_default = match task {
                Task::Classification => 0.01,
                Task::PlaceRecognition => 5e-5,
            };
            let lr = if self.train.lr > 0.0 { self.train.lr } else { lr_default };
            cfg.optimizer = match self.train.optimizer.as_str() {
                "sgd" => OptimizerKind::Sgd { lr, momentum: self.train.momentum },
                "adam" => OptimizerKind::Adam { lr },
                other => bail!("unknown optimizer {other:?} (use sgd|adam)"),
            };
        } else if self.train.lr > 0.0 {
            cfg.optimizer = match cfg.optimizer {
                OptimizerKind::Sgd { momentum, .. } => {
                    OptimizerKind::Sgd { lr: self.train.lr, momentum }
                }
                OptimizerKind::Adam { .. } => OptimizerKind::Adam { lr: self.train.lr },
            };
        }
        if !self.train.schedule.is_empty() {
            cfg.schedule = match self.train.schedule.as_str() {
                "cosine" => Schedule::Cosine { lr_min: self.train.lr_min },
                "linear" => Schedule::LinearDecay { lr_final: self.train.lr_final },
                other => bail!("unknown schedule {other:?} (use cosine|linear)"),
            };
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = RunConfig::default();
        let mc = cfg.model_config("desk-classifier").unwrap();
        assert_eq!(mc.twin, Twin::Binary);
        let tc = cfg.train_config(Task::Classification, 7).unwrap();
        assert_eq!(tc.batch_size, 32);
        assert_eq!(tc.seed, 7);
    }

    #[test]
    fn toml_roundtrip_and_unknown_keys_rejected() {
        let text = r#"
[dataset]
kind = "synthetic-classification"
n_classes = 3

[model]
preset = "desk-classifier"
twin = "fp"

[train]
epochs = 5
optimizer = "adam"
lr = 0.001
"#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.dataset.n_classes, 3);
        let mc = cfg.model_config("desk-classifier").unwrap();
        assert_eq!(mc.twin, Twin::FullPrecision);
        let tc = cfg.train_config(Task::Classification, 0).unwrap();
        assert_eq!(tc.optimizer, OptimizerKind::Adam { lr: 0.001 });

        let bad = "[dataset]\nmystery = 1\n";
        assert!(toml::from_str::<RunConfig>(bad).is_err());
    }
}
