use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::{BlockKind, BlockWidths};
use crate::error::{Error, Result};
use crate::layers::NeuronParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub kind: BlockKind,
    pub repeat: usize,
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub num_classes: usize,
    #[serde(default = "default_conf")]
    pub conf_threshold: f64,
    #[serde(default = "default_iou")]
    pub iou_threshold: f64,
    /// Largest predictable box side, in cells.
    #[serde(default = "default_box_scale")]
    pub box_scale: f64,
}

fn default_conf() -> f64 {
    0.25
}
fn default_iou() -> f64 {
    0.5
}
fn default_box_scale() -> f64 {
    4.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    #[serde(default = "default_image")]
    pub image_size: usize,
    pub min_size: usize,
    pub max_size: usize,
    #[serde(default = "default_max_objects")]
    pub max_objects: usize,
    #[serde(default)]
    pub noise: f64,
}

fn default_image() -> usize {
    64
}
fn default_max_objects() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    #[serde(default = "default_box_weight")]
    pub box_weight: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Epochs of linear warm-up before cosine decay.
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_batch() -> usize {
    8
}
fn default_clip() -> f64 {
    10.0
}
fn default_box_weight() -> f64 {
    2.0
}

/// Architecture, neuron and head settings, plus optional dataset and
/// training sections for `train-toy`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageConfig>,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "D")]
    pub d: u32,
    pub beta: f64,
    /// Image intensities are multiplied by this before the first neuron layer.
    #[serde(default = "default_gain")]
    pub input_gain: f64,
    #[serde(default = "default_r")]
    pub expansion_ratio: usize,
    #[serde(default = "default_sep")]
    pub sep_expansion: usize,
    #[serde(default = "default_rep")]
    pub rep_hidden_ratio: usize,
    pub head: HeadConfig,
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

fn default_gain() -> f64 {
    4.0
}
fn default_r() -> usize {
    4
}
fn default_sep() -> usize {
    2
}
fn default_rep() -> usize {
    2
}

impl ModelConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn neuron(&self) -> NeuronParams {
        NeuronParams {
            beta: self.beta,
            ceiling: self.d,
        }
    }

    pub fn widths(&self) -> BlockWidths {
        BlockWidths {
            expansion_ratio: self.expansion_ratio,
            sep_expansion: self.sep_expansion,
            rep_hidden_ratio: self.rep_hidden_ratio,
        }
    }

    /// Cumulative stride after the stem (which always halves resolution).
    pub fn stage_strides(&self) -> Vec<usize> {
        let mut s = 2;
        self.stages
            .iter()
            .map(|st| {
                s *= st.stride;
                s
            })
            .collect()
    }

    /// Strides of the two detection scales.
    pub fn head_strides(&self) -> [usize; 2] {
        let s = self.stage_strides();
        [s[s.len() - 2], s[s.len() - 1]]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages.len() < 2 {
            return bad("at least two stages are required (heads sit on the last two)".into());
        }
        if self.t == 0 || self.d == 0 {
            return bad(format!("T and D must be positive, got T={} D={}", self.t, self.d));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !self.input_gain.is_finite() || self.input_gain <= 0.0 {
            return bad(format!("input_gain must be positive, got {}", self.input_gain));
        }
        if self.in_channels == 0 || self.stem_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.expansion_ratio == 0 || self.sep_expansion == 0 || self.rep_hidden_ratio == 0 {
            return bad("width multipliers must be positive".into());
        }
        let mut seen_block2 = false;
        for (i, st) in self.stages.iter().enumerate() {
            if st.repeat == 0 || st.channels == 0 || st.stride == 0 {
                return bad(format!("stage {i}: repeat, channels and stride must be positive"));
            }
            match st.kind {
                BlockKind::Block2 => seen_block2 = true,
                BlockKind::Block1 if seen_block2 => {
                    return bad(format!("stage {i}: block1 stages must precede block2 stages"));
                }
                BlockKind::Block1 => {}
            }
        }
        if self.stages.last().map(|s| s.stride) != Some(2) {
            return bad("the last stage must have stride 2 so the neck can upsample by 2".into());
        }
        let total = *self.stage_strides().last().expect("stages");
        if self.image_size == 0 || self.image_size % total != 0 {
            return bad(format!("image_size {} is not divisible by total stride {total}", self.image_size));
        }
        let h = &self.head;
        if h.num_classes == 0 {
            return bad("head.num_classes must be positive".into());
        }
        if !(0.0..=1.0).contains(&h.conf_threshold) || !(0.0..=1.0).contains(&h.iou_threshold) {
            return bad("head thresholds must lie in [0, 1]".into());
        }
        if !(h.box_scale > 0.0) {
            return bad("head.box_scale must be positive".into());
        }
        if let Some(ds) = &self.dataset {
            if ds.min_size == 0 || ds.min_size > ds.max_size || ds.max_size >= ds.image_size {
                return bad("dataset sizes must satisfy 0 < min_size <= max_size < image_size".into());
            }
            if ds.image_size != self.image_size {
                return bad("dataset.image_size must equal image_size".into());
            }
            if ds.max_objects == 0 {
                return bad("dataset.max_objects must be positive".into());
            }
        }
        if let Some(tr) = &self.train {
            if tr.batch_size == 0 || !(tr.lr >= 0.0) || !(0.0..1.0).contains(&tr.momentum) {
                return bad("train: batch_size > 0, lr >= 0, momentum in [0, 1) required".into());
            }
        }
        Ok(())
    }
}
