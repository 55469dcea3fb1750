//! Model, pretraining and fine-tuning configuration.
//!
//! Files are TOML with one table per section (`[model.cnn]`, `[model.vit]`,
//! `[model.decoder]`, `[pretrain]`, `[finetune]`); missing keys fall back to the
//! desk-scale defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnConfig {
    pub num_stages: usize,
    pub channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub kernel_size: usize,
    pub expansion_ratio: usize,
    /// Downsampling between the input and stage 1.
    pub stem_stride: usize,
    /// Normalization groups per stage; `None` means one group per channel.
    pub norm_groups: Option<usize>,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            num_stages: 4,
            channels: vec![16, 32, 64, 128],
            blocks_per_stage: 1,
            kernel_size: 3,
            expansion_ratio: 2,
            stem_stride: 2,
            norm_groups: None,
        }
    }
}

/// Pooling factor between consecutive CNN stages.
pub const STAGE_POOL: usize = 2;

impl CnnConfig {
    /// `[stem, stage1→2, ..]`, the stride list the mask pyramid is built from.
    pub fn strides(&self) -> Vec<usize> {
        std::iter::once(self.stem_stride)
            .chain(std::iter::repeat_n(STAGE_POOL, self.num_stages.saturating_sub(1)))
            .collect()
    }

    pub fn total_stride(&self) -> usize {
        self.strides().iter().product()
    }

    pub fn groups_for(&self, channels: usize) -> usize {
        self.norm_groups.unwrap_or(channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_stages < 2 {
            return Err(Error::Config(format!("cnn.num_stages must be >= 2, got {}", self.num_stages)));
        }
        if self.channels.len() != self.num_stages {
            return Err(Error::Config(format!(
                "cnn.channels has {} entries for {} stages",
                self.channels.len(),
                self.num_stages
            )));
        }
        if self.channels.windows(2).any(|w| w[0] >= w[1]) || self.channels[0] == 0 {
            return Err(Error::Config(format!("cnn.channels must be strictly increasing, got {:?}", self.channels)));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("cnn.kernel_size must be odd, got {}", self.kernel_size)));
        }
        if self.blocks_per_stage == 0 || self.expansion_ratio == 0 || self.stem_stride == 0 {
            return Err(Error::Config("cnn.blocks_per_stage, expansion_ratio and stem_stride must be >= 1".into()));
        }
        for &c in &self.channels {
            let g = self.groups_for(c);
            if g == 0 || c % g != 0 {
                return Err(Error::Config(format!("cnn.norm_groups {g} does not divide {c} channels")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            embed_dim: 192,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "vit.heads {} must divide vit.embed_dim {}",
                self.heads, self.embed_dim
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("vit.mlp_ratio must be >= 1".into()));
        }
        Ok(())
    }
}

/// How decoder scales are fused.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    /// Concat with the projected skip feature, then two fusion convolutions.
    Concat,
    /// Elementwise addition of the projected skip feature.
    Add,
    /// No skip connections: upsampling chain only.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Per-scale projection widths; `None` mirrors the encoder channels.
    pub widths: Option<Vec<usize>>,
    pub fusion: Fusion,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            widths: None,
            fusion: Fusion::Concat,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Crop / input volume extent `[D, H, W]`.
    pub input_shape: [usize; 3],
    pub cnn: CnnConfig,
    pub vit: VitConfig,
    pub decoder: DecoderConfig,
    pub norm_eps: f64,
    /// Hidden width of the full-resolution segmentation head.
    pub seg_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_shape: [32, 32, 32],
            cnn: CnnConfig::default(),
            vit: VitConfig::default(),
            decoder: DecoderConfig::default(),
            norm_eps: 1e-5,
            seg_hidden: 8,
        }
    }
}

impl ModelConfig {
    /// 16³ input, two stages, a few channels: small enough for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            input_shape: [16, 16, 16],
            cnn: CnnConfig {
                num_stages: 2,
                channels: vec![2, 4],
                expansion_ratio: 2,
                ..CnnConfig::default()
            },
            vit: VitConfig { embed_dim: 4, depth: 1, heads: 2, mlp_ratio: 2 },
            decoder: DecoderConfig::default(),
            norm_eps: 1e-5,
            seg_hidden: 2,
        }
    }

    pub fn decoder_widths(&self) -> Vec<usize> {
        self.decoder.widths.clone().unwrap_or_else(|| self.cnn.channels.clone())
    }

    /// Spatial extent of stage `i` (1-based).
    pub fn stage_shape(&self, i: usize) -> [usize; 3] {
        let s: usize = self.cnn.strides()[..i].iter().product();
        self.input_shape.map(|e| e / s)
    }

    pub fn junction_shape(&self) -> [usize; 3] {
        self.stage_shape(self.cnn.num_stages)
    }

    pub fn junction_cells(&self) -> usize {
        self.junction_shape().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        self.cnn.validate()?;
        self.vit.validate()?;
        crate::mask::junction_shape(&self.cnn.strides(), self.input_shape)?;
        let widths = self.decoder_widths();
        if widths.len() != self.cnn.num_stages || widths.contains(&0) {
            return Err(Error::Config(format!(
                "decoder.widths needs {} non-zero entries, got {widths:?}",
                self.cnn.num_stages
            )));
        }
        if self.seg_hidden == 0 {
            return Err(Error::Config("model.seg_hidden must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mask_ratio: f64,
    pub lr: f64,
    pub lr_min: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    /// `false` selects independently sampled per-scale masks (ablation arm).
    pub bottom_up: bool,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.75,
            lr: 1e-4,
            lr_min: 1e-6,
            betas: [0.9, 0.95],
            weight_decay: 0.05,
            adam_eps: 1e-8,
            steps: 200,
            batch_size: 2,
            seed: 0,
            precision: Precision::F32,
            bottom_up: true,
            init_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio must lie in [0, 1), got {}", self.mask_ratio)));
        }
        if !(self.lr >= 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr.max(self.lr_min)) {
            return Err(Error::Config(format!("invalid learning rates lr={} lr_min={}", self.lr, self.lr_min)));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("steps and batch_size must be >= 1".into()));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got {:?}", self.betas)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub init_seed: u64,
    /// Steps per logged epoch; train Dice is evaluated at the end of each.
    pub eval_every: usize,
    /// Stop once the train Dice exceeds this value.
    pub stop_at_dice: Option<f64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            lr_min: 1e-5,
            betas: [0.9, 0.999],
            weight_decay: 1e-4,
            adam_eps: 1e-8,
            steps: 500,
            batch_size: 2,
            seed: 0,
            init_seed: 1,
            eval_every: 25,
            stop_at_dice: None,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || self.lr_min < 0.0 {
            return Err(Error::Config("finetune learning rates must be >= 0".into()));
        }
        if self.batch_size == 0 || self.steps == 0 || self.eval_every == 0 {
            return Err(Error::Config("finetune steps, batch_size and eval_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything a run needs; serialized into every output artifact.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: FinetuneConfig,
}

impl RunConfig {
    /// Desk-scale defaults: 32³ crops, batch 2, 200 pretraining steps.
    pub fn desk() -> Self {
        Self::default()
    }

    /// Full-scale numbers for documentation: 96³ crops, batch 8, lr 1e-4.
    /// Steps stand in for 100 epochs and depend on corpus size.
    pub fn paper_scale() -> Self {
        let mut c = Self::default();
        c.model.input_shape = [96, 96, 96];
        c.pretrain.batch_size = 8;
        c.pretrain.lr = 1e-4;
        c
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-scale" => Ok(Self::paper_scale()),
            other => Err(Error::Config(format!("unknown profile {other:?} (expected desk or paper-scale)"))),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = RunConfig::desk();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml_str(&c.to_toml()).unwrap(), c);
        RunConfig::paper_scale().validate().unwrap();
    }

    #[test]
    fn geometry() {
        let c = ModelConfig::default();
        assert_eq!(c.cnn.strides(), vec![2, 2, 2, 2]);
        assert_eq!(c.stage_shape(1), [16, 16, 16]);
        assert_eq!(c.junction_shape(), [2, 2, 2]);
        let p = RunConfig::paper_scale();
        assert_eq!(p.model.junction_shape(), [6, 6, 6]);
    }

    #[test]
    fn sections_override_defaults() {
        let c = RunConfig::from_toml_str(
            "[model.cnn]\nchannels = [8, 16, 24, 32]\n[pretrain]\nmask_ratio = 0.5\n",
        )
        .unwrap();
        assert_eq!(c.model.cnn.channels, vec![8, 16, 24, 32]);
        assert_eq!(c.pretrain.mask_ratio, 0.5);
        assert_eq!(c.pretrain.lr, 1e-4);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml_str("[pretrain]\nmask_ratio = 1.0\n").is_err());
        assert!(RunConfig::from_toml_str("[model.vit]\nheads = 5\n").is_err());
        assert!(RunConfig::from_toml_str("[model.cnn]\nchannels = [16, 16, 32, 64]\n").is_err());
        assert!(RunConfig::from_toml_str("[model]\ninput_shape = [30, 32, 32]\n").is_err());
        assert!(RunConfig::from_toml_str("[bogus]\nx = 1\n").is_err());
    }
}
