//! Model and training configuration, named presets, and the config-file
//! schema (TOML, unknown keys rejected).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Divided space-time backbone geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Frame count the temporal embedding table was learned at.
    pub pretrain_frames: usize,
    /// Seed for the frozen base weights.
    pub init_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneConfig {
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 1,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            pretrain_frames: 8,
            init_seed: 0,
        }
    }

    /// Full-size reference geometry (ViT-B/16 on 224px RGB, 8 pretraining frames).
    pub fn paper_scale() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            pretrain_frames: 8,
            init_seed: 0,
        }
    }

    pub fn patches_per_frame(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return cfg_err(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return cfg_err(format!(
                "image_size {} must be divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.pretrain_frames == 0 || self.channels == 0 || self.depth == 0 || self.mlp_ratio == 0 {
            return cfg_err("pretrain_frames, channels, depth and mlp_ratio must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub hidden: usize,
    pub out_dim: usize,
    pub heads: usize,
    pub dropout: f64,
}

/// Named configuration presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    Ego,
    Exos,
    EgoExos,
    #[serde(rename = "desk")]
    Desk,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Ego, Preset::Exos, Preset::EgoExos, Preset::Desk];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Ego => "Ego",
            Preset::Exos => "Exos",
            Preset::EgoExos => "EgoExos",
            Preset::Desk => "desk",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown preset {name:?} (expected Ego, Exos, EgoExos or desk)"
                ))
            })
    }

    /// Scaling-strategy row: `(views, frames, rank, alpha, hidden, lr)`.
    pub fn scaling_row(self) -> (usize, usize, usize, f64, usize, f64) {
        match self {
            Preset::Ego => (1, 32, 32, 64.0, 1536, 5e-5),
            Preset::Exos => (4, 24, 48, 96.0, 2048, 3e-5),
            Preset::EgoExos => (5, 16, 64, 128.0, 2560, 2e-5),
            Preset::Desk => (5, 4, 4, 8.0, 128, 2e-3),
        }
    }

    pub fn model(self) -> SkillFormerConfig {
        let (views, frames, rank, alpha, hidden, _) = self.scaling_row();
        let backbone = BackboneConfig::desk();
        let heads = match self {
            Preset::Desk => 4,
            _ => 16,
        };
        SkillFormerConfig {
            preset: self.name().to_string(),
            views,
            frames,
            lora: LoraConfig { rank, alpha },
            fusion: FusionConfig {
                hidden,
                out_dim: backbone.embed_dim,
                heads,
                dropout: 0.1,
            },
            num_classes: 4,
            backbone,
        }
    }

    pub fn train(self) -> TrainConfig {
        TrainConfig {
            lr: self.scaling_row().5,
            ..TrainConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkillFormerConfig {
    pub preset: String,
    pub views: usize,
    pub frames: usize,
    pub lora: LoraConfig,
    pub fusion: FusionConfig,
    pub num_classes: usize,
    pub backbone: BackboneConfig,
}

impl SkillFormerConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.views == 0 || self.frames == 0 {
            return cfg_err("views and frames must be positive");
        }
        let d = self.backbone.embed_dim;
        if self.fusion.heads == 0 || d % self.fusion.heads != 0 {
            return cfg_err(format!(
                "fusion heads {} must divide feature dim {d}",
                self.fusion.heads
            ));
        }
        if self.fusion.out_dim < 2 {
            return cfg_err("fusion out_dim must be at least 2");
        }
        if self.fusion.hidden == 0 {
            return cfg_err("fusion hidden must be positive");
        }
        if !(0.0..1.0).contains(&self.fusion.dropout) {
            return cfg_err("dropout must lie in [0, 1)");
        }
        if self.num_classes < 2 {
            return cfg_err("need at least two classes");
        }
        // every wrapped layer has in >= d and out >= d
        if self.lora.rank == 0 || self.lora.rank > d {
            return cfg_err(format!(
                "LoRA rank {} outside 1..={d} for the backbone's {d}-wide layers",
                self.lora.rank
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 16,
            lr: 5e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return cfg_err("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return cfg_err("val_fraction must lie in [0, 1)");
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return cfg_err("lr and weight_decay must be non-negative");
        }
        Ok(())
    }
}

/// Fully resolved configuration of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: SkillFormerConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        Self {
            model: preset.model(),
            train: preset.train(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

/// On-disk config file: a preset plus optional overrides.
///
/// ```toml
/// preset = "desk"
/// [model]
/// frames = 8
/// [train]
/// epochs = 10
/// ```
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: String,
    #[serde(default)]
    pub model: ModelOverrides,
    #[serde(default)]
    pub backbone: BackboneOverrides,
    #[serde(default)]
    pub train: TrainOverrides,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub views: Option<usize>,
    pub frames: Option<usize>,
    pub lora_rank: Option<usize>,
    pub lora_alpha: Option<f64>,
    pub fusion_hidden: Option<usize>,
    pub fusion_out_dim: Option<usize>,
    pub fusion_heads: Option<usize>,
    pub dropout: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneOverrides {
    pub image_size: Option<usize>,
    pub patch_size: Option<usize>,
    pub channels: Option<usize>,
    pub embed_dim: Option<usize>,
    pub depth: Option<usize>,
    pub heads: Option<usize>,
    pub mlp_ratio: Option<usize>,
    pub pretrain_frames: Option<usize>,
    pub init_seed: Option<u64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    pub seed: Option<u64>,
    pub val_fraction: Option<f64>,
}

macro_rules! apply {
    ($dst:expr, $src:expr, $($field:ident),+) => {
        $( if let Some(v) = $src.$field { $dst.$field = v; } )+
    };
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let location = e
                .span()
                .map(|s| {
                    let line = text[..s.start].matches('\n').count() + 1;
                    format!("line {line}, offset {}", s.start)
                })
                .unwrap_or_else(|| "unknown location".into());
            Error::Parse {
                location,
                message: e.message().to_string(),
            }
        })
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let preset = Preset::parse(&self.preset)?;
        let mut run = RunConfig::preset(preset);
        let m = &mut run.model;
        apply!(m, self.model, views, frames);
        if let Some(r) = self.model.lora_rank {
            m.lora.rank = r;
        }
        if let Some(a) = self.model.lora_alpha {
            m.lora.alpha = a;
        }
        if let Some(h) = self.model.fusion_hidden {
            m.fusion.hidden = h;
        }
        if let Some(h) = self.model.fusion_heads {
            m.fusion.heads = h;
        }
        if let Some(p) = self.model.dropout {
            m.fusion.dropout = p;
        }
        let b = &mut m.backbone;
        apply!(
            b,
            self.backbone,
            image_size,
            patch_size,
            channels,
            embed_dim,
            depth,
            heads,
            mlp_ratio,
            pretrain_frames,
            init_seed
        );
        // output dim tracks the backbone width unless overridden
        m.fusion.out_dim = self.model.fusion_out_dim.unwrap_or(m.backbone.embed_dim);
        let t = &mut run.train;
        apply!(
            t,
            self.train,
            epochs,
            batch_size,
            lr,
            weight_decay,
            beta1,
            beta2,
            adam_eps,
            seed,
            val_fraction
        );
        run.validate()?;
        Ok(run)
    }
}

pub(crate) fn cfg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
