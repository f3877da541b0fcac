//! End-to-end multi-view classifier: shared backbone over flattened
//! `(batch, view)` clips, cross-view fusion, linear head.

use std::collections::HashMap;

use crate::backbone::Backbone;
use crate::config::SkillFormerConfig;
use crate::error::{Error, Result};
use crate::fusion::{CrossViewFusion, Mode};
use crate::layers::{Init, Linear};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::ParamStore;

/// Std of the classification head's initial weights.
pub const HEAD_INIT_STD: f64 = 0.01;

/// Synchronized multi-view clips `[B, V, T, C, H, W]` with labels.
#[derive(Clone, Debug)]
pub struct ViewBatch {
    pub clips: Tensor,
    pub labels: Vec<usize>,
    pub scenarios: Vec<u8>,
}

impl ViewBatch {
    pub fn batch(&self) -> usize {
        self.clips.shape()[0]
    }

    pub fn views(&self) -> usize {
        self.clips.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub trainable: usize,
    pub frozen: usize,
    pub total: usize,
}

#[derive(Clone, Debug)]
pub struct SkillFormer {
    pub cfg: SkillFormerConfig,
    pub backbone: Backbone,
    pub fusion: CrossViewFusion,
    pub head: Linear,
}

impl SkillFormer {
    /// Fresh model with LoRA adapters; trainable parts drawn from `seed`.
    pub fn new(cfg: &SkillFormerConfig, seed: u64) -> Result<(Self, ParamStore)> {
        Self::build(cfg, true, seed)
    }

    /// Build the model, with or without adapters on the backbone.
    pub fn build(cfg: &SkillFormerConfig, adapters: bool, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut backbone = Backbone::new(&mut store, &cfg.backbone)?;
        let mut rng = crate::rng::stream(seed, 1);
        if adapters {
            backbone.add_lora(&mut store, &cfg.lora, &mut rng)?;
        }
        let fusion = CrossViewFusion::new(&mut store, cfg.backbone.embed_dim, &cfg.fusion, &mut rng)?;
        let head = Linear::new(
            &mut store,
            "head",
            cfg.fusion.out_dim,
            cfg.num_classes,
            Init::Gaussian(HEAD_INIT_STD),
            true,
            &mut rng,
        );
        Ok((
            Self {
                cfg: cfg.clone(),
                backbone,
                fusion,
                head,
            },
            store,
        ))
    }

    /// Rebuild a model whose tensors come from `values` (name -> tensor).
    /// Every parameter must be present with a matching shape and no extra
    /// names are allowed.
    pub fn from_named(
        cfg: &SkillFormerConfig,
        adapters: bool,
        mut values: HashMap<String, Tensor>,
    ) -> Result<(Self, ParamStore)> {
        let (model, mut store) = Self::build(cfg, adapters, 0)?;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.get(id).name.clone();
            let t = values
                .remove(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != store.value(id).shape() {
                return Err(Error::Config(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = t;
        }
        if let Some(extra) = values.keys().next() {
            return Err(Error::Config(format!("unexpected tensor {extra} for this configuration")));
        }
        Ok((model, store))
    }

    pub fn has_adapters(&self) -> bool {
        self.backbone.dense_layers().any(|l| l.adapter.is_some())
    }

    /// Logits `[B, classes]` for clips `[B, V, T, C, H, W]`.
    pub fn forward(&self, tape: &mut Tape<'_>, clips: &Tensor, mode: &Mode) -> Result<Var> {
        let s = clips.shape();
        if s.len() != 6 {
            return Err(Error::Dimension(format!("expected [B, V, T, C, H, W] clips, got {s:?}")));
        }
        let (b, v) = (s[0], s[1]);
        if v != self.cfg.views {
            return Err(Error::Contract(format!(
                "model configured for {} views, batch has {v}",
                self.cfg.views
            )));
        }
        let flat = clips.clone().reshape(vec![b * v, s[2], s[3], s[4], s[5]])?;
        let feats = self.backbone.encode(tape, &flat)?;
        let fused = self.fusion.fuse(tape, feats, b, v, mode)?;
        tape.set_scope("head");
        self.head.forward(tape, fused)
    }

    pub fn logits(&self, store: &ParamStore, clips: &Tensor, mode: &Mode) -> Result<Tensor> {
        let mut tape = Tape::new(store);
        let out = self.forward(&mut tape, clips, mode)?;
        Ok(tape.value(out).clone())
    }

    /// Equivalent model with every adapter folded into its base weight.
    pub fn merged(&self, store: &ParamStore) -> Result<(Self, ParamStore)> {
        let mut merged_weights = HashMap::new();
        for layer in self.backbone.dense_layers() {
            if layer.adapter.is_some() {
                merged_weights.insert(store.get(layer.base.weight).name.clone(), layer.merged_weight(store)?);
            }
        }
        let values = store
            .iter()
            .filter(|(_, p)| !p.name.ends_with(".lora_A") && !p.name.ends_with(".lora_B"))
            .map(|(_, p)| {
                let v = merged_weights.remove(&p.name).unwrap_or_else(|| p.value.clone());
                (p.name.clone(), v)
            })
            .collect();
        Self::from_named(&self.cfg, false, values)
    }

    /// Trainable = adapters + fusion + head; frozen = backbone base.
    pub fn count_params(store: &ParamStore) -> ParamCounts {
        let (trainable, frozen) = store.counts();
        ParamCounts {
            trainable,
            frozen,
            total: trainable + frozen,
        }
    }
}

/// Arg-max class per row; ties go to the lowest index.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    let c = logits.last_dim();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
