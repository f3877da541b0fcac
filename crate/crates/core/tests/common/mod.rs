//! Tiny configurations shared by the slower integration tests.
#![allow(dead_code)]

use skillformer::config::{BackboneConfig, FusionConfig, LoraConfig, Preset, RunConfig};
use skillformer::data::{generate, Dataset, SyntheticSpec};
use skillformer::exec::Exec;

pub fn tiny_run() -> RunConfig {
    let mut cfg = RunConfig::preset(Preset::Desk);
    cfg.model.views = 2;
    cfg.model.frames = 2;
    cfg.model.lora = LoraConfig { rank: 2, alpha: 4.0 };
    cfg.model.backbone = BackboneConfig {
        image_size: 16,
        patch_size: 8,
        channels: 1,
        embed_dim: 16,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        pretrain_frames: 4,
        init_seed: 1,
    };
    cfg.model.fusion = FusionConfig {
        hidden: 16,
        out_dim: 16,
        heads: 2,
        dropout: 0.1,
    };
    cfg.train.epochs = 2;
    cfg.train.batch_size = 8;
    cfg.train.lr = 3e-3;
    cfg
}

pub fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec {
        views: 2,
        frames: 4,
        image_size: 20,
        ..SyntheticSpec::default()
    }
}

pub fn tiny_data(n: usize, seed: u64) -> Dataset {
    generate(&tiny_spec(), n, seed, Exec::default()).unwrap()
}
