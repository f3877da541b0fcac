mod common;

use skillformer::checkpoint::{Checkpoint, FORMAT_VERSION};
use skillformer::fusion::Mode;
use skillformer::model::SkillFormer;
use skillformer::numerics::Tensor;
use skillformer::rng;
use skillformer::Error;

fn trained_like() -> Checkpoint {
    let cfg = common::tiny_run();
    let (model, mut store) = SkillFormer::new(&cfg.model, 3).unwrap();
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).trainable).collect();
    let mut r = rng::seeded(4);
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        let noise = Tensor::randn(shape, 0.05, &mut r);
        store.value_mut(id).add_assign(&noise);
    }
    Checkpoint::from_model(&cfg, &model, &store)
}

#[test]
fn round_trip_is_byte_identical() {
    let ck = trained_like();
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(&bytes[..4], b"SKFM");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.skfm");
    ck.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
}

#[test]
fn unknown_version_and_corruption_are_explicit_errors() {
    let bytes = trained_like().to_bytes();
    let mut v2 = bytes.clone();
    v2[4..8].copy_from_slice(&2u32.to_le_bytes());
    let err = Checkpoint::from_bytes(&v2).unwrap_err();
    assert!(err.to_string().contains("version 2"), "{err}");
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Parse { .. })));
    let mut magic = bytes;
    magic[..4].copy_from_slice(b"SKFD");
    assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Parse { .. })));
}

#[test]
fn adapter_names_and_merge() {
    let ck = trained_like();
    assert!(!ck.header.merged);
    assert!(ck.get("backbone.blocks.0.attn.qkv.lora_A").is_some());
    assert!(ck.get("backbone.blocks.0.mlp.fc2.lora_B").is_some());
    let merged = ck.merge().unwrap();
    assert!(merged.header.merged);
    assert!(merged.tensors.iter().all(|(n, _)| !n.contains("lora")));
    let (m1, s1) = ck.model().unwrap();
    let (m2, s2) = merged.model().unwrap();
    let b = &ck.header.model.backbone;
    let x = Tensor::randn([3, 2, 2, 1, b.image_size, b.image_size], 1.0, &mut rng::seeded(5));
    let a = m1.logits(&s1, &x, &Mode::Eval).unwrap();
    let c = m2.logits(&s2, &x, &Mode::Eval).unwrap();
    // merged weights are rounded to f32 on storage
    assert!(a.max_abs_diff(&c) < 1e-5);
}

#[test]
fn mismatched_tensors_are_config_errors() {
    let mut ck = trained_like();
    ck.tensors.pop();
    assert!(matches!(ck.model(), Err(Error::Config(_))));
    let mut ck = trained_like();
    ck.tensors[0].1 = Tensor::zeros([1]);
    assert!(matches!(ck.model(), Err(Error::Config(_))));
}
