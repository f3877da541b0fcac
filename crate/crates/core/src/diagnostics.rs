//! Finite-difference checks of every differentiable component, sized from
//! a model configuration.

use rand::Rng;

use crate::backbone::{DividedBlock, TokenLayout};
use crate::config::SkillFormerConfig;
use crate::error::Result;
use crate::fusion::{CrossViewFusion, Mode};
use crate::layers::{Init, Linear};
use crate::lora;
use crate::model::SkillFormer;
use crate::numerics::{grad_check, CheckOptions, GradCheckReport, RowGroups, Tape, Tensor, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng;

/// Pass threshold on the maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Coordinates probed per tensor in the larger cases.
const COORDS_PER_TENSOR: usize = 6;
/// The full model has dozens of tensors and the slowest forward pass.
const MODEL_COORDS_PER_TENSOR: usize = 2;

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub case: &'static str,
    pub report: GradCheckReport,
}

/// Suite result for one seed.
#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub seed: u64,
    pub cases: Vec<CaseReport>,
}

impl SuiteReport {
    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < GRADCHECK_TOLERANCE
    }
}

/// Scalar probe `sum(out * r)` with a fixed random `r`, so every output
/// coordinate contributes with its own weight.
fn project(tape: &mut Tape<'_>, out: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv)?;
    Ok(tape.sum(prod))
}

fn probe_like(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Give every LoRA up-projection a nonzero value so the adapter path has
/// gradient flowing through both factors.
fn perturb_adapters(store: &mut ParamStore, rng: &mut impl Rng) {
    let ids: Vec<ParamId> = store
        .ids()
        .filter(|&id| store.get(id).name.ends_with(".lora_B"))
        .collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::randn(shape, 0.1, rng);
    }
}

fn opts(seed: u64, max_coords: Option<usize>) -> CheckOptions {
    CheckOptions {
        max_coords,
        seed,
        ..CheckOptions::default()
    }
}

fn check_linear(cfg: &SkillFormerConfig, seed: u64) -> Result<GradCheckReport> {
    let mut rng = rng::stream(seed, 10);
    let d = cfg.backbone.embed_dim.min(16);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "linear", d, d + 3, Init::UniformFanIn, true, &mut rng);
    let x = store.add("x", Tensor::randn([5, d], 1.0, &mut rng), true);
    let r = probe_like(&[5, d + 3], &mut rng);
    let ids: Vec<_> = store.ids().collect();
    grad_check(
        &mut store,
        &ids,
        |t| {
            let xv = t.param(x);
            let y = lin.forward(t, xv)?;
            project(t, y, &r)
        },
        opts(seed, None),
    )
}

fn check_attention(cfg: &SkillFormerConfig, seed: u64) -> Result<GradCheckReport> {
    let mut rng = rng::stream(seed, 11);
    let heads = cfg.backbone.heads;
    let d = heads * 4;
    let mut store = ParamStore::new();
    let qkv = store.add("qkv", Tensor::randn([7, 3 * d], 1.0, &mut rng), true);
    // interleaved groups, as in temporal attention, plus a singleton
    let groups = RowGroups::new(vec![vec![0, 2, 4], vec![1, 3, 5], vec![6]]);
    let r = probe_like(&[7, d], &mut rng);
    grad_check(
        &mut store,
        &[qkv],
        |t| {
            let q = t.param(qkv);
            let a = t.attention(q, &groups, heads)?;
            project(t, a, &r)
        },
        opts(seed, None),
    )
}

fn check_block(cfg: &SkillFormerConfig, seed: u64) -> Result<GradCheckReport> {
    let mut rng = rng::stream(seed, 12);
    let mut bcfg = cfg.backbone.clone();
    bcfg.embed_dim = bcfg.heads * 4;
    let mut store = ParamStore::new();
    let mut block = DividedBlock::new(&mut store, "block", &bcfg, &mut rng);
    block.qkv = lora::wrap(&mut store, block.qkv.base.clone(), cfg.lora.rank.min(4), cfg.lora.alpha, &mut rng)?;
    block.fc2 = lora::wrap(&mut store, block.fc2.base.clone(), cfg.lora.rank.min(4), cfg.lora.alpha, &mut rng)?;
    perturb_adapters(&mut store, &mut rng);
    let layout = TokenLayout::new(1, 3, 2);
    let x = store.add("x", Tensor::randn([layout.rows(), bcfg.embed_dim], 1.0, &mut rng), true);
    let r = probe_like(&[layout.rows(), bcfg.embed_dim], &mut rng);
    let ids: Vec<_> = store.ids().collect();
    grad_check(
        &mut store,
        &ids,
        |t| {
            let xv = t.param(x);
            let y = block.forward(t, xv, &layout)?;
            project(t, y, &r)
        },
        opts(seed, Some(COORDS_PER_TENSOR)),
    )
}

fn check_lora(cfg: &SkillFormerConfig, seed: u64) -> Result<GradCheckReport> {
    let mut rng = rng::stream(seed, 13);
    let (i, o) = (cfg.backbone.embed_dim.min(12), cfg.backbone.embed_dim.min(12) + 4);
    let rank = cfg.lora.rank.min(i);
    let mut store = ParamStore::new();
    let base = Linear::new(&mut store, "dense", i, o, Init::GaussianFanIn, false, &mut rng);
    let layer = lora::wrap(&mut store, base, rank, cfg.lora.alpha, &mut rng)?;
    perturb_adapters(&mut store, &mut rng);
    let x = store.add("x", Tensor::randn([4, i], 1.0, &mut rng), true);
    let r = probe_like(&[4, o], &mut rng);
    let ad = layer.adapter.clone().expect("wrapped layer has an adapter");
    grad_check(
        &mut store,
        &[ad.a, ad.b, x],
        |t| {
            let xv = t.param(x);
            let y = layer.forward(t, xv)?;
            project(t, y, &r)
        },
        opts(seed, None),
    )
}

fn check_fusion(cfg: &SkillFormerConfig, seed: u64) -> Result<GradCheckReport> {
    let mut rng = rng::stream(seed, 14);
    let d = cfg.backbone.embed_dim;
    let (batch, views) = (2, cfg.views.max(2));
    let mut store = ParamStore::new();
    let fusion = CrossViewFusion::new(&mut store, d, &cfg.fusion, &mut rng)?;
    // move the calibration affine off its identity init
    for id in [fusion.mu_learn, fusion.sigma_learn] {
        let shape = store.value(id).shape().to_vec();
        let noise = Tensor::randn(shape, 0.3, &mut rng);
        store.value_mut(id).add_assign(&noise);
    }
    let x = store.add("x", Tensor::randn([batch * views, d], 1.0, &mut rng), true);
    let r = probe_like(&[batch, cfg.fusion.out_dim], &mut rng);
    let mode = Mode::Train {
        dropout_seeds: vec![seed, seed ^ 0x5555],
    };
    let ids: Vec<_> = store.ids().collect();
    grad_check(
        &mut store,
        &ids,
        |t| {
            let xv = t.param(x);
            let y = fusion.fuse(t, xv, batch, views, &mode)?;
            project(t, y, &r)
        },
        opts(seed, Some(COORDS_PER_TENSOR)),
    )
}

fn check_cross_entropy(cfg: &SkillFormerConfig, seed: u64) -> Result<GradCheckReport> {
    let mut rng = rng::stream(seed, 15);
    let c = cfg.num_classes;
    let mut store = ParamStore::new();
    let logits = store.add("logits", Tensor::randn([6, c], 2.0, &mut rng), true);
    let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..c)).collect();
    grad_check(
        &mut store,
        &[logits],
        |t| {
            let l = t.param(logits);
            t.cross_entropy(l, &labels)
        },
        opts(seed, None),
    )
}

fn check_model(cfg: &SkillFormerConfig, seed: u64) -> Result<GradCheckReport> {
    let mut rng = rng::stream(seed, 16);
    let mut cfg = cfg.clone();
    cfg.backbone.init_seed = seed;
    let (model, mut store) = SkillFormer::new(&cfg, seed)?;
    perturb_adapters(&mut store, &mut rng);
    let b = &cfg.backbone;
    let clips = Tensor::randn(
        [1, cfg.views, cfg.frames, b.channels, b.image_size, b.image_size],
        1.0,
        &mut rng,
    );
    let labels = vec![rng.gen_range(0..cfg.num_classes)];
    let mode = Mode::Train {
        dropout_seeds: vec![seed],
    };
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).trainable).collect();
    grad_check(
        &mut store,
        &ids,
        |t| {
            let logits = model.forward(t, &clips, &mode)?;
            t.cross_entropy(logits, &labels)
        },
        opts(seed, Some(MODEL_COORDS_PER_TENSOR)),
    )
}

type Case = fn(&SkillFormerConfig, u64) -> Result<GradCheckReport>;

const CASES: [(&str, Case); 7] = [
    ("linear", check_linear),
    ("attention", check_attention),
    ("divided_block", check_block),
    ("lora", check_lora),
    ("cross_view_fusion", check_fusion),
    ("cross_entropy", check_cross_entropy),
    ("model", check_model),
];

/// Run every case once with inputs and weights drawn from `seed`.
pub fn gradcheck_suite(cfg: &SkillFormerConfig, seed: u64) -> Result<SuiteReport> {
    cfg.validate()?;
    let cases = CASES
        .iter()
        .map(|&(case, f)| Ok(CaseReport { case, report: f(cfg, seed)? }))
        .collect::<Result<_>>()?;
    Ok(SuiteReport { seed, cases })
}
