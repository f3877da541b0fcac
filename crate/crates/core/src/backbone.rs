//! Divided space-time attention video encoder.
//!
//! Each frame is cut into `p x p` patches, linearly embedded and prefixed
//! with a learned CLS token. A block applies, each pre-normed and residual:
//! temporal attention (same token position across frames), spatial
//! attention (tokens within one frame, CLS included), then an MLP. The clip
//! feature is the frame-averaged CLS token after a final LayerNorm.

use rand::Rng;

use crate::config::{BackboneConfig, LoraConfig};
use crate::error::{dim_err, Result};
use crate::layers::{Init, Linear, Norm};
use crate::lora::{self, LoraLinear};
use crate::numerics::{RowGroups, Tape, Tensor, Var};
use crate::params::{ParamId, ParamStore};

/// Std of the spatial position table and CLS token.
const EMBED_STD: f64 = 0.02;

/// Row layout of a token matrix for `clips` clips of `frames` frames with
/// `patches` patch tokens each. Row `((c * frames) + t) * (patches + 1) + j`
/// holds token `j` (0 = CLS) of frame `t` of clip `c`.
#[derive(Clone, Debug)]
pub struct TokenLayout {
    pub clips: usize,
    pub frames: usize,
    pub patches: usize,
    temporal: RowGroups,
    spatial: RowGroups,
    cls: RowGroups,
}

impl TokenLayout {
    pub fn new(clips: usize, frames: usize, patches: usize) -> Self {
        let per_frame = patches + 1;
        let row = |c: usize, t: usize, j: usize| (c * frames + t) * per_frame + j;
        let temporal = RowGroups::new(
            (0..clips).flat_map(|c| (0..per_frame).map(move |j| (0..frames).map(|t| row(c, t, j)).collect())),
        );
        let spatial = RowGroups::contiguous(clips * frames, per_frame);
        let cls = RowGroups::new((0..clips).map(|c| (0..frames).map(|t| row(c, t, 0)).collect()));
        Self {
            clips,
            frames,
            patches,
            temporal,
            spatial,
            cls,
        }
    }

    pub fn rows(&self) -> usize {
        self.clips * self.frames * (self.patches + 1)
    }

    pub fn temporal_groups(&self) -> &RowGroups {
        &self.temporal
    }

    pub fn spatial_groups(&self) -> &RowGroups {
        &self.spatial
    }
}

/// One divided space-time transformer block.
#[derive(Clone, Debug)]
pub struct DividedBlock {
    pub temporal_norm: Norm,
    pub temporal_qkv: LoraLinear,
    pub temporal_proj: LoraLinear,
    pub norm1: Norm,
    pub qkv: LoraLinear,
    pub proj: LoraLinear,
    pub norm2: Norm,
    pub fc1: LoraLinear,
    pub fc2: LoraLinear,
    pub heads: usize,
}

impl DividedBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &BackboneConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.embed_dim;
        let hidden = d * cfg.mlp_ratio;
        let mut dense = |store: &mut ParamStore, name: &str, i: usize, o: usize| {
            LoraLinear::plain(Linear::new(
                store,
                &format!("{prefix}.{name}"),
                i,
                o,
                Init::GaussianFanIn,
                false,
                rng,
            ))
        };
        let temporal_norm = Norm::new(store, &format!("{prefix}.temporal_norm"), d, false);
        let temporal_qkv = dense(store, "temporal_attn.qkv", d, 3 * d);
        let temporal_proj = dense(store, "temporal_attn.proj", d, d);
        let norm1 = Norm::new(store, &format!("{prefix}.norm1"), d, false);
        let qkv = dense(store, "attn.qkv", d, 3 * d);
        let proj = dense(store, "attn.proj", d, d);
        let norm2 = Norm::new(store, &format!("{prefix}.norm2"), d, false);
        let fc1 = dense(store, "mlp.fc1", d, hidden);
        let fc2 = dense(store, "mlp.fc2", hidden, d);
        Self {
            temporal_norm,
            temporal_qkv,
            temporal_proj,
            norm1,
            qkv,
            proj,
            norm2,
            fc1,
            fc2,
            heads: cfg.heads,
        }
    }

    pub fn dense_layers(&self) -> [&LoraLinear; 6] {
        [
            &self.temporal_qkv,
            &self.temporal_proj,
            &self.qkv,
            &self.proj,
            &self.fc1,
            &self.fc2,
        ]
    }

    fn dense_layers_mut(&mut self) -> [&mut LoraLinear; 6] {
        [
            &mut self.temporal_qkv,
            &mut self.temporal_proj,
            &mut self.qkv,
            &mut self.proj,
            &mut self.fc1,
            &mut self.fc2,
        ]
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, layout: &TokenLayout) -> Result<Var> {
        let h = self.temporal_norm.forward(tape, x)?;
        let qkv = self.temporal_qkv.forward(tape, h)?;
        let a = tape.attention(qkv, layout.temporal_groups(), self.heads)?;
        let a = self.temporal_proj.forward(tape, a)?;
        let x = tape.add(x, a)?;

        let h = self.norm1.forward(tape, x)?;
        let qkv = self.qkv.forward(tape, h)?;
        let a = tape.attention(qkv, layout.spatial_groups(), self.heads)?;
        let a = self.proj.forward(tape, a)?;
        let x = tape.add(x, a)?;

        let h = self.norm2.forward(tape, x)?;
        let h = self.fc1.forward(tape, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, h)?;
        tape.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub patch_embed: Linear,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub time_embed: ParamId,
    pub blocks: Vec<DividedBlock>,
    pub norm: Norm,
}

impl Backbone {
    /// Register frozen base weights drawn from `cfg.init_seed`.
    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::rng::stream(cfg.init_seed, 0);
        let d = cfg.embed_dim;
        let n = cfg.patches_per_frame();
        let patch_embed = Linear::new(
            store,
            "backbone.patch_embed",
            cfg.patch_dim(),
            d,
            Init::GaussianFanIn,
            false,
            &mut rng,
        );
        let cls_token = store.add("backbone.cls_token", Tensor::randn([d], EMBED_STD, &mut rng), false);
        let pos_embed = store.add(
            "backbone.pos_embed",
            Tensor::randn([n + 1, d], EMBED_STD, &mut rng),
            false,
        );
        let time_embed = store.add(
            "backbone.time_embed",
            Tensor::randn([cfg.pretrain_frames, d], EMBED_STD, &mut rng),
            false,
        );
        let blocks = (0..cfg.depth)
            .map(|i| DividedBlock::new(store, &format!("backbone.blocks.{i}"), cfg, &mut rng))
            .collect();
        let norm = Norm::new(store, "backbone.norm", d, false);
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            cls_token,
            pos_embed,
            time_embed,
            blocks,
            norm,
        })
    }

    /// Wrap every block's dense layers with rank-`r` adapters.
    pub fn add_lora<R: Rng + ?Sized>(&mut self, store: &mut ParamStore, lora: &LoraConfig, rng: &mut R) -> Result<()> {
        for block in &mut self.blocks {
            for layer in block.dense_layers_mut() {
                let base = layer.base.clone();
                *layer = lora::wrap(store, base, lora.rank, lora.alpha, rng)?;
            }
        }
        Ok(())
    }

    pub fn dense_layers(&self) -> impl Iterator<Item = &LoraLinear> {
        self.blocks.iter().flat_map(|b| b.dense_layers())
    }

    /// Patch tokens plus spatial position embedding, `[clips * T * N, d]`.
    ///
    /// `clips` is `[n, T, C, H, W]` (or `[T, C, H, W]` for one clip).
    pub fn patch_embed(&self, tape: &mut Tape<'_>, clips: &Tensor) -> Result<Var> {
        let (n, t) = self.clip_dims(clips)?;
        let patches = tape.constant(patchify(clips, n * t, &self.cfg)?);
        let tokens = self.patch_embed.forward(tape, patches)?;
        let np = self.cfg.patches_per_frame();
        let pos = tape.param(self.pos_embed);
        let idx: Vec<usize> = (0..n * t * np).map(|r| 1 + r % np).collect();
        let pos_rows = tape.gather_rows(pos, &idx)?;
        tape.add(tokens, pos_rows)
    }

    fn clip_dims(&self, clips: &Tensor) -> Result<(usize, usize)> {
        let s = clips.shape();
        let (n, t, rest) = match s.len() {
            4 => (1, s[0], &s[1..]),
            5 => (s[0], s[1], &s[2..]),
            _ => return dim_err(format!("clips must be [n, T, C, H, W], got {s:?}")),
        };
        let c = &self.cfg;
        if rest != [c.channels, c.image_size, c.image_size] {
            if rest[1] % c.patch_size != 0 || rest[2] % c.patch_size != 0 {
                return Err(crate::error::Error::Config(format!(
                    "frame {}x{} not divisible by patch size {}",
                    rest[1], rest[2], c.patch_size
                )));
            }
            return dim_err(format!(
                "frames {rest:?} do not match backbone geometry [{}, {}, {}]",
                c.channels, c.image_size, c.image_size
            ));
        }
        Ok((n, t))
    }

    /// Encode clips to features `[n, d]`.
    pub fn encode(&self, tape: &mut Tape<'_>, clips: &Tensor) -> Result<Var> {
        let (n, t) = self.clip_dims(clips)?;
        let np = self.cfg.patches_per_frame();
        tape.set_scope("backbone.embed");
        let patch_tokens = self.patch_embed(tape, clips)?;

        let time = tape.param(self.time_embed);
        let interp = tape.constant(interpolation_matrix(self.cfg.pretrain_frames, t));
        let time = tape.matmul(interp, time)?;
        let idx: Vec<usize> = (0..n * t * np).map(|r| (r / np) % t).collect();
        let time_rows = tape.gather_rows(time, &idx)?;
        let patch_tokens = tape.add(patch_tokens, time_rows)?;

        let cls = tape.param(self.cls_token);
        let pos = tape.param(self.pos_embed);
        let pos0 = tape.gather_rows(pos, &[0])?;
        let cls = tape.add(pos0, cls)?;
        let all = tape.concat_rows(&[cls, patch_tokens])?;
        let layout = TokenLayout::new(n, t, np);
        let order: Vec<usize> = (0..layout.rows())
            .map(|r| {
                let j = r % (np + 1);
                let frame = r / (np + 1);
                if j == 0 {
                    0
                } else {
                    1 + frame * np + (j - 1)
                }
            })
            .collect();
        let mut x = tape.gather_rows(all, &order)?;

        for (i, block) in self.blocks.iter().enumerate() {
            tape.set_scope(&format!("backbone.blocks.{i}"));
            x = block.forward(tape, x, &layout)?;
        }
        tape.set_scope("backbone.norm");
        let cls = tape.mean_rows(x, &layout.cls)?;
        self.norm.forward(tape, cls)
    }

    /// Feature vector `[d]` of a single preprocessed clip `[T, C, H, W]`.
    pub fn encode_video(&self, store: &ParamStore, clip: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(store);
        let f = self.encode(&mut tape, clip)?;
        tape.value(f).clone().reshape([self.cfg.embed_dim])
    }
}

/// Flatten frames `[frames, C, H, W]` into patch rows `[frames * N, C*p*p]`,
/// patches in row-major grid order, features ordered `(c, dy, dx)`.
pub fn patchify(clips: &Tensor, frames: usize, cfg: &BackboneConfig) -> Result<Tensor> {
    let (c, p, s) = (cfg.channels, cfg.patch_size, cfg.image_size);
    let g = s / p;
    if clips.len() != frames * c * s * s {
        return dim_err("patchify: clip volume does not match geometry");
    }
    let src = clips.data();
    let pd = c * p * p;
    let mut out = vec![0.0; frames * g * g * pd];
    for f in 0..frames {
        for gy in 0..g {
            for gx in 0..g {
                let row = (f * g + gy) * g + gx;
                let dst = &mut out[row * pd..(row + 1) * pd];
                for ch in 0..c {
                    for dy in 0..p {
                        let y = gy * p + dy;
                        let base = ((f * c + ch) * s + y) * s + gx * p;
                        dst[(ch * p + dy) * p..(ch * p + dy + 1) * p].copy_from_slice(&src[base..base + p]);
                    }
                }
            }
        }
    }
    Tensor::new([frames * g * g, pd], out)
}

/// Source coordinate and blend weight for target frame `t` of `target`
/// when resampling a `source`-long table with fixed endpoints.
fn interp_coord(t: usize, source: usize, target: usize) -> (usize, usize, f64) {
    if target == 1 || source == 1 {
        return (0, 0, 0.0);
    }
    let x = t as f64 * (source - 1) as f64 / (target - 1) as f64;
    let lo = (x.floor() as usize).min(source - 1);
    let hi = (lo + 1).min(source - 1);
    (lo, hi, x - lo as f64)
}

/// `[target, source]` matrix whose product with a `[source, d]` table
/// resamples it linearly to `target` rows.
pub fn interpolation_matrix(source: usize, target: usize) -> Tensor {
    let mut m = Tensor::zeros([target, source]);
    for t in 0..target {
        let (lo, hi, w) = interp_coord(t, source, target);
        let row = &mut m.data_mut()[t * source..(t + 1) * source];
        row[lo] += 1.0 - w;
        if w > 0.0 {
            row[hi] += w;
        }
    }
    m
}

/// Linearly resample a learned `[T0, d]` temporal embedding table to
/// `target` frames. Target frame `t` reads source coordinate
/// `t (T0 - 1) / (target - 1)`; a single target frame reads row 0.
pub fn interpolate_time_embeddings(emb: &Tensor, target: usize) -> Result<Tensor> {
    if emb.rank() != 2 || target == 0 {
        return dim_err(format!(
            "time embeddings must be [T0, d] and target positive, got {:?} -> {target}",
            emb.shape()
        ));
    }
    let (source, d) = (emb.shape()[0], emb.shape()[1]);
    let mut out = Vec::with_capacity(target * d);
    for t in 0..target {
        let (lo, hi, w) = interp_coord(t, source, target);
        if w == 0.0 {
            out.extend_from_slice(emb.row(lo));
        } else {
            out.extend(emb.row(lo).iter().zip(emb.row(hi)).map(|(a, b)| (1.0 - w) * a + w * b));
        }
    }
    Tensor::new([target, d], out)
}
