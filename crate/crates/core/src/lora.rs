//! Low-rank adaptation of dense layers.
//!
//! A wrapped layer keeps its base `W, b` frozen and learns `A: [r, in]`,
//! `B: [out, r]`; the effective weight is `W + (alpha / r) * B * A`. With
//! `B` initialized to zero a freshly wrapped layer computes exactly what the
//! base layer did, and merging folds the product back into `W` so inference
//! pays nothing for the adapter.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numerics::{kernels, Tape, Tensor, Var};
use crate::params::{ParamId, ParamStore};

/// Std of the gaussian used for the down-projection `A`.
pub const LORA_A_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Dense layer with an optional trainable low-rank correction. A merged
/// layer is one whose adapter has been folded away.
#[derive(Clone, Debug)]
pub struct LoraLinear {
    pub base: Linear,
    pub adapter: Option<LoraAdapter>,
}

impl LoraLinear {
    pub fn plain(base: Linear) -> Self {
        Self { base, adapter: None }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let y = self.base.forward(tape, x)?;
        let Some(ad) = &self.adapter else { return Ok(y) };
        let a = tape.param(ad.a);
        let b = tape.param(ad.b);
        let down = tape.matmul_t(x, false, a, true)?;
        let up = tape.matmul_t(down, false, b, true)?;
        let delta = tape.scale(up, ad.scale());
        tape.add(y, delta)
    }

    /// `W + (alpha/r) B A` (or `W` itself when there is no adapter).
    pub fn merged_weight(&self, store: &ParamStore) -> Result<Tensor> {
        let w = store.value(self.base.weight);
        match &self.adapter {
            None => Ok(w.clone()),
            Some(ad) => merge_weight(w, store.value(ad.a), store.value(ad.b), ad.rank, ad.alpha),
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.adapter
            .as_ref()
            .map_or(0, |ad| ad.rank * (self.base.in_dim + self.base.out_dim))
    }
}

/// Attach a rank-`rank` adapter to `base`. Registers `<name>.lora_A` and
/// `<name>.lora_B` as trainable; `A ~ N(0, 0.02)`, `B = 0`.
pub fn wrap<R: Rng + ?Sized>(
    store: &mut ParamStore,
    base: Linear,
    rank: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<LoraLinear> {
    let bound = base.in_dim.min(base.out_dim);
    if rank == 0 || rank > bound {
        return Err(Error::Config(format!(
            "LoRA rank {rank} outside 1..={bound} for {} ({} -> {})",
            base.name, base.in_dim, base.out_dim
        )));
    }
    let a = store.add(
        format!("{}.lora_A", base.name),
        Tensor::randn([rank, base.in_dim], LORA_A_STD, rng),
        true,
    );
    let b = store.add(
        format!("{}.lora_B", base.name),
        Tensor::zeros([base.out_dim, rank]),
        true,
    );
    Ok(LoraLinear {
        base,
        adapter: Some(LoraAdapter { a, b, rank, alpha }),
    })
}

/// `W + (alpha / rank) * B * A`.
pub fn merge_weight(w: &Tensor, a: &Tensor, b: &Tensor, rank: usize, alpha: f64) -> Result<Tensor> {
    let mut delta = kernels::matmul(b, a)?;
    if delta.shape() != w.shape() {
        return Err(Error::Dimension(format!(
            "adapter product {:?} does not match base weight {:?}",
            delta.shape(),
            w.shape()
        )));
    }
    delta.scale_assign(alpha / rank as f64);
    let mut out = w.clone();
    out.add_assign(&delta);
    Ok(out)
}
