//! Cross-view fusion of per-view clip features.
//!
//! Input is `[B * V, d]` with the `V` views of sample `b` in consecutive
//! rows. The pipeline, with no residual connections:
//!
//! 1. shared LayerNorm over each view's features
//! 2. multi-head self-attention along the view axis (q = k = v)
//! 3. mean over views
//! 4. `Linear1 -> GELU -> LayerNorm -> Dropout`
//! 5. sigmoid gate `g = σ(Linear_gate(h))`, `h ← g ⊙ h`
//! 6. `Linear2 -> LayerNorm`
//! 7. re-standardize each row, then `· σ_learn + μ_learn`

use rand::Rng;

use crate::config::FusionConfig;
use crate::error::{Error, Result};
use crate::layers::{Init, Linear, Norm};
use crate::numerics::{RowGroups, Tape, Tensor, Var};
use crate::params::{ParamId, ParamStore};

/// Epsilon added to the row std in the self-calibration step.
pub const CALIBRATION_EPS: f64 = 1e-8;

/// Forward-pass mode. Training carries one dropout seed per sample so masks
/// do not depend on how a batch is split across workers.
#[derive(Clone, Debug)]
pub enum Mode {
    Eval,
    Train { dropout_seeds: Vec<u64> },
}

#[derive(Clone, Debug)]
pub struct CrossViewFusion {
    pub view_ln: Norm,
    pub in_proj: Linear,
    pub out_proj: Linear,
    pub w1: Linear,
    pub w1_norm: Norm,
    pub gate: Linear,
    pub w2: Linear,
    pub w2_norm: Norm,
    pub mu_learn: ParamId,
    pub sigma_learn: ParamId,
    pub heads: usize,
    pub dropout: f64,
    pub in_dim: usize,
    pub cfg: FusionConfig,
}

impl CrossViewFusion {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        in_dim: usize,
        cfg: &FusionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.heads == 0 || in_dim % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "fusion heads {} must divide feature dim {in_dim}",
                cfg.heads
            )));
        }
        if cfg.out_dim < 2 {
            return Err(Error::Config("calibration needs out_dim >= 2".into()));
        }
        let (d, hid, out) = (in_dim, cfg.hidden, cfg.out_dim);
        let u = Init::UniformFanIn;
        Ok(Self {
            view_ln: Norm::new(store, "fusion.view_ln", d, true),
            in_proj: Linear::new(store, "fusion.attn.in_proj", d, 3 * d, u, true, rng),
            out_proj: Linear::new(store, "fusion.attn.out_proj", d, d, u, true, rng),
            w1: Linear::new(store, "fusion.w1", d, hid, u, true, rng),
            w1_norm: Norm::new(store, "fusion.w1.norm", hid, true),
            gate: Linear::new(store, "fusion.gate", hid, hid, u, true, rng),
            w2: Linear::new(store, "fusion.w2", hid, out, u, true, rng),
            w2_norm: Norm::new(store, "fusion.w2.norm", out, true),
            mu_learn: store.add("fusion.mu_learn", Tensor::zeros([out]), true),
            sigma_learn: store.add("fusion.sigma_learn", Tensor::ones([out]), true),
            heads: cfg.heads,
            dropout: cfg.dropout,
            in_dim,
            cfg: *cfg,
        })
    }

    /// Normalize each view and let every view attend to all views of the
    /// same sample, `[B*V, d] -> [B*V, d]`.
    pub fn view_attend(&self, tape: &mut Tape<'_>, x: Var, batch: usize, views: usize) -> Result<Var> {
        if views == 0 {
            return Err(Error::Contract("fusion needs at least one view".into()));
        }
        let xn = self.view_ln.forward(tape, x)?;
        let qkv = self.in_proj.forward(tape, xn)?;
        let attn = tape.attention(qkv, &RowGroups::contiguous(batch, views), self.heads)?;
        self.out_proj.forward(tape, attn)
    }

    /// Mean over views, then `Dropout(LayerNorm(GELU(Linear1(h))))`.
    pub fn aggregate_transform(
        &self,
        tape: &mut Tape<'_>,
        x_attn: Var,
        batch: usize,
        views: usize,
        mode: &Mode,
    ) -> Result<Var> {
        let h = tape.mean_rows(x_attn, &RowGroups::contiguous(batch, views))?;
        let h = self.w1.forward(tape, h)?;
        let h = tape.gelu(h);
        let h = self.w1_norm.forward(tape, h)?;
        match mode {
            Mode::Train { dropout_seeds } if self.dropout > 0.0 => {
                if dropout_seeds.len() != batch {
                    return Err(Error::Contract(format!(
                        "{} dropout seeds for batch of {batch}",
                        dropout_seeds.len()
                    )));
                }
                let mask = dropout_mask(dropout_seeds, self.cfg.hidden, self.dropout);
                tape.dropout(h, mask)
            }
            _ => Ok(h),
        }
    }

    /// `σ(Linear_gate(h)) ⊙ h`.
    pub fn gate(&self, tape: &mut Tape<'_>, h: Var) -> Result<Var> {
        let g = self.gate.forward(tape, h)?;
        let g = tape.sigmoid(g);
        tape.mul(g, h)
    }

    /// `Linear2 -> LayerNorm -> standardize -> · σ_learn + μ_learn`.
    pub fn calibrate(&self, tape: &mut Tape<'_>, h: Var) -> Result<Var> {
        let h = self.w2.forward(tape, h)?;
        let h = self.w2_norm.forward(tape, h)?;
        let h = tape.standardize(h, CALIBRATION_EPS);
        let sigma = tape.param(self.sigma_learn);
        let mu = tape.param(self.mu_learn);
        let h = tape.mul_row(h, sigma)?;
        tape.add_row(h, mu)
    }

    /// Full fusion `[B*V, d] -> [B, d_out]`.
    pub fn fuse(&self, tape: &mut Tape<'_>, x: Var, batch: usize, views: usize, mode: &Mode) -> Result<Var> {
        let rows = tape.value(x).rows();
        if rows != batch * views || tape.value(x).last_dim() != self.in_dim {
            return Err(Error::Dimension(format!(
                "fusion expects [{batch}*{views}, {}] features, got {:?}",
                self.in_dim,
                tape.value(x).shape()
            )));
        }
        tape.set_scope("fusion");
        let a = self.view_attend(tape, x, batch, views)?;
        let h = self.aggregate_transform(tape, a, batch, views, mode)?;
        let h = self.gate(tape, h)?;
        self.calibrate(tape, h)
    }

    /// Eval-mode fusion of a `[B, V, d]` tensor.
    pub fn fuse_tensor(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::Dimension(format!("expected [B, V, d], got {s:?}")));
        }
        let mut tape = Tape::new(store);
        let xv = tape.constant(x.clone().reshape([s[0] * s[1], s[2]])?);
        let out = self.fuse(&mut tape, xv, s[0], s[1], &Mode::Eval)?;
        Ok(tape.value(out).clone())
    }
}

/// Inverted-dropout mask, one row of `width` per seed.
pub fn dropout_mask(seeds: &[u64], width: usize, p: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    let mut mask = Vec::with_capacity(seeds.len() * width);
    for &s in seeds {
        let mut rng = crate::rng::seeded(s);
        mask.extend((0..width).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }));
    }
    mask
}
