//! Parameterized building blocks shared by backbone, fusion and head.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::params::{ParamId, ParamStore};

/// Weight initialization for a dense layer.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Weights and bias uniform in `±1/sqrt(in)`.
    UniformFanIn,
    /// Weights gaussian with the given std, zero bias.
    Gaussian(f64),
    /// Weights gaussian with std `1/sqrt(in)`, zero bias.
    GaussianFanIn,
    Zeros,
}

/// Affine map `y = x Wᵀ + b` with `W: [out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let (w, b) = match init {
            Init::UniformFanIn => {
                let bound = 1.0 / (in_dim as f64).sqrt();
                (
                    Tensor::uniform([out_dim, in_dim], bound, rng),
                    Tensor::uniform([out_dim], bound, rng),
                )
            }
            Init::Gaussian(std) => (Tensor::randn([out_dim, in_dim], std, rng), Tensor::zeros([out_dim])),
            Init::GaussianFanIn => (
                Tensor::randn([out_dim, in_dim], 1.0 / (in_dim as f64).sqrt(), rng),
                Tensor::zeros([out_dim]),
            ),
            Init::Zeros => (Tensor::zeros([out_dim, in_dim]), Tensor::zeros([out_dim])),
        };
        Self {
            name: name.to_string(),
            weight: store.add(format!("{name}.weight"), w, trainable),
            bias: store.add(format!("{name}.bias"), b, trainable),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.linear(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// LayerNorm affine parameters over a `dim`-wide last axis.
#[derive(Clone, Debug)]
pub struct Norm {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, trainable: bool) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::ones([dim]), trainable),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([dim]), trainable),
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let g = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}
