//! Central finite-difference oracle for tape adjoints.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

use super::{Tape, Var};

/// Which coordinates of each parameter get perturbed.
#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub eps: f64,
    /// Cap on coordinates probed per tensor; `None` probes all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
    pub coords_checked: usize,
}

/// Relative error with denominator `max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Denominator floor for a function whose value is `f`. Central
/// differences of `f` carry rounding noise near `1e-16 * |f| / eps`, so a
/// structurally zero gradient (e.g. attention key biases) would otherwise
/// read as a large relative error.
pub fn noise_floor(f: f64) -> f64 {
    1e-6 * f.abs().max(1.0)
}

/// Compare tape adjoints of the scalar produced by `f` against central
/// differences `(f(θ+ε) - f(θ-ε)) / 2ε` for every listed parameter.
///
/// `f` must be deterministic; two unperturbed evaluations that disagree are
/// reported as a contract error. Listed parameters are marked trainable for
/// the duration of the check and restored afterwards.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    f: F,
    opts: CheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let saved: Vec<bool> = params.iter().map(|&p| store.get(p).trainable).collect();
    for &p in params {
        store.set_trainable(p, true);
    }
    let result = check_inner(store, params, &f, opts);
    for (&p, t) in params.iter().zip(saved) {
        store.set_trainable(p, t);
    }
    result
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let out = f(&mut tape)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Contract("grad_check function must return a scalar".into()));
    }
    Ok(v.item())
}

fn check_inner<F>(store: &mut ParamStore, params: &[ParamId], f: &F, opts: CheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let floor;
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        let first = tape.value(loss).item();
        floor = noise_floor(first);
        let second = eval(store, f)?;
        if first.to_bits() != second.to_bits() {
            return Err(Error::Contract(format!(
                "non-deterministic function: {first} vs {second}"
            )));
        }
        tape.backward(loss)?
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        coords_checked: 0,
    };
    for &p in params {
        let n = store.value(p).len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let a = analytic.param(p).map_or(0.0, |g| g.data()[i]);
            let orig = store.value(p).data()[i];
            store.value_mut(p).data_mut()[i] = orig + opts.eps;
            let plus = eval(store, f);
            store.value_mut(p).data_mut()[i] = orig - opts.eps;
            let minus = eval(store, f);
            store.value_mut(p).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.eps);
            let err = relative_error(a, numeric, floor);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = err;
                report.worst = format!("{}[{i}]", store.get(p).name);
            }
        }
    }
    Ok(report)
}
