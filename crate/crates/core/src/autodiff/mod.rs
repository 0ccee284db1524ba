//! Reverse-mode automatic differentiation on rank-2 `f64` tensors, the Adam
//! optimizer, finite-difference gradient checks and parameter checkpoints.

mod adam;
mod checkpoint;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointEntry};
pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use tape::{sigmoid, softplus, Gradients, Tape, Var};
pub use tensor::Tensor;

use rand::Rng;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op} range {start}..{end} out of bounds for length {len}")]
    SliceOutOfRange {
        op: &'static str,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("concat of zero tensors")]
    EmptyConcat,
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
}

/// The deterministic generator used for every seeded draw in the crate.
pub type Rng64 = Xoshiro256PlusPlus;

pub fn seeded_rng(seed: u64) -> Rng64 {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// `rows × cols` tensor with entries uniform in `(-s, s)`, `s = 1/sqrt(fan_in)`.
pub fn init_uniform(rng: &mut Rng64, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let s = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-s..s)).collect();
    Tensor::matrix(rows, cols, data)
}

/// Whether a parameter counts toward the weight penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Bias,
}

/// A tree of named parameters of type `P` (a [`Tensor`] when stored, a
/// [`Var`] once bound to a tape). Both visitors must walk the tree in the
/// same order.
pub trait Parameterized<P> {
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a P, ParamKind));
    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut P, ParamKind));
}

pub fn join_path(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<P, T: Parameterized<P>> Parameterized<P> for Option<T> {
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a P, ParamKind)) {
        if let Some(inner) = self {
            inner.visit(path, f);
        }
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut P, ParamKind)) {
        if let Some(inner) = self {
            inner.visit_mut(path, f);
        }
    }
}

impl<P, T: Parameterized<P>> Parameterized<P> for Vec<T> {
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a P, ParamKind)) {
        for (i, inner) in self.iter().enumerate() {
            inner.visit(&join_path(path, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut P, ParamKind)) {
        for (i, inner) in self.iter_mut().enumerate() {
            inner.visit_mut(&join_path(path, &i.to_string()), f);
        }
    }
}

/// Total number of scalar parameters.
pub fn param_count<T: Parameterized<Tensor>>(params: &T) -> usize {
    let mut n = 0;
    params.visit("", &mut |_, t, _| n += t.len());
    n
}

/// Bound variables in visiting order.
pub fn collect_vars<T: Parameterized<Var>>(bound: &T) -> Vec<Var> {
    let mut out = Vec::new();
    bound.visit("", &mut |_, v, _| out.push(*v));
    out
}

/// Sum of squared entries of every weight (biases excluded), on the tape.
pub fn weight_penalty<T: Parameterized<Var>>(tape: &mut Tape, bound: &T) -> Result<Var, AutodiffError> {
    let mut weights = Vec::new();
    bound.visit("", &mut |_, v, kind| {
        if kind == ParamKind::Weight {
            weights.push(*v);
        }
    });
    let mut total = tape.constant(Tensor::scalar(0.0));
    for w in weights {
        let sq = tape.square(w)?;
        let s = tape.sum(sq)?;
        total = tape.add(total, s)?;
    }
    Ok(total)
}

/// Same penalty evaluated directly on stored tensors.
pub fn weight_penalty_value<T: Parameterized<Tensor>>(params: &T) -> f64 {
    let mut total = 0.0;
    params.visit("", &mut |_, t, kind| {
        if kind == ParamKind::Weight {
            total += t.sum_of_squares();
        }
    });
    total
}

/// All parameters concatenated in visiting order.
pub fn flatten<T: Parameterized<Tensor>>(params: &T) -> Vec<f64> {
    let mut out = Vec::new();
    params.visit("", &mut |_, t, _| out.extend_from_slice(t.data()));
    out
}

/// Inverse of [`flatten`]. Panics when `values` has the wrong length.
pub fn unflatten<T: Parameterized<Tensor>>(params: &mut T, values: &[f64]) {
    let mut offset = 0;
    params.visit_mut("", &mut |_, t, _| {
        let n = t.len();
        t.data_mut().copy_from_slice(&values[offset..offset + n]);
        offset += n;
    });
    assert_eq!(offset, values.len(), "flat parameter length");
}

#[cfg(test)]
mod tests;
