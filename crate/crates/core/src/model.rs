//! The BiLSTM-autoencoder-attention classifier: parameter set, forward
//! pass, composite loss, full-batch Adam training and inference.
//!
//! Per window the stack produces one representation per month. Each is
//! encoded to a small code; the codes are pooled with sigmoid attention
//! gates and a dense head maps the pooled code to a score `s`, read as the
//! probability `(tanh(s) + 1) / 2` (or `sigmoid(s)`).
//!
//! The training objective is
//!
//! ```text
//! Σ (p − y)²  +  α · Σ ‖h(m + 6) − g(f(h(m)))‖²  +  β · Σ ‖W‖²
//! ```
//!
//! where `h(m)` is the final-step representation of the window ending in
//! month `m`, and the middle sum runs over every pair of windows in the
//! batch that are six months apart. Biases are not penalized.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    adam_step, collect_vars, join_path, param_count, seeded_rng, weight_penalty, AdamConfig, AdamState,
    AutodiffError, ParamKind, Parameterized, Tape, Tensor, Var,
};
use crate::eval::{evaluate, EvalError};
use crate::features::LabeledWindow;
use crate::layers::{
    attention_pool, bilstm_forward, Attention, Autoencoder, BiLstmStack, CellActivation, Dense, StackOptions,
};
use crate::YearMonth;

/// Months between a window and the window whose representation it
/// reconstructs.
pub const RECONSTRUCTION_LEAD: i64 = 6;

/// Loss above this multiple of the first epoch's loss counts as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    DivergenceDetected { epoch: usize, loss: f64 },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Switches for the three optional parts of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub attention: bool,
    /// Backward direction of every recurrent layer.
    pub backward: bool,
    pub autoencoder: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            attention: true,
            backward: true,
            autoencoder: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// `(tanh(s) + 1) / 2`
    #[default]
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub layers: Vec<usize>,
    pub bottleneck: usize,
    pub components: Components,
    pub head: HeadKind,
    pub activation: CellActivation,
}

impl Architecture {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            layers: vec![24, 12, 8],
            bottleneck: 4,
            components: Components::default(),
            head: HeadKind::Tanh,
            activation: CellActivation::Tanh,
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.layers.is_empty() || self.layers.contains(&0) {
            return Err(ModelError::InvalidConfig(format!(
                "input {} with layers {:?}",
                self.input_dim, self.layers
            )));
        }
        if self.components.autoencoder && self.bottleneck == 0 {
            return Err(ModelError::InvalidConfig("bottleneck must be positive".into()));
        }
        Ok(())
    }

    /// Width of the per-step representation produced by the stack.
    pub fn sequence_dim(&self) -> usize {
        let last = *self.layers.last().unwrap_or(&0);
        if self.components.backward {
            2 * last
        } else {
            last
        }
    }

    /// Width of the pooled vector fed to the head.
    pub fn pooled_dim(&self) -> usize {
        if self.components.autoencoder {
            self.bottleneck
        } else {
            self.sequence_dim()
        }
    }

    pub fn init(&self, seed: u64) -> Result<ParameterSet<Tensor>, ModelError> {
        self.validate()?;
        let mut rng = seeded_rng(seed);
        let bilstm = BiLstmStack::init(&mut rng, self.input_dim, &self.layers, self.components.backward);
        let autoencoder = self
            .components
            .autoencoder
            .then(|| Autoencoder::init(&mut rng, self.sequence_dim(), self.bottleneck));
        let attention = self
            .components
            .attention
            .then(|| Attention::init(&mut rng, self.pooled_dim()));
        let head = Dense::init(&mut rng, self.pooled_dim(), 1);
        let params = ParameterSet {
            bilstm,
            autoencoder,
            attention,
            head,
        };
        log::debug!("model parameters: {}", param_count(&params));
        Ok(params)
    }

    /// All-zero parameters of the right shapes.
    pub fn zeros(&self) -> Result<ParameterSet<Tensor>, ModelError> {
        let mut p = self.init(0)?;
        p.visit_mut("", &mut |_, t, _| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        Ok(p)
    }

    fn stack_options(&self) -> StackOptions {
        StackOptions {
            activation: self.activation,
            interlayer_relu: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<P> {
    pub bilstm: BiLstmStack<P>,
    pub autoencoder: Option<Autoencoder<P>>,
    pub attention: Option<Attention<P>>,
    pub head: Dense<P>,
}

impl<P> ParameterSet<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> ParameterSet<Q> {
        ParameterSet {
            bilstm: self.bilstm.map(f),
            autoencoder: self.autoencoder.as_ref().map(|a| a.map(f)),
            attention: self.attention.as_ref().map(|a| a.map(f)),
            head: self.head.map(f),
        }
    }
}

impl<P> Parameterized<P> for ParameterSet<P> {
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a P, ParamKind)) {
        self.bilstm.visit(&join_path(path, "bilstm"), f);
        self.autoencoder.visit(&join_path(path, "autoencoder"), f);
        self.attention.visit(&join_path(path, "attention"), f);
        self.head.visit(&join_path(path, "head"), f);
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut P, ParamKind)) {
        self.bilstm.visit_mut(&join_path(path, "bilstm"), f);
        self.autoencoder.visit_mut(&join_path(path, "autoencoder"), f);
        self.attention.visit_mut(&join_path(path, "attention"), f);
        self.head.visit_mut(&join_path(path, "head"), f);
    }
}

/// Weights of the reconstruction and weight-penalty terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1e-4 }
    }
}

impl LossWeights {
    fn validate(&self) -> Result<(), ModelError> {
        if !(self.alpha.is_finite() && self.beta.is_finite() && self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(ModelError::InvalidConfig(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.001,
            seed: 0,
            weights: LossWeights::default(),
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), ModelError> {
        if self.epochs == 0 || !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ModelError::InvalidConfig(format!(
                "epochs {} / lr {}",
                self.epochs, self.lr
            )));
        }
        self.weights.validate()
    }
}

/// Windows laid out for the recurrent stack.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(width · B) × d`, step-major.
    pub input: Tensor,
    pub labels: Vec<f64>,
    pub months: Vec<YearMonth>,
    pub width: usize,
    /// `(i, j)` with `months[j]` six months after `months[i]`.
    pub pairs: Vec<(usize, usize)>,
}

/// Rows `t·B .. (t+1)·B` of the result hold step `t` of every window.
pub fn step_major(windows: &[LabeledWindow]) -> Result<Tensor, ModelError> {
    let first = windows.first().ok_or(ModelError::EmptyBatch)?;
    let (w, d) = (first.width, first.n_features);
    if let Some(bad) = windows.iter().find(|x| x.width != w || x.n_features != d) {
        return Err(AutodiffError::ShapeMismatch {
            op: "step_major",
            lhs: vec![w, d],
            rhs: vec![bad.width, bad.n_features],
        }
        .into());
    }
    let mut data = Vec::with_capacity(windows.len() * w * d);
    for t in 0..w {
        for win in windows {
            data.extend_from_slice(win.row(t));
        }
    }
    Ok(Tensor::matrix(w * windows.len(), d, data))
}

/// Windows flattened row by row into `B × (width · d)`.
pub fn flattened(windows: &[LabeledWindow]) -> Result<Tensor, ModelError> {
    let first = windows.first().ok_or(ModelError::EmptyBatch)?;
    let cols = first.block.len();
    let mut data = Vec::with_capacity(windows.len() * cols);
    for win in windows {
        if win.block.len() != cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "flattened",
                lhs: vec![cols],
                rhs: vec![win.block.len()],
            }
            .into());
        }
        data.extend_from_slice(&win.block);
    }
    Ok(Tensor::matrix(windows.len(), cols, data))
}

impl Batch {
    pub fn from_windows(windows: &[LabeledWindow]) -> Result<Self, ModelError> {
        let input = step_major(windows)?;
        let months: Vec<YearMonth> = windows.iter().map(|w| w.end_month).collect();
        let mut pairs = Vec::new();
        for (i, m) in months.iter().enumerate() {
            let target = m.add_months(RECONSTRUCTION_LEAD);
            if let Some(j) = months.iter().position(|&x| x == target) {
                pairs.push((i, j));
            }
        }
        Ok(Self {
            input,
            labels: windows.iter().map(|w| w.label as f64).collect(),
            months,
            width: windows[0].width,
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Tape handles produced by [`model_forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `B × 1` probabilities.
    pub probability: Var,
    /// Final-step representation, `B × sequence_dim`.
    pub final_state: Var,
    /// `g(f(final_state))`, present with the autoencoder.
    pub final_reconstruction: Option<Var>,
    /// Per-step `B × 1` attention gates, oldest first.
    pub gates: Vec<Var>,
}

pub fn model_forward(
    tape: &mut Tape,
    arch: &Architecture,
    params: &ParameterSet<Var>,
    input: Var,
    width: usize,
) -> Result<ForwardOutput, ModelError> {
    let seq = bilstm_forward(tape, &params.bilstm, input, width, arch.stack_options())?;
    let final_state = seq.steps[width - 1];
    let (pool_in, final_reconstruction) = match &params.autoencoder {
        Some(ae) => {
            let batch = tape.value(final_state).rows();
            let all = tape.concat_rows(&seq.steps)?;
            let codes = ae.encoder.forward(tape, all)?;
            let steps = (0..width)
                .map(|t| tape.slice_rows(codes, t * batch, (t + 1) * batch))
                .collect::<Result<Vec<_>, _>>()?;
            let recon = ae.decoder.forward(tape, steps[width - 1])?;
            (steps, Some(recon))
        }
        None => (seq.steps.clone(), None),
    };
    let (pooled, gates) = attention_pool(tape, params.attention.as_ref(), &pool_in)?;
    let score = params.head.forward(tape, pooled)?;
    let probability = match arch.head {
        HeadKind::Tanh => {
            let t = tape.tanh(score)?;
            tape.affine(t, 0.5, 0.5)?
        }
        HeadKind::Sigmoid => tape.sigmoid(score)?,
    };
    Ok(ForwardOutput {
        probability,
        final_state,
        final_reconstruction,
        gates,
    })
}

/// Weighted loss terms as plain numbers.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub prediction: f64,
    pub reconstruction: f64,
    pub regularization: f64,
}

/// Loss terms on the tape; `reconstruction` is absent without the
/// autoencoder or without any six-month pair in the batch.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub prediction: Var,
    pub reconstruction: Option<Var>,
    pub regularization: Var,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            total: tape.value(self.total).item(),
            prediction: tape.value(self.prediction).item(),
            reconstruction: self.reconstruction.map_or(0.0, |r| tape.value(r).item()),
            regularization: tape.value(self.regularization).item(),
        }
    }
}

pub fn composite_loss(
    tape: &mut Tape,
    arch: &Architecture,
    params: &ParameterSet<Var>,
    batch: &Batch,
    weights: LossWeights,
) -> Result<LossTerms, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    weights.validate()?;
    let input = tape.constant(batch.input.clone());
    let out = model_forward(tape, arch, params, input, batch.width)?;

    let y = tape.constant(Tensor::column(batch.labels.clone()));
    let err = tape.sub(out.probability, y)?;
    let sq = tape.square(err)?;
    let prediction = tape.sum(sq)?;

    let reconstruction = match out.final_reconstruction {
        Some(recon) if !batch.pairs.is_empty() => {
            let (from, to): (Vec<usize>, Vec<usize>) = batch.pairs.iter().copied().unzip();
            let predicted = tape.gather_rows(recon, &from)?;
            let target = tape.gather_rows(out.final_state, &to)?;
            let diff = tape.sub(target, predicted)?;
            let sq = tape.square(diff)?;
            let s = tape.sum(sq)?;
            Some(tape.scale(s, weights.alpha)?)
        }
        _ => None,
    };

    let omega = weight_penalty(tape, params)?;
    let regularization = tape.scale(omega, weights.beta)?;

    let mut total = tape.add(prediction, regularization)?;
    if let Some(r) = reconstruction {
        total = tape.add(total, r)?;
    }
    Ok(LossTerms {
        total,
        prediction,
        reconstruction,
        regularization,
    })
}

/// Loss and gradients (in parameter visiting order) at `params`.
pub fn loss_and_gradients(
    arch: &Architecture,
    params: &ParameterSet<Tensor>,
    batch: &Batch,
    weights: LossWeights,
) -> Result<(LossBreakdown, Vec<Tensor>), ModelError> {
    let mut tape = Tape::new();
    let bound = params.map(&mut |t| tape.param(t.clone()));
    let terms = composite_loss(&mut tape, arch, &bound, batch, weights)?;
    let grads = tape.backward(terms.total)?;
    let values = terms.values(&tape);
    Ok((values, collect_vars(&bound).into_iter().map(|v| grads.wrt(v)).collect()))
}

/// A monthly recession call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub month: YearMonth,
    pub probability: f64,
    pub label: u8,
}

impl Prediction {
    pub fn new(month: YearMonth, probability: f64, threshold: f64) -> Self {
        Self {
            month,
            probability,
            label: u8::from(probability >= threshold),
        }
    }
}

/// Windows sorted by end month.
pub(crate) fn sorted_windows(windows: &[LabeledWindow]) -> Vec<&LabeledWindow> {
    let mut v: Vec<&LabeledWindow> = windows.iter().collect();
    v.sort_by_key(|w| w.end_month);
    v
}

/// Probabilities for `windows` in their given order.
pub fn probabilities(
    arch: &Architecture,
    params: &ParameterSet<Tensor>,
    windows: &[LabeledWindow],
) -> Result<Vec<f64>, ModelError> {
    if windows.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let bound = params.map(&mut |t| tape.constant(t.clone()));
    let input = tape.constant(step_major(windows)?);
    let out = model_forward(&mut tape, arch, &bound, input, windows[0].width)?;
    Ok(tape.value(out.probability).data().to_vec())
}

/// One prediction per window, ordered by end month.
pub fn predict(
    arch: &Architecture,
    params: &ParameterSet<Tensor>,
    windows: &[LabeledWindow],
    threshold: f64,
) -> Result<Vec<Prediction>, ModelError> {
    let ordered: Vec<LabeledWindow> = sorted_windows(windows).into_iter().cloned().collect();
    let probs = probabilities(arch, params, &ordered)?;
    Ok(ordered
        .iter()
        .zip(probs)
        .map(|(w, p)| Prediction::new(w.end_month, p, threshold))
        .collect())
}

/// Recession F1 of thresholded probabilities against window labels; 0 when
/// there is nothing to score.
pub fn recession_f1(probs: &[f64], windows: &[LabeledWindow], threshold: f64) -> Result<f64, ModelError> {
    if windows.is_empty() {
        return Ok(0.0);
    }
    let preds: Vec<u8> = probs.iter().map(|&p| u8::from(p >= threshold)).collect();
    let labels: Vec<u8> = windows.iter().map(|w| w.label).collect();
    Ok(evaluate(&preds, &labels)?.recession.f1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Loss at the parameters the epoch started from.
    pub loss: LossBreakdown,
    /// Validation recession F1 after the epoch's update.
    pub val_f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Snapshot from the epoch with the best validation F1.
    pub params: T,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
}

/// Full-batch Adam. `step` returns the loss and gradients at the given
/// parameters; `score` rates parameters after each update. The snapshot
/// with the highest score is returned, later epochs winning ties.
pub fn fit_adam<T: Parameterized<Tensor> + Clone>(
    init: T,
    epochs: usize,
    lr: f64,
    mut step: impl FnMut(&T) -> Result<(LossBreakdown, Vec<Tensor>), ModelError>,
    mut score: impl FnMut(&T) -> Result<f64, ModelError>,
) -> Result<TrainOutcome<T>, ModelError> {
    let mut params = init;
    let mut adam = AdamState::new(AdamConfig {
        lr,
        ..AdamConfig::default()
    });
    let mut history = Vec::with_capacity(epochs);
    let mut best: Option<(usize, f64, T)> = None;
    let mut first_loss = None;
    for epoch in 1..=epochs {
        let (loss, grads) = match step(&params) {
            Ok(v) => v,
            Err(ModelError::Autodiff(AutodiffError::NonFinite { .. })) => {
                return Err(ModelError::DivergenceDetected { epoch, loss: f64::NAN })
            }
            Err(e) => return Err(e),
        };
        let reference = *first_loss.get_or_insert(loss.total);
        if !loss.total.is_finite() || loss.total > DIVERGENCE_FACTOR * reference.max(1e-8) {
            return Err(ModelError::DivergenceDetected {
                epoch,
                loss: loss.total,
            });
        }
        adam_step(&mut params, &grads, &mut adam)?;
        let val_f1 = match score(&params) {
            Ok(v) => v,
            Err(ModelError::Autodiff(AutodiffError::NonFinite { .. })) => {
                return Err(ModelError::DivergenceDetected { epoch, loss: f64::NAN })
            }
            Err(e) => return Err(e),
        };
        history.push(EpochRecord { epoch, loss, val_f1 });
        let better = match &best {
            None => true,
            Some((_, b, _)) => val_f1.partial_cmp(b) != Some(Ordering::Less),
        };
        if better {
            best = Some((epoch, val_f1, params.clone()));
        }
    }
    let (best_epoch, best_val_f1, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params,
        history,
        best_epoch,
        best_val_f1,
    })
}

pub fn train(
    arch: &Architecture,
    config: &TrainConfig,
    train_windows: &[LabeledWindow],
    val_windows: &[LabeledWindow],
) -> Result<TrainOutcome<ParameterSet<Tensor>>, ModelError> {
    config.validate()?;
    let batch = Batch::from_windows(train_windows)?;
    let init = arch.init(config.seed)?;
    log::debug!(
        "training on {} windows ({} reconstruction pairs), {} epochs",
        batch.len(),
        batch.pairs.len(),
        config.epochs
    );
    fit_adam(
        init,
        config.epochs,
        config.lr,
        |p| loss_and_gradients(arch, p, &batch, config.weights),
        |p| {
            let probs = probabilities(arch, p, val_windows)?;
            recession_f1(&probs, val_windows, config.threshold)
        },
    )
}

#[cfg(test)]
mod tests;
