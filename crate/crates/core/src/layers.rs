//! Sequence-model building blocks on the autodiff tape: dense layers, the
//! LSTM cell, stacked bidirectional runners, the encoder/decoder pair and
//! sigmoid-gated attention pooling.
//!
//! Parameter structs are generic over the stored type: `Tensor` for owned
//! parameters, [`Var`] once bound to a [`Tape`] with `map`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{init_uniform, join_path, AutodiffError, ParamKind, Parameterized, Rng64, Tape, Tensor, Var};

/// `y = x W + b`; `W` is `in × out`, `b` is `1 × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<P> {
    pub weight: P,
    pub bias: P,
}

impl Dense<Tensor> {
    pub fn init(rng: &mut Rng64, input: usize, output: usize) -> Self {
        Self {
            weight: init_uniform(rng, input, output, input),
            bias: Tensor::zeros(1, output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(input, output),
            bias: Tensor::zeros(1, output),
        }
    }
}

impl<P> Dense<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Dense<Q> {
        Dense {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

impl Dense<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, AutodiffError> {
        let xw = tape.matmul(x, self.weight)?;
        tape.add(xw, self.bias)
    }
}

impl<P> Parameterized<P> for Dense<P> {
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a P, ParamKind)) {
        f(&join_path(path, "weight"), &self.weight, ParamKind::Weight);
        f(&join_path(path, "bias"), &self.bias, ParamKind::Bias);
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut P, ParamKind)) {
        f(&join_path(path, "weight"), &mut self.weight, ParamKind::Weight);
        f(&join_path(path, "bias"), &mut self.bias, ParamKind::Bias);
    }
}

/// Activation for the candidate and cell-output paths of an LSTM cell.
/// Gates always use the sigmoid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellActivation {
    #[default]
    Tanh,
    Relu,
}

fn activate(tape: &mut Tape, x: Var, act: CellActivation) -> Result<Var, AutodiffError> {
    match act {
        CellActivation::Tanh => tape.tanh(x),
        CellActivation::Relu => tape.relu(x),
    }
}

/// One LSTM cell. Gate blocks are packed column-wise as
/// `[input | forget | output | candidate]`, each `hidden` wide.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell<P> {
    pub w_x: P,
    pub w_h: P,
    pub bias: P,
    pub hidden: usize,
}

impl LstmCell<Tensor> {
    pub fn init(rng: &mut Rng64, input: usize, hidden: usize) -> Self {
        Self {
            w_x: init_uniform(rng, input, 4 * hidden, input),
            w_h: init_uniform(rng, hidden, 4 * hidden, hidden),
            bias: Tensor::zeros(1, 4 * hidden),
            hidden,
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_x: Tensor::zeros(input, 4 * hidden),
            w_h: Tensor::zeros(hidden, 4 * hidden),
            bias: Tensor::zeros(1, 4 * hidden),
            hidden,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.rows()
    }
}

impl<P> LstmCell<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> LstmCell<Q> {
        LstmCell {
            w_x: f(&self.w_x),
            w_h: f(&self.w_h),
            bias: f(&self.bias),
            hidden: self.hidden,
        }
    }
}

impl<P> Parameterized<P> for LstmCell<P> {
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a P, ParamKind)) {
        f(&join_path(path, "w_x"), &self.w_x, ParamKind::Weight);
        f(&join_path(path, "w_h"), &self.w_h, ParamKind::Weight);
        f(&join_path(path, "bias"), &self.bias, ParamKind::Bias);
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut P, ParamKind)) {
        f(&join_path(path, "w_x"), &mut self.w_x, ParamKind::Weight);
        f(&join_path(path, "w_h"), &mut self.w_h, ParamKind::Weight);
        f(&join_path(path, "bias"), &mut self.bias, ParamKind::Bias);
    }
}

/// One recurrence step on a batch: `x_t` is `B × d`, states are `B × H`.
pub fn lstm_step(
    tape: &mut Tape,
    cell: &LstmCell<Var>,
    x_t: Var,
    h_prev: Var,
    c_prev: Var,
    act: CellActivation,
) -> Result<(Var, Var), AutodiffError> {
    let xw = tape.matmul(x_t, cell.w_x)?;
    let proj = tape.add(xw, cell.bias)?;
    lstm_step_projected(tape, cell, proj, Some((h_prev, c_prev)), act)
}

/// Step with the input projection `x_t W_x + b` already computed. `None`
/// state means zeros and skips the recurrent terms.
fn lstm_step_projected(
    tape: &mut Tape,
    cell: &LstmCell<Var>,
    proj: Var,
    state: Option<(Var, Var)>,
    act: CellActivation,
) -> Result<(Var, Var), AutodiffError> {
    let h = cell.hidden;
    let z = match state {
        Some((h_prev, _)) => {
            let hw = tape.matmul(h_prev, cell.w_h)?;
            tape.add(proj, hw)?
        }
        None => proj,
    };
    let gate_pre = tape.slice_cols(z, 0, 3 * h)?;
    let gates = tape.sigmoid(gate_pre)?;
    let input_gate = tape.slice_cols(gates, 0, h)?;
    let output_gate = tape.slice_cols(gates, 2 * h, 3 * h)?;
    let cand_pre = tape.slice_cols(z, 3 * h, 4 * h)?;
    let candidate = activate(tape, cand_pre, act)?;
    let written = tape.mul(input_gate, candidate)?;
    let c = match state {
        Some((_, c_prev)) => {
            let forget_gate = tape.slice_cols(gates, h, 2 * h)?;
            let kept = tape.mul(forget_gate, c_prev)?;
            tape.add(kept, written)?
        }
        None => written,
    };
    let c_act = activate(tape, c, act)?;
    let h_t = tape.mul(output_gate, c_act)?;
    Ok((h_t, c))
}

/// Forward and optional backward cells of one stacked layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLayer<P> {
    pub forward: LstmCell<P>,
    pub backward: Option<LstmCell<P>>,
}

impl<P> BiLayer<P> {
    pub fn output_dim(&self) -> usize {
        self.forward.hidden * if self.backward.is_some() { 2 } else { 1 }
    }
}

impl<P> Parameterized<P> for BiLayer<P> {
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a P, ParamKind)) {
        self.forward.visit(&join_path(path, "forward"), f);
        self.backward.visit(&join_path(path, "backward"), f);
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut P, ParamKind)) {
        self.forward.visit_mut(&join_path(path, "forward"), f);
        self.backward.visit_mut(&join_path(path, "backward"), f);
    }
}

/// Stacked (bi)directional LSTM. Layer `l + 1` consumes the concatenated
/// per-step outputs of layer `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmStack<P> {
    pub layers: Vec<BiLayer<P>>,
}

impl BiLstmStack<Tensor> {
    pub fn init(rng: &mut Rng64, input: usize, sizes: &[usize], bidirectional: bool) -> Self {
        let mut layers = Vec::with_capacity(sizes.len());
        let mut dim = input;
        for &h in sizes {
            let forward = LstmCell::init(rng, dim, h);
            let backward = bidirectional.then(|| LstmCell::init(rng, dim, h));
            let layer = BiLayer { forward, backward };
            dim = layer.output_dim();
            layers.push(layer);
        }
        Self { layers }
    }

    pub fn zeros(input: usize, sizes: &[usize], bidirectional: bool) -> Self {
        let mut layers = Vec::with_capacity(sizes.len());
        let mut dim = input;
        for &h in sizes {
            let layer = BiLayer {
                forward: LstmCell::zeros(dim, h),
                backward: bidirectional.then(|| LstmCell::zeros(dim, h)),
            };
            dim = layer.output_dim();
            layers.push(layer);
        }
        Self { layers }
    }
}

impl<P> BiLstmStack<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> BiLstmStack<Q> {
        BiLstmStack {
            layers: self
                .layers
                .iter()
                .map(|l| BiLayer {
                    forward: l.forward.map(f),
                    backward: l.backward.as_ref().map(|b| b.map(f)),
                })
                .collect(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output_dim())
    }

    pub fn is_bidirectional(&self) -> bool {
        self.layers.iter().all(|l| l.backward.is_some())
    }
}

impl<P> Parameterized<P> for BiLstmStack<P> {
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a P, ParamKind)) {
        self.layers.visit(path, f);
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut P, ParamKind)) {
        self.layers.visit_mut(path, f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackOptions {
    pub activation: CellActivation,
    /// ReLU on the outputs passed between stacked layers.
    pub interlayer_relu: bool,
}

impl Default for StackOptions {
    fn default() -> Self {
        Self {
            activation: CellActivation::Tanh,
            interlayer_relu: true,
        }
    }
}

/// Outputs of [`bilstm_forward`].
#[derive(Debug, Clone)]
pub struct SequenceOutput {
    /// One `B × output_dim` block per time step, oldest first.
    pub steps: Vec<Var>,
    /// Final forward state joined with the backward state after it has
    /// read the whole window (`B × output_dim`).
    pub summary: Var,
}

/// Runs the stack over a batch. `input` is `(width · B) × d`, step-major:
/// rows `t·B .. (t+1)·B` hold time step `t` of every sequence.
pub fn bilstm_forward(
    tape: &mut Tape,
    stack: &BiLstmStack<Var>,
    input: Var,
    width: usize,
    opts: StackOptions,
) -> Result<SequenceOutput, AutodiffError> {
    let total = tape.value(input).rows();
    if width == 0 || !total.is_multiple_of(width) {
        return Err(AutodiffError::ShapeMismatch {
            op: "bilstm_forward",
            lhs: tape.value(input).shape().to_vec(),
            rhs: vec![width],
        });
    }
    let batch = total / width;
    let mut x = input;
    let mut steps = Vec::new();
    let mut summary = None;
    for (li, layer) in stack.layers.iter().enumerate() {
        let fwd = run_direction(tape, &layer.forward, x, width, batch, false, opts.activation)?;
        let bwd = match &layer.backward {
            Some(cell) => Some(run_direction(tape, cell, x, width, batch, true, opts.activation)?),
            None => None,
        };
        steps = match &bwd {
            Some(b) => (0..width)
                .map(|t| tape.concat_cols(&[fwd[t], b[t]]))
                .collect::<Result<Vec<_>, _>>()?,
            None => fwd.clone(),
        };
        let last = li + 1 == stack.layers.len();
        if last {
            summary = Some(match &bwd {
                Some(b) => tape.concat_cols(&[fwd[width - 1], b[0]])?,
                None => fwd[width - 1],
            });
        } else {
            if opts.interlayer_relu {
                steps = steps.into_iter().map(|s| tape.relu(s)).collect::<Result<_, _>>()?;
            }
            x = tape.concat_rows(&steps)?;
        }
    }
    let summary = summary.ok_or(AutodiffError::EmptyConcat)?;
    Ok(SequenceOutput { steps, summary })
}

fn run_direction(
    tape: &mut Tape,
    cell: &LstmCell<Var>,
    x: Var,
    width: usize,
    batch: usize,
    reverse: bool,
    act: CellActivation,
) -> Result<Vec<Var>, AutodiffError> {
    let xw = tape.matmul(x, cell.w_x)?;
    let proj = tape.add(xw, cell.bias)?;
    let mut out = vec![None; width];
    let mut state = None;
    let order: Vec<usize> = if reverse { (0..width).rev().collect() } else { (0..width).collect() };
    for t in order {
        let p = tape.slice_rows(proj, t * batch, (t + 1) * batch)?;
        let (h, c) = lstm_step_projected(tape, cell, p, state, act)?;
        state = Some((h, c));
        out[t] = Some(h);
    }
    Ok(out.into_iter().map(|v| v.expect("every step visited")).collect())
}

/// Encoder `f` and decoder `g`, both affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder<P> {
    pub encoder: Dense<P>,
    pub decoder: Dense<P>,
}

impl Autoencoder<Tensor> {
    pub fn init(rng: &mut Rng64, input: usize, bottleneck: usize) -> Self {
        Self {
            encoder: Dense::init(rng, input, bottleneck),
            decoder: Dense::init(rng, bottleneck, input),
        }
    }
}

impl<P> Autoencoder<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Autoencoder<Q> {
        Autoencoder {
            encoder: self.encoder.map(f),
            decoder: self.decoder.map(f),
        }
    }
}

impl<P> Parameterized<P> for Autoencoder<P> {
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a P, ParamKind)) {
        self.encoder.visit(&join_path(path, "encoder"), f);
        self.decoder.visit(&join_path(path, "decoder"), f);
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut P, ParamKind)) {
        self.encoder.visit_mut(&join_path(path, "encoder"), f);
        self.decoder.visit_mut(&join_path(path, "decoder"), f);
    }
}

/// Returns `(z, g(z))` with `z = f(h)`.
pub fn autoencode(tape: &mut Tape, ae: &Autoencoder<Var>, h: Var) -> Result<(Var, Var), AutodiffError> {
    let z = ae.encoder.forward(tape, h)?;
    let recon = ae.decoder.forward(tape, z)?;
    Ok((z, recon))
}

/// Per-step scalar score `s_t = step_t w + b`, gated by the sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<P> {
    pub score: Dense<P>,
}

impl Attention<Tensor> {
    pub fn init(rng: &mut Rng64, dim: usize) -> Self {
        Self {
            score: Dense::init(rng, dim, 1),
        }
    }
}

impl<P> Attention<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Attention<Q> {
        Attention {
            score: self.score.map(f),
        }
    }
}

impl<P> Parameterized<P> for Attention<P> {
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a P, ParamKind)) {
        self.score.visit(&join_path(path, "score"), f);
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut P, ParamKind)) {
        self.score.visit_mut(&join_path(path, "score"), f);
    }
}

/// `pooled = Σ_t a_t · step_t` with `a_t = sigmoid(score(step_t))`. Without
/// attention parameters every gate is 1 and this is a plain sum. Returns
/// the pooled `B × d` block and the `B × 1` gates (empty when ungated).
pub fn attention_pool(
    tape: &mut Tape,
    attention: Option<&Attention<Var>>,
    steps: &[Var],
) -> Result<(Var, Vec<Var>), AutodiffError> {
    let mut pooled: Option<Var> = None;
    let mut gates = Vec::new();
    for &s in steps {
        let contribution = match attention {
            Some(att) => {
                let score = att.score.forward(tape, s)?;
                let gate = tape.sigmoid(score)?;
                gates.push(gate);
                tape.mul_col(gate, s)?
            }
            None => s,
        };
        pooled = Some(match pooled {
            Some(acc) => tape.add(acc, contribution)?,
            None => contribution,
        });
    }
    let pooled = pooled.ok_or(AutodiffError::EmptyConcat)?;
    Ok((pooled, gates))
}
