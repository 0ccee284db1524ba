//! Comparison models trained on the same windows as the main model.
//!
//! Linear kinds (SVM, logistic, probit) and the DNN see each window as one
//! flattened `width · d` vector; LSTM and BiLSTM read it month by month.
//! The linear kinds are deterministic, so their results do not depend on
//! the seed.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    collect_vars, join_path, sigmoid, AutodiffError, ParamKind, Parameterized, Tape, Tensor, Var,
};
use crate::eval::{evaluate, EvalError};
use crate::features::LabeledWindow;
use crate::layers::{bilstm_forward, BiLstmStack, Dense, StackOptions};
use crate::model::{
    fit_adam, flattened, recession_f1, sorted_windows, step_major, LossBreakdown, ModelError, Prediction,
    TrainConfig,
};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("singular system in {0}")]
    SingularSystem(&'static str),
    #[error("no training windows")]
    EmptyTraining,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl From<AutodiffError> for BaselineError {
    fn from(e: AutodiffError) -> Self {
        BaselineError::Model(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Svm,
    Logistic,
    Probit,
    Lstm,
    Bilstm,
    Autoencoder,
    Dnn,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 7] = [
        BaselineKind::Svm,
        BaselineKind::Logistic,
        BaselineKind::Probit,
        BaselineKind::Lstm,
        BaselineKind::Bilstm,
        BaselineKind::Autoencoder,
        BaselineKind::Dnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Svm => "svm",
            BaselineKind::Logistic => "logistic",
            BaselineKind::Probit => "probit",
            BaselineKind::Lstm => "lstm",
            BaselineKind::Bilstm => "bilstm",
            BaselineKind::Autoencoder => "autoencoder",
            BaselineKind::Dnn => "dnn",
        }
    }

    /// Whether results are independent of the seed.
    pub fn is_deterministic(self) -> bool {
        matches!(self, BaselineKind::Svm | BaselineKind::Logistic | BaselineKind::Probit)
    }
}

/// SVM regularization strengths tried on the validation split.
pub const SVM_C_GRID: [f64; 4] = [0.01, 0.1, 1.0, 10.0];
pub const SVM_ITERATIONS: usize = 2000;
/// L2 strength of the logistic models (intercept excluded).
pub const LOGISTIC_L2: f64 = 1.0;
pub const NEWTON_MAX_ITER: usize = 100;
pub const NEWTON_TOL: f64 = 1e-8;
pub const HESSIAN_RIDGE: f64 = 1e-6;
pub const AE_BASELINE_CODE: usize = 8;

/// Standard normal CDF (Hart's algorithm as arranged by West), accurate
/// to double precision and computed from the smaller tail.
pub fn normal_cdf(x: f64) -> f64 {
    let a = x.abs();
    let tail = if a > 37.0 {
        0.0
    } else {
        let e = (-a * a / 2.0).exp();
        if a < 7.071_067_811_865_47 {
            let mut num = 3.526_249_659_989_11e-2 * a + 0.700_383_064_443_688;
            num = num * a + 6.373_962_203_531_65;
            num = num * a + 33.912_866_078_383;
            num = num * a + 112.079_291_497_871;
            num = num * a + 221.213_596_169_931;
            num = num * a + 220.206_867_912_376;
            let mut den = 8.838_834_764_831_84e-2 * a + 1.755_667_163_182_64;
            den = den * a + 16.064_177_579_207;
            den = den * a + 86.780_732_202_946_1;
            den = den * a + 296.564_248_779_674;
            den = den * a + 637.333_633_378_831;
            den = den * a + 793.826_512_519_948;
            den = den * a + 440.413_735_824_752;
            e * num / den
        } else {
            let mut b = a + 0.65;
            b = a + 4.0 / b;
            b = a + 3.0 / b;
            b = a + 2.0 / b;
            b = a + 1.0 / b;
            e / b / 2.506_628_274_631
        }
    };
    if x > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

pub fn normal_pdf(x: f64) -> f64 {
    (-x * x / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `φ(t) / Φ(t)`, finite for all `t`.
pub fn inverse_mills(t: f64) -> f64 {
    if t > -30.0 {
        normal_pdf(t) / normal_cdf(t)
    } else {
        // Asymptotic series of the ratio for large negative t.
        let u = 1.0 / (t * t);
        -t / (1.0 - u + 3.0 * u * u - 15.0 * u * u * u)
    }
}

/// Design matrix with a trailing intercept column.
fn design(windows: &[LabeledWindow]) -> Result<DMatrix<f64>, BaselineError> {
    let x = flattened(windows)?;
    let (n, d) = (x.rows(), x.cols());
    Ok(DMatrix::from_fn(n, d + 1, |i, j| if j < d { x.at(i, j) } else { 1.0 }))
}

fn targets(windows: &[LabeledWindow]) -> DVector<f64> {
    DVector::from_iterator(windows.len(), windows.iter().map(|w| w.label as f64))
}

/// `Xᵀ diag(w) X`.
fn weighted_gram(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = x.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= w[i];
    }
    x.transpose() * scaled
}

/// Damped Newton minimization of a smooth convex objective. `eval`
/// returns value, gradient and Hessian.
fn newton(
    name: &'static str,
    dim: usize,
    eval: impl Fn(&DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>),
) -> Result<DVector<f64>, BaselineError> {
    let mut beta = DVector::zeros(dim);
    let (mut f, mut g, mut h) = eval(&beta);
    for iter in 0..NEWTON_MAX_ITER {
        if g.norm() < NEWTON_TOL {
            log::debug!("{name}: converged after {iter} Newton steps");
            return Ok(beta);
        }
        for i in 0..dim {
            h[(i, i)] += HESSIAN_RIDGE;
        }
        let chol = h.clone().cholesky().ok_or(BaselineError::SingularSystem(name))?;
        let step = chol.solve(&g);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let candidate = &beta - t * &step;
            let (fc, gc, hc) = eval(&candidate);
            if fc.is_finite() && fc <= f {
                beta = candidate;
                f = fc;
                g = gc;
                h = hc;
                accepted = true;
                break;
            }
            t /= 2.0;
        }
        if !accepted {
            log::debug!("{name}: step halving stalled at iteration {iter}");
            return Ok(beta);
        }
    }
    log::warn!("{name}: no convergence in {NEWTON_MAX_ITER} Newton steps (gradient norm {:e})", g.norm());
    Ok(beta)
}

/// L2-penalized logistic regression; the last coefficient is the
/// unpenalized intercept.
pub fn fit_logistic(x: &DMatrix<f64>, y: &DVector<f64>, l2: f64) -> Result<DVector<f64>, BaselineError> {
    let d = x.ncols();
    newton("logistic", d, |beta| {
        let eta = x * beta;
        let mut f = 0.0;
        let mut resid = DVector::zeros(eta.len());
        let mut w = DVector::zeros(eta.len());
        for i in 0..eta.len() {
            let p = sigmoid(eta[i]);
            f += crate::autodiff::softplus(eta[i]) - y[i] * eta[i];
            resid[i] = p - y[i];
            w[i] = p * (1.0 - p);
        }
        let mut g = x.transpose() * resid;
        let mut h = weighted_gram(x, &w);
        for j in 0..d - 1 {
            f += 0.5 * l2 * beta[j] * beta[j];
            g[j] += l2 * beta[j];
            h[(j, j)] += l2;
        }
        (f, g, h)
    })
}

/// Maximum-likelihood probit regression.
pub fn fit_probit(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>, BaselineError> {
    newton("probit", x.ncols(), |beta| {
        let eta = x * beta;
        let mut f = 0.0;
        let mut score = DVector::zeros(eta.len());
        let mut w = DVector::zeros(eta.len());
        for i in 0..eta.len() {
            let q = 2.0 * y[i] - 1.0;
            let t = q * eta[i];
            let cdf = normal_cdf(t);
            f -= if cdf > 0.0 {
                cdf.ln()
            } else {
                // log Φ(t) for t far in the lower tail
                let log_pdf = -t * t / 2.0 - 0.5 * (2.0 * std::f64::consts::PI).ln();
                log_pdf - inverse_mills(t).ln()
            };
            let lambda = inverse_mills(t);
            score[i] = -q * lambda;
            w[i] = lambda * (lambda + t);
        }
        let g = x.transpose() * score;
        let h = weighted_gram(x, &w);
        (f, g, h)
    })
}

/// Linear soft-margin SVM by full-batch projected subgradient descent on
/// `λ/2 ‖w‖² + mean hinge`, `λ = 1 / (C n)`, returning the average of the
/// second half of the iterates. Labels are mapped to ±1; the intercept is
/// the last coefficient and is regularized with the rest.
pub fn fit_svm(x: &DMatrix<f64>, y: &DVector<f64>, c: f64, iterations: usize) -> DVector<f64> {
    let (n, d) = (x.nrows(), x.ncols());
    let lambda = 1.0 / (c * n as f64);
    let radius = 1.0 / lambda.sqrt();
    let signs = y.map(|v| 2.0 * v - 1.0);
    let mut w = DVector::zeros(d);
    let mut avg = DVector::zeros(d);
    let mut counted = 0.0;
    for t in 1..=iterations {
        let margins = x * &w;
        let mut sub = DVector::zeros(n);
        for i in 0..n {
            if signs[i] * margins[i] < 1.0 {
                sub[i] = signs[i];
            }
        }
        let eta = 1.0 / (lambda * t as f64);
        let hinge_grad = x.transpose() * sub / n as f64;
        w = (1.0 - eta * lambda) * w + eta * hinge_grad;
        let norm = w.norm();
        if norm > radius {
            w *= radius / norm;
        }
        if 2 * t > iterations {
            avg += &w;
            counted += 1.0;
        }
    }
    avg / counted
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Logistic,
    Probit,
    /// Raw margin, reported through the logistic function.
    Margin,
}

/// One recurrent stack read out from its summary state.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentNet<P> {
    pub stack: BiLstmStack<P>,
    pub head: Dense<P>,
}

impl<P> RecurrentNet<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> RecurrentNet<Q> {
        RecurrentNet {
            stack: self.stack.map(f),
            head: self.head.map(f),
        }
    }
}

impl<P> Parameterized<P> for RecurrentNet<P> {
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a P, ParamKind)) {
        self.stack.visit(&join_path(path, "stack"), f);
        self.head.visit(&join_path(path, "head"), f);
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut P, ParamKind)) {
        self.stack.visit_mut(&join_path(path, "stack"), f);
        self.head.visit_mut(&join_path(path, "head"), f);
    }
}

/// Two dense layers with a ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet<P> {
    pub hidden: Dense<P>,
    pub output: Dense<P>,
}

impl<P> DenseNet<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> DenseNet<Q> {
        DenseNet {
            hidden: self.hidden.map(f),
            output: self.output.map(f),
        }
    }
}

impl<P> Parameterized<P> for DenseNet<P> {
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a P, ParamKind)) {
        self.hidden.visit(&join_path(path, "hidden"), f);
        self.output.visit(&join_path(path, "output"), f);
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut P, ParamKind)) {
        self.hidden.visit_mut(&join_path(path, "hidden"), f);
        self.output.visit_mut(&join_path(path, "output"), f);
    }
}

/// `tanh` encoder and linear decoder over flattened windows.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatAutoencoder<P> {
    pub encoder: Dense<P>,
    pub decoder: Dense<P>,
}

impl<P> FlatAutoencoder<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> FlatAutoencoder<Q> {
        FlatAutoencoder {
            encoder: self.encoder.map(f),
            decoder: self.decoder.map(f),
        }
    }
}

impl<P> Parameterized<P> for FlatAutoencoder<P> {
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a P, ParamKind)) {
        self.encoder.visit(&join_path(path, "encoder"), f);
        self.decoder.visit(&join_path(path, "decoder"), f);
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut P, ParamKind)) {
        self.encoder.visit_mut(&join_path(path, "encoder"), f);
        self.decoder.visit_mut(&join_path(path, "decoder"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BaselineModel {
    Linear {
        kind: BaselineKind,
        link: Link,
        /// Feature weights followed by the intercept.
        coefficients: Vec<f64>,
        /// SVM regularization chosen on validation.
        c: Option<f64>,
    },
    Recurrent {
        kind: BaselineKind,
        net: RecurrentNet<Tensor>,
    },
    Dnn {
        net: DenseNet<Tensor>,
    },
    Autoencoder {
        ae: FlatAutoencoder<Tensor>,
        /// Logistic head on the code, intercept last.
        head: Vec<f64>,
    },
}

impl BaselineModel {
    pub fn kind(&self) -> BaselineKind {
        match self {
            BaselineModel::Linear { kind, .. } | BaselineModel::Recurrent { kind, .. } => *kind,
            BaselineModel::Dnn { .. } => BaselineKind::Dnn,
            BaselineModel::Autoencoder { .. } => BaselineKind::Autoencoder,
        }
    }
}

/// Training outcome with the per-epoch history of gradient-trained kinds.
#[derive(Debug, Clone)]
pub struct BaselineFit {
    pub model: BaselineModel,
    pub history: Vec<crate::model::EpochRecord>,
}

fn linear_probabilities(link: Link, coefficients: &[f64], x: &DMatrix<f64>) -> Vec<f64> {
    let beta = DVector::from_column_slice(coefficients);
    let eta = x * beta;
    eta.iter()
        .map(|&e| match link {
            Link::Logistic | Link::Margin => sigmoid(e),
            Link::Probit => normal_cdf(e),
        })
        .collect()
}

fn recurrent_scores(
    tape: &mut Tape,
    net: &RecurrentNet<Var>,
    windows: &[LabeledWindow],
) -> Result<Var, BaselineError> {
    let input = tape.constant(step_major(windows)?);
    let seq = bilstm_forward(tape, &net.stack, input, windows[0].width, StackOptions::default())?;
    Ok(net.head.forward(tape, seq.summary)?)
}

fn dense_scores(tape: &mut Tape, net: &DenseNet<Var>, windows: &[LabeledWindow]) -> Result<Var, BaselineError> {
    let input = tape.constant(flattened(windows)?);
    let h = net.hidden.forward(tape, input)?;
    let a = tape.relu(h)?;
    Ok(net.output.forward(tape, a)?)
}

fn ae_codes(tape: &mut Tape, ae: &FlatAutoencoder<Var>, input: Var) -> Result<Var, BaselineError> {
    let pre = ae.encoder.forward(tape, input)?;
    Ok(tape.tanh(pre)?)
}

/// Sum of binary cross-entropies from raw scores.
fn bce(tape: &mut Tape, scores: Var, labels: &[LabeledWindow]) -> Result<Var, AutodiffError> {
    let y = tape.constant(Tensor::column(labels.iter().map(|w| w.label as f64).collect()));
    let sp = tape.softplus(scores)?;
    let ys = tape.mul(y, scores)?;
    let diff = tape.sub(sp, ys)?;
    tape.sum(diff)
}

fn gradients_of<B: Parameterized<Var>>(
    tape: &Tape,
    bound: &B,
    loss: Var,
) -> Result<(LossBreakdown, Vec<Tensor>), ModelError> {
    let grads = tape.backward(loss)?;
    let total = tape.value(loss).item();
    let breakdown = LossBreakdown {
        total,
        prediction: total,
        ..LossBreakdown::default()
    };
    Ok((breakdown, collect_vars(bound).into_iter().map(|v| grads.wrt(v)).collect()))
}

fn score_probs(probs: Vec<f64>) -> Vec<f64> {
    probs.into_iter().map(sigmoid).collect()
}

/// Probabilities in the order of `windows`.
pub fn baseline_probabilities(model: &BaselineModel, windows: &[LabeledWindow]) -> Result<Vec<f64>, BaselineError> {
    if windows.is_empty() {
        return Ok(Vec::new());
    }
    match model {
        BaselineModel::Linear { link, coefficients, .. } => {
            Ok(linear_probabilities(*link, coefficients, &design(windows)?))
        }
        BaselineModel::Recurrent { net, .. } => {
            let mut tape = Tape::new();
            let bound = net.map(&mut |t| tape.constant(t.clone()));
            let s = recurrent_scores(&mut tape, &bound, windows)?;
            Ok(score_probs(tape.value(s).data().to_vec()))
        }
        BaselineModel::Dnn { net } => {
            let mut tape = Tape::new();
            let bound = net.map(&mut |t| tape.constant(t.clone()));
            let s = dense_scores(&mut tape, &bound, windows)?;
            Ok(score_probs(tape.value(s).data().to_vec()))
        }
        BaselineModel::Autoencoder { ae, head } => {
            let codes = encode_windows(ae, windows)?;
            Ok(linear_probabilities(Link::Logistic, head, &codes))
        }
    }
}

/// Codes with a trailing intercept column.
fn encode_windows(ae: &FlatAutoencoder<Tensor>, windows: &[LabeledWindow]) -> Result<DMatrix<f64>, BaselineError> {
    let mut tape = Tape::new();
    let bound = ae.map(&mut |t| tape.constant(t.clone()));
    let input = tape.constant(flattened(windows)?);
    let z = ae_codes(&mut tape, &bound, input)?;
    let z = tape.value(z);
    Ok(DMatrix::from_fn(z.rows(), z.cols() + 1, |i, j| {
        if j < z.cols() {
            z.at(i, j)
        } else {
            1.0
        }
    }))
}

/// Reconstruction loss of the autoencoder baseline on its training
/// windows, with gradients.
fn ae_step(
    ae: &FlatAutoencoder<Tensor>,
    data: &Tensor,
) -> Result<(LossBreakdown, Vec<Tensor>), ModelError> {
    let mut tape = Tape::new();
    let bound = ae.map(&mut |t| tape.param(t.clone()));
    let input = tape.constant(data.clone());
    let pre = bound.encoder.forward(&mut tape, input)?;
    let z = tape.tanh(pre)?;
    let recon = bound.decoder.forward(&mut tape, z)?;
    let diff = tape.sub(recon, input)?;
    let sq = tape.square(diff)?;
    let loss = tape.sum(sq)?;
    let grads = tape.backward(loss)?;
    let total = tape.value(loss).item();
    Ok((
        LossBreakdown {
            total,
            reconstruction: total,
            ..LossBreakdown::default()
        },
        collect_vars(&bound).into_iter().map(|v| grads.wrt(v)).collect(),
    ))
}

/// Trains the autoencoder part of the autoencoder baseline alone.
pub fn train_flat_autoencoder(
    windows: &[LabeledWindow],
    code: usize,
    config: &TrainConfig,
) -> Result<crate::model::TrainOutcome<FlatAutoencoder<Tensor>>, BaselineError> {
    let data = flattened(windows)?;
    let mut rng = crate::autodiff::seeded_rng(config.seed);
    let init = FlatAutoencoder {
        encoder: Dense::init(&mut rng, data.cols(), code),
        decoder: Dense::init(&mut rng, code, data.cols()),
    };
    Ok(fit_adam(init, config.epochs, config.lr, |p| ae_step(p, &data), |_| Ok(0.0))?)
}

pub fn train_baseline(
    kind: BaselineKind,
    train: &[LabeledWindow],
    val: &[LabeledWindow],
    config: &TrainConfig,
) -> Result<BaselineFit, BaselineError> {
    if train.is_empty() {
        return Err(BaselineError::EmptyTraining);
    }
    let threshold = config.threshold;
    let linear = |link: Link, coefficients: DVector<f64>, c: Option<f64>| BaselineFit {
        model: BaselineModel::Linear {
            kind,
            link,
            coefficients: coefficients.as_slice().to_vec(),
            c,
        },
        history: Vec::new(),
    };
    match kind {
        BaselineKind::Logistic => {
            let beta = fit_logistic(&design(train)?, &targets(train), LOGISTIC_L2)?;
            Ok(linear(Link::Logistic, beta, None))
        }
        BaselineKind::Probit => {
            let beta = fit_probit(&design(train)?, &targets(train))?;
            Ok(linear(Link::Probit, beta, None))
        }
        BaselineKind::Svm => {
            let (x, y) = (design(train)?, targets(train));
            let mut best: Option<(f64, f64, DVector<f64>)> = None;
            for &c in &SVM_C_GRID {
                let w = fit_svm(&x, &y, c, SVM_ITERATIONS);
                let f1 = if val.is_empty() {
                    0.0
                } else {
                    recession_f1(&linear_probabilities(Link::Margin, w.as_slice(), &design(val)?), val, threshold)?
                };
                log::debug!("svm C={c}: validation F1 {f1:.4}");
                if best.as_ref().is_none_or(|(_, b, _)| f1 > *b) {
                    best = Some((c, f1, w));
                }
            }
            let (c, _, w) = best.expect("non-empty grid");
            Ok(linear(Link::Margin, w, Some(c)))
        }
        BaselineKind::Lstm | BaselineKind::Bilstm => {
            let init = recurrent_init(train[0].n_features, kind == BaselineKind::Bilstm, config.seed);
            let out = fit_adam(
                init,
                config.epochs,
                config.lr,
                |p| {
                    let mut tape = Tape::new();
                    let bound = p.map(&mut |t| tape.param(t.clone()));
                    let s = recurrent_scores(&mut tape, &bound, train).map_err(to_model_error)?;
                    let loss = bce(&mut tape, s, train)?;
                    gradients_of(&tape, &bound, loss)
                },
                |p| {
                    let model = BaselineModel::Recurrent { kind, net: p.clone() };
                    validation_f1(&model, val, threshold)
                },
            )?;
            Ok(BaselineFit {
                model: BaselineModel::Recurrent { kind, net: out.params },
                history: out.history,
            })
        }
        BaselineKind::Dnn => {
            let mut rng = crate::autodiff::seeded_rng(config.seed);
            let input = train[0].block.len();
            let init = DenseNet {
                hidden: Dense::init(&mut rng, input, 12),
                output: Dense::init(&mut rng, 12, 1),
            };
            let out = fit_adam(
                init,
                config.epochs,
                config.lr,
                |p| {
                    let mut tape = Tape::new();
                    let bound = p.map(&mut |t| tape.param(t.clone()));
                    let s = dense_scores(&mut tape, &bound, train).map_err(to_model_error)?;
                    let loss = bce(&mut tape, s, train)?;
                    gradients_of(&tape, &bound, loss)
                },
                |p| validation_f1(&BaselineModel::Dnn { net: p.clone() }, val, threshold),
            )?;
            Ok(BaselineFit {
                model: BaselineModel::Dnn { net: out.params },
                history: out.history,
            })
        }
        BaselineKind::Autoencoder => {
            let out = train_flat_autoencoder(train, AE_BASELINE_CODE, config)?;
            let codes = encode_windows(&out.params, train)?;
            let head = fit_logistic(&codes, &targets(train), LOGISTIC_L2)?;
            Ok(BaselineFit {
                model: BaselineModel::Autoencoder {
                    ae: out.params,
                    head: head.as_slice().to_vec(),
                },
                history: out.history,
            })
        }
    }
}

/// Recurrent baseline with layers of 12 and 8 units.
pub fn recurrent_init(input: usize, bidirectional: bool, seed: u64) -> RecurrentNet<Tensor> {
    let mut rng = crate::autodiff::seeded_rng(seed);
    let stack = BiLstmStack::init(&mut rng, input, &[12, 8], bidirectional);
    let head = Dense::init(&mut rng, stack.output_dim(), 1);
    RecurrentNet { stack, head }
}

fn to_model_error(e: BaselineError) -> ModelError {
    match e {
        BaselineError::Model(m) => m,
        other => ModelError::InvalidConfig(other.to_string()),
    }
}

fn validation_f1(model: &BaselineModel, val: &[LabeledWindow], threshold: f64) -> Result<f64, ModelError> {
    let probs = baseline_probabilities(model, val).map_err(to_model_error)?;
    recession_f1(&probs, val, threshold)
}

/// One prediction per window, ordered by end month. SVM labels follow the
/// margin sign, which coincides with a 0.5 threshold on the reported
/// probability.
pub fn predict_baseline(
    model: &BaselineModel,
    windows: &[LabeledWindow],
    threshold: f64,
) -> Result<Vec<Prediction>, BaselineError> {
    let ordered: Vec<LabeledWindow> = sorted_windows(windows).into_iter().cloned().collect();
    let probs = baseline_probabilities(model, &ordered)?;
    let margin = matches!(model, BaselineModel::Linear { link: Link::Margin, .. });
    Ok(ordered
        .iter()
        .zip(probs)
        .map(|(w, p)| {
            let mut pred = Prediction::new(w.end_month, p, threshold);
            if margin {
                pred.label = u8::from(p >= 0.5);
            }
            pred
        })
        .collect())
}

/// Metrics of a fitted baseline on labelled windows.
pub fn evaluate_baseline(
    model: &BaselineModel,
    windows: &[LabeledWindow],
    threshold: f64,
) -> Result<crate::eval::RunMetrics, BaselineError> {
    let preds = predict_baseline(model, windows, threshold)?;
    let labels: Vec<u8> = sorted_windows(windows).iter().map(|w| w.label).collect();
    let calls: Vec<u8> = preds.iter().map(|p| p.label).collect();
    Ok(evaluate(&calls, &labels)?)
}
