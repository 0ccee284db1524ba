//! Config-driven experiment runners and report emission.
//!
//! Each runner is a pure function of the data directory, the config and
//! its seeds. Runs are fanned out over a rayon pool and merged back in
//! job order, so reports do not depend on the thread count. Wall-clock
//! timings go to a separate file for the same reason.

mod report;

use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{param_count, read_checkpoint, Tensor};
use crate::baselines::{evaluate_baseline, predict_baseline, train_baseline, BaselineError, BaselineKind};
use crate::eval::{aggregate_runs, evaluate, welch_t_test, ClassMetrics, EvalError, MeanStd, RunMetrics};
use crate::features::{
    build_feature_panel, build_windows, fit_standardizer, perturb_series, FeatureError, FeatureMask,
    FeaturePanel, LabeledWindow, Split, Splits, Standardizer, WindowSpec,
};
use crate::ingest::{load_canonical_panel, IngestError, MonthlyPanel};
use crate::layers::CellActivation;
use crate::model::{
    predict, probabilities, train, Architecture, Components, HeadKind, LossBreakdown, LossWeights, ModelError,
    ParameterSet, TrainConfig,
};
use crate::YearMonth;

pub use report::{emit_report, read_report_json, TIMING_FILE};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown series {0}")]
    UnknownSeries(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("thread pool: {0}")]
    Pool(String),
}

impl ExperimentError {
    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            ExperimentError::InvalidConfig(_) => "invalid_config",
            ExperimentError::UnknownSeries(_) => "unknown_series",
            ExperimentError::Ingest(_) => "ingest",
            ExperimentError::Feature(_) => "features",
            ExperimentError::Model(ModelError::DivergenceDetected { .. }) => "divergence",
            ExperimentError::Model(_) => "model",
            ExperimentError::Baseline(_) => "baseline",
            ExperimentError::Eval(_) => "eval",
            ExperimentError::Io(_) => "io",
            ExperimentError::Json(_) => "json",
            ExperimentError::Pool(_) => "thread_pool",
        }
    }
}

type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Main,
    AblateFeatures,
    AblateComponents,
    SweepW,
    Early,
    Sensitivity,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::Main,
        ExperimentKind::AblateFeatures,
        ExperimentKind::AblateComponents,
        ExperimentKind::SweepW,
        ExperimentKind::Early,
        ExperimentKind::Sensitivity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Main => "main",
            ExperimentKind::AblateFeatures => "ablate-features",
            ExperimentKind::AblateComponents => "ablate-components",
            ExperimentKind::SweepW => "sweep-w",
            ExperimentKind::Early => "early",
            ExperimentKind::Sensitivity => "sensitivity",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ExperimentError::InvalidConfig(format!("unknown experiment {s:?}")))
    }
}

/// The main model or one of the baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelName {
    BilstmAa,
    Svm,
    Logistic,
    Probit,
    Lstm,
    Bilstm,
    Autoencoder,
    Dnn,
}

impl ModelName {
    pub const ALL: [ModelName; 8] = [
        ModelName::BilstmAa,
        ModelName::Svm,
        ModelName::Logistic,
        ModelName::Probit,
        ModelName::Lstm,
        ModelName::Bilstm,
        ModelName::Autoencoder,
        ModelName::Dnn,
    ];

    pub fn baseline(self) -> Option<BaselineKind> {
        match self {
            ModelName::BilstmAa => None,
            ModelName::Svm => Some(BaselineKind::Svm),
            ModelName::Logistic => Some(BaselineKind::Logistic),
            ModelName::Probit => Some(BaselineKind::Probit),
            ModelName::Lstm => Some(BaselineKind::Lstm),
            ModelName::Bilstm => Some(BaselineKind::Bilstm),
            ModelName::Autoencoder => Some(BaselineKind::Autoencoder),
            ModelName::Dnn => Some(BaselineKind::Dnn),
        }
    }

    pub fn name(self) -> &'static str {
        self.baseline().map_or("bilstm_aa", BaselineKind::name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityConfig {
    pub series: Vec<String>,
    pub factors: Vec<f64>,
    /// Seed of the model that gets probed.
    pub seed: u64,
    /// Load parameters from here instead of training.
    pub checkpoint: Option<PathBuf>,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            series: vec!["BAA".into(), "INDPRO".into()],
            factors: vec![0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3],
            seed: 0,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Directory with one CSV per series.
    pub data_dir: PathBuf,
    pub splits: Splits,
    pub window: usize,
    pub offset: usize,
    pub features: FeatureMask,
    pub components: Components,
    pub loss: LossWeights,
    /// Pick (alpha, beta) per seed by validation recession F1.
    pub tune_loss_weights: bool,
    pub alpha_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
    pub epochs: usize,
    pub lr: f64,
    pub threshold: f64,
    pub seeds: Vec<u64>,
    pub models: Vec<ModelName>,
    pub standardize: bool,
    pub head: HeadKind,
    pub bottleneck: usize,
    pub lstm_activation: CellActivation,
    pub timesteps: Vec<usize>,
    pub early_offsets: Vec<usize>,
    /// Offset at which every model is compared.
    pub early_table_offset: usize,
    pub sensitivity: SensitivityConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data/synthetic"),
            splits: Splits::default(),
            window: 6,
            offset: 0,
            features: FeatureMask::ALL,
            components: Components::default(),
            loss: LossWeights::default(),
            tune_loss_weights: false,
            alpha_grid: vec![0.1, 1.0, 10.0],
            beta_grid: vec![1e-5, 1e-4, 1e-3],
            epochs: 300,
            lr: 0.001,
            threshold: 0.5,
            seeds: (0..10).collect(),
            models: ModelName::ALL.to_vec(),
            standardize: true,
            head: HeadKind::Tanh,
            bottleneck: 4,
            lstm_activation: CellActivation::Tanh,
            timesteps: (2..=12).collect(),
            early_offsets: (1..=6).collect(),
            early_table_offset: 3,
            sensitivity: SensitivityConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ExperimentError::InvalidConfig(msg));
        if self.splits.train_end >= self.splits.val_end {
            return bad(format!(
                "train_end {} must precede val_end {}",
                self.splits.train_end, self.splits.val_end
            ));
        }
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty".into());
        }
        if self.models.is_empty() {
            return bad("models must be non-empty".into());
        }
        if self.features.is_empty() {
            return bad("feature mask must select at least one group".into());
        }
        if self.window == 0 || self.timesteps.contains(&0) {
            return bad("window widths must be positive".into());
        }
        if self.timesteps.is_empty() || self.early_offsets.is_empty() {
            return bad("timesteps and early_offsets must be non-empty".into());
        }
        if self.epochs == 0 || !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("epochs {} / lr {}", self.epochs, self.lr));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        if self.tune_loss_weights && (self.alpha_grid.is_empty() || self.beta_grid.is_empty()) {
            return bad("loss-weight grids must be non-empty when tuning".into());
        }
        for w in self.alpha_grid.iter().chain(&self.beta_grid) {
            if !(*w >= 0.0 && w.is_finite()) {
                return bad(format!("loss weight {w} must be finite and non-negative"));
            }
        }
        if let Some(f) = self.sensitivity.factors.iter().find(|f| !(0.5..=1.5).contains(*f)) {
            return bad(format!("sensitivity factor {f} outside [0.5, 1.5]"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the serialized config.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    fn architecture(&self, input_dim: usize, components: Components) -> Architecture {
        Architecture {
            bottleneck: self.bottleneck,
            components,
            head: self.head,
            activation: self.lstm_activation,
            ..Architecture::new(input_dim)
        }
    }

    fn train_config(&self, seed: u64, weights: LossWeights) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            seed,
            weights,
            threshold: self.threshold,
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 over months, splits, labels and standardized values.
pub fn window_hash(windows: &[LabeledWindow]) -> String {
    let mut h = Sha256::new();
    for w in windows {
        h.update(w.end_month.to_string().as_bytes());
        h.update([w.label, w.split as u8]);
        h.update((w.width as u64).to_le_bytes());
        for v in &w.block {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

/// Windows of one feature mask, width and offset, split three ways.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: FeaturePanel,
    pub standardizer: Standardizer,
    pub spec: WindowSpec,
    pub train: Vec<LabeledWindow>,
    pub validate: Vec<LabeledWindow>,
    pub test: Vec<LabeledWindow>,
    pub window_hash: String,
}

impl Dataset {
    pub fn n_features(&self) -> usize {
        self.features.n_features()
    }

    pub fn test_months(&self) -> Vec<YearMonth> {
        self.test.iter().map(|w| w.end_month).collect()
    }

    pub fn test_labels(&self) -> Vec<u8> {
        self.test.iter().map(|w| w.label).collect()
    }
}

pub fn load_panel(cfg: &ExperimentConfig) -> Result<MonthlyPanel> {
    Ok(load_canonical_panel(&cfg.data_dir)?)
}

fn cut(
    features: FeaturePanel,
    standardizer: Standardizer,
    spec: WindowSpec,
) -> Result<Dataset> {
    let windows = build_windows(&features, &standardizer, spec)?;
    let pick = |s: Split| windows.iter().filter(|w| w.split == s).cloned().collect::<Vec<_>>();
    Ok(Dataset {
        train: pick(Split::Train),
        validate: pick(Split::Validate),
        test: pick(Split::Test),
        window_hash: window_hash(&windows),
        features,
        standardizer,
        spec,
    })
}

/// Features under `mask`, standardized on the training months (or left raw
/// when the config says so), cut into windows.
pub fn prepare(
    panel: &MonthlyPanel,
    cfg: &ExperimentConfig,
    mask: FeatureMask,
    width: usize,
    offset: usize,
) -> Result<Dataset> {
    let features = build_feature_panel(panel)?.select(mask)?;
    let standardizer = if cfg.standardize {
        fit_standardizer(&features, cfg.splits.train_end)?
    } else {
        Standardizer::identity(features.n_features())
    };
    let spec = WindowSpec {
        width,
        offset,
        splits: cfg.splits,
    };
    cut(features, standardizer, spec)
}

/// Windows of a perturbed panel under an existing standardizer.
pub fn prepare_with(
    panel: &MonthlyPanel,
    mask: FeatureMask,
    standardizer: &Standardizer,
    spec: WindowSpec,
) -> Result<Dataset> {
    let features = build_feature_panel(panel)?.select(mask)?;
    cut(features, standardizer.clone(), spec)
}

/// One (model, seed) result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub test: RunMetrics,
    pub validation: Option<RunMetrics>,
    pub best_epoch: Option<usize>,
    pub loss_weights: Option<LossWeights>,
    /// Loss components at the start of the last epoch.
    pub final_loss: Option<LossBreakdown>,
    /// Test-split probabilities in month order.
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowReport {
    pub label: String,
    pub model: ModelName,
    pub window: usize,
    pub offset: usize,
    pub features: FeatureMask,
    pub components: Components,
    pub n_features: usize,
    pub n_train: usize,
    pub n_validate: usize,
    pub n_test: usize,
    pub parameter_count: Option<usize>,
    pub window_hash: String,
    pub test_months: Vec<YearMonth>,
    pub test_labels: Vec<u8>,
    pub aggregate: ClassMetrics,
    pub runs: Vec<RunRecord>,
}

impl RowReport {
    pub fn values(&self, f: impl Fn(&RunMetrics) -> f64) -> Vec<f64> {
        self.runs.iter().map(|r| f(&r.test)).collect()
    }

    /// Per-month mean of the run probabilities.
    pub fn mean_probabilities(&self) -> Vec<f64> {
        let n = self.runs.len().max(1) as f64;
        (0..self.n_test)
            .map(|i| self.runs.iter().map(|r| r.probabilities[i]).sum::<f64>() / n)
            .collect()
    }
}

/// Welch p-values of one row against the reference row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub reference: String,
    pub row: String,
    pub accuracy_p: Option<f64>,
    pub recession_f1_p: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepChoice {
    pub by_validation_accuracy: usize,
    pub by_test_accuracy: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub offset: usize,
    pub n_test: usize,
    pub accuracy: MeanStd,
    pub recession_f1: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityPoint {
    pub series: String,
    pub factor: f64,
    pub recession_start: YearMonth,
    pub onset: Option<YearMonth>,
    /// Months the onset precedes the recession start; negative if late.
    pub lead_months: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub recessions: Vec<(YearMonth, YearMonth)>,
    pub unperturbed_onsets: Vec<Option<YearMonth>>,
    pub grid: Vec<SensitivityPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: ExperimentKind,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub rows: Vec<RowReport>,
    pub significance: Vec<Significance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_timestep: Option<TimestepChoice>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_curve: Option<Vec<CurvePoint>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<SensitivityReport>,
}

impl ExperimentReport {
    pub fn row(&self, label: &str) -> Option<&RowReport> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Trained main-model parameters kept for checkpointing.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub row: String,
    pub seed: u64,
    pub architecture: Architecture,
    pub params: ParameterSet<Tensor>,
    pub best_epoch: usize,
    pub test: RunMetrics,
    pub loss_weights: LossWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub experiment: ExperimentKind,
    pub jobs: usize,
    pub total_seconds: f64,
    pub rows: Vec<(String, f64)>,
}

/// Everything a runner produces.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub models: Vec<TrainedModel>,
    pub timing: Timing,
}

struct RowSpec<'a> {
    label: String,
    model: ModelName,
    data: &'a Dataset,
    mask: FeatureMask,
    components: Components,
}

struct JobResult {
    record: RunRecord,
    trained: Option<(Architecture, ParameterSet<Tensor>, LossWeights, usize)>,
    seconds: f64,
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| ExperimentError::Pool(e.to_string()))
}

fn metrics_of(probs: &[f64], windows: &[LabeledWindow], threshold: f64) -> Result<Option<RunMetrics>> {
    if windows.is_empty() {
        return Ok(None);
    }
    let preds: Vec<u8> = probs.iter().map(|&p| u8::from(p >= threshold)).collect();
    let labels: Vec<u8> = windows.iter().map(|w| w.label).collect();
    Ok(Some(evaluate(&preds, &labels)?))
}

fn run_main_model(
    cfg: &ExperimentConfig,
    data: &Dataset,
    components: Components,
    seed: u64,
) -> Result<JobResult> {
    let arch = cfg.architecture(data.n_features(), components);
    let grid: Vec<LossWeights> = if cfg.tune_loss_weights {
        cfg.alpha_grid
            .iter()
            .flat_map(|&alpha| cfg.beta_grid.iter().map(move |&beta| LossWeights { alpha, beta }))
            .collect()
    } else {
        vec![cfg.loss]
    };
    let mut best = None;
    for weights in grid {
        let outcome = train(&arch, &cfg.train_config(seed, weights), &data.train, &data.validate)?;
        // Earlier grid points win ties.
        if best.as_ref().is_none_or(|(_, o): &(LossWeights, crate::model::TrainOutcome<_>)| {
            outcome.best_val_f1 > o.best_val_f1
        }) {
            best = Some((weights, outcome));
        }
    }
    let (weights, outcome) = best.expect("non-empty grid");
    let test_probs = probabilities(&arch, &outcome.params, &data.test)?;
    let val_probs = probabilities(&arch, &outcome.params, &data.validate)?;
    let test = metrics_of(&test_probs, &data.test, cfg.threshold)?.ok_or(EvalError::EmptyEvaluation)?;
    Ok(JobResult {
        record: RunRecord {
            seed,
            test,
            validation: metrics_of(&val_probs, &data.validate, cfg.threshold)?,
            best_epoch: Some(outcome.best_epoch),
            loss_weights: Some(weights),
            final_loss: outcome.history.last().map(|h| h.loss),
            probabilities: test_probs,
        },
        trained: Some((arch, outcome.params, weights, outcome.best_epoch)),
        seconds: 0.0,
    })
}

fn run_baseline(cfg: &ExperimentConfig, data: &Dataset, kind: BaselineKind, seed: u64) -> Result<JobResult> {
    let tc = cfg.train_config(seed, cfg.loss);
    let fit = train_baseline(kind, &data.train, &data.validate, &tc)?;
    let test_probs: Vec<f64> = predict_baseline(&fit.model, &data.test, cfg.threshold)?
        .iter()
        .map(|p| p.probability)
        .collect();
    let test = evaluate_baseline(&fit.model, &data.test, cfg.threshold)?;
    let validation = if data.validate.is_empty() {
        None
    } else {
        Some(evaluate_baseline(&fit.model, &data.validate, cfg.threshold)?)
    };
    Ok(JobResult {
        record: RunRecord {
            seed,
            test,
            validation,
            best_epoch: None,
            loss_weights: None,
            final_loss: None,
            probabilities: test_probs,
        },
        trained: None,
        seconds: 0.0,
    })
}

fn run_rows(cfg: &ExperimentConfig, rows: &[RowSpec], jobs: usize) -> Result<(Vec<RowReport>, Vec<TrainedModel>, Vec<(String, f64)>)> {
    let tasks: Vec<(usize, u64)> = (0..rows.len())
        .flat_map(|r| cfg.seeds.iter().map(move |&s| (r, s)))
        .collect();
    let results: Vec<JobResult> = pool(jobs)?.install(|| {
        tasks
            .par_iter()
            .map(|&(r, seed)| {
                let row = &rows[r];
                let start = Instant::now();
                log::info!("{} seed {seed}: training", row.label);
                let mut out = match row.model.baseline() {
                    None => run_main_model(cfg, row.data, row.components, seed),
                    Some(kind) => run_baseline(cfg, row.data, kind, seed),
                }?;
                out.seconds = start.elapsed().as_secs_f64();
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut reports = Vec::with_capacity(rows.len());
    let mut trained = Vec::new();
    let mut timing = Vec::with_capacity(rows.len());
    let mut results = results.into_iter();
    for row in rows {
        let mut runs = Vec::with_capacity(cfg.seeds.len());
        let mut seconds = 0.0;
        let mut parameter_count = None;
        for _ in &cfg.seeds {
            let r = results.next().expect("one result per task");
            seconds += r.seconds;
            if let Some((architecture, params, loss_weights, best_epoch)) = r.trained {
                parameter_count = Some(param_count(&params));
                trained.push(TrainedModel {
                    row: row.label.clone(),
                    seed: r.record.seed,
                    architecture,
                    params,
                    best_epoch,
                    test: r.record.test,
                    loss_weights,
                });
            }
            runs.push(r.record);
        }
        let metrics: Vec<RunMetrics> = runs.iter().map(|r| r.test).collect();
        reports.push(RowReport {
            label: row.label.clone(),
            model: row.model,
            window: row.data.spec.width,
            offset: row.data.spec.offset,
            features: row.mask,
            components: row.components,
            n_features: row.data.n_features(),
            n_train: row.data.train.len(),
            n_validate: row.data.validate.len(),
            n_test: row.data.test.len(),
            parameter_count,
            window_hash: row.data.window_hash.clone(),
            test_months: row.data.test_months(),
            test_labels: row.data.test_labels(),
            aggregate: aggregate_runs(&metrics),
            runs,
        });
        timing.push((row.label.clone(), seconds));
    }
    Ok((reports, trained, timing))
}

fn significance(reference: &RowReport, others: &[&RowReport]) -> Vec<Significance> {
    let acc = |r: &RowReport| r.values(|m| m.accuracy);
    let f1 = |r: &RowReport| r.values(|m| m.recession.f1);
    others
        .iter()
        .filter(|r| r.label != reference.label)
        .map(|r| Significance {
            reference: reference.label.clone(),
            row: r.label.clone(),
            accuracy_p: welch_t_test(&acc(reference), &acc(r)).ok(),
            recession_f1_p: welch_t_test(&f1(reference), &f1(r)).ok(),
        })
        .collect()
}

struct Assembled {
    rows: Vec<RowReport>,
    models: Vec<TrainedModel>,
    row_seconds: Vec<(String, f64)>,
}

fn finish(
    kind: ExperimentKind,
    cfg: &ExperimentConfig,
    a: Assembled,
    significance: Vec<Significance>,
    jobs: usize,
    started: Instant,
) -> ExperimentOutput {
    ExperimentOutput {
        report: ExperimentReport {
            experiment: kind,
            config_hash: cfg.hash(),
            config: cfg.clone(),
            rows: a.rows,
            significance,
            best_timestep: None,
            early_curve: None,
            sensitivity: None,
        },
        models: a.models,
        timing: Timing {
            experiment: kind,
            jobs,
            total_seconds: started.elapsed().as_secs_f64(),
            rows: a.row_seconds,
        },
    }
}

fn assemble(cfg: &ExperimentConfig, rows: &[RowSpec], jobs: usize) -> Result<Assembled> {
    let (rows, models, row_seconds) = run_rows(cfg, rows, jobs)?;
    Ok(Assembled {
        rows,
        models,
        row_seconds,
    })
}

/// Every configured model on the configured windows.
pub fn run_main(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let started = Instant::now();
    let panel = load_panel(cfg)?;
    let data = prepare(&panel, cfg, cfg.features, cfg.window, cfg.offset)?;
    let rows: Vec<RowSpec> = cfg
        .models
        .iter()
        .map(|&model| RowSpec {
            label: model.name().to_string(),
            model,
            data: &data,
            mask: cfg.features,
            components: cfg.components,
        })
        .collect();
    let a = assemble(cfg, &rows, jobs)?;
    let sig = reference_significance(&a.rows, ModelName::BilstmAa.name());
    Ok(finish(ExperimentKind::Main, cfg, a, sig, jobs, started))
}

fn reference_significance(rows: &[RowReport], reference: &str) -> Vec<Significance> {
    match rows.iter().find(|r| r.label == reference) {
        Some(reference) => significance(reference, &rows.iter().collect::<Vec<_>>()),
        None => Vec::new(),
    }
}

/// Feature masks compared by the feature ablation, all-features last.
pub const ABLATION_MASKS: [FeatureMask; 5] = [
    FeatureMask {
        raw: true,
        d1: false,
        d2: false,
    },
    FeatureMask {
        raw: false,
        d1: true,
        d2: false,
    },
    FeatureMask {
        raw: false,
        d1: false,
        d2: true,
    },
    FeatureMask {
        raw: false,
        d1: true,
        d2: true,
    },
    FeatureMask::ALL,
];

/// The main model under each feature mask.
pub fn run_feature_ablation(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutput> {
    run_masks(cfg, &ABLATION_MASKS, jobs)
}

/// The main model under the given masks; rows are labelled by mask.
pub fn run_masks(cfg: &ExperimentConfig, masks: &[FeatureMask], jobs: usize) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let started = Instant::now();
    let panel = load_panel(cfg)?;
    let datasets = masks
        .iter()
        .map(|&m| prepare(&panel, cfg, m, cfg.window, cfg.offset))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<RowSpec> = masks
        .iter()
        .zip(&datasets)
        .map(|(&mask, data)| RowSpec {
            label: mask.label(),
            model: ModelName::BilstmAa,
            data,
            mask,
            components: cfg.components,
        })
        .collect();
    let a = assemble(cfg, &rows, jobs)?;
    let sig = reference_significance(&a.rows, &FeatureMask::ALL.label());
    Ok(finish(ExperimentKind::AblateFeatures, cfg, a, sig, jobs, started))
}

/// Component switches of the component ablation, full model last.
pub fn ablation_components() -> [(&'static str, Components); 4] {
    let full = Components::default();
    [
        (
            "no_attention",
            Components {
                attention: false,
                ..full
            },
        ),
        (
            "unidirectional",
            Components {
                backward: false,
                ..full
            },
        ),
        (
            "no_autoencoder",
            Components {
                autoencoder: false,
                ..full
            },
        ),
        ("full", full),
    ]
}

/// The main model with single components switched off.
pub fn run_component_ablation(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutput> {
    let variants = ablation_components();
    run_components(cfg, &variants, jobs)
}

/// The main model under the given labelled component switches.
pub fn run_components(
    cfg: &ExperimentConfig,
    variants: &[(&str, Components)],
    jobs: usize,
) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let started = Instant::now();
    let panel = load_panel(cfg)?;
    let data = prepare(&panel, cfg, cfg.features, cfg.window, cfg.offset)?;
    let rows: Vec<RowSpec> = variants
        .iter()
        .map(|&(label, components)| RowSpec {
            label: label.to_string(),
            model: ModelName::BilstmAa,
            data: &data,
            mask: cfg.features,
            components,
        })
        .collect();
    let a = assemble(cfg, &rows, jobs)?;
    let sig = reference_significance(&a.rows, "full");
    Ok(finish(ExperimentKind::AblateComponents, cfg, a, sig, jobs, started))
}

/// First maximum of `score` over `rows`, by row order.
fn argmax_by(rows: &[RowReport], score: impl Fn(&RowReport) -> f64) -> usize {
    let mut best = 0;
    for i in 1..rows.len() {
        if score(&rows[i]) > score(&rows[best]) {
            best = i;
        }
    }
    rows[best].window
}

/// The main model at each configured window width.
pub fn run_timestep_sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let started = Instant::now();
    let panel = load_panel(cfg)?;
    let datasets = cfg
        .timesteps
        .iter()
        .map(|&w| prepare(&panel, cfg, cfg.features, w, cfg.offset))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<RowSpec> = cfg
        .timesteps
        .iter()
        .zip(&datasets)
        .map(|(&w, data)| RowSpec {
            label: format!("w={w}"),
            model: ModelName::BilstmAa,
            data,
            mask: cfg.features,
            components: cfg.components,
        })
        .collect();
    let a = assemble(cfg, &rows, jobs)?;
    let val_acc = |r: &RowReport| {
        let v: Vec<f64> = r.runs.iter().map(|x| x.validation.map_or(0.0, |m| m.accuracy)).collect();
        MeanStd::of(&v).mean
    };
    let choice = TimestepChoice {
        by_validation_accuracy: argmax_by(&a.rows, val_acc),
        by_test_accuracy: argmax_by(&a.rows, |r| r.aggregate.accuracy.mean),
    };
    let reference = format!("w={}", choice.by_validation_accuracy);
    let sig = reference_significance(&a.rows, &reference);
    let mut out = finish(ExperimentKind::SweepW, cfg, a, sig, jobs, started);
    out.report.best_timestep = Some(choice);
    Ok(out)
}

/// Row label of the main model at label offset `k`.
pub fn early_label(k: usize) -> String {
    format!("k={k}")
}

/// The main model at each label offset, plus every model at the table offset.
pub fn run_early_prediction(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let started = Instant::now();
    let panel = load_panel(cfg)?;
    let mut offsets = cfg.early_offsets.clone();
    let table_k = cfg.early_table_offset;
    let table_models: Vec<ModelName> = cfg.models.iter().copied().filter(|m| m.baseline().is_some()).collect();
    if !table_models.is_empty() && !offsets.contains(&table_k) {
        offsets.push(table_k);
    }
    let datasets = offsets
        .iter()
        .map(|&k| prepare(&panel, cfg, cfg.features, cfg.window, k))
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<RowSpec> = offsets
        .iter()
        .zip(&datasets)
        .map(|(&k, data)| RowSpec {
            label: early_label(k),
            model: ModelName::BilstmAa,
            data,
            mask: cfg.features,
            components: cfg.components,
        })
        .collect();
    if let Some(pos) = offsets.iter().position(|&k| k == table_k) {
        for &model in &table_models {
            rows.push(RowSpec {
                label: format!("{} {}", early_label(table_k), model.name()),
                model,
                data: &datasets[pos],
                mask: cfg.features,
                components: cfg.components,
            });
        }
    }
    let a = assemble(cfg, &rows, jobs)?;
    let curve = a
        .rows
        .iter()
        .filter(|r| r.model == ModelName::BilstmAa && cfg.early_offsets.contains(&r.offset))
        .map(|r| CurvePoint {
            offset: r.offset,
            n_test: r.n_test,
            accuracy: r.aggregate.accuracy,
            recession_f1: r.aggregate.recession.f1,
        })
        .collect();
    let sig = match a.row_by(&early_label(table_k)) {
        Some(reference) => {
            let table: Vec<&RowReport> = a.rows.iter().filter(|r| r.offset == table_k).collect();
            significance(reference, &table)
        }
        None => Vec::new(),
    };
    let mut out = finish(ExperimentKind::Early, cfg, a, sig, jobs, started);
    out.report.early_curve = Some(curve);
    Ok(out)
}

impl Assembled {
    fn row_by(&self, label: &str) -> Option<&RowReport> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Contiguous runs of recession labels among `windows`, as
/// (first month, month after the last).
pub fn label_spans(windows: &[LabeledWindow]) -> Vec<(YearMonth, YearMonth)> {
    let mut spans = Vec::new();
    let mut open: Option<(YearMonth, YearMonth)> = None;
    for w in windows {
        match (&mut open, w.label) {
            (Some((_, end)), 1) if *end == w.end_month => *end = w.end_month.add_months(1),
            (_, 1) => {
                if let Some(s) = open.take() {
                    spans.push(s);
                }
                open = Some((w.end_month, w.end_month.add_months(1)));
            }
            (Some(_), _) => spans.push(open.take().expect("open span")),
            (None, _) => {}
        }
    }
    spans.extend(open);
    spans
}

/// First month of two consecutive positive predictions in
/// `[from, until)`; the second month may fall on `until`.
pub fn detect_onset(
    months: &[YearMonth],
    predicted: &[u8],
    from: YearMonth,
    until: YearMonth,
) -> Option<YearMonth> {
    months
        .windows(2)
        .zip(predicted.windows(2))
        .find(|(m, p)| {
            m[0] >= from && m[0] < until && m[1] == m[0].add_months(1) && p[0] == 1 && p[1] == 1
        })
        .map(|(m, _)| m[0])
}

/// Onsets for each span, searching from the end of the previous span.
pub fn onsets(
    months: &[YearMonth],
    predicted: &[u8],
    spans: &[(YearMonth, YearMonth)],
) -> Vec<Option<YearMonth>> {
    let Some(&first) = months.first() else {
        return vec![None; spans.len()];
    };
    let mut from = first;
    spans
        .iter()
        .map(|&(_, end)| {
            let onset = detect_onset(months, predicted, from, end);
            from = end;
            onset
        })
        .collect()
}

/// Probes one trained model with scaled copies of selected series.
pub fn run_sensitivity(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let started = Instant::now();
    let panel = load_panel(cfg)?;
    for name in &cfg.sensitivity.series {
        if panel.column(name).is_none() {
            return Err(ExperimentError::UnknownSeries(name.clone()));
        }
    }
    let data = prepare(&panel, cfg, cfg.features, cfg.window, cfg.offset)?;
    let seed = cfg.sensitivity.seed;
    let arch = cfg.architecture(data.n_features(), cfg.components);

    let (row, model, params) = match &cfg.sensitivity.checkpoint {
        Some(path) => {
            let mut params = arch.zeros()?;
            read_checkpoint(&mut params, path)?;
            let probs = probabilities(&arch, &params, &data.test)?;
            let val_probs = probabilities(&arch, &params, &data.validate)?;
            let test = metrics_of(&probs, &data.test, cfg.threshold)?.ok_or(EvalError::EmptyEvaluation)?;
            let record = RunRecord {
                seed,
                test,
                validation: metrics_of(&val_probs, &data.validate, cfg.threshold)?,
                best_epoch: None,
                loss_weights: None,
                final_loss: None,
                probabilities: probs,
            };
            let row = RowReport {
                label: "checkpoint".into(),
                model: ModelName::BilstmAa,
                window: data.spec.width,
                offset: data.spec.offset,
                features: cfg.features,
                components: cfg.components,
                n_features: data.n_features(),
                n_train: data.train.len(),
                n_validate: data.validate.len(),
                n_test: data.test.len(),
                parameter_count: Some(param_count(&params)),
                window_hash: data.window_hash.clone(),
                test_months: data.test_months(),
                test_labels: data.test_labels(),
                aggregate: aggregate_runs(&[test]),
                runs: vec![record],
            };
            (row, None, params)
        }
        None => {
            let single = ExperimentConfig {
                seeds: vec![seed],
                ..cfg.clone()
            };
            let spec = [RowSpec {
                label: "trained".into(),
                model: ModelName::BilstmAa,
                data: &data,
                mask: cfg.features,
                components: cfg.components,
            }];
            let (mut rows, mut models, _) = run_rows(&single, &spec, 1)?;
            let model = models.pop().expect("main model run");
            let params = model.params.clone();
            (rows.remove(0), Some(model), params)
        }
    };

    let spans = label_spans(&data.test);
    let predicted_labels = |windows: &[LabeledWindow]| -> Result<(Vec<YearMonth>, Vec<u8>)> {
        let preds = predict(&arch, &params, windows, cfg.threshold)?;
        Ok((preds.iter().map(|p| p.month).collect(), preds.iter().map(|p| p.label).collect()))
    };
    let (months, labels) = predicted_labels(&data.test)?;
    let unperturbed = onsets(&months, &labels, &spans);

    let cells: Vec<(String, f64)> = cfg
        .sensitivity
        .series
        .iter()
        .flat_map(|s| cfg.sensitivity.factors.iter().map(move |&f| (s.clone(), f)))
        .collect();
    let per_cell: Vec<Vec<SensitivityPoint>> = pool(jobs)?.install(|| {
        cells
            .par_iter()
            .map(|(series, factor)| {
                let scaled = perturb_series(&panel, series, *factor)?;
                let probe = prepare_with(&scaled, cfg.features, &data.standardizer, data.spec)?;
                let (months, labels) = predicted_labels(&probe.test)?;
                Ok(onsets(&months, &labels, &spans)
                    .into_iter()
                    .zip(&spans)
                    .map(|(onset, &(start, _))| SensitivityPoint {
                        series: series.clone(),
                        factor: *factor,
                        recession_start: start,
                        onset,
                        lead_months: onset.map(|o| o.months_until(start)),
                    })
                    .collect())
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let row_seconds = vec![(row.label.clone(), started.elapsed().as_secs_f64())];
    let a = Assembled {
        rows: vec![row],
        models: model.into_iter().collect(),
        row_seconds,
    };
    let mut out = finish(ExperimentKind::Sensitivity, cfg, a, Vec::new(), jobs, started);
    out.report.sensitivity = Some(SensitivityReport {
        seed,
        checkpoint: cfg.sensitivity.checkpoint.clone(),
        recessions: spans,
        unperturbed_onsets: unperturbed,
        grid: per_cell.into_iter().flatten().collect(),
    });
    Ok(out)
}

pub fn run_experiment(kind: ExperimentKind, cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutput> {
    match kind {
        ExperimentKind::Main => run_main(cfg, jobs),
        ExperimentKind::AblateFeatures => run_feature_ablation(cfg, jobs),
        ExperimentKind::AblateComponents => run_component_ablation(cfg, jobs),
        ExperimentKind::SweepW => run_timestep_sweep(cfg, jobs),
        ExperimentKind::Early => run_early_prediction(cfg, jobs),
        ExperimentKind::Sensitivity => run_sensitivity(cfg, jobs),
    }
}
