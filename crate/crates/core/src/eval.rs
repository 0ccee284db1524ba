//! Confusion counts, accuracy/recall/precision/F1 per class, multi-run
//! aggregation and a Welch t-test for comparing per-seed results.
//!
//! Undefined ratios (0/0) are reported as 0. Aggregated spreads are
//! population standard deviations.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {predictions} predictions, {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("no windows to evaluate")]
    EmptyEvaluation,
    #[error("need at least 2 runs per sample, found {0}")]
    InsufficientRuns(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Counts with `positive` as the positive class.
pub fn confusion(predictions: &[u8], labels: &[u8], positive: u8) -> Result<Confusion, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    let mut c = Confusion::default();
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p == positive, y == positive) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(c: &Confusion) -> Result<Metrics, EvalError> {
    let total = c.total();
    if total == 0 {
        return Err(EvalError::EmptyEvaluation);
    }
    let recall = ratio(c.tp, c.tp + c.fn_);
    let precision = ratio(c.tp, c.tp + c.fp);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Metrics {
        accuracy: ratio(c.tp + c.tn, total),
        recall,
        precision,
        f1,
    })
}

/// Per-class scores of one run. Recession is label 1.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassScores {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub accuracy: f64,
    pub recession: ClassScores,
    pub expansion: ClassScores,
}

impl RunMetrics {
    /// Values in the column order of [`METRIC_COLUMNS`].
    pub fn as_row(&self) -> [f64; 7] {
        [
            self.accuracy,
            self.recession.recall,
            self.recession.precision,
            self.recession.f1,
            self.expansion.recall,
            self.expansion.precision,
            self.expansion.f1,
        ]
    }
}

pub const METRIC_COLUMNS: [&str; 7] = [
    "accuracy",
    "recession_recall",
    "recession_precision",
    "recession_f1",
    "expansion_recall",
    "expansion_precision",
    "expansion_f1",
];

pub fn evaluate(predictions: &[u8], labels: &[u8]) -> Result<RunMetrics, EvalError> {
    let rec = metrics(&confusion(predictions, labels, 1)?)?;
    let exp = metrics(&confusion(predictions, labels, 0)?)?;
    let scores = |m: Metrics| ClassScores {
        recall: m.recall,
        precision: m.precision,
        f1: m.f1,
    };
    Ok(RunMetrics {
        accuracy: rec.accuracy,
        recession: scores(rec),
        expansion: scores(exp),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        // Exact for constant samples, avoiding rounding in the mean.
        if values.iter().all(|&v| v == values[0]) {
            return Self {
                mean: values[0],
                std: 0.0,
            };
        }
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }

    /// `"94.8±1.4"` in percent.
    pub fn percent(&self) -> String {
        format!("{:.1}±{:.1}", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassAggregate {
    pub recall: MeanStd,
    pub precision: MeanStd,
    pub f1: MeanStd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub runs: usize,
    pub accuracy: MeanStd,
    pub recession: ClassAggregate,
    pub expansion: ClassAggregate,
}

impl ClassMetrics {
    pub fn as_row(&self) -> [MeanStd; 7] {
        [
            self.accuracy,
            self.recession.recall,
            self.recession.precision,
            self.recession.f1,
            self.expansion.recall,
            self.expansion.precision,
            self.expansion.f1,
        ]
    }
}

pub fn aggregate_runs(runs: &[RunMetrics]) -> ClassMetrics {
    let col = |f: &dyn Fn(&RunMetrics) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
    ClassMetrics {
        runs: runs.len(),
        accuracy: col(&|r| r.accuracy),
        recession: ClassAggregate {
            recall: col(&|r| r.recession.recall),
            precision: col(&|r| r.recession.precision),
            f1: col(&|r| r.recession.f1),
        },
        expansion: ClassAggregate {
            recall: col(&|r| r.expansion.recall),
            precision: col(&|r| r.expansion.precision),
            f1: col(&|r| r.expansion.f1),
        },
    }
}

/// Two-sided Welch t-test p-value with Welch–Satterthwaite degrees of
/// freedom. Samples without spread are allowed; if both are constant the
/// result is 1 for equal means and 0 otherwise.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(EvalError::InsufficientRuns(a.len().min(b.len())));
    }
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        (n, mean, var)
    };
    let (na, ma, va) = stats(a);
    let (nb, mb, vb) = stats(b);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Ok(if ma == mb { 1.0 } else { 0.0 });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    Ok((2.0 * dist.cdf(-t.abs())).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};

    #[test]
    fn all_expansion_on_test_labels() {
        let mut labels = vec![0u8; 175];
        labels.extend(vec![1u8; 23]);
        let preds = vec![0u8; 198];
        let c = confusion(&preds, &labels, 1).unwrap();
        assert_eq!(c, Confusion { tp: 0, fp: 0, fn_: 23, tn: 175 });
        let m = metrics(&c).unwrap();
        assert!((m.accuracy - 175.0 / 198.0).abs() < 1e-15);
        assert_eq!((m.recall, m.precision, m.f1), (0.0, 0.0, 0.0));
        assert!((m.accuracy - 0.8838).abs() < 5e-4);
    }

    #[test]
    fn formula_arithmetic() {
        let m = metrics(&Confusion { tp: 3, fp: 1, fn_: 1, tn: 5 }).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (0.75, 0.75, 0.75, 0.8));
    }

    #[test]
    fn perfect_predictor() {
        let labels = [0u8, 1, 1, 0, 1];
        let c = confusion(&labels, &labels, 1).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
    }

    #[test]
    fn errors() {
        assert_eq!(
            confusion(&[0, 1], &[0], 1),
            Err(EvalError::LengthMismatch { predictions: 2, labels: 1 })
        );
        assert_eq!(metrics(&Confusion::default()), Err(EvalError::EmptyEvaluation));
        assert_eq!(welch_t_test(&[1.0], &[1.0, 2.0]), Err(EvalError::InsufficientRuns(1)));
    }

    #[test]
    fn confusion_matches_counting_loop() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        for _ in 0..200 {
            let p: Vec<u8> = (0..50).map(|_| rng.gen_range(0..2)).collect();
            let y: Vec<u8> = (0..50).map(|_| rng.gen_range(0..2)).collect();
            let c = confusion(&p, &y, 1).unwrap();
            let count = |a: u8, b: u8| p.iter().zip(&y).filter(|&(&pi, &yi)| pi == a && yi == b).count() as u64;
            assert_eq!(c, Confusion { tp: count(1, 1), fp: count(1, 0), fn_: count(0, 1), tn: count(0, 0) });
        }
    }

    #[test]
    fn f1_recomputed_on_random_confusions() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(4);
        for _ in 0..10_000 {
            let c = Confusion {
                tp: rng.gen_range(0..50),
                fp: rng.gen_range(0..50),
                fn_: rng.gen_range(0..50),
                tn: rng.gen_range(1..50),
            };
            let m = metrics(&c).unwrap();
            if m.precision + m.recall > 0.0 {
                let f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
                assert!((m.f1 - f1).abs() < 1e-12);
            }
            if c.tp == 0 {
                assert_eq!(m.f1, 0.0);
            }
        }
    }

    #[test]
    fn accuracy_shared_between_classes() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        let p: Vec<u8> = (0..77).map(|_| rng.gen_range(0..2)).collect();
        let y: Vec<u8> = (0..77).map(|_| rng.gen_range(0..2)).collect();
        let a = metrics(&confusion(&p, &y, 1).unwrap()).unwrap();
        let b = metrics(&confusion(&p, &y, 0).unwrap()).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
    }

    #[test]
    fn aggregation_examples() {
        let run = |acc: f64| RunMetrics { accuracy: acc, ..Default::default() };
        let single = aggregate_runs(&[run(0.7)]);
        assert_eq!(single.accuracy, MeanStd { mean: 0.7, std: 0.0 });
        let constant = aggregate_runs(&[run(0.9), run(0.9), run(0.9)]);
        assert_eq!(constant.accuracy, MeanStd { mean: 0.9, std: 0.0 });
        let two = aggregate_runs(&[run(0.8), run(1.0)]);
        assert!((two.accuracy.mean - 0.9).abs() < 1e-15);
        assert!((two.accuracy.std - 0.1).abs() < 1e-15);
        assert_eq!(MeanStd { mean: 0.948, std: 0.014 }.percent(), "94.8±1.4");
    }

    #[test]
    fn welch_examples() {
        let a = [0.5, 0.6, 0.7, 0.8];
        assert_eq!(welch_t_test(&a, &a).unwrap(), 1.0);
        assert_eq!(welch_t_test(&[0.9, 0.9], &[0.9, 0.9, 0.9]).unwrap(), 1.0);

        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        let n0 = Normal::new(0.0, 1.0).unwrap();
        let n10 = Normal::new(10.0, 1.0).unwrap();
        let x: Vec<f64> = (0..10).map(|_| n0.sample(&mut rng)).collect();
        let y: Vec<f64> = (0..10).map(|_| n10.sample(&mut rng)).collect();
        assert!(welch_t_test(&x, &y).unwrap() < 1e-6);
    }

    #[test]
    fn welch_against_reference_value() {
        // Sample variances 5/3 and 4 worked out by hand.
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [3.0, 5.0, 7.0];
        let (va, vb): (f64, f64) = (5.0 / 3.0, 4.0);
        let (sa, sb) = (va / 4.0, vb / 3.0);
        let t: f64 = (2.5 - 5.0) / (sa + sb).sqrt();
        let df = (sa + sb).powi(2) / (sa * sa / 3.0 + sb * sb / 2.0);
        let expected = 2.0 * StudentsT::new(0.0, 1.0, df).unwrap().cdf(-t.abs());
        assert!((welch_t_test(&a, &b).unwrap() - expected).abs() < 1e-15);
        assert!(expected > 0.05 && expected < 0.5);
    }

    proptest! {
        #[test]
        fn metrics_in_unit_interval(tp in 0u64..100, fp in 0u64..100, fn_ in 0u64..100, tn in 1u64..100) {
            let m = metrics(&Confusion { tp, fp, fn_, tn }).unwrap();
            for v in [m.accuracy, m.recall, m.precision, m.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn aggregate_std_nonnegative(values in proptest::collection::vec(0.0f64..1.0, 1..12)) {
            let s = MeanStd::of(&values);
            prop_assert!(s.std >= 0.0);
            prop_assert!(s.mean >= 0.0 && s.mean <= 1.0 + 1e-15);
        }
    }
}
