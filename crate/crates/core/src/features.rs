//! Derivative features, standardization, split assignment and sliding windows.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::ingest::MonthlyPanel;
use crate::month::YearMonth;

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("series too short: need at least {needed} values, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("window of {width} months does not fit in {available} feature months")]
    WindowTooLong { width: usize, available: usize },
    #[error("unknown series: {0}")]
    UnknownSeries(String),
    #[error("perturbation factor {0} outside [0.5, 1.5]")]
    InvalidFactor(f64),
    #[error("feature mask selects no columns")]
    EmptyMask,
    #[error("standardizer has {expected} features, panel has {got}")]
    FeatureCountMismatch { expected: usize, got: usize },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Half-difference: `out[t-1] = (x[t] - x[t-1]) / 2`.
pub fn first_derivative(x: &[f64]) -> Result<Vec<f64>, FeatureError> {
    if x.len() < 2 {
        return Err(FeatureError::TooShort {
            needed: 2,
            got: x.len(),
        });
    }
    Ok(x.windows(2).map(|w| (w[1] - w[0]) / 2.0).collect())
}

/// Half-difference of the half-difference.
pub fn second_derivative(x: &[f64]) -> Result<Vec<f64>, FeatureError> {
    if x.len() < 3 {
        return Err(FeatureError::TooShort {
            needed: 3,
            got: x.len(),
        });
    }
    first_derivative(&first_derivative(x)?)
}

/// Which feature groups enter the windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMask {
    pub raw: bool,
    pub d1: bool,
    pub d2: bool,
}

impl Default for FeatureMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl FeatureMask {
    pub const ALL: FeatureMask = FeatureMask {
        raw: true,
        d1: true,
        d2: true,
    };

    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.raw, "raw"), (self.d1, "d1"), (self.d2, "d2")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        parts.join("+")
    }

    pub fn is_empty(&self) -> bool {
        !(self.raw || self.d1 || self.d2)
    }
}

/// Per-month feature rows: raw values, then first, then second derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePanel {
    pub months: Vec<YearMonth>,
    pub feature_names: Vec<String>,
    /// Row-major, `months.len() × feature_names.len()`.
    pub values: Vec<f64>,
    pub labels: Vec<u8>,
}

impl FeaturePanel {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn len(&self) -> usize {
        self.months.len()
    }

    pub fn is_empty(&self) -> bool {
        self.months.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.n_features();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.row(i)[j]).collect()
    }

    pub fn index_of(&self, month: YearMonth) -> Option<usize> {
        let first = *self.months.first()?;
        let idx = first.months_until(month);
        (idx >= 0 && (idx as usize) < self.len()).then_some(idx as usize)
    }

    /// Keeps only the column groups enabled in `mask`.
    pub fn select(&self, mask: FeatureMask) -> Result<FeaturePanel, FeatureError> {
        if mask.is_empty() {
            return Err(FeatureError::EmptyMask);
        }
        let keep: Vec<usize> = self
            .feature_names
            .iter()
            .enumerate()
            .filter(|(_, n)| {
                if n.starts_with("d1_") {
                    mask.d1
                } else if n.starts_with("d2_") {
                    mask.d2
                } else {
                    mask.raw
                }
            })
            .map(|(j, _)| j)
            .collect();
        let mut values = Vec::with_capacity(self.len() * keep.len());
        for i in 0..self.len() {
            let row = self.row(i);
            values.extend(keep.iter().map(|&j| row[j]));
        }
        Ok(FeaturePanel {
            months: self.months.clone(),
            feature_names: keep.iter().map(|&j| self.feature_names[j].clone()).collect(),
            values,
            labels: self.labels.clone(),
        })
    }

    /// `month,<features...>,label`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), FeatureError> {
        writeln!(out, "month,{},label", self.feature_names.join(","))?;
        for i in 0..self.len() {
            let cells: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(out, "{},{},{}", self.months[i], cells.join(","), self.labels[i])?;
        }
        Ok(())
    }
}

/// Appends first- and second-derivative columns and drops the first two
/// months, where the second derivative is undefined.
pub fn build_feature_panel(panel: &MonthlyPanel) -> Result<FeaturePanel, FeatureError> {
    let n = panel.len();
    if n < 3 {
        return Err(FeatureError::TooShort { needed: 3, got: n });
    }
    let k = panel.columns.len();
    let d1: Vec<Vec<f64>> = panel
        .columns
        .iter()
        .map(|c| first_derivative(c))
        .collect::<Result<_, _>>()?;
    let d2: Vec<Vec<f64>> = panel
        .columns
        .iter()
        .map(|c| second_derivative(c))
        .collect::<Result<_, _>>()?;

    let mut values = Vec::with_capacity((n - 2) * 3 * k);
    for m in 2..n {
        values.extend(panel.columns.iter().map(|c| c[m]));
        values.extend(d1.iter().map(|c| c[m - 1]));
        values.extend(d2.iter().map(|c| c[m - 2]));
    }
    let mut feature_names: Vec<String> = panel.names.clone();
    feature_names.extend(panel.names.iter().map(|n| format!("d1_{n}")));
    feature_names.extend(panel.names.iter().map(|n| format!("d2_{n}")));
    Ok(FeaturePanel {
        months: panel.months[2..].to_vec(),
        feature_names,
        values,
        labels: panel.labels[2..].to_vec(),
    })
}

/// Returns a copy of `panel` with one raw column scaled by `factor`.
pub fn perturb_series(
    panel: &MonthlyPanel,
    name: &str,
    factor: f64,
) -> Result<MonthlyPanel, FeatureError> {
    let j = panel
        .names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| FeatureError::UnknownSeries(name.to_string()))?;
    if !(0.5..=1.5).contains(&factor) {
        return Err(FeatureError::InvalidFactor(factor));
    }
    let mut out = panel.clone();
    if factor != 1.0 {
        out.columns[j].iter_mut().for_each(|v| *v *= factor);
    }
    Ok(out)
}

/// Split boundaries: months up to `train_end` train, up to `val_end`
/// validate, the rest test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train_end: YearMonth,
    pub val_end: YearMonth,
}

impl Default for Splits {
    fn default() -> Self {
        Self {
            train_end: YearMonth::new(1991, 12),
            val_end: YearMonth::new(2003, 12),
        }
    }
}

impl Splits {
    pub fn assign(&self, month: YearMonth) -> Split {
        if month <= self.train_end {
            Split::Train
        } else if month <= self.val_end {
            Split::Validate
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validate,
    Test,
}

/// Z-score parameters fitted on training months only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Features whose training std fell below the floor.
    #[serde(default)]
    pub degenerate: Vec<String>,
}

impl Standardizer {
    /// Leaves values unchanged.
    pub fn identity(n_features: usize) -> Self {
        Self {
            mean: vec![0.0; n_features],
            std: vec![1.0; n_features],
            degenerate: Vec::new(),
        }
    }

    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, row: &[f64], out: &mut Vec<f64>) {
        out.extend(
            row.iter()
                .zip(self.mean.iter().zip(&self.std))
                .map(|(v, (m, s))| (v - m) / s),
        );
    }
}

/// Population mean and std per feature over months `<= train_end`.
pub fn fit_standardizer(
    fp: &FeaturePanel,
    train_end: YearMonth,
) -> Result<Standardizer, FeatureError> {
    let rows: Vec<usize> = (0..fp.len()).filter(|&i| fp.months[i] <= train_end).collect();
    if rows.len() < 2 {
        return Err(FeatureError::InvalidSplit(format!(
            "need at least 2 training months, found {}",
            rows.len()
        )));
    }
    let n = rows.len() as f64;
    let d = fp.n_features();
    let mut mean = vec![0.0; d];
    for &i in &rows {
        for (m, v) in mean.iter_mut().zip(fp.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for &i in &rows {
        for ((acc, v), m) in var.iter_mut().zip(fp.row(i)).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    let mut degenerate = Vec::new();
    let std = var
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let s = (v / n).sqrt();
            if s < STD_FLOOR {
                log::warn!("degenerate feature {}: std {s:e} floored", fp.feature_names[j]);
                degenerate.push(fp.feature_names[j].clone());
                STD_FLOOR
            } else {
                s
            }
        })
        .collect();
    Ok(Standardizer {
        mean,
        std,
        degenerate,
    })
}

/// A `width × n_features` standardized block ending at `end_month`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledWindow {
    pub end_month: YearMonth,
    pub width: usize,
    pub n_features: usize,
    /// Row-major, oldest month first.
    pub block: Vec<f64>,
    pub label: u8,
    pub split: Split,
}

impl LabeledWindow {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.block[t * self.n_features..(t + 1) * self.n_features]
    }
}

/// Window geometry: width `width`, label taken `offset` months after the
/// window's last month.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub width: usize,
    pub offset: usize,
    pub splits: Splits,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            width: 6,
            offset: 0,
            splits: Splits::default(),
        }
    }
}

/// One window per month with `width - 1` predecessors and a label `offset`
/// months ahead. Lookback may reach into an earlier split.
pub fn build_windows(
    fp: &FeaturePanel,
    standardizer: &Standardizer,
    spec: WindowSpec,
) -> Result<Vec<LabeledWindow>, FeatureError> {
    let n = fp.len();
    let d = fp.n_features();
    if standardizer.n_features() != d {
        return Err(FeatureError::FeatureCountMismatch {
            expected: standardizer.n_features(),
            got: d,
        });
    }
    if spec.width == 0 || spec.width > n {
        return Err(FeatureError::WindowTooLong {
            width: spec.width,
            available: n,
        });
    }
    let (first, last) = (fp.months[0], fp.months[n - 1]);
    let Splits { train_end, val_end } = spec.splits;
    if train_end >= val_end || train_end < first || val_end >= last {
        return Err(FeatureError::InvalidSplit(format!(
            "train_end {train_end} / val_end {val_end} not ordered inside {first}..{last}"
        )));
    }

    let standardized: Vec<f64> = {
        let mut out = Vec::with_capacity(fp.values.len());
        for i in 0..n {
            standardizer.apply(fp.row(i), &mut out);
        }
        out
    };

    let mut windows = Vec::new();
    for end in (spec.width - 1)..n {
        let label_idx = end + spec.offset;
        if label_idx >= n {
            break;
        }
        let start = end + 1 - spec.width;
        windows.push(LabeledWindow {
            end_month: fp.months[end],
            width: spec.width,
            n_features: d,
            block: standardized[start * d..(end + 1) * d].to_vec(),
            label: fp.labels[label_idx],
            split: spec.splits.assign(fp.months[end]),
        });
    }
    Ok(windows)
}

pub fn windows_in(windows: &[LabeledWindow], split: Split) -> Vec<LabeledWindow> {
    windows.iter().filter(|w| w.split == split).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{build_panel, canonical_end, canonical_start, MonthlySeries, RecessionCalendar, SERIES_NAMES};
    use proptest::prelude::*;

    fn ym(y: i32, m: u32) -> YearMonth {
        YearMonth::new(y, m)
    }

    /// Canonical-range panel whose column j at month i is `(j+1) * sin(i) + i`.
    fn canonical_panel() -> MonthlyPanel {
        let series: Vec<MonthlySeries> = SERIES_NAMES
            .iter()
            .enumerate()
            .map(|(j, n)| {
                let obs = YearMonth::range_inclusive(canonical_start(), canonical_end())
                    .enumerate()
                    .map(|(i, m)| (m, (j as f64 + 1.0) * (i as f64 * 0.3).sin() + i as f64 * 0.01))
                    .collect();
                MonthlySeries::new(*n, "", obs).unwrap()
            })
            .collect();
        build_panel(&series, &RecessionCalendar::nber(), canonical_start(), canonical_end()).unwrap()
    }

    #[test]
    fn derivative_examples() {
        assert_eq!(first_derivative(&[5.0, 5.0, 5.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(first_derivative(&[1.0, 3.0, 7.0]).unwrap(), vec![1.0, 2.0]);
        assert!(matches!(first_derivative(&[1.0]), Err(FeatureError::TooShort { .. })));
        assert_eq!(second_derivative(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(second_derivative(&[1.0, 3.0, 7.0]).unwrap(), vec![0.5]);
        assert!(matches!(second_derivative(&[1.0, 2.0]), Err(FeatureError::TooShort { .. })));
    }

    proptest! {
        #[test]
        fn first_derivative_is_linear(
            x in proptest::collection::vec(-1e3f64..1e3, 2..40),
            c in -10.0f64..10.0,
        ) {
            let scaled: Vec<f64> = x.iter().map(|v| c * v).collect();
            let lhs = first_derivative(&scaled).unwrap();
            let rhs: Vec<f64> = first_derivative(&x).unwrap().iter().map(|v| c * v).collect();
            for (a, b) in lhs.iter().zip(&rhs) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300) + 1e-12);
            }
        }
    }

    #[test]
    fn feature_panel_layout() {
        let panel = canonical_panel();
        let fp = build_feature_panel(&panel).unwrap();
        assert_eq!(fp.len(), 736);
        assert_eq!(fp.n_features(), 42);
        assert_eq!(fp.feature_names[14], "d1_BAA");
        assert_eq!(fp.feature_names[28], "d2_BAA");
        assert_eq!(fp.months[0], ym(1959, 3));

        for j in 0..14 {
            let raw = &panel.columns[j];
            let d1 = first_derivative(raw).unwrap();
            let d2 = second_derivative(raw).unwrap();
            assert_eq!(fp.column(j), raw[2..].to_vec());
            assert_eq!(fp.column(14 + j), d1[1..].to_vec());
            assert_eq!(fp.column(28 + j), d2.to_vec());
        }
    }

    #[test]
    fn standardizer_examples() {
        let fp = FeaturePanel {
            months: vec![ym(2000, 1), ym(2000, 2), ym(2000, 3)],
            feature_names: vec!["a".into(), "b".into()],
            values: vec![0.0, 5.0, 2.0, 5.0, 100.0, 7.0],
            labels: vec![0, 0, 0],
        };
        let s = fit_standardizer(&fp, ym(2000, 2)).unwrap();
        assert_eq!(s.mean[0], 1.0);
        assert_eq!(s.std[0], 1.0);
        assert_eq!(s.std[1], STD_FLOOR);
        assert_eq!(s.degenerate, vec!["b".to_string()]);
        assert!(fit_standardizer(&fp, ym(2000, 1)).is_err());
    }

    #[test]
    fn standardized_training_columns_are_centered() {
        let fp = build_feature_panel(&canonical_panel()).unwrap();
        let splits = Splits::default();
        let s = fit_standardizer(&fp, splits.train_end).unwrap();
        let mut out = Vec::new();
        let train_rows: Vec<usize> = (0..fp.len()).filter(|&i| fp.months[i] <= splits.train_end).collect();
        for &i in &train_rows {
            s.apply(fp.row(i), &mut out);
        }
        for j in 0..42 {
            let mean: f64 = train_rows.iter().enumerate().map(|(r, _)| out[r * 42 + j]).sum::<f64>()
                / train_rows.len() as f64;
            assert!(mean.abs() < 1e-10, "feature {j} mean {mean}");
        }
    }

    #[test]
    fn standardizer_ignores_non_training_months() {
        let fp = build_feature_panel(&canonical_panel()).unwrap();
        let splits = Splits::default();
        let before = fit_standardizer(&fp, splits.train_end).unwrap();
        let mut changed = fp.clone();
        let i = changed.index_of(ym(1995, 6)).unwrap();
        let j = changed.index_of(ym(2010, 1)).unwrap();
        for k in 0..42 {
            changed.values[i * 42 + k] += 1e6;
            changed.values[j * 42 + k] -= 3e5;
        }
        assert_eq!(fit_standardizer(&changed, splits.train_end).unwrap(), before);
    }

    #[test]
    fn canonical_window_counts() {
        let fp = build_feature_panel(&canonical_panel()).unwrap();
        let s = fit_standardizer(&fp, Splits::default().train_end).unwrap();
        let windows = build_windows(&fp, &s, WindowSpec::default()).unwrap();
        assert_eq!(windows.len(), 731);
        let count = |split| windows.iter().filter(|w| w.split == split).count();
        assert_eq!(count(Split::Train), 389);
        assert_eq!(count(Split::Validate), 144);
        assert_eq!(count(Split::Test), 198);
        let test_positive: usize = windows
            .iter()
            .filter(|w| w.split == Split::Test)
            .map(|w| w.label as usize)
            .sum();
        assert_eq!(test_positive, 23);

        let first = &windows[0];
        assert_eq!(first.end_month, ym(1959, 8));
        // Rows are months 1959-03..1959-08.
        let mut expected = Vec::new();
        for i in 0..6 {
            s.apply(fp.row(i), &mut expected);
        }
        assert_eq!(first.block, expected);

        let test: Vec<_> = windows.iter().filter(|w| w.split == Split::Test).collect();
        assert_eq!(test[0].end_month, ym(2004, 1));
        assert_eq!(test.last().unwrap().end_month, ym(2020, 6));
    }

    #[test]
    fn window_count_formula() {
        let fp = build_feature_panel(&canonical_panel()).unwrap();
        let s = fit_standardizer(&fp, Splits::default().train_end).unwrap();
        for w in [1usize, 2, 6, 12] {
            for k in [0usize, 1, 3, 6] {
                let spec = WindowSpec {
                    width: w,
                    offset: k,
                    splits: Splits::default(),
                };
                let windows = build_windows(&fp, &s, spec).unwrap();
                assert_eq!(windows.len(), 738 - 2 - (w - 1) - k, "w={w} k={k}");
            }
        }
        let k3 = build_windows(
            &fp,
            &s,
            WindowSpec {
                offset: 3,
                ..WindowSpec::default()
            },
        )
        .unwrap();
        assert_eq!(k3.last().unwrap().end_month, ym(2020, 3));
        let idx = fp.index_of(ym(2019, 11)).unwrap();
        let w = k3.iter().find(|w| w.end_month == ym(2019, 11)).unwrap();
        assert_eq!(w.label, fp.labels[idx + 3]);
        assert_eq!(w.label, 1);
    }

    #[test]
    fn window_errors() {
        let fp = build_feature_panel(&canonical_panel()).unwrap();
        let s = fit_standardizer(&fp, Splits::default().train_end).unwrap();
        let bad = WindowSpec {
            splits: Splits {
                train_end: ym(2005, 1),
                val_end: ym(2000, 1),
            },
            ..WindowSpec::default()
        };
        assert!(matches!(build_windows(&fp, &s, bad), Err(FeatureError::InvalidSplit(_))));
        let long = WindowSpec {
            width: 1000,
            ..WindowSpec::default()
        };
        assert!(matches!(build_windows(&fp, &s, long), Err(FeatureError::WindowTooLong { .. })));
    }

    #[test]
    fn perturbation() {
        let panel = canonical_panel();
        assert_eq!(perturb_series(&panel, "BAA", 1.0).unwrap(), panel);

        let p = perturb_series(&panel, "BAA", 1.3).unwrap();
        for (j, name) in panel.names.iter().enumerate() {
            for (a, b) in panel.columns[j].iter().zip(&p.columns[j]) {
                if name == "BAA" {
                    assert_eq!(*b, a * 1.3);
                } else {
                    assert_eq!(a, b);
                }
            }
        }
        let fp = build_feature_panel(&panel).unwrap();
        let fq = build_feature_panel(&p).unwrap();
        let d1 = fp.feature_names.iter().position(|n| n == "d1_BAA").unwrap();
        for (a, b) in fp.column(d1).iter().zip(fq.column(d1)) {
            assert!((b - 1.3 * a).abs() <= 1e-12 * (1.0 + a.abs()));
        }
        assert!(matches!(perturb_series(&panel, "XYZ", 1.1), Err(FeatureError::UnknownSeries(_))));
        assert!(matches!(perturb_series(&panel, "BAA", 2.0), Err(FeatureError::InvalidFactor(_))));
    }

    #[test]
    fn mask_selection() {
        let fp = build_feature_panel(&canonical_panel()).unwrap();
        let raw = fp
            .select(FeatureMask {
                raw: true,
                d1: false,
                d2: false,
            })
            .unwrap();
        assert_eq!(raw.n_features(), 14);
        assert_eq!(raw.feature_names[0], "BAA");
        let derivs = fp
            .select(FeatureMask {
                raw: false,
                d1: true,
                d2: true,
            })
            .unwrap();
        assert_eq!(derivs.n_features(), 28);
        assert_eq!(derivs.feature_names[0], "d1_BAA");
        assert_eq!(fp.select(FeatureMask::ALL).unwrap(), fp);
        assert!(fp
            .select(FeatureMask {
                raw: false,
                d1: false,
                d2: false
            })
            .is_err());
    }

    #[test]
    fn csv_export_header() {
        let fp = build_feature_panel(&canonical_panel()).unwrap();
        let mut buf = Vec::new();
        fp.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("month,BAA,CUMFNS"));
        assert!(header.ends_with("d2_ISM,label"));
        assert_eq!(header.split(',').count(), 44);
        assert_eq!(text.lines().count(), 737);
    }
}
