//! Loading, validating and aligning the monthly indicator series and the
//! recession calendar into one panel.

mod fred;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::month::YearMonth;

pub use fred::{FredClient, FRED_BASE_URL};

/// Series identifiers in the fixed panel column order.
pub const SERIES_NAMES: [&str; 14] = [
    "BAA", "CUMFNS", "INDPRO", "IPMAT", "MANEMP", "USGOOD", "UNRATE", "TB3MS", "GS10", "T10Y3M",
    "WTISPLC", "PPIACO", "CPIAUCSL", "ISM",
];

/// Series that are downloadable from FRED. `T10Y3M` is derived locally and
/// `ISM` only ships as a committed file.
pub const FRED_SERIES: [&str; 12] = [
    "BAA", "CUMFNS", "INDPRO", "IPMAT", "MANEMP", "USGOOD", "UNRATE", "TB3MS", "GS10", "WTISPLC",
    "PPIACO", "CPIAUCSL",
];

pub fn series_unit(name: &str) -> &'static str {
    match name {
        "BAA" | "UNRATE" | "TB3MS" | "GS10" | "T10Y3M" => "Percent",
        "CUMFNS" => "Percent of Capacity",
        "INDPRO" | "IPMAT" => "Index 2012=100",
        "MANEMP" | "USGOOD" => "Thousands of Persons",
        "WTISPLC" => "Dollars per Barrel",
        "PPIACO" => "Index 1982=100",
        "CPIAUCSL" => "Index 1982-1984=100",
        "ISM" => "Index",
        _ => "",
    }
}

pub fn canonical_start() -> YearMonth {
    YearMonth::new(1959, 1)
}

pub fn canonical_end() -> YearMonth {
    YearMonth::new(2020, 6)
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("gap in series: {0} is missing")]
    GapInSeries(YearMonth),
    #[error("non-finite value at {0}")]
    NonFiniteValue(YearMonth),
    #[error("series are not aligned on identical months")]
    MisalignedSeries,
    #[error("required series missing: {0}")]
    SeriesMissing(String),
    #[error("series {0} does not cover {1}")]
    CoverageGap(String, YearMonth),
    #[error("unknown series: {0}")]
    UnknownSeries(String),
    #[error("invalid recession span {start}..{end}")]
    InvalidSpan { start: YearMonth, end: YearMonth },
    #[error("HTTP error, status {0}")]
    HttpError(u16),
    #[error("FRED rejected the API key")]
    AuthError,
    #[error("empty response")]
    EmptyResponse,
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// One named monthly indicator.
#[derive(Debug, Clone, PartialEq)]
pub struct MonthlySeries {
    pub name: String,
    pub unit: String,
    observations: Vec<(YearMonth, f64)>,
}

impl MonthlySeries {
    /// Validates that months are consecutive and values finite.
    pub fn new(
        name: impl Into<String>,
        unit: impl Into<String>,
        observations: Vec<(YearMonth, f64)>,
    ) -> Result<Self, IngestError> {
        for pair in observations.windows(2) {
            let (prev, next) = (pair[0].0, pair[1].0);
            if next != prev.succ() {
                // Out-of-order or duplicate months are reported as a gap at the
                // month that should have come next.
                return Err(IngestError::GapInSeries(prev.succ()));
            }
        }
        if let Some(&(month, _)) = observations.iter().find(|(_, v)| !v.is_finite()) {
            return Err(IngestError::NonFiniteValue(month));
        }
        Ok(Self {
            name: name.into(),
            unit: unit.into(),
            observations,
        })
    }

    pub fn observations(&self) -> &[(YearMonth, f64)] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn first_month(&self) -> Option<YearMonth> {
        self.observations.first().map(|o| o.0)
    }

    pub fn last_month(&self) -> Option<YearMonth> {
        self.observations.last().map(|o| o.0)
    }

    pub fn value_at(&self, month: YearMonth) -> Option<f64> {
        let first = self.first_month()?;
        let idx = first.months_until(month);
        if idx < 0 {
            return None;
        }
        self.observations.get(idx as usize).map(|o| o.1)
    }

    pub fn values(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.1).collect()
    }

    /// Restricts to `start..=end`.
    pub fn slice(&self, start: YearMonth, end: YearMonth) -> MonthlySeries {
        MonthlySeries {
            name: self.name.clone(),
            unit: self.unit.clone(),
            observations: self
                .observations
                .iter()
                .copied()
                .filter(|(m, _)| *m >= start && *m <= end)
                .collect(),
        }
    }
}

/// Parses a two-column `DATE,VALUE` CSV as exported from FRED.
pub fn load_series_csv(path: &Path, name: &str) -> Result<MonthlySeries, IngestError> {
    if !path.exists() {
        return Err(IngestError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    parse_series_csv(&text, name)
}

pub fn parse_series_csv(text: &str, name: &str) -> Result<MonthlySeries, IngestError> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut lines = text.lines().enumerate();
    let malformed = |line: usize, reason: &str| IngestError::MalformedRow {
        line,
        reason: reason.to_string(),
    };

    match lines.next() {
        Some((_, header)) if header.trim_end() == "DATE,VALUE" => {}
        _ => return Err(malformed(1, "expected header `DATE,VALUE`")),
    }

    let mut observations = Vec::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        let (date, value) = line
            .split_once(',')
            .ok_or_else(|| malformed(line_no, "expected two columns"))?;
        if value.contains(',') {
            return Err(malformed(line_no, "expected two columns"));
        }
        let month = YearMonth::parse_first_of_month(date.trim())
            .map_err(|e| malformed(line_no, &e.to_string()))?;
        let value = value.trim();
        let parsed: f64 = value
            .parse()
            .map_err(|_| malformed(line_no, &format!("unparseable value `{value}`")))?;
        observations.push((month, parsed));
    }
    MonthlySeries::new(name, series_unit(name), observations)
}

pub fn write_series_csv(series: &MonthlySeries, path: &Path) -> Result<(), IngestError> {
    let mut out = String::from("DATE,VALUE\n");
    for (month, value) in series.observations() {
        out.push_str(&format!("{},{}\n", month.first_of_month_string(), value));
    }
    let mut file = fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// 10-year constant-maturity yield minus 3-month bill rate.
pub fn compute_term_spread(
    gs10: &MonthlySeries,
    tb3ms: &MonthlySeries,
) -> Result<MonthlySeries, IngestError> {
    if gs10.len() != tb3ms.len() || gs10.first_month() != tb3ms.first_month() {
        return Err(IngestError::MisalignedSeries);
    }
    let observations = gs10
        .observations()
        .iter()
        .zip(tb3ms.observations())
        .map(|(&(m, long), &(_, short))| (m, long - short))
        .collect();
    MonthlySeries::new("T10Y3M", series_unit("T10Y3M"), observations)
}

/// Recession spans, each start-inclusive and end-exclusive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecessionCalendar {
    spans: Vec<(YearMonth, YearMonth)>,
}

impl RecessionCalendar {
    pub fn new(spans: Vec<(YearMonth, YearMonth)>) -> Result<Self, IngestError> {
        for &(start, end) in &spans {
            if end <= start {
                return Err(IngestError::InvalidSpan { start, end });
            }
        }
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(IngestError::InvalidSpan {
                    start: pair[1].0,
                    end: pair[1].1,
                });
            }
        }
        Ok(Self { spans })
    }

    /// NBER-dated U.S. recessions from 1959 through mid-2020.
    pub fn nber() -> Self {
        let ym = YearMonth::new;
        Self {
            spans: vec![
                (ym(1960, 4), ym(1961, 2)),
                (ym(1969, 12), ym(1970, 11)),
                (ym(1973, 11), ym(1975, 3)),
                (ym(1980, 1), ym(1980, 7)),
                (ym(1981, 7), ym(1982, 11)),
                (ym(1990, 7), ym(1991, 3)),
                (ym(2001, 3), ym(2001, 11)),
                (ym(2007, 12), ym(2009, 6)),
                (ym(2020, 2), ym(2020, 7)),
            ],
        }
    }

    pub fn spans(&self) -> &[(YearMonth, YearMonth)] {
        &self.spans
    }

    pub fn is_recession(&self, month: YearMonth) -> bool {
        self.spans.iter().any(|&(s, e)| month >= s && month < e)
    }

    /// Reads `start,end` rows (header required), dates as `YYYY-MM` or `YYYY-MM-01`.
    pub fn load_csv(path: &Path) -> Result<Self, IngestError> {
        if !path.exists() {
            return Err(IngestError::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        let mut spans = Vec::new();
        for (idx, line) in text.lines().enumerate().skip(1) {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| IngestError::MalformedRow {
                line: idx + 1,
                reason,
            };
            let (s, e) = line
                .split_once(',')
                .ok_or_else(|| bad("expected `start,end`".into()))?;
            let s: YearMonth = s.parse().map_err(|e: crate::month::ParseMonthError| bad(e.to_string()))?;
            let e: YearMonth = e.parse().map_err(|e: crate::month::ParseMonthError| bad(e.to_string()))?;
            spans.push((s, e));
        }
        Self::new(spans)
    }
}

/// Months × 14 columns of raw values plus the recession label per month.
#[derive(Debug, Clone, PartialEq)]
pub struct MonthlyPanel {
    pub months: Vec<YearMonth>,
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

impl MonthlyPanel {
    pub fn len(&self) -> usize {
        self.months.len()
    }

    pub fn is_empty(&self) -> bool {
        self.months.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
    }

    pub fn recession_months(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

/// Aligns the 14 series on `start..=end` in the fixed column order and labels
/// every month from the calendar.
pub fn build_panel(
    series: &[MonthlySeries],
    calendar: &RecessionCalendar,
    start: YearMonth,
    end: YearMonth,
) -> Result<MonthlyPanel, IngestError> {
    if let Some(extra) = series.iter().find(|s| !SERIES_NAMES.contains(&s.name.as_str())) {
        return Err(IngestError::UnknownSeries(extra.name.clone()));
    }
    let months: Vec<YearMonth> = YearMonth::range_inclusive(start, end).collect();
    let mut columns = Vec::with_capacity(SERIES_NAMES.len());
    for name in SERIES_NAMES {
        let s = series
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| IngestError::SeriesMissing(name.to_string()))?;
        let column = months
            .iter()
            .map(|&m| {
                s.value_at(m)
                    .ok_or_else(|| IngestError::CoverageGap(name.to_string(), m))
            })
            .collect::<Result<Vec<_>, _>>()?;
        columns.push(column);
    }
    let labels = months
        .iter()
        .map(|&m| u8::from(calendar.is_recession(m)))
        .collect();
    Ok(MonthlyPanel {
        months,
        names: SERIES_NAMES.iter().map(|s| s.to_string()).collect(),
        columns,
        labels,
    })
}

/// Loads every series from `<dir>/<NAME>.csv`. `T10Y3M` is computed from
/// `GS10` and `TB3MS` when its file is absent.
pub fn load_series_dir(dir: &Path) -> Result<Vec<MonthlySeries>, IngestError> {
    let mut out = Vec::with_capacity(SERIES_NAMES.len());
    for name in SERIES_NAMES {
        if name == "T10Y3M" {
            continue;
        }
        out.push(load_series_csv(&dir.join(format!("{name}.csv")), name)?);
    }
    let spread_path = dir.join("T10Y3M.csv");
    let spread = if spread_path.exists() {
        load_series_csv(&spread_path, "T10Y3M")?
    } else {
        let find = |n: &str| out.iter().find(|s| s.name == n).expect("loaded above");
        let (gs10, tb3ms) = (find("GS10"), find("TB3MS"));
        let start = gs10.first_month().max(tb3ms.first_month());
        let end = gs10.last_month().min(tb3ms.last_month());
        match (start, end) {
            (Some(s), Some(e)) => compute_term_spread(&gs10.slice(s, e), &tb3ms.slice(s, e))?,
            _ => return Err(IngestError::EmptyResponse),
        }
    };
    out.insert(9, spread);
    Ok(out)
}

/// The canonical panel: series from `dir`, NBER calendar, 1959-01 through 2020-06.
pub fn load_canonical_panel(dir: &Path) -> Result<MonthlyPanel, IngestError> {
    let series = load_series_dir(dir)?;
    build_panel(
        &series,
        &RecessionCalendar::nber(),
        canonical_start(),
        canonical_end(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ym(y: i32, m: u32) -> YearMonth {
        YearMonth::new(y, m)
    }

    fn flat(name: &str, start: YearMonth, end: YearMonth, value: f64) -> MonthlySeries {
        let obs = YearMonth::range_inclusive(start, end).map(|m| (m, value)).collect();
        MonthlySeries::new(name, series_unit(name), obs).unwrap()
    }

    fn canonical_flat_series() -> Vec<MonthlySeries> {
        SERIES_NAMES
            .iter()
            .map(|n| flat(n, canonical_start(), canonical_end(), 1.0))
            .collect()
    }

    #[test]
    fn parses_two_rows() {
        let s = parse_series_csv("DATE,VALUE\n1959-01-01,4.87\n1959-02-01,4.89\n", "BAA").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.observations()[1], (ym(1959, 2), 4.89));
        assert_eq!(s.unit, "Percent");
    }

    #[test]
    fn accepts_crlf_and_bom() {
        let s = parse_series_csv("\u{feff}DATE,VALUE\r\n1959-01-01,1\r\n1959-02-01,2\r\n", "X").unwrap();
        assert_eq!(s.values(), vec![1.0, 2.0]);
    }

    #[test]
    fn detects_gap() {
        let err = parse_series_csv("DATE,VALUE\n1959-01-01,1\n1959-03-01,2\n", "X").unwrap_err();
        assert!(matches!(err, IngestError::GapInSeries(m) if m == ym(1959, 2)));
    }

    #[test]
    fn fred_missing_marker_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("BAA.csv");
        fs::write(&path, "DATE,VALUE\n1959-01-01,4.87\n1959-02-01,.\n").unwrap();
        let err = load_series_csv(&path, "BAA").unwrap_err();
        assert!(matches!(err, IngestError::MalformedRow { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn rejects_bad_header_day_and_nonfinite() {
        assert!(matches!(
            parse_series_csv("DATE,BAA\n1959-01-01,1\n", "BAA"),
            Err(IngestError::MalformedRow { line: 1, .. })
        ));
        assert!(matches!(
            parse_series_csv("DATE,VALUE\n1959-01-15,1\n", "BAA"),
            Err(IngestError::MalformedRow { line: 2, .. })
        ));
        assert!(matches!(
            parse_series_csv("DATE,VALUE\n1959-01-01,inf\n", "BAA"),
            Err(IngestError::NonFiniteValue(_))
        ));
    }

    #[test]
    fn missing_file() {
        let err = load_series_csv(Path::new("/nonexistent/BAA.csv"), "BAA").unwrap_err();
        assert!(matches!(err, IngestError::MissingFile(_)));
    }

    #[test]
    fn term_spread() {
        let one = |v: f64| MonthlySeries::new("X", "", vec![(ym(2000, 1), v)]).unwrap();
        let s = compute_term_spread(&one(4.0), &one(4.0)).unwrap();
        assert_eq!(s.values(), vec![0.0]);
        assert_eq!(s.name, "T10Y3M");

        let two = |a: f64, b: f64| {
            MonthlySeries::new("X", "", vec![(ym(2000, 1), a), (ym(2000, 2), b)]).unwrap()
        };
        let s = compute_term_spread(&two(3.0, 3.1), &two(1.0, 3.3)).unwrap();
        assert!((s.values()[0] - 2.0).abs() < 1e-12);
        assert!((s.values()[1] + 0.2).abs() < 1e-12);

        let err = compute_term_spread(&one(1.0), &two(1.0, 2.0)).unwrap_err();
        assert!(matches!(err, IngestError::MisalignedSeries));
    }

    #[test]
    fn canonical_panel_counts() {
        let panel = build_panel(
            &canonical_flat_series(),
            &RecessionCalendar::nber(),
            canonical_start(),
            canonical_end(),
        )
        .unwrap();
        assert_eq!(panel.len(), 738);
        assert_eq!(panel.recession_months(), 98);
        let tail: usize = panel.labels[738 - 198..].iter().map(|&l| l as usize).sum();
        assert_eq!(tail, 23);
        let idx = |m: YearMonth| canonical_start().months_until(m) as usize;
        assert_eq!(panel.labels[idx(ym(1960, 4))], 1);
        assert_eq!(panel.labels[idx(ym(1961, 1))], 1);
        assert_eq!(panel.labels[idx(ym(1961, 2))], 0);
    }

    #[test]
    fn span_lengths_match_calendar() {
        let cal = RecessionCalendar::nber();
        let lengths: Vec<i64> = cal.spans().iter().map(|&(s, e)| s.months_until(e)).collect();
        assert_eq!(lengths, vec![10, 11, 16, 6, 16, 8, 8, 18, 5]);
    }

    #[test]
    fn panel_arity_and_coverage() {
        let mut series = canonical_flat_series();
        series.pop();
        let err = build_panel(&series, &RecessionCalendar::nber(), canonical_start(), canonical_end())
            .unwrap_err();
        assert!(matches!(err, IngestError::SeriesMissing(n) if n == "ISM"));

        let mut series = canonical_flat_series();
        series[0] = flat("BAA", ym(1960, 1), canonical_end(), 1.0);
        let err = build_panel(&series, &RecessionCalendar::nber(), canonical_start(), canonical_end())
            .unwrap_err();
        assert!(matches!(err, IngestError::CoverageGap(n, m) if n == "BAA" && m == ym(1959, 1)));
    }

    #[test]
    fn panel_is_deterministic() {
        let series = canonical_flat_series();
        let a = build_panel(&series, &RecessionCalendar::nber(), canonical_start(), canonical_end()).unwrap();
        let b = build_panel(&series, &RecessionCalendar::nber(), canonical_start(), canonical_end()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn calendar_validation() {
        assert!(RecessionCalendar::new(vec![(ym(2000, 1), ym(2000, 1))]).is_err());
        assert!(RecessionCalendar::new(vec![
            (ym(2000, 1), ym(2000, 6)),
            (ym(2000, 3), ym(2000, 9))
        ])
        .is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("UNRATE.csv");
        let s = MonthlySeries::new(
            "UNRATE",
            "Percent",
            vec![(ym(1959, 1), 6.0), (ym(1959, 2), 5.9), (ym(1959, 3), 5.6)],
        )
        .unwrap();
        write_series_csv(&s, &path).unwrap();
        assert_eq!(load_series_csv(&path, "UNRATE").unwrap(), s);
    }
}
