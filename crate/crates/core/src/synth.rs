//! Deterministic stand-in for the 14 monthly indicator series.
//!
//! The generator drives every series from one latent stress signal tied to
//! the recession calendar: stress climbs in the months before an onset,
//! peaks during the recession and decays afterwards, with a few
//! unrelated scares mixed in. Trends, inflation regimes and noise are
//! chosen so that levels drift the way the real series do. The output is
//! for exercising the pipeline when the real data cannot be fetched; it
//! carries no information about the actual economy beyond the calendar.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};

use crate::autodiff::seeded_rng;
use crate::ingest::{series_unit, write_series_csv, IngestError, MonthlySeries, RecessionCalendar};
use crate::YearMonth;

pub const SYNTH_SEED: u64 = 20_200_601;

/// Series written by [`generate`]; the term spread is left to ingest.
pub const SYNTH_SERIES: [&str; 13] = [
    "BAA", "CUMFNS", "INDPRO", "IPMAT", "MANEMP", "USGOOD", "UNRATE", "TB3MS", "GS10", "WTISPLC", "PPIACO",
    "CPIAUCSL", "ISM",
];

/// Months of unrelated stress episodes: (start, length, peak).
const SCARES: [((i32, u32), usize, f64); 5] = [
    ((1966, 9), 5, 0.35),
    ((1977, 3), 3, 0.25),
    ((1984, 9), 4, 0.3),
    ((1998, 9), 4, 0.35),
    ((2015, 11), 5, 0.35),
];

fn stress_path(months: &[YearMonth], calendar: &RecessionCalendar) -> Vec<f64> {
    let mut s = vec![0.0f64; months.len()];
    for (i, &m) in months.iter().enumerate() {
        let mut v = 0.0f64;
        for &(start, end) in calendar.spans() {
            let lead = m.months_until(start);
            if (1..=9).contains(&lead) {
                // Build-up before the onset.
                v = v.max(0.45 * (10 - lead) as f64 / 9.0);
            }
            if m >= start && m < end {
                let k = start.months_until(m) as f64;
                v = v.max((0.6 + 0.2 * k).min(1.0));
            }
            let after = end.months_until(m);
            if after >= 0 {
                v = v.max(0.7 * (-(after as f64) / 3.0).exp());
            }
        }
        for &((y, mo), len, peak) in &SCARES {
            let k = YearMonth::new(y, mo).months_until(m);
            if (0..len as i64).contains(&k) {
                let shape = 1.0 - ((k as f64 + 0.5) / len as f64 - 0.5).abs() * 2.0;
                v = v.max(peak * shape);
            }
        }
        s[i] = v;
    }
    s
}

/// Smooth annualized inflation regime in percent: rising into 1980,
/// falling through the 1980s, low afterwards.
fn inflation_regime(m: YearMonth) -> f64 {
    let t = m.year() as f64 + (m.month() as f64 - 1.0) / 12.0;
    let hump = 7.5 * (-((t - 1979.5) / 6.0).powi(2)).exp();
    2.0 + hump + if t < 1966.0 { -0.8 } else { 0.0 }
}

fn round_to(x: f64, digits: i32) -> f64 {
    let f = 10f64.powi(digits);
    (x * f).round() / f
}

/// The generated series over `start..=end`, keyed by FRED-style name.
pub fn generate_series(
    calendar: &RecessionCalendar,
    start: YearMonth,
    end: YearMonth,
    seed: u64,
) -> Result<Vec<MonthlySeries>, IngestError> {
    let months: Vec<YearMonth> = YearMonth::range_inclusive(start, end).collect();
    let n = months.len();
    let stress = stress_path(&months, calendar);
    let mut rng = seeded_rng(seed);
    let z = Normal::new(0.0, 1.0).expect("unit normal");
    let mut e = move || z.sample(&mut rng);

    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); SYNTH_SERIES.len()];
    let (mut ip, mut ipmat) = (3.2f64, 3.4f64);
    let mut cap = 82.0f64;
    let (mut man, mut goods) = (9.65f64, 9.85f64);
    let mut unrate = 5.5f64;
    let mut bill = 2.8f64;
    let mut term = 1.2f64;
    let mut credit = 0.9f64;
    let mut oil = 1.1f64;
    let (mut ppi, mut cpi) = (3.43f64, 3.37f64);
    let mut ism_dev = 0.0f64;
    let mut noise = 0.0f64;

    for (i, &m) in months.iter().enumerate() {
        noise = 0.6 * noise + 0.04 * e();
        let s = (stress[i] + noise).max(0.0);
        let inflation = inflation_regime(m);
        // Months until the next onset, for the yield-curve inversion.
        let to_onset = calendar
            .spans()
            .iter()
            .map(|&(st, _)| m.months_until(st))
            .filter(|&d| d > 0)
            .min()
            .unwrap_or(i64::MAX);
        let inverting = if (3..=18).contains(&to_onset) { 1.0 } else { 0.0 };

        ip += 0.0026 - 0.013 * s + 0.006 * e();
        ipmat += 0.0024 - 0.016 * s + 0.008 * e();
        cap += 0.08 * (81.0 - cap) - 1.1 * s + 0.45 * e();
        let man_drift = if m.year() < 1980 { 0.0009 } else { -0.0007 };
        man += man_drift - 0.006 * s + 0.0018 * e();
        goods += man_drift + 0.0003 - 0.005 * s + 0.0015 * e();
        unrate += 0.28 * s - 0.025 * (unrate - 5.2) * (1.0 - s) + 0.1 * e();
        unrate = unrate.max(2.5);
        let neutral = inflation + 0.5;
        bill += 0.04 * (neutral - bill) - if bill > 0.3 { 0.3 * s } else { 0.0 } + 0.18 * e();
        bill = bill.max(0.02);
        term += 0.15 * (1.4 - 2.3 * inverting + 1.2 * stress[i] - term) + 0.15 * e();
        credit += 0.2 * (0.9 + 1.6 * s - credit) + 0.06 * e();
        oil += 0.003 + 0.0004 * inflation - 0.04 * s + 0.055 * e();
        ppi += inflation / 1200.0 - 0.004 * s + 0.005 * e();
        cpi += inflation / 1200.0 - 0.0015 * s + 0.0018 * e();
        ism_dev = 0.6 * ism_dev + 1.6 * e();
        let gs10 = bill + term;

        let values = [
            round_to(gs10 + credit, 2),
            round_to(cap, 4),
            round_to(ip.exp(), 4),
            round_to(ipmat.exp(), 4),
            round_to(man.exp(), 0),
            round_to(goods.exp(), 0),
            round_to(unrate, 1),
            round_to(bill, 2),
            round_to(gs10, 2),
            round_to(oil.exp(), 2),
            round_to(ppi.exp(), 1),
            round_to(cpi.exp(), 3),
            round_to(53.0 - 14.0 * s + ism_dev, 1),
        ];
        for (col, v) in cols.iter_mut().zip(values) {
            col.push(v);
        }
    }

    SYNTH_SERIES
        .iter()
        .zip(cols)
        .map(|(name, values)| {
            let obs = months.iter().copied().zip(values).collect();
            MonthlySeries::new(*name, series_unit(name), obs)
        })
        .collect()
}

/// Writes `<NAME>.csv` for every generated series and `recessions.csv`.
pub fn generate(dir: &Path, seed: u64) -> Result<(), IngestError> {
    fs::create_dir_all(dir)?;
    let calendar = RecessionCalendar::nber();
    let series = generate_series(
        &calendar,
        crate::ingest::canonical_start(),
        crate::ingest::canonical_end(),
        seed,
    )?;
    for s in &series {
        write_series_csv(s, &dir.join(format!("{}.csv", s.name)))?;
    }
    let mut cal = String::from("start,end\n");
    for (s, e) in calendar.spans() {
        cal.push_str(&format!("{s},{e}\n"));
    }
    fs::write(dir.join("recessions.csv"), cal)?;
    Ok(())
}
