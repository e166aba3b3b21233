//! Pearson chi-squared test of independence and the chi-squared survival function.

use serde::{Deserialize, Serialize};

use super::StatsError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub df: u32,
    pub p_value: f64,
    /// A column of the table summed to zero; statistic and p are conventional.
    pub degenerate: bool,
    /// Some expected count fell below the configured warning level.
    pub low_expected: bool,
}

/// Tests independence of a k×2 table of (present, absent) counts, one row per identity.
///
/// No continuity correction is applied.
pub fn chi_square_independence(
    rows: &[(u64, u64)],
    min_expected_warn: f64,
) -> Result<ChiSquareResult, StatsError> {
    if rows.len() < 2 {
        return Err(StatsError::TooFewRows(rows.len()));
    }
    if let Some(i) = rows.iter().position(|&(a, b)| a + b == 0) {
        return Err(StatsError::EmptyRow(i));
    }
    let df = (rows.len() - 1) as u32;
    let col0: u64 = rows.iter().map(|r| r.0).sum();
    let col1: u64 = rows.iter().map(|r| r.1).sum();
    let total = (col0 + col1) as f64;
    if col0 == 0 || col1 == 0 {
        return Ok(ChiSquareResult {
            statistic: 0.0,
            df,
            p_value: 1.0,
            degenerate: true,
            low_expected: false,
        });
    }
    let mut statistic = 0.0;
    let mut low_expected = false;
    for &(a, b) in rows {
        let row = (a + b) as f64;
        for (obs, col) in [(a, col0), (b, col1)] {
            let expected = row * col as f64 / total;
            low_expected |= expected < min_expected_warn;
            let d = obs as f64 - expected;
            statistic += d * d / expected;
        }
    }
    Ok(ChiSquareResult {
        statistic,
        df,
        p_value: chi_square_sf(statistic, df)?,
        degenerate: false,
        low_expected,
    })
}

/// Survival function of the chi-squared distribution, `Q(df/2, x/2)`.
pub fn chi_square_sf(x: f64, df: u32) -> Result<f64, StatsError> {
    if !x.is_finite() || x < 0.0 {
        return Err(StatsError::InvalidStatistic(x));
    }
    if df == 0 {
        return Err(StatsError::InvalidDf);
    }
    Ok(gamma_q(df as f64 / 2.0, x / 2.0))
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `a > 0`.
pub fn ln_gamma(a: f64) -> f64 {
    if a < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * a).sin()).ln() - ln_gamma(1.0 - a);
    }
    let a = a - 1.0;
    let mut sum = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        sum += c / (a + i as f64);
    }
    let t = a + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (a + 0.5) * t.ln() - t + sum.ln()
}

const EPS: f64 = 1e-16;
const TINY: f64 = 1e-300;
const MAX_ITER: usize = 10_000;

/// Regularized upper incomplete gamma function.
fn gamma_q(a: f64, x: f64) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_continued_fraction(a, x)
    }
}

fn prefactor(a: f64, x: f64) -> f64 {
    (a * x.ln() - x - ln_gamma(a)).exp()
}

fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut term = 1.0 / a;
    let mut sum = term;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * EPS {
            break;
        }
    }
    sum * prefactor(a, x)
}

fn gamma_q_continued_fraction(a: f64, x: f64) -> f64 {
    // Modified Lentz evaluation.
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    prefactor(a, x) * h
}
