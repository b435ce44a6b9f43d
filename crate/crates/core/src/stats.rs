//! Evaluation statistics: chi-square goodness of fit for two-way preference
//! counts, the Friedman rank test for related-sample ratings, and rating
//! summaries.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("preference count needs n >= 1 and count_a <= n (got n={n}, count_a={count_a})")]
    InvalidCount { n: u64, count_a: u64 },
    #[error("rating matrix needs at least 2 rows and 2 columns")]
    TooSmall,
    #[error("rating matrix row {0} has a different length")]
    Ragged(usize),
    #[error("rating {value} at row {row} is outside the 1..=7 scale or not finite")]
    OutOfScale { row: usize, value: f64 },
    #[error("standard deviation needs at least two ratings")]
    TooFewRatings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceCount {
    pub n: u64,
    pub count_a: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatResult {
    pub statistic: f64,
    pub df: u32,
    pub p_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingSummary {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

/// Rows are participants, columns are conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct RatingMatrix {
    rows: Vec<Vec<f64>>,
}

impl RatingMatrix {
    /// Any rectangular matrix of finite values, at least 2 × 2.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, StatsError> {
        if rows.len() < 2 || rows[0].len() < 2 {
            return Err(StatsError::TooSmall);
        }
        let k = rows[0].len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(StatsError::Ragged(i));
            }
            if let Some(&value) = row.iter().find(|v| !v.is_finite()) {
                return Err(StatsError::OutOfScale { row: i, value });
            }
        }
        Ok(RatingMatrix { rows })
    }

    /// A 7-point Likert matrix: every cell in `[1, 7]`.
    pub fn likert(rows: Vec<Vec<f64>>) -> Result<Self, StatsError> {
        for (i, row) in rows.iter().enumerate() {
            if let Some(&value) = row.iter().find(|v| !(1.0..=7.0).contains(*v)) {
                return Err(StatsError::OutOfScale { row: i, value });
            }
        }
        RatingMatrix::new(rows)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn participants(&self) -> usize {
        self.rows.len()
    }

    pub fn conditions(&self) -> usize {
        self.rows[0].len()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for RatingMatrix {
    type Error = StatsError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self, StatsError> {
        RatingMatrix::likert(rows)
    }
}

impl From<RatingMatrix> for Vec<Vec<f64>> {
    fn from(m: RatingMatrix) -> Self {
        m.rows
    }
}

/// Uncorrected goodness of fit against an even split; reduces to `(2a - n)² / n`.
pub fn chi_square_preference(pc: PreferenceCount) -> Result<StatResult, StatsError> {
    if pc.n == 0 || pc.count_a > pc.n {
        return Err(StatsError::InvalidCount { n: pc.n, count_a: pc.count_a });
    }
    let diff = 2 * pc.count_a as i128 - pc.n as i128;
    let statistic = (diff * diff) as f64 / pc.n as f64;
    Ok(StatResult { statistic, df: 1, p_value: chi_square_sf(statistic, 1.0) })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FriedmanOptions {
    /// Divide by `1 - Σ(t³ - t) / (n k (k² - 1))`. Off by default.
    pub tie_correction: bool,
}

/// Average ranks within one row, doubled so they stay integral.
fn doubled_ranks(row: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
    let mut doubled = vec![0; row.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && row[order[end]] == row[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end share rank (start + 1 + end) / 2
        for &idx in &order[start..end] {
            doubled[idx] = (start + 1 + end) as u64;
        }
        start = end;
    }
    doubled
}

pub fn friedman_test(m: &RatingMatrix) -> StatResult {
    friedman_test_with(m, FriedmanOptions::default())
}

/// `12n / (k(k+1)) · Σ_j (R̄_j − (k+1)/2)²`, evaluated as the exact integer
/// ratio `3 Σ D_j² / (n k (k+1))` with `D_j = 2 S_j − n (k+1)`.
pub fn friedman_test_with(m: &RatingMatrix, options: FriedmanOptions) -> StatResult {
    let n = m.participants() as i128;
    let k = m.conditions() as i128;
    let mut doubled_sums = vec![0i128; m.conditions()];
    let mut tie_term = 0i128;
    for row in m.rows() {
        for (sum, rank) in doubled_sums.iter_mut().zip(doubled_ranks(row)) {
            *sum += rank as i128;
        }
        if options.tie_correction {
            let mut sorted = row.clone();
            sorted.sort_by(f64::total_cmp);
            for run in sorted.chunk_by(|a, b| a == b) {
                let t = run.len() as i128;
                tie_term += t * t * t - t;
            }
        }
    }
    let sum_sq: i128 = doubled_sums.iter().map(|s| (s - n * (k + 1)).pow(2)).sum();
    let mut statistic = (3 * sum_sq) as f64 / (n * k * (k + 1)) as f64;
    if options.tie_correction {
        let denom = n * k * (k * k - 1);
        let correction = 1.0 - tie_term as f64 / denom as f64;
        statistic = if correction > 0.0 { statistic / correction } else { 0.0 };
    }
    let df = (k - 1) as u32;
    StatResult { statistic, df, p_value: chi_square_sf(statistic, df as f64) }
}

/// Mean and sample standard deviation (n − 1 denominator).
pub fn summarize_ratings(column: &[f64]) -> Result<RatingSummary, StatsError> {
    if column.len() < 2 {
        return Err(StatsError::TooFewRatings);
    }
    let n = column.len() as f64;
    let mean = column.iter().sum::<f64>() / n;
    let ss: f64 = column.iter().map(|x| (x - mean).powi(2)).sum();
    Ok(RatingSummary { mean, sd: (ss / (n - 1.0)).sqrt(), n: column.len() })
}

/// Upper tail of the chi-square distribution, `Q(df/2, x/2)`.
pub fn chi_square_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    regularized_gamma_q(df / 2.0, x / 2.0).clamp(0.0, 1.0)
}

const EPS: f64 = 1e-16;
const MAX_ITER: usize = 10_000;

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7, n = 9.
    const COEF: [f64; 9] = [
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
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized upper incomplete gamma: series for `x < a + 1`, Lentz
/// continued fraction otherwise.
fn regularized_gamma_q(a: f64, x: f64) -> f64 {
    if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_continued_fraction(a, x)
    }
}

fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut denom = a;
    for _ in 0..MAX_ITER {
        denom += 1.0;
        term *= x / denom;
        sum += term;
        if term.abs() < sum.abs() * EPS {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

fn gamma_q_continued_fraction(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
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
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}
