//! Statistical kernel: two-sample t-tests, the Student t CDF, Bonferroni
//! correction, nearest-rank percentiles and seeded train/test splits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::beta::checked_beta_reg;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TTestKind {
    /// Unequal variances, Welch–Satterthwaite degrees of freedom.
    #[default]
    Welch,
    /// Pooled variance, `n_a + n_b - 2` degrees of freedom.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t_stat: f64,
    pub df: f64,
    /// Two-tailed.
    pub p_value: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    pub n_a: usize,
    pub n_b: usize,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with the `n - 1` denominator.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Sample standard deviation (`n - 1`); zero for fewer than two values.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        0.0
    } else {
        sample_variance(xs).sqrt()
    }
}

pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    t_test(a, b, TTestKind::Welch)
}

pub fn student_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    t_test(a, b, TTestKind::Pooled)
}

/// Two-sample t-test.
///
/// When the standard error is zero the p-value is 1 for equal means and 0 for
/// unequal means, so downstream maps never hold NaN.
pub fn t_test(a: &[f64], b: &[f64], kind: TTestKind) -> Result<TTestResult> {
    for s in [a, b] {
        if s.len() < 2 {
            return Err(Error::SampleTooSmall {
                needed: 2,
                got: s.len(),
            });
        }
    }
    let (n_a, n_b) = (a.len() as f64, b.len() as f64);
    let (mean_a, mean_b) = (mean(a), mean(b));
    let (var_a, var_b) = (sample_variance(a), sample_variance(b));

    let (se2, df) = match kind {
        TTestKind::Welch => {
            let (qa, qb) = (var_a / n_a, var_b / n_b);
            let se2 = qa + qb;
            let denom = qa * qa / (n_a - 1.0) + qb * qb / (n_b - 1.0);
            let df = if denom > 0.0 {
                se2 * se2 / denom
            } else {
                n_a + n_b - 2.0
            };
            (se2, df)
        }
        TTestKind::Pooled => {
            let df = n_a + n_b - 2.0;
            let pooled = ((n_a - 1.0) * var_a + (n_b - 1.0) * var_b) / df;
            (pooled * (1.0 / n_a + 1.0 / n_b), df)
        }
    };

    let diff = mean_a - mean_b;
    let (t_stat, p_value) = if se2 > 0.0 {
        let t = diff / se2.sqrt();
        (t, two_tailed_p(t, df)?)
    } else if diff == 0.0 {
        (0.0, 1.0)
    } else {
        (diff.signum() * f64::INFINITY, 0.0)
    };

    Ok(TTestResult {
        t_stat,
        df,
        p_value,
        mean_a,
        mean_b,
        n_a: a.len(),
        n_b: b.len(),
    })
}

/// `I_x(df/2, 1/2)` with `x = df / (df + t^2)`: the mass of both tails beyond `|t|`.
fn two_tailed_p(t: f64, df: f64) -> Result<f64> {
    if !(df > 0.0) {
        return Err(Error::invalid(format!(
            "degrees of freedom must be positive, got {df}"
        )));
    }
    if t == 0.0 {
        return Ok(1.0);
    }
    if t.is_infinite() {
        return Ok(0.0);
    }
    let x = df / (df + t * t);
    let p = checked_beta_reg(df / 2.0, 0.5, x)
        .map_err(|e| Error::invalid(format!("incomplete beta: {e}")))?;
    Ok(p.clamp(0.0, 1.0))
}

/// CDF of Student's t distribution with `df` degrees of freedom.
pub fn student_t_cdf(t: f64, df: f64) -> Result<f64> {
    let tail = 0.5 * two_tailed_p(t, df)?;
    Ok(if t > 0.0 { 1.0 - tail } else { tail })
}

/// Per-comparison alpha for `m` comparisons.
pub fn bonferroni_alpha(alpha: f64, m: usize) -> f64 {
    assert!(m >= 1, "at least one comparison");
    assert!(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1)");
    alpha / m as f64
}

/// Nearest-rank percentile: the value at 1-based rank `ceil(p/100 * n)`,
/// with `p = 0` giving the minimum.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::SampleTooSmall { needed: 1, got: 0 });
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::invalid(format!("percentile {p} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[nearest_rank(p, sorted.len()).saturating_sub(1)])
}

/// 1-based nearest rank for percentile `p` of `n` values (0 when `p = 0`).
pub(crate) fn nearest_rank(p: f64, n: usize) -> usize {
    ((p / 100.0 * n as f64).ceil() as usize).min(n)
}

/// splitmix64 finalizer; decorrelates consecutive stream ids.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Platform-independent generator for stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ mix64(stream))
}

/// Uniform without-replacement index sample of size `k` from `0..n`, in draw order.
pub(crate) fn sample_indices<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k.min(n) {
        let j = rng.random_range(i as u64..n as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub seed: u64,
    pub iteration: u64,
}

/// Random train/test split of `0..n`; a pure function of `(seed, iteration)`.
/// Both index lists are returned in ascending order.
pub fn split(n: usize, train_size: usize, seed: u64, iteration: u64) -> Result<SplitPlan> {
    if train_size == 0 || train_size >= n {
        return Err(Error::invalid(format!(
            "train size {train_size} must lie strictly between 0 and {n}"
        )));
    }
    let mut rng = stream_rng(seed, iteration);
    let mut train_idx = sample_indices(&mut rng, n, train_size);
    train_idx.sort_unstable();
    let mut in_train = vec![false; n];
    train_idx.iter().for_each(|&i| in_train[i] = true);
    let test_idx = (0..n).filter(|&i| !in_train[i]).collect();
    Ok(SplitPlan {
        train_idx,
        test_idx,
        seed,
        iteration,
    })
}
