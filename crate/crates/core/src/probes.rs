//! Linear probes: how well image metadata (yaw, pitch band, media type) can be
//! read off the features with a linear model, estimated over repeated random
//! train/test splits.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FeatureMatrix, MediaType};
use crate::error::{Error, Result};
use crate::stats::{mean, sample_sd, split};

/// Training-set size used when enough items are available.
pub const DEFAULT_TRAIN_COUNT: usize = 18_000;
/// Fallback training fraction, 18000 / 24502.
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.7346;
pub const DEFAULT_LAMBDA: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    YawAbsRegression,
    PitchBandBinary,
    MediaTypeBinary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub kind: TargetKind,
    /// Closed pitch interval counted as "centered" (label 0).
    pub pitch_band: [f64; 2],
}

impl TargetSpec {
    pub fn new(kind: TargetKind) -> Self {
        TargetSpec {
            kind,
            pitch_band: [-8.0, 8.0],
        }
    }

    pub fn with_pitch_band(mut self, lower: f64, upper: f64) -> Result<Self> {
        if !(lower < upper) {
            return Err(Error::invalid(format!(
                "pitch band lower bound {lower} must be below upper bound {upper}"
            )));
        }
        self.pitch_band = [lower, upper];
        Ok(self)
    }

    pub fn is_binary(&self) -> bool {
        self.kind != TargetKind::YawAbsRegression
    }

    fn target(&self, rec: &crate::dataset::MetadataRecord) -> Option<f64> {
        match self.kind {
            TargetKind::YawAbsRegression => rec.yaw_deg.map(f64::abs),
            TargetKind::PitchBandBinary => rec.pitch_deg.map(|p| {
                let [lo, hi] = self.pitch_band;
                if (lo..=hi).contains(&p) {
                    0.0
                } else {
                    1.0
                }
            }),
            TargetKind::MediaTypeBinary => rec.media_type.map(|m| match m {
                MediaType::Still => 1.0,
                MediaType::VideoFrame => 0.0,
            }),
        }
    }
}

/// Target values for the usable items, with the matching dataset indices.
pub fn make_target(ds: &Dataset, spec: &TargetSpec) -> (Vec<f64>, Vec<usize>) {
    ds.metadata()
        .iter()
        .enumerate()
        .filter_map(|(i, rec)| spec.target(rec).map(|t| (t, i)))
        .unzip()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearKind {
    LeastSquares,
    LdaBinary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub kind: LinearKind,
    pub ridge_lambda: f64,
}

impl LinearModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + dot(&self.weights, x)
    }

    fn predict_row(&self, x: &[f32]) -> f64 {
        self.intercept
            + self
                .weights
                .iter()
                .zip(x)
                .map(|(w, &v)| w * f64::from(v))
                .sum::<f64>()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rows of `fm` as a dense f64 design matrix.
pub fn design_matrix(fm: &FeatureMatrix, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), fm.cols(), |i, j| fm.value(rows[i], j))
}

fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows() as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

/// Cholesky solve of `a w = rhs`; rejects numerically rank-deficient systems.
fn solve_spd(a: DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = a.diagonal().max();
    let chol = a.cholesky().ok_or(Error::Singular)?;
    let min_pivot = chol
        .l_dirty()
        .diagonal()
        .iter()
        .fold(f64::INFINITY, |m, &v| m.min(v * v));
    if !(scale > 0.0) || min_pivot <= 1e-12 * scale {
        return Err(Error::Singular);
    }
    Ok(chol.solve(rhs))
}

/// Ridge least squares: minimizes `|Xw + b - y|^2 + lambda |w|^2`, intercept
/// unpenalized. Solved through the centered normal equations.
pub fn fit_least_squares(x: &DMatrix<f64>, y: &[f64], ridge_lambda: f64) -> Result<LinearModel> {
    fit_least_squares_owned(x.clone(), y, ridge_lambda)
}

fn fit_least_squares_owned(
    mut x: DMatrix<f64>,
    y: &[f64],
    ridge_lambda: f64,
) -> Result<LinearModel> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::SampleTooSmall { needed: 2, got: n });
    }
    if n != y.len() {
        return Err(Error::invalid(format!("{n} rows but {} targets", y.len())));
    }
    if !(ridge_lambda >= 0.0) {
        return Err(Error::invalid("ridge lambda must be non-negative"));
    }
    let mu = column_means(&x);
    for (j, mut col) in x.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mu[j]);
    }
    let y_mean = mean(y);
    let yc = DMatrix::from_iterator(n, 1, y.iter().map(|v| v - y_mean));

    let xt = x.transpose();
    let mut gram = &xt * &x;
    for j in 0..d {
        gram[(j, j)] += ridge_lambda;
    }
    let rhs = &xt * &yc;
    let w = solve_spd(gram, &rhs)?;
    let weights: Vec<f64> = w.iter().copied().collect();
    let intercept = y_mean - dot(&weights, mu.as_slice());
    Ok(LinearModel {
        weights,
        intercept,
        kind: LinearKind::LeastSquares,
        ridge_lambda,
    })
}

/// Two-class LDA with shrinkage toward `tr(S)/D * I`.
///
/// The score is rescaled so class mean 0 maps to 0 and class mean 1 maps
/// to 1; thresholding at 0.5 splits the means.
pub fn fit_lda_binary(x: &DMatrix<f64>, labels: &[f64], shrinkage: f64) -> Result<LinearModel> {
    let (n, d) = x.shape();
    if n != labels.len() {
        return Err(Error::invalid(format!(
            "{n} rows but {} labels",
            labels.len()
        )));
    }
    let is_one: Vec<bool> = labels.iter().map(|&l| l >= 0.5).collect();
    let n1 = is_one.iter().filter(|&&b| b).count();
    let n0 = n - n1;
    if n0 == 0 || n1 == 0 {
        return Err(Error::SingleClass);
    }
    if n < 3 {
        return Err(Error::SampleTooSmall { needed: 3, got: n });
    }

    let mut mu = [DVector::<f64>::zeros(d), DVector::<f64>::zeros(d)];
    for (row, &one) in x.row_iter().zip(&is_one) {
        mu[one as usize] += row.transpose();
    }
    mu[0] /= n0 as f64;
    mu[1] /= n1 as f64;

    let mut centered = x.clone();
    for (mut row, &one) in centered.row_iter_mut().zip(&is_one) {
        row -= mu[one as usize].transpose();
    }
    let mut cov = centered.transpose() * &centered / (n as f64 - 2.0);
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteCovariance);
    }
    let ridge = shrinkage * cov.trace() / d as f64;
    for j in 0..d {
        cov[(j, j)] += ridge;
    }
    let diff = &mu[1] - &mu[0];
    let w = solve_spd(cov, &DMatrix::from_column_slice(d, 1, diff.as_slice()))?;
    let w = w.column(0).into_owned();

    let separation = diff.dot(&w);
    let (weights, intercept) = if separation > 0.0 && separation.is_finite() {
        let weights = w / separation;
        let intercept = -mu[0].dot(&weights);
        (weights.iter().copied().collect(), intercept)
    } else {
        (vec![0.0; d], 0.5)
    };
    Ok(LinearModel {
        weights,
        intercept,
        kind: LinearKind::LdaBinary,
        ridge_lambda: shrinkage,
    })
}

/// Multi-class LDA over fixed-width target bins; predicts the center of the
/// winning bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedLdaModel {
    pub bin_width: f64,
    pub bin_centers: Vec<f64>,
    /// One discriminant direction per bin.
    pub directions: Vec<Vec<f64>>,
    pub offsets: Vec<f64>,
}

impl BinnedLdaModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.best(|a| dot(a, x))
    }

    fn predict_row(&self, x: &[f32]) -> f64 {
        self.best(|a| a.iter().zip(x).map(|(w, &v)| w * f64::from(v)).sum())
    }

    fn best(&self, score: impl Fn(&[f64]) -> f64) -> f64 {
        let mut best = (f64::NEG_INFINITY, 0);
        for (k, (a, off)) in self.directions.iter().zip(&self.offsets).enumerate() {
            let s = score(a) + off;
            if s > best.0 {
                best = (s, k);
            }
        }
        self.bin_centers[best.1]
    }
}

pub fn fit_binned_lda(
    x: &DMatrix<f64>,
    targets: &[f64],
    bin_width: f64,
    shrinkage: f64,
) -> Result<BinnedLdaModel> {
    let (n, d) = x.shape();
    if !(bin_width > 0.0) {
        return Err(Error::invalid("bin width must be positive"));
    }
    if n != targets.len() {
        return Err(Error::invalid(format!(
            "{n} rows but {} targets",
            targets.len()
        )));
    }
    let bin_of = |t: f64| (t / bin_width).floor().max(0.0) as usize;
    let mut occupied: Vec<usize> = targets.iter().map(|&t| bin_of(t)).collect();
    occupied.sort_unstable();
    occupied.dedup();
    let k = occupied.len();
    if k < 2 {
        return Err(Error::SingleClass);
    }
    if n <= k {
        return Err(Error::SampleTooSmall {
            needed: k + 1,
            got: n,
        });
    }
    let class_of = |t: f64| occupied.binary_search(&bin_of(t)).unwrap();

    let mut mu = DMatrix::<f64>::zeros(d, k);
    let mut counts = vec![0usize; k];
    for (row, &t) in x.row_iter().zip(targets) {
        let c = class_of(t);
        counts[c] += 1;
        let mut col = mu.column_mut(c);
        col += row.transpose();
    }
    for (c, &count) in counts.iter().enumerate() {
        let mut col = mu.column_mut(c);
        col /= count as f64;
    }
    let mut centered = x.clone();
    for (mut row, &t) in centered.row_iter_mut().zip(targets) {
        row -= mu.column(class_of(t)).transpose();
    }
    let mut cov = centered.transpose() * &centered / (n - k) as f64;
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteCovariance);
    }
    let ridge = shrinkage * cov.trace() / d as f64;
    for j in 0..d {
        cov[(j, j)] += ridge;
    }
    let a = solve_spd(cov, &mu)?;

    let mut directions = Vec::with_capacity(k);
    let mut offsets = Vec::with_capacity(k);
    for (c, &count) in counts.iter().enumerate() {
        let dir = a.column(c);
        let prior = count as f64 / n as f64;
        offsets.push(-0.5 * mu.column(c).dot(&dir) + prior.ln());
        directions.push(dir.iter().copied().collect());
    }
    Ok(BinnedLdaModel {
        bin_width,
        bin_centers: occupied
            .iter()
            .map(|&b| (b as f64 + 0.5) * bin_width)
            .collect(),
        directions,
        offsets,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    LeastSquares,
    Lda,
    /// Regression targets only: LDA over bins of `bin_width` degrees.
    BinnedLda {
        bin_width: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum TrainSize {
    Count(usize),
    Fraction(f64),
    /// 18,000 items when more are usable, otherwise the matching fraction.
    Auto,
}

impl TrainSize {
    pub fn resolve(self, usable: usize) -> Result<usize> {
        let k = match self {
            TrainSize::Count(k) => k,
            TrainSize::Fraction(f) => {
                if !(f > 0.0 && f < 1.0) {
                    return Err(Error::invalid(format!("train fraction {f} outside (0, 1)")));
                }
                (f * usable as f64).round() as usize
            }
            TrainSize::Auto if usable > DEFAULT_TRAIN_COUNT => DEFAULT_TRAIN_COUNT,
            TrainSize::Auto => (DEFAULT_TRAIN_FRACTION * usable as f64).round() as usize,
        };
        if k == 0 || k >= usable {
            return Err(Error::SampleTooSmall {
                needed: k.max(1) + 1,
                got: usable,
            });
        }
        Ok(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub train_size: TrainSize,
    pub seed: u64,
    pub model: ModelKind,
    /// Ridge lambda for least squares, shrinkage factor for LDA.
    pub lambda: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            iterations: 20,
            train_size: TrainSize::Auto,
            seed: 0,
            model: ModelKind::LeastSquares,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    MeanAbsErrorDeg,
    PercentCorrect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRunEcho {
    #[serde(flatten)]
    pub config: ProbeConfig,
    pub resolved_train_size: usize,
    pub usable_items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub target: TargetSpec,
    pub metric_kind: MetricKind,
    /// Test-set metric per iteration, in iteration order.
    pub iterations: Vec<f64>,
    /// Same metric on each iteration's training set.
    pub train_iterations: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    pub config: ProbeRunEcho,
}

enum Fitted {
    Linear(LinearModel),
    Binned(BinnedLdaModel),
}

impl Fitted {
    fn predict_row(&self, x: &[f32]) -> f64 {
        match self {
            Fitted::Linear(m) => m.predict_row(x),
            Fitted::Binned(m) => m.predict_row(x),
        }
    }
}

fn fit(x: DMatrix<f64>, y: &[f64], spec: &TargetSpec, cfg: &ProbeConfig) -> Result<Fitted> {
    match cfg.model {
        ModelKind::LeastSquares => fit_least_squares_owned(x, y, cfg.lambda).map(Fitted::Linear),
        ModelKind::Lda if spec.is_binary() => fit_lda_binary(&x, y, cfg.lambda).map(Fitted::Linear),
        ModelKind::BinnedLda { bin_width } if !spec.is_binary() => {
            fit_binned_lda(&x, y, bin_width, cfg.lambda).map(Fitted::Binned)
        }
        ModelKind::Lda => Err(Error::invalid(
            "binary LDA needs a binary target; use binned LDA for yaw",
        )),
        ModelKind::BinnedLda { .. } => Err(Error::invalid("binned LDA applies to the yaw target")),
    }
}

fn metric(model: &Fitted, fm: &FeatureMatrix, rows: &[usize], y: &[f64], binary: bool) -> f64 {
    let n = rows.len() as f64;
    if binary {
        let correct = rows
            .iter()
            .zip(y)
            .filter(|(&r, &t)| {
                let label = if model.predict_row(fm.row(r)) >= 0.5 {
                    1.0
                } else {
                    0.0
                };
                label == t
            })
            .count();
        100.0 * correct as f64 / n
    } else {
        rows.iter()
            .zip(y)
            .map(|(&r, &t)| (model.predict_row(fm.row(r)) - t).abs())
            .sum::<f64>()
            / n
    }
}

/// Repeated split → fit → score. Iterations run in parallel; each draws its
/// split from its own stream so the report is independent of scheduling.
pub fn run_probe(ds: &Dataset, spec: &TargetSpec, cfg: &ProbeConfig) -> Result<ProbeReport> {
    if cfg.iterations == 0 {
        return Err(Error::invalid("at least one iteration is required"));
    }
    let (targets, usable) = make_target(ds, spec);
    let train_size = cfg.train_size.resolve(usable.len())?;
    let binary = spec.is_binary();
    let fm = ds.features();

    let results: Vec<(f64, f64)> = (0..cfg.iterations)
        .into_par_iter()
        .map(|it| {
            let run = || -> Result<(f64, f64)> {
                let plan = split(usable.len(), train_size, cfg.seed, it as u64)?;
                let rows = |idx: &[usize]| idx.iter().map(|&i| usable[i]).collect::<Vec<_>>();
                let ys = |idx: &[usize]| idx.iter().map(|&i| targets[i]).collect::<Vec<_>>();
                let (train_rows, test_rows) = (rows(&plan.train_idx), rows(&plan.test_idx));
                let (train_y, test_y) = (ys(&plan.train_idx), ys(&plan.test_idx));
                let model = fit(design_matrix(fm, &train_rows), &train_y, spec, cfg)?;
                Ok((
                    metric(&model, fm, &test_rows, &test_y, binary),
                    metric(&model, fm, &train_rows, &train_y, binary),
                ))
            };
            run().map_err(|e| e.at_iteration(it))
        })
        .collect::<Result<_>>()?;

    let (iterations, train_iterations): (Vec<f64>, Vec<f64>) = results.into_iter().unzip();
    Ok(ProbeReport {
        target: *spec,
        metric_kind: if binary {
            MetricKind::PercentCorrect
        } else {
            MetricKind::MeanAbsErrorDeg
        },
        mean: mean(&iterations),
        sd: sample_sd(&iterations),
        iterations,
        train_iterations,
        config: ProbeRunEcho {
            config: *cfg,
            resolved_train_size: train_size,
            usable_items: usable.len(),
        },
    })
}
