//! t-SNE: perplexity-calibrated Gaussian affinities in feature space, a
//! Student-t kernel in the plane, and momentum gradient descent on
//! KL(P || Q). `Exact` mode is O(n²) per iteration; `BarnesHut` uses
//! nearest-neighbour affinities and a quadtree for the repulsive term.

use std::io::Write;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureMatrix;
use crate::error::{Error, Result};
use crate::stats::stream_rng;

const ENTROPY_TOL: f64 = 1e-7;
const MAX_BISECTION_STEPS: usize = 200;
const MIN_GAIN: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TsneMode {
    Exact,
    BarnesHut { theta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    pub kl_every: usize,
    pub seed: u64,
    pub mode: TsneMode,
    /// Scale every input row to unit norm before computing affinities.
    pub normalize_input: bool,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            kl_every: 50,
            seed: 0,
            mode: TsneMode::Exact,
            normalize_input: false,
        }
    }
}

impl TsneConfig {
    fn validate(&self, n: usize) -> Result<()> {
        let positive = [
            ("perplexity", self.perplexity),
            ("learning rate", self.learning_rate),
            ("early exaggeration", self.early_exaggeration),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.iterations == 0 || self.kl_every == 0 {
            return Err(Error::invalid("iterations and kl_every must be positive"));
        }
        if let TsneMode::BarnesHut { theta } = self.mode {
            if !(theta > 0.0 && theta < 1.0) {
                return Err(Error::invalid("theta must lie in (0, 1)"));
            }
        }
        check_perplexity(self.perplexity, n)
    }
}

fn check_perplexity(perplexity: f64, n: usize) -> Result<()> {
    if perplexity.is_nan() || perplexity <= 0.0 || 3.0 * perplexity >= n as f64 {
        return Err(Error::invalid(format!(
            "perplexity {perplexity} must be positive and below n/3 = {:.3}",
            n as f64 / 3.0
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlCheckpoint {
    pub iteration: usize,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding2D {
    pub coords: Vec<[f64; 2]>,
    pub kl_trace: Vec<KlCheckpoint>,
    pub config: TsneConfig,
}

impl Embedding2D {
    pub fn write_csv<W: Write>(&self, item_ids: &[String], writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["item_id", "x", "y"])?;
        for (id, c) in item_ids.iter().zip(&self.coords) {
            wtr.write_record([id.clone(), c[0].to_string(), c[1].to_string()])?;
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fills `out` with the conditional distribution for squared distances
/// `dist` whose entropy is `log2(perplexity)` bits. Returns the precision
/// `beta = 1 / (2 sigma²)`.
fn calibrate_row(dist: &[f64], perplexity: f64, out: &mut [f64]) -> f64 {
    let target = perplexity.log2();
    let min = dist.iter().copied().fold(f64::INFINITY, f64::min);
    let mean_shift = dist.iter().map(|d| d - min).sum::<f64>() / dist.len() as f64;
    let mut beta = if mean_shift > 0.0 {
        1.0 / mean_shift
    } else {
        1.0
    };
    let (mut lo, mut hi) = (0.0, f64::INFINITY);

    let fill = |beta: f64, out: &mut [f64]| -> f64 {
        let mut z = 0.0;
        let mut weighted = 0.0;
        for (o, &d) in out.iter_mut().zip(dist) {
            let shifted = d - min;
            *o = (-beta * shifted).exp();
            z += *o;
            weighted += shifted * *o;
        }
        out.iter_mut().for_each(|o| *o /= z);
        (z.ln() + beta * weighted / z) / std::f64::consts::LN_2
    };

    for _ in 0..MAX_BISECTION_STEPS {
        let h = fill(beta, out);
        if (h - target).abs() < ENTROPY_TOL {
            return beta;
        }
        if h > target {
            lo = beta;
            beta = if hi.is_infinite() {
                beta * 2.0
            } else {
                (beta + hi) / 2.0
            };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
    fill(beta, out);
    beta
}

/// Row-major `n x n` conditional affinities `p_{j|i}` (rows sum to one,
/// zero diagonal) for row-major `data` of `n` points in `d` dimensions.
pub fn conditional_affinities(data: &[f64], d: usize, perplexity: f64) -> Result<Vec<f64>> {
    let n = data.len().checked_div(d).unwrap_or(0);
    if n < 4 {
        return Err(Error::SampleTooSmall { needed: 4, got: n });
    }
    check_perplexity(perplexity, n)?;
    if all_identical(data, d) {
        return Err(Error::DegenerateInput);
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &data[i * d..(i + 1) * d];
            let dist: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| sq_dist(xi, &data[j * d..(j + 1) * d]))
                .collect();
            let mut p = vec![0.0; n - 1];
            calibrate_row(&dist, perplexity, &mut p);
            let mut row = vec![0.0; n];
            for (k, j) in (0..n).filter(|&j| j != i).enumerate() {
                row[j] = p[k];
            }
            row
        })
        .collect();
    Ok(rows.concat())
}

fn all_identical(data: &[f64], d: usize) -> bool {
    data.chunks(d).all(|row| row == &data[..d])
}

/// Symmetric joint affinities `(P + Pᵀ) / (2n)`, summing to one.
pub fn input_affinities(fm: &FeatureMatrix, perplexity: f64) -> Result<Vec<f64>> {
    affinities_from_points(&fm.to_f64(), fm.cols(), perplexity)
}

pub fn affinities_from_points(data: &[f64], d: usize, perplexity: f64) -> Result<Vec<f64>> {
    let cond = conditional_affinities(data, d, perplexity)?;
    let n = data.len() / d;
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64);
        }
    }
    Ok(p)
}

fn student_kernel(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    1.0 / (1.0 + dx * dx + dy * dy)
}

/// Normalizer `Z = Σ_{i≠j} (1 + |y_i - y_j|²)⁻¹`, summed row by row in order.
fn kernel_normalizer(y: &[[f64; 2]]) -> f64 {
    let row_sums: Vec<f64> = (0..y.len())
        .into_par_iter()
        .map(|i| {
            (0..y.len())
                .filter(|&j| j != i)
                .map(|j| student_kernel(y[i], y[j]))
                .sum()
        })
        .collect();
    row_sums.iter().sum()
}

/// KL(P || Q) for dense joint affinities `p` and embedding `y`.
pub fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let n = y.len();
    let z = kernel_normalizer(y);
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .filter(|&j| j != i && p[i * n + j] > 0.0)
                .map(|j| {
                    let pij = p[i * n + j];
                    let q = (student_kernel(y[i], y[j]) / z).max(f64::MIN_POSITIVE);
                    pij * (pij / q).ln()
                })
                .sum()
        })
        .collect();
    rows.iter().sum::<f64>().max(0.0)
}

/// Exact gradient of KL(exaggeration·P || Q) with respect to `y`.
pub fn kl_gradient(p: &[f64], y: &[[f64; 2]], exaggeration: f64) -> Vec<[f64; 2]> {
    let n = y.len();
    let z = kernel_normalizer(y);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut g = [0.0; 2];
            for j in 0..n {
                if j == i {
                    continue;
                }
                let num = student_kernel(y[i], y[j]);
                let mult = (exaggeration * p[i * n + j] - num / z) * num;
                g[0] += mult * (y[i][0] - y[j][0]);
                g[1] += mult * (y[i][1] - y[j][1]);
            }
            [4.0 * g[0], 4.0 * g[1]]
        })
        .collect()
}

/// Sparse symmetric affinities in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAffinities {
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl SparseAffinities {
    fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[span.clone()]
            .iter()
            .copied()
            .zip(self.vals[span].iter().copied())
    }
}

/// Affinities restricted to each point's `floor(3·perplexity)` nearest
/// neighbours, then symmetrized.
pub fn sparse_affinities(data: &[f64], d: usize, perplexity: f64) -> Result<SparseAffinities> {
    let n = data.len().checked_div(d).unwrap_or(0);
    if n < 4 {
        return Err(Error::SampleTooSmall { needed: 4, got: n });
    }
    check_perplexity(perplexity, n)?;
    if all_identical(data, d) {
        return Err(Error::DegenerateInput);
    }
    let k = ((3.0 * perplexity) as usize).clamp(1, n - 1);
    let neighbours: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &data[i * d..(i + 1) * d];
            let mut dist: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, sq_dist(xi, &data[j * d..(j + 1) * d])))
                .collect();
            let by_dist =
                |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
            if k < dist.len() {
                dist.select_nth_unstable_by(k - 1, by_dist);
                dist.truncate(k);
            }
            dist.sort_by(by_dist);
            let sq: Vec<f64> = dist.iter().map(|e| e.1).collect();
            let mut p = vec![0.0; k];
            calibrate_row(&sq, perplexity, &mut p);
            dist.iter().zip(p).map(|(e, p)| (e.0, p)).collect()
        })
        .collect();

    let mut triples: Vec<(usize, usize, f64)> = Vec::with_capacity(2 * n * k);
    for (i, row) in neighbours.iter().enumerate() {
        for &(j, p) in row {
            triples.push((i, j, p));
            triples.push((j, i, p));
        }
    }
    triples.sort_by_key(|t| (t.0, t.1));
    let scale = 1.0 / (2.0 * n as f64);
    let mut row_ptr = vec![0usize; n + 1];
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    let mut t = 0;
    while t < triples.len() {
        let (i, j, mut p) = triples[t];
        t += 1;
        while t < triples.len() && (triples[t].0, triples[t].1) == (i, j) {
            p += triples[t].2;
            t += 1;
        }
        cols.push(j);
        vals.push(p * scale);
        row_ptr[i + 1] = cols.len();
    }
    for i in 1..=n {
        row_ptr[i] = row_ptr[i].max(row_ptr[i - 1]);
    }
    Ok(SparseAffinities {
        row_ptr,
        cols,
        vals,
    })
}

const MAX_TREE_DEPTH: usize = 48;

#[derive(Debug)]
struct QuadNode {
    center: [f64; 2],
    half: f64,
    mass_center: [f64; 2],
    count: usize,
    /// Index of the first of four consecutive children, if split.
    children: Option<usize>,
    /// Points held by a leaf.
    points: Vec<usize>,
}

#[derive(Debug)]
struct QuadTree {
    nodes: Vec<QuadNode>,
}

impl QuadTree {
    fn build(y: &[[f64; 2]]) -> QuadTree {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in y {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
        let half = ((hi[0] - lo[0]).max(hi[1] - lo[1]) / 2.0 + 1e-5) * 1.0001;
        let mut tree = QuadTree { nodes: Vec::new() };
        tree.nodes.push(QuadNode::new(center, half));
        let all: Vec<usize> = (0..y.len()).collect();
        tree.fill(0, all, y, 0);
        tree
    }

    fn fill(&mut self, node: usize, points: Vec<usize>, y: &[[f64; 2]], depth: usize) {
        let n = points.len();
        let mut com = [0.0; 2];
        for &p in &points {
            com[0] += y[p][0];
            com[1] += y[p][1];
        }
        self.nodes[node].count = n;
        self.nodes[node].mass_center = [com[0] / n as f64, com[1] / n as f64];
        if n <= 1 || depth >= MAX_TREE_DEPTH {
            self.nodes[node].points = points;
            return;
        }
        let (c, h) = (self.nodes[node].center, self.nodes[node].half / 2.0);
        let first = self.nodes.len();
        self.nodes[node].children = Some(first);
        let mut quadrants: [Vec<usize>; 4] = Default::default();
        for p in points {
            let q = usize::from(y[p][0] >= c[0]) + 2 * usize::from(y[p][1] >= c[1]);
            quadrants[q].push(p);
        }
        for q in 0..4 {
            let cx = if q & 1 == 1 { c[0] + h } else { c[0] - h };
            let cy = if q & 2 == 2 { c[1] + h } else { c[1] - h };
            self.nodes.push(QuadNode::new([cx, cy], h));
        }
        for (q, pts) in quadrants.into_iter().enumerate() {
            if !pts.is_empty() {
                self.fill(first + q, pts, y, depth + 1);
            }
        }
    }

    /// Repulsive force numerator and kernel mass on point `i`.
    fn repulsion(&self, i: usize, y: &[[f64; 2]], theta: f64) -> ([f64; 2], f64) {
        let yi = y[i];
        let mut force = [0.0; 2];
        let mut z = 0.0;
        let mut stack = vec![0usize];
        while let Some(idx) = stack.pop() {
            let node = &self.nodes[idx];
            if node.count == 0 {
                continue;
            }
            match node.children {
                None => {
                    for &j in &node.points {
                        if j == i {
                            continue;
                        }
                        let q = student_kernel(yi, y[j]);
                        z += q;
                        force[0] += q * q * (yi[0] - y[j][0]);
                        force[1] += q * q * (yi[1] - y[j][1]);
                    }
                }
                Some(first) => {
                    let dx = yi[0] - node.mass_center[0];
                    let dy = yi[1] - node.mass_center[1];
                    let dist2 = dx * dx + dy * dy;
                    let width = 2.0 * node.half;
                    if width * width < theta * theta * dist2 {
                        let q = 1.0 / (1.0 + dist2);
                        let m = node.count as f64;
                        z += m * q;
                        force[0] += m * q * q * dx;
                        force[1] += m * q * q * dy;
                    } else {
                        stack.extend((first..first + 4).rev());
                    }
                }
            }
        }
        (force, z)
    }
}

impl QuadNode {
    fn new(center: [f64; 2], half: f64) -> QuadNode {
        QuadNode {
            center,
            half,
            mass_center: [0.0; 2],
            count: 0,
            children: None,
            points: Vec::new(),
        }
    }
}

/// Barnes–Hut gradient and the tree estimate of `Z`.
fn bh_gradient(
    p: &SparseAffinities,
    y: &[[f64; 2]],
    exaggeration: f64,
    theta: f64,
) -> (Vec<[f64; 2]>, f64) {
    let tree = QuadTree::build(y);
    let rep: Vec<([f64; 2], f64)> = (0..y.len())
        .into_par_iter()
        .map(|i| tree.repulsion(i, y, theta))
        .collect();
    let z: f64 = rep.iter().map(|r| r.1).sum();
    let grad = (0..y.len())
        .into_par_iter()
        .map(|i| {
            let mut attr = [0.0; 2];
            for (j, pij) in p.row(i) {
                let num = student_kernel(y[i], y[j]);
                let m = exaggeration * pij * num;
                attr[0] += m * (y[i][0] - y[j][0]);
                attr[1] += m * (y[i][1] - y[j][1]);
            }
            let f = rep[i].0;
            [4.0 * (attr[0] - f[0] / z), 4.0 * (attr[1] - f[1] / z)]
        })
        .collect();
    (grad, z)
}

/// KL over the sparse affinities, with the tree estimate of `Z`.
fn bh_kl(p: &SparseAffinities, y: &[[f64; 2]], theta: f64) -> f64 {
    let tree = QuadTree::build(y);
    let z: f64 = (0..y.len())
        .into_par_iter()
        .map(|i| tree.repulsion(i, y, theta).1)
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    let rows: Vec<f64> = (0..y.len())
        .into_par_iter()
        .map(|i| {
            p.row(i)
                .filter(|&(_, pij)| pij > 0.0)
                .map(|(j, pij)| {
                    let q = (student_kernel(y[i], y[j]) / z).max(f64::MIN_POSITIVE);
                    pij * (pij / q).ln()
                })
                .sum()
        })
        .collect();
    rows.iter().sum::<f64>().max(0.0)
}

enum Affinities {
    Dense(Vec<f64>),
    Sparse(SparseAffinities, f64),
}

impl Affinities {
    fn gradient(&self, y: &[[f64; 2]], exaggeration: f64) -> Vec<[f64; 2]> {
        match self {
            Affinities::Dense(p) => kl_gradient(p, y, exaggeration),
            Affinities::Sparse(p, theta) => bh_gradient(p, y, exaggeration, *theta).0,
        }
    }

    fn kl(&self, y: &[[f64; 2]]) -> f64 {
        match self {
            Affinities::Dense(p) => kl_divergence(p, y),
            Affinities::Sparse(p, theta) => bh_kl(p, y, *theta),
        }
    }
}

fn recenter(y: &mut [[f64; 2]]) {
    let n = y.len() as f64;
    let mean = y.iter().fold([0.0; 2], |m, p| [m[0] + p[0], m[1] + p[1]]);
    let mean = [mean[0] / n, mean[1] / n];
    for p in y.iter_mut() {
        p[0] -= mean[0];
        p[1] -= mean[1];
    }
}

/// Embeds the rows of `fm` in the plane.
pub fn embed(fm: &FeatureMatrix, cfg: &TsneConfig) -> Result<Embedding2D> {
    let fm = if cfg.normalize_input {
        fm.unit_normalized()
    } else {
        fm.clone()
    };
    embed_points(&fm.to_f64(), fm.cols(), cfg)
}

/// Embeds `data.len() / d` row-major points. Fewer than four points get
/// uniform affinities since no perplexity is feasible for them.
pub fn embed_points(data: &[f64], d: usize, cfg: &TsneConfig) -> Result<Embedding2D> {
    let n = data.len().checked_div(d).unwrap_or(0);
    if n < 2 {
        return Err(Error::SampleTooSmall { needed: 2, got: n });
    }
    let affinities = if n < 4 {
        let mut p = vec![1.0 / (n * (n - 1)) as f64; n * n];
        (0..n).for_each(|i| p[i * n + i] = 0.0);
        Affinities::Dense(p)
    } else {
        cfg.validate(n)?;
        match cfg.mode {
            TsneMode::Exact => Affinities::Dense(affinities_from_points(data, d, cfg.perplexity)?),
            TsneMode::BarnesHut { theta } => {
                Affinities::Sparse(sparse_affinities(data, d, cfg.perplexity)?, theta)
            }
        }
    };

    let mut rng = stream_rng(cfg.seed, 0);
    let init = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [init.sample(&mut rng), init.sample(&mut rng)])
        .collect();
    recenter(&mut y);
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut kl_trace = Vec::new();

    for it in 0..cfg.iterations {
        let exaggeration = if it < cfg.exaggeration_iterations {
            cfg.early_exaggeration
        } else {
            1.0
        };
        let momentum = if it < cfg.momentum_switch {
            cfg.initial_momentum
        } else {
            cfg.final_momentum
        };
        let grad = affinities.gradient(&y, exaggeration);
        for i in 0..n {
            for k in 0..2 {
                let g = grad[i][k];
                let gain = &mut gains[i][k];
                *gain = if (g > 0.0) != (velocity[i][k] > 0.0) {
                    *gain + 0.2
                } else {
                    *gain * 0.8
                };
                *gain = (*gain).max(MIN_GAIN);
                velocity[i][k] = momentum * velocity[i][k] - cfg.learning_rate * *gain * g;
                y[i][k] += velocity[i][k];
            }
        }
        recenter(&mut y);
        if y.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::NumericalBlowup { iteration: it + 1 });
        }
        if (it + 1) % cfg.kl_every == 0 || it + 1 == cfg.iterations {
            kl_trace.push(KlCheckpoint {
                iteration: it + 1,
                kl: affinities.kl(&y),
            });
        }
    }
    Ok(Embedding2D {
        coords: y,
        kl_trace,
        config: *cfg,
    })
}
