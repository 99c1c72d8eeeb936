//! K-means over sequence embeddings and elbow selection of the cluster count.
//!
//! The fitted [`KMeansModel`] is the sequence-level router: a sequence goes to
//! the expert group whose index equals its nearest centroid.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{MoceError, Result};
use crate::rng::mix64;

const FILE_MAGIC: &str = "MOCE-KMEANS";
const FILE_VERSION: &str = "v1";

pub const DEFAULT_MAX_ITERS: usize = 100;
pub const ELBOW_RESTARTS: usize = 3;
pub const DEFAULT_N_INIT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub max_iters: usize,
    /// Stop early once one iteration lowers SSE by less than this. `0.0` disables the check.
    pub tol: f64,
    /// Independent k-means++ starts per fit; the lowest final SSE is kept.
    pub n_init: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iters: DEFAULT_MAX_ITERS,
            tol: 0.0,
            n_init: DEFAULT_N_INIT,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel {
    centroids: Vec<Vec<f64>>,
    dim: usize,
    seed: u64,
    final_sse: f64,
    iterations_run: usize,
    converged: bool,
    sse_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    labels: Vec<usize>,
    counts: Vec<usize>,
}

impl ClusterAssignment {
    pub fn from_labels(labels: Vec<usize>, k: usize) -> Result<Self> {
        let mut counts = vec![0; k];
        for &l in &labels {
            if l >= k {
                return Err(MoceError::contract(format!(
                    "label {l} out of range for k = {k}"
                )));
            }
            counts[l] += 1;
        }
        Ok(Self { labels, counts })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
fn nearest(centroids: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter().enumerate() {
        let d = dist_sq(p, mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn validate_points<P: AsRef<[f64]>>(points: &[P]) -> Result<usize> {
    let dim = points
        .first()
        .map(|p| p.as_ref().len())
        .ok_or_else(|| MoceError::contract("no points to cluster"))?;
    if dim == 0 {
        return Err(MoceError::shape("points of dimension 0"));
    }
    for (i, p) in points.iter().enumerate() {
        let p = p.as_ref();
        if p.len() != dim {
            return Err(MoceError::shape(format!(
                "point {i} has dimension {}, expected {dim}",
                p.len()
            )));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(MoceError::numeric(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
    }
    Ok(dim)
}

fn kmeans_pp_init<P: AsRef<[f64]>>(points: &[P], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = points.len();
    let mut centroids = vec![points[rng.gen_range(0..n)].as_ref().to_vec()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| dist_sq(p.as_ref(), &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let c = points[pick].as_ref().to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist_sq(p.as_ref(), &c));
        }
        centroids.push(c);
    }
    centroids
}

fn assign<P: AsRef<[f64]>>(points: &[P], centroids: &[Vec<f64>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| nearest(centroids, p.as_ref()).0)
        .collect()
}

fn means<P: AsRef<[f64]>>(points: &[P], labels: &[usize], centroids: &mut [Vec<f64>]) {
    let dim = centroids[0].len();
    let mut sums = vec![vec![0.0; dim]; centroids.len()];
    let mut counts = vec![0usize; centroids.len()];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        sums[l]
            .iter_mut()
            .zip(p.as_ref())
            .for_each(|(s, v)| *s += v);
    }
    for ((c, s), n) in centroids.iter_mut().zip(sums).zip(counts) {
        // an empty cluster keeps its previous centroid
        if n > 0 {
            *c = s.into_iter().map(|v| v / n as f64).collect();
        }
    }
}

/// Gives every empty cluster the point currently farthest from its own centroid.
fn repair_empty<P: AsRef<[f64]>>(
    points: &[P],
    labels: &mut [usize],
    centroids: &mut [Vec<f64>],
) -> Result<bool> {
    let k = centroids.len();
    let mut repaired = false;
    loop {
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return Ok(repaired);
        };
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if counts[labels[i]] < 2 {
                continue;
            }
            let d = dist_sq(p.as_ref(), &centroids[labels[i]]);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        match best {
            Some((i, d)) if d > 0.0 => {
                centroids[empty] = points[i].as_ref().to_vec();
                labels[i] = empty;
                repaired = true;
            }
            _ => {
                return Err(MoceError::Setup(format!(
                    "cluster {empty} is empty and cannot be repaired: fewer distinct points than clusters"
                )))
            }
        }
    }
}

fn total_sse<P: AsRef<[f64]>>(points: &[P], labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| dist_sq(p.as_ref(), &centroids[l]))
        .sum()
}

/// Lloyd's algorithm from `n_init` k-means++ starts, keeping the lowest final SSE.
///
/// Each start iterates assignment and mean updates until the assignment
/// repeats or `max_iters` updates have run. The first start is seeded with
/// `seed` itself. The returned assignment labels every point with its nearest
/// final centroid, and the model's SSE history is that of the kept start.
pub fn kmeans_fit<P: AsRef<[f64]>>(
    points: &[P],
    k: usize,
    seed: u64,
    opts: KMeansOptions,
) -> Result<(KMeansModel, ClusterAssignment)> {
    if k == 0 {
        return Err(MoceError::contract("k must be at least 1"));
    }
    if points.len() < k {
        return Err(MoceError::contract(format!(
            "cannot fit {k} clusters to {} points",
            points.len()
        )));
    }
    if opts.max_iters == 0 || opts.n_init == 0 {
        return Err(MoceError::contract(
            "max_iters and n_init must be at least 1",
        ));
    }
    let dim = validate_points(points)?;
    let mut best: Option<(KMeansModel, ClusterAssignment)> = None;
    for start in 0..opts.n_init {
        let init_seed = if start == 0 {
            seed
        } else {
            mix64(seed.wrapping_add((start as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
        };
        let (mut model, assignment) = lloyd(points, k, init_seed, opts, dim)?;
        model.seed = seed;
        if best
            .as_ref()
            .is_none_or(|b| model.final_sse < b.0.final_sse)
        {
            best = Some((model, assignment));
        }
    }
    Ok(best.expect("at least one start"))
}

fn lloyd<P: AsRef<[f64]>>(
    points: &[P],
    k: usize,
    seed: u64,
    opts: KMeansOptions,
    dim: usize,
) -> Result<(KMeansModel, ClusterAssignment)> {
    let mut centroids = kmeans_pp_init(points, k, seed);
    let mut labels = assign(points, &centroids);
    let mut history = Vec::new();
    let mut converged = false;
    loop {
        repair_empty(points, &mut labels, &mut centroids)?;
        means(points, &labels, &mut centroids);
        let sse = total_sse(points, &labels, &centroids);
        let prev = history.last().copied();
        history.push(sse);
        if history.len() >= opts.max_iters {
            break;
        }
        let next = assign(points, &centroids);
        if next == labels {
            converged = true;
            break;
        }
        if let Some(prev) = prev {
            if opts.tol > 0.0 && prev - sse < opts.tol {
                break;
            }
        }
        labels = next;
    }

    let labels = assign(points, &centroids);
    let final_sse = total_sse(points, &labels, &centroids);
    let assignment = ClusterAssignment::from_labels(labels, k)?;
    let model = KMeansModel {
        centroids,
        dim,
        seed,
        final_sse,
        iterations_run: history.len(),
        converged,
        sse_history: history,
    };
    Ok((model, assignment))
}

/// Best (lowest final SSE) of `restarts` fits with seeds derived from `seed`.
pub fn kmeans_best_of<P: AsRef<[f64]> + Sync>(
    points: &[P],
    k: usize,
    seed: u64,
    restarts: usize,
    opts: KMeansOptions,
) -> Result<(KMeansModel, ClusterAssignment)> {
    let mut best: Option<(KMeansModel, ClusterAssignment)> = None;
    for r in 0..restarts.max(1) {
        let s = if r == 0 { seed } else { mix64(seed ^ r as u64) };
        let fit = kmeans_fit(points, k, s, opts)?;
        if best
            .as_ref()
            .is_none_or(|b| fit.0.final_sse < b.0.final_sse)
        {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

impl KMeansModel {
    /// Builds a model from explicit centroids, e.g. for a single-group run.
    pub fn from_centroids(centroids: Vec<Vec<f64>>, seed: u64) -> Result<Self> {
        let dim = validate_points(&centroids)?;
        Ok(Self {
            centroids,
            dim,
            seed,
            final_sse: 0.0,
            iterations_run: 0,
            converged: true,
            sse_history: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn final_sse(&self) -> f64 {
        self.final_sse
    }

    pub fn iterations_run(&self) -> usize {
        self.iterations_run
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    /// SSE after each mean update of the fit.
    pub fn sse_history(&self) -> &[f64] {
        &self.sse_history
    }

    /// Nearest centroid of `e`; ties go to the lowest index.
    pub fn predict(&self, e: &[f64]) -> Result<usize> {
        if e.len() != self.dim {
            return Err(MoceError::shape(format!(
                "embedding of dimension {} for a model of dimension {}",
                e.len(),
                self.dim
            )));
        }
        Ok(nearest(&self.centroids, e).0)
    }

    pub fn predict_all<P: AsRef<[f64]>>(&self, points: &[P]) -> Result<Vec<usize>> {
        points.iter().map(|p| self.predict(p.as_ref())).collect()
    }

    pub fn to_file_string(&self) -> String {
        let mut out = format!(
            "{FILE_MAGIC} {FILE_VERSION} {} {} {}\n",
            self.k(),
            self.dim,
            self.seed
        );
        for c in &self.centroids {
            let row: Vec<String> = c.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ctx = "k-means model file";
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| MoceError::format(ctx, "missing header"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let [magic, version, k, dim, seed] = fields.as_slice() else {
            return Err(MoceError::format(ctx, format!("bad header {header:?}")));
        };
        if *magic != FILE_MAGIC || *version != FILE_VERSION {
            return Err(MoceError::format(ctx, format!("bad header {header:?}")));
        }
        let parse_usize = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| MoceError::format(ctx, format!("bad {what} {s:?}")))
        };
        let k = parse_usize(k, "k")?;
        let dim = parse_usize(dim, "dimension")?;
        let seed: u64 = seed
            .parse()
            .map_err(|_| MoceError::format(ctx, format!("bad seed {seed:?}")))?;
        let mut centroids = Vec::with_capacity(k);
        for (row, line) in lines.enumerate() {
            let values = line
                .split_whitespace()
                .map(|p| {
                    p.parse::<f64>()
                        .map_err(|_| MoceError::format(ctx, format!("row {row}: bad value {p:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if values.len() != dim {
                return Err(MoceError::format(
                    ctx,
                    format!("row {row}: expected {dim} values, found {}", values.len()),
                ));
            }
            centroids.push(values);
        }
        if centroids.len() != k || k == 0 {
            return Err(MoceError::format(
                ctx,
                format!("header promises {k} centroids, found {}", centroids.len()),
            ));
        }
        Self::from_centroids(centroids, seed)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_file_string()).map_err(|e| MoceError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| MoceError::io(path, e))?;
        Self::parse(&text)
    }
}

/// Sum of squared distances of every point to its assigned centroid.
pub fn sse<P: AsRef<[f64]>>(
    model: &KMeansModel,
    points: &[P],
    assignment: &ClusterAssignment,
) -> Result<f64> {
    if points.len() != assignment.labels().len() {
        return Err(MoceError::shape(format!(
            "{} points but {} labels",
            points.len(),
            assignment.labels().len()
        )));
    }
    if assignment.k() != model.k() {
        return Err(MoceError::shape(format!(
            "assignment has {} clusters, model has {}",
            assignment.k(),
            model.k()
        )));
    }
    for p in points {
        if p.as_ref().len() != model.dim() {
            return Err(MoceError::shape(format!(
                "point of dimension {} for a model of dimension {}",
                p.as_ref().len(),
                model.dim()
            )));
        }
    }
    Ok(total_sse(points, assignment.labels(), model.centroids()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElbowReport {
    /// `sse_curve[k - 1]` is the best SSE found with `k` clusters.
    pub sse_curve: Vec<f64>,
    /// `curvature[k - 1]` is `SSE(k−1) − 2·SSE(k) + SSE(k+1)`; undefined at both ends.
    pub curvature: Vec<Option<f64>>,
    pub selected_k: usize,
    /// False when some `SSE(k+1) > SSE(k)`. The curve is reported as fitted, never reordered.
    pub monotone: bool,
}

impl ElbowReport {
    pub fn k_max(&self) -> usize {
        self.sse_curve.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,sse,curvature\n");
        for (i, (s, c)) in self.sse_curve.iter().zip(&self.curvature).enumerate() {
            let c = c.map(|v| format!("{v:e}")).unwrap_or_default();
            writeln!(out, "{},{s:e},{c}", i + 1).expect("write to string");
        }
        out
    }
}

/// Fits `k = 1..=k_max` and picks the `k` of maximal discrete curvature of the SSE curve.
///
/// Each `k` keeps the best of [`ELBOW_RESTARTS`] seeded fits. Ties in
/// curvature go to the smaller `k`.
pub fn elbow_select<P: AsRef<[f64]> + Sync>(
    points: &[P],
    k_max: usize,
    seed: u64,
) -> Result<ElbowReport> {
    if k_max < 3 {
        return Err(MoceError::contract(format!(
            "elbow needs k_max >= 3, got {k_max}"
        )));
    }
    if points.len() < k_max {
        return Err(MoceError::contract(format!(
            "elbow with k_max = {k_max} needs at least that many points, got {}",
            points.len()
        )));
    }
    validate_points(points)?;
    let sse_curve = (1..=k_max)
        .into_par_iter()
        .map(|k| {
            kmeans_best_of(points, k, seed, ELBOW_RESTARTS, KMeansOptions::default())
                .map(|(m, _)| m.final_sse)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(report_from_curve(sse_curve))
}

/// Curvature scores and selection for an already-computed SSE curve.
pub fn report_from_curve(sse_curve: Vec<f64>) -> ElbowReport {
    let k_max = sse_curve.len();
    let mut curvature = vec![None; k_max];
    let mut selected = (2usize, f64::NEG_INFINITY);
    for k in 2..k_max {
        let s = sse_curve[k - 2] - 2.0 * sse_curve[k - 1] + sse_curve[k];
        curvature[k - 1] = Some(s);
        if s > selected.1 {
            selected = (k, s);
        }
    }
    let monotone = sse_curve.windows(2).all(|w| w[1] <= w[0]);
    if !monotone {
        log::warn!("elbow SSE curve is not non-increasing: {sse_curve:?}");
    }
    ElbowReport {
        sse_curve,
        curvature,
        selected_k: selected.0,
        monotone,
    }
}
