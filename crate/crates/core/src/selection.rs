//! Model selection (ABIC over an `(M, d)` grid) and external evaluation
//! against reference labels.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::em_mixture::fit_mixture;
use crate::error::{Error, Result};
use crate::init::{init_identity, init_kmeans, init_random};
use crate::model::{Dataset, FitOptions, InitMethod, MixtureModel};
use crate::rng::derive_seed;
use crate::scalar::Real;

/// Free parameters of an `M`-cluster model: per cluster `μ`, `A`, `C` and
/// the three symmetric covariances, plus `M − 1` weights.
pub fn free_param_count(m: usize, d: usize, n: usize) -> usize {
    let per_cluster = d + d * d + n * d + d * (d + 1) / 2 + d * (d + 1) / 2 + n * (n + 1) / 2;
    m * per_cluster + (m - 1)
}

/// `−2 log L + p log((N + 2) / 24)`. Lower is better.
pub fn abic(loglik: f64, m: usize, d: usize, n: usize, n_series: usize) -> f64 {
    let p = free_param_count(m, d, n) as f64;
    -2.0 * loglik + p * ((n_series as f64 + 2.0) / 24.0).ln()
}

/// Confusion matrix `C[true][pred]`.
pub fn confusion_matrix(truth: &[usize], predicted: &[usize], m: usize) -> Result<Vec<Vec<usize>>> {
    if truth.len() != predicted.len() {
        return Err(Error::ShapeMismatch("label vectors differ in length".into()));
    }
    let mut c = vec![vec![0usize; m]; m];
    for (&t, &p) in truth.iter().zip(predicted) {
        for label in [t, p] {
            if label >= m {
                return Err(Error::LabelOutOfRange { label, clusters: m });
            }
        }
        c[t][p] += 1;
    }
    Ok(c)
}

/// Matched count of `perm` against the confusion matrix.
pub fn trace_of(c: &[Vec<usize>], perm: &[usize]) -> usize {
    perm.iter().enumerate().map(|(t, &p)| c[t][p]).sum()
}

/// Exhaustive search over all `M!` label permutations. Returns the first
/// maximizer in lexicographic order.
pub fn max_trace_bruteforce(c: &[Vec<usize>]) -> Vec<usize> {
    fn recurse(c: &[Vec<usize>], perm: &mut Vec<usize>, used: &mut [bool], best: &mut (usize, Vec<usize>)) {
        let m = c.len();
        if perm.len() == m {
            let tr = trace_of(c, perm);
            if tr > best.0 || best.1.is_empty() {
                *best = (tr, perm.clone());
            }
            return;
        }
        for p in 0..m {
            if !used[p] {
                used[p] = true;
                perm.push(p);
                recurse(c, perm, used, best);
                perm.pop();
                used[p] = false;
            }
        }
    }
    let mut best = (0, Vec::new());
    recurse(c, &mut Vec::new(), &mut vec![false; c.len()], &mut best);
    best.1
}

/// Hungarian algorithm (shortest augmenting paths with potentials) for the
/// permutation maximizing the confusion trace.
pub fn max_trace_hungarian(c: &[Vec<usize>]) -> Vec<usize> {
    let m = c.len();
    if m == 0 {
        return Vec::new();
    }
    let top = c.iter().flatten().copied().max().unwrap_or(0) as i64;
    let cost = |i: usize, j: usize| top - c[i - 1][j - 1] as i64;
    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0i64; m + 1];
    let mut v = vec![0i64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=m {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![i64::MAX; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = i64::MAX;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; m];
    for j in 1..=m {
        perm[owner[j] - 1] = j - 1;
    }
    perm
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Similarity {
    /// Matched fraction: maximal confusion trace over `N`.
    pub similarity: f64,
    /// `permutation[t]` is the predicted label matched to true label `t`.
    pub permutation: Vec<usize>,
    /// Confusion matrix with columns reordered by `permutation`.
    pub confusion: Vec<Vec<usize>>,
}

/// Fraction of series on the diagonal of the confusion matrix after the
/// trace-maximizing relabeling of predicted clusters.
pub fn cluster_similarity(truth: &[usize], predicted: &[usize], m: usize) -> Result<Similarity> {
    let c = confusion_matrix(truth, predicted, m)?;
    let permutation = if m <= 8 { max_trace_bruteforce(&c) } else { max_trace_hungarian(&c) };
    let matched = trace_of(&c, &permutation);
    let confusion = c.iter().map(|row| permutation.iter().map(|&p| row[p]).collect()).collect();
    let n = truth.len().max(1) as f64;
    Ok(Similarity { similarity: matched as f64 / n, permutation, confusion })
}

/// One fit of the grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridRow {
    #[serde(rename = "M")]
    pub m: usize,
    pub d: usize,
    pub repeat: usize,
    pub seed: u64,
    pub abic: Option<f64>,
    pub loglik: Option<f64>,
    pub similarity: Option<f64>,
    pub converged: bool,
    #[serde(skip)]
    pub error: Option<String>,
}

/// Aggregate over the repeats of one `(M, d)` cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSummary {
    #[serde(rename = "M")]
    pub m: usize,
    pub d: usize,
    pub fits: usize,
    pub mean_abic: Option<f64>,
    pub sd_abic: Option<f64>,
    pub mean_similarity: Option<f64>,
    pub sd_similarity: Option<f64>,
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    pub cells: Vec<CellSummary>,
    /// Index into `cells` of the lowest mean ABIC.
    pub best: Option<usize>,
}

impl GridResult {
    pub fn best_cell(&self) -> Option<&CellSummary> {
        self.best.map(|i| &self.cells[i])
    }

    /// Writes the per-fit rows as CSV with header
    /// `M,d,repeat,seed,abic,loglik,similarity,converged`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["M", "d", "repeat", "seed", "abic", "loglik", "similarity", "converged"])
            .map_err(io)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.m.to_string(),
                r.d.to_string(),
                r.repeat.to_string(),
                r.seed.to_string(),
                opt(r.abic),
                opt(r.loglik),
                opt(r.similarity),
                r.converged.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean and sample standard deviation.
pub fn mean_sd(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, sd))
}

/// Builds the starting model requested by `options.init`.
pub fn initial_model<T: Real>(dataset: &Dataset<T>, m: usize, d: usize, options: &FitOptions) -> Result<MixtureModel<T>> {
    let n = dataset.obs_dim();
    match options.init {
        InitMethod::Identity => Ok(init_identity(m, d, n)),
        InitMethod::Random => Ok(init_random(m, d, n, options.seed)),
        InitMethod::Kmeans => {
            init_kmeans(dataset, m, d, options.kmeans_restarts, options.seed, options.tol, options.max_iter)
        }
    }
}

/// Seed of repeat `repeat` in cell `(m, d)`.
pub fn cell_seed(base: u64, m: usize, d: usize, repeat: usize) -> u64 {
    derive_seed(base, &[m as u64, d as u64, repeat as u64])
}

fn summarize(rows: &[GridRow], m: usize, d: usize) -> CellSummary {
    let cell: Vec<&GridRow> = rows.iter().filter(|r| r.m == m && r.d == d).collect();
    let abics: Vec<f64> = cell.iter().filter_map(|r| r.abic).collect();
    let sims: Vec<f64> = cell.iter().filter_map(|r| r.similarity).collect();
    let a = mean_sd(&abics);
    let s = mean_sd(&sims);
    CellSummary {
        m,
        d,
        fits: abics.len(),
        mean_abic: a.map(|x| x.0),
        sd_abic: a.map(|x| x.1),
        mean_similarity: s.map(|x| x.0),
        sd_similarity: s.map(|x| x.1),
        failed: abics.is_empty(),
    }
}

/// Fits every `(M, d, repeat)` combination and ranks cells by mean ABIC.
///
/// Cells run in parallel on `options.threads` workers, each fit single
/// threaded; rows come back in `(M, d, repeat)` order. A failed fit yields
/// a row without ABIC; a cell where every repeat failed is marked failed.
pub fn grid_select<T: Real>(
    dataset: &Dataset<T>,
    clusters: &[usize],
    latent_dims: &[usize],
    repeats: usize,
    options: &FitOptions,
    labels: Option<&[usize]>,
) -> Result<GridResult> {
    if clusters.is_empty() || latent_dims.is_empty() || repeats == 0 {
        return Err(Error::InvalidOption("grid needs at least one M, one d and one repeat".into()));
    }
    options.validate()?;
    let jobs: Vec<(usize, usize, usize)> = clusters
        .iter()
        .flat_map(|&m| latent_dims.iter().flat_map(move |&d| (0..repeats).map(move |r| (m, d, r))))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.threads)
        .build()
        .map_err(|e| Error::InvalidOption(e.to_string()))?;
    let rows: Vec<GridRow> = pool.install(|| {
        jobs.par_iter()
            .map(|&(m, d, repeat)| {
                let seed = cell_seed(options.seed, m, d, repeat);
                let opts = FitOptions { seed, threads: 1, ..options.clone() };
                let outcome = initial_model(dataset, m, d, &opts).and_then(|m0| fit_mixture(dataset, &m0, &opts));
                match outcome {
                    Ok(report) => {
                        let similarity = labels
                            .and_then(|l| cluster_similarity(l, &report.assignments, m.max(max_label(l) + 1)).ok())
                            .map(|s| s.similarity);
                        GridRow {
                            m,
                            d,
                            repeat,
                            seed,
                            abic: Some(report.abic),
                            loglik: Some(report.loglik),
                            similarity,
                            converged: report.converged,
                            error: None,
                        }
                    }
                    Err(e) => {
                        log::warn!("fit M={m} d={d} repeat={repeat} failed: {e}");
                        GridRow {
                            m,
                            d,
                            repeat,
                            seed,
                            abic: None,
                            loglik: None,
                            similarity: None,
                            converged: false,
                            error: Some(e.to_string()),
                        }
                    }
                }
            })
            .collect()
    });
    let cells: Vec<CellSummary> = clusters
        .iter()
        .flat_map(|&m| latent_dims.iter().map(move |&d| (m, d)))
        .map(|(m, d)| summarize(&rows, m, d))
        .collect();
    let best = cells
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.mean_abic.map(|a| (i, a)))
        .fold(None, |best: Option<(usize, f64)>, (i, a)| match best {
            Some((_, b)) if b <= a => best,
            _ => Some((i, a)),
        })
        .map(|(i, _)| i);
    Ok(GridResult { rows, cells, best })
}

fn max_label(labels: &[usize]) -> usize {
    labels.iter().copied().max().unwrap_or(0)
}
