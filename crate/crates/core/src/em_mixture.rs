//! Mixture EM: responsibilities in the log domain, accumulated M-step
//! statistics, the driver loop and hard assignment.
//!
//! The E-step walks the series in fixed contiguous chunks. Each chunk filters
//! every series under every cluster, turns the per-cluster log-likelihoods
//! into responsibilities, smooths, and folds the weighted moments into
//! chunk-local accumulators. Chunk results are merged in ascending chunk
//! order, so a fit is bit-identical for any worker count.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::accumulator::SufficientStatsAccumulator;
use crate::error::{Error, Result};
use crate::init::init_random;
use crate::kalman::{kalman_filter, log_marginal, rts_smooth, SmoothedStats};
use crate::model::{param_delta, Dataset, FitOptions, FitReport, MixtureModel, ParamBlock, TraceEntry};
use crate::rng::derive_seed;
use crate::scalar::{lit, to_f64, Real};
use crate::selection::abic;

/// Series per E-step work item. Fixed so that the reduction tree does not
/// depend on the number of workers.
pub const CHUNK_SIZE: usize = 4;

const PI_FLOOR: f64 = 1e-300;
const EMPTY_CLUSTER_FRACTION: f64 = 1e-8;
/// Responsibilities below this are left out of the sufficient statistics
/// (and the smoother pass is skipped). Their contribution is far below the
/// rounding error of the sums they would be added to.
pub const NEGLIGIBLE_RESPONSIBILITY: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Responsibilities<T: Real> {
    /// `log p(Y^i | θ_l) + log π_l`, `N × M`.
    pub log_weights: DMatrix<T>,
    /// Row-wise softmax of `log_weights`.
    pub probs: DMatrix<T>,
    /// `log Σ_l exp(log_weights[i, l])`.
    pub per_series_loglik: Vec<T>,
}

impl<T: Real> Responsibilities<T> {
    /// Builds responsibilities from a matrix of unnormalized log weights.
    pub fn from_log_weights(log_weights: DMatrix<T>) -> Self {
        let (n, m) = log_weights.shape();
        let mut probs = DMatrix::zeros(n, m);
        let mut per_series_loglik = Vec::with_capacity(n);
        for i in 0..n {
            let row: Vec<T> = log_weights.row(i).iter().copied().collect();
            let (p, lse) = softmax(&row);
            for l in 0..m {
                probs[(i, l)] = p[l];
            }
            per_series_loglik.push(lse);
        }
        Self { log_weights, probs, per_series_loglik }
    }

    /// `Σ_i log Σ_l π_l p(Y^i | θ_l)`, summed in series order.
    pub fn total_loglik(&self) -> T {
        self.per_series_loglik.iter().fold(T::zero(), |a, &b| a + b)
    }
}

/// Softmax via max-subtraction; returns the probabilities and the
/// log-sum-exp of the input.
fn softmax<T: Real>(log_w: &[T]) -> (Vec<T>, T) {
    let max = log_w.iter().copied().fold(T::min_value().unwrap(), |a, b| if b > a { b } else { a });
    let exps: Vec<T> = log_w.iter().map(|&v| (v - max).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |a, &b| a + b);
    (exps.iter().map(|&e| e / sum).collect(), max + sum.ln())
}

fn log_pi<T: Real>(model: &MixtureModel<T>) -> Vec<T> {
    let floor = lit::<T>(PI_FLOOR);
    model.pi.iter().map(|&p| if p > floor { p.ln() } else { floor.ln() }).collect()
}

fn annotate(series: usize, cluster: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::InCluster { series, cluster, source: Box::new(e) }
}

/// Posterior cluster probabilities of every series under `model`.
///
/// Rows are evaluated in parallel on the current rayon pool; each row is
/// independent, so the result does not depend on the pool size.
pub fn responsibilities<T: Real>(dataset: &Dataset<T>, model: &MixtureModel<T>) -> Result<Responsibilities<T>> {
    let log_pi = log_pi(model);
    let rows: Vec<Vec<T>> = dataset
        .series()
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            model
                .clusters
                .iter()
                .enumerate()
                .map(|(l, theta)| log_marginal(s, theta).map(|ll| ll + log_pi[l]).map_err(annotate(i, l)))
                .collect::<Result<Vec<T>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let m = model.n_clusters();
    let log_weights = DMatrix::from_fn(rows.len(), m, |i, l| rows[i][l]);
    Ok(Responsibilities::from_log_weights(log_weights))
}

/// Row-wise argmax of the responsibilities; ties go to the lowest index.
pub fn assign_clusters<T: Real>(resp: &Responsibilities<T>) -> Vec<usize> {
    resp.probs
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for l in 1..row.len() {
                if row[l] > row[best] {
                    best = l;
                }
            }
            best
        })
        .collect()
}

/// Output of one E-step: responsibilities plus merged per-cluster sums.
pub struct Expectation<T: Real> {
    pub responsibilities: Responsibilities<T>,
    pub accumulators: Vec<SufficientStatsAccumulator<T>>,
}

struct ChunkOutput<T: Real> {
    log_weights: Vec<Vec<T>>,
    accumulators: Vec<SufficientStatsAccumulator<T>>,
}

fn expect_chunk<T: Real>(
    offset: usize,
    chunk: &[crate::model::TimeSeriesSample<T>],
    model: &MixtureModel<T>,
    log_pi: &[T],
) -> Result<ChunkOutput<T>> {
    let m = model.n_clusters();
    let mut accumulators = vec![SufficientStatsAccumulator::new(model.latent_dim, model.obs_dim); m];
    let mut log_weights = Vec::with_capacity(chunk.len());
    for (j, series) in chunk.iter().enumerate() {
        let i = offset + j;
        let filtered = model
            .clusters
            .iter()
            .enumerate()
            .map(|(l, theta)| kalman_filter(series, theta).map_err(annotate(i, l)))
            .collect::<Result<Vec<_>>>()?;
        let row: Vec<T> = filtered.iter().zip(log_pi).map(|(f, &lp)| f.loglik + lp).collect();
        let (probs, _) = softmax(&row);
        for (l, f) in filtered.into_iter().enumerate() {
            if probs[l] < lit(NEGLIGIBLE_RESPONSIBILITY) {
                continue;
            }
            let stats = rts_smooth(series, &model.clusters[l], f).map_err(annotate(i, l))?;
            accumulators[l].add(series, &stats, probs[l]);
        }
        log_weights.push(row);
    }
    Ok(ChunkOutput { log_weights, accumulators })
}

/// Responsibilities and accumulated sufficient statistics under `model`,
/// evaluated on the current rayon pool.
pub fn expectation<T: Real>(dataset: &Dataset<T>, model: &MixtureModel<T>) -> Result<Expectation<T>> {
    let log_pi = log_pi(model);
    let chunks = dataset
        .series()
        .par_chunks(CHUNK_SIZE)
        .enumerate()
        .map(|(c, chunk)| expect_chunk(c * CHUNK_SIZE, chunk, model, &log_pi))
        .collect::<Result<Vec<_>>>()?;
    let m = model.n_clusters();
    let mut accumulators = vec![SufficientStatsAccumulator::new(model.latent_dim, model.obs_dim); m];
    let mut rows = Vec::with_capacity(dataset.len());
    for chunk in chunks {
        for (acc, part) in accumulators.iter_mut().zip(&chunk.accumulators) {
            acc.merge(part);
        }
        rows.extend(chunk.log_weights);
    }
    let log_weights = DMatrix::from_fn(rows.len(), m, |i, l| rows[i][l]);
    Ok(Expectation { responsibilities: Responsibilities::from_log_weights(log_weights), accumulators })
}

/// Result of one mixture M-step.
#[derive(Clone, Debug)]
pub struct MStepOutcome<T: Real> {
    pub model: MixtureModel<T>,
    /// Clusters whose total responsibility fell below `1e-8 · N` and were
    /// re-drawn.
    pub reseeded: Vec<usize>,
}

/// Mixture M-step from merged accumulators.
///
/// `π_l = (1/N) Σ_i π̃_{l|Y^i}`; cluster parameters are the weighted
/// single-model maximizers. Blocks listed in `options.fixed_params` are
/// carried over from `prev`. Empty clusters are re-drawn with the random
/// initializer seeded from `reseed`, given weight `1/M`, and `π` is
/// renormalized.
pub fn mixture_mstep<T: Real>(
    prev: &MixtureModel<T>,
    accumulators: &[SufficientStatsAccumulator<T>],
    n_series: usize,
    options: &FitOptions,
    reseed: u64,
) -> Result<MStepOutcome<T>> {
    let m = prev.n_clusters();
    let n_t: T = lit(n_series as f64);
    let threshold: T = lit(EMPTY_CLUSTER_FRACTION * n_series as f64);
    let fixed = |b: ParamBlock| options.is_fixed(b);
    let mut clusters = Vec::with_capacity(m);
    let mut pi = Vec::with_capacity(m);
    let mut reseeded = Vec::new();
    for (l, acc) in accumulators.iter().enumerate() {
        if acc.weight < threshold {
            let fresh = init_random::<T>(1, prev.latent_dim, prev.obs_dim, derive_seed(reseed, &[l as u64]))
                .clusters
                .remove(0);
            let theta = crate::model::LgssmParams {
                mu: if fixed(ParamBlock::Mu) { prev.clusters[l].mu.clone() } else { fresh.mu },
                a: if fixed(ParamBlock::A) { prev.clusters[l].a.clone() } else { fresh.a },
                c: if fixed(ParamBlock::C) { prev.clusters[l].c.clone() } else { fresh.c },
                gamma: if fixed(ParamBlock::Gamma) { prev.clusters[l].gamma.clone() } else { fresh.gamma },
                sigma: if fixed(ParamBlock::Sigma) { prev.clusters[l].sigma.clone() } else { fresh.sigma },
                p: if fixed(ParamBlock::P) { prev.clusters[l].p.clone() } else { fresh.p },
            };
            clusters.push(theta);
            pi.push(T::one() / lit(m as f64));
            reseeded.push(l);
        } else {
            clusters.push(acc.maximize(&prev.clusters[l], fixed)?);
            pi.push(acc.weight / n_t);
        }
    }
    if options.is_fixed(ParamBlock::Pi) {
        pi = prev.pi.clone();
    } else if !reseeded.is_empty() {
        let total = pi.iter().fold(T::zero(), |a, &b| a + b);
        for p in &mut pi {
            *p /= total;
        }
    }
    let model = MixtureModel { clusters, pi, latent_dim: prev.latent_dim, obs_dim: prev.obs_dim };
    Ok(MStepOutcome { model, reseeded })
}

/// Accumulates explicit per-(series, cluster) smoothed statistics with the
/// given responsibilities, then applies [`mixture_mstep`].
pub fn mixture_mstep_from_stats<T: Real>(
    dataset: &Dataset<T>,
    resp: &Responsibilities<T>,
    stats: &[Vec<SmoothedStats<T>>],
    prev: &MixtureModel<T>,
    options: &FitOptions,
) -> Result<MixtureModel<T>> {
    let m = prev.n_clusters();
    let mut accs = vec![SufficientStatsAccumulator::new(prev.latent_dim, prev.obs_dim); m];
    for (i, series) in dataset.series().iter().enumerate() {
        for (l, acc) in accs.iter_mut().enumerate() {
            acc.add(series, &stats[i][l], resp.probs[(i, l)]);
        }
    }
    Ok(mixture_mstep(prev, &accs, dataset.len(), options, options.seed)?.model)
}

fn model_is_finite<T: Real>(model: &MixtureModel<T>) -> bool {
    model.clusters.iter().all(|c| c.is_finite()) && model.pi.iter().all(|p| p.is_finite())
}

/// Runs mixture EM from `model0` until the parameter change drops below
/// `options.tol` or `options.max_iter` iterations have run.
pub fn fit_mixture<T: Real>(
    dataset: &Dataset<T>,
    model0: &MixtureModel<T>,
    options: &FitOptions,
) -> Result<FitReport<T>> {
    options.validate()?;
    model0.validate()?;
    if model0.obs_dim != dataset.obs_dim() {
        return Err(Error::ShapeMismatch(format!(
            "model observes {} dimensions, data has {}",
            model0.obs_dim,
            dataset.obs_dim()
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.threads)
        .build()
        .map_err(|e| Error::InvalidOption(e.to_string()))?;
    pool.install(|| run_em(dataset, model0, options))
}

fn run_em<T: Real>(dataset: &Dataset<T>, model0: &MixtureModel<T>, options: &FitOptions) -> Result<FitReport<T>> {
    let mut current = model0.clone();
    let mut evaluated: Option<(MixtureModel<T>, Responsibilities<T>)> = None;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut aborted = false;

    for iteration in 1..=options.max_iter {
        let e = match expectation(dataset, &current) {
            Ok(e) if e.responsibilities.total_loglik().is_finite() => e,
            Ok(_) if evaluated.is_some() => {
                aborted = true;
                break;
            }
            Ok(_) => return Err(Error::NonFiniteState { k: 0 }),
            Err(err) if evaluated.is_none() => return Err(err),
            Err(err) => {
                log::warn!("iteration {iteration}: E-step failed, keeping previous iterate: {err}");
                aborted = true;
                break;
            }
        };
        let loglik = to_f64(e.responsibilities.total_loglik());
        let step = mixture_mstep(
            &current,
            &e.accumulators,
            dataset.len(),
            options,
            derive_seed(options.seed, &[0x5eed, iteration as u64]),
        );
        evaluated = Some((current.clone(), e.responsibilities));
        let step = match step {
            Ok(s) if model_is_finite(&s.model) => s,
            Ok(_) => {
                aborted = true;
                break;
            }
            Err(err) => {
                log::warn!("iteration {iteration}: M-step failed, keeping previous iterate: {err}");
                aborted = true;
                break;
            }
        };
        let delta = to_f64(param_delta(&step.model, &current)?);
        let warnings = step.reseeded.iter().map(|l| format!("cluster {l} emptied and was re-drawn")).collect();
        trace.push(TraceEntry { iteration, loglik, param_delta: delta, warnings });
        current = step.model;
        if delta < options.tol {
            converged = true;
            break;
        }
    }

    let (model, resp) = if aborted {
        evaluated.expect("at least one evaluated iterate")
    } else {
        match responsibilities(dataset, &current) {
            Ok(r) if r.total_loglik().is_finite() => (current, r),
            _ => {
                aborted = true;
                match evaluated {
                    Some(ev) => ev,
                    None => return Err(Error::NonFiniteState { k: 0 }),
                }
            }
        }
    };
    if aborted {
        converged = false;
    }
    let loglik = to_f64(resp.total_loglik());
    let assignments = assign_clusters(&resp);
    let abic = abic(loglik, model.n_clusters(), model.latent_dim, model.obs_dim, dataset.len());
    Ok(FitReport { model, responsibilities: resp.probs, assignments, trace, loglik, abic, converged })
}
