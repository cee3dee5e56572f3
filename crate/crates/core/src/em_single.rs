//! EM for a single state space model on a single series.

use crate::accumulator::SufficientStatsAccumulator;
use crate::error::Result;
use crate::kalman::{smooth, SmoothedStats};
use crate::model::{LgssmParams, TimeSeriesSample};
use crate::scalar::{to_f64, Real};

#[derive(Clone, Debug)]
pub struct SingleFitResult<T: Real> {
    pub theta: LgssmParams<T>,
    /// `log p(Y | θ)` at the returned parameters.
    pub loglik: T,
    pub iterations: usize,
    pub converged: bool,
    /// `log p(Y | θ^{(s)})` for every parameter set that entered an E-step.
    pub loglik_trace: Vec<f64>,
}

/// Filter + smoother under `theta`.
pub fn single_estep<T: Real>(series: &TimeSeriesSample<T>, theta: &LgssmParams<T>) -> Result<SmoothedStats<T>> {
    smooth(series, theta)
}

/// Closed-form maximizer of the expected complete-data log-likelihood.
pub fn single_mstep<T: Real>(
    series: &TimeSeriesSample<T>,
    stats: &SmoothedStats<T>,
    prev: &LgssmParams<T>,
) -> Result<LgssmParams<T>> {
    let mut acc = SufficientStatsAccumulator::new(prev.latent_dim(), prev.obs_dim());
    acc.add(series, stats, T::one());
    acc.maximize(prev, |_| false)
}

fn single_delta<T: Real>(a: &LgssmParams<T>, b: &LgssmParams<T>) -> T {
    a.entries().zip(b.entries()).fold(T::zero(), |acc, (u, v)| acc + (u - v).abs())
}

/// Alternates E- and M-steps until the summed absolute parameter change
/// drops below `tol` or `max_iter` updates have been made.
///
/// A failing or non-finite iterate stops the run and returns the last finite
/// parameters with `converged = false`; an error is returned only when the
/// starting point itself cannot be evaluated.
pub fn fit_single<T: Real>(
    series: &TimeSeriesSample<T>,
    theta0: &LgssmParams<T>,
    tol: f64,
    max_iter: usize,
) -> Result<SingleFitResult<T>> {
    let mut theta = theta0.clone();
    let mut stats = single_estep(series, &theta)?;
    let mut trace = vec![to_f64(stats.loglik)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        let next = match single_mstep(series, &stats, &theta) {
            Ok(next) if next.is_finite() => next,
            _ => break,
        };
        let next_stats = match single_estep(series, &next) {
            Ok(s) => s,
            Err(_) => break,
        };
        iterations += 1;
        let delta = to_f64(single_delta(&next, &theta));
        theta = next;
        stats = next_stats;
        trace.push(to_f64(stats.loglik));
        if delta < tol {
            converged = true;
            break;
        }
    }
    Ok(SingleFitResult { loglik: stats.loglik, theta, iterations, converged, loglik_trace: trace })
}
