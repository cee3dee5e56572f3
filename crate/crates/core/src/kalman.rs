//! Kalman filtering, Rauch–Tung–Striebel smoothing and the marginal
//! likelihood of one series under one parameter set, with per-step
//! matrices `A_k = Id + Δ_k A`, `Γ_k = Δ_k Γ`, `Σ_k = Σ / Δ_k`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{factor_spd, is_finite_matrix, is_finite_vector, log_det, outer, symmetrize};
use crate::model::{LgssmParams, TimeSeriesSample};
use crate::scalar::{lit, Real};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Per-step by-products of the measurement update.
#[derive(Clone, Debug)]
pub struct KalmanStep<T: Real> {
    /// `K_k`, `d × n`.
    pub gain: DMatrix<T>,
    /// `ν_k = y_k − C x̂_{k|k−1}`.
    pub innovation: DVector<T>,
    /// `S_k = C P_{k|k−1} Cᵀ + Σ_k`.
    pub innovation_cov: DMatrix<T>,
    /// `log N(y_k; C x̂_{k|k−1}, S_k)`.
    pub log_density: T,
}

/// Forward pass output. Index `k` is 0-based.
#[derive(Clone, Debug)]
pub struct FilterOutput<T: Real> {
    pub x_pred: Vec<DVector<T>>,
    pub p_pred: Vec<DMatrix<T>>,
    pub x_filt: Vec<DVector<T>>,
    pub p_filt: Vec<DMatrix<T>>,
    pub steps: Vec<KalmanStep<T>>,
    pub loglik: T,
}

/// Filter and smoother outputs plus the second moments used by the M-step.
#[derive(Clone, Debug)]
pub struct SmoothedStats<T: Real> {
    pub x_pred: Vec<DVector<T>>,
    pub p_pred: Vec<DMatrix<T>>,
    pub x_filt: Vec<DVector<T>>,
    pub p_filt: Vec<DMatrix<T>>,
    pub x_smooth: Vec<DVector<T>>,
    pub p_smooth: Vec<DMatrix<T>>,
    /// Smoother gains `J_k` for `k = 0..T−1`.
    pub gains: Vec<DMatrix<T>>,
    /// `Ω_k = P_{k|T} + x̂_{k|T} x̂_{k|T}ᵀ`.
    pub omega: Vec<DMatrix<T>>,
    /// `omega_cross[k − 1] = E[x_k x_{k−1}ᵀ | Y]` for `k = 1..T`.
    pub omega_cross: Vec<DMatrix<T>>,
    pub loglik: T,
}

impl<T: Real> SmoothedStats<T> {
    pub fn len(&self) -> usize {
        self.x_smooth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_smooth.is_empty()
    }
}

struct Predicted<T: Real> {
    x: DVector<T>,
    p: DMatrix<T>,
}

struct Updated<T: Real> {
    x: DVector<T>,
    p: DMatrix<T>,
    step: KalmanStep<T>,
}

fn predict<T: Real>(theta: &LgssmParams<T>, delta: T, x: &DVector<T>, p: &DMatrix<T>) -> Predicted<T> {
    // (Id + ΔA) P (Id + ΔA)ᵀ expanded so that small steps do not round
    // the identity against ΔA.
    let ap = &theta.a * p;
    let apa = &ap * theta.a.transpose();
    let d = p.nrows();
    let delta2 = delta * delta;
    let p_next = DMatrix::from_fn(d, d, |i, j| {
        let upper = p[(i, j)] + delta * (ap[(i, j)] + ap[(j, i)] + theta.gamma[(i, j)]) + delta2 * apa[(i, j)];
        let lower = p[(j, i)] + delta * (ap[(j, i)] + ap[(i, j)] + theta.gamma[(j, i)]) + delta2 * apa[(j, i)];
        (upper + lower) * lit(0.5)
    });
    let mut x_next = &theta.a * x;
    x_next *= delta;
    x_next += x;
    Predicted { x: x_next, p: p_next }
}

fn update<T: Real>(
    theta: &LgssmParams<T>,
    delta: T,
    y: &DVector<T>,
    pred: &Predicted<T>,
    k: usize,
) -> Result<Updated<T>> {
    let n = theta.obs_dim();
    let cp = &theta.c * &pred.p;
    let mut s = &cp * theta.c.transpose() + theta.observation_noise(delta);
    symmetrize(&mut s);
    let ch = factor_spd(&s).ok_or(Error::SingularInnovation { k: k + 1 })?;
    let innovation = y - &theta.c * &pred.x;
    // K = P Cᵀ S⁻¹, obtained as the transpose of S⁻¹ (C P).
    let gain = ch.solve(&cp).transpose();
    let x = &pred.x + &gain * &innovation;
    let mut p = &pred.p - &gain * &cp;
    symmetrize(&mut p);
    if !is_finite_vector(&x) || !is_finite_matrix(&p) {
        return Err(Error::NonFiniteState { k: k + 1 });
    }
    let mahalanobis = ch.solve(&innovation).dot(&innovation);
    let log_density = -(lit::<T>(n as f64 * LN_2PI) + log_det(&ch) + mahalanobis) * lit(0.5);
    Ok(Updated { x, p, step: KalmanStep { gain, innovation, innovation_cov: s, log_density } })
}

/// Runs the forward recursion from `x̂_{1|0} = μ`, `P_{1|0} = P`.
pub fn kalman_filter<T: Real>(series: &TimeSeriesSample<T>, theta: &LgssmParams<T>) -> Result<FilterOutput<T>> {
    let len = series.len();
    let mut out = FilterOutput {
        x_pred: Vec::with_capacity(len),
        p_pred: Vec::with_capacity(len),
        x_filt: Vec::with_capacity(len),
        p_filt: Vec::with_capacity(len),
        steps: Vec::with_capacity(len),
        loglik: T::zero(),
    };
    for k in 0..len {
        let delta = series.delta(k);
        let pred = if k == 0 {
            Predicted { x: theta.mu.clone(), p: theta.p.clone() }
        } else {
            predict(theta, delta, &out.x_filt[k - 1], &out.p_filt[k - 1])
        };
        let upd = update(theta, delta, &series.observation(k), &pred, k)?;
        out.loglik += upd.step.log_density;
        out.x_pred.push(pred.x);
        out.p_pred.push(pred.p);
        out.x_filt.push(upd.x);
        out.p_filt.push(upd.p);
        out.steps.push(upd.step);
    }
    if !out.loglik.is_finite() {
        return Err(Error::NonFiniteState { k: len });
    }
    Ok(out)
}

/// `log p(Y | θ)` from the prediction-error decomposition, without keeping
/// the per-step states.
pub fn log_marginal<T: Real>(series: &TimeSeriesSample<T>, theta: &LgssmParams<T>) -> Result<T> {
    let mut x = theta.mu.clone();
    let mut p = theta.p.clone();
    let mut loglik = T::zero();
    for k in 0..series.len() {
        let delta = series.delta(k);
        let pred = if k == 0 {
            Predicted { x: x.clone(), p: p.clone() }
        } else {
            predict(theta, delta, &x, &p)
        };
        let upd = update(theta, delta, &series.observation(k), &pred, k)?;
        loglik += upd.step.log_density;
        x = upd.x;
        p = upd.p;
    }
    if !loglik.is_finite() {
        return Err(Error::NonFiniteState { k: series.len() });
    }
    Ok(loglik)
}

/// Backward RTS pass over a completed forward pass on the same inputs.
pub fn rts_smooth<T: Real>(
    series: &TimeSeriesSample<T>,
    theta: &LgssmParams<T>,
    filtered: FilterOutput<T>,
) -> Result<SmoothedStats<T>> {
    let len = filtered.x_filt.len();
    let d = theta.latent_dim();
    let mut x_smooth = filtered.x_filt.clone();
    let mut p_smooth = filtered.p_filt.clone();
    let mut gains = vec![DMatrix::zeros(d, d); len.saturating_sub(1)];
    for k in (0..len.saturating_sub(1)).rev() {
        let a_next = theta.transition(series.delta(k + 1));
        let ch = factor_spd(&filtered.p_pred[k + 1]).ok_or(Error::SingularPrediction { k: k + 1 })?;
        // J_k = P_{k|k} A_{k+1}ᵀ P_{k+1|k}⁻¹; both covariances are symmetric.
        let j = ch.solve(&(&a_next * &filtered.p_filt[k])).transpose();
        let x = &filtered.x_filt[k] + &j * (&x_smooth[k + 1] - &filtered.x_pred[k + 1]);
        let mut p = &filtered.p_filt[k] + &j * (&p_smooth[k + 1] - &filtered.p_pred[k + 1]) * j.transpose();
        symmetrize(&mut p);
        if !is_finite_vector(&x) || !is_finite_matrix(&p) {
            return Err(Error::NonFiniteState { k: k + 1 });
        }
        x_smooth[k] = x;
        p_smooth[k] = p;
        gains[k] = j;
    }
    let omega: Vec<DMatrix<T>> = x_smooth
        .iter()
        .zip(&p_smooth)
        .map(|(x, p)| p + outer(x, x))
        .collect();
    let omega_cross: Vec<DMatrix<T>> = (1..len)
        .map(|k| &p_smooth[k] * gains[k - 1].transpose() + outer(&x_smooth[k], &x_smooth[k - 1]))
        .collect();
    Ok(SmoothedStats {
        x_pred: filtered.x_pred,
        p_pred: filtered.p_pred,
        x_filt: filtered.x_filt,
        p_filt: filtered.p_filt,
        x_smooth,
        p_smooth,
        gains,
        omega,
        omega_cross,
        loglik: filtered.loglik,
    })
}

/// Forward and backward pass in one call.
pub fn smooth<T: Real>(series: &TimeSeriesSample<T>, theta: &LgssmParams<T>) -> Result<SmoothedStats<T>> {
    let filtered = kalman_filter(series, theta)?;
    rts_smooth(series, theta, filtered)
}
