//! Weighted running sums of smoothed moments, and the closed-form
//! maximizer of the expected complete-data log-likelihood built on them.
//!
//! One accumulator holds everything the M-step needs for one cluster, so a
//! series' smoothed statistics can be folded in and dropped immediately.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kalman::SmoothedStats;
use crate::linalg::{add_scaled, psd_project, right_solve_spd, symmetric};
use crate::model::{LgssmParams, ParamBlock, TimeSeriesSample};
use crate::scalar::Real;

/// Which second moment enters the quadratic `A_k X A_kᵀ` term of the `Γ`
/// update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransitionQuadratic {
    /// `X = Ω_{k−1}`: the expectation of `(x_k − A_k x_{k−1})(…)ᵀ`.
    PreviousMoment,
    /// `X = Ω_{k,k−1}`, as printed in some statements of the mixture update.
    CrossMoment,
}

pub const GAMMA_QUADRATIC: TransitionQuadratic = TransitionQuadratic::PreviousMoment;

#[derive(Clone, Debug, PartialEq)]
pub struct SufficientStatsAccumulator<T: Real> {
    /// `Σ_i w_i`
    pub weight: T,
    /// `Σ_i w_i T_i`
    pub weight_samples: T,
    /// `Σ_i w_i (T_i − 1)`
    pub weight_transitions: T,
    /// `Σ_i w_i x̂_{1|T}`
    pub first_state: DVector<T>,
    /// `Σ_i w_i Ω_1`
    pub first_moment: DMatrix<T>,
    /// `Σ w (Ω_{k,k−1} − Ω_{k−1})`
    pub drift_num: DMatrix<T>,
    /// `Σ w Δ_k Ω_{k−1}`
    pub drift_den: DMatrix<T>,
    /// `Σ w Ω_{k,k−1}`
    pub cross: DMatrix<T>,
    /// `Σ w / Δ_k (Ω_k − Ω_{k,k−1} − Ω_{k,k−1}ᵀ + X)`
    pub noise_const: DMatrix<T>,
    /// `Σ w X`
    pub noise_lin: DMatrix<T>,
    /// `Σ w Δ_k X`
    pub noise_quad: DMatrix<T>,
    /// `Σ w Δ_k y_k x̂_{k|T}ᵀ`
    pub obs_cross: DMatrix<T>,
    /// `Σ w Δ_k Ω_k`
    pub obs_state: DMatrix<T>,
    /// `Σ w Δ_k y_k y_kᵀ`
    pub obs_outer: DMatrix<T>,
}

impl<T: Real> SufficientStatsAccumulator<T> {
    pub fn new(latent_dim: usize, obs_dim: usize) -> Self {
        let (d, n) = (latent_dim, obs_dim);
        Self {
            weight: T::zero(),
            weight_samples: T::zero(),
            weight_transitions: T::zero(),
            first_state: DVector::zeros(d),
            first_moment: DMatrix::zeros(d, d),
            drift_num: DMatrix::zeros(d, d),
            drift_den: DMatrix::zeros(d, d),
            cross: DMatrix::zeros(d, d),
            noise_const: DMatrix::zeros(d, d),
            noise_lin: DMatrix::zeros(d, d),
            noise_quad: DMatrix::zeros(d, d),
            obs_cross: DMatrix::zeros(n, d),
            obs_state: DMatrix::zeros(d, d),
            obs_outer: DMatrix::zeros(n, n),
        }
    }

    /// Folds one series' smoothed statistics in with weight `w`.
    pub fn add(&mut self, series: &TimeSeriesSample<T>, stats: &SmoothedStats<T>, w: T) {
        let len = series.len();
        let len_t = T::from_usize(len).expect("length fits scalar");
        self.weight += w;
        self.weight_samples += w * len_t;
        self.weight_transitions += w * (len_t - T::one());
        self.first_state.axpy(w, &stats.x_smooth[0], T::one());
        add_scaled(&mut self.first_moment, w, &stats.omega[0]);

        for k in 0..len {
            let delta = series.delta(k);
            let wd = w * delta;
            let y = series.observation(k);
            self.obs_cross.ger(wd, &y, &stats.x_smooth[k], T::one());
            self.obs_outer.ger(wd, &y, &y, T::one());
            add_scaled(&mut self.obs_state, wd, &stats.omega[k]);
            if k == 0 {
                continue;
            }
            let prev = &stats.omega[k - 1];
            let cross = &stats.omega_cross[k - 1];
            let x = match GAMMA_QUADRATIC {
                TransitionQuadratic::PreviousMoment => prev,
                TransitionQuadratic::CrossMoment => cross,
            };
            add_scaled(&mut self.drift_num, w, &(cross - prev));
            add_scaled(&mut self.drift_den, wd, prev);
            add_scaled(&mut self.cross, w, cross);
            let increment = &stats.omega[k] - cross - cross.transpose() + x;
            add_scaled(&mut self.noise_const, w / delta, &increment);
            add_scaled(&mut self.noise_lin, w, x);
            add_scaled(&mut self.noise_quad, wd, x);
        }
    }

    /// Adds another accumulator's sums into this one.
    pub fn merge(&mut self, other: &Self) {
        self.weight += other.weight;
        self.weight_samples += other.weight_samples;
        self.weight_transitions += other.weight_transitions;
        self.first_state += &other.first_state;
        self.first_moment += &other.first_moment;
        self.drift_num += &other.drift_num;
        self.drift_den += &other.drift_den;
        self.cross += &other.cross;
        self.noise_const += &other.noise_const;
        self.noise_lin += &other.noise_lin;
        self.noise_quad += &other.noise_quad;
        self.obs_cross += &other.obs_cross;
        self.obs_state += &other.obs_state;
        self.obs_outer += &other.obs_outer;
    }

    /// Closed-form M-step in the order `μ, A, C, P, Σ, Γ`. `Σ` uses the
    /// updated `C` and `Γ` the updated `A`. Blocks for which `fixed` returns
    /// true are copied from `prev`.
    pub fn maximize(&self, prev: &LgssmParams<T>, fixed: impl Fn(ParamBlock) -> bool) -> Result<LgssmParams<T>> {
        let w = self.weight;
        let mu = if fixed(ParamBlock::Mu) { prev.mu.clone() } else { &self.first_state / w };

        let a = if fixed(ParamBlock::A) {
            prev.a.clone()
        } else {
            right_solve_spd(&self.drift_num, &symmetric(self.drift_den.clone()))
                .ok_or(Error::SingularNormalEquations { block: "A" })?
        };

        let c = if fixed(ParamBlock::C) {
            prev.c.clone()
        } else {
            right_solve_spd(&self.obs_cross, &symmetric(self.obs_state.clone()))
                .ok_or(Error::SingularNormalEquations { block: "C" })?
        };

        let p = if fixed(ParamBlock::P) {
            prev.p.clone()
        } else {
            let mean_first = &self.first_state / w;
            let raw = &self.first_moment / w - &mean_first * mu.transpose() - &mu * mean_first.transpose()
                + &mu * mu.transpose();
            psd_project(raw)
        };

        let sigma = if fixed(ParamBlock::Sigma) {
            prev.sigma.clone()
        } else {
            let ct = c.transpose();
            let raw = &self.obs_outer - &c * self.obs_cross.transpose() - &self.obs_cross * &ct
                + &c * &self.obs_state * &ct;
            psd_project(raw / self.weight_samples)
        };

        let gamma = if fixed(ParamBlock::Gamma) {
            prev.gamma.clone()
        } else {
            let at = a.transpose();
            let raw = &self.noise_const - &self.cross * &at - &a * self.cross.transpose()
                + &a * &self.noise_lin
                + &self.noise_lin * &at
                + &a * &self.noise_quad * &at;
            psd_project(raw / self.weight_transitions)
        };

        Ok(LgssmParams { mu, a, c, gamma, sigma, p })
    }
}
