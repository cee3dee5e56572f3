#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use ssmix::{Dataset, LgssmParams, MixtureModel, TimeSeriesSample};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn spd(k: usize, floor: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(k, k, |_, _| normal(rng));
    &g * g.transpose() / k as f64 + DMatrix::identity(k, k) * floor
}

/// Well-conditioned parameters for oracle comparisons.
pub fn params(d: usize, n: usize, rng: &mut ChaCha8Rng) -> LgssmParams<f64> {
    LgssmParams {
        mu: DVector::from_fn(d, |_, _| normal(rng)),
        a: DMatrix::from_fn(d, d, |_, _| 0.5 * normal(rng)),
        c: DMatrix::from_fn(n, d, |_, _| normal(rng)),
        gamma: spd(d, 0.2, rng),
        sigma: spd(n, 0.2, rng),
        p: spd(d, 0.2, rng),
    }
}

/// Parameters whose drift matrix has eigenvalues with negative real part,
/// so the latent moments stay bounded over long series.
pub fn stable_params(d: usize, n: usize, rng: &mut ChaCha8Rng) -> LgssmParams<f64> {
    let mut theta = params(d, n, rng);
    let skew = DMatrix::from_fn(d, d, |_, _| 0.3 * normal(rng));
    theta.a = -spd(d, 0.3, rng) + (&skew - skew.transpose());
    theta
}

/// Parameters whose unit-step transition `Id + A` has spectral radius in
/// `[0.3, 0.95]`, so fixed-step simulations stay bounded.
pub fn unit_step_stable_params(d: usize, n: usize, rng: &mut ChaCha8Rng) -> LgssmParams<f64> {
    let mut theta = params(d, n, rng);
    let g = DMatrix::from_fn(d, d, |_, _| normal(rng));
    let radius = g.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    let target = rng.gen_range(0.3..0.95);
    theta.a = g * (target / radius) - DMatrix::identity(d, d);
    theta
}

pub fn timestamps(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut t = vec![0.0];
    for _ in 1..len {
        let last = *t.last().unwrap();
        t.push(last + rng.gen_range(0.1..2.0));
    }
    t
}

pub fn series(len: usize, n: usize, rng: &mut ChaCha8Rng) -> TimeSeriesSample<f64> {
    let t = timestamps(len, rng);
    TimeSeriesSample::new("s", t, DMatrix::from_fn(len, n, |_, _| 2.0 * normal(rng)))
}

/// Random model of `m` clusters with weights bounded away from zero.
pub fn mixture(m: usize, d: usize, n: usize, rng: &mut ChaCha8Rng) -> MixtureModel<f64> {
    let clusters = (0..m).map(|_| params(d, n, rng)).collect();
    let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    MixtureModel::new(clusters, raw.iter().map(|w| w / total).collect()).unwrap()
}

/// Samples a dataset from `model`, cycling through clusters.
pub fn sampled_dataset(model: &MixtureModel<f64>, sizes: &[usize], rng: &mut ChaCha8Rng) -> (Dataset<f64>, Vec<usize>) {
    let mut out = Vec::new();
    let mut labels = Vec::new();
    for (l, &count) in sizes.iter().enumerate() {
        for _ in 0..count {
            let len = rng.gen_range(4..10);
            let t = timestamps(len, rng);
            let mut s = ssmix::sample_series(&model.clusters[l], &t, rng.gen()).unwrap();
            s.id = format!("s{}", out.len());
            out.push(s);
            labels.push(l);
        }
    }
    (Dataset::new(out).unwrap(), labels)
}

/// Posterior moments of the latent path from one dense Gaussian
/// conditioning on the stacked observations.
pub struct JointPosterior {
    pub mean: Vec<DVector<f64>>,
    /// `cov[j][k] = Cov(x_j, x_k | y)`.
    pub cov: Vec<Vec<DMatrix<f64>>>,
    pub loglik: f64,
}

fn block(m: &DMatrix<f64>, i: usize, j: usize, r: usize, c: usize) -> DMatrix<f64> {
    m.view((i * r, j * c), (r, c)).into_owned()
}

/// Prior mean and covariance of `(x_1..x_T)` stacked.
fn latent_prior(theta: &LgssmParams<f64>, t: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let d = theta.latent_dim();
    let len = t.len();
    let trans: Vec<DMatrix<f64>> = (0..len)
        .map(|k| if k == 0 { DMatrix::identity(d, d) } else { DMatrix::identity(d, d) + &theta.a * (t[k] - t[k - 1]) })
        .collect();
    let mut means = vec![theta.mu.clone()];
    let mut vars = vec![theta.p.clone()];
    for k in 1..len {
        let dk = t[k] - t[k - 1];
        means.push(&trans[k] * &means[k - 1]);
        vars.push(&trans[k] * &vars[k - 1] * trans[k].transpose() + &theta.gamma * dk);
    }
    let mut cov = DMatrix::zeros(d * len, d * len);
    for j in 0..len {
        // Cov(x_k, x_j) = A_k ... A_{j+1} Var(x_j) for k ≥ j.
        let mut c = vars[j].clone();
        for k in j..len {
            if k > j {
                c = &trans[k] * c;
            }
            cov.view_mut((k * d, j * d), (d, d)).copy_from(&c);
            cov.view_mut((j * d, k * d), (d, d)).copy_from(&c.transpose());
        }
    }
    let mut mean = DVector::zeros(d * len);
    for k in 0..len {
        mean.rows_mut(k * d, d).copy_from(&means[k]);
    }
    (mean, cov)
}

/// Conditions on the first `upto` observations of `series`.
pub fn joint_posterior(series: &TimeSeriesSample<f64>, theta: &LgssmParams<f64>, upto: usize) -> JointPosterior {
    joint_posterior_with_first_noise(series, theta, upto, &theta.sigma)
}

/// As [`joint_posterior`] with an explicit noise covariance for `y_1`.
pub fn joint_posterior_with_first_noise(
    series: &TimeSeriesSample<f64>,
    theta: &LgssmParams<f64>,
    upto: usize,
    first_noise: &DMatrix<f64>,
) -> JointPosterior {
    let d = theta.latent_dim();
    let n = theta.obs_dim();
    let t = &series.timestamps;
    let len = t.len();
    let (mx, sxx) = latent_prior(theta, t);
    let mut h = DMatrix::zeros(n * upto, d * len);
    let mut r = DMatrix::zeros(n * upto, n * upto);
    let mut y = DVector::zeros(n * upto);
    for k in 0..upto {
        let noise = if k == 0 { first_noise.clone() } else { &theta.sigma / (t[k] - t[k - 1]) };
        h.view_mut((k * n, k * d), (n, d)).copy_from(&theta.c);
        r.view_mut((k * n, k * n), (n, n)).copy_from(&noise);
        y.rows_mut(k * n, n).copy_from(&series.observations.row(k).transpose());
    }
    let my = &h * &mx;
    let syy = &h * &sxx * h.transpose() + r;
    let sxy = &sxx * h.transpose();
    let chol = syy.clone().cholesky().expect("observation covariance is SPD");
    let resid = &y - &my;
    let post_mean = &mx + &sxy * chol.solve(&resid);
    let post_cov = &sxx - &sxy * chol.solve(&sxy.transpose());
    let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let loglik = -0.5 * ((n * upto) as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + resid.dot(&chol.solve(&resid)));
    JointPosterior {
        mean: (0..len).map(|k| post_mean.rows(k * d, d).into_owned()).collect(),
        cov: (0..len).map(|j| (0..len).map(|k| block(&post_cov, j, k, d, d)).collect()).collect(),
        loglik,
    }
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

/// `|a − b| ≤ tol · max(1, |b|)` entrywise, with `b` the reference.
pub fn rel_close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    a.shape() == b.shape() && (a - b).iter().zip(b.iter()).all(|(e, r)| e.abs() <= tol * r.abs().max(1.0))
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn worst(errs: &mut f64, a: &DMatrix<f64>, b: &DMatrix<f64>) {
    for (x, r) in a.iter().zip(b.iter()) {
        *errs = errs.max(rel_err(*x, *r));
    }
}

/// Largest relative deviation of the filter, smoother, cross moments and
/// log-likelihood from dense conditioning.
pub fn oracle_mismatch(series: &TimeSeriesSample<f64>, theta: &LgssmParams<f64>) -> f64 {
    let len = series.len();
    let stats = ssmix::smooth(series, theta).unwrap();
    let full = joint_posterior(series, theta, len);
    let mut err = rel_err(stats.loglik, full.loglik);
    let col = |v: &DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    for k in 0..len {
        let filt = joint_posterior(series, theta, k + 1);
        worst(&mut err, &col(&stats.x_filt[k]), &col(&filt.mean[k]));
        worst(&mut err, &stats.p_filt[k], &filt.cov[k][k]);
        if k > 0 {
            let pred = joint_posterior(series, theta, k);
            worst(&mut err, &col(&stats.x_pred[k]), &col(&pred.mean[k]));
            worst(&mut err, &stats.p_pred[k], &pred.cov[k][k]);
            let cross = &full.cov[k][k - 1] + &full.mean[k] * full.mean[k - 1].transpose();
            worst(&mut err, &stats.omega_cross[k - 1], &cross);
        }
        worst(&mut err, &col(&stats.x_smooth[k]), &col(&full.mean[k]));
        worst(&mut err, &stats.p_smooth[k], &full.cov[k][k]);
        let omega = &full.cov[k][k] + &full.mean[k] * full.mean[k].transpose();
        worst(&mut err, &stats.omega[k], &omega);
    }
    err
}

fn logdet(m: &DMatrix<f64>) -> f64 {
    m.clone().cholesky().expect("SPD").l().diagonal().iter().map(|v| 2.0 * v.ln()).sum()
}

fn inv(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().try_inverse().expect("invertible")
}

/// Expected complete-data log-likelihood of `theta` under smoothed moments
/// computed elsewhere, without the additive constants.
pub fn q_function(series: &TimeSeriesSample<f64>, stats: &ssmix::SmoothedStats<f64>, theta: &LgssmParams<f64>) -> f64 {
    let len = series.len();
    let d = theta.latent_dim();
    let (si, pi, gi) = (inv(&theta.sigma), inv(&theta.p), inv(&theta.gamma));
    let x1 = &stats.x_smooth[0];
    let mu = &theta.mu;
    let mut q = -(len as f64) / 2.0 * logdet(&theta.sigma) - 0.5 * logdet(&theta.p) - (len as f64 - 1.0) / 2.0 * logdet(&theta.gamma);
    q -= 0.5 * (&pi * (&stats.omega[0] - x1 * mu.transpose() - mu * x1.transpose() + mu * mu.transpose())).trace();
    for k in 1..len {
        let dk = series.delta(k);
        let ak = DMatrix::identity(d, d) + &theta.a * dk;
        let oc = &stats.omega_cross[k - 1];
        let inner = &stats.omega[k] - oc * ak.transpose() - &ak * oc.transpose() + &ak * &stats.omega[k - 1] * ak.transpose();
        q -= (&gi * inner).trace() / (2.0 * dk);
    }
    for k in 0..len {
        let dk = series.delta(k);
        let y = series.observation(k);
        let cx = &theta.c * &stats.x_smooth[k];
        let inner = &y * y.transpose() - &cx * y.transpose() - &y * cx.transpose() + &theta.c * &stats.omega[k] * theta.c.transpose();
        q -= dk / 2.0 * (&si * inner).trace();
    }
    q
}

/// Classical fixed-step EM updates (unit sampling interval) written with the
/// usual S00/S10/S11 sums. The transition is reported as `F − Id`.
pub fn classical_mstep(series: &TimeSeriesSample<f64>, stats: &ssmix::SmoothedStats<f64>) -> LgssmParams<f64> {
    let len = series.len();
    let d = stats.x_smooth[0].len();
    let n = series.obs_dim();
    let mut s00 = DMatrix::zeros(d, d);
    let mut s10 = DMatrix::zeros(d, d);
    let mut s11 = DMatrix::zeros(d, d);
    for k in 1..len {
        s00 += &stats.omega[k - 1];
        s10 += &stats.omega_cross[k - 1];
        s11 += &stats.omega[k];
    }
    let f = &s10 * inv(&s00);
    let q = (&s11 - &f * s10.transpose()) / (len as f64 - 1.0);
    let mut syx = DMatrix::zeros(n, d);
    let mut sxx = DMatrix::zeros(d, d);
    let mut syy = DMatrix::zeros(n, n);
    for k in 0..len {
        let y = series.observation(k);
        syx += &y * stats.x_smooth[k].transpose();
        sxx += &stats.omega[k];
        syy += &y * y.transpose();
    }
    let h = &syx * inv(&sxx);
    let r = (&syy - &h * syx.transpose()) / len as f64;
    let mu = stats.x_smooth[0].clone();
    LgssmParams {
        p: &stats.omega[0] - &mu * mu.transpose(),
        mu,
        a: f - DMatrix::identity(d, d),
        c: h,
        gamma: (&q + q.transpose()) / 2.0,
        sigma: (&r + r.transpose()) / 2.0,
    }
}

pub fn params_close(a: &LgssmParams<f64>, b: &LgssmParams<f64>, tol: f64) -> bool {
    let mu = |p: &LgssmParams<f64>| DMatrix::from_column_slice(p.mu.len(), 1, p.mu.as_slice());
    rel_close(&mu(a), &mu(b), tol)
        && rel_close(&a.a, &b.a, tol)
        && rel_close(&a.c, &b.c, tol)
        && rel_close(&a.gamma, &b.gamma, tol)
        && rel_close(&a.sigma, &b.sigma, tol)
        && rel_close(&a.p, &b.p, tol)
}

/// Best matched count by trying every permutation, written independently of
/// the library's search.
pub fn best_by_permutation(truth: &[usize], pred: &[usize], m: usize) -> usize {
    fn rec(perm: &mut Vec<usize>, used: &mut Vec<bool>, m: usize, truth: &[usize], pred: &[usize], best: &mut usize) {
        if perm.len() == m {
            let hits = truth.iter().zip(pred).filter(|(&t, &p)| perm[t] == p).count();
            *best = (*best).max(hits);
            return;
        }
        for c in 0..m {
            if !used[c] {
                used[c] = true;
                perm.push(c);
                rec(perm, used, m, truth, pred, best);
                perm.pop();
                used[c] = false;
            }
        }
    }
    let mut best = 0;
    rec(&mut Vec::new(), &mut vec![false; m], m, truth, pred, &mut best);
    best
}
