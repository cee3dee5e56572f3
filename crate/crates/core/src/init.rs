//! Starting points for mixture EM: the fixed identity layout, random draws,
//! and k-means over individually fitted parameter vectors.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::em_single::fit_single;
use crate::error::{Error, Result};
use crate::model::{Dataset, LgssmParams, MixtureModel};
use crate::rng::{derive_seed, rng_for};
use crate::scalar::{lit, Real};

/// Flat encoding of one [`LgssmParams`]: `μ`, `A` and `C` row-major, then
/// the row-major lower triangles of `P`, `Γ` and `Σ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector<T: Real>(pub Vec<T>);

impl<T: Real> ParamVector<T> {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn squared_distance(&self, other: &Self) -> T {
        self.0.iter().zip(&other.0).fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b))
    }
}

/// Length of a [`ParamVector`] for latent dimension `d` and observed `n`.
pub fn param_vector_len(d: usize, n: usize) -> usize {
    d + d * d + n * d + d * (d + 1) + n * (n + 1) / 2
}

fn push_row_major<T: Real>(out: &mut Vec<T>, m: &DMatrix<T>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
}

fn push_lower<T: Real>(out: &mut Vec<T>, m: &DMatrix<T>) {
    for i in 0..m.nrows() {
        for j in 0..=i {
            out.push(m[(i, j)]);
        }
    }
}

pub fn vectorize<T: Real>(theta: &LgssmParams<T>) -> ParamVector<T> {
    let mut out = Vec::with_capacity(param_vector_len(theta.latent_dim(), theta.obs_dim()));
    out.extend(theta.mu.iter().copied());
    push_row_major(&mut out, &theta.a);
    push_row_major(&mut out, &theta.c);
    push_lower(&mut out, &theta.p);
    push_lower(&mut out, &theta.gamma);
    push_lower(&mut out, &theta.sigma);
    ParamVector(out)
}

/// Inverse of [`vectorize`]; covariance blocks come back exactly symmetric.
pub fn devectorize<T: Real>(v: &ParamVector<T>, d: usize, n: usize) -> Result<LgssmParams<T>> {
    if v.len() != param_vector_len(d, n) {
        return Err(Error::ShapeMismatch(format!(
            "parameter vector of length {} does not match d={d}, n={n}",
            v.len()
        )));
    }
    let mut it = v.0.iter().copied();
    let mut next = || it.next().expect("length checked above");
    let mu = DVector::from_fn(d, |_, _| next());
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            a[(i, j)] = next();
        }
    }
    let mut c = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            c[(i, j)] = next();
        }
    }
    let mut lower = |k: usize| {
        let mut m = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..=i {
                let x = next();
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
        }
        m
    };
    let p = lower(d);
    let gamma = lower(d);
    let sigma = lower(n);
    Ok(LgssmParams { mu, a, c, gamma, sigma, p })
}

/// Output matrix of the identity start: `I_min(n,d)` in the top-left, the
/// remaining columns (or rows) cycle through the identity of the smaller
/// dimension.
pub fn identity_output_matrix<T: Real>(n: usize, d: usize) -> DMatrix<T> {
    DMatrix::from_fn(n, d, |i, j| {
        let on = if d >= n { i == j % n } else { j == i % d };
        if on {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Deterministic start with `μ_l` spread evenly over `[−1, 1]·𝟏`,
/// `A = −1.5 Id`, `P = Γ = Σ = 0.1 Id` and uniform weights.
pub fn init_identity<T: Real>(m: usize, d: usize, n: usize) -> MixtureModel<T> {
    assert!(m >= 1 && d >= 1 && n >= 1, "dimensions must be positive");
    let clusters = (0..m)
        .map(|l| {
            let level = if m == 1 { 0.0 } else { -1.0 + 2.0 * l as f64 / (m - 1) as f64 };
            LgssmParams {
                mu: DVector::from_element(d, lit(level)),
                a: DMatrix::identity(d, d) * lit::<T>(-1.5),
                c: identity_output_matrix(n, d),
                gamma: DMatrix::identity(d, d) * lit::<T>(0.1),
                sigma: DMatrix::identity(n, n) * lit::<T>(0.1),
                p: DMatrix::identity(d, d) * lit::<T>(0.1),
            }
        })
        .collect();
    MixtureModel { clusters, pi: vec![T::one() / lit(m as f64); m], latent_dim: d, obs_dim: n }
}

/// `G Gᵀ / k + 0.1 Id` with `G` standard Gaussian.
pub fn random_spd<T: Real>(k: usize, rng: &mut ChaCha8Rng) -> DMatrix<T> {
    let g = DMatrix::<f64>::from_fn(k, k, |_, _| rng.sample(StandardNormal));
    let spd = &g * g.transpose() / k as f64 + DMatrix::identity(k, k) * 0.1;
    spd.map(lit)
}

/// One randomly drawn cluster; the draw order is fixed.
pub fn random_params<T: Real>(d: usize, n: usize, rng: &mut ChaCha8Rng) -> LgssmParams<T> {
    let mu = DVector::from_fn(d, |_, _| lit(rng.gen_range(0.0..1.0)));
    let p = random_spd(d, rng);
    let a = DMatrix::from_diagonal(&DVector::from_fn(d, |_, _| lit(rng.gen_range(-1.9..-0.1))));
    let gamma = random_spd(d, rng);
    let c = DMatrix::from_fn(n, d, |i, _| {
        if i == 0 || rng.gen_bool(0.5) {
            T::one()
        } else {
            T::zero()
        }
    });
    let sigma = random_spd(n, rng);
    LgssmParams { mu, a, c, gamma, sigma, p }
}

/// Random start: every cluster drawn independently from a stream derived
/// from `seed` and its index; uniform weights.
pub fn init_random<T: Real>(m: usize, d: usize, n: usize, seed: u64) -> MixtureModel<T> {
    assert!(m >= 1 && d >= 1 && n >= 1, "dimensions must be positive");
    let clusters = (0..m).map(|l| random_params(d, n, &mut rng_for(seed, &[l as u64]))).collect();
    MixtureModel { clusters, pi: vec![T::one() / lit(m as f64); m], latent_dim: d, obs_dim: n }
}

/// Orthogonal factor of the QR decomposition of a standard Gaussian matrix.
pub fn random_orthogonal<T: Real>(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<T> {
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
    g.qr().q().map(lit)
}

/// Common single-model start used by the k-means initializer for restart `r`.
pub fn kmeans_start<T: Real>(d: usize, n: usize, seed: u64, restart: usize) -> LgssmParams<T> {
    let mut rng = rng_for(seed, &[0x0a7c, restart as u64]);
    LgssmParams {
        mu: DVector::zeros(d),
        a: random_orthogonal(d, &mut rng),
        c: DMatrix::from_element(n, d, T::one()),
        gamma: DMatrix::identity(d, d) * lit::<T>(0.05),
        sigma: DMatrix::identity(n, n) * lit::<T>(0.05),
        p: DMatrix::identity(d, d) * lit::<T>(1e4),
    }
}

#[derive(Clone, Debug)]
pub struct KMeansResult<T: Real> {
    pub centers: Vec<ParamVector<T>>,
    pub labels: Vec<usize>,
    /// Fraction of points per cluster.
    pub shares: Vec<T>,
}

const KMEANS_MAX_ITER: usize = 100;

fn nearest<T: Real>(p: &ParamVector<T>, centers: &[ParamVector<T>]) -> (usize, T) {
    let mut best = (0, p.squared_distance(&centers[0]));
    for (l, c) in centers.iter().enumerate().skip(1) {
        let dist = p.squared_distance(c);
        if dist < best.1 {
            best = (l, dist);
        }
    }
    best
}

fn kmeanspp_seed<T: Real>(points: &[ParamVector<T>], m: usize, rng: &mut ChaCha8Rng) -> Vec<ParamVector<T>> {
    let mut centers = vec![points[rng.gen_range(0..points.len())].clone()];
    while centers.len() < m {
        let weights: Vec<f64> = points
            .iter()
            .map(|p| crate::scalar::to_f64(nearest(p, &centers).1))
            .collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen_range(0.0..total);
            let mut chosen = points.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.gen_range(0..points.len())
        };
        centers.push(points[pick].clone());
    }
    centers
}

fn mean_of<T: Real>(points: &[ParamVector<T>], labels: &[usize], l: usize) -> Option<ParamVector<T>> {
    let dim = points[0].len();
    let mut sum = vec![T::zero(); dim];
    let mut count = 0usize;
    for (p, &lab) in points.iter().zip(labels) {
        if lab == l {
            count += 1;
            for (s, &x) in sum.iter_mut().zip(&p.0) {
                *s += x;
            }
        }
    }
    (count > 0).then(|| {
        let c: T = lit(count as f64);
        ParamVector(sum.into_iter().map(|s| s / c).collect())
    })
}

/// Lloyd's algorithm with k-means++ seeding on raw Euclidean distance.
///
/// Stops when the labels no longer change or after 100 iterations. An
/// empty cluster takes over the point farthest from its current center
/// among clusters that can spare one.
pub fn kmeans_lloyd<T: Real>(points: &[ParamVector<T>], m: usize, seed: u64) -> Result<KMeansResult<T>> {
    if m == 0 || points.len() < m {
        return Err(Error::FewerPointsThanClusters { points: points.len(), clusters: m });
    }
    let mut rng = rng_for(seed, &[0x6b6d]);
    let mut centers = kmeanspp_seed(points, m, &mut rng);
    let mut labels: Vec<usize> = vec![usize::MAX; points.len()];
    for _ in 0..KMEANS_MAX_ITER {
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
        let mut counts = vec![0usize; m];
        for &l in &next {
            counts[l] += 1;
        }
        for empty in 0..m {
            if counts[empty] > 0 {
                continue;
            }
            let donor = (0..points.len())
                .filter(|&i| counts[next[i]] > 1)
                .map(|i| (i, points[i].squared_distance(&centers[next[i]])))
                .fold(None, |best: Option<(usize, T)>, (i, dist)| match best {
                    Some((_, bd)) if !(dist > bd) => best,
                    _ => Some((i, dist)),
                })
                .map(|(i, _)| i)
                .expect("at least as many points as clusters");
            counts[next[donor]] -= 1;
            counts[empty] += 1;
            next[donor] = empty;
        }
        for (l, center) in centers.iter_mut().enumerate() {
            if let Some(mean) = mean_of(points, &next, l) {
                *center = mean;
            }
        }
        let stable = next == labels;
        labels = next;
        if stable {
            break;
        }
    }
    let total: T = lit(points.len() as f64);
    let shares = (0..m)
        .map(|l| lit::<T>(labels.iter().filter(|&&x| x == l).count() as f64) / total)
        .collect();
    Ok(KMeansResult { centers, labels, shares })
}

/// Per-series best single-model fit over `restarts` common starts.
pub fn best_single_fits<T: Real>(
    dataset: &Dataset<T>,
    d: usize,
    restarts: usize,
    seed: u64,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<(LgssmParams<T>, T)>> {
    let n = dataset.obs_dim();
    let starts: Vec<LgssmParams<T>> = (0..restarts).map(|r| kmeans_start(d, n, seed, r)).collect();
    dataset
        .series()
        .par_iter()
        .map(|series| {
            let mut best: Option<(LgssmParams<T>, T)> = None;
            for start in &starts {
                let Ok(fit) = fit_single(series, start, tol, max_iter) else { continue };
                if !fit.loglik.is_finite() {
                    continue;
                }
                if best.as_ref().map_or(true, |(_, ll)| fit.loglik > *ll) {
                    best = Some((fit.theta, fit.loglik));
                }
            }
            best.ok_or_else(|| Error::SeriesInitFailed { id: series.id.clone() })
        })
        .collect()
}

/// Fits one model per series from `restarts` random-orthogonal starts,
/// keeps each series' best, and clusters the parameter vectors with
/// k-means. Centers become cluster parameters; membership shares become
/// the mixture weights.
pub fn init_kmeans<T: Real>(
    dataset: &Dataset<T>,
    m: usize,
    d: usize,
    restarts: usize,
    seed: u64,
    tol: f64,
    max_iter: usize,
) -> Result<MixtureModel<T>> {
    if restarts == 0 {
        return Err(Error::InvalidOption("kmeans_restarts must be at least 1".into()));
    }
    let n = dataset.obs_dim();
    let winners = best_single_fits(dataset, d, restarts, seed, tol, max_iter)?;
    let points: Vec<ParamVector<T>> = winners.iter().map(|(theta, _)| vectorize(theta)).collect();
    let km = kmeans_lloyd(&points, m, derive_seed(seed, &[0x6b6d]))?;
    let clusters = km
        .centers
        .iter()
        .map(|c| devectorize(c, d, n).map(LgssmParams::project_covariances))
        .collect::<Result<Vec<_>>>()?;
    Ok(MixtureModel { clusters, pi: km.shares, latent_dim: d, obs_dim: n })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_means_spread_over_unit_interval() {
        let m = init_identity::<f64>(3, 2, 2);
        let mus: Vec<Vec<f64>> = m.clusters.iter().map(|c| c.mu.iter().copied().collect()).collect();
        assert_eq!(mus, vec![vec![-1.0, -1.0], vec![0.0, 0.0], vec![1.0, 1.0]]);
        assert_eq!(m.pi, vec![1.0 / 3.0; 3]);
        let single = init_identity::<f64>(1, 3, 1);
        assert!(single.clusters[0].mu.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_matrix_tiling() {
        let c = identity_output_matrix::<f64>(2, 3);
        assert_eq!(c, DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]));
        let tall = identity_output_matrix::<f64>(3, 2);
        assert_eq!(tall, DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]));
        // every latent coordinate is observed
        for j in 0..3 {
            assert!(c.column(j).iter().any(|&v| v == 1.0));
        }
    }

    #[test]
    fn random_start_is_seed_deterministic() {
        let a = init_random::<f64>(3, 4, 2, 11);
        let b = init_random::<f64>(3, 4, 2, 11);
        assert_eq!(a, b);
        assert_ne!(a, init_random::<f64>(3, 4, 2, 12));
    }

    #[test]
    fn random_output_matrix_first_row_ones() {
        let m = init_random::<f64>(4, 5, 3, 2);
        for c in &m.clusters {
            assert!(c.c.row(0).iter().all(|&v| v == 1.0));
            assert!(c.c.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn orthogonal_start() {
        let mut rng = rng_for(3, &[]);
        let q = random_orthogonal::<f64>(4, &mut rng);
        assert!((q.transpose() * &q - DMatrix::identity(4, 4)).norm() < 1e-12);
    }

    #[test]
    fn vector_roundtrip_and_layout() {
        let theta = init_random::<f64>(1, 3, 2, 5).clusters.remove(0);
        let v = vectorize(&theta);
        assert_eq!(v.len(), param_vector_len(3, 2));
        assert_eq!(&v.0[..3], theta.mu.as_slice());
        assert_eq!(v.0[3 + 1], theta.a[(0, 1)]);
        assert_eq!(devectorize(&v, 3, 2).unwrap(), theta);
        assert!(devectorize(&v, 2, 2).is_err());
    }

    #[test]
    fn kmeans_single_center_is_mean() {
        let pts: Vec<ParamVector<f64>> =
            vec![ParamVector(vec![0.0, 1.0]), ParamVector(vec![2.0, 3.0]), ParamVector(vec![4.0, 8.0])];
        let r = kmeans_lloyd(&pts, 1, 0).unwrap();
        assert_eq!(r.centers[0].0, vec![2.0, 4.0]);
        assert_eq!(r.labels, vec![0, 0, 0]);
        assert_eq!(r.shares, vec![1.0]);
    }

    #[test]
    fn kmeans_one_point_per_center() {
        let pts: Vec<ParamVector<f64>> =
            vec![ParamVector(vec![0.0]), ParamVector(vec![10.0]), ParamVector(vec![-7.0])];
        let r = kmeans_lloyd(&pts, 3, 4).unwrap();
        let mut centers: Vec<f64> = r.centers.iter().map(|c| c.0[0]).collect();
        centers.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(centers, vec![-7.0, 0.0, 10.0]);
    }

    #[test]
    fn kmeans_identical_points_spread_evenly() {
        let pts: Vec<ParamVector<f64>> = vec![ParamVector(vec![1.0, 1.0]); 3];
        let r = kmeans_lloyd(&pts, 3, 9).unwrap();
        let mut labels = r.labels.clone();
        labels.sort();
        assert_eq!(labels, vec![0, 1, 2]);
        assert!(r.shares.iter().all(|&s| (s - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn kmeans_needs_enough_points() {
        let pts: Vec<ParamVector<f64>> = vec![ParamVector(vec![1.0])];
        assert!(matches!(kmeans_lloyd(&pts, 2, 0), Err(Error::FewerPointsThanClusters { .. })));
    }
}
