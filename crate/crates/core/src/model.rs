//! Domain types, dataset validation and the JSON model file.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::psd_project;
use crate::scalar::{lit, to_f64, Real};

/// One observed series: strictly increasing timestamps and a `T × n`
/// observation matrix (row `k` is `y_k`).
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesSample<T: Real> {
    pub id: String,
    pub timestamps: Vec<T>,
    pub observations: DMatrix<T>,
}

impl<T: Real> TimeSeriesSample<T> {
    pub fn new(id: impl Into<String>, timestamps: Vec<T>, observations: DMatrix<T>) -> Self {
        Self { id: id.into(), timestamps, observations }
    }

    /// Builds a sample from row vectors.
    pub fn from_rows(id: impl Into<String>, timestamps: Vec<T>, rows: &[Vec<T>]) -> Self {
        let n = rows.first().map_or(0, Vec::len);
        let flat: Vec<T> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(id, timestamps, DMatrix::from_row_slice(rows.len(), n, &flat))
    }

    pub fn len(&self) -> usize {
        self.observations.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn obs_dim(&self) -> usize {
        self.observations.ncols()
    }

    /// Time step preceding sample `k` (0-based). The first sample has no
    /// predecessor and is given a unit step.
    #[inline]
    pub fn delta(&self, k: usize) -> T {
        if k == 0 {
            T::one()
        } else {
            self.timestamps[k] - self.timestamps[k - 1]
        }
    }

    pub fn observation(&self, k: usize) -> DVector<T> {
        self.observations.row(k).transpose()
    }

    /// Shifts all timestamps so that the first one is zero.
    pub fn shift_to_origin(&mut self) {
        if let Some(&t0) = self.timestamps.first() {
            for t in &mut self.timestamps {
                *t -= t0;
            }
        }
    }
}

/// Shape summary returned by [`validate_dataset`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSummary {
    pub n_series: usize,
    pub obs_dim: usize,
    pub lengths: Vec<usize>,
}

/// Checks every series invariant and that all series share one observation
/// dimension.
pub fn validate_dataset<T: Real>(series: &[TimeSeriesSample<T>]) -> Result<DatasetSummary> {
    let first = series.first().ok_or(Error::EmptyDataset)?;
    let obs_dim = first.obs_dim();
    let mut lengths = Vec::with_capacity(series.len());
    for s in series {
        if s.len() < 2 || s.timestamps.len() < 2 {
            return Err(Error::TooShort { id: s.id.clone() });
        }
        if s.obs_dim() != obs_dim || obs_dim == 0 || s.timestamps.len() != s.len() {
            return Err(Error::DimensionMismatch { id: s.id.clone() });
        }
        for k in 1..s.timestamps.len() {
            // Negated comparison so NaN stamps are rejected as well.
            if !(s.timestamps[k - 1] < s.timestamps[k]) || !s.timestamps[k].is_finite() {
                return Err(Error::NonIncreasingTimestamps { id: s.id.clone(), k: k + 1 });
            }
        }
        if !s.timestamps[0].is_finite() {
            return Err(Error::NonIncreasingTimestamps { id: s.id.clone(), k: 1 });
        }
        for k in 0..s.len() {
            for j in 0..obs_dim {
                if !s.observations[(k, j)].is_finite() {
                    return Err(Error::NonFiniteValue { id: s.id.clone(), k: k + 1, j: j + 1 });
                }
            }
        }
        lengths.push(s.len());
    }
    Ok(DatasetSummary { n_series: series.len(), obs_dim, lengths })
}

/// A validated population of series sharing one observation dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T: Real> {
    series: Vec<TimeSeriesSample<T>>,
    obs_dim: usize,
}

impl<T: Real> Dataset<T> {
    pub fn new(series: Vec<TimeSeriesSample<T>>) -> Result<Self> {
        let summary = validate_dataset(&series)?;
        Ok(Self { series, obs_dim: summary.obs_dim })
    }

    pub fn series(&self) -> &[TimeSeriesSample<T>] {
        &self.series
    }

    pub fn into_series(self) -> Vec<TimeSeriesSample<T>> {
        self.series
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.series.iter().map(|s| s.id.as_str())
    }
}

/// Parameters `{μ, A, C, Γ, Σ, P}` of one linear Gaussian state space model.
/// `a` and `gamma` are continuous-time quantities; per-step matrices are
/// derived from them with [`LgssmParams::transition`] and friends.
#[derive(Clone, Debug, PartialEq)]
pub struct LgssmParams<T: Real> {
    pub mu: DVector<T>,
    pub a: DMatrix<T>,
    pub c: DMatrix<T>,
    pub gamma: DMatrix<T>,
    pub sigma: DMatrix<T>,
    pub p: DMatrix<T>,
}

impl<T: Real> LgssmParams<T> {
    pub fn latent_dim(&self) -> usize {
        self.mu.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.c.nrows()
    }

    /// `Id + Δ A`
    pub fn transition(&self, delta: T) -> DMatrix<T> {
        let d = self.latent_dim();
        DMatrix::identity(d, d) + &self.a * delta
    }

    /// `Δ Γ`
    pub fn process_noise(&self, delta: T) -> DMatrix<T> {
        &self.gamma * delta
    }

    /// `Σ / Δ`
    pub fn observation_noise(&self, delta: T) -> DMatrix<T> {
        &self.sigma / delta
    }

    pub fn check_shapes(&self) -> Result<()> {
        let d = self.latent_dim();
        let n = self.obs_dim();
        let ok = self.a.shape() == (d, d)
            && self.c.shape() == (n, d)
            && self.gamma.shape() == (d, d)
            && self.sigma.shape() == (n, n)
            && self.p.shape() == (d, d);
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!("inconsistent parameter blocks for d={d}, n={n}")))
        }
    }

    /// Symmetrizes and floors the three covariance blocks.
    pub fn project_covariances(mut self) -> Self {
        self.gamma = psd_project(self.gamma);
        self.sigma = psd_project(self.sigma);
        self.p = psd_project(self.p);
        self
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter()
            .chain(self.a.iter())
            .chain(self.c.iter())
            .chain(self.gamma.iter())
            .chain(self.sigma.iter())
            .chain(self.p.iter())
            .all(|v| v.is_finite())
    }

    /// Iterates over every entry of `μ, A, C, Γ, Σ, P` in that order.
    pub fn entries(&self) -> impl Iterator<Item = T> + '_ {
        self.mu.iter()
            .chain(self.a.iter())
            .chain(self.c.iter())
            .chain(self.gamma.iter())
            .chain(self.sigma.iter())
            .chain(self.p.iter())
            .copied()
    }
}

/// `M` clusters of [`LgssmParams`] with mixture weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureModel<T: Real> {
    pub clusters: Vec<LgssmParams<T>>,
    pub pi: Vec<T>,
    pub latent_dim: usize,
    pub obs_dim: usize,
}

impl<T: Real> MixtureModel<T> {
    pub fn new(clusters: Vec<LgssmParams<T>>, pi: Vec<T>) -> Result<Self> {
        let first = clusters
            .first()
            .ok_or_else(|| Error::ShapeMismatch("mixture needs at least one cluster".into()))?;
        let (d, n) = (first.latent_dim(), first.obs_dim());
        let model = Self { clusters, pi, latent_dim: d, obs_dim: n };
        model.validate()?;
        Ok(model)
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.pi.len() != self.clusters.len() {
            return Err(Error::ShapeMismatch("pi length differs from cluster count".into()));
        }
        for theta in &self.clusters {
            theta.check_shapes()?;
            if theta.latent_dim() != self.latent_dim || theta.obs_dim() != self.obs_dim {
                return Err(Error::ShapeMismatch("clusters disagree on (d, n)".into()));
            }
        }
        let total: f64 = self.pi.iter().map(|&p| to_f64(p)).sum();
        if self.pi.iter().any(|&p| p < T::zero() || !p.is_finite()) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::ShapeMismatch(format!("mixture weights must be a distribution (sum {total})")));
        }
        Ok(())
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.n_clusters() == other.n_clusters()
            && self.latent_dim == other.latent_dim
            && self.obs_dim == other.obs_dim
    }

    /// Returns a copy with clusters reordered so that cluster `l` of the
    /// result is cluster `order[l]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            clusters: order.iter().map(|&i| self.clusters[i].clone()).collect(),
            pi: order.iter().map(|&i| self.pi[i]).collect(),
            latent_dim: self.latent_dim,
            obs_dim: self.obs_dim,
        }
    }
}

/// Sum of absolute entrywise differences over `μ, A, C, Γ, Σ, P` of every
/// cluster. Mixture weights do not enter.
pub fn param_delta<T: Real>(a: &MixtureModel<T>, b: &MixtureModel<T>) -> Result<T> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch("param_delta on models of different shape".into()));
    }
    let mut acc = T::zero();
    for (x, y) in a.clusters.iter().zip(&b.clusters) {
        for (u, v) in x.entries().zip(y.entries()) {
            acc += (u - v).abs();
        }
    }
    Ok(acc)
}

/// Parameter blocks that can be held fixed during fitting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamBlock {
    Mu,
    A,
    C,
    Gamma,
    Sigma,
    P,
    Pi,
}

impl FromStr for ParamBlock {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "mu" => Self::Mu,
            "A" => Self::A,
            "C" => Self::C,
            "Gamma" => Self::Gamma,
            "Sigma" => Self::Sigma,
            "P" => Self::P,
            "pi" => Self::Pi,
            other => return Err(Error::InvalidOption(format!("unknown parameter block `{other}`"))),
        })
    }
}

impl fmt::Display for ParamBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mu => "mu",
            Self::A => "A",
            Self::C => "C",
            Self::Gamma => "Gamma",
            Self::Sigma => "Sigma",
            Self::P => "P",
            Self::Pi => "pi",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMethod {
    Identity,
    Random,
    Kmeans,
}

impl FromStr for InitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "random" => Ok(Self::Random),
            "kmeans" => Ok(Self::Kmeans),
            other => Err(Error::InvalidOption(format!("unknown initialization `{other}`"))),
        }
    }
}

/// Hyperparameters of a mixture fit.
#[derive(Clone, Debug)]
pub struct FitOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub threads: usize,
    pub fixed_params: BTreeSet<ParamBlock>,
    pub init: InitMethod,
    pub kmeans_restarts: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 0.1,
            max_iter: 1000,
            seed: 0,
            threads: 1,
            fixed_params: BTreeSet::new(),
            init: InitMethod::Identity,
            kmeans_restarts: 30,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidOption("tol must be positive".into()));
        }
        if self.max_iter == 0 || self.threads == 0 || self.kmeans_restarts == 0 {
            return Err(Error::InvalidOption("max_iter, threads and kmeans_restarts must be positive".into()));
        }
        Ok(())
    }

    pub fn is_fixed(&self, block: ParamBlock) -> bool {
        self.fixed_params.contains(&block)
    }
}

/// One EM iteration: log-likelihood of the model entering the iteration and
/// the size of the parameter update it produced.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub loglik: f64,
    pub param_delta: f64,
    pub warnings: Vec<String>,
}

/// Outcome of a mixture fit.
#[derive(Clone, Debug, PartialEq)]
pub struct FitReport<T: Real> {
    pub model: MixtureModel<T>,
    /// `N × M`, rows sum to one.
    pub responsibilities: DMatrix<T>,
    pub assignments: Vec<usize>,
    pub trace: Vec<TraceEntry>,
    /// Observed-data log-likelihood of the returned model.
    pub loglik: f64,
    pub abic: f64,
    pub converged: bool,
}

impl<T: Real> FitReport<T> {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }
}

// --- model file ---------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[allow(non_snake_case)]
struct ClusterFile {
    mu: Vec<f64>,
    A: Vec<Vec<f64>>,
    C: Vec<Vec<f64>>,
    Gamma: Vec<Vec<f64>>,
    Sigma: Vec<Vec<f64>>,
    P: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[allow(non_snake_case)]
struct ModelFile {
    M: usize,
    d: usize,
    n: usize,
    pi: Vec<f64>,
    clusters: Vec<ClusterFile>,
}

fn rows_of<T: Real>(m: &DMatrix<T>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().map(|&v| to_f64(v)).collect()).collect()
}

fn matrix_from_rows<T: Real>(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<T>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::ShapeMismatch(format!("`{what}` must be {nrows}x{ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| lit(rows[i][j])))
}

impl<T: Real> MixtureModel<T> {
    /// Serializes to the JSON model file layout (row-major nested arrays).
    pub fn to_json(&self) -> String {
        let file = ModelFile {
            M: self.n_clusters(),
            d: self.latent_dim,
            n: self.obs_dim,
            pi: self.pi.iter().map(|&p| to_f64(p)).collect(),
            clusters: self
                .clusters
                .iter()
                .map(|c| ClusterFile {
                    mu: c.mu.iter().map(|&v| to_f64(v)).collect(),
                    A: rows_of(&c.a),
                    C: rows_of(&c.c),
                    Gamma: rows_of(&c.gamma),
                    Sigma: rows_of(&c.sigma),
                    P: rows_of(&c.p),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("model file serializes")
    }

    /// Parses a JSON model file. Covariance blocks are symmetrized and
    /// floored on the way in.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        let (d, n) = (file.d, file.n);
        if file.clusters.len() != file.M || file.pi.len() != file.M {
            return Err(Error::ShapeMismatch("M disagrees with cluster or pi length".into()));
        }
        let clusters = file
            .clusters
            .iter()
            .map(|c| {
                if c.mu.len() != d {
                    return Err(Error::ShapeMismatch("`mu` must have length d".into()));
                }
                Ok(LgssmParams {
                    mu: DVector::from_iterator(d, c.mu.iter().map(|&v| lit(v))),
                    a: matrix_from_rows(&c.A, d, d, "A")?,
                    c: matrix_from_rows(&c.C, n, d, "C")?,
                    gamma: matrix_from_rows(&c.Gamma, d, d, "Gamma")?,
                    sigma: matrix_from_rows(&c.Sigma, n, n, "Sigma")?,
                    p: matrix_from_rows(&c.P, d, d, "P")?,
                }
                .project_covariances())
            })
            .collect::<Result<Vec<_>>>()?;
        let model = Self { clusters, pi: file.pi.iter().map(|&p| lit(p)).collect(), latent_dim: d, obs_dim: n };
        model.validate()?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(id: &str, t: &[f64], rows: &[[f64; 2]]) -> TimeSeriesSample<f64> {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        TimeSeriesSample::from_rows(id, t.to_vec(), &rows)
    }

    #[test]
    fn accepts_well_formed_pair() {
        let a = series("a", &[0.0, 1.0, 2.0], &[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let b = series("b", &[0.0, 0.5, 2.0], &[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let s = validate_dataset(&[a, b]).unwrap();
        assert_eq!(s.n_series, 2);
        assert_eq!(s.obs_dim, 2);
        assert_eq!(s.lengths, vec![3, 3]);
    }

    #[test]
    fn repeated_stamp_reported_at_third_sample() {
        let a = series("a", &[0.0, 1.0, 1.0], &[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        match validate_dataset(&[a]) {
            Err(Error::NonIncreasingTimestamps { id, k }) => {
                assert_eq!(id, "a");
                assert_eq!(k, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nan_observation_located() {
        let a = series(
            "a",
            &[0.0, 1.0, 2.0, 3.0],
            &[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, f64::NAN]],
        );
        match validate_dataset(&[a]) {
            Err(Error::NonFiniteValue { k, j, .. }) => assert_eq!((k, j), (4, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn short_and_mismatched_series_rejected() {
        let a = series("a", &[0.0], &[[1.0, 2.0]]);
        assert!(matches!(validate_dataset(&[a]), Err(Error::TooShort { .. })));
        let b = series("b", &[0.0, 1.0], &[[1.0, 2.0], [1.0, 2.0]]);
        let c = TimeSeriesSample::from_rows("c", vec![0.0, 1.0], &[vec![1.0], vec![2.0]]);
        assert!(matches!(validate_dataset(&[b, c]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(validate_dataset::<f64>(&[]), Err(Error::EmptyDataset)));
    }

    fn one_cluster(d: usize, n: usize) -> LgssmParams<f64> {
        LgssmParams {
            mu: DVector::zeros(d),
            a: DMatrix::identity(d, d) * -1.0,
            c: DMatrix::from_element(n, d, 1.0),
            gamma: DMatrix::identity(d, d),
            sigma: DMatrix::identity(n, n),
            p: DMatrix::identity(d, d),
        }
    }

    #[test]
    fn delta_of_single_entry_perturbation() {
        let a = MixtureModel::new(vec![one_cluster(2, 1), one_cluster(2, 1)], vec![0.5, 0.5]).unwrap();
        assert_eq!(param_delta(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.clusters[0].a[(1, 0)] += 0.25;
        b.pi = vec![0.9, 0.1];
        assert_eq!(param_delta(&a, &b).unwrap(), 0.25);
    }

    #[test]
    fn delta_rejects_shape_mismatch() {
        let a = MixtureModel::new(vec![one_cluster(2, 1)], vec![1.0]).unwrap();
        let b = MixtureModel::new(vec![one_cluster(3, 1)], vec![1.0]).unwrap();
        assert!(matches!(param_delta(&a, &b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn model_file_layout() {
        let m = MixtureModel::new(vec![one_cluster(2, 1)], vec![1.0]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(v["M"], 1);
        assert_eq!(v["d"], 2);
        assert_eq!(v["n"], 1);
        assert_eq!(v["clusters"][0]["C"], serde_json::json!([[1.0, 1.0]]));
        assert_eq!(v["clusters"][0]["A"][1], serde_json::json!([0.0, -1.0]));
    }

    #[test]
    fn model_file_rejects_bad_shapes() {
        let m = MixtureModel::new(vec![one_cluster(2, 1)], vec![1.0]).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        v["clusters"][0]["A"] = serde_json::json!([[1.0]]);
        assert!(MixtureModel::<f64>::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn block_names_parse() {
        for b in ["mu", "A", "C", "Gamma", "Sigma", "P", "pi"] {
            assert_eq!(b.parse::<ParamBlock>().unwrap().to_string(), b);
        }
        assert!("Q".parse::<ParamBlock>().is_err());
    }
}
