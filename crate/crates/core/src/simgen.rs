//! Forward simulation of the discretized model and the three-class
//! benchmark generator.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::init::init_random;
use crate::linalg::psd_sqrt;
use crate::model::{Dataset, LgssmParams, MixtureModel, TimeSeriesSample};
use crate::rng::{derive_seed, rng_for};
use crate::scalar::{lit, Real};

fn check_timestamps<T: Real>(timestamps: &[T]) -> Result<()> {
    if timestamps.is_empty() {
        return Err(Error::TooShort { id: "simulated".into() });
    }
    for k in 1..timestamps.len() {
        if !(timestamps[k - 1] < timestamps[k]) {
            return Err(Error::NonIncreasingTimestamps { id: "simulated".into(), k: k + 1 });
        }
    }
    Ok(())
}

fn gaussian<T: Real>(root: &DMatrix<T>, rng: &mut ChaCha8Rng) -> DVector<T> {
    let z = DVector::<T>::from_fn(root.ncols(), |_, _| lit(rng.sample::<f64, _>(StandardNormal)));
    root * z
}

/// Draws one series: `x_1 = μ + u`, `x_k = A_k x_{k−1} + w_k`,
/// `y_k = C x_k + v_k` with `u ~ N(0, P)`, `w_k ~ N(0, Δ_k Γ)`,
/// `v_k ~ N(0, Σ / Δ_k)` and unit first step.
pub fn sample_series<T: Real>(theta: &LgssmParams<T>, timestamps: &[T], seed: u64) -> Result<TimeSeriesSample<T>> {
    check_timestamps(timestamps)?;
    let mut rng = rng_for(seed, &[]);
    let len = timestamps.len();
    let n = theta.obs_dim();
    let mut y = DMatrix::zeros(len, n);
    let mut x = &theta.mu + gaussian(&psd_sqrt(&theta.p), &mut rng);
    for k in 0..len {
        let delta = if k == 0 { T::one() } else { timestamps[k] - timestamps[k - 1] };
        if k > 0 {
            x = theta.transition(delta) * &x + gaussian(&psd_sqrt(&theta.process_noise(delta)), &mut rng);
        }
        let obs = &theta.c * &x + gaussian(&psd_sqrt(&theta.observation_noise(delta)), &mut rng);
        y.set_row(k, &obs.transpose());
    }
    Ok(TimeSeriesSample::new("simulated", timestamps.to_vec(), y))
}

/// Deterministic rollout with all noise removed: `x_1 = μ`,
/// `x_k = (Id + Δ_k A) x_{k−1}`, `y_k = C x_k`.
pub fn noiseless_trajectory<T: Real>(theta: &LgssmParams<T>, timestamps: &[T]) -> Result<DMatrix<T>> {
    check_timestamps(timestamps)?;
    let len = timestamps.len();
    let mut y = DMatrix::zeros(len, theta.obs_dim());
    let mut x = theta.mu.clone();
    for k in 0..len {
        if k > 0 {
            x = theta.transition(timestamps[k] - timestamps[k - 1]) * &x;
        }
        y.set_row(k, &(&theta.c * &x).transpose());
    }
    Ok(y)
}

pub const BENCHMARK_CLASS_SIZES: [usize; 3] = [40, 50, 30];
pub const BENCHMARK_LATENT_DIM: usize = 5;
pub const BENCHMARK_OBS_DIM: usize = 2;

/// Simulated three-class population with its ground truth.
#[derive(Clone, Debug)]
pub struct Benchmark<T: Real> {
    pub dataset: Dataset<T>,
    pub labels: Vec<usize>,
    /// Generating parameters; weights are the class proportions.
    pub truth: MixtureModel<T>,
}

/// Three classes of 40, 50 and 30 series with `d = 5`, `n = 2`. Lengths
/// are uniform on `25..=75`, integer increments uniform on `1..=5`, and each
/// series' timestamps are divided by its terminal time.
pub fn generate_benchmark<T: Real>(seed: u64) -> Benchmark<T> {
    let mut truth = init_random::<T>(3, BENCHMARK_LATENT_DIM, BENCHMARK_OBS_DIM, derive_seed(seed, &[0x7e57]));
    let total: usize = BENCHMARK_CLASS_SIZES.iter().sum();
    truth.pi = BENCHMARK_CLASS_SIZES.iter().map(|&c| lit::<T>(c as f64 / total as f64)).collect();

    let mut series = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for (class, &count) in BENCHMARK_CLASS_SIZES.iter().enumerate() {
        for _ in 0..count {
            let i = series.len();
            let mut rng = rng_for(seed, &[0x5e41, i as u64]);
            let len = rng.gen_range(25..=75usize);
            let mut stamps = vec![0u32; len];
            for k in 1..len {
                stamps[k] = stamps[k - 1] + rng.gen_range(1..=5u32);
            }
            let end = stamps[len - 1] as f64;
            let timestamps: Vec<T> = stamps.iter().map(|&s| lit(s as f64 / end)).collect();
            let mut s = sample_series(&truth.clusters[class], &timestamps, derive_seed(seed, &[0xda7a, i as u64]))
                .expect("generated timestamps are increasing");
            s.id = format!("sim{i:03}");
            series.push(s);
            labels.push(class);
        }
    }
    let dataset = Dataset::new(series).expect("generated series are valid");
    Benchmark { dataset, labels, truth }
}
