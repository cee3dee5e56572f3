mod common;

use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use ssmix::init::{devectorize, param_vector_len, vectorize};
use ssmix::{init_random, param_delta, validate_dataset, Error, MixtureModel, TimeSeriesSample};

fn model(seed: u64, m: usize, d: usize, n: usize) -> MixtureModel<f64> {
    let mut r = rng(seed);
    let mut model = init_random::<f64>(m, d, n, seed);
    // Arbitrary bit patterns in every block, not just the initializer's ranges.
    for c in &mut model.clusters {
        c.mu.iter_mut().chain(c.a.iter_mut()).chain(c.c.iter_mut()).for_each(|v| *v = normal(&mut r) * 1e3);
    }
    let raw: Vec<f64> = (0..m).map(|_| r.gen_range(0.01..1.0)).collect();
    let total: f64 = raw.iter().sum();
    model.pi = raw.iter().map(|w| w / total).collect();
    model
}

fn clean_series(seed: u64, count: usize, n: usize) -> Vec<TimeSeriesSample<f64>> {
    let mut r = rng(seed);
    (0..count)
        .map(|i| {
            let mut s = series(r.gen_range(2..8), n, &mut r);
            s.id = format!("s{i}");
            s
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn param_delta_is_a_pseudometric(s1 in any::<u64>(), s2 in any::<u64>(), s3 in any::<u64>(),
                                     m in 1usize..4, d in 1usize..4, n in 1usize..4) {
        let (a, b, c) = (model(s1, m, d, n), model(s2, m, d, n), model(s3, m, d, n));
        let ab = param_delta(&a, &b).unwrap();
        prop_assert_eq!(param_delta(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(ab, param_delta(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        let slack = 1e-12 * (ab + param_delta(&b, &c).unwrap());
        prop_assert!(param_delta(&a, &c).unwrap() <= ab + param_delta(&b, &c).unwrap() + slack);
        // Mixture weights do not count.
        let mut reweighted = a.clone();
        reweighted.pi.reverse();
        prop_assert_eq!(param_delta(&a, &reweighted).unwrap(), 0.0);
    }

    #[test]
    fn model_json_round_trip_is_exact(seed in any::<u64>(), m in 1usize..4, d in 1usize..4, n in 1usize..4) {
        let original = model(seed, m, d, n);
        let text = original.to_json();
        let back = MixtureModel::<f64>::from_json(&text).unwrap();
        prop_assert_eq!(&back, &original);
        prop_assert_eq!(back.to_json(), text);
    }

    #[test]
    fn vectorize_round_trip(seed in any::<u64>(), d in 1usize..5, n in 1usize..5) {
        let theta = model(seed, 1, d, n).clusters.remove(0);
        let v = vectorize(&theta);
        prop_assert_eq!(v.len(), param_vector_len(d, n));
        prop_assert_eq!(devectorize(&v, d, n).unwrap(), theta);
    }

    #[test]
    fn valid_datasets_pass(seed in any::<u64>(), count in 1usize..6, n in 1usize..4) {
        let data = clean_series(seed, count, n);
        let summary = validate_dataset(&data).unwrap();
        prop_assert_eq!(summary.n_series, count);
        prop_assert_eq!(summary.obs_dim, n);
        prop_assert_eq!(summary.lengths, data.iter().map(|s| s.len()).collect::<Vec<_>>());
    }

    #[test]
    fn injected_violations_are_reported(seed in any::<u64>(), count in 2usize..6, kind in 0usize..6) {
        let mut data = clean_series(seed, count, 2);
        let mut r = rng(seed ^ 0xabc);
        let victim = r.gen_range(0..count);
        let s = &mut data[victim];
        let k = r.gen_range(1..s.len());
        let id = s.id.clone();
        match kind {
            0 => s.timestamps[k] = s.timestamps[k - 1],
            1 => s.timestamps.swap(k - 1, k),
            2 => s.observations[(k, 1)] = f64::NAN,
            3 => s.observations[(k, 0)] = f64::INFINITY,
            4 => *s = TimeSeriesSample::new(id.clone(), vec![0.0], DMatrix::zeros(1, 2)),
            _ => *s = TimeSeriesSample::new(id.clone(), s.timestamps.clone(), DMatrix::zeros(s.len(), 3)),
        }
        let err = validate_dataset(&data).unwrap_err();
        let ok = match (kind, &err) {
            (0 | 1, Error::NonIncreasingTimestamps { id: e, k: at }) => *e == id && *at == k + 1,
            (2, Error::NonFiniteValue { id: e, k: at, j }) => *e == id && *at == k + 1 && *j == 2,
            (3, Error::NonFiniteValue { id: e, k: at, j }) => *e == id && *at == k + 1 && *j == 1,
            (4, Error::TooShort { id: e }) => *e == id,
            // A mismatched first series makes every other one the odd one out.
            (5, Error::DimensionMismatch { .. }) => true,
            _ => false,
        };
        prop_assert!(ok, "kind {} gave {:?}", kind, err);
    }
}
