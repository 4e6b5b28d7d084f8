use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relage_core::ingest::{knn_impute, CohortTable, DiseaseStatus, SampleMeta, Sex};

fn cohort(beta: Array2<f64>) -> CohortTable {
    let samples = (0..beta.nrows())
        .map(|i| SampleMeta {
            id: format!("s{i}"),
            age: 20.0 + i as f64,
            sex: Sex::Unknown,
            disease: DiseaseStatus::Healthy,
            dataset_id: "d".into(),
        })
        .collect();
    let ids = (0..beta.ncols()).map(|j| format!("cg{j}")).collect();
    CohortTable::new(ids, samples, beta).unwrap()
}

fn holey(rng: &mut ChaCha8Rng, m: usize, n: usize, p: f64) -> Array2<f64> {
    let mut b = Array2::from_shape_simple_fn((m, n), || rng.random_range(0.0..1.0));
    for v in b.iter_mut() {
        if rng.random_bool(p) {
            *v = f64::NAN;
        }
    }
    // keep every column observed somewhere
    for c in 0..n {
        b[[c % m, c]] = 0.5;
    }
    b
}

/// Sorts every other sample by masked RMS distance and averages the first
/// `k` donors observing the site.
fn brute_force(beta: &Array2<f64>, k: usize) -> Array2<f64> {
    let (m, n) = beta.dim();
    let mut out = beta.clone();
    for s in 0..m {
        let mut dist = Vec::new();
        for o in 0..m {
            if o == s {
                continue;
            }
            let shared: Vec<usize> = (0..n).filter(|&c| !beta[[s, c]].is_nan() && !beta[[o, c]].is_nan()).collect();
            if shared.is_empty() {
                continue;
            }
            let ss: f64 = shared.iter().map(|&c| (beta[[s, c]] - beta[[o, c]]).powi(2)).sum();
            dist.push(((ss / shared.len() as f64).sqrt(), o));
        }
        dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for c in 0..n {
            if beta[[s, c]].is_nan() {
                let donors: Vec<f64> = dist.iter().map(|&(_, o)| beta[[o, c]]).filter(|v| !v.is_nan()).take(k).collect();
                out[[s, c]] = donors.iter().sum::<f64>() / donors.len() as f64;
            }
        }
    }
    out
}

#[test]
fn matches_the_brute_force_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for (m, n, k) in [(12, 6, 1), (20, 8, 3), (30, 5, 10)] {
        let beta = holey(&mut rng, m, n, 0.15);
        let got = knn_impute(&cohort(beta.clone()), k).unwrap().beta;
        let want = brute_force(&beta, k);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fills_every_hole_and_keeps_observed_values(seed in any::<u64>(), k in 1usize..5, p in 0.0f64..0.3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beta = holey(&mut rng, 15, 6, p);
        let once = knn_impute(&cohort(beta.clone()), k).unwrap();
        prop_assert_eq!(&knn_impute(&once, k).unwrap().beta, &once.beta);
        let out = once.beta;
        for (a, b) in beta.iter().zip(&out) {
            prop_assert!(b.is_finite());
            if !a.is_nan() {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn imputed_values_stay_within_observed_column_range(seed in any::<u64>(), k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beta = holey(&mut rng, 15, 6, 0.2);
        let out = knn_impute(&cohort(beta.clone()), k).unwrap().beta;
        for c in 0..6 {
            let obs: Vec<f64> = beta.column(c).iter().copied().filter(|v| !v.is_nan()).collect();
            let lo = obs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = obs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for v in out.column(c) {
                prop_assert!(*v >= lo - 1e-15 && *v <= hi + 1e-15);
            }
        }
    }
}
