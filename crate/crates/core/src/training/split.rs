use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::CohortTable;

pub const TEST_FRACTION: f64 = 0.2;
pub const VAL_FRACTION: f64 = 0.2;
pub const N_STRATA: usize = 10;
pub const MIN_HEALTHY: usize = 10;

/// Healthy samples partitioned into test, train and validation sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub test_ids: Vec<String>,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

/// Orders `idx` so that every contiguous window is spread across age deciles:
/// equal-count deciles by age, shuffled within, then interleaved.
fn decile_order(idx: &[usize], ages: &[f64], rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut sorted = idx.to_vec();
    sorted.sort_by(|&a, &b| ages[a].total_cmp(&ages[b]).then(a.cmp(&b)));
    let n = sorted.len();
    (0..N_STRATA)
        .map(|d| {
            let mut bucket = sorted[d * n / N_STRATA..(d + 1) * n / N_STRATA].to_vec();
            bucket.shuffle(rng);
            bucket
        })
        .collect()
}

/// Takes `fraction` of every stratum by systematic selection over the
/// concatenated strata, so rounding error never exceeds one sample.
fn take_fraction(strata: &[Vec<usize>], fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut picked = Vec::new();
    let mut rest = Vec::new();
    for (p, &i) in strata.iter().flatten().enumerate() {
        if ((p + 1) as f64 * fraction).floor() > (p as f64 * fraction).floor() {
            picked.push(i);
        } else {
            rest.push(i);
        }
    }
    (picked, rest)
}

pub fn make_split(cohort: &CohortTable, seed: u64) -> Result<SplitPlan> {
    let healthy = cohort.healthy_indices();
    if healthy.len() < MIN_HEALTHY {
        return Err(Error::Invalid(format!(
            "split needs at least {MIN_HEALTHY} healthy samples, cohort has {}",
            healthy.len()
        )));
    }
    let ages = cohort.ages();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (test, rest) = take_fraction(&decile_order(&healthy, &ages, &mut rng), TEST_FRACTION);
    let (val, train) = take_fraction(&decile_order(&rest, &ages, &mut rng), VAL_FRACTION);
    let ids = |v: Vec<usize>| {
        let mut v = v;
        v.sort_unstable();
        v.into_iter().map(|i| cohort.samples[i].id.clone()).collect()
    };
    Ok(SplitPlan {
        seed,
        test_ids: ids(test),
        train_ids: ids(train),
        val_ids: ids(val),
    })
}
