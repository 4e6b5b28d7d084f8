use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;

use super::cohort::CohortTable;
use crate::error::{Error, Result};

/// Root-mean-square difference over sites observed in both rows, i.e. the
/// Euclidean distance divided by the square root of the shared-site count.
/// `None` when the rows share no observed site.
pub fn masked_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut shared = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        if !x.is_nan() && !y.is_nan() {
            sum += (x - y) * (x - y);
            shared += 1;
        }
    }
    (shared > 0).then(|| (sum / shared as f64).sqrt())
}

/// Fills each missing beta value with the mean of that site over the `k`
/// nearest samples having it observed. Observed entries are untouched and
/// distances always use the original (pre-imputation) matrix.
pub fn knn_impute(cohort: &CohortTable, k: usize) -> Result<CohortTable> {
    if k == 0 {
        return Err(Error::Invalid("knn_impute needs k >= 1".into()));
    }
    let beta = &cohort.beta;
    let (n, m) = beta.dim();
    if cohort.missing_count() == 0 {
        return Ok(cohort.clone());
    }
    if n < k + 1 {
        return Err(Error::Invalid(format!(
            "knn_impute with k={k} needs at least {} samples, cohort has {n}",
            k + 1
        )));
    }
    for c in 0..m {
        if beta.column(c).iter().all(|v| v.is_nan()) {
            return Err(Error::Invalid(format!(
                "site {} is missing in every sample",
                cohort.cpg_ids[c]
            )));
        }
    }

    let rows_with_holes: Vec<usize> = (0..n)
        .filter(|&s| beta.row(s).iter().any(|v| v.is_nan()))
        .collect();

    let filled: Vec<(usize, Vec<(usize, f64)>)> = rows_with_holes
        .par_iter()
        .map(|&s| {
            let mut neighbours: Vec<(f64, usize)> = (0..n)
                .filter(|&o| o != s)
                .filter_map(|o| masked_distance(beta.row(s), beta.row(o)).map(|d| (d, o)))
                .collect();
            neighbours.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut cells = Vec::new();
            for c in 0..m {
                if !beta[[s, c]].is_nan() {
                    continue;
                }
                let donors: Vec<f64> = neighbours
                    .iter()
                    .map(|&(_, o)| beta[[o, c]])
                    .filter(|v| !v.is_nan())
                    .take(k)
                    .collect();
                if donors.len() < k {
                    log::warn!(
                        "sample {}, site {}: only {} of {k} neighbours observed, using all",
                        cohort.samples[s].id,
                        cohort.cpg_ids[c],
                        donors.len()
                    );
                }
                if donors.is_empty() {
                    return Err(Error::Invalid(format!(
                        "no neighbour of sample {} observes site {}",
                        cohort.samples[s].id, cohort.cpg_ids[c]
                    )));
                }
                cells.push((c, donors.iter().sum::<f64>() / donors.len() as f64));
            }
            Ok((s, cells))
        })
        .collect::<Result<_>>()?;

    let mut out: Array2<f64> = beta.clone();
    for (s, cells) in filled {
        for (c, v) in cells {
            out[[s, c]] = v;
        }
    }
    Ok(CohortTable {
        cpg_ids: cohort.cpg_ids.clone(),
        samples: cohort.samples.clone(),
        beta: out,
    })
}
