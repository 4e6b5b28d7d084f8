//! Regression metrics, age acceleration and graph ablation.

mod metrics;
mod strata;

pub use metrics::{
    age_acceleration, cohort_sensitivity, mean, mixed_precision, ols_slope, regression_metrics,
    MetricReport,
};
pub use strata::{default_age_bins, stratified_aa, validate_bins, AgeBin, StratumRow};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{CohortTable, NodeFeatureTemplate};
use crate::model::{Architecture, BranchMask, GraphSet};
use crate::relgraphs::GraphBundle;
use crate::training::{initial_params, predict_samples, train_on_split, SampleSet, SplitPlan, TrainConfig};

/// Table rows in reporting order: leave-one-out, single graph, full.
pub const ABLATION_VARIANTS: [(&str, BranchMask); 7] = [
    ("w/o G1", [false, true, true]),
    ("w/o G2", [true, false, true]),
    ("w/o G3", [true, true, false]),
    ("only G1", [true, false, false]),
    ("only G2", [false, true, false]),
    ("only G3", [false, false, true]),
    ("full", [true, true, true]),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub branches: BranchMask,
    pub metrics: MetricReport,
    pub best_epoch: usize,
}

/// Trains one branch subset and scores it on the split's test samples.
#[allow(clippy::too_many_arguments)]
pub fn ablation_run(
    bundle: &GraphBundle,
    template: &NodeFeatureTemplate,
    cohort: &CohortTable,
    split: &SplitPlan,
    arch: &Architecture,
    config: &TrainConfig,
    subset: BranchMask,
) -> Result<(MetricReport, usize)> {
    if subset.iter().all(|&b| !b) {
        return Err(Error::Invalid("ablation subset must keep at least one graph".into()));
    }
    let train_set = SampleSet::from_cohort(template, cohort, &split.train_ids)?;
    let init = initial_params(arch.clone(), &train_set.ages)?;
    let out = train_on_split(init, bundle, template, cohort, split, config, subset)?;
    let test = SampleSet::from_cohort(template, cohort, &split.test_ids)?;
    let preds = predict_samples(&out.params, &GraphSet::from_bundle(bundle)?, &test, subset)?;
    Ok((regression_metrics(&test.ages, &preds)?, out.best_epoch))
}

pub fn ablation_table(
    bundle: &GraphBundle,
    template: &NodeFeatureTemplate,
    cohort: &CohortTable,
    split: &SplitPlan,
    arch: &Architecture,
    config: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    ABLATION_VARIANTS
        .iter()
        .map(|&(name, mask)| {
            log::info!("ablation variant {name}");
            let (metrics, best_epoch) = ablation_run(bundle, template, cohort, split, arch, config, mask)?;
            Ok(AblationRow {
                variant: name.to_string(),
                branches: mask,
                metrics,
                best_epoch,
            })
        })
        .collect()
}
