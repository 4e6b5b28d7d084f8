use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{Adam, AdamConfig};
use super::split::SplitPlan;
use crate::diffcore::{Matrix, Tape};
use crate::error::{Error, Result};
use crate::evaluation::{mean, regression_metrics};
use crate::hashing::hash_ids;
use crate::ingest::{CohortTable, NodeFeatureTemplate};
use crate::model::{
    dropout_seed, model_forward, predict, Architecture, BranchMask, ForwardOptions, GraphSet,
    ModelParams, ParamVars, ALL_BRANCHES,
};
use crate::relgraphs::GraphBundle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Mae,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 16,
            max_epochs: 300,
            patience: 20,
            seed: 0,
            loss: LossKind::Mse,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Invalid("batch_size, max_epochs and patience must be positive".into()));
        }
        Ok(())
    }
}

/// Feature matrices and ages for a list of samples.
#[derive(Clone, Debug)]
pub struct SampleSet {
    pub ids: Vec<String>,
    pub ages: Vec<f64>,
    pub features: Vec<Matrix>,
}

impl SampleSet {
    /// `cohort` columns must follow the template's node order.
    pub fn from_cohort(template: &NodeFeatureTemplate, cohort: &CohortTable, ids: &[String]) -> Result<Self> {
        if cohort.cpg_ids != template.cpg_ids {
            return Err(Error::Invalid("cohort sites are not aligned to the annotation order".into()));
        }
        let index = cohort.id_index();
        let mut ages = Vec::with_capacity(ids.len());
        let mut features = Vec::with_capacity(ids.len());
        for id in ids {
            let &i = index
                .get(id.as_str())
                .ok_or_else(|| Error::Invalid(format!("unknown sample id {id}")))?;
            ages.push(cohort.samples[i].age);
            features.push(template.instantiate(cohort.beta.row(i))?);
        }
        Ok(SampleSet {
            ids: ids.to_vec(),
            ages,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Loss of one sample and its gradient for every parameter block.
pub fn sample_gradient(
    params: &ModelParams,
    graphs: &GraphSet,
    x: &Matrix,
    age: f64,
    loss: LossKind,
    opts: &ForwardOptions,
) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, true)?;
    let xv = tape.constant(x.clone())?;
    let trace = model_forward(&mut tape, &params.arch, &vars, graphs, xv, opts)?;
    let target = tape.constant(Matrix::from_elem((1, 1), age))?;
    let diff = tape.sub(trace.y, target)?;
    let l = match loss {
        LossKind::Mse => tape.square(diff)?,
        LossKind::Mae => tape.abs(diff)?,
    };
    let grads = tape.grad(l, &vars.all)?;
    Ok((tape.scalar(l), grads))
}

/// Mean loss and mean gradient over `members`, accumulated per sample in
/// index order so the result does not depend on scheduling.
pub fn batch_gradient(
    params: &ModelParams,
    graphs: &GraphSet,
    data: &SampleSet,
    members: &[usize],
    loss: LossKind,
    opts: &[ForwardOptions],
) -> Result<(f64, Vec<Matrix>)> {
    if members.is_empty() || opts.len() != members.len() {
        return Err(Error::Invalid("batch needs one forward option per member".into()));
    }
    let parts: Vec<Result<(f64, Vec<Matrix>)>> = members
        .par_iter()
        .zip(opts.par_iter())
        .map(|(&i, o)| sample_gradient(params, graphs, &data.features[i], data.ages[i], loss, o))
        .collect();
    let mut total = 0.0;
    let mut acc: Option<Vec<Matrix>> = None;
    for p in parts {
        let (l, g) = p?;
        total += l;
        match acc.as_mut() {
            None => acc = Some(g),
            Some(a) => {
                for (a, g) in a.iter_mut().zip(&g) {
                    *a += g;
                }
            }
        }
    }
    let k = members.len() as f64;
    let mut grads = acc.expect("non-empty batch");
    for g in grads.iter_mut() {
        *g /= k;
    }
    Ok((total / k, grads))
}

/// Eval-mode predictions in input order.
pub fn predict_samples(params: &ModelParams, graphs: &GraphSet, data: &SampleSet, mask: BranchMask) -> Result<Vec<f64>> {
    data.features
        .par_iter()
        .map(|x| predict(params, graphs, x, mask))
        .collect()
}

/// Predicted ages for `ids`, looked up in `cohort`.
pub fn predict_batch(
    params: &ModelParams,
    graphs: &GraphSet,
    template: &NodeFeatureTemplate,
    cohort: &CohortTable,
    ids: &[String],
) -> Result<Vec<f64>> {
    check_arch(&params.arch, graphs)?;
    let data = SampleSet::from_cohort(template, cohort, ids)?;
    predict_samples(params, graphs, &data, ALL_BRANCHES)
}

fn check_arch(arch: &Architecture, graphs: &GraphSet) -> Result<()> {
    if arch.n_nodes != graphs.n_nodes() {
        return Err(Error::Invalid(format!(
            "model expects {} nodes, graphs have {}",
            arch.n_nodes,
            graphs.n_nodes()
        )));
    }
    Ok(())
}

/// Starting bias of the per-node compression, so its relu begins active.
pub const MERGE_BIAS_INIT: f64 = 0.1;

/// Initial parameters with the output bias at the mean training age and the
/// compression bias at [`MERGE_BIAS_INIT`].
pub fn initial_params(arch: Architecture, train_ages: &[f64]) -> Result<ModelParams> {
    let mut p = ModelParams::init(arch)?;
    p.head.merge.bias.fill(MERGE_BIAS_INIT);
    if !train_ages.is_empty() {
        p.head.out.bias.fill(mean(train_ages));
    }
    Ok(p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_mse: f64,
    pub val_frc: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
    /// Non-finite values appeared; parameters are the last good checkpoint.
    Diverged { epoch: usize },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters were kept; 0 when no epoch completed.
    pub best_epoch: usize,
    pub stop: StopReason,
}

pub fn write_log_csv(path: &std::path::Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let io = |e: csv::Error| Error::parse(path, e.to_string());
    w.write_record(["epoch", "train_loss", "val_mae", "val_mse", "val_frc"]).map_err(io)?;
    for r in log {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_mae.to_string(),
            r.val_mse.to_string(),
            r.val_frc.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mini-batch training with early stopping on validation MAE.
pub fn train(
    init: ModelParams,
    graphs: &GraphSet,
    train_set: &SampleSet,
    val_set: &SampleSet,
    config: &TrainConfig,
    mask: BranchMask,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_arch(&init.arch, graphs)?;
    if train_set.is_empty() || val_set.len() < 2 {
        return Err(Error::Invalid("training needs samples and at least 2 validation samples".into()));
    }
    let mut params = init;
    let mut best = params.clone();
    let mut best_mae = f64::INFINITY;
    let mut best_epoch = 0;
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let epoch_seed = dropout_seed(config.seed, epoch as u64);
        let mut loss_sum = 0.0;
        let mut diverged = false;
        for batch in order.chunks(config.batch_size) {
            let opts: Vec<ForwardOptions> = batch
                .iter()
                .map(|&i| ForwardOptions {
                    train: true,
                    seed: dropout_seed(epoch_seed, i as u64),
                    mask,
                })
                .collect();
            match batch_gradient(&params, graphs, train_set, batch, config.loss, &opts) {
                Ok((l, grads)) => {
                    loss_sum += l * batch.len() as f64;
                    adam.step(&mut params, &grads);
                    if params.blocks().iter().any(|(_, b)| b.iter().any(|v| !v.is_finite())) {
                        diverged = true;
                        break;
                    }
                }
                Err(e) if e.is_numerical() => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let val = if diverged {
            None
        } else {
            match predict_samples(&params, graphs, val_set, mask) {
                Ok(p) => Some(regression_metrics(&val_set.ages, &p)?),
                Err(e) if e.is_numerical() => None,
                Err(e) => return Err(e),
            }
        };
        let Some(val) = val else {
            log::warn!("training diverged in epoch {epoch}; keeping epoch {best_epoch}");
            stop = StopReason::Diverged { epoch };
            break;
        };
        let train_loss = loss_sum / train_set.len() as f64;
        log::info!(
            "epoch {epoch}: train_loss {train_loss:.4} val_mae {:.4} val_mse {:.4}",
            val.mae,
            val.mse
        );
        log.push(EpochLog {
            epoch,
            train_loss,
            val_mae: val.mae,
            val_mse: val.mse,
            val_frc: val.frc,
        });
        if val.mae < best_mae {
            best_mae = val.mae;
            best_epoch = epoch;
            best = params.clone();
        } else if epoch - best_epoch >= config.patience {
            stop = StopReason::Patience;
            break;
        }
    }
    Ok(TrainOutcome {
        params: best,
        log,
        best_epoch,
        stop,
    })
}

/// Errors unless the bundle's co-methylation graph was estimated from exactly
/// the split's training samples.
pub fn check_provenance(bundle: &GraphBundle, split: &SplitPlan) -> Result<()> {
    if bundle.provenance.sample_ids_hash != hash_ids(&split.train_ids) {
        return Err(Error::Invalid(
            "graph bundle was not built from this split's training samples".into(),
        ));
    }
    Ok(())
}

/// Trains on a split of `cohort`, checking that graphs and split agree.
pub fn train_on_split(
    init: ModelParams,
    bundle: &GraphBundle,
    template: &NodeFeatureTemplate,
    cohort: &CohortTable,
    split: &SplitPlan,
    config: &TrainConfig,
    mask: BranchMask,
) -> Result<TrainOutcome> {
    check_provenance(bundle, split)?;
    bundle.check_template(template)?;
    let graphs = GraphSet::from_bundle(bundle)?;
    let train_set = SampleSet::from_cohort(template, cohort, &split.train_ids)?;
    let val_set = SampleSet::from_cohort(template, cohort, &split.val_ids)?;
    train(init, &graphs, &train_set, &val_set, config, mask)
}

