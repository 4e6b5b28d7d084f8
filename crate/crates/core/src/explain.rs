//! Integrated-gradients node/feature attribution and branch occlusion.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Matrix, Tape};
use crate::error::{Error, Result};
use crate::evaluation::{mean, ols_slope};
use crate::model::{
    branch_outputs, fuse_and_regress, model_forward, ForwardOptions, GraphSet, ModelParams, ParamVars,
};

pub const DEFAULT_IG_STEPS: usize = 64;
pub const OCCLUSION_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct IgResult {
    /// Signed N × F attributions.
    pub ig: Matrix,
    pub f_x: f64,
    pub f_baseline: f64,
    /// `|Σ IG − (f(X) − f(0))|`.
    pub completeness_gap: f64,
}

/// Integrated gradients from the zero baseline for any differentiable `f`
/// returning its value and gradient at a point.
pub fn integrated_gradients_with<F>(mut f: F, x: &Matrix, steps: usize) -> Result<IgResult>
where
    F: FnMut(&Matrix) -> Result<(f64, Matrix)>,
{
    if steps == 0 {
        return Err(Error::Invalid("integrated gradients need at least one step".into()));
    }
    let mut sum = Matrix::zeros(x.dim());
    let mut prev: Option<Matrix> = None;
    let mut f_baseline = 0.0;
    let mut f_x = 0.0;
    for k in 0..=steps {
        let point = x * (k as f64 / steps as f64);
        let (value, grad) = f(&point)?;
        if grad.dim() != x.dim() {
            return Err(Error::Shape {
                op: "integrated_gradients",
                detail: format!("gradient {:?} for input {:?}", grad.dim(), x.dim()),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("integrated_gradients"));
        }
        if k == 0 {
            f_baseline = value;
        }
        if k == steps {
            f_x = value;
        }
        if let Some(p) = prev {
            sum += &((&p + &grad) * 0.5);
        }
        prev = Some(grad);
    }
    let ig = x * &(sum / steps as f64);
    let completeness_gap = (ig.sum() - (f_x - f_baseline)).abs();
    Ok(IgResult {
        ig,
        f_x,
        f_baseline,
        completeness_gap,
    })
}

/// Eval-mode prediction and its gradient with respect to the node features.
pub fn input_gradient(params: &ModelParams, graphs: &GraphSet, x: &Matrix) -> Result<(f64, Matrix)> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, false)?;
    let xv = tape.leaf(x.clone(), true)?;
    let trace = model_forward(&mut tape, &params.arch, &vars, graphs, xv, &ForwardOptions::eval())?;
    let mut g = tape.grad(trace.y, &[xv])?;
    Ok((tape.scalar(trace.y), g.remove(0)))
}

pub fn integrated_gradients(params: &ModelParams, graphs: &GraphSet, x: &Matrix, steps: usize) -> Result<IgResult> {
    integrated_gradients_with(|p| input_gradient(params, graphs, p), x, steps)
}

/// Row means (per node) and column means (per feature) of `|IG|`.
pub fn node_feature_scores(ig: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let abs = ig.mapv(f64::abs);
    let (n, f) = abs.dim();
    let v = abs.rows().into_iter().map(|r| r.sum() / f as f64).collect();
    let u = abs.columns().into_iter().map(|c| c.sum() / n as f64).collect();
    (v, u)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occlusion {
    pub y_full: f64,
    pub y_occluded: [f64; 3],
    /// Raw `|y_full − y_b|`.
    pub delta: [f64; 3],
    /// Normalized scores `Δ / (ΣΔ + ε)`.
    pub scores: [f64; 3],
}

/// Re-runs fusion and the head with each branch zeroed in turn.
pub fn branch_occlusion(params: &ModelParams, graphs: &GraphSet, x: &Matrix) -> Result<Occlusion> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, false)?;
    let xv = tape.constant(x.clone())?;
    let opts = ForwardOptions::eval();
    let h = branch_outputs(&mut tape, &params.arch, &vars, graphs, xv, &opts)?;
    let full = fuse_and_regress(&mut tape, &params.arch, &vars, h, &opts)?;
    let y_full = tape.scalar(full.y);
    let mut y_occluded = [0.0; 3];
    for b in 0..3 {
        let mut hb = h;
        hb[b] = None;
        let t = fuse_and_regress(&mut tape, &params.arch, &vars, hb, &opts)?;
        y_occluded[b] = tape.scalar(t.y);
    }
    let delta = y_occluded.map(|y| (y_full - y).abs());
    let total: f64 = delta.iter().sum();
    Ok(Occlusion {
        y_full,
        y_occluded,
        delta,
        scores: delta.map(|d| d / (total + OCCLUSION_EPS)),
    })
}

#[derive(Clone, Debug)]
pub struct ExplanationReport {
    pub sample_id: String,
    pub node_scores: Vec<f64>,
    pub feature_scores: Vec<f64>,
    pub ig: IgResult,
    pub occlusion: Occlusion,
}

impl ExplanationReport {
    pub fn graph_scores(&self) -> [f64; 3] {
        self.occlusion.scores
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "sample_id": self.sample_id,
            "prediction": self.ig.f_x,
            "baseline_prediction": self.ig.f_baseline,
            "node_scores": self.node_scores,
            "feature_scores": self.feature_scores,
            "graph_scores": self.occlusion.scores,
            "graph_deltas": self.occlusion.delta,
            "completeness_gap": self.ig.completeness_gap,
        })
    }
}

pub fn explain_sample(
    params: &ModelParams,
    graphs: &GraphSet,
    sample_id: &str,
    x: &Matrix,
    steps: usize,
) -> Result<ExplanationReport> {
    let ig = integrated_gradients(params, graphs, x, steps)?;
    let (node_scores, feature_scores) = node_feature_scores(&ig.ig);
    Ok(ExplanationReport {
        sample_id: sample_id.to_string(),
        node_scores,
        feature_scores,
        ig,
        occlusion: branch_occlusion(params, graphs, x)?,
    })
}

pub fn explain_samples(
    params: &ModelParams,
    graphs: &GraphSet,
    ids: &[String],
    features: &[Matrix],
    steps: usize,
) -> Result<Vec<ExplanationReport>> {
    ids.par_iter()
        .zip(features.par_iter())
        .map(|(id, x)| explain_sample(params, graphs, id, x, steps))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortExplanation {
    pub feature_importance: Vec<f64>,
    pub graph_importance: [f64; 3],
    pub node_importance: Vec<f64>,
    /// OLS slope of node importance against age; 0 when ages do not vary.
    pub node_age_slope: Vec<f64>,
    pub top_nodes: Vec<usize>,
    pub top_increasing: Vec<usize>,
    pub top_decreasing: Vec<usize>,
}

fn ranked(values: &[f64], k: usize, keep: impl Fn(f64) -> bool, descending: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| keep(values[i])).collect();
    idx.sort_by(|&a, &b| {
        let o = values[a].total_cmp(&values[b]);
        (if descending { o.reverse() } else { o }).then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

pub fn aggregate_explanations(reports: &[ExplanationReport], ages: &[f64], top_k: usize) -> Result<CohortExplanation> {
    let Some(first) = reports.first() else {
        return Err(Error::Invalid("no explanations to aggregate".into()));
    };
    if ages.len() != reports.len() {
        return Err(Error::Shape {
            op: "aggregate_explanations",
            detail: format!("{} reports, {} ages", reports.len(), ages.len()),
        });
    }
    let n = first.node_scores.len();
    let f = first.feature_scores.len();
    if reports.iter().any(|r| r.node_scores.len() != n || r.feature_scores.len() != f) {
        return Err(Error::Invalid("explanations disagree on node or feature count".into()));
    }
    let col = |get: &dyn Fn(&ExplanationReport) -> f64| -> Vec<f64> { reports.iter().map(get).collect() };
    let feature_importance = (0..f).map(|j| mean(&col(&|r| r.feature_scores[j]))).collect();
    let graph_importance = [0, 1, 2].map(|b| mean(&col(&|r| r.occlusion.scores[b])));
    let mut node_importance = Vec::with_capacity(n);
    let mut node_age_slope = Vec::with_capacity(n);
    for i in 0..n {
        let series = col(&|r| r.node_scores[i]);
        node_importance.push(mean(&series));
        node_age_slope.push(ols_slope(ages, &series).unwrap_or(0.0));
    }
    Ok(CohortExplanation {
        top_nodes: ranked(&node_importance, top_k, |_| true, true),
        top_increasing: ranked(&node_age_slope, top_k, |s| s > 0.0, true),
        top_decreasing: ranked(&node_age_slope, top_k, |s| s < 0.0, false),
        feature_importance,
        graph_importance,
        node_importance,
        node_age_slope,
    })
}
