//! Scatter-style aggregation of per-arc messages onto their target nodes.

use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use super::tape::Matrix;
use crate::error::{Error, Result};

/// Guard added under the square root of the std aggregator.
pub const STD_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Max,
    Min,
    Std,
}

impl Aggregation {
    pub const ALL: [Aggregation; 4] = [
        Aggregation::Mean,
        Aggregation::Max,
        Aggregation::Min,
        Aggregation::Std,
    ];
}

pub(crate) enum SegmentSaved {
    Mean { counts: Vec<usize> },
    /// Winning arc per (node, column); `usize::MAX` for isolated nodes.
    Extremum { arg: Vec<usize>, cols: usize },
    Std { counts: Vec<usize>, mean: Matrix, std: Matrix, active: Vec<bool> },
}

impl SegmentSaved {
    pub(crate) fn hash_branches<H: Hasher>(&self, h: &mut H) {
        match self {
            SegmentSaved::Mean { .. } => {}
            SegmentSaved::Extremum { arg, .. } => arg.hash(h),
            SegmentSaved::Std { active, .. } => active.hash(h),
        }
    }
}

fn counts(dst: &[usize], n_nodes: usize) -> Vec<usize> {
    let mut c = vec![0usize; n_nodes];
    for &d in dst {
        c[d] += 1;
    }
    c
}

/// Aggregates `messages` (one row per arc) onto `n_nodes` targets.
///
/// Nodes without incoming arcs get a zero row for every kind. The std
/// aggregate is `sqrt(max(E[x²] - E[x]², 0) + STD_EPS)`. Max and min keep the
/// first arc (in arc order) among ties.
pub(crate) fn aggregate(
    messages: &Matrix,
    dst: &[usize],
    n_nodes: usize,
    kind: Aggregation,
) -> Result<(Matrix, SegmentSaved)> {
    if messages.nrows() != dst.len() {
        return Err(Error::Shape {
            op: "segment_aggregate",
            detail: format!("{} messages for {} arcs", messages.nrows(), dst.len()),
        });
    }
    if let Some(&bad) = dst.iter().find(|&&d| d >= n_nodes) {
        return Err(Error::Shape {
            op: "segment_aggregate",
            detail: format!("target {bad} out of range for {n_nodes} nodes"),
        });
    }
    let cols = messages.ncols();
    let mut out = Matrix::zeros((n_nodes, cols));
    match kind {
        Aggregation::Mean => {
            let counts = counts(dst, n_nodes);
            for (e, &d) in dst.iter().enumerate() {
                let mut row = out.row_mut(d);
                row += &messages.row(e);
            }
            for (n, &c) in counts.iter().enumerate() {
                if c > 0 {
                    out.row_mut(n).mapv_inplace(|x| x / c as f64);
                }
            }
            Ok((out, SegmentSaved::Mean { counts }))
        }
        Aggregation::Max | Aggregation::Min => {
            let better = |new: f64, old: f64| match kind {
                Aggregation::Max => new > old,
                _ => new < old,
            };
            let mut arg = vec![usize::MAX; n_nodes * cols];
            for (e, &d) in dst.iter().enumerate() {
                let m = messages.row(e);
                for c in 0..cols {
                    let slot = &mut arg[d * cols + c];
                    if *slot == usize::MAX || better(m[c], messages[[*slot, c]]) {
                        *slot = e;
                    }
                }
            }
            for n in 0..n_nodes {
                for c in 0..cols {
                    let e = arg[n * cols + c];
                    if e != usize::MAX {
                        out[[n, c]] = messages[[e, c]];
                    }
                }
            }
            Ok((out, SegmentSaved::Extremum { arg, cols }))
        }
        Aggregation::Std => {
            let counts = counts(dst, n_nodes);
            let mut mean = Matrix::zeros((n_nodes, cols));
            let mut sq = Matrix::zeros((n_nodes, cols));
            for (e, &d) in dst.iter().enumerate() {
                let m = messages.row(e);
                let mut mr = mean.row_mut(d);
                mr += &m;
                let mut sr = sq.row_mut(d);
                sr.zip_mut_with(&m, |s, &x| *s += x * x);
            }
            let mut active = vec![false; n_nodes * cols];
            for n in 0..n_nodes {
                let c_n = counts[n];
                if c_n == 0 {
                    continue;
                }
                let inv = 1.0 / c_n as f64;
                for c in 0..cols {
                    let mu = mean[[n, c]] * inv;
                    let ex2 = sq[[n, c]] * inv;
                    mean[[n, c]] = mu;
                    let var = ex2 - mu * mu;
                    active[n * cols + c] = var > 0.0;
                    out[[n, c]] = (var.max(0.0) + STD_EPS).sqrt();
                }
            }
            let std = out.clone();
            Ok((
                out,
                SegmentSaved::Std {
                    counts,
                    mean,
                    std,
                    active,
                },
            ))
        }
    }
}

pub(crate) fn adjoint(g: &Matrix, messages: &Matrix, dst: &[usize], saved: &SegmentSaved) -> Matrix {
    let mut ga = Matrix::zeros(messages.dim());
    match saved {
        SegmentSaved::Mean { counts } => {
            for (e, &d) in dst.iter().enumerate() {
                let inv = 1.0 / counts[d] as f64;
                ga.row_mut(e).zip_mut_with(&g.row(d), |a, &b| *a = b * inv);
            }
        }
        SegmentSaved::Extremum { arg, cols } => {
            for (slot, &e) in arg.iter().enumerate() {
                if e != usize::MAX {
                    let (n, c) = (slot / cols, slot % cols);
                    ga[[e, c]] += g[[n, c]];
                }
            }
        }
        SegmentSaved::Std {
            counts,
            mean,
            std,
            active,
        } => {
            let cols = messages.ncols();
            for (e, &d) in dst.iter().enumerate() {
                let inv = 1.0 / counts[d] as f64;
                for c in 0..cols {
                    if !active[d * cols + c] {
                        continue;
                    }
                    let x = messages[[e, c]];
                    let mu = mean[[d, c]];
                    ga[[e, c]] = g[[d, c]] * (x - mu) * inv / std[[d, c]];
                }
            }
        }
    }
    ga
}
