use std::sync::Arc;

use ndarray::{Array1, Array2};

use super::params::{Architecture, ModelParams};
use crate::diffcore::{Aggregation, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::relgraphs::{GraphBundle, Relation, RelationalGraph};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Degree scalers for one node set: identity, amplification, attenuation.
pub fn degree_scalers(degrees: &[usize], delta: f64) -> (Array1<f64>, Array1<f64>) {
    let n = degrees.len();
    if delta == 0.0 {
        if n > 0 {
            log::warn!("graph has no arcs; amplification and attenuation scalers set to 0");
        }
        return (Array1::zeros(n), Array1::zeros(n));
    }
    let amp = degrees.iter().map(|&d| (d as f64 + 1.0).ln() / delta).collect();
    let att = degrees
        .iter()
        .map(|&d| if d == 0 { 0.0 } else { delta / (d as f64 + 1.0).ln() })
        .collect();
    (amp, att)
}

/// Graph topology laid out for the tape: arc endpoints, attribute column, scalers.
#[derive(Clone, Debug)]
pub struct PreparedGraph {
    pub n_nodes: usize,
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    pub attr: Matrix,
    pub amplification: Arc<Array1<f64>>,
    pub attenuation: Arc<Array1<f64>>,
}

impl PreparedGraph {
    pub fn new(g: &RelationalGraph) -> Self {
        let (amp, att) = degree_scalers(&g.degrees, g.delta);
        PreparedGraph {
            n_nodes: g.n_nodes,
            src: g.arcs.iter().map(|a| a.0).collect(),
            dst: g.arcs.iter().map(|a| a.1).collect(),
            attr: Array2::from_shape_vec((g.edge_attr.len(), 1), g.edge_attr.clone())
                .expect("one attribute per arc"),
            amplification: Arc::new(amp),
            attenuation: Arc::new(att),
        }
    }
}

/// The three prepared relations in branch order G1, G2, G3.
#[derive(Clone, Debug)]
pub struct GraphSet {
    pub graphs: [PreparedGraph; 3],
}

impl GraphSet {
    pub fn new(graphs: [&RelationalGraph; 3]) -> Result<Self> {
        let n = graphs[0].n_nodes;
        if graphs.iter().any(|g| g.n_nodes != n) {
            return Err(Error::Invalid("relations disagree on node count".into()));
        }
        Ok(GraphSet {
            graphs: graphs.map(PreparedGraph::new),
        })
    }

    pub fn from_bundle(bundle: &GraphBundle) -> Result<Self> {
        let [a, b, c] = Relation::ALL;
        GraphSet::new([bundle.graph(a), bundle.graph(b), bundle.graph(c)])
    }

    pub fn n_nodes(&self) -> usize {
        self.graphs[0].n_nodes
    }
}

/// Which branches contribute. An inactive branch enters fusion as a zero block.
pub type BranchMask = [bool; 3];
pub const ALL_BRANCHES: BranchMask = [true; 3];

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BranchVars {
    pub pre: LinearVars,
    pub post: LinearVars,
}

#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub hidden: LinearVars,
    pub out: LinearVars,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub merge: LinearVars,
    pub hidden: LinearVars,
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub out: LinearVars,
}

/// Parameters recorded on a tape, in the block order of [`ModelParams::blocks`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub branches: [BranchVars; 3],
    pub gate: GateVars,
    pub head: HeadVars,
    pub all: Vec<Var>,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, params: &ModelParams, requires_grad: bool) -> Result<Self> {
        let mut all = Vec::with_capacity(20);
        for (_, m) in params.blocks() {
            all.push(tape.leaf(m.clone(), requires_grad)?);
        }
        let lin = |i: usize| LinearVars {
            weight: all[i],
            bias: all[i + 1],
        };
        let branch = |k: usize| BranchVars {
            pre: lin(4 * k),
            post: lin(4 * k + 2),
        };
        Ok(ParamVars {
            branches: [branch(0), branch(1), branch(2)],
            gate: GateVars {
                hidden: lin(12),
                out: lin(14),
            },
            head: HeadVars {
                merge: lin(16),
                hidden: lin(18),
                ln_gain: all[20],
                ln_bias: all[21],
                out: lin(22),
            },
            all,
        })
    }
}

fn affine(tape: &mut Tape, x: Var, l: LinearVars) -> Result<Var> {
    let xw = tape.matmul(x, l.weight)?;
    tape.add_row(xw, l.bias)
}

/// One PNA layer: messages, 4 aggregators × 3 scalers, self-concatenation, post-linear.
///
/// Returns the pre-activation N × d_hidden representation.
pub fn pna_branch_forward(
    tape: &mut Tape,
    branch: &BranchVars,
    graph: &PreparedGraph,
    x: Var,
) -> Result<Var> {
    let (n, f) = tape.shape(x);
    if n != graph.n_nodes {
        return Err(Error::Shape {
            op: "pna_branch_forward",
            detail: format!("{n} feature rows for {} nodes", graph.n_nodes),
        });
    }
    if tape.shape(branch.pre.weight).0 != 2 * f + 1 {
        return Err(Error::Shape {
            op: "pna_branch_forward",
            detail: format!(
                "pre-linear has {} inputs, features imply {}",
                tape.shape(branch.pre.weight).0,
                2 * f + 1
            ),
        });
    }
    // [x_i ‖ x_j ‖ a_ij] · W splits into per-node products gathered onto arcs.
    let w_target = tape.slice_rows(branch.pre.weight, 0, f)?;
    let w_source = tape.slice_rows(branch.pre.weight, f, 2 * f)?;
    let w_attr = tape.slice_rows(branch.pre.weight, 2 * f, 2 * f + 1)?;
    let p_target = tape.matmul(x, w_target)?;
    let p_source = tape.matmul(x, w_source)?;
    let on_dst = tape.gather_rows(p_target, graph.dst.clone())?;
    let on_src = tape.gather_rows(p_source, graph.src.clone())?;
    let attr = tape.constant(graph.attr.clone())?;
    let from_attr = tape.matmul(attr, w_attr)?;
    let m = tape.add(on_dst, on_src)?;
    let m = tape.add(m, from_attr)?;
    let m = tape.add_row(m, branch.pre.bias)?;
    let messages = tape.relu(m)?;

    let mut aggregates = Vec::with_capacity(Aggregation::ALL.len());
    for kind in Aggregation::ALL {
        aggregates.push(tape.segment_aggregate(messages, graph.dst.clone(), n, kind)?);
    }
    let mut parts = Vec::with_capacity(1 + 3 * aggregates.len());
    parts.push(x);
    parts.extend(aggregates.iter().copied());
    for scaler in [&graph.amplification, &graph.attenuation] {
        for &a in &aggregates {
            parts.push(tape.scale_rows(a, scaler.clone())?);
        }
    }
    let cat = tape.concat_cols(&parts)?;
    affine(tape, cat, branch.post)
}

/// Gate over `[H1 ‖ H2 ‖ H3]` and the convex combination of the branches.
///
/// Returns `(H_f, α)`.
pub fn gated_fusion(tape: &mut Tape, gate: &GateVars, h: [Var; 3]) -> Result<(Var, Var)> {
    let shape = tape.shape(h[0]);
    if h.iter().any(|&v| tape.shape(v) != shape) {
        return Err(Error::Shape {
            op: "gated_fusion",
            detail: "branch representations differ in shape".into(),
        });
    }
    let z = tape.concat_cols(&h)?;
    let hidden = affine(tape, z, gate.hidden)?;
    let hidden = tape.relu(hidden)?;
    let logits = affine(tape, hidden, gate.out)?;
    let alpha = tape.row_softmax(logits)?;
    let mut fused = None;
    for (k, &hk) in h.iter().enumerate() {
        let a = tape.slice_cols(alpha, k, k + 1)?;
        let term = tape.mul_col(hk, a)?;
        fused = Some(match fused {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok((fused.expect("three branches"), alpha))
}

/// Per-node compression, transpose readout, and the regression MLP.
pub fn readout_and_regress(
    tape: &mut Tape,
    head: &HeadVars,
    fused: Var,
    dropout: f64,
    train: bool,
    seed: u64,
) -> Result<Var> {
    let n = tape.shape(fused).0;
    let width = tape.shape(head.hidden.weight).0;
    if n != width {
        return Err(Error::Shape {
            op: "readout_and_regress",
            detail: format!("{n} nodes but head expects {width}"),
        });
    }
    let u = affine(tape, fused, head.merge)?;
    let u = tape.relu(u)?;
    let v = tape.transpose(u)?;
    let h = affine(tape, v, head.hidden)?;
    let h = tape.layernorm(h, LAYERNORM_EPS)?;
    let h = tape.mul(h, head.ln_gain)?;
    let h = tape.add(h, head.ln_bias)?;
    let h = tape.relu(h)?;
    let h = tape.dropout(h, dropout, seed, train)?;
    affine(tape, h, head.out)
}

/// Dropout seed for one site of one sample's forward pass.
pub fn dropout_seed(seed: u64, site: u64) -> u64 {
    let mut z = seed ^ site.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub train: bool,
    pub seed: u64,
    pub mask: BranchMask,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions {
            train: false,
            seed: 0,
            mask: ALL_BRANCHES,
        }
    }

    pub fn eval_masked(mask: BranchMask) -> Self {
        ForwardOptions {
            mask,
            ..ForwardOptions::eval()
        }
    }
}

/// Branch outputs `relu` + dropout applied; `None` for masked branches.
pub fn branch_outputs(
    tape: &mut Tape,
    arch: &Architecture,
    vars: &ParamVars,
    graphs: &GraphSet,
    x: Var,
    opts: &ForwardOptions,
) -> Result<[Option<Var>; 3]> {
    let mut out = [None; 3];
    for (k, slot) in out.iter_mut().enumerate() {
        if !opts.mask[k] {
            continue;
        }
        let h = pna_branch_forward(tape, &vars.branches[k], &graphs.graphs[k], x)?;
        let h = tape.relu(h)?;
        *slot = Some(tape.dropout(h, arch.dropout, dropout_seed(opts.seed, k as u64), opts.train)?);
    }
    Ok(out)
}

/// Fusion and head over branch outputs, substituting zero blocks for `None`.
///
/// Ablation and occlusion both go through here.
pub fn fuse_and_regress(
    tape: &mut Tape,
    arch: &Architecture,
    vars: &ParamVars,
    h: [Option<Var>; 3],
    opts: &ForwardOptions,
) -> Result<ForwardTrace> {
    let mut blocks = [None; 3];
    for k in 0..3 {
        blocks[k] = Some(match h[k] {
            Some(v) => v,
            None => tape.constant(Matrix::zeros((arch.n_nodes, arch.d_hidden)))?,
        });
    }
    let blocks = blocks.map(|b| b.expect("filled above"));
    let (fused, alpha) = gated_fusion(tape, &vars.gate, blocks)?;
    let y = readout_and_regress(
        tape,
        &vars.head,
        fused,
        arch.dropout,
        opts.train,
        dropout_seed(opts.seed, 3),
    )?;
    Ok(ForwardTrace {
        branches: blocks,
        fused,
        alpha,
        y,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardTrace {
    pub branches: [Var; 3],
    pub fused: Var,
    pub alpha: Var,
    /// 1 × 1 prediction.
    pub y: Var,
}

/// Full forward of one sample on `tape`.
pub fn model_forward(
    tape: &mut Tape,
    arch: &Architecture,
    vars: &ParamVars,
    graphs: &GraphSet,
    x: Var,
    opts: &ForwardOptions,
) -> Result<ForwardTrace> {
    let (n, f) = tape.shape(x);
    if n != arch.n_nodes || f != arch.n_features || graphs.n_nodes() != arch.n_nodes {
        return Err(Error::Shape {
            op: "model_forward",
            detail: format!(
                "input {n}x{f}, graphs {} nodes, model {}x{}",
                graphs.n_nodes(),
                arch.n_nodes,
                arch.n_features
            ),
        });
    }
    let h = branch_outputs(tape, arch, vars, graphs, x, opts)?;
    fuse_and_regress(tape, arch, vars, h, opts)
}

/// Eval-mode prediction for one feature matrix.
pub fn predict(params: &ModelParams, graphs: &GraphSet, x: &Matrix, mask: BranchMask) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, false)?;
    let xv = tape.constant(x.clone())?;
    let trace = model_forward(&mut tape, &params.arch, &vars, graphs, xv, &ForwardOptions::eval_masked(mask))?;
    Ok(tape.scalar(trace.y))
}
