//! Loop-level reference implementations shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use relage_core::diffcore::STD_EPS;
use relage_core::model::PnaBranchParams;
use relage_core::relgraphs::{Relation, RelationalGraph};

pub type Matrix = Array2<f64>;

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Matrix {
    Array2::from_shape_simple_fn((r, c), || rng.random_range(-scale..scale))
}

/// Random symmetric graph without self-loops. Each unordered pair is kept
/// with probability `density`.
pub fn random_graph(rng: &mut ChaCha8Rng, relation: Relation, n: usize, density: f64) -> RelationalGraph {
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random_bool(density) {
                let a = match relation {
                    Relation::Comethylation => {
                        let r: f64 = rng.random_range(0.8..1.0);
                        if rng.random_bool(0.3) { -r } else { r }
                    }
                    _ => 1.0,
                };
                pairs.push(((i, j), a));
                pairs.push(((j, i), a));
            }
        }
    }
    pairs.shuffle(rng);
    let (arcs, attrs) = pairs.into_iter().unzip();
    RelationalGraph::new(relation, n, arcs, attrs).unwrap()
}

/// One PNA layer with explicit loops over nodes, incoming arcs and columns.
pub fn naive_pna(p: &PnaBranchParams, g: &RelationalGraph, x: &Matrix) -> Matrix {
    let (n, f) = x.dim();
    let d_mid = p.pre.weight.ncols();
    let d_out = p.post.weight.ncols();
    let log_d: Vec<f64> = (0..n)
        .map(|i| (g.arcs.iter().filter(|a| a.1 == i).count() as f64 + 1.0).ln())
        .collect();
    let delta = log_d.iter().sum::<f64>() / n as f64;

    let mut out = Matrix::zeros((n, d_out));
    for i in 0..n {
        let mut msgs: Vec<Vec<f64>> = Vec::new();
        for (e, &(s, d)) in g.arcs.iter().enumerate() {
            if d != i {
                continue;
            }
            let mut m = vec![0.0; d_mid];
            for (c, mc) in m.iter_mut().enumerate() {
                let mut z = p.pre.bias[[0, c]];
                for k in 0..f {
                    z += x[[i, k]] * p.pre.weight[[k, c]];
                    z += x[[s, k]] * p.pre.weight[[f + k, c]];
                }
                z += g.edge_attr[e] * p.pre.weight[[2 * f, c]];
                *mc = z.max(0.0);
            }
            msgs.push(m);
        }
        let deg = msgs.len();
        let mut agg = vec![vec![0.0; d_mid]; 4];
        if deg > 0 {
            for c in 0..d_mid {
                let col: Vec<f64> = msgs.iter().map(|m| m[c]).collect();
                let mean = col.iter().sum::<f64>() / deg as f64;
                let ex2 = col.iter().map(|v| v * v).sum::<f64>() / deg as f64;
                agg[0][c] = mean;
                agg[1][c] = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                agg[2][c] = col.iter().cloned().fold(f64::INFINITY, f64::min);
                agg[3][c] = ((ex2 - mean * mean).max(0.0) + STD_EPS).sqrt();
            }
        }
        let (amp, att) = if delta == 0.0 {
            (0.0, 0.0)
        } else if deg == 0 {
            (log_d[i] / delta, 0.0)
        } else {
            (log_d[i] / delta, delta / log_d[i])
        };
        let mut z: Vec<f64> = x.row(i).to_vec();
        for scale in [1.0, amp, att] {
            for a in &agg {
                z.extend(a.iter().map(|v| v * scale));
            }
        }
        assert_eq!(z.len(), p.post.weight.nrows());
        for c in 0..d_out {
            let mut acc = p.post.bias[[0, c]];
            for (k, zk) in z.iter().enumerate() {
                acc += zk * p.post.weight[[k, c]];
            }
            out[[i, c]] = acc;
        }
    }
    out
}

/// (MAE, MSE, FRC) with the FRC solved from the 2×2 normal equations of
/// `ŷ = b0 + b1·y`.
pub fn naive_metrics(y: &[f64], p: &[f64]) -> (f64, f64, Option<f64>) {
    let n = y.len() as f64;
    let mut mae = 0.0;
    let mut mse = 0.0;
    let (mut sy, mut syy, mut sp, mut syp) = (0.0, 0.0, 0.0, 0.0);
    for (a, b) in y.iter().zip(p) {
        mae += (b - a).abs();
        mse += (b - a) * (b - a);
        sy += a;
        syy += a * a;
        sp += b;
        syp += a * b;
    }
    let det = n * syy - sy * sy;
    let frc = if det.abs() <= 1e-12 * n * syy.max(1.0) {
        None
    } else {
        Some((n * syp - sy * sp) / det)
    };
    (mae / n, mse / n, frc)
}

use relage_core::diffcore::{finite_difference_check, FdOptions, FdReport, Probe, Tape};
use relage_core::model::{model_forward, Architecture, ForwardOptions, GraphSet, ModelParams, ParamVars};

/// Seed of the reference toy used for the completeness bound.
pub const TOY_SEED: u64 = 8;

/// Ten nodes, eleven features, three non-empty relations.
pub fn toy_model(seed: u64) -> (ModelParams, GraphSet, Matrix) {
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let n = 10;
    let g1 = random_graph(&mut rng, Relation::Comethylation, n, 0.3);
    let g2 = random_graph(&mut rng, Relation::SameChromosome, n, 0.5);
    let g3 = random_graph(&mut rng, Relation::SameGene, n, 0.2);
    let arch = Architecture {
        d_mid: 4,
        d_hidden: 5,
        gate_hidden: 6,
        head_hidden: 8,
        seed,
        ..Architecture::new(n)
    };
    let mut params = ModelParams::init(arch).unwrap();
    // a positive merge bias keeps the single merge unit alive on every node
    params.head.merge.bias.fill(0.5);
    let x = random_matrix(&mut rng, n, 11, 1.0).mapv(f64::abs);
    (params, GraphSet::new([&g1, &g2, &g3]).unwrap(), x)
}

pub fn flat(m: &Matrix) -> Vec<f64> {
    m.iter().copied().collect()
}

fn probe(params: &ModelParams, graphs: &GraphSet, x: &Matrix) -> Probe {
    let mut t = Tape::new();
    let vars = ParamVars::register(&mut t, params, false).unwrap();
    let xv = t.constant(x.clone()).unwrap();
    let tr = model_forward(&mut t, &params.arch, &vars, graphs, xv, &ForwardOptions::eval()).unwrap();
    Probe {
        value: t.scalar(tr.y),
        signature: t.kink_signature(),
    }
}

/// Central-difference check of ∂ŷ/∂θ for every parameter block, then ∂ŷ/∂X.
pub fn fd_check_model(params: &ModelParams, graphs: &GraphSet, x: &Matrix, opts: &FdOptions) -> Vec<(String, FdReport)> {
    let mut t = Tape::new();
    let vars = ParamVars::register(&mut t, params, true).unwrap();
    let xv = t.leaf(x.clone(), true).unwrap();
    let tr = model_forward(&mut t, &params.arch, &vars, graphs, xv, &ForwardOptions::eval()).unwrap();
    let mut leaves = vars.all.clone();
    leaves.push(xv);
    let grads = t.grad(tr.y, &leaves).unwrap();

    let names: Vec<String> = params.blocks().into_iter().map(|(n, _)| n).collect();
    let mut reports = Vec::new();
    for (b, name) in names.iter().enumerate() {
        let block = params.blocks()[b].1.clone();
        let shape = block.dim();
        let report = finite_difference_check(
            |v| {
                let mut p = params.clone();
                *p.blocks_mut()[b] = Matrix::from_shape_vec(shape, v.to_vec()).unwrap();
                probe(&p, graphs, x)
            },
            &flat(&block),
            &flat(&grads[b]),
            None,
            opts,
        );
        reports.push((name.clone(), report));
    }
    let gx = grads.last().unwrap();
    let report = finite_difference_check(
        |v| probe(params, graphs, &Matrix::from_shape_vec(x.dim(), v.to_vec()).unwrap()),
        &flat(x),
        &flat(gx),
        None,
        opts,
    );
    reports.push(("X".to_string(), report));
    reports
}
