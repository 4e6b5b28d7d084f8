//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value lives on a [`Tape`] and is addressed by a copyable [`Var`]
//! handle. Operations evaluate eagerly and record just enough state to run
//! their adjoint later. A tape is single threaded; concurrent evaluation uses
//! one tape per thread over shared immutable inputs.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::segment::{self, Aggregation, SegmentSaved};
use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    ScaleRows(Var, Arc<Array1<f64>>),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Relu(Var),
    Dropout(Var, Matrix),
    RowSoftmax(Var),
    LayerNorm { input: Var, normalized: Matrix, inv_std: Array1<f64> },
    Transpose(Var),
    MeanAll(Var),
    SumAll(Var),
    Square(Var),
    Abs(Var),
    GatherRows(Var, Arc<[usize]>),
    Segment { input: Var, dst: Arc<[usize]>, saved: SegmentSaved },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

/// Branch-free scan: NaN and ±inf are exactly the all-ones exponents.
fn all_finite(m: &Matrix) -> bool {
    const EXP: u64 = 0x7ff0_0000_0000_0000;
    let bad = |acc: bool, x: &f64| acc | (x.to_bits() & EXP == EXP);
    match m.as_slice_memory_order() {
        Some(s) => !s.iter().fold(false, bad),
        None => !m.iter().fold(false, bad),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a 1×1 tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients from [`Tape::grad`].
    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Matrix) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !all_finite(&value) {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(shape_err("matmul", format!("{ar}x{ac} · {br}x{bc}")));
        }
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg, "matmul")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a) - self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub(a, b), rg, "sub")
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg, "mul")
    }

    /// `a + row`, where `row` is 1×c and broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, ac) = self.shape(a);
        if self.shape(row) != (1, ac) {
            return Err(shape_err(
                "add_row",
                format!("{:?} + {:?}", self.shape(a), self.shape(row)),
            ));
        }
        let value = self.value(a) + self.value(row);
        let rg = self.rg(&[a, row]);
        self.push(value, Op::AddRow(a, row), rg, "add_row")
    }

    /// `a ⊙ col`, where `col` is r×1 and broadcast over the columns of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ar, _) = self.shape(a);
        if self.shape(col) != (ar, 1) {
            return Err(shape_err(
                "mul_col",
                format!("{:?} ⊙ {:?}", self.shape(a), self.shape(col)),
            ));
        }
        let value = self.value(a) * self.value(col);
        let rg = self.rg(&[a, col]);
        self.push(value, Op::MulCol(a, col), rg, "mul_col")
    }

    /// Scales row `i` of `a` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: Arc<Array1<f64>>) -> Result<Var> {
        let (ar, _) = self.shape(a);
        if factors.len() != ar {
            return Err(shape_err(
                "scale_rows",
                format!("{} rows, {} factors", ar, factors.len()),
            ));
        }
        let f = factors.view().insert_axis(Axis(1));
        let value = self.value(a) * &f;
        let rg = self.rg(&[a]);
        self.push(value, Op::ScaleRows(a, factors), rg, "scale_rows")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a) * c;
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg, "scale")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(shape_err("concat_cols", "no operands".into()));
        };
        let rows = self.shape(*first).0;
        let mut width = 0;
        for p in parts {
            let (r, c) = self.shape(*p);
            if r != rows {
                return Err(shape_err("concat_cols", format!("row counts {rows} and {r}")));
            }
            width += c;
        }
        let mut value = Matrix::zeros((rows, width));
        let mut at = 0;
        for p in parts {
            let v = self.value(*p);
            let c = v.ncols();
            value.slice_mut(s![.., at..at + c]).assign(v);
            at += c;
        }
        let rg = self.rg(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (_, ac) = self.shape(a);
        if start >= end || end > ac {
            return Err(shape_err("slice_cols", format!("{start}..{end} of {ac}")));
        }
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(&[a]);
        self.push(value, Op::SliceCols(a, start), rg, "slice_cols")
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (ar, _) = self.shape(a);
        if start >= end || end > ar {
            return Err(shape_err("slice_rows", format!("{start}..{end} of {ar}")));
        }
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let rg = self.rg(&[a]);
        self.push(value, Op::SliceRows(a, start), rg, "slice_rows")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg, "relu")
    }

    /// Inverted dropout. Identity when `train` is false or `p` is zero.
    pub fn dropout(&mut self, a: Var, p: f64, seed: u64, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Invalid(format!("dropout rate {p} outside [0,1)")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = Matrix::from_shape_simple_fn(self.shape(a), || {
            if rng.random::<f64>() < p {
                0.0
            } else {
                keep
            }
        });
        let value = self.value(a) * &mask;
        let rg = self.rg(&[a]);
        self.push(value, Op::Dropout(a, mask), rg, "dropout")
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row /= z;
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::RowSoftmax(a), rg, "row_softmax")
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)`, without affine terms.
    pub fn layernorm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        let mut normalized = Matrix::zeros((rows, cols));
        let mut inv_std = Array1::zeros(rows);
        for (i, row) in x.rows().into_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            normalized
                .row_mut(i)
                .assign(&row.mapv(|v| (v - mean) * is));
        }
        let rg = self.rg(&[a]);
        self.push(
            normalized.clone(),
            Op::LayerNorm {
                input: a,
                normalized,
                inv_std,
            },
            rg,
            "layernorm",
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).t().as_standard_layout().into_owned();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg, "transpose")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(shape_err("mean_all", "empty tensor".into()));
        }
        let value = Matrix::from_elem((1, 1), v.sum() / v.len() as f64);
        let rg = self.rg(&[a]);
        self.push(value, Op::MeanAll(a), rg, "mean_all")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let value = Matrix::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::SumAll(a), rg, "sum_all")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).mapv(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(value, Op::Square(a), rg, "square")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).mapv(f64::abs);
        let rg = self.rg(&[a]);
        self.push(value, Op::Abs(a), rg, "abs")
    }

    /// Row `k` of the result is row `index[k]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var> {
        let src = self.value(a);
        let (rows, cols) = src.dim();
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(shape_err("gather_rows", format!("index {bad} >= {rows}")));
        }
        let mut value = Matrix::zeros((index.len(), cols));
        for (k, &i) in index.iter().enumerate() {
            value.row_mut(k).assign(&src.row(i));
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::GatherRows(a, index), rg, "gather_rows")
    }

    /// Per-node aggregation of arc messages; see [`segment::aggregate`].
    pub fn segment_aggregate(
        &mut self,
        messages: Var,
        dst: Arc<[usize]>,
        n_nodes: usize,
        kind: Aggregation,
    ) -> Result<Var> {
        let (value, saved) = segment::aggregate(self.value(messages), &dst, n_nodes, kind)?;
        let rg = self.rg(&[messages]);
        self.push(
            value,
            Op::Segment {
                input: messages,
                dst,
                saved,
            },
            rg,
            "segment_aggregate",
        )
    }

    /// Gradients of the scalar `output` with respect to each of `leaves`.
    ///
    /// Leaves the output does not depend on get a zero gradient.
    pub fn grad(&self, output: Var, leaves: &[Var]) -> Result<Vec<Matrix>> {
        if self.shape(output) != (1, 1) {
            return Err(shape_err(
                "grad",
                format!("output must be scalar, got {:?}", self.shape(output)),
            ));
        }
        let mut grads = self.backward(output, Matrix::ones((1, 1)));
        Ok(leaves
            .iter()
            .enumerate()
            .map(|(k, l)| {
                let repeated = leaves[k + 1..].contains(l);
                let g = if repeated { grads[l.0].clone() } else { grads[l.0].take() };
                g.unwrap_or_else(|| Matrix::zeros(self.shape(*l)))
            })
            .collect())
    }

    fn backward(&self, output: Var, seed: Matrix) -> Vec<Option<Matrix>> {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.adjoint(node, &g, &mut grads);
        }
        grads
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn adjoint(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, col) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g * self.value(*col));
                }
                if self.requires_grad(*col) {
                    let gc = (g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.accumulate(grads, *col, gc);
                }
            }
            Op::ScaleRows(a, factors) => {
                let f = factors.view().insert_axis(Axis(1));
                self.accumulate(grads, *a, g * &f);
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g * *c),
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let c = self.shape(*p).1;
                    if self.requires_grad(*p) {
                        self.accumulate(grads, *p, g.slice(s![.., at..at + c]).to_owned());
                    }
                    at += c;
                }
            }
            Op::SliceCols(a, start) => {
                let mut full = Matrix::zeros(self.shape(*a));
                full.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                self.accumulate(grads, *a, full);
            }
            Op::SliceRows(a, start) => {
                let mut full = Matrix::zeros(self.shape(*a));
                full.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                self.accumulate(grads, *a, full);
            }
            Op::Relu(a) => {
                let mut ga = g.clone();
                ga.zip_mut_with(self.value(*a), |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Dropout(a, mask) => self.accumulate(grads, *a, g * mask),
            Op::RowSoftmax(a) => {
                let y = &node.value;
                let dot = (g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                let ga = y * &(g - &dot);
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm {
                input,
                normalized,
                inv_std,
            } => {
                let cols = g.ncols() as f64;
                let mut ga = Matrix::zeros(g.dim());
                for i in 0..g.nrows() {
                    let gy = g.row(i);
                    let y = normalized.row(i);
                    let mean_g = gy.sum() / cols;
                    let mean_gy = gy.dot(&y) / cols;
                    let is = inv_std[i];
                    ga.row_mut(i).assign(
                        &ndarray::Zip::from(&gy)
                            .and(&y)
                            .map_collect(|&d, &yy| is * (d - mean_g - yy * mean_gy)),
                    );
                }
                self.accumulate(grads, *input, ga);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.t().as_standard_layout().into_owned()),
            Op::MeanAll(a) => {
                let shape = self.shape(*a);
                let n = (shape.0 * shape.1) as f64;
                self.accumulate(grads, *a, Matrix::from_elem(shape, g[[0, 0]] / n));
            }
            Op::SumAll(a) => {
                let shape = self.shape(*a);
                self.accumulate(grads, *a, Matrix::from_elem(shape, g[[0, 0]]));
            }
            Op::Square(a) => self.accumulate(grads, *a, g * &(self.value(*a) * 2.0)),
            Op::Abs(a) => {
                let sign = self.value(*a).mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, g * &sign);
            }
            Op::GatherRows(a, index) => {
                let mut ga = Matrix::zeros(self.shape(*a));
                for (k, &i) in index.iter().enumerate() {
                    let mut row = ga.row_mut(i);
                    row += &g.row(k);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Segment { input, dst, saved } => {
                let ga = segment::adjoint(g, self.value(*input), dst, saved);
                self.accumulate(grads, *input, ga);
            }
        }
    }

    /// Hash of every discrete branch decision on the tape: relu activity,
    /// extremal arcs of max/min aggregation, signs under `abs`, and whether the
    /// std guard is active.
    ///
    /// Two evaluations with equal signatures lie on the same smooth piece of
    /// the computed function, which is what finite-difference checks need.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) | Op::Abs(a) => {
                    for &x in self.value(*a).iter() {
                        (x > 0.0).hash(&mut h);
                        (x < 0.0).hash(&mut h);
                    }
                }
                Op::Segment { saved, .. } => saved.hash_branches(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Smallest |pre-activation| over every relu on the tape.
    pub fn min_relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(self.value(a).fold(f64::INFINITY, |m, x| m.min(x.abs()))),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }
}
