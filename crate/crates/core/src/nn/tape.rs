//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Each node
//! holds its value and remembers whether any trainable leaf feeds into it, so
//! the backward sweep skips work for constant sub-graphs (frozen critics, fixed
//! targets). Non-finite values are recorded against the first primitive that
//! produced them and reported by [`Tape::backward`].

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use super::params::ParamVector;
use super::tensor::{matmul, matmul_nt_acc, matmul_tn_acc, Matrix};
use crate::error::{Error, Result};
use crate::math;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Constant operands of the fused pairwise quantile Huber loss.
#[derive(Debug, Clone)]
struct QuantileHuberData {
    /// Target samples, `B × N`.
    targets: Matrix,
    /// Fractions at which the predictions are taken, `B × M` or `1 × M`.
    tau_hat: Matrix,
    /// Probability mass of each target sample, `B × N` or `1 × N`.
    weights: Matrix,
    kappa: f64,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Clamp(Var, f64, f64),
    Huber(Var, f64),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    SubCol(Var, Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    RowOuterMul { emb: Var, psi: Var, per_row: usize },
    Reshape(Var),
    SumRows(Var),
    WeightedRowSum(Var, Matrix),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    CumSumRows(Var),
    QuantileHuber(Var, Box<QuantileHuberData>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Clamp(..) => "clamp",
            Op::Huber(..) => "huber",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Min(..) => "min",
            Op::SubCol(..) => "sub_col",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::RowOuterMul { .. } => "row_outer_mul",
            Op::Reshape(_) => "reshape",
            Op::SumRows(_) => "sum_rows",
            Op::WeightedRowSum(..) => "weighted_row_sum",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Softmax(_) => "softmax",
            Op::CumSumRows(_) => "cumsum_rows",
            Op::QuantileHuber(..) => "quantile_huber",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

/// Leaves for every segment of a [`ParamVector`], in layout order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn get(&self, segment: usize) -> Var {
        self.vars[segment]
    }
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<&'static str>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient with respect to every value of `params`, flattened in layout
    /// order. Segments that did not influence the root get zeros.
    pub fn flatten(&self, vars: &ParamVars, params: &ParamVector) -> Vec<f64> {
        let mut out = Vec::with_capacity(params.len());
        for (idx, seg) in params.segments().iter().enumerate() {
            match self.get(vars.get(idx)) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(core::iter::repeat_n(0.0, seg.numel())),
            }
        }
        out
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

    /// First primitive that produced a non-finite value, if any.
    pub fn fault(&self) -> Option<&'static str> {
        self.fault
    }

    pub fn check(&self) -> Result<()> {
        match self.fault {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m.data()[0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op, value: Matrix, needs_grad: bool) -> Var {
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some(op.name());
        }
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that gradients flow into.
    pub fn variable(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// One leaf per segment of `params`. Weight segments `[in, out]` become
    /// `in × out` matrices, vectors become single rows.
    pub fn params(&mut self, params: &ParamVector, trainable: bool) -> ParamVars {
        let vars = params
            .segments()
            .iter()
            .enumerate()
            .map(|(idx, seg)| {
                let (r, c) = seg.matrix_shape();
                let m = Matrix::from_vec(r, c, params.segment(idx).to_vec());
                self.push(Op::Leaf, m, trainable)
            })
            .collect();
        ParamVars { vars }
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let mut out = matmul(self.value(x), self.value(w));
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), out.cols(), "bias width");
            for i in 0..out.rows() {
                for (o, bv) in out.row_mut(i).iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Op::Affine { x, w, b }, out, needs)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(x).map(f);
        let needs = self.needs(x);
        self.push(op, out, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), math::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), math::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), math::ln)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), math::sqrt)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| c * v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    /// Elementwise Huber function with threshold `kappa`.
    pub fn huber(&mut self, x: Var, kappa: f64) -> Var {
        self.unary(x, Op::Huber(x, kappa), |v| huber_value(v, kappa))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "{} operand shapes", op.name());
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Matrix::from_vec(va.rows(), va.cols(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(op, out, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Min(a, b), |x, y| if x <= y { x } else { y })
    }

    /// `a − c` where `c` is a column (`n × 1`) broadcast across `a`'s columns.
    pub fn sub_col(&mut self, a: Var, c: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(c));
        assert_eq!(vc.shape(), (va.rows(), 1), "sub_col column shape");
        let mut out = va.clone();
        for i in 0..out.rows() {
            let ci = vc.data()[i];
            out.row_mut(i).iter_mut().for_each(|v| *v -= ci);
        }
        let needs = self.needs(a) || self.needs(c);
        self.push(Op::SubCol(a, c), out, needs)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows(), vb.rows(), "concat row counts");
        let cols = va.cols() + vb.cols();
        let mut data = Vec::with_capacity(va.rows() * cols);
        for i in 0..va.rows() {
            data.extend_from_slice(va.row(i));
            data.extend_from_slice(vb.row(i));
        }
        let out = Matrix::from_vec(va.rows(), cols, data);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::ConcatCols(a, b), out, needs)
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        assert!(start + len <= vx.cols(), "slice_cols range");
        let mut data = Vec::with_capacity(vx.rows() * len);
        for i in 0..vx.rows() {
            data.extend_from_slice(&vx.row(i)[start..start + len]);
        }
        let out = Matrix::from_vec(vx.rows(), len, data);
        let needs = self.needs(x);
        self.push(Op::SliceCols(x, start), out, needs)
    }

    /// Row `b·k + i` of the result is `emb[b] ⊙ psi[r]`, where `r = i` when
    /// `psi` has `k` rows (shared across the batch) and `r = b·k + i` when it
    /// has one row per output row.
    pub fn row_outer_mul(&mut self, emb: Var, psi: Var, per_row: usize) -> Var {
        let (ve, vp) = (self.value(emb), self.value(psi));
        let (b, h) = ve.shape();
        assert_eq!(vp.cols(), h, "row_outer_mul widths");
        let shared = vp.rows() == per_row;
        assert!(shared || vp.rows() == b * per_row, "row_outer_mul psi rows");
        let mut out = Matrix::zeros(b * per_row, h);
        for bi in 0..b {
            let e = ve.row(bi);
            for i in 0..per_row {
                let r = if shared { i } else { bi * per_row + i };
                let p = vp.row(r);
                for ((o, &x), &y) in out.row_mut(bi * per_row + i).iter_mut().zip(e).zip(p) {
                    *o = x * y;
                }
            }
        }
        let needs = self.needs(emb) || self.needs(psi);
        self.push(Op::RowOuterMul { emb, psi, per_row }, out, needs)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(x).clone().reshaped(rows, cols);
        let needs = self.needs(x);
        self.push(Op::Reshape(x), out, needs)
    }

    /// Row sums, `n × 1`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = (0..vx.rows()).map(|i| vx.row(i).iter().sum()).collect();
        let out = Matrix::column(data);
        let needs = self.needs(x);
        self.push(Op::SumRows(x), out, needs)
    }

    /// `Σ_j w[i][j]·x[i][j]` per row, `n × 1`. `w` is a constant of the same
    /// shape as `x`, or a single row shared by all rows.
    pub fn weighted_row_sum(&mut self, x: Var, weights: Matrix) -> Var {
        let vx = self.value(x);
        assert_eq!(weights.cols(), vx.cols(), "weighted_row_sum widths");
        assert!(weights.rows() == 1 || weights.rows() == vx.rows(), "weighted_row_sum rows");
        let data = (0..vx.rows())
            .map(|i| {
                let w = weights.row(if weights.rows() == 1 { 0 } else { i });
                vx.row(i).iter().zip(w).map(|(a, b)| a * b).sum()
            })
            .collect();
        let out = Matrix::column(data);
        let needs = self.needs(x);
        self.push(Op::WeightedRowSum(x, weights), out, needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Op::Sum(x), Matrix::scalar(s), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s: f64 = vx.data().iter().sum();
        let m = s / vx.len() as f64;
        let needs = self.needs(x);
        self.push(Op::Mean(x), Matrix::scalar(m), needs)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let mut out = vx.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = math::exp(*v - max);
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let needs = self.needs(x);
        self.push(Op::Softmax(x), out, needs)
    }

    /// Row-wise inclusive prefix sums.
    pub fn cumsum_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for i in 0..out.rows() {
            let mut acc = 0.0;
            for v in out.row_mut(i) {
                acc += *v;
                *v = acc;
            }
        }
        let needs = self.needs(x);
        self.push(Op::CumSumRows(x), out, needs)
    }

    /// Batch mean of `Σ_i Σ_j w_i · ρ_{τ̂_j}^κ(t_i − z_j)`.
    ///
    /// `z` (`B × M`) holds predicted quantiles at fractions `tau_hat`; `targets`
    /// (`B × N`) are constants with probability masses `weights`. `tau_hat` and
    /// `weights` may be a single shared row.
    pub fn quantile_huber(
        &mut self,
        z: Var,
        targets: Matrix,
        tau_hat: Matrix,
        weights: Matrix,
        kappa: f64,
    ) -> Var {
        let vz = self.value(z);
        let (b, m) = vz.shape();
        let n = targets.cols();
        assert_eq!(targets.rows(), b, "quantile_huber target rows");
        assert_eq!(tau_hat.cols(), m, "quantile_huber tau_hat width");
        assert_eq!(weights.cols(), n, "quantile_huber weight width");
        let mut total = 0.0;
        for bi in 0..b {
            let zr = vz.row(bi);
            let tr = targets.row(bi);
            let th = tau_hat.row(if tau_hat.rows() == 1 { 0 } else { bi });
            let wr = weights.row(if weights.rows() == 1 { 0 } else { bi });
            for (&t, &w) in tr.iter().zip(wr) {
                for (&zj, &tau) in zr.iter().zip(th) {
                    total += w * quantile_huber_rho(tau, t - zj, kappa);
                }
            }
        }
        let value = Matrix::scalar(total / b as f64);
        let needs = self.needs(z);
        let data = QuantileHuberData {
            targets,
            tau_hat,
            weights,
            kappa,
        };
        self.push(Op::QuantileHuber(z, Box::new(data)), value, needs)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check()?;
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                if self.needs(*x) {
                    let wv = self.value(*w);
                    let acc = slot(grads, *x, self.value(*x));
                    matmul_nt_acc(g, wv, acc);
                }
                if self.needs(*w) {
                    let xv = self.value(*x);
                    let acc = slot(grads, *w, self.value(*w));
                    matmul_tn_acc(xv, g, acc);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let acc = slot(grads, *b, self.value(*b));
                        let ad = acc.data_mut();
                        for i in 0..g.rows() {
                            for (a, gv) in ad.iter_mut().zip(g.row(i)) {
                                *a += gv;
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => self.elementwise(*x, g, grads, |i, gv| if y.data()[i] > 0.0 { gv } else { 0.0 }),
            Op::Tanh(x) => self.elementwise(*x, g, grads, |i, gv| {
                let t = y.data()[i];
                gv * (1.0 - t * t)
            }),
            Op::Exp(x) => self.elementwise(*x, g, grads, |i, gv| gv * y.data()[i]),
            Op::Log(x) => {
                let xv = self.value(*x);
                self.elementwise(*x, g, grads, |i, gv| gv / xv.data()[i])
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                self.elementwise(*x, g, grads, |i, gv| 2.0 * gv * xv.data()[i])
            }
            Op::Sqrt(x) => self.elementwise(*x, g, grads, |i, gv| 0.5 * gv / y.data()[i]),
            Op::Scale(x, c) => self.elementwise(*x, g, grads, |_, gv| c * gv),
            Op::AddScalar(x) => self.elementwise(*x, g, grads, |_, gv| gv),
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x);
                self.elementwise(*x, g, grads, |i, gv| {
                    let v = xv.data()[i];
                    if v >= *lo && v <= *hi {
                        gv
                    } else {
                        0.0
                    }
                })
            }
            Op::Huber(x, kappa) => {
                let xv = self.value(*x);
                self.elementwise(*x, g, grads, |i, gv| gv * huber_slope(xv.data()[i], *kappa))
            }
            Op::Add(a, b) => {
                self.elementwise(*a, g, grads, |_, gv| gv);
                self.elementwise(*b, g, grads, |_, gv| gv);
            }
            Op::Sub(a, b) => {
                self.elementwise(*a, g, grads, |_, gv| gv);
                self.elementwise(*b, g, grads, |_, gv| -gv);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.elementwise(*a, g, grads, |i, gv| gv * vb.data()[i]);
                self.elementwise(*b, g, grads, |i, gv| gv * va.data()[i]);
            }
            Op::Min(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let pick_a = |i: usize| va.data()[i] <= vb.data()[i];
                self.elementwise(*a, g, grads, |i, gv| if pick_a(i) { gv } else { 0.0 });
                self.elementwise(*b, g, grads, |i, gv| if pick_a(i) { 0.0 } else { gv });
            }
            Op::SubCol(a, c) => {
                self.elementwise(*a, g, grads, |_, gv| gv);
                if self.needs(*c) {
                    let acc = slot(grads, *c, self.value(*c));
                    for i in 0..g.rows() {
                        acc.data_mut()[i] -= g.row(i).iter().sum::<f64>();
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                if self.needs(*a) {
                    let acc = slot(grads, *a, self.value(*a));
                    for i in 0..g.rows() {
                        for (o, gv) in acc.row_mut(i).iter_mut().zip(&g.row(i)[..ca]) {
                            *o += gv;
                        }
                    }
                }
                if self.needs(*b) {
                    let acc = slot(grads, *b, self.value(*b));
                    for i in 0..g.rows() {
                        for (o, gv) in acc.row_mut(i).iter_mut().zip(&g.row(i)[ca..]) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::SliceCols(x, start) => {
                if self.needs(*x) {
                    let acc = slot(grads, *x, self.value(*x));
                    for i in 0..g.rows() {
                        let row = &mut acc.row_mut(i)[*start..*start + g.cols()];
                        for (o, gv) in row.iter_mut().zip(g.row(i)) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::RowOuterMul { emb, psi, per_row } => {
                let (ve, vp) = (self.value(*emb), self.value(*psi));
                let shared = vp.rows() == *per_row;
                let b = ve.rows();
                if self.needs(*emb) {
                    let acc = slot(grads, *emb, ve);
                    for bi in 0..b {
                        let row = acc.row_mut(bi);
                        for i in 0..*per_row {
                            let r = if shared { i } else { bi * per_row + i };
                            for ((o, gv), pv) in row.iter_mut().zip(g.row(bi * per_row + i)).zip(vp.row(r)) {
                                *o += gv * pv;
                            }
                        }
                    }
                }
                if self.needs(*psi) {
                    let acc = slot(grads, *psi, vp);
                    for bi in 0..b {
                        let e = ve.row(bi);
                        for i in 0..*per_row {
                            let r = if shared { i } else { bi * per_row + i };
                            for ((o, gv), ev) in acc.row_mut(r).iter_mut().zip(g.row(bi * per_row + i)).zip(e) {
                                *o += gv * ev;
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => self.elementwise(*x, g, grads, |_, gv| gv),
            Op::SumRows(x) => {
                if self.needs(*x) {
                    let acc = slot(grads, *x, self.value(*x));
                    for i in 0..acc.rows() {
                        let gi = g.data()[i];
                        acc.row_mut(i).iter_mut().for_each(|o| *o += gi);
                    }
                }
            }
            Op::WeightedRowSum(x, w) => {
                if self.needs(*x) {
                    let acc = slot(grads, *x, self.value(*x));
                    for i in 0..acc.rows() {
                        let gi = g.data()[i];
                        let wr = w.row(if w.rows() == 1 { 0 } else { i });
                        for (o, wv) in acc.row_mut(i).iter_mut().zip(wr) {
                            *o += gi * wv;
                        }
                    }
                }
            }
            Op::Sum(x) => self.broadcast(*x, g.data()[0], grads),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                self.broadcast(*x, g.data()[0] / n, grads)
            }
            Op::Softmax(x) => {
                if self.needs(*x) {
                    let acc = slot(grads, *x, self.value(*x));
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in acc.row_mut(i).iter_mut().zip(yr).zip(gr) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::CumSumRows(x) => {
                if self.needs(*x) {
                    let acc = slot(grads, *x, self.value(*x));
                    for i in 0..g.rows() {
                        let mut run = 0.0;
                        let gr = g.row(i);
                        let row = acc.row_mut(i);
                        for k in (0..gr.len()).rev() {
                            run += gr[k];
                            row[k] += run;
                        }
                    }
                }
            }
            Op::QuantileHuber(z, data) => {
                if self.needs(*z) {
                    let vz = self.value(*z);
                    let (b, _) = vz.shape();
                    let scale = g.data()[0] / b as f64;
                    let acc = slot(grads, *z, vz);
                    for bi in 0..b {
                        let zr = vz.row(bi);
                        let tr = data.targets.row(bi);
                        let th = data.tau_hat.row(if data.tau_hat.rows() == 1 { 0 } else { bi });
                        let wr = data.weights.row(if data.weights.rows() == 1 { 0 } else { bi });
                        let out = acc.row_mut(bi);
                        for (j, (&zj, &tau)) in zr.iter().zip(th).enumerate() {
                            let mut d = 0.0;
                            for (&t, &w) in tr.iter().zip(wr) {
                                d -= w * quantile_huber_rho_slope(tau, t - zj, data.kappa);
                            }
                            out[j] += scale * d;
                        }
                    }
                }
            }
        }
    }

    fn broadcast(&self, x: Var, gv: f64, grads: &mut [Option<Matrix>]) {
        if self.needs(x) {
            slot(grads, x, self.value(x)).data_mut().iter_mut().for_each(|o| *o += gv);
        }
    }

    fn elementwise(&self, x: Var, g: &Matrix, grads: &mut [Option<Matrix>], f: impl Fn(usize, f64) -> f64) {
        if !self.needs(x) {
            return;
        }
        let acc = slot(grads, x, self.value(x));
        for (i, (o, &gv)) in acc.data_mut().iter_mut().zip(g.data()).enumerate() {
            *o += f(i, gv);
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Matrix>], v: Var, like: &Matrix) -> &'a mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(like.rows(), like.cols()))
}

/// `L_κ(δ)`: `δ²/2` when `|δ| ≤ κ`, else `κ(|δ| − κ/2)`.
pub fn huber_value(delta: f64, kappa: f64) -> f64 {
    let a = math::abs(delta);
    if a <= kappa {
        0.5 * delta * delta
    } else {
        kappa * (a - 0.5 * kappa)
    }
}

/// `dL_κ/dδ`.
pub fn huber_slope(delta: f64, kappa: f64) -> f64 {
    if math::abs(delta) <= kappa {
        delta
    } else if delta > 0.0 {
        kappa
    } else {
        -kappa
    }
}

/// `ρ_τ^κ(δ) = |τ − 1{δ < 0}| · L_κ(δ) / κ`.
pub fn quantile_huber_rho(tau: f64, delta: f64, kappa: f64) -> f64 {
    let ind = if delta < 0.0 { 1.0 } else { 0.0 };
    math::abs(tau - ind) * huber_value(delta, kappa) / kappa
}

/// `dρ_τ^κ/dδ`.
pub fn quantile_huber_rho_slope(tau: f64, delta: f64, kappa: f64) -> f64 {
    let ind = if delta < 0.0 { 1.0 } else { 0.0 };
    math::abs(tau - ind) * huber_slope(delta, kappa) / kappa
}
