//! Reverse-mode differentiation over a linear tape.
//!
//! Every call on [`Tape`] evaluates its forward rule immediately and appends
//! one [`Node`] recording the op, its inputs, and whatever the backward rule
//! needs. Node order is a valid topological order, so [`Tape::backward`] is a
//! single reverse sweep.

use super::ops::{self, EPS_KL, EPS_PROB};
use super::param::{ParamId, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    AddConst(Var),
    Relu(Var),
    Abs(Var),
    Recip(Var),
    RowSoftmax(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
        degenerate: Vec<bool>,
    },
    Transpose(Var),
    SelectCol(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    ColMean(Var),
    RowSum(Var),
    KlRows(Var, Var),
    SigmoidFocal {
        logits: Var,
        targets: Tensor,
        alpha: f64,
        gamma: f64,
    },
}

/// One recorded operation: its forward value, the op with input handles and
/// saved intermediates, and the parameter it came from for leaves.
#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf whose gradient is routed back to `params[id]`.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let v = self.push(params.value(id).clone(), Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// `a (r×c) + b (1×c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::shape("add_row", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, &x) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += x;
            }
        }
        Ok(self.push(out, Op::AddRow(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `a (r×c) ⊙ b (1×c)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::shape("mul_row", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, &x) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o *= x;
            }
        }
        Ok(self.push(out, Op::MulRow(a, b)))
    }

    /// `a (r×c) ⊙ b (r×1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.cols() != 1 || bv.rows() != av.rows() {
            return Err(Error::shape("mul_col", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            let s = bv.data()[r];
            for o in out.row_mut(r) {
                *o *= s;
            }
        }
        Ok(self.push(out, Op::MulCol(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        same_shape("mul_const", self.value(a), &c)?;
        let out = self.value(a).zip_map(&c, |x, y| x * y);
        Ok(self.push(out, Op::MulConst(a, c)))
    }

    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        same_shape("add_const", self.value(a), c)?;
        let out = self.value(a).zip_map(c, |x, y| x + y);
        Ok(self.push(out, Op::AddConst(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x == 0.0) {
            return Err(Error::invalid("recip of zero"));
        }
        let out = self.value(a).map(|x| 1.0 / x);
        Ok(self.push(out, Op::Recip(a)))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let out = ops::row_softmax(self.value(a))?;
        Ok(self.push(out, Op::RowSoftmax(a)))
    }

    /// Row normalization; degenerate rows pass through unchanged.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let n = ops::l2_normalize_rows(self.value(a));
        self.push(
            n.values,
            Op::L2Normalize {
                x: a,
                norms: n.norms,
                degenerate: n.degenerate,
            },
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    /// `sim(A, B) = normalize(A) · normalize(B)ᵀ`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).cols() != self.value(b).cols() {
            return Err(Error::shape(
                "cosine_similarity",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let na = self.l2_normalize_rows(a);
        let nb = self.l2_normalize_rows(b);
        let nbt = self.transpose(nb);
        self.matmul(na, nbt)
    }

    pub fn select_col(&mut self, a: Var, col: usize) -> Result<Var> {
        let av = self.value(a);
        if col >= av.cols() {
            return Err(Error::invalid(format!(
                "select_col: column {col} of {}",
                av.cols()
            )));
        }
        let data = (0..av.rows()).map(|r| av.get(r, col)).collect();
        let out = Tensor::raw(av.rows(), 1, data);
        Ok(self.push(out, Op::SelectCol(a, col)))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.rows()) {
            return Err(Error::invalid(format!(
                "gather_rows: row {bad} of {}",
                av.rows()
            )));
        }
        let c = av.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(av.row(i));
        }
        let out = Tensor::raw(idx.len(), c, data);
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec())))
    }

    /// Places row `t` of `a` at row `idx[t]` of a zero matrix with `rows` rows.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let av = self.value(a);
        if idx.len() != av.rows() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::invalid("scatter_rows: index list does not fit"));
        }
        let mut out = Tensor::zeros(rows, av.cols());
        for (t, &i) in idx.iter().enumerate() {
            for (o, &x) in out.row_mut(i).iter_mut().zip(av.row(t)) {
                *o += x;
            }
        }
        Ok(self.push(out, Op::ScatterRows(a, idx.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / v.len().max(1) as f64);
        self.push(out, Op::Mean(a))
    }

    /// Column means, `1×c`.
    pub fn col_mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let r = v.rows().max(1) as f64;
        let mut out = vec![0.0; v.cols()];
        for row in 0..v.rows() {
            for (o, x) in out.iter_mut().zip(v.row(row)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= r);
        let out = Tensor::raw(1, v.cols(), out);
        self.push(out, Op::ColMean(a))
    }

    /// Row sums, `r×1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = (0..v.rows()).map(|r| v.row(r).iter().sum()).collect();
        let out = Tensor::raw(v.rows(), 1, data);
        self.push(out, Op::RowSum(a))
    }

    /// Row-wise `KL(p_r ‖ q_r)` as an `r×1` column.
    pub fn kl_rows(&mut self, p: Var, q: Var) -> Result<Var> {
        same_shape("kl_rows", self.value(p), self.value(q))?;
        let (pv, qv) = (self.value(p), self.value(q));
        let data = (0..pv.rows())
            .map(|r| ops::kl_unchecked(pv.row(r), qv.row(r)))
            .collect();
        let out = Tensor::raw(pv.rows(), 1, data);
        Ok(self.push(out, Op::KlRows(p, q)))
    }

    /// Elementwise sigmoid-focal loss of `logits` against binary `targets`.
    pub fn sigmoid_focal(
        &mut self,
        logits: Var,
        targets: Tensor,
        alpha: f64,
        gamma: f64,
    ) -> Result<Var> {
        same_shape("sigmoid_focal", self.value(logits), &targets)?;
        if targets.data().iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::invalid("sigmoid_focal: targets must be 0 or 1"));
        }
        let out = self.value(logits).zip_map(&targets, |x, y| {
            let p = ops::sigmoid(x).clamp(EPS_PROB, 1.0 - EPS_PROB);
            ops::focal_unchecked(p, y, alpha, gamma)
        });
        Ok(self.push(
            out,
            Op::SigmoidFocal {
                logits,
                targets,
                alpha,
                gamma,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Only leaf gradients are retained.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward", lv.shape(), &[1, 1]));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Zeroes parameter gradients, then accumulates the gradient of `loss` into them.
    pub fn backward_into(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        params.zero_grad();
        let grads = self.backward(loss)?;
        grads.accumulate_into(self, params);
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&t),
            slot => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = ops::matmul_nt(g, val(*b)).expect("matmul vjp");
                let db = ops::matmul_tn(val(*a), g).expect("matmul vjp");
                send(*a, da);
                send(*b, db);
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::AddRow(a, b) => {
                send(*a, g.clone());
                send(*b, col_sums(g));
            }
            Op::Mul(a, b) => {
                send(*a, g.zip_map(val(*b), |x, y| x * y));
                send(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mut da = g.clone();
                for r in 0..da.rows() {
                    for (o, &x) in da.row_mut(r).iter_mut().zip(bv.data()) {
                        *o *= x;
                    }
                }
                send(*a, da);
                send(*b, col_sums(&g.zip_map(av, |x, y| x * y)));
            }
            Op::MulCol(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mut da = g.clone();
                for r in 0..da.rows() {
                    let s = bv.data()[r];
                    da.row_mut(r).iter_mut().for_each(|o| *o *= s);
                }
                send(*a, da);
                send(*b, row_sums(&g.zip_map(av, |x, y| x * y)));
            }
            Op::Scale(a, s) => send(*a, g.map(|x| x * s)),
            Op::MulConst(a, c) => send(*a, g.zip_map(c, |x, y| x * y)),
            Op::AddConst(a) => send(*a, g.clone()),
            Op::Relu(a) => send(*a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 })),
            Op::Abs(a) => send(*a, g.zip_map(val(*a), |x, y| x * sign(y))),
            Op::Recip(a) => send(*a, g.zip_map(val(*a), |x, y| -x / (y * y))),
            Op::RowSoftmax(a) => {
                let y = &node.value;
                let mut dx = g.zip_map(y, |x, y| x * y);
                for r in 0..dx.rows() {
                    let dot: f64 = dx.row(r).iter().sum();
                    let yr = y.row(r);
                    for (o, &yi) in dx.row_mut(r).iter_mut().zip(yr) {
                        *o -= yi * dot;
                    }
                }
                send(*a, dx);
            }
            Op::L2Normalize {
                x,
                norms,
                degenerate,
            } => {
                let y = &node.value;
                let mut dx = g.clone();
                for r in 0..dx.rows() {
                    if degenerate[r] {
                        continue;
                    }
                    let yr = y.row(r);
                    let dot: f64 = g.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                    let n = norms[r];
                    for (o, &yi) in dx.row_mut(r).iter_mut().zip(yr) {
                        *o = (*o - yi * dot) / n;
                    }
                }
                send(*x, dx);
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::SelectCol(a, col) => {
                let av = val(*a);
                let mut dx = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    dx.set(r, *col, g.data()[r]);
                }
                send(*a, dx);
            }
            Op::GatherRows(a, idx) => {
                let av = val(*a);
                let mut dx = Tensor::zeros(av.rows(), av.cols());
                for (t, &i) in idx.iter().enumerate() {
                    for (o, &x) in dx.row_mut(i).iter_mut().zip(g.row(t)) {
                        *o += x;
                    }
                }
                send(*a, dx);
            }
            Op::ScatterRows(a, idx) => {
                let c = g.cols();
                let mut data = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    data.extend_from_slice(g.row(i));
                }
                send(*a, Tensor::raw(idx.len(), c, data));
            }
            Op::Sum(a) => {
                let av = val(*a);
                send(*a, Tensor::full(av.rows(), av.cols(), g.item()));
            }
            Op::Mean(a) => {
                let av = val(*a);
                let s = g.item() / av.len().max(1) as f64;
                send(*a, Tensor::full(av.rows(), av.cols(), s));
            }
            Op::ColMean(a) => {
                let av = val(*a);
                let r = av.rows().max(1) as f64;
                let mut dx = Tensor::zeros(av.rows(), av.cols());
                for row in 0..av.rows() {
                    for (o, &x) in dx.row_mut(row).iter_mut().zip(g.data()) {
                        *o = x / r;
                    }
                }
                send(*a, dx);
            }
            Op::RowSum(a) => {
                let av = val(*a);
                let mut dx = Tensor::zeros(av.rows(), av.cols());
                for row in 0..av.rows() {
                    let s = g.data()[row];
                    dx.row_mut(row).iter_mut().for_each(|o| *o = s);
                }
                send(*a, dx);
            }
            Op::KlRows(p, q) => {
                let (pv, qv) = (val(*p), val(*q));
                let mut dp = Tensor::zeros(pv.rows(), pv.cols());
                let mut dq = Tensor::zeros(pv.rows(), pv.cols());
                for r in 0..pv.rows() {
                    let gr = g.data()[r];
                    for c in 0..pv.cols() {
                        let (pi, qi) = (pv.get(r, c), qv.get(r, c));
                        let qf = qi.max(EPS_KL);
                        if pi > 0.0 {
                            dp.set(r, c, gr * ((pi / qf).ln() + 1.0));
                            if qi >= EPS_KL {
                                dq.set(r, c, -gr * pi / qi);
                            }
                        }
                    }
                }
                send(*p, dp);
                send(*q, dq);
            }
            Op::SigmoidFocal {
                logits,
                targets,
                alpha,
                gamma,
            } => {
                let lv = val(*logits);
                let mut dx = Tensor::zeros(lv.rows(), lv.cols());
                for ((o, &x), (&y, &gi)) in dx
                    .data_mut()
                    .iter_mut()
                    .zip(lv.data())
                    .zip(targets.data().iter().zip(g.data()))
                {
                    let p = ops::sigmoid(x);
                    if (EPS_PROB..=1.0 - EPS_PROB).contains(&p) {
                        *o = gi * ops::focal_dlogit(p, y, *alpha, *gamma);
                    }
                }
                send(*logits, dx);
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn col_sums(g: &Tensor) -> Tensor {
    let mut out = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (o, x) in out.iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    Tensor::raw(1, g.cols(), out)
}

fn row_sums(g: &Tensor) -> Tensor {
    let data = (0..g.rows()).map(|r| g.row(r).iter().sum()).collect();
    Tensor::raw(g.rows(), 1, data)
}

/// Leaf gradients from one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn accumulate_into(&self, tape: &Tape, params: &mut ParamSet) {
        for (i, node) in tape.nodes.iter().enumerate().take(self.grads.len()) {
            if let (Some(id), Some(g)) = (node.param, &self.grads[i]) {
                params.accumulate_grad(id, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(3.0));
        let y = tape.constant(Tensor::scalar(4.0));
        let xy = tape.mul(x, y).unwrap();
        let xx = tape.mul(x, x).unwrap();
        let s = tape.add(xy, xx).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 4.0 + 6.0);
        assert_eq!(g.get(y).unwrap().item(), 3.0);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(2, 2));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unused_branch_gets_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(2.0));
        let z = tape.constant(Tensor::scalar(5.0));
        let _dead = tape.scale(z, 2.0);
        let y = tape.scale(x, 3.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 3.0);
        assert!(g.get(z).is_none());
    }
}
