use std::collections::{BTreeMap, HashMap};

use nalgebra::{Matrix3, Vector3};

use super::params::ParamStore;
use super::tensor::{matmul_at_acc, matmul_bt_acc, matmul_into, Tensor};
use crate::error::{Error, Result};
use crate::geom::Point3;
use crate::procrustes::{solve_rigid_points, solve_rigid_vjp, VjpOptions};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    VStack(Vec<Var>),
    Relu(Var),
    RowSoftmax(Var),
    MaxGroups { x: Var, argmax: Vec<usize> },
    Gather { x: Var, idx: Vec<usize> },
    SliceRows { x: Var, start: usize },
    Normalize { x: Var, inv_std: Vec<f64> },
    Mean(Var),
    Sum(Var),
    SumLast(Var),
    Square(Var),
    Sqrt(Var),
    Transpose(Var),
    Reshape(Var),
    RigidSolve { src: Vec<Point3>, y: Var, opts: VjpOptions },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode autodiff graph. Nodes are appended in evaluation order, so
/// the node list is already a topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
    trainable: Option<Vec<String>>,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Only parameters whose name starts with one of `prefixes` become
    /// gradient-carrying leaves; all others are bound as constants.
    pub fn with_trainable_prefixes(prefixes: &[&str]) -> Self {
        Tape {
            trainable: Some(prefixes.iter().map(|s| s.to_string()).collect()),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A gradient-carrying leaf that is not a named parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a named parameter. Repeated requests return the same node, so
    /// shared weights accumulate gradient from every use.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?
            .clone();
        let trainable = self
            .trainable
            .as_ref()
            .is_none_or(|p| p.iter().any(|pre| name.starts_with(pre.as_str())));
        let v = self.push(t, Op::Leaf, trainable);
        self.params.insert(name.to_string(), v);
        if trainable {
            self.param_order.push((name.to_string(), v));
        }
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn elementwise(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.elementwise(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.elementwise(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.elementwise(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn row_operand(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.numel() != ta.cols() || tb.rows() != 1 {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        Ok(())
    }

    /// `a[r, c] + b[c]`, broadcasting `b` over the leading axis.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_operand("add_row", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let c = ta.cols();
        let data = ta.data().iter().enumerate().map(|(i, v)| v + tb.data()[i % c]).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::AddRow(a, b), rg))
    }

    /// `a[r, c] * b[c]`, broadcasting `b` over the leading axis.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_operand("mul_row", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let c = ta.cols();
        let data = ta.data().iter().enumerate().map(|(i, v)| v * tb.data()[i % c]).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MulRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v * s);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// Concatenates along the last axis; all inputs must share `rows`.
    pub fn concat(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let rows = self.value(first).rows();
        for &v in vars {
            if self.value(v).rows() != rows {
                return Err(Error::shape("concat", self.shape(first), self.shape(v)));
            }
        }
        let total: usize = vars.iter().map(|&v| self.value(v).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in vars {
                data.extend_from_slice(self.value(v).row(r));
            }
        }
        let t = Tensor::matrix(rows, total, data)?;
        let rg = self.rg(vars);
        Ok(self.push(t, Op::Concat(vars.to_vec()), rg))
    }

    /// Stacks along the leading axis; all inputs must share `cols`.
    pub fn vstack(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars.first().ok_or_else(|| Error::Contract("vstack of nothing".into()))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        for &v in vars {
            if self.value(v).cols() != cols {
                return Err(Error::shape("vstack", self.shape(first), self.shape(v)));
            }
            data.extend_from_slice(self.value(v).data());
        }
        let rows = data.len() / cols.max(1);
        let t = Tensor::matrix(rows, cols, data)?;
        let rg = self.rg(vars);
        Ok(self.push(t, Op::VStack(vars.to_vec()), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    /// Softmax over the last axis with per-row max subtraction.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let t = row_softmax(self.value(a));
        let rg = self.rg(&[a]);
        self.push(t, Op::RowSoftmax(a), rg)
    }

    /// Max over axis 1 of a `[n, group, c]` view of `a` (`a` may be given as
    /// `[n * group, c]`). Ties go to the lowest index.
    pub fn max_over_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        let ta = self.value(a);
        let (rows, c) = (ta.rows(), ta.cols());
        if group == 0 || rows % group != 0 {
            return Err(Error::shape("max_over_groups", ta.shape(), &[group]));
        }
        let n = rows / group;
        let mut out = vec![f64::NEG_INFINITY; n * c];
        let mut argmax = vec![0usize; n * c];
        for i in 0..n {
            for k in 0..group {
                let r = i * group + k;
                let row = ta.row(r);
                for j in 0..c {
                    if row[j] > out[i * c + j] {
                        out[i * c + j] = row[j];
                        argmax[i * c + j] = r;
                    }
                }
            }
        }
        let t = Tensor::matrix(n, c, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::MaxGroups { x: a, argmax }, rg))
    }

    /// Row gather: `out[r] = a[idx[r]]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (rows, c) = (ta.rows(), ta.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", ta.shape(), &[bad]));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(ta.row(i));
        }
        let t = Tensor::matrix(idx.len(), c, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(
            t,
            Op::Gather {
                x: a,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if start + len > ta.rows() {
            return Err(Error::shape("slice_rows", ta.shape(), &[start, len]));
        }
        let c = ta.cols();
        let t = Tensor::matrix(len, c, ta.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::SliceRows { x: a, start }, rg))
    }

    /// Per-column standardization over the leading axis:
    /// `(x - mean) / sqrt(var + eps)` with the biased variance.
    pub fn normalize_columns(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let (rows, c) = (ta.rows(), ta.cols());
        let n = rows as f64;
        let mut mean = vec![0.0; c];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(ta.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for r in 0..rows {
            for ((s, v), m) in var.iter_mut().zip(ta.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / n + eps).sqrt()).collect();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean[i % c]) * inv_std[i % c])
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Normalize { x: a, inv_std }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::scalar(ta.data().iter().sum::<f64>() / ta.numel() as f64);
        let rg = self.rg(&[a]);
        self.push(t, Op::Mean(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(&[a]);
        self.push(t, Op::Sum(a), rg)
    }

    /// Sum over the last axis, producing `[rows, 1]`.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = (0..ta.rows()).map(|r| ta.row(r).iter().sum()).collect();
        let t = Tensor::matrix(ta.rows(), 1, data).expect("shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::SumLast(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v * v);
        let rg = self.rg(&[a]);
        self.push(t, Op::Square(a), rg)
    }

    /// Elementwise square root. The derivative at exactly zero is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if let Some(v) = ta.data().iter().find(|v| **v < 0.0) {
            return Err(Error::Contract(format!("sqrt of negative value {v}")));
        }
        let t = ta.map(f64::sqrt);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Sqrt(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(Error::shape("transpose", ta.shape(), &[2]));
        }
        let t = ta.transpose2();
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Closed-form rigid solve mapping the constant points `src` onto the
    /// rows of `y` (`[n, 3]`). Output is `[4, 3]`: rows 0..3 hold `R`, row 3
    /// holds `t`.
    pub fn rigid_solve(&mut self, src: &[Point3], y: Var, opts: VjpOptions) -> Result<Var> {
        let ty = self.value(y);
        if ty.cols() != 3 || ty.rows() != src.len() {
            return Err(Error::shape("rigid_solve", ty.shape(), &[src.len(), 3]));
        }
        let pts = rows_to_points(ty);
        let t = solve_rigid_points(src, &pts)?;
        let mut data = Vec::with_capacity(12);
        for r in 0..3 {
            for c in 0..3 {
                data.push(t.rotation[(r, c)]);
            }
        }
        data.extend_from_slice(t.translation.as_slice());
        let rg = self.rg(&[y]);
        Ok(self.push(
            Tensor::matrix(4, 3, data)?,
            Op::RigidSolve {
                src: src.to_vec(),
                y,
                opts,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar node of shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients(grads))
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(s) = self.slot(grads, *a) {
                    matmul_bt_acc(gd, tb.data(), m, n, k, s.data_mut());
                }
                if let Some(s) = self.slot(grads, *b) {
                    matmul_at_acc(ta.data(), gd, m, k, n, s.data_mut());
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(s) = self.slot(grads, *v) {
                        s.add_assign(g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.add_assign(g);
                }
                if let Some(s) = self.slot(grads, *b) {
                    s.data_mut().iter_mut().zip(gd).for_each(|(o, v)| *o -= v);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(s) = self.slot(grads, *a) {
                    for ((o, gv), bv) in s.data_mut().iter_mut().zip(gd).zip(tb.data()) {
                        *o += gv * bv;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for ((o, gv), av) in s.data_mut().iter_mut().zip(gd).zip(ta.data()) {
                        *o += gv * av;
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.add_assign(g);
                }
                let c = g.cols();
                if let Some(s) = self.slot(grads, *b) {
                    let sd = s.data_mut();
                    for (i, gv) in gd.iter().enumerate() {
                        sd[i % c] += gv;
                    }
                }
            }
            Op::MulRow(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = g.cols();
                if let Some(s) = self.slot(grads, *a) {
                    for (i, (o, gv)) in s.data_mut().iter_mut().zip(gd).enumerate() {
                        *o += gv * tb.data()[i % c];
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    let sd = s.data_mut();
                    for (i, (gv, av)) in gd.iter().zip(ta.data()).enumerate() {
                        sd[i % c] += gv * av;
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.data_mut().iter_mut().zip(gd).for_each(|(o, v)| *o += f * v);
                }
            }
            Op::Concat(vars) => {
                let rows = g.rows();
                let total = g.cols();
                let mut off = 0;
                for v in vars {
                    let c = self.value(*v).cols();
                    if let Some(s) = self.slot(grads, *v) {
                        let sd = s.data_mut();
                        for r in 0..rows {
                            for j in 0..c {
                                sd[r * c + j] += gd[r * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::VStack(vars) => {
                let mut off = 0;
                for v in vars {
                    let n = self.value(*v).numel();
                    if let Some(s) = self.slot(grads, *v) {
                        s.data_mut().iter_mut().zip(&gd[off..off + n]).for_each(|(o, x)| *o += x);
                    }
                    off += n;
                }
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                if let Some(s) = self.slot(grads, *a) {
                    for ((o, gv), x) in s.data_mut().iter_mut().zip(gd).zip(ta.data()) {
                        if *x >= 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::RowSoftmax(a) => {
                let y = &node.value;
                let c = y.cols();
                if let Some(s) = self.slot(grads, *a) {
                    let sd = s.data_mut();
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &gd[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            sd[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::MaxGroups { x, argmax } => {
                let c = g.cols();
                if let Some(s) = self.slot(grads, *x) {
                    let sd = s.data_mut();
                    for (i, gv) in gd.iter().enumerate() {
                        sd[argmax[i] * c + i % c] += gv;
                    }
                }
            }
            Op::Gather { x, idx } => {
                let c = g.cols();
                if let Some(s) = self.slot(grads, *x) {
                    let sd = s.data_mut();
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            sd[src * c + j] += gd[r * c + j];
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let c = g.cols();
                if let Some(s) = self.slot(grads, *x) {
                    let sd = &mut s.data_mut()[start * c..start * c + gd.len()];
                    sd.iter_mut().zip(gd).for_each(|(o, v)| *o += v);
                }
            }
            Op::Normalize { x, inv_std } => {
                let xhat = &node.value;
                let (rows, c) = (xhat.rows(), xhat.cols());
                let n = rows as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for r in 0..rows {
                    for j in 0..c {
                        let gv = gd[r * c + j];
                        sum_g[j] += gv;
                        sum_gx[j] += gv * xhat.at(r, j);
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    let sd = s.data_mut();
                    for r in 0..rows {
                        for j in 0..c {
                            let i = r * c + j;
                            sd[i] += inv_std[j] / n * (n * gd[i] - sum_g[j] - xhat.data()[i] * sum_gx[j]);
                        }
                    }
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                if let Some(s) = self.slot(grads, *a) {
                    s.data_mut().iter_mut().for_each(|o| *o += gd[0] / n);
                }
            }
            Op::Sum(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.data_mut().iter_mut().for_each(|o| *o += gd[0]);
                }
            }
            Op::SumLast(a) => {
                let c = self.value(*a).cols();
                if let Some(s) = self.slot(grads, *a) {
                    for (i, o) in s.data_mut().iter_mut().enumerate() {
                        *o += gd[i / c];
                    }
                }
            }
            Op::Square(a) => {
                let ta = self.value(*a);
                if let Some(s) = self.slot(grads, *a) {
                    for ((o, gv), x) in s.data_mut().iter_mut().zip(gd).zip(ta.data()) {
                        *o += 2.0 * x * gv;
                    }
                }
            }
            Op::Sqrt(a) => {
                let y = &node.value;
                if let Some(s) = self.slot(grads, *a) {
                    for ((o, gv), yv) in s.data_mut().iter_mut().zip(gd).zip(y.data()) {
                        if *yv > 0.0 {
                            *o += gv / (2.0 * yv);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let gt = g.transpose2();
                if let Some(s) = self.slot(grads, *a) {
                    s.add_assign(&gt);
                }
            }
            Op::Reshape(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.add_assign(g);
                }
            }
            Op::RigidSolve { src, y, opts } => {
                let gr = Matrix3::from_row_slice(&gd[..9]);
                let gt = Vector3::new(gd[9], gd[10], gd[11]);
                let pts = rows_to_points(self.value(*y));
                let gy = solve_rigid_vjp(src, &pts, &gr, &gt, *opts)?;
                if let Some(s) = self.slot(grads, *y) {
                    for (o, v) in s.data_mut().chunks_exact_mut(3).zip(&gy) {
                        o[0] += v.x;
                        o[1] += v.y;
                        o[2] += v.z;
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradients of every trainable parameter bound on this tape. Parameters
    /// unreachable from the loss get zero gradients.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.param_order
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(*v)));
                (name.clone(), g)
            })
            .collect()
    }
}

pub(crate) fn row_softmax(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = t.data().to_vec();
    for row in out.chunks_exact_mut(c.max(1)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

pub(crate) fn rows_to_points(t: &Tensor) -> Vec<Point3> {
    t.data()
        .chunks_exact(3)
        .map(|c| Point3::new(c[0], c[1], c[2]))
        .collect()
}
