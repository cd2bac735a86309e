use std::collections::BTreeMap;

use super::{strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a trainable tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    LogSoftmax(Var),
    /// Sum over the dimensions not listed in `keep`, times `scale`.
    Reduce {
        x: Var,
        offsets: Vec<usize>,
        scale: f64,
    },
    /// Replicate along the dimensions not listed in `keep`.
    Broadcast {
        x: Var,
        offsets: Vec<usize>,
    },
    Pick(Var, Vec<usize>),
    StopGradient(#[allow(dead_code)] Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape.
///
/// Every primitive appends one node holding its forward value; `backward`
/// walks the nodes in exact reverse recording order. Nodes that cannot
/// reach a parameter (constants, stop-gradient outputs) are skipped.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    open_barriers: bool,
}

fn check_inputs(op: &'static str, inputs: &[&Tensor]) -> Result<()> {
    for t in inputs {
        if !t.all_finite() {
            return Err(Error::numeric(op, "non-finite input"));
        }
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::config(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// For each flat index of `shape`, the flat offset into the tensor made of
/// the `keep` dimensions only.
fn kept_offsets(shape: &[usize], keep: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if keep.windows(2).any(|w| w[0] >= w[1]) || keep.iter().any(|&k| k >= shape.len()) {
        return Err(Error::config(format!(
            "invalid dimension list {keep:?} for shape {shape:?}"
        )));
    }
    let kept_shape: Vec<usize> = keep.iter().map(|&k| shape[k]).collect();
    let kept_strides = strides(&kept_shape);
    let mut map_stride = vec![0usize; shape.len()];
    for (j, &k) in keep.iter().enumerate() {
        map_stride[k] = kept_strides[j];
    }
    let n: usize = shape.iter().product();
    let mut offsets = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            off += map_stride[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= map_stride[d] * shape[d];
            idx[d] = 0;
        }
    }
    Ok((offsets, kept_shape))
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe in-bounds views of `a` (m x k), `b`
    // (k x n) and the row-major `c` (m x n), checked by the callers' shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose [`Graph::stop_gradient`] lets adjoints through. Used to
    /// take total derivatives, e.g. of a reparameterized objective whose
    /// upstream masks feed downstream encoder inputs.
    pub fn with_open_barriers() -> Self {
        Graph {
            open_barriers: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn finish(&mut self, name: &'static str, value: Tensor, op: Op, grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::numeric(name, "non-finite output"));
        }
        Ok(self.push(value, op, grad))
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::config(format!(
                "matmul: incompatible shapes {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        check_inputs("matmul", &[ta, tb])?;
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), (k, 1), tb.data(), (n, 1), &mut out, 0.0);
        let grad = self.g(a) || self.g(b);
        self.finish("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), grad)
    }

    /// Adds a vector along the last dimension.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let n = *ta.shape().last().unwrap_or(&1);
        if tb.shape() != [n] {
            return Err(Error::config(format!(
                "add_bias: bias {:?} does not match last dim of {:?}",
                tb.shape(),
                ta.shape()
            )));
        }
        check_inputs("add_bias", &[ta, tb])?;
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let grad = self.g(a) || self.g(bias);
        self.finish("add_bias", out, Op::AddBias(a, bias), grad)
    }

    /// `x @ w + b` with `w: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        check_inputs(name, &[ta, tb])?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let grad = self.g(a) || self.g(b);
        self.finish(name, out, op, grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let ta = self.value(a);
        check_inputs(name, &[ta])?;
        let out = ta.map(f);
        let grad = self.g(a);
        self.finish(name, out, op, grad)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * s, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    /// `x` for `x > 0`, `slope * x` otherwise. The derivative at exactly 0
    /// is `slope`.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(
            "leaky_relu",
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::LeakyRelu(a, 0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    /// Clamp into `[lo, hi]`; the adjoint is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Log-softmax over the last dimension, max-subtracted.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        check_inputs("log_softmax", &[ta])?;
        let n = *ta.shape().last().unwrap_or(&1);
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let grad = self.g(a);
        self.finish("log_softmax", out, Op::LogSoftmax(a), grad)
    }

    fn reduce(&mut self, name: &'static str, a: Var, keep: &[usize], mean: bool) -> Result<Var> {
        let ta = self.value(a);
        check_inputs(name, &[ta])?;
        let (offsets, kept_shape) = kept_offsets(ta.shape(), keep)?;
        let kept_len: usize = kept_shape.iter().product();
        let scale = if mean {
            kept_len as f64 / ta.len() as f64
        } else {
            1.0
        };
        let mut out = vec![0.0; kept_len];
        for (&o, &x) in offsets.iter().zip(ta.data()) {
            out[o] += x;
        }
        if mean {
            out.iter_mut().for_each(|x| *x *= scale);
        }
        let out = Tensor::new(kept_shape, out)?;
        let grad = self.g(a);
        self.finish(
            name,
            out,
            Op::Reduce {
                x: a,
                offsets,
                scale,
            },
            grad,
        )
    }

    /// Sum over every dimension not in `keep` (sorted, zero-based).
    pub fn reduce_sum(&mut self, a: Var, keep: &[usize]) -> Result<Var> {
        self.reduce("reduce_sum", a, keep, false)
    }

    /// Mean over every dimension not in `keep` (sorted, zero-based).
    pub fn reduce_mean(&mut self, a: Var, keep: &[usize]) -> Result<Var> {
        self.reduce("reduce_mean", a, keep, true)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce_sum(a, &[])
    }

    /// Replicates `a` into `shape`; `a`'s dimensions become the `keep`
    /// dimensions of the output.
    pub fn broadcast(&mut self, a: Var, shape: &[usize], keep: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (offsets, kept_shape) = kept_offsets(shape, keep)?;
        let expected: usize = kept_shape.iter().product();
        let shapes_agree = ta.shape() == kept_shape.as_slice()
            || (kept_shape.is_empty() && ta.len() == 1);
        if !shapes_agree || ta.len() != expected {
            return Err(Error::config(format!(
                "broadcast: {:?} does not fit dims {keep:?} of {shape:?}",
                ta.shape()
            )));
        }
        check_inputs("broadcast", &[ta])?;
        let data = offsets.iter().map(|&o| ta.data()[o]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        let grad = self.g(a);
        self.finish("broadcast", out, Op::Broadcast { x: a, offsets }, grad)
    }

    /// Row-wise gather: `out[i] = a[i, index[i]]` for `a: [B, C]`.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 || ta.shape()[0] != index.len() {
            return Err(Error::config(format!(
                "pick: {} indices for shape {:?}",
                index.len(),
                ta.shape()
            )));
        }
        let c = ta.shape()[1];
        if let Some(&bad) = index.iter().find(|&&i| i >= c) {
            return Err(Error::data(format!("pick: index {bad} out of range 0..{c}")));
        }
        check_inputs("pick", &[ta])?;
        let data = index.iter().enumerate().map(|(r, &i)| ta.data()[r * c + i]).collect();
        let out = Tensor::new(vec![index.len()], data)?;
        let grad = self.g(a);
        self.finish("pick", out, Op::Pick(a, index.to_vec()), grad)
    }

    /// Identity forward; no adjoint flows back through it.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        if self.open_barriers {
            return a;
        }
        let value = self.value(a).clone();
        self.push(value, Op::StopGradient(a), false)
    }

    /// Accumulates adjoints of the scalar `loss` into every node that can
    /// reach a parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::usage("backward called before the loss was recorded"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        let mut visited = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            visited.push(i);
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut adj);
            }
            adj[i] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Op::Param(id), Some(g)) = (&node.op, &adj[i]) {
                let entry = params
                    .entry(*id)
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
                for (e, x) in entry.data_mut().iter_mut().zip(g) {
                    *e += x;
                }
            }
        }
        Ok(Gradients {
            adjoints: adj,
            params,
            visited,
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        let y = node.value.data();

        match &node.op {
            Op::Leaf | Op::Param(_) | Op::StopGradient(_) => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(a) {
                    acc(a, &mut |da| {
                        gemm(m, n, k, g, (n, 1), tb.data(), (1, n), da, 1.0)
                    });
                }
                if wants(b) {
                    acc(b, &mut |db| {
                        gemm(k, m, n, ta.data(), (1, k), g, (n, 1), db, 1.0)
                    });
                }
            }
            &Op::AddBias(a, b) => {
                acc(a, &mut |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x));
                let n = val(b).len();
                acc(b, &mut |db| {
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x));
                acc(b, &mut |db| db.iter_mut().zip(g).for_each(|(d, x)| *d += x));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x));
                acc(b, &mut |db| db.iter_mut().zip(g).for_each(|(d, x)| *d -= x));
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (val(a).data(), val(b).data());
                acc(a, &mut |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * tb[i];
                    }
                });
                acc(b, &mut |db| {
                    for i in 0..db.len() {
                        db[i] += g[i] * ta[i];
                    }
                });
            }
            &Op::Div(a, b) => {
                let tb = val(b).data();
                acc(a, &mut |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] / tb[i];
                    }
                });
                acc(b, &mut |db| {
                    for i in 0..db.len() {
                        db[i] -= g[i] * y[i] / tb[i];
                    }
                });
            }
            &Op::Scale(a, s) => {
                acc(a, &mut |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += s * x));
            }
            &Op::AddScalar(a) => {
                acc(a, &mut |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x));
            }
            &Op::LeakyRelu(a, slope) => {
                let x = val(a).data();
                acc(a, &mut |da| {
                    for i in 0..da.len() {
                        da[i] += if x[i] > 0.0 { g[i] } else { slope * g[i] };
                    }
                });
            }
            &Op::Sigmoid(a) => acc(a, &mut |da| {
                for i in 0..da.len() {
                    da[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }),
            &Op::Exp(a) => acc(a, &mut |da| {
                for i in 0..da.len() {
                    da[i] += g[i] * y[i];
                }
            }),
            &Op::Log(a) => {
                let x = val(a).data();
                acc(a, &mut |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] / x[i];
                    }
                });
            }
            &Op::Sqrt(a) => acc(a, &mut |da| {
                for i in 0..da.len() {
                    da[i] += g[i] * 0.5 / y[i];
                }
            }),
            &Op::Clamp(a, lo, hi) => {
                let x = val(a).data();
                acc(a, &mut |da| {
                    for i in 0..da.len() {
                        if x[i] >= lo && x[i] <= hi {
                            da[i] += g[i];
                        }
                    }
                });
            }
            &Op::LogSoftmax(a) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                acc(a, &mut |da| {
                    for ((drow, grow), yrow) in
                        da.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n))
                    {
                        let gs: f64 = grow.iter().sum();
                        for j in 0..n {
                            drow[j] += grow[j] - yrow[j].exp() * gs;
                        }
                    }
                });
            }
            Op::Reduce { x, offsets, scale } => {
                let s = *scale;
                acc(*x, &mut |dx| {
                    for (d, &o) in dx.iter_mut().zip(offsets) {
                        *d += s * g[o];
                    }
                });
            }
            Op::Broadcast { x, offsets } => {
                acc(*x, &mut |dx| {
                    for (gi, &o) in g.iter().zip(offsets) {
                        dx[o] += gi;
                    }
                });
            }
            Op::Pick(a, index) => {
                let c = val(*a).shape()[1];
                acc(*a, &mut |da| {
                    for (r, &i) in index.iter().enumerate() {
                        da[r * c + i] += g[r];
                    }
                });
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
    params: BTreeMap<ParamId, Tensor>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Accumulated adjoint of a parameter, if the loss depends on it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Adjoint of a parameter, zero-filled when the loss does not reach it.
    pub fn param_or_zeros(&self, id: ParamId, store: &ParamStore) -> Tensor {
        self.params
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Raw adjoint of any recorded node (flattened).
    pub fn adjoint(&self, v: Var) -> Option<&[f64]> {
        self.adjoints.get(v.0).and_then(|a| a.as_deref())
    }

    /// Node indices in the order backward processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.scalar(0.0);
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn log_softmax_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap());
        let y = g.log_softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!(close(v, -(3.0f64).ln(), 1e-15));
        }
    }

    #[test]
    fn log_softmax_is_stable_for_huge_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap());
        let y = g.log_softmax(x).unwrap();
        assert!(close(g.value(y).data()[0], 0.0, 1e-12));
        assert!(close(g.value(y).data()[1], -1000.0, 1e-9));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let mut g = Graph::new();
        let va = g.constant(Tensor::new(vec![2, 3], a.clone()).unwrap());
        let vb = g.constant(Tensor::new(vec![3, 4], b.clone()).unwrap());
        let c = g.matmul(va, vb).unwrap();
        assert_eq!(g.shape(c), &[2, 4]);
        for i in 0..2 {
            for j in 0..4 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a[i * 3 + k] * b[k * 4 + j];
                }
                assert!(close(g.value(c).data()[i * 4 + j], s, 1e-14));
            }
        }
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Config(_))));
        let c = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.add(a, c), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_input_names_primitive() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, f64::NAN]));
        match g.sigmoid(a) {
            Err(Error::Numeric { op, .. }) => assert_eq!(op, "sigmoid"),
            other => panic!("expected numeric error, got {other:?}"),
        }
        let z = g.constant(Tensor::vector(vec![0.0]));
        assert!(matches!(g.log(z), Err(Error::Numeric { op: "log", .. })));
    }

    #[test]
    fn backward_requires_recorded_scalar() {
        let g = Graph::new();
        assert!(matches!(g.backward(Var(0)), Err(Error::Usage(_))));
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(a), Err(Error::Usage(_))));
    }

    #[test]
    fn independent_parameter_gets_no_adjoint() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::vector(vec![1.0, 2.0]));
        let q = store.add("q", Tensor::vector(vec![3.0]));
        let mut g = Graph::new();
        let vp = g.param(&store, p);
        let _vq = g.param(&store, q);
        let s = g.sum(vp).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.param(q).is_none());
        assert_eq!(grads.param_or_zeros(q, &store).data(), &[0.0]);
        assert_eq!(grads.param(p).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn linear_weight_adjoint_is_outer_product() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![3, 2], vec![0.1; 6]).unwrap());
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap());
        let vw = g.param(&store, w);
        let y = g.matmul(x, vw).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        let dw = grads.param(w).unwrap();
        assert_eq!(dw.data(), &[1.0, 1.0, -2.0, -2.0, 3.0, 3.0]);
    }

    #[test]
    fn backward_visits_in_reverse_recording_order() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::vector(vec![0.3, -0.2]));
        let mut g = Graph::new();
        let v = g.param(&store, p);
        let a = g.sigmoid(v).unwrap();
        let b = g.mul(a, v).unwrap();
        let c = g.exp(b).unwrap();
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        let order = grads.visit_order();
        assert!(order.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(order.first(), Some(&s.index()));
    }

    #[test]
    fn stop_gradient_blocks_adjoint() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::vector(vec![0.7]));
        let mut g = Graph::new();
        let v = g.param(&store, p);
        let barrier = g.stop_gradient(v);
        let sq = g.mul(barrier, barrier).unwrap();
        let direct = g.scale(v, 2.0).unwrap();
        let total = g.add(sq, direct).unwrap();
        let s = g.sum(total).unwrap();
        let grads = g.backward(s).unwrap();
        // Only the direct path contributes.
        assert_eq!(grads.param(p).unwrap().data(), &[2.0]);
    }

    #[test]
    fn reduce_and_broadcast_are_adjoint() {
        let mut g = Graph::new();
        let t = Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let x = g.constant(t);
        let m = g.reduce_mean(x, &[1]).unwrap();
        assert_eq!(g.shape(m), &[3]);
        // mean over dims 0 and 2 for index 1 on dim 1: values 4..8 and 16..20
        let expected = (4..8).chain(16..20).map(f64::from).sum::<f64>() / 8.0;
        assert!(close(g.value(m).data()[1], expected, 1e-12));
        let b = g.broadcast(m, &[2, 3, 4], &[1]).unwrap();
        assert_eq!(g.value(b).data()[4], g.value(m).data()[1]);
        assert_eq!(g.value(b).data()[23], g.value(m).data()[2]);
    }

    #[test]
    fn pick_rejects_out_of_range_label() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 10]));
        assert!(matches!(g.pick(x, &[3, 10]), Err(Error::Data(_))));
    }
}
