//! Wengert tape: operations are recorded eagerly during the forward pass and
//! replayed in reverse to accumulate gradients.
//!
//! A tape and the node handles it hands out form a single-threaded unit of
//! work; distinct tapes are independent and may live on different threads.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    Softmax { x: NodeId },
    Concat { a: NodeId, b: NodeId, axis: usize },
    Row { x: NodeId, i: usize },
    Col { x: NodeId, j: usize },
    Element { x: NodeId, i: usize },
    Sum { x: NodeId },
    MseLoss { pred: NodeId, truth: NodeId },
    /// Elementwise product with a constant mask (dropout).
    Mask { x: NodeId, mask: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording tape. Rebuilt per forward pass; values are computed eagerly.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a node, `None` if the node cannot reach the loss.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Record an input or parameter value.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_scalar(&mut self, value: f64) -> NodeId {
        self.leaf(Tensor::scalar(value))
    }

    /// Matrix product. Rank-1 operands are treated as `1 x k` on the left and
    /// `k x 1` on the right, and the result is squeezed accordingly, so this
    /// also covers matrix-vector, vector-matrix, and dot products.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() > 2 || vb.rank() > 2 {
            return Err(Error::Dimension {
                op: "matmul",
                msg: format!("expects rank <= 2, got {:?} and {:?}", va.shape(), vb.shape()),
            });
        }
        let (m, ka) = lifted_dims_left(va.shape());
        let (kb, n) = lifted_dims_right(vb.shape());
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = matmul_raw(va.data(), vb.data(), m, ka, n);
        let out_shape = match (va.rank(), vb.rank()) {
            (2, 2) => vec![m, n],
            (2, 1) => vec![m],
            (1, 2) => vec![n],
            _ => vec![1],
        };
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(Error::Dimension {
                op: "transpose",
                msg: format!("expects rank 2, got {:?}", v.shape()),
            });
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let value = Tensor::new(vec![c, r], transpose_raw(v.data(), r, c))?;
        Ok(self.push(value, Op::Transpose { x }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    /// Elementwise product. One operand may be a scalar (shape `[1]`), which
    /// scales the other; no other broadcasting.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if va.is_scalar() {
            let s = va.data()[0];
            let data = vb.data().iter().map(|y| s * y).collect();
            Tensor::new(vb.shape().to_vec(), data)?
        } else if vb.is_scalar() {
            let s = vb.data()[0];
            let data = va.data().iter().map(|x| x * s).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        };
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).expect("tanh shape");
        self.push(value, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|&v| sigmoid_raw(v)).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).expect("sigmoid shape");
        self.push(value, Op::Sigmoid { x })
    }

    /// Numerically stable softmax over a rank-1 tensor (max subtraction).
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 1 {
            return Err(Error::Dimension {
                op: "softmax",
                msg: format!("expects rank 1, got {:?}", v.shape()),
            });
        }
        let value = Tensor::vector(softmax_raw(v.data()))?;
        Ok(self.push(value, Op::Softmax { x }))
    }

    /// Concatenate along `axis`. Shapes must agree on every other axis.
    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != vb.rank() || axis >= va.rank() || va.rank() > 2 {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        for d in 0..va.rank() {
            if d != axis && va.shape()[d] != vb.shape()[d] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: va.shape().to_vec(),
                    rhs: vb.shape().to_vec(),
                });
            }
        }
        let value = if va.rank() == 1 {
            let mut data = va.data().to_vec();
            data.extend_from_slice(vb.data());
            Tensor::vector(data)?
        } else if axis == 0 {
            let mut data = va.data().to_vec();
            data.extend_from_slice(vb.data());
            Tensor::new(vec![va.shape()[0] + vb.shape()[0], va.shape()[1]], data)?
        } else {
            let rows = va.shape()[0];
            let (ca, cb) = (va.shape()[1], vb.shape()[1]);
            let mut data = Vec::with_capacity(rows * (ca + cb));
            for r in 0..rows {
                data.extend_from_slice(&va.data()[r * ca..(r + 1) * ca]);
                data.extend_from_slice(&vb.data()[r * cb..(r + 1) * cb]);
            }
            Tensor::new(vec![rows, ca + cb], data)?
        };
        Ok(self.push(value, Op::Concat { a, b, axis }))
    }

    /// Row `i` of a rank-2 tensor, as a vector.
    pub fn row(&mut self, x: NodeId, i: usize) -> Result<NodeId> {
        let v = self.value(x);
        require_rank2("row", v)?;
        let (r, c) = (v.shape()[0], v.shape()[1]);
        if i >= r {
            return Err(Error::IndexOutOfRange { what: "row", index: i, len: r });
        }
        let value = Tensor::vector(v.data()[i * c..(i + 1) * c].to_vec())?;
        Ok(self.push(value, Op::Row { x, i }))
    }

    /// Column `j` of a rank-2 tensor, as a vector.
    pub fn col(&mut self, x: NodeId, j: usize) -> Result<NodeId> {
        let v = self.value(x);
        require_rank2("col", v)?;
        let (r, c) = (v.shape()[0], v.shape()[1]);
        if j >= c {
            return Err(Error::IndexOutOfRange { what: "column", index: j, len: c });
        }
        let value = Tensor::vector((0..r).map(|i| v.data()[i * c + j]).collect())?;
        Ok(self.push(value, Op::Col { x, j }))
    }

    /// Single element by flat index, as a scalar tensor.
    pub fn element(&mut self, x: NodeId, i: usize) -> Result<NodeId> {
        let v = self.value(x);
        if i >= v.numel() {
            return Err(Error::IndexOutOfRange { what: "element", index: i, len: v.numel() });
        }
        let value = Tensor::scalar(v.data()[i]);
        Ok(self.push(value, Op::Element { x, i }))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::Sum { x })
    }

    /// Mean squared error between two equal-length vectors.
    pub fn mse_loss(&mut self, pred: NodeId, truth: NodeId) -> Result<NodeId> {
        let (vp, vt) = (self.value(pred), self.value(truth));
        if vp.shape() != vt.shape() || vp.rank() != 1 {
            return Err(Error::ShapeMismatch {
                op: "mse_loss",
                lhs: vp.shape().to_vec(),
                rhs: vt.shape().to_vec(),
            });
        }
        let n = vp.numel() as f64;
        let sum: f64 = vp
            .data()
            .iter()
            .zip(vt.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let value = Tensor::scalar(sum / n);
        Ok(self.push(value, Op::MseLoss { pred, truth }))
    }

    /// Elementwise product with a fixed mask; used for inverted dropout.
    pub fn mask(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        let v = self.value(x);
        if mask.len() != v.numel() {
            return Err(Error::Dimension {
                op: "mask",
                msg: format!("mask length {} vs tensor {:?}", mask.len(), v.shape()),
            });
        }
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mask { x, mask }))
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, op))
    }

    /// Reverse pass from a scalar loss node. Seeds the loss gradient with 1
    /// and accumulates into every node that can reach it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g_out) = grads[i].take() else { continue };
            self.accumulate_inputs(i, &g_out, &mut grads);
            grads[i] = Some(g_out);
        }
        Ok(Gradients { grads })
    }

    fn accumulate_inputs(&self, i: usize, g_out: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = lifted_dims_left(va.shape());
                let (_, n) = lifted_dims_right(vb.shape());
                // dA = dC * B^T, dB = A^T * dC, in the lifted 2-D view.
                let bt = transpose_raw(vb.data(), k, n);
                let da = matmul_raw(g_out.data(), &bt, m, n, k);
                let at = transpose_raw(va.data(), m, k);
                let db = matmul_raw(&at, g_out.data(), k, m, n);
                add_into(grads, *a, va.shape(), &da);
                add_into(grads, *b, vb.shape(), &db);
            }
            Op::Transpose { x } => {
                let v = self.value(*x);
                let (r, c) = (v.shape()[0], v.shape()[1]);
                let dx = transpose_raw(g_out.data(), c, r);
                add_into(grads, *x, v.shape(), &dx);
            }
            Op::Add { a, b } => {
                add_into(grads, *a, self.value(*a).shape(), g_out.data());
                add_into(grads, *b, self.value(*b).shape(), g_out.data());
            }
            Op::Sub { a, b } => {
                add_into(grads, *a, self.value(*a).shape(), g_out.data());
                let neg: Vec<f64> = g_out.data().iter().map(|v| -v).collect();
                add_into(grads, *b, self.value(*b).shape(), &neg);
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if va.shape() == vb.shape() {
                    let da: Vec<f64> = g_out.data().iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                    let db: Vec<f64> = g_out.data().iter().zip(va.data()).map(|(g, x)| g * x).collect();
                    add_into(grads, *a, va.shape(), &da);
                    add_into(grads, *b, vb.shape(), &db);
                } else if va.is_scalar() {
                    let da: f64 = g_out.data().iter().zip(vb.data()).map(|(g, y)| g * y).sum();
                    let s = va.data()[0];
                    let db: Vec<f64> = g_out.data().iter().map(|g| g * s).collect();
                    add_into(grads, *a, va.shape(), &[da]);
                    add_into(grads, *b, vb.shape(), &db);
                } else {
                    let s = vb.data()[0];
                    let da: Vec<f64> = g_out.data().iter().map(|g| g * s).collect();
                    let db: f64 = g_out.data().iter().zip(va.data()).map(|(g, x)| g * x).sum();
                    add_into(grads, *a, va.shape(), &da);
                    add_into(grads, *b, vb.shape(), &[db]);
                }
            }
            Op::Tanh { x } => {
                let y = &node.value;
                let dx: Vec<f64> = g_out
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, t)| g * (1.0 - t * t))
                    .collect();
                add_into(grads, *x, self.value(*x).shape(), &dx);
            }
            Op::Sigmoid { x } => {
                let y = &node.value;
                let dx: Vec<f64> = g_out
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                add_into(grads, *x, self.value(*x).shape(), &dx);
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let dot: f64 = y.iter().zip(g_out.data()).map(|(yi, gi)| yi * gi).sum();
                let dx: Vec<f64> = y
                    .iter()
                    .zip(g_out.data())
                    .map(|(yi, gi)| yi * (gi - dot))
                    .collect();
                add_into(grads, *x, self.value(*x).shape(), &dx);
            }
            Op::Concat { a, b, axis } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (da, db) = split_concat_grad(g_out.data(), va.shape(), vb.shape(), *axis);
                add_into(grads, *a, va.shape(), &da);
                add_into(grads, *b, vb.shape(), &db);
            }
            Op::Row { x, i } => {
                let v = self.value(*x);
                let c = v.shape()[1];
                let mut dx = vec![0.0; v.numel()];
                dx[i * c..(i + 1) * c].copy_from_slice(g_out.data());
                add_into(grads, *x, v.shape(), &dx);
            }
            Op::Col { x, j } => {
                let v = self.value(*x);
                let (r, c) = (v.shape()[0], v.shape()[1]);
                let mut dx = vec![0.0; v.numel()];
                for i in 0..r {
                    dx[i * c + j] = g_out.data()[i];
                }
                add_into(grads, *x, v.shape(), &dx);
            }
            Op::Element { x, i } => {
                let v = self.value(*x);
                let mut dx = vec![0.0; v.numel()];
                dx[*i] = g_out.data()[0];
                add_into(grads, *x, v.shape(), &dx);
            }
            Op::Sum { x } => {
                let v = self.value(*x);
                let dx = vec![g_out.data()[0]; v.numel()];
                add_into(grads, *x, v.shape(), &dx);
            }
            Op::MseLoss { pred, truth } => {
                let (vp, vt) = (self.value(*pred), self.value(*truth));
                let n = vp.numel() as f64;
                let g = g_out.data()[0];
                let dp: Vec<f64> = vp
                    .data()
                    .iter()
                    .zip(vt.data())
                    .map(|(p, t)| g * 2.0 * (p - t) / n)
                    .collect();
                let dt: Vec<f64> = dp.iter().map(|v| -v).collect();
                add_into(grads, *pred, vp.shape(), &dp);
                add_into(grads, *truth, vt.shape(), &dt);
            }
            Op::Mask { x, mask } => {
                let dx: Vec<f64> = g_out.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                add_into(grads, *x, self.value(*x).shape(), &dx);
            }
        }
    }
}

fn require_rank2(op: &'static str, v: &Tensor) -> Result<()> {
    if v.rank() != 2 {
        return Err(Error::Dimension {
            op,
            msg: format!("expects rank 2, got {:?}", v.shape()),
        });
    }
    Ok(())
}

fn lifted_dims_left(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        _ => (shape[0], shape[1]),
    }
}

fn lifted_dims_right(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (shape[0], 1),
        _ => (shape[0], shape[1]),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aip * b[p * n + j];
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

fn sigmoid_raw(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_raw(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn split_concat_grad(
    g: &[f64],
    sa: &[usize],
    sb: &[usize],
    axis: usize,
) -> (Vec<f64>, Vec<f64>) {
    let na: usize = sa.iter().product();
    if sa.len() == 1 || axis == 0 {
        (g[..na].to_vec(), g[na..].to_vec())
    } else {
        let rows = sa[0];
        let (ca, cb) = (sa[1], sb[1]);
        let mut da = Vec::with_capacity(rows * ca);
        let mut db = Vec::with_capacity(rows * cb);
        for r in 0..rows {
            let base = r * (ca + cb);
            da.extend_from_slice(&g[base..base + ca]);
            db.extend_from_slice(&g[base + ca..base + ca + cb]);
        }
        (da, db)
    }
}

fn add_into(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], delta: &[f64]) {
    let slot = &mut grads[id.0];
    match slot {
        Some(g) => {
            for (gi, di) in g.data_mut().iter_mut().zip(delta) {
                *gi += di;
            }
        }
        None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta.to_vec()).expect("gradient shape"));
        }
    }
}

/// Split a vector or matrix back into the two parts `concat` joined; the
/// inverse used by round-trip tests.
pub fn split(t: &Tensor, at: usize, axis: usize) -> Result<(Tensor, Tensor)> {
    match t.rank() {
        1 => {
            if at > t.numel() {
                return Err(Error::IndexOutOfRange { what: "split", index: at, len: t.numel() });
            }
            Ok((
                Tensor::vector(t.data()[..at].to_vec())?,
                Tensor::vector(t.data()[at..].to_vec())?,
            ))
        }
        2 => {
            let (r, c) = (t.shape()[0], t.shape()[1]);
            if axis == 0 {
                if at > r {
                    return Err(Error::IndexOutOfRange { what: "split", index: at, len: r });
                }
                Ok((
                    Tensor::new(vec![at, c], t.data()[..at * c].to_vec())?,
                    Tensor::new(vec![r - at, c], t.data()[at * c..].to_vec())?,
                ))
            } else {
                if at > c {
                    return Err(Error::IndexOutOfRange { what: "split", index: at, len: c });
                }
                let mut left = Vec::with_capacity(r * at);
                let mut right = Vec::with_capacity(r * (c - at));
                for i in 0..r {
                    left.extend_from_slice(&t.data()[i * c..i * c + at]);
                    right.extend_from_slice(&t.data()[i * c + at..(i + 1) * c]);
                }
                Ok((
                    Tensor::new(vec![r, at], left)?,
                    Tensor::new(vec![r, c - at], right)?,
                ))
            }
        }
        _ => Err(Error::Dimension {
            op: "split",
            msg: format!("expects rank <= 2, got {:?}", t.shape()),
        }),
    }
}
