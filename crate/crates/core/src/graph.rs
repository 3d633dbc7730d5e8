//! Reverse-mode automatic differentiation over a flat op tape.
//!
//! A [`Graph`] records every forward op in execution order, which is already
//! a topological order, so the backward pass is a single reverse sweep that
//! visits each node exactly once and accumulates gradients into its inputs.
//! Leaf values are borrowed, not copied, so model parameters can feed many
//! graphs without cloning.

use std::borrow::Cow;

use crate::kernels::{col2im_add, gemm, gemm_nt, gemm_tn, im2col, stable_sigmoid};
use crate::tensor::{Tensor, TensorError};

pub type NodeId = usize;

/// Predictions are clamped to `[BCE_CLIP, 1 - BCE_CLIP]` before the logs in
/// the cross-entropy loss.
pub const BCE_CLIP: f64 = 1e-7;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Conv2dSame { x: NodeId, w: NodeId, b: NodeId },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    SoftmaxRows { x: NodeId },
    Mul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    DivElem { a: NodeId, b: NodeId },
    AffineScalar { x: NodeId, scale: f64 },
    MaxPool2d { x: NodeId, pt: usize, pf: usize },
    SumOverTime { x: NodeId },
    MeanOverTime { x: NodeId },
    SumAll { x: NodeId },
    FlattenTrailing { x: NodeId },
    Row { x: NodeId, index: usize },
    StackRows { rows: Vec<NodeId> },
    ConcatCols { a: NodeId, b: NodeId },
    BceLoss { pred: NodeId, target: Tensor },
}

struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
}

/// Gradients of one backward pass, indexed by the node ids of the graph that
/// produced them. Nodes off the loss path have no entry.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Leaf node borrowing an external tensor (parameters, features).
    pub fn input(&mut self, t: &'a Tensor) -> NodeId {
        self.push_node(Op::Leaf, Cow::Borrowed(t))
    }

    /// Leaf node owning its value.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push_node(Op::Leaf, Cow::Owned(t))
    }

    // Values are not validated here: ops may legitimately produce non-finite
    // intermediates when a model diverges. Callers that need finiteness
    // check it explicitly (see the model's per-layer checks).
    fn push_node(&mut self, op: Op, value: Cow<'a, Tensor>) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.push_node(op, Cow::Owned(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::DimensionMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), self.value(b).data(), 0.0, &mut out);
        Ok(self.push(Op::Matmul { a, b }, Tensor::from_vec(vec![m, n], out)?))
    }

    /// x[m,d] @ w[d,n] + b[n] broadcast over rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sx, sw, sb) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(TensorError::DimensionMismatch {
                op: "linear",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        if sb != [sw[1]] {
            return Err(TensorError::DimensionMismatch {
                op: "linear bias",
                lhs: sw.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, d, n) = (sx[0], sx[1], sw[1]);
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(self.value(b).data());
        }
        gemm(m, d, n, self.value(x).data(), self.value(w).data(), 1.0, &mut out);
        Ok(self.push(Op::Linear { x, w, b }, Tensor::from_vec(vec![m, n], out)?))
    }

    /// Same-padded cross-correlation of x[t,f,cin] with w[k,k,cin,cout] plus
    /// bias[cout]. No kernel flipping.
    pub fn conv2d_same(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sx, sw, sb) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        if sx.len() != 3 || sw.len() != 4 {
            return Err(TensorError::DimensionMismatch {
                op: "conv2d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (t, f, cin) = (sx[0], sx[1], sx[2]);
        let (k0, k1, wcin, cout) = (sw[0], sw[1], sw[2], sw[3]);
        if k0 != k1 || k0 % 2 == 0 {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: sw.to_vec(),
                reason: "kernel must be square with odd size".into(),
            });
        }
        if wcin != cin {
            return Err(TensorError::DimensionMismatch {
                op: "conv2d channels",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        if sb != [cout] {
            return Err(TensorError::DimensionMismatch {
                op: "conv2d bias",
                lhs: sw.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let k = k0;
        let cols = k * k * cin;
        let mut patches = vec![0.0; t * f * cols];
        im2col(self.value(x).data(), t, f, cin, k, &mut patches);
        let mut out = Vec::with_capacity(t * f * cout);
        for _ in 0..t * f {
            out.extend_from_slice(self.value(b).data());
        }
        gemm(t * f, cols, cout, &patches, self.value(w).data(), 1.0, &mut out);
        Ok(self.push(Op::Conv2dSame { x, w, b }, Tensor::from_vec(vec![t, f, cout], out)?))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| stable_sigmoid(v)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Sigmoid { x }, Tensor::from_vec(shape, out).unwrap())
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Tanh { x }, Tensor::from_vec(shape, out).unwrap())
    }

    /// Row-wise softmax of x[t,c]: each frame is normalized over the class
    /// axis independently.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let sx = self.value(x).shape();
        if sx.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "softmax_rows",
                shape: sx.to_vec(),
                reason: "expects a [frames, classes] matrix".into(),
            });
        }
        let (t, c) = (sx[0], sx[1]);
        let data = self.value(x).data();
        let mut out = vec![0.0; t * c];
        for r in 0..t {
            let row = &data[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out[r * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out[r * c + j] /= sum;
            }
        }
        Ok(self.push(Op::SoftmaxRows { x }, Tensor::from_vec(vec![t, c], out)?))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.elementwise_binary(a, b, "elementwise_mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.elementwise_binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.elementwise_binary(a, b, "div", |x, y| x / y, Op::DivElem { a, b })
    }

    fn elementwise_binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::DimensionMismatch {
                op: name,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(op, Tensor::from_vec(shape, out)?))
    }

    /// y = scale * x + shift, elementwise with scalar coefficients.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| scale * v + shift).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::AffineScalar { x, scale }, Tensor::from_vec(shape, out).unwrap())
    }

    pub fn one_minus(&mut self, x: NodeId) -> NodeId {
        self.affine(x, -1.0, 1.0)
    }

    /// Max pooling with window (pt, pf) on [t,f] or [t,f,c]; trailing
    /// remainders that do not fill a window are dropped.
    pub fn max_pool2d(&mut self, x: NodeId, pt: usize, pf: usize) -> Result<NodeId, TensorError> {
        let sx = self.value(x).shape().to_vec();
        let (t, f, c, rank2) = match sx.as_slice() {
            [t, f] => (*t, *f, 1, true),
            [t, f, c] => (*t, *f, *c, false),
            _ => {
                return Err(TensorError::InvalidShape {
                    op: "max_pool2d",
                    shape: sx,
                    reason: "expects rank 2 or 3".into(),
                })
            }
        };
        if pt == 0 || pf == 0 || t < pt || f < pf {
            return Err(TensorError::InvalidShape {
                op: "max_pool2d",
                shape: sx,
                reason: format!("dimension smaller than {}x{} window", pt, pf),
            });
        }
        if t % pt != 0 || f % pf != 0 {
            warn_pool_remainder_once(t, f, pt, pf);
        }
        let (to, fo) = (t / pt, f / pf);
        let data = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; to * fo * c];
        for ti in 0..to {
            for fi in 0..fo {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    for dt in 0..pt {
                        for df in 0..pf {
                            let v = data[((ti * pt + dt) * f + fi * pf + df) * c + ch];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out[(ti * fo + fi) * c + ch] = best;
                }
            }
        }
        let shape = if rank2 { vec![to, fo] } else { vec![to, fo, c] };
        Ok(self.push(Op::MaxPool2d { x, pt, pf }, Tensor::from_vec(shape, out)?))
    }

    /// Column sums of x[t,c] -> [c].
    pub fn sum_over_time(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let out = self.reduce_over_time(x, "sum_over_time", 1.0)?;
        Ok(self.push(Op::SumOverTime { x }, out))
    }

    /// Column means of x[t,c] -> [c].
    pub fn mean_over_time(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let t = self.value(x).shape()[0] as f64;
        let out = self.reduce_over_time(x, "mean_over_time", 1.0 / t)?;
        Ok(self.push(Op::MeanOverTime { x }, out))
    }

    fn reduce_over_time(
        &self,
        x: NodeId,
        name: &'static str,
        scale: f64,
    ) -> Result<Tensor, TensorError> {
        let sx = self.value(x).shape();
        if sx.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: name,
                shape: sx.to_vec(),
                reason: "expects a [frames, classes] matrix".into(),
            });
        }
        let (t, c) = (sx[0], sx[1]);
        let data = self.value(x).data();
        let mut out = vec![0.0; c];
        for r in 0..t {
            for j in 0..c {
                out[j] += data[r * c + j];
            }
        }
        for v in &mut out {
            *v *= scale;
        }
        Tensor::from_vec(vec![c], out)
    }

    /// Scalar sum of every element.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::SumAll { x }, Tensor::scalar(s))
    }

    /// [t,f,c] -> [t, f*c] without moving data.
    pub fn flatten_trailing(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let sx = self.value(x).shape();
        if sx.len() != 3 {
            return Err(TensorError::InvalidShape {
                op: "flatten_trailing",
                shape: sx.to_vec(),
                reason: "expects rank 3".into(),
            });
        }
        let shape = vec![sx[0], sx[1] * sx[2]];
        let out = Tensor::from_vec(shape, self.value(x).data().to_vec())?;
        Ok(self.push(Op::FlattenTrailing { x }, out))
    }

    /// Row `index` of x[t,d] as a [1,d] matrix.
    pub fn row(&mut self, x: NodeId, index: usize) -> Result<NodeId, TensorError> {
        let sx = self.value(x).shape();
        if sx.len() != 2 || index >= sx[0] {
            return Err(TensorError::InvalidShape {
                op: "row",
                shape: sx.to_vec(),
                reason: format!("row {} out of range", index),
            });
        }
        let d = sx[1];
        let out = self.value(x).data()[index * d..(index + 1) * d].to_vec();
        Ok(self.push(Op::Row { x, index }, Tensor::from_vec(vec![1, d], out)?))
    }

    /// Stack t nodes of shape [1,d] into [t,d], in the given order.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId, TensorError> {
        if rows.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "stack_rows",
                shape: vec![],
                reason: "needs at least one row".into(),
            });
        }
        let d = match self.value(rows[0]).shape() {
            [1, d] => *d,
            other => {
                return Err(TensorError::InvalidShape {
                    op: "stack_rows",
                    shape: other.to_vec(),
                    reason: "rows must be [1,d]".into(),
                })
            }
        };
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if self.value(r).shape() != [1, d] {
                return Err(TensorError::DimensionMismatch {
                    op: "stack_rows",
                    lhs: vec![1, d],
                    rhs: self.value(r).shape().to_vec(),
                });
            }
            out.extend_from_slice(self.value(r).data());
        }
        let t = rows.len();
        Ok(self.push(
            Op::StackRows { rows: rows.to_vec() },
            Tensor::from_vec(vec![t, d], out)?,
        ))
    }

    /// Concatenate a[t,p] and b[t,q] into [t,p+q].
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(TensorError::DimensionMismatch {
                op: "concat_cols",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (t, p, q) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(t * (p + q));
        for r in 0..t {
            out.extend_from_slice(&da[r * p..(r + 1) * p]);
            out.extend_from_slice(&db[r * q..(r + 1) * q]);
        }
        Ok(self.push(Op::ConcatCols { a, b }, Tensor::from_vec(vec![t, p + q], out)?))
    }

    /// Binary cross-entropy between pred[n,c] in (0,1) and a {0,1} target,
    /// summed over classes and averaged over the batch dimension n. A
    /// rank-1 pred [c] is treated as a single row (n=1).
    /// Predictions are clamped to [BCE_CLIP, 1-BCE_CLIP] before the logs.
    pub fn bce_loss(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId, TensorError> {
        let sp = self.value(pred).shape();
        if sp.is_empty() || sp.len() > 2 || target.shape() != sp {
            return Err(TensorError::DimensionMismatch {
                op: "bce_loss",
                lhs: sp.to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        if let Some(bad) = target.data().iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(TensorError::InvalidValue {
                op: "bce_loss",
                reason: format!("target value {} is not in {{0,1}}", bad),
            });
        }
        let n = if sp.len() == 2 { sp[0] as f64 } else { 1.0 };
        let mut loss = 0.0;
        for (&p, &t) in self.value(pred).data().iter().zip(target.data()) {
            let pc = p.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
            loss -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        }
        loss /= n;
        Ok(self.push(
            Op::BceLoss {
                pred,
                target: target.clone(),
            },
            Tensor::scalar(loss),
        ))
    }

    /// Reverse sweep from a scalar loss node. Gradients of shared
    /// subexpressions accumulate by summation.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::InvalidShape {
                op: "backward",
                shape: self.value(loss).shape().to_vec(),
                reason: "loss must be a single value".into(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let g = match upper[0].as_ref() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, g, lower)?;
        }

        let entries = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    Tensor::from_vec(self.nodes[i].value.shape().to_vec(), data)
                        .expect("gradient shape matches node shape")
                })
            })
            .collect();
        Ok(Gradients { grads: entries })
    }

    fn backprop_node(
        &self,
        i: NodeId,
        g: &[f64],
        lower: &mut [Option<Vec<f64>>],
    ) -> Result<(), TensorError> {
        let ensure = |lower: &mut [Option<Vec<f64>>], id: NodeId, numel: usize| {
            if lower[id].is_none() {
                lower[id] = Some(vec![0.0; numel]);
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let (m, k) = {
                    let s = self.value(*a).shape();
                    (s[0], s[1])
                };
                let n = self.value(*b).shape()[1];
                ensure(lower, *a, m * k);
                gemm_nt(m, n, k, g, self.value(*b).data(), 1.0, lower[*a].as_mut().unwrap());
                ensure(lower, *b, k * n);
                gemm_tn(k, m, n, self.value(*a).data(), g, 1.0, lower[*b].as_mut().unwrap());
            }

            Op::Linear { x, w, b } => {
                let (m, d) = {
                    let s = self.value(*x).shape();
                    (s[0], s[1])
                };
                let n = self.value(*w).shape()[1];
                ensure(lower, *x, m * d);
                gemm_nt(m, n, d, g, self.value(*w).data(), 1.0, lower[*x].as_mut().unwrap());
                ensure(lower, *w, d * n);
                gemm_tn(d, m, n, self.value(*x).data(), g, 1.0, lower[*w].as_mut().unwrap());
                ensure(lower, *b, n);
                let db = lower[*b].as_mut().unwrap();
                for r in 0..m {
                    for j in 0..n {
                        db[j] += g[r * n + j];
                    }
                }
            }

            Op::Conv2dSame { x, w, b } => {
                let (t, f, cin) = {
                    let s = self.value(*x).shape();
                    (s[0], s[1], s[2])
                };
                let sw = self.value(*w).shape();
                let (k, cout) = (sw[0], sw[3]);
                let cols = k * k * cin;

                ensure(lower, *b, cout);
                let db = lower[*b].as_mut().unwrap();
                for r in 0..t * f {
                    for j in 0..cout {
                        db[j] += g[r * cout + j];
                    }
                }

                // Patches are recomputed rather than cached from the forward
                // pass; it is pure data movement.
                let mut patches = vec![0.0; t * f * cols];
                im2col(self.value(*x).data(), t, f, cin, k, &mut patches);
                ensure(lower, *w, cols * cout);
                gemm_tn(cols, t * f, cout, &patches, g, 1.0, lower[*w].as_mut().unwrap());

                let mut dpatches = vec![0.0; t * f * cols];
                gemm_nt(t * f, cout, cols, g, self.value(*w).data(), 0.0, &mut dpatches);
                ensure(lower, *x, t * f * cin);
                col2im_add(&dpatches, t, f, cin, k, lower[*x].as_mut().unwrap());
            }

            Op::Sigmoid { x } => {
                ensure(lower, *x, g.len());
                let dx = lower[*x].as_mut().unwrap();
                for (j, &s) in self.value_data(i).iter().enumerate() {
                    dx[j] += g[j] * s * (1.0 - s);
                }
            }

            Op::Tanh { x } => {
                ensure(lower, *x, g.len());
                let dx = lower[*x].as_mut().unwrap();
                for (j, &t) in self.value_data(i).iter().enumerate() {
                    dx[j] += g[j] * (1.0 - t * t);
                }
            }

            Op::SoftmaxRows { x } => {
                let s = self.value(i).shape();
                let (t, c) = (s[0], s[1]);
                ensure(lower, *x, t * c);
                let z = self.value_data(i);
                let dx = lower[*x].as_mut().unwrap();
                for r in 0..t {
                    let base = r * c;
                    let dot: f64 = (0..c).map(|j| g[base + j] * z[base + j]).sum();
                    for j in 0..c {
                        dx[base + j] += z[base + j] * (g[base + j] - dot);
                    }
                }
            }

            Op::Mul { a, b } => {
                let numel = g.len();
                ensure(lower, *a, numel);
                {
                    let da = lower[*a].as_mut().unwrap();
                    for (j, &bv) in self.value_data(*b).iter().enumerate() {
                        da[j] += g[j] * bv;
                    }
                }
                ensure(lower, *b, numel);
                let db = lower[*b].as_mut().unwrap();
                for (j, &av) in self.value_data(*a).iter().enumerate() {
                    db[j] += g[j] * av;
                }
            }

            Op::Add { a, b } => {
                let numel = g.len();
                ensure(lower, *a, numel);
                {
                    let da = lower[*a].as_mut().unwrap();
                    for j in 0..numel {
                        da[j] += g[j];
                    }
                }
                ensure(lower, *b, numel);
                let db = lower[*b].as_mut().unwrap();
                for j in 0..numel {
                    db[j] += g[j];
                }
            }

            Op::DivElem { a, b } => {
                let numel = g.len();
                let (av, bv) = (self.value_data(*a), self.value_data(*b));
                ensure(lower, *a, numel);
                {
                    let da = lower[*a].as_mut().unwrap();
                    for j in 0..numel {
                        da[j] += g[j] / bv[j];
                    }
                }
                ensure(lower, *b, numel);
                let db = lower[*b].as_mut().unwrap();
                for j in 0..numel {
                    db[j] -= g[j] * av[j] / (bv[j] * bv[j]);
                }
            }

            Op::AffineScalar { x, scale, .. } => {
                ensure(lower, *x, g.len());
                let dx = lower[*x].as_mut().unwrap();
                for j in 0..g.len() {
                    dx[j] += g[j] * scale;
                }
            }

            Op::MaxPool2d { x, pt, pf } => {
                let sx = self.value(*x).shape();
                let (t, f, c) = match sx {
                    [t, f] => (*t, *f, 1),
                    [t, f, c] => (*t, *f, *c),
                    _ => unreachable!(),
                };
                let (to, fo) = (t / pt, f / pf);
                let xv = self.value_data(*x);
                let ov = self.value_data(i);
                ensure(lower, *x, t * f * c);
                let dx = lower[*x].as_mut().unwrap();
                // Route each output gradient to the first window element that
                // attained the max; fixed scan order keeps ties deterministic.
                for ti in 0..to {
                    for fi in 0..fo {
                        for ch in 0..c {
                            let best = ov[(ti * fo + fi) * c + ch];
                            let gv = g[(ti * fo + fi) * c + ch];
                            'scan: for dt in 0..*pt {
                                for df in 0..*pf {
                                    let idx = ((ti * pt + dt) * f + fi * pf + df) * c + ch;
                                    if xv[idx] == best {
                                        dx[idx] += gv;
                                        break 'scan;
                                    }
                                }
                            }
                        }
                    }
                }
            }

            Op::SumOverTime { x } => {
                let sx = self.value(*x).shape();
                let (t, c) = (sx[0], sx[1]);
                ensure(lower, *x, t * c);
                let dx = lower[*x].as_mut().unwrap();
                for r in 0..t {
                    for j in 0..c {
                        dx[r * c + j] += g[j];
                    }
                }
            }

            Op::MeanOverTime { x } => {
                let sx = self.value(*x).shape();
                let (t, c) = (sx[0], sx[1]);
                ensure(lower, *x, t * c);
                let dx = lower[*x].as_mut().unwrap();
                let inv = 1.0 / t as f64;
                for r in 0..t {
                    for j in 0..c {
                        dx[r * c + j] += g[j] * inv;
                    }
                }
            }

            Op::SumAll { x } => {
                let numel = self.value(*x).numel();
                ensure(lower, *x, numel);
                let dx = lower[*x].as_mut().unwrap();
                for v in dx.iter_mut() {
                    *v += g[0];
                }
            }

            Op::FlattenTrailing { x } => {
                ensure(lower, *x, g.len());
                let dx = lower[*x].as_mut().unwrap();
                for j in 0..g.len() {
                    dx[j] += g[j];
                }
            }

            Op::Row { x, index } => {
                let sx = self.value(*x).shape();
                let (t, d) = (sx[0], sx[1]);
                ensure(lower, *x, t * d);
                let dx = lower[*x].as_mut().unwrap();
                for j in 0..d {
                    dx[index * d + j] += g[j];
                }
            }

            Op::StackRows { rows } => {
                let d = self.value(i).shape()[1];
                for (r, &id) in rows.iter().enumerate() {
                    ensure(lower, id, d);
                    let dr = lower[id].as_mut().unwrap();
                    for j in 0..d {
                        dr[j] += g[r * d + j];
                    }
                }
            }

            Op::ConcatCols { a, b } => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (t, p, q) = (sa[0], sa[1], sb[1]);
                ensure(lower, *a, t * p);
                {
                    let da = lower[*a].as_mut().unwrap();
                    for r in 0..t {
                        for j in 0..p {
                            da[r * p + j] += g[r * (p + q) + j];
                        }
                    }
                }
                ensure(lower, *b, t * q);
                let db = lower[*b].as_mut().unwrap();
                for r in 0..t {
                    for j in 0..q {
                        db[r * q + j] += g[r * (p + q) + p + j];
                    }
                }
            }

            Op::BceLoss { pred, target } => {
                let sp = self.value(*pred).shape();
                let n = if sp.len() == 2 { sp[0] as f64 } else { 1.0 };
                let pv = self.value_data(*pred);
                ensure(lower, *pred, pv.len());
                let dp = lower[*pred].as_mut().unwrap();
                for (j, (&p, &t)) in pv.iter().zip(target.data()).enumerate() {
                    // Zero gradient inside the clamped region.
                    if p > BCE_CLIP && p < 1.0 - BCE_CLIP {
                        dp[j] += g[0] * (-(t / p) + (1.0 - t) / (1.0 - p)) / n;
                    }
                }
            }
        }
        Ok(())
    }

    fn value_data(&self, id: NodeId) -> &[f64] {
        self.nodes[id].value.data()
    }
}

fn warn_pool_remainder_once(t: usize, f: usize, pt: usize, pf: usize) {
    use std::sync::Once;
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        log::warn!(
            "max_pool2d: {}x{} input not divisible by {}x{} window; trailing remainder dropped",
            t,
            f,
            pt,
            pf
        );
    });
}
