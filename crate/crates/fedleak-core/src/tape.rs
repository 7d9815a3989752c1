//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Values are computed eagerly as nodes are appended. `backward` walks the
//! tape in strict reverse insertion order (which is a reverse topological
//! order by construction) and *records the adjoint computations as new tape
//! nodes*. Because every adjoint is itself built from the same primitive set,
//! a second `backward` over the extended tape differentiates through the
//! first one; that is how gradient-matching objectives obtain exact
//! second-order gradients without a separate Hessian path.
//!
//! Piecewise-constant factors (`ReluMask`, `ClampMask`, `RowMax`) carry no
//! adjoint. For `RowMax` this is exact, not an approximation: the log-sum-exp
//! built around it equals `m + log Σ exp(z − m)` for any constant `m`, so its
//! derivative of every order is independent of the subtracted max.

use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Static geometry of a 2-d convolution; all ops that lower conv to matmul
/// share this so the gather (`Im2col`) and scatter-add (`Col2im`) agree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }
}

// Some fields are only written: values are computed eagerly, so shape and
// mask arguments matter at construction but never again. They stay in the
// variant so Debug shows each node's full provenance.
#[allow(dead_code)]
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Relu(NodeId),
    ReluMask(NodeId),
    Clamp(NodeId, f64, f64),
    ClampMask(NodeId, f64, f64),
    RowMax(NodeId),
    SumAll(NodeId),
    BroadcastAll(NodeId, Vec<usize>),
    SumRows(NodeId),
    BroadcastRows(NodeId, usize),
    SumCols(NodeId),
    BroadcastCols(NodeId, usize),
    SelectLabels(NodeId, Vec<usize>),
    ScatterLabels(NodeId, Vec<usize>, usize),
    Im2col(NodeId, ConvGeom),
    Col2im(NodeId, ConvGeom),
    BatchToFront(NodeId, usize, usize, usize),
    BatchFromFront(NodeId, usize, usize, usize),
    Reshape(NodeId, Vec<usize>),
    DiffH(NodeId),
    DiffHAdj(NodeId),
    DiffV(NodeId),
    DiffVAdj(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    // ── node constructors (eager) ──

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = tensor::ew2(self.value(a), self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = tensor::ew2(self.value(a), self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = tensor::ew2(self.value(a), self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = tensor::ew2(self.value(a), self.value(b), |x, y| x / y);
        self.push(Op::Div(a, b), v)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| -x);
        self.push(Op::Neg(a), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| c * x);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a, c), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = tensor::matmul(self.value(a), self.value(b));
        self.push(Op::Matmul(a, b), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = tensor::transpose2(self.value(a));
        self.push(Op::Transpose(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), v)
    }

    fn relu_mask(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.push(Op::ReluMask(a), v)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), v)
    }

    fn clamp_mask(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).map(|x| if x > lo && x < hi { 1.0 } else { 0.0 });
        self.push(Op::ClampMask(a, lo, hi), v)
    }

    /// Per-row maximum of a [m, n] tensor; constant with respect to
    /// differentiation (see module docs).
    pub fn row_max(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 2, "row_max wants 2-d");
        let (m, n) = (t.shape()[0], t.shape()[1]);
        assert!(n > 0, "row_max on empty rows");
        let mut out = vec![f64::NEG_INFINITY; m];
        for i in 0..m {
            for j in 0..n {
                out[i] = out[i].max(t.data()[i * n + j]);
            }
        }
        let v = Tensor::from_parts(vec![m], out);
        self.push(Op::RowMax(a), v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    pub fn broadcast_all(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let s = self.value(a).item();
        let v = Tensor::full(shape.clone(), s);
        self.push(Op::BroadcastAll(a, shape), v)
    }

    /// [m, n] -> [n], summing over rows (axis 0).
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 2, "sum_rows wants 2-d");
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += t.data()[i * n + j];
            }
        }
        self.push(Op::SumRows(a), Tensor::from_parts(vec![n], out))
    }

    /// [n] -> [m, n], repeating the vector as every row.
    pub fn broadcast_rows(&mut self, a: NodeId, m: usize) -> NodeId {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 1, "broadcast_rows wants 1-d");
        let n = t.shape()[0];
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(t.data());
        }
        self.push(Op::BroadcastRows(a, m), Tensor::from_parts(vec![m, n], out))
    }

    /// [m, n] -> [m], summing over columns (axis 1).
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 2, "sum_cols wants 2-d");
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; m];
        for i in 0..m {
            for j in 0..n {
                out[i] += t.data()[i * n + j];
            }
        }
        self.push(Op::SumCols(a), Tensor::from_parts(vec![m], out))
    }

    /// [m] -> [m, n]; row i is constant a[i].
    pub fn broadcast_cols(&mut self, a: NodeId, n: usize) -> NodeId {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 1, "broadcast_cols wants 1-d");
        let m = t.shape()[0];
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for _ in 0..n {
                out.push(t.data()[i]);
            }
        }
        self.push(Op::BroadcastCols(a, n), Tensor::from_parts(vec![m, n], out))
    }

    /// [m, classes] -> [m]: out[i] = a[i, labels[i]].
    pub fn select_labels(&mut self, a: NodeId, labels: Vec<usize>) -> NodeId {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 2, "select_labels wants 2-d");
        let (m, n) = (t.shape()[0], t.shape()[1]);
        assert_eq!(labels.len(), m, "one label per row");
        let mut out = Vec::with_capacity(m);
        for (i, &y) in labels.iter().enumerate() {
            assert!(y < n, "label {} out of range {}", y, n);
            out.push(t.data()[i * n + y]);
        }
        self.push(Op::SelectLabels(a, labels), Tensor::from_parts(vec![m], out))
    }

    /// [m] -> [m, classes]: zeros except out[i, labels[i]] = a[i].
    pub fn scatter_labels(&mut self, a: NodeId, labels: Vec<usize>, classes: usize) -> NodeId {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 1, "scatter_labels wants 1-d");
        let m = t.shape()[0];
        assert_eq!(labels.len(), m);
        let mut out = vec![0.0; m * classes];
        for (i, &y) in labels.iter().enumerate() {
            out[i * classes + y] = t.data()[i];
        }
        self.push(Op::ScatterLabels(a, labels, classes), Tensor::from_parts(vec![m, classes], out))
    }

    /// [n, c, h, w] -> [c*k*k, n*ho*wo] patch matrix. Out-of-bounds taps read
    /// zero (zero padding).
    pub fn im2col(&mut self, a: NodeId, g: ConvGeom) -> NodeId {
        let v = im2col_val(self.value(a), g);
        self.push(Op::Im2col(a, g), v)
    }

    /// Adjoint of `im2col`: scatter-adds patches back into image layout.
    pub fn col2im(&mut self, a: NodeId, g: ConvGeom) -> NodeId {
        let v = col2im_val(self.value(a), g);
        self.push(Op::Col2im(a, g), v)
    }

    /// [o, n*s] -> [n, o*s] channel-major to batch-major reorder.
    pub fn batch_to_front(&mut self, a: NodeId, o: usize, n: usize, s: usize) -> NodeId {
        let t = self.value(a);
        assert_eq!(t.shape(), &[o, n * s], "batch_to_front shape");
        let mut out = vec![0.0; o * n * s];
        for oi in 0..o {
            for ni in 0..n {
                let src = (oi * n + ni) * s;
                let dst = (ni * o + oi) * s;
                out[dst..dst + s].copy_from_slice(&t.data()[src..src + s]);
            }
        }
        self.push(Op::BatchToFront(a, o, n, s), Tensor::from_parts(vec![n, o * s], out))
    }

    /// Inverse reorder of `batch_to_front`.
    pub fn batch_from_front(&mut self, a: NodeId, o: usize, n: usize, s: usize) -> NodeId {
        let t = self.value(a);
        assert_eq!(t.shape(), &[n, o * s], "batch_from_front shape");
        let mut out = vec![0.0; o * n * s];
        for ni in 0..n {
            for oi in 0..o {
                let src = (ni * o + oi) * s;
                let dst = (oi * n + ni) * s;
                out[dst..dst + s].copy_from_slice(&t.data()[src..src + s]);
            }
        }
        self.push(Op::BatchFromFront(a, o, n, s), Tensor::from_parts(vec![o, n * s], out))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let v = self
            .value(a)
            .reshaped(shape.clone())
            .expect("reshape with incompatible element count");
        self.push(Op::Reshape(a, shape), v)
    }

    /// Horizontal neighbor differences over the last axis: [..., h, w] ->
    /// [..., h, w-1].
    pub fn diff_h(&mut self, a: NodeId) -> NodeId {
        let v = diff_h_val(self.value(a));
        self.push(Op::DiffH(a), v)
    }

    fn diff_h_adj(&mut self, a: NodeId) -> NodeId {
        let v = diff_h_adj_val(self.value(a));
        self.push(Op::DiffHAdj(a), v)
    }

    /// Vertical neighbor differences over the second-to-last axis.
    pub fn diff_v(&mut self, a: NodeId) -> NodeId {
        let v = diff_v_val(self.value(a));
        self.push(Op::DiffV(a), v)
    }

    fn diff_v_adj(&mut self, a: NodeId) -> NodeId {
        let v = diff_v_adj_val(self.value(a));
        self.push(Op::DiffVAdj(a), v)
    }

    // ── composites ──

    /// clamp(x, -1, 1), the two-sided saturating activation.
    pub fn hardtanh(&mut self, a: NodeId) -> NodeId {
        self.clamp(a, -1.0, 1.0)
    }

    /// Mean softmax cross-entropy of [n, classes] logits against labels.
    /// Max-shifted for overflow safety; exact for gradients of every order.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let shape = self.value(logits).shape().to_vec();
        assert_eq!(shape.len(), 2, "cross_entropy wants [n, classes] logits");
        let (n, classes) = (shape[0], shape[1]);
        assert_eq!(labels.len(), n, "one label per logit row");
        let m = self.row_max(logits);
        let mb = self.broadcast_cols(m, classes);
        let shifted = self.sub(logits, mb);
        let e = self.exp(shifted);
        let se = self.sum_cols(e);
        let lse_rel = self.log(se);
        let lse = self.add(lse_rel, m);
        let zy = self.select_labels(logits, labels.to_vec());
        let li = self.sub(lse, zy);
        let total = self.sum_all(li);
        self.scale(total, 1.0 / n as f64)
    }

    // ── reverse pass ──

    /// Backpropagate from scalar `out`, appending adjoint nodes to the tape.
    /// Returns the adjoint node of each requested id (`None` when `out` does
    /// not depend on it). Calling this twice nests: the second pass
    /// differentiates through the adjoints of the first.
    pub fn backward(&mut self, out: NodeId, wrt: &[NodeId]) -> Vec<Option<NodeId>> {
        assert_eq!(self.value(out).numel(), 1, "backward from non-scalar");
        let mut adj: Vec<Option<NodeId>> = vec![None; out.0 + 1];
        let seed_shape = self.value(out).shape().to_vec();
        let seed = self.leaf(Tensor::full(seed_shape, 1.0));
        adj[out.0] = Some(seed);

        for id in (0..=out.0).rev() {
            let g = match adj[id] {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[id].op.clone();
            let mut contrib: Vec<(NodeId, NodeId)> = Vec::new();
            match op {
                Op::Leaf | Op::ReluMask(_) | Op::ClampMask(_, _, _) | Op::RowMax(_) => {}
                Op::Add(a, b) => {
                    contrib.push((a, g));
                    contrib.push((b, g));
                }
                Op::Sub(a, b) => {
                    contrib.push((a, g));
                    let nb = self.neg(g);
                    contrib.push((b, nb));
                }
                Op::Mul(a, b) => {
                    let da = self.mul(g, b);
                    let db = self.mul(g, a);
                    contrib.push((a, da));
                    contrib.push((b, db));
                }
                Op::Div(a, b) => {
                    // d(a/b) = g/b for a, -g*(a/b)/b for b.
                    let da = self.div(g, b);
                    let y = NodeId(id);
                    let gy = self.mul(g, y);
                    let gyb = self.div(gy, b);
                    let db = self.neg(gyb);
                    contrib.push((a, da));
                    contrib.push((b, db));
                }
                Op::Neg(a) => {
                    let da = self.neg(g);
                    contrib.push((a, da));
                }
                Op::Scale(a, c) => {
                    let da = self.scale(g, c);
                    contrib.push((a, da));
                }
                Op::AddScalar(a, _) => contrib.push((a, g)),
                Op::Matmul(a, b) => {
                    let bt = self.transpose(b);
                    let da = self.matmul(g, bt);
                    let at = self.transpose(a);
                    let db = self.matmul(at, g);
                    contrib.push((a, da));
                    contrib.push((b, db));
                }
                Op::Transpose(a) => {
                    let da = self.transpose(g);
                    contrib.push((a, da));
                }
                Op::Exp(a) => {
                    let y = NodeId(id);
                    let da = self.mul(g, y);
                    contrib.push((a, da));
                }
                Op::Log(a) => {
                    let da = self.div(g, a);
                    contrib.push((a, da));
                }
                Op::Sqrt(a) => {
                    let y = NodeId(id);
                    let gy = self.div(g, y);
                    let da = self.scale(gy, 0.5);
                    contrib.push((a, da));
                }
                Op::Relu(a) => {
                    let m = self.relu_mask(a);
                    let da = self.mul(g, m);
                    contrib.push((a, da));
                }
                Op::Clamp(a, lo, hi) => {
                    let m = self.clamp_mask(a, lo, hi);
                    let da = self.mul(g, m);
                    contrib.push((a, da));
                }
                Op::SumAll(a) => {
                    let shape = self.value(a).shape().to_vec();
                    let da = self.broadcast_all(g, shape);
                    contrib.push((a, da));
                }
                Op::BroadcastAll(a, _) => {
                    let da = self.sum_all(g);
                    contrib.push((a, da));
                }
                Op::SumRows(a) => {
                    let m = self.value(a).shape()[0];
                    let da = self.broadcast_rows(g, m);
                    contrib.push((a, da));
                }
                Op::BroadcastRows(a, _) => {
                    let da = self.sum_rows(g);
                    contrib.push((a, da));
                }
                Op::SumCols(a) => {
                    let n = self.value(a).shape()[1];
                    let da = self.broadcast_cols(g, n);
                    contrib.push((a, da));
                }
                Op::BroadcastCols(a, _) => {
                    let da = self.sum_cols(g);
                    contrib.push((a, da));
                }
                Op::SelectLabels(a, labels) => {
                    let classes = self.value(a).shape()[1];
                    let da = self.scatter_labels(g, labels, classes);
                    contrib.push((a, da));
                }
                Op::ScatterLabels(a, labels, _) => {
                    let da = self.select_labels(g, labels);
                    contrib.push((a, da));
                }
                Op::Im2col(a, geom) => {
                    let da = self.col2im(g, geom);
                    contrib.push((a, da));
                }
                Op::Col2im(a, geom) => {
                    let da = self.im2col(g, geom);
                    contrib.push((a, da));
                }
                Op::BatchToFront(a, o, n, s) => {
                    let da = self.batch_from_front(g, o, n, s);
                    contrib.push((a, da));
                }
                Op::BatchFromFront(a, o, n, s) => {
                    let da = self.batch_to_front(g, o, n, s);
                    contrib.push((a, da));
                }
                Op::Reshape(a, _) => {
                    let orig = self.value(a).shape().to_vec();
                    let da = self.reshape(g, orig);
                    contrib.push((a, da));
                }
                Op::DiffH(a) => {
                    let da = self.diff_h_adj(g);
                    contrib.push((a, da));
                }
                Op::DiffHAdj(a) => {
                    let da = self.diff_h(g);
                    contrib.push((a, da));
                }
                Op::DiffV(a) => {
                    let da = self.diff_v_adj(g);
                    contrib.push((a, da));
                }
                Op::DiffVAdj(a) => {
                    let da = self.diff_v(g);
                    contrib.push((a, da));
                }
            }
            for (input, c) in contrib {
                adj[input.0] = Some(match adj[input.0] {
                    None => c,
                    Some(prev) => self.add(prev, c),
                });
            }
        }

        wrt.iter().map(|w| if w.0 <= out.0 { adj[w.0] } else { None }).collect()
    }

    /// Adjoint value of `wrt` as a tensor, zero-filled when independent.
    pub fn grad_of(&self, adj: Option<NodeId>, wrt: NodeId) -> Tensor {
        match adj {
            Some(id) => self.value(id).clone(),
            None => Tensor::zeros(self.value(wrt).shape().to_vec()),
        }
    }
}

// ── kernels for the structured ops ──

fn im2col_val(x: &Tensor, g: ConvGeom) -> Tensor {
    assert_eq!(x.shape(), &[g.n, g.c, g.h, g.w], "im2col input shape");
    let (ho, wo) = (g.out_h(), g.out_w());
    let rows = g.c * g.k * g.k;
    let cols = g.n * ho * wo;
    let mut out = vec![0.0; rows * cols];
    let xd = x.data();
    for n in 0..g.n {
        for c in 0..g.c {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = (c * g.k + ky) * g.k + kx;
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let col = (n * ho + oy) * wo + ox;
                            out[row * cols + col] =
                                xd[((n * g.c + c) * g.h + iy as usize) * g.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![rows, cols], out)
}

fn col2im_val(cols_t: &Tensor, g: ConvGeom) -> Tensor {
    let (ho, wo) = (g.out_h(), g.out_w());
    let rows = g.c * g.k * g.k;
    let cols = g.n * ho * wo;
    assert_eq!(cols_t.shape(), &[rows, cols], "col2im input shape");
    let mut out = vec![0.0; g.n * g.c * g.h * g.w];
    let cd = cols_t.data();
    for n in 0..g.n {
        for c in 0..g.c {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = (c * g.k + ky) * g.k + kx;
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let col = (n * ho + oy) * wo + ox;
                            out[((n * g.c + c) * g.h + iy as usize) * g.w + ix as usize] +=
                                cd[row * cols + col];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![g.n, g.c, g.h, g.w], out)
}

fn split_spatial(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "spatial op wants at least 2 dims, got {:?}", shape);
    let w = shape[shape.len() - 1];
    let h = shape[shape.len() - 2];
    let b: usize = shape[..shape.len() - 2].iter().product();
    (b, h, w)
}

fn diff_h_val(x: &Tensor) -> Tensor {
    let (b, h, w) = split_spatial(x.shape());
    assert!(w >= 2, "diff_h wants width >= 2");
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = w - 1;
    let mut out = vec![0.0; b * h * (w - 1)];
    let xd = x.data();
    for bi in 0..b {
        for i in 0..h {
            let r = (bi * h + i) * w;
            let o = (bi * h + i) * (w - 1);
            for j in 0..w - 1 {
                out[o + j] = xd[r + j + 1] - xd[r + j];
            }
        }
    }
    Tensor::from_parts(shape, out)
}

fn diff_h_adj_val(d: &Tensor) -> Tensor {
    let (b, h, wm1) = split_spatial(d.shape());
    let w = wm1 + 1;
    let mut shape = d.shape().to_vec();
    *shape.last_mut().unwrap() = w;
    let mut out = vec![0.0; b * h * w];
    let dd = d.data();
    for bi in 0..b {
        for i in 0..h {
            let r = (bi * h + i) * w;
            let o = (bi * h + i) * wm1;
            for j in 0..wm1 {
                out[r + j + 1] += dd[o + j];
                out[r + j] -= dd[o + j];
            }
        }
    }
    Tensor::from_parts(shape, out)
}

fn diff_v_val(x: &Tensor) -> Tensor {
    let (b, h, w) = split_spatial(x.shape());
    assert!(h >= 2, "diff_v wants height >= 2");
    let mut shape = x.shape().to_vec();
    let hpos = shape.len() - 2;
    shape[hpos] = h - 1;
    let mut out = vec![0.0; b * (h - 1) * w];
    let xd = x.data();
    for bi in 0..b {
        for i in 0..h - 1 {
            for j in 0..w {
                out[(bi * (h - 1) + i) * w + j] =
                    xd[(bi * h + i + 1) * w + j] - xd[(bi * h + i) * w + j];
            }
        }
    }
    Tensor::from_parts(shape, out)
}

fn diff_v_adj_val(d: &Tensor) -> Tensor {
    let (b, hm1, w) = split_spatial(d.shape());
    let h = hm1 + 1;
    let mut shape = d.shape().to_vec();
    let hpos = shape.len() - 2;
    shape[hpos] = h;
    let mut out = vec![0.0; b * h * w];
    let dd = d.data();
    for bi in 0..b {
        for i in 0..hm1 {
            for j in 0..w {
                let v = dd[(bi * hm1 + i) * w + j];
                out[(bi * h + i + 1) * w + j] += v;
                out[(bi * h + i) * w + j] -= v;
            }
        }
    }
    Tensor::from_parts(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tape_records_one_node_per_primitive() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::full(vec![2, 2], 1.0));
        let b = t.leaf(Tensor::full(vec![2, 2], 2.0));
        let c = t.add(a, b);
        let _d = t.sum_all(c);
        assert_eq!(t.len(), 4);
    }

    #[test]
    fn backward_of_sum_of_product() {
        // f = sum(a * b); df/da = b, df/db = a.
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![3], vec![1., 2., 3.]).unwrap());
        let b = t.leaf(Tensor::new(vec![3], vec![4., 5., 6.]).unwrap());
        let p = t.mul(a, b);
        let s = t.sum_all(p);
        let grads = t.backward(s, &[a, b]);
        assert_eq!(t.value(grads[0].unwrap()).data(), &[4., 5., 6.]);
        assert_eq!(t.value(grads[1].unwrap()).data(), &[1., 2., 3.]);
    }

    #[test]
    fn backward_through_matmul() {
        // f = sum(A B): dA = ones @ B^T, dB = A^T @ ones.
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap());
        let b = t.leaf(Tensor::new(vec![2, 2], vec![5., 6., 7., 8.]).unwrap());
        let c = t.matmul(a, b);
        let s = t.sum_all(c);
        let grads = t.backward(s, &[a, b]);
        assert_eq!(t.value(grads[0].unwrap()).data(), &[11., 15., 11., 15.]);
        assert_eq!(t.value(grads[1].unwrap()).data(), &[4., 4., 6., 6.]);
    }

    #[test]
    fn second_backward_differentiates_first() {
        // f = sum(x^3) via x*x*x; g = df/dx = 3x^2; h = d(sum g)/dx = 6x.
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2], vec![2.0, -1.5]).unwrap());
        let x2 = t.mul(x, x);
        let x3 = t.mul(x2, x);
        let f = t.sum_all(x3);
        let g = t.backward(f, &[x])[0].unwrap();
        let gv = t.value(g).data().to_vec();
        assert!((gv[0] - 12.0).abs() < 1e-12);
        assert!((gv[1] - 6.75).abs() < 1e-12);
        let gs = t.sum_all(g);
        let h = t.backward(gs, &[x])[0].unwrap();
        let hv = t.value(h).data().to_vec();
        assert!((hv[0] - 12.0).abs() < 1e-12);
        assert!((hv[1] + 9.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_c() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::zeros(vec![4, 10]));
        let l = t.cross_entropy(z, &[0, 3, 5, 9]);
        assert!((t.value(l).item() - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random-ish fills.
        let g = ConvGeom { n: 2, c: 3, h: 5, w: 4, k: 3, stride: 2, pad: 1 };
        let nx = g.n * g.c * g.h * g.w;
        let x = Tensor::from_parts(
            vec![g.n, g.c, g.h, g.w],
            (0..nx).map(|i| ((i * 37 + 11) % 17) as f64 * 0.1 - 0.6).collect(),
        );
        let xc = im2col_val(&x, g);
        let ny = xc.numel();
        let y = Tensor::from_parts(
            xc.shape().to_vec(),
            (0..ny).map(|i| ((i * 53 + 3) % 23) as f64 * 0.07 - 0.5).collect(),
        );
        let yi = col2im_val(&y, g);
        let lhs: f64 = xc.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(yi.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{} vs {}", lhs, rhs);
    }

    #[test]
    fn diff_ops_are_adjoint_pairs() {
        let x = Tensor::from_parts(vec![3, 4], (0..12).map(|i| (i as f64).sin()).collect());
        let dh = diff_h_val(&x);
        let y = Tensor::from_parts(dh.shape().to_vec(), (0..dh.numel()).map(|i| i as f64 * 0.3 - 1.0).collect());
        let ya = diff_h_adj_val(&y);
        let lhs: f64 = dh.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ya.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn batch_reorder_roundtrips() {
        let (o, n, s) = (3, 2, 4);
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_parts(vec![o, n * s], (0..o * n * s).map(|i| i as f64).collect()));
        let f = t.batch_to_front(x, o, n, s);
        let b = t.batch_from_front(f, o, n, s);
        assert_eq!(t.value(b).data(), t.value(x).data());
    }
}
