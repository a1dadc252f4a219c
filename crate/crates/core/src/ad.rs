//! Tape-based reverse-mode automatic differentiation.
//!
//! Every forward op appends a node to the [`Tape`] when at least one input is
//! on the tape. [`Tape::backward`] walks the nodes in reverse append order and
//! expresses each vector-Jacobian product with the same recorded ops, so with
//! `create_graph` the returned gradients are ordinary tape nodes and can be
//! differentiated again. That is what makes hypergradients through an
//! unrolled SGD loop possible without a separate double-backward per op.
//!
//! Values that are not on the tape (constants, detached tensors) are plain
//! [`Var`]s without a node id; ops on them only compute.
//!
//! ```
//! use distillkit::ad::Tape;
//! use distillkit::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(2.0));
//! let x2 = tape.mul(&x, &x).unwrap();
//! let x3 = tape.mul(&x2, &x).unwrap();
//! let dx = tape.backward(&x3, &[&x], true).unwrap().remove(0);
//! let ddx = tape.backward(&dx, &[&x], false).unwrap().remove(0);
//! assert_eq!(dx.value().item(), 12.0);
//! assert_eq!(ddx.value().item(), 12.0);
//! ```

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{self, numel, ConvGeom, Tensor};

/// A tensor value, optionally bound to a tape node.
#[derive(Clone, Debug)]
pub struct Var {
    value: Rc<Tensor>,
    node: Option<usize>,
}

impl Var {
    /// A value that never receives gradients.
    pub fn constant(value: Tensor) -> Var {
        Var {
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }

    pub fn node_id(&self) -> Option<usize> {
        self.node
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var {
        Var {
            value: Rc::clone(&self.value),
            node: None,
        }
    }
}

/// Views a tensor as `[outer, ch, inner]` for per-channel reductions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelView {
    pub outer: usize,
    pub ch: usize,
    pub inner: usize,
}

impl ChannelView {
    pub fn len(&self) -> usize {
        self.outer * self.ch * self.inner
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Output position `i` reads input position `src[i]`, or zero when `None`.
#[derive(Clone, Debug)]
pub struct IndexMap {
    pub src: Vec<Option<usize>>,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    MulScalar,
    Sum,
    Expand,
    MatMul,
    Transpose,
    ChannelSum(ChannelView),
    ChannelBcast(ChannelView),
    Reshape,
    Relu,
    Pow(f64),
    Softmax,
    LogSoftmax,
    RowSumBcast,
    Conv2d(ConvGeom),
    ConvInputAdj(ConvGeom),
    ConvWeightAdj(ConvGeom),
    AvgPool { planes: usize, h: usize, w: usize },
    AvgPoolAdj,
    Gather(Rc<IndexMap>),
    ScatterAdd(Rc<IndexMap>),
    Slice { offset: usize },
    PadInto { offset: usize },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<Var>,
    out: Rc<Tensor>,
}

/// Append-only operation record. Confined to one thread.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: {a:?} vs {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: Cell::new(true),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        let out = Rc::new(value);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            out: Rc::clone(&out),
        });
        Var {
            value: out,
            node: Some(nodes.len() - 1),
        }
    }

    fn record(&self, name: &'static str, op: Op, inputs: Vec<Var>, out: Tensor) -> Result<Var> {
        if !out.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let out = Rc::new(out);
        if !self.grad_enabled.get() || !inputs.iter().any(Var::requires_grad) {
            return Ok(Var {
                value: out,
                node: None,
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            inputs,
            out: Rc::clone(&out),
        });
        Ok(Var {
            value: out,
            node: Some(nodes.len() - 1),
        })
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(mismatch("add", a.shape(), b.shape()));
        }
        let out = a.value.zip_map(&b.value, |x, y| x + y);
        self.record("add", Op::Add, vec![a.clone(), b.clone()], out)
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(mismatch("sub", a.shape(), b.shape()));
        }
        let out = a.value.zip_map(&b.value, |x, y| x - y);
        self.record("sub", Op::Sub, vec![a.clone(), b.clone()], out)
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(mismatch("mul", a.shape(), b.shape()));
        }
        let out = a.value.zip_map(&b.value, |x, y| x * y);
        self.record("mul", Op::Mul, vec![a.clone(), b.clone()], out)
    }

    pub fn scale(&self, a: &Var, c: f64) -> Result<Var> {
        let out = a.value.map(|x| x * c);
        self.record("scale", Op::Scale(c), vec![a.clone()], out)
    }

    /// `x * s` for a one-element `s`.
    pub fn mul_scalar(&self, x: &Var, s: &Var) -> Result<Var> {
        if s.value.numel() != 1 {
            return Err(mismatch("mul_scalar", x.shape(), s.shape()));
        }
        let sv = s.item();
        let out = x.value.map(|v| v * sv);
        self.record("mul_scalar", Op::MulScalar, vec![x.clone(), s.clone()], out)
    }

    pub fn relu(&self, x: &Var) -> Result<Var> {
        let out = x.value.map(|v| v.max(0.0));
        self.record("relu", Op::Relu, vec![x.clone()], out)
    }

    /// Elementwise `x^p`.
    pub fn pow(&self, x: &Var, p: f64) -> Result<Var> {
        let out = x.value.map(|v| v.powf(p));
        self.record("pow", Op::Pow(p), vec![x.clone()], out)
    }

    // ── reductions and reshapes ─────────────────────────────────────

    /// Sum of all entries, as a scalar.
    pub fn sum(&self, x: &Var) -> Result<Var> {
        let out = Tensor::scalar(x.value.sum());
        self.record("sum", Op::Sum, vec![x.clone()], out)
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&self, s: &Var, shape: &[usize]) -> Result<Var> {
        if s.value.numel() != 1 {
            return Err(mismatch("expand", s.shape(), shape));
        }
        let out = Tensor::full(shape, s.item());
        self.record("expand", Op::Expand, vec![s.clone()], out)
    }

    pub fn reshape(&self, x: &Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != x.value.numel() {
            return Err(mismatch("reshape", x.shape(), shape));
        }
        let out = x.value.reshape(shape)?;
        self.record("reshape", Op::Reshape, vec![x.clone()], out)
    }

    /// Per-channel sum of `x` viewed as `[outer, ch, inner]`, giving `[ch]`.
    pub fn channel_sum(&self, x: &Var, view: ChannelView) -> Result<Var> {
        if view.len() != x.value.numel() {
            return Err(Error::Shape(format!("channel_sum: {:?} vs view {view:?}", x.shape())));
        }
        let xd = x.value.data();
        let mut out = vec![0.0; view.ch];
        for o in 0..view.outer {
            for (c, acc) in out.iter_mut().enumerate() {
                let base = (o * view.ch + c) * view.inner;
                *acc += xd[base..base + view.inner].iter().sum::<f64>();
            }
        }
        self.record(
            "channel_sum",
            Op::ChannelSum(view),
            vec![x.clone()],
            Tensor::vector(out),
        )
    }

    /// Broadcasts a `[ch]` vector over `[outer, ch, inner]`, reshaped to `shape`.
    pub fn channel_bcast(&self, v: &Var, view: ChannelView, shape: &[usize]) -> Result<Var> {
        if v.value.numel() != view.ch || numel(shape) != view.len() {
            return Err(Error::Shape(format!(
                "channel_bcast: {:?} to {shape:?} via {view:?}",
                v.shape()
            )));
        }
        let vd = v.value.data();
        let mut out = Vec::with_capacity(view.len());
        for _ in 0..view.outer {
            for &c in vd {
                out.extend(std::iter::repeat_n(c, view.inner));
            }
        }
        let out = Tensor::new(shape.to_vec(), out)?;
        self.record("channel_bcast", Op::ChannelBcast(view), vec![v.clone()], out)
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = tensor::matmul(a.value.data(), b.value.data(), m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        self.record("matmul", Op::MatMul, vec![a.clone(), b.clone()], out)
    }

    pub fn transpose(&self, a: &Var) -> Result<Var> {
        let s = a.shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose needs 2-D, got {s:?}")));
        }
        let out = Tensor::new(vec![s[1], s[0]], tensor::transpose(a.value.data(), s[0], s[1]))?;
        self.record("transpose", Op::Transpose, vec![a.clone()], out)
    }

    // ── classification heads ────────────────────────────────────────

    fn rows_cols(name: &str, x: &Var) -> Result<(usize, usize)> {
        match x.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("{name} needs [rows, cols], got {s:?}"))),
        }
    }

    pub fn softmax(&self, x: &Var) -> Result<Var> {
        let (r, c) = Self::rows_cols("softmax", x)?;
        let out = Tensor::new(vec![r, c], tensor::softmax_rows(x.value.data(), r, c))?;
        self.record("softmax", Op::Softmax, vec![x.clone()], out)
    }

    pub fn log_softmax(&self, x: &Var) -> Result<Var> {
        let (r, c) = Self::rows_cols("log_softmax", x)?;
        let out = Tensor::new(vec![r, c], tensor::log_softmax_rows(x.value.data(), r, c))?;
        self.record("log_softmax", Op::LogSoftmax, vec![x.clone()], out)
    }

    /// Replaces every entry with the sum of its row. Self-adjoint.
    pub fn row_sum_bcast(&self, x: &Var) -> Result<Var> {
        let (r, c) = Self::rows_cols("row_sum_bcast", x)?;
        let xd = x.value.data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let s: f64 = xd[i * c..(i + 1) * c].iter().sum();
            out.extend(std::iter::repeat_n(s, c));
        }
        let out = Tensor::new(vec![r, c], out)?;
        self.record("row_sum_bcast", Op::RowSumBcast, vec![x.clone()], out)
    }

    /// Mean cross-entropy of `logits: [B, C]` against integer labels.
    pub fn softmax_cross_entropy(&self, logits: &Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = Self::rows_cols("softmax_cross_entropy", logits)?;
        if labels.len() != b {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy: {b} rows, {} labels",
                labels.len()
            )));
        }
        let mut onehot = vec![0.0; b * c];
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Invalid(format!("label {y} out of range for {c} classes")));
            }
            onehot[i * c + y] = 1.0;
        }
        let onehot = Var::constant(Tensor::new(vec![b, c], onehot)?);
        let logp = self.log_softmax(logits)?;
        let picked = self.mul(&logp, &onehot)?;
        let total = self.sum(&picked)?;
        self.scale(&total, -1.0 / b as f64)
    }

    /// Squared Euclidean norm as a scalar.
    pub fn l2_norm_sq(&self, x: &Var) -> Result<Var> {
        let sq = self.mul(x, x)?;
        self.sum(&sq)
    }

    // ── convolution and pooling ─────────────────────────────────────

    /// 3x3 convolution, stride 1, zero padding 1. `x: [N,Ci,H,W]`, `w: [Co,Ci,3,3]`.
    pub fn conv2d(&self, x: &Var, w: &Var) -> Result<Var> {
        let g = match (x.shape(), w.shape()) {
            ([n, ci, h, wd], [co, wci, 3, 3]) if ci == wci => ConvGeom {
                n: *n,
                cin: *ci,
                cout: *co,
                h: *h,
                w: *wd,
            },
            (a, b) => return Err(mismatch("conv2d", a, b)),
        };
        let out = tensor::conv2d(x.value.data(), w.value.data(), g);
        let out = Tensor::new(vec![g.n, g.cout, g.h, g.w], out)?;
        self.record("conv2d", Op::Conv2d(g), vec![x.clone(), w.clone()], out)
    }

    fn conv_input_adj(&self, gy: &Var, w: &Var, g: ConvGeom) -> Result<Var> {
        let out = tensor::conv2d_input_adjoint(gy.value.data(), w.value.data(), g);
        let out = Tensor::new(vec![g.n, g.cin, g.h, g.w], out)?;
        self.record("conv2d_input_adjoint", Op::ConvInputAdj(g), vec![gy.clone(), w.clone()], out)
    }

    fn conv_weight_adj(&self, x: &Var, gy: &Var, g: ConvGeom) -> Result<Var> {
        let out = tensor::conv2d_weight_adjoint(x.value.data(), gy.value.data(), g);
        let out = Tensor::new(vec![g.cout, g.cin, 3, 3], out)?;
        self.record("conv2d_weight_adjoint", Op::ConvWeightAdj(g), vec![x.clone(), gy.clone()], out)
    }

    /// 2x2 average pooling on `[N, C, H, W]` with even `H`, `W`.
    pub fn avgpool2x2(&self, x: &Var) -> Result<Var> {
        let (n, c, h, w) = match x.shape() {
            [n, c, h, w] if h % 2 == 0 && w % 2 == 0 => (*n, *c, *h, *w),
            s => return Err(Error::Shape(format!("avgpool2x2 needs even [N,C,H,W], got {s:?}"))),
        };
        let out = tensor::avgpool2(x.value.data(), n * c, h, w);
        let out = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        self.record(
            "avgpool2x2",
            Op::AvgPool { planes: n * c, h, w },
            vec![x.clone()],
            out,
        )
    }

    fn avgpool_adj(&self, g: &Var, planes: usize, h: usize, w: usize) -> Result<Var> {
        let out = tensor::avgpool2_adjoint(g.value.data(), planes, h, w);
        let mut shape = g.shape().to_vec();
        let k = shape.len();
        shape[k - 2] = h;
        shape[k - 1] = w;
        let out = Tensor::new(shape, out)?;
        self.record("avgpool2x2_adjoint", Op::AvgPoolAdj, vec![g.clone()], out)
    }

    // ── indexing ────────────────────────────────────────────────────

    pub fn gather(&self, x: &Var, map: &Rc<IndexMap>) -> Result<Var> {
        if x.shape() != map.in_shape.as_slice() || numel(&map.out_shape) != map.src.len() {
            return Err(mismatch("gather", x.shape(), &map.in_shape));
        }
        let xd = x.value.data();
        let out: Vec<f64> = map.src.iter().map(|s| s.map_or(0.0, |j| xd[j])).collect();
        let out = Tensor::new(map.out_shape.clone(), out)?;
        self.record("gather", Op::Gather(Rc::clone(map)), vec![x.clone()], out)
    }

    /// Adjoint of [`Tape::gather`].
    pub fn scatter_add(&self, g: &Var, map: &Rc<IndexMap>) -> Result<Var> {
        if g.shape() != map.out_shape.as_slice() {
            return Err(mismatch("scatter_add", g.shape(), &map.out_shape));
        }
        let gd = g.value.data();
        let mut out = vec![0.0; numel(&map.in_shape)];
        for (i, s) in map.src.iter().enumerate() {
            if let Some(j) = s {
                out[*j] += gd[i];
            }
        }
        let out = Tensor::new(map.in_shape.clone(), out)?;
        self.record("scatter_add", Op::ScatterAdd(Rc::clone(map)), vec![g.clone()], out)
    }

    /// Rows of the leading axis, as a gather.
    pub fn select_rows(&self, x: &Var, idx: &[usize]) -> Result<Var> {
        let shape = x.shape().to_vec();
        let row = numel(&shape[1..]);
        let mut src = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            if i >= shape[0] {
                return Err(Error::Invalid(format!("row {i} out of range for {shape:?}")));
            }
            src.extend((i * row..(i + 1) * row).map(Some));
        }
        let mut out_shape = shape.clone();
        out_shape[0] = idx.len();
        let map = Rc::new(IndexMap {
            src,
            in_shape: shape,
            out_shape,
        });
        self.gather(x, &map)
    }

    /// Contiguous slice `[offset, offset + numel(shape))` of a flat vector.
    pub fn slice(&self, flat: &Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let len = numel(shape);
        let fs = flat.shape();
        if fs.len() != 1 || offset + len > fs[0] {
            return Err(Error::Shape(format!(
                "slice [{offset}, {}) of {fs:?}",
                offset + len
            )));
        }
        let out = Tensor::new(shape.to_vec(), flat.value.data()[offset..offset + len].to_vec())?;
        self.record("slice", Op::Slice { offset }, vec![flat.clone()], out)
    }

    fn pad_into(&self, g: &Var, offset: usize, total: usize) -> Result<Var> {
        let mut out = vec![0.0; total];
        out[offset..offset + g.value.numel()].copy_from_slice(g.value.data());
        self.record(
            "pad_into",
            Op::PadInto { offset },
            vec![g.clone()],
            Tensor::vector(out),
        )
    }

    // ── reverse pass ────────────────────────────────────────────────

    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    ///
    /// Targets that `loss` does not depend on get an all-zero gradient. With
    /// `create_graph` the returned gradients are recorded on this tape.
    pub fn backward(&self, loss: &Var, wrt: &[&Var], create_graph: bool) -> Result<Vec<Var>> {
        if loss.value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                loss.shape()
            )));
        }
        let zeros = |v: &Var| Var::constant(Tensor::zeros(v.shape()));
        let Some(root) = loss.node else {
            return Ok(wrt.iter().map(|v| zeros(v)).collect());
        };
        let n = root + 1;

        // Nodes lying on some path from a target to the loss.
        let mut target = vec![false; n];
        for v in wrt {
            if let Some(id) = v.node.filter(|&id| id < n) {
                target[id] = true;
            }
        }
        let mut relevant = target.clone();
        {
            let nodes = self.nodes.borrow();
            for id in 0..n {
                if !relevant[id] {
                    relevant[id] = nodes[id]
                        .inputs
                        .iter()
                        .any(|v| v.node.is_some_and(|p| relevant[p]));
                }
            }
        }

        let mut grads: Vec<Option<Var>> = vec![None; n];
        let mut found: Vec<Option<Var>> = vec![None; n];
        grads[root] = Some(Var::constant(Tensor::full(loss.shape(), 1.0)));

        let saved = self.grad_enabled.replace(create_graph);
        let walk = (|| -> Result<()> {
            for id in (0..n).rev() {
                if !relevant[id] {
                    continue;
                }
                let Some(gy) = grads[id].take() else { continue };
                if target[id] {
                    found[id] = Some(gy.clone());
                }
                let node = self.nodes.borrow()[id].clone();
                let need: Vec<bool> = node
                    .inputs
                    .iter()
                    .map(|v| v.node.is_some_and(|p| relevant[p]))
                    .collect();
                if !need.iter().any(|&b| b) {
                    continue;
                }
                let out = Var {
                    value: Rc::clone(&node.out),
                    node: Some(id),
                };
                let pulled = self.vjp(&node.op, &node.inputs, &out, &gy, &need)?;
                for ((input, g), needed) in node.inputs.iter().zip(pulled).zip(&need) {
                    if !needed {
                        continue;
                    }
                    let (Some(p), Some(g)) = (input.node, g) else { continue };
                    grads[p] = Some(match grads[p].take() {
                        Some(acc) => self.add(&acc, &g)?,
                        None => g,
                    });
                }
            }
            Ok(())
        })();
        self.grad_enabled.set(saved);
        walk?;

        Ok(wrt
            .iter()
            .map(|v| match v.node.filter(|&id| id < n) {
                Some(id) => found[id].clone().unwrap_or_else(|| zeros(v)),
                None => zeros(v),
            })
            .collect())
    }

    /// Tensor-valued convenience over [`Tape::backward`] without graph creation.
    pub fn grad(&self, loss: &Var, wrt: &[&Var]) -> Result<Vec<Tensor>> {
        Ok(self
            .backward(loss, wrt, false)?
            .into_iter()
            .map(|v| (*v.value).clone())
            .collect())
    }

    fn vjp(
        &self,
        op: &Op,
        inputs: &[Var],
        out: &Var,
        gy: &Var,
        need: &[bool],
    ) -> Result<Vec<Option<Var>>> {
        let x = |i: usize| &inputs[i];
        let when = |i: usize, f: &dyn Fn() -> Result<Var>| -> Result<Option<Var>> {
            if need[i] {
                f().map(Some)
            } else {
                Ok(None)
            }
        };
        let grads = match op {
            Op::Leaf => vec![],
            Op::Add => vec![Some(gy.clone()), Some(gy.clone())],
            Op::Sub => vec![Some(gy.clone()), when(1, &|| self.scale(gy, -1.0))?],
            Op::Mul => vec![
                when(0, &|| self.mul(gy, x(1)))?,
                when(1, &|| self.mul(gy, x(0)))?,
            ],
            Op::Scale(c) => vec![Some(self.scale(gy, *c)?)],
            Op::MulScalar => vec![
                when(0, &|| self.mul_scalar(gy, x(1)))?,
                when(1, &|| {
                    let prod = self.mul(gy, x(0))?;
                    let s = self.sum(&prod)?;
                    self.reshape(&s, x(1).shape())
                })?,
            ],
            Op::Sum => vec![Some(self.expand(gy, x(0).shape())?)],
            Op::Expand => {
                let s = self.sum(gy)?;
                vec![Some(self.reshape(&s, x(0).shape())?)]
            }
            Op::Reshape => vec![Some(self.reshape(gy, x(0).shape())?)],
            Op::ChannelSum(view) => vec![Some(self.channel_bcast(gy, *view, x(0).shape())?)],
            Op::ChannelBcast(view) => vec![Some(self.channel_sum(gy, *view)?)],
            Op::MatMul => vec![
                when(0, &|| {
                    let bt = self.transpose(x(1))?;
                    self.matmul(gy, &bt)
                })?,
                when(1, &|| {
                    let at = self.transpose(x(0))?;
                    self.matmul(&at, gy)
                })?,
            ],
            Op::Transpose => vec![Some(self.transpose(gy)?)],
            Op::Relu => {
                let mask = Var::constant(x(0).value.map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
                vec![Some(self.mul(gy, &mask)?)]
            }
            Op::Pow(p) => {
                let d = self.pow(x(0), p - 1.0)?;
                let d = self.scale(&d, *p)?;
                vec![Some(self.mul(gy, &d)?)]
            }
            Op::Softmax => {
                let t = self.mul(gy, out)?;
                let r = self.row_sum_bcast(&t)?;
                let centered = self.sub(gy, &r)?;
                vec![Some(self.mul(out, &centered)?)]
            }
            Op::LogSoftmax => {
                let s = self.softmax(x(0))?;
                let r = self.row_sum_bcast(gy)?;
                let sr = self.mul(&s, &r)?;
                vec![Some(self.sub(gy, &sr)?)]
            }
            Op::RowSumBcast => vec![Some(self.row_sum_bcast(gy)?)],
            Op::Conv2d(g) => vec![
                when(0, &|| self.conv_input_adj(gy, x(1), *g))?,
                when(1, &|| self.conv_weight_adj(x(0), gy, *g))?,
            ],
            // z = A_x(g, w):  <gz, z> = <conv(gz, w), g> = <w, A_w(gz, g)>
            Op::ConvInputAdj(g) => vec![
                when(0, &|| self.conv2d(gy, x(1)))?,
                when(1, &|| self.conv_weight_adj(gy, x(0), *g))?,
            ],
            // z = A_w(x, g):  <gz, z> = <conv(x, gz), g> = <x, A_x(g, gz)>
            Op::ConvWeightAdj(g) => vec![
                when(0, &|| self.conv_input_adj(x(1), gy, *g))?,
                when(1, &|| self.conv2d(x(0), gy))?,
            ],
            Op::AvgPool { planes, h, w } => vec![Some(self.avgpool_adj(gy, *planes, *h, *w)?)],
            Op::AvgPoolAdj => vec![Some(self.avgpool2x2(gy)?)],
            Op::Gather(map) => vec![Some(self.scatter_add(gy, map)?)],
            Op::ScatterAdd(map) => vec![Some(self.gather(gy, map)?)],
            Op::Slice { offset } => {
                let total = x(0).shape()[0];
                let flat = self.reshape(gy, &[gy.value.numel()])?;
                vec![Some(self.pad_into(&flat, *offset, total)?)]
            }
            Op::PadInto { offset } => {
                vec![Some(self.slice(gy, *offset, x(0).shape())?)]
            }
        };
        Ok(grads)
    }
}

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub pass: bool,
}

/// Relative error with the denominator floored so that components that are
/// zero on both sides compare as equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    const FLOOR: f64 = 1e-6;
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

/// Compares the tape gradient of a scalar function with central differences
/// at `coords` (all coordinates when `None`).
pub fn finite_diff_check<F>(
    f: F,
    x: &Tensor,
    eps: f64,
    tol: f64,
    coords: Option<&[usize]>,
) -> Result<FiniteDiffReport>
where
    F: Fn(&Tape, &Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Invalid("finite difference step must be positive".into()));
    }
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&tape, &xv)?;
    let analytic = tape.grad(&y, &[&xv])?.remove(0);

    let eval = |t: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.leaf(t);
        Ok(f(&tape, &v)?.item())
    };
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut report = FiniteDiffReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: coords.len(),
        pass: true,
    };
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let e = rel_err(a, numeric);
        if e >= report.max_rel_err {
            report.max_rel_err = e;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..numel(shape)).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Reduces an arbitrary tensor to a scalar with a fixed random weighting,
    /// so every output coordinate contributes a distinct amount.
    fn weighted_sum(tape: &Tape, y: &Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Var::constant(random(y.shape(), &mut rng));
        let p = tape.mul(y, &w)?;
        tape.sum(&p)
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let i = Var::constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = Var::constant(Tensor::new(vec![2, 2], vec![1.5, -2.0, 3.0, 4.0]).unwrap());
        assert_eq!(tape.matmul(&i, &m).unwrap().value(), m.value());
    }

    #[test]
    fn l2_norm_sq_of_three_four() {
        let tape = Tape::new();
        let v = Var::constant(Tensor::vector(vec![3.0, 4.0]));
        assert_eq!(tape.l2_norm_sq(&v).unwrap().item(), 25.0);
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let tape = Tape::new();
        let z = Var::constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let l = tape.softmax_cross_entropy(&z, &[0]).unwrap();
        assert!((l.item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = Var::constant(Tensor::zeros(&[2, 3]));
        let b = Var::constant(Tensor::zeros(&[3, 2]));
        let msg = tape.add(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn non_finite_output_names_op() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0]));
        let err = tape.pow(&x, -1.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "pow" }));
    }

    #[test]
    fn square_derivative() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(&x, &x).unwrap();
        assert_eq!(tape.grad(&y, &[&x]).unwrap()[0].item(), 6.0);
    }

    #[test]
    fn gradient_vanishes_at_minimum() {
        let tape = Tape::new();
        let c = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let x = tape.leaf(c.clone());
        let d = tape.sub(&x, &Var::constant(c)).unwrap();
        let y = tape.l2_norm_sq(&d).unwrap();
        assert!(tape.grad(&y, &[&x]).unwrap()[0].data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn second_derivative_of_cube() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let x2 = tape.mul(&x, &x).unwrap();
        let x3 = tape.mul(&x2, &x).unwrap();
        let dx = tape.backward(&x3, &[&x], true).unwrap().remove(0);
        assert!(dx.requires_grad());
        let ddx = tape.grad(&dx, &[&x]).unwrap();
        assert_eq!(ddx[0].item(), 12.0);
    }

    #[test]
    fn unreachable_target_gets_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let z = tape.leaf(Tensor::vector(vec![5.0]));
        let y = tape.l2_norm_sq(&x).unwrap();
        let g = tape.grad(&y, &[&z]).unwrap();
        assert_eq!(g[0].data(), &[0.0]);
    }

    #[test]
    fn constant_function_has_exactly_zero_gradient() {
        let x = Tensor::vector(vec![0.3, -0.7]);
        let r = finite_diff_check(
            |t, _| t.sum(&Var::constant(Tensor::vector(vec![1.0, 2.0]))),
            &x,
            1e-4,
            0.0,
            None,
        )
        .unwrap();
        assert!(r.pass && r.max_rel_err == 0.0);
    }

    #[test]
    fn l2_norm_sq_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(&[7], &mut rng);
        let r = finite_diff_check(|t, v| t.l2_norm_sq(v), &x, 1e-4, 1e-4, None).unwrap();
        assert!(r.pass, "{r:?}");
    }

    /// Every forward op against central differences, 10 seeded trials each.
    #[test]
    fn every_op_matches_finite_differences() {
        type OpFn = Box<dyn Fn(&Tape, &Var) -> Result<Var>>;
        let view = ChannelView { outer: 2, ch: 3, inner: 2 };
        let cases: Vec<(&str, Vec<usize>, OpFn)> = vec![
            ("add", vec![2, 3], Box::new(|t, x| t.add(x, &t.mul(x, x)?))),
            ("sub", vec![2, 3], Box::new(|t, x| t.sub(&t.scale(x, 2.0)?, &t.mul(x, x)?))),
            ("mul", vec![4], Box::new(|t, x| t.mul(x, x))),
            (
                "mul_scalar",
                vec![5],
                Box::new(|t, x| {
                    let s = t.slice(x, 0, &[])?;
                    t.mul_scalar(x, &s)
                }),
            ),
            (
                "matmul",
                vec![3, 3],
                Box::new(|t, x| {
                    let xt = t.transpose(x)?;
                    t.matmul(x, &xt)
                }),
            ),
            ("relu", vec![6], Box::new(|t, x| t.relu(x))),
            (
                "pow",
                vec![4],
                Box::new(|t, x| {
                    let sq = t.mul(x, x)?;
                    let one = Var::constant(Tensor::full(&[4], 1.0));
                    t.pow(&t.add(&sq, &one)?, -0.5)
                }),
            ),
            ("softmax", vec![2, 4], Box::new(|t, x| t.softmax(x))),
            ("log_softmax", vec![2, 4], Box::new(|t, x| t.log_softmax(x))),
            (
                "softmax_cross_entropy",
                vec![3, 4],
                Box::new(|t, x| t.softmax_cross_entropy(x, &[0, 3, 1])),
            ),
            ("l2_norm_sq", vec![5], Box::new(|t, x| t.l2_norm_sq(x))),
            (
                "channel_sum",
                vec![2, 3, 2],
                Box::new(move |t, x| {
                    let s = t.channel_sum(x, view)?;
                    let s2 = t.mul(&s, &s)?;
                    t.channel_bcast(&s2, view, &[2, 3, 2])
                }),
            ),
            (
                "conv2d",
                vec![2, 2, 4, 4],
                Box::new(|t, x| {
                    let mut rng = ChaCha8Rng::seed_from_u64(99);
                    let w = Var::constant(random(&[3, 2, 3, 3], &mut rng));
                    t.conv2d(x, &w)
                }),
            ),
            (
                "conv2d_weight",
                vec![2, 1, 3, 3],
                Box::new(|t, w| {
                    let mut rng = ChaCha8Rng::seed_from_u64(98);
                    let x = Var::constant(random(&[2, 1, 4, 4], &mut rng));
                    let y = t.conv2d(&x, w)?;
                    t.mul(&y, &y)
                }),
            ),
            (
                "avgpool2x2",
                vec![1, 2, 4, 4],
                Box::new(|t, x| {
                    let p = t.avgpool2x2(x)?;
                    t.mul(&p, &p)
                }),
            ),
            (
                "select_rows",
                vec![3, 2],
                Box::new(|t, x| {
                    let r = t.select_rows(x, &[2, 0, 2])?;
                    t.mul(&r, &r)
                }),
            ),
            (
                "slice",
                vec![6],
                Box::new(|t, x| {
                    let a = t.slice(x, 1, &[2, 2])?;
                    t.matmul(&a, &a)
                }),
            ),
        ];
        for (name, shape, f) in &cases {
            for trial in 0..10u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
                let x = random(shape, &mut rng);
                let r = finite_diff_check(|t, v| weighted_sum(t, &f(t, v)?, trial), &x, 1e-5, 1e-3, None)
                    .unwrap();
                assert!(r.pass, "{name} trial {trial}: {r:?}");
            }
        }
    }

    /// Second-order ops: differentiate a gradient norm, compare with central
    /// differences of the first-order tape gradient.
    #[test]
    fn double_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w0 = random(&[2, 1, 3, 3], &mut rng);
        let xin = random(&[2, 1, 4, 4], &mut rng);
        let f = |t: &Tape, w: &Var| -> Result<Var> {
            let x = t.leaf(xin.clone());
            let y = t.conv2d(&x, w)?;
            let y = t.relu(&y)?;
            let p = t.avgpool2x2(&y)?;
            let z = t.reshape(&p, &[2, 8])?;
            let l = t.softmax_cross_entropy(&z, &[1, 6])?;
            let g = t.backward(&l, &[&x, w], true)?;
            let a = t.l2_norm_sq(&g[0])?;
            let b = t.l2_norm_sq(&g[1])?;
            t.add(&a, &b)
        };
        let r = finite_diff_check(f, &w0, 1e-5, 1e-3, None).unwrap();
        assert!(r.pass, "{r:?}");
    }

    /// One SGD step on `L(w) = 0.5 w^T A w - b^T w` gives
    /// `w1 = w0 - eta (A w0 - b)`; for `F = 0.5 |w1 - c|^2`,
    /// `dF/deta = -(A w0 - b) . (w1 - c)` and `dF/dw0 = (I - eta A)^T (w1 - c)`.
    #[test]
    fn hypergradient_of_quadratic_step_is_closed_form() {
        let a = [[2.0, 0.5], [0.5, 1.0]];
        let b = [0.3, -0.2];
        let c = [0.1, 0.4];
        let w0v = [1.0, -1.0];
        let eta_v = 0.1;

        let tape = Tape::new();
        let w0 = tape.leaf(Tensor::vector(w0v.to_vec()));
        let eta = tape.leaf(Tensor::scalar(eta_v));
        let am = Var::constant(Tensor::new(vec![2, 2], vec![2.0, 0.5, 0.5, 1.0]).unwrap());
        let bv = Var::constant(Tensor::new(vec![2, 1], b.to_vec()).unwrap());
        let wcol = tape.reshape(&w0, &[2, 1]).unwrap();
        let aw = tape.matmul(&am, &wcol).unwrap();
        let quad = tape.matmul(&tape.transpose(&wcol).unwrap(), &aw).unwrap();
        let lin = tape.matmul(&tape.transpose(&bv).unwrap(), &wcol).unwrap();
        let loss = tape.sub(&tape.scale(&quad, 0.5).unwrap(), &lin).unwrap();
        let loss = tape.reshape(&loss, &[]).unwrap();
        let g = tape.backward(&loss, &[&w0], true).unwrap().remove(0);
        let w1 = tape.sub(&w0, &tape.mul_scalar(&g, &eta).unwrap()).unwrap();
        let d = tape.sub(&w1, &Var::constant(Tensor::vector(c.to_vec()))).unwrap();
        let outer = tape.scale(&tape.l2_norm_sq(&d).unwrap(), 0.5).unwrap();
        let grads = tape.grad(&outer, &[&eta, &w0]).unwrap();

        let grad0 = [
            a[0][0] * w0v[0] + a[0][1] * w0v[1] - b[0],
            a[1][0] * w0v[0] + a[1][1] * w0v[1] - b[1],
        ];
        let w1v = [w0v[0] - eta_v * grad0[0], w0v[1] - eta_v * grad0[1]];
        let r = [w1v[0] - c[0], w1v[1] - c[1]];
        let deta = -(grad0[0] * r[0] + grad0[1] * r[1]);
        let dw0 = [
            r[0] - eta_v * (a[0][0] * r[0] + a[1][0] * r[1]),
            r[1] - eta_v * (a[0][1] * r[0] + a[1][1] * r[1]),
        ];
        assert!((grads[0].item() - deta).abs() < 1e-6);
        assert!((grads[1].data()[0] - dw0[0]).abs() < 1e-6);
        assert!((grads[1].data()[1] - dw0[1]).abs() < 1e-6);
    }

    #[test]
    fn identical_inputs_give_bit_identical_gradients() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let x = random(&[3, 4], &mut rng);
            let tape = Tape::new();
            let v = tape.leaf(x);
            let s = tape.softmax(&v).unwrap();
            let l = weighted_sum(&tape, &s, 3).unwrap();
            tape.grad(&l, &[&v]).unwrap().remove(0)
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
