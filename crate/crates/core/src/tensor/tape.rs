//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every forward op appends a node holding its output value. Nodes whose
//! inputs all lack `requires_grad` are stored as constants and never visited
//! by [`Tape::backward`].

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::value::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, k: f64 },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Relu { a: Var },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Softmax { a: Var, axis: usize },
    SumAll { a: Var },
    SumAxis { a: Var, axis: usize },
    Dropout { a: Var, mask: Vec<f64> },
    MaxPool { a: Var, argmax: Vec<usize> },
    NearestDown { a: Var, src: Vec<usize> },
    Reshape { a: Var },
    Broadcast { a: Var },
    SwapAxes { a: Var, d0: usize, d1: usize },
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of forward operations. Inputs always precede outputs, so a
/// reverse sweep over the node list is a valid topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    recorded: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(Error::AxisOutOfRange { op, axis, rank })
    } else {
        Ok(())
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

    /// Number of differentiable operations recorded so far.
    pub fn recorded_ops(&self) -> usize {
        self.recorded
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad {
            self.recorded += 1;
            op
        } else {
            Op::Leaf
        };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Smallest absolute ReLU pre-activation on the tape. Finite-difference
    /// checks are only meaningful when this is well above the step size.
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { a } => Some(
                    self.nodes[a.0]
                        .value
                        .data()
                        .iter()
                        .fold(f64::INFINITY, |m, x| m.min(x.abs())),
                ),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    // ---- forward ops -------------------------------------------------

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, &[a, b], Op::MatMul { a, b }))
    }

    /// `[B, M, K] x [B, K, N] -> [B, M, N]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(mismatch("batch_matmul", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            kernels::gemm(
                m,
                k,
                n,
                1.0,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                false,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor::new(vec![bs, m, n], out)?;
        Ok(self.push(value, &[a, b], Op::BatchMatMul { a, b }))
    }

    /// Square-kernel convolution with zero padding.
    ///
    /// `input: [B, Cin, H, W]`, `weight: [Cout, Cin, k, k]`, `bias: [Cout]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] || sw[2] != sw[3] {
            return Err(mismatch("conv2d", &si, &sw));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be >= 1"));
        }
        if si[2] + 2 * pad < sw[2] || si[3] + 2 * pad < sw[3] {
            return Err(mismatch("conv2d", &si, &sw));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(mismatch("conv2d bias", self.shape(b), &sw[..1]));
            }
        }
        let geom = ConvGeom {
            in_channels: si[1],
            height: si[2],
            width: si[3],
            kernel: sw[2],
            stride,
            pad,
        };
        let (bs, cout) = (si[0], sw[0]);
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let keep_cols = self.requires_grad(input) || self.requires_grad(weight);
        let mut all_cols = if keep_cols {
            vec![0.0; bs * rows * p]
        } else {
            Vec::new()
        };
        let mut scratch = if keep_cols { Vec::new() } else { vec![0.0; rows * p] };
        let mut out = vec![0.0; bs * cout * p];
        let img_len = si[1] * si[2] * si[3];
        {
            let x = self.value(input).data();
            let w = self.value(weight).data();
            for b in 0..bs {
                let cols = if keep_cols {
                    &mut all_cols[b * rows * p..(b + 1) * rows * p]
                } else {
                    &mut scratch[..]
                };
                kernels::im2col(&x[b * img_len..(b + 1) * img_len], &geom, cols);
                kernels::gemm(
                    cout,
                    rows,
                    p,
                    1.0,
                    w,
                    false,
                    cols,
                    false,
                    0.0,
                    &mut out[b * cout * p..(b + 1) * cout * p],
                );
            }
            if let Some(bv) = bias {
                let bd = self.value(bv).data();
                for b in 0..bs {
                    for c in 0..cout {
                        let off = (b * cout + c) * p;
                        out[off..off + p].iter_mut().for_each(|v| *v += bd[c]);
                    }
                }
            }
        }
        let value = Tensor::new(vec![bs, cout, geom.out_height(), geom.out_width()], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            &inputs,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols: all_cols,
            },
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, &[a, b], Op::Add { a, b }))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x * k);
        self.push(value, &[a], Op::Scale { a, k })
    }

    /// Adds a bias vector over the trailing axis: `[.., N] + [N]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(bias).to_vec();
        if sb.len() != 1 || sa.last() != Some(&sb[0]) {
            return Err(mismatch("add_bias", &sa, &sb));
        }
        let mut lifted = vec![1; sa.len()];
        *lifted.last_mut().unwrap() = sb[0];
        let b = self.reshape(bias, lifted)?;
        let b = self.broadcast_to(b, sa)?;
        self.add(a, b)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", axis, base.len())?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for &v in inputs {
            let len = self.shape(v)[axis];
            let src = self.value(v).data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                data[dst..dst + len * inner]
                    .copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            offset += len;
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        check_axis("slice", axis, sa.len())?;
        if len == 0 || start + len > sa[axis] {
            return Err(Error::invalid(format!(
                "slice: range {start}..{} outside extent {} of axis {axis}",
                start + len,
                sa[axis]
            )));
        }
        let (outer, full, inner) = kernels::split_axis(&sa, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            data.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, &[a], Op::Slice { a, axis, start }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(value, &[a], Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::sigmoid);
        self.push(value, &[a], Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, &[a], Op::Tanh { a })
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        check_axis("softmax", axis, sa.len())?;
        let (outer, len, inner) = kernels::split_axis(&sa, axis);
        let mut out = vec![0.0; outer * len * inner];
        kernels::softmax_axis(self.value(a).data(), outer, len, inner, &mut out);
        let value = Tensor::new(sa, out)?;
        Ok(self.push(value, &[a], Op::Softmax { a, axis }))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, &[a], Op::SumAll { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        check_axis("sum_axis", axis, sa.len())?;
        let (outer, len, inner) = kernels::split_axis(&sa, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        let mut shape = sa;
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, &[a], Op::SumAxis { a, axis }))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        check_axis("mean_axis", axis, sa.len())?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / sa[axis] as f64))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1 / (1 - p)`. Identity in
    /// evaluation mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(a).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let x = self.value(a);
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, &[a], Op::Dropout { a, mask }))
    }

    /// Non-overlapping `k x k` max pooling over the two trailing axes.
    /// Ties resolve to the first maximum in row-major order.
    pub fn max_pool(&mut self, a: Var, k: usize) -> Result<Var> {
        let (shape, planes, h, w) = self.pool_dims("max_pool", a, k)?;
        let (ho, wo) = (h / k, w / k);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * k + dy) * w + ox * k + dx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, &[a], Op::MaxPool { a, argmax }))
    }

    /// Nearest-neighbour downsampling by `k` over the two trailing axes
    /// (keeps the top-left element of each block).
    pub fn nearest_down(&mut self, a: Var, k: usize) -> Result<Var> {
        let (shape, planes, h, w) = self.pool_dims("nearest_down", a, k)?;
        let (ho, wo) = (h / k, w / k);
        let src_data = self.value(a).data();
        let mut src = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            for oy in 0..ho {
                for ox in 0..wo {
                    src.push(p * h * w + oy * k * w + ox * k);
                }
            }
        }
        let out = src.iter().map(|&i| src_data[i]).collect();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, &[a], Op::NearestDown { a, src }))
    }

    fn pool_dims(
        &self,
        op: &'static str,
        a: Var,
        k: usize,
    ) -> Result<(Vec<usize>, usize, usize, usize)> {
        let sa = self.shape(a);
        if sa.len() < 2 || k == 0 {
            return Err(Error::invalid(format!("{op}: need rank >= 2 and k >= 1")));
        }
        let (h, w) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        if h % k != 0 || w % k != 0 {
            return Err(Error::invalid(format!(
                "{op}: spatial size {h}x{w} not divisible by {k}"
            )));
        }
        let planes = sa[..sa.len() - 2].iter().product();
        let mut shape = sa.to_vec();
        let r = shape.len();
        shape[r - 2] = h / k;
        shape[r - 1] = w / k;
        Ok((shape, planes, h, w))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, &[a], Op::Reshape { a }))
    }

    /// Repeats extent-1 axes of `a` to reach `shape` (ranks must agree).
    pub fn broadcast_to(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let sa = self.shape(a).to_vec();
        let ok = sa.len() == shape.len()
            && sa.iter().zip(&shape).all(|(&x, &y)| x == y || x == 1);
        if !ok {
            return Err(mismatch("broadcast_to", &sa, &shape));
        }
        let data = kernels::broadcast(self.value(a).data(), &sa, &shape);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, &[a], Op::Broadcast { a }))
    }

    /// Swaps two axes (a generalized transpose).
    pub fn swap_axes(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        check_axis("swap_axes", d0.max(d1), sa.len())?;
        let mut data = vec![0.0; self.value(a).numel()];
        kernels::swap_axes(self.value(a).data(), &sa, d0, d1, &mut data);
        let mut shape = sa;
        shape.swap(d0, d1);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, &[a], Op::SwapAxes { a, d0, d1 }))
    }

    /// Row lookup: `table: [V, E]`, `ids` of length N gives `[N, E]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(mismatch("gather_rows", &st, &[ids.len()]));
        }
        if ids.is_empty() {
            return Err(Error::invalid("gather_rows: empty id list"));
        }
        let (v, e) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!(
                "gather_rows: id {bad} out of range for {v} rows"
            )));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            data.extend_from_slice(&src[i * e..(i + 1) * e]);
        }
        let value = Tensor::new(vec![ids.len(), e], data)?;
        Ok(self.push(
            value,
            &[table],
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean softmax cross-entropy of `logits: [B, A]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(mismatch("cross_entropy", &sl, &[targets.len()]));
        }
        let (b, a) = (sl[0], sl[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= a) {
            return Err(Error::invalid(format!(
                "cross_entropy: target {bad} out of range for {a} classes"
            )));
        }
        let mut probs = vec![0.0; b * a];
        kernels::softmax_axis(self.value(logits).data(), b, a, 1, &mut probs);
        let x = self.value(logits).data();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &x[i * a..(i + 1) * a];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        let value = Tensor::scalar(loss / b as f64);
        Ok(self.push(
            value,
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    // ---- reverse sweep -----------------------------------------------

    /// Back-propagates from a scalar `loss`, consuming the tape.
    ///
    /// The returned [`Gradients`] hold `d loss / d leaf` for every leaf that
    /// requires grad and is reachable from the loss.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.recorded == 0 {
            return Err(Error::EmptyTape);
        }
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let acc = slot(grads, *a, m * k);
                    kernels::gemm(m, n, k, 1.0, g, false, val(*b), true, 1.0, acc);
                }
                if wants(*b) {
                    let acc = slot(grads, *b, k * n);
                    kernels::gemm(k, m, n, 1.0, val(*a), true, g, false, 1.0, acc);
                }
            }
            Op::BatchMatMul { a, b } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if wants(*a) {
                    let acc = slot(grads, *a, bs * m * k);
                    let bv = val(*b);
                    for i in 0..bs {
                        kernels::gemm(
                            m,
                            n,
                            k,
                            1.0,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &bv[i * k * n..(i + 1) * k * n],
                            true,
                            1.0,
                            &mut acc[i * m * k..(i + 1) * m * k],
                        );
                    }
                }
                if wants(*b) {
                    let acc = slot(grads, *b, bs * k * n);
                    let av = val(*a);
                    for i in 0..bs {
                        kernels::gemm(
                            k,
                            m,
                            n,
                            1.0,
                            &av[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            1.0,
                            &mut acc[i * k * n..(i + 1) * k * n],
                        );
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let bs = nodes[input.0].value.shape()[0];
                let cout = nodes[weight.0].value.shape()[0];
                let (rows, p) = (geom.col_rows(), geom.col_cols());
                let img_len = geom.in_channels * geom.height * geom.width;
                if wants(*weight) {
                    let acc = slot(grads, *weight, cout * rows);
                    for b in 0..bs {
                        kernels::gemm(
                            cout,
                            p,
                            rows,
                            1.0,
                            &g[b * cout * p..(b + 1) * cout * p],
                            false,
                            &cols[b * rows * p..(b + 1) * rows * p],
                            true,
                            1.0,
                            acc,
                        );
                    }
                }
                if let Some(bv) = bias {
                    if wants(*bv) {
                        let acc = slot(grads, *bv, cout);
                        for b in 0..bs {
                            for (c, a) in acc.iter_mut().enumerate() {
                                let off = (b * cout + c) * p;
                                *a += g[off..off + p].iter().sum::<f64>();
                            }
                        }
                    }
                }
                if wants(*input) {
                    let w = val(*weight);
                    let mut dcols = vec![0.0; rows * p];
                    let acc = slot(grads, *input, bs * img_len);
                    for b in 0..bs {
                        kernels::gemm(
                            rows,
                            cout,
                            p,
                            1.0,
                            w,
                            true,
                            &g[b * cout * p..(b + 1) * cout * p],
                            false,
                            0.0,
                            &mut dcols,
                        );
                        kernels::col2im(&dcols, geom, &mut acc[b * img_len..(b + 1) * img_len]);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if wants(*v) {
                        add_into(slot(grads, *v, g.len()), g);
                    }
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    let acc = slot(grads, *a, g.len());
                    for ((s, gi), y) in acc.iter_mut().zip(g).zip(val(*b)) {
                        *s += gi * y;
                    }
                }
                if wants(*b) {
                    let acc = slot(grads, *b, g.len());
                    for ((s, gi), x) in acc.iter_mut().zip(g).zip(val(*a)) {
                        *s += gi * x;
                    }
                }
            }
            Op::Scale { a, k } => {
                let acc = slot(grads, *a, g.len());
                for (s, gi) in acc.iter_mut().zip(g) {
                    *s += k * gi;
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = kernels::split_axis(out_shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = nodes[v.0].value.shape()[*axis];
                    if wants(*v) {
                        let acc = slot(grads, *v, outer * len * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            add_into(
                                &mut acc[o * len * inner..(o + 1) * len * inner],
                                &g[from..from + len * inner],
                            );
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let in_shape = nodes[a.0].value.shape();
                let (outer, full, inner) = kernels::split_axis(in_shape, *axis);
                let len = out_shape[*axis];
                let acc = slot(grads, *a, outer * full * inner);
                for o in 0..outer {
                    let to = (o * full + start) * inner;
                    add_into(
                        &mut acc[to..to + len * inner],
                        &g[o * len * inner..(o + 1) * len * inner],
                    );
                }
            }
            Op::Relu { a } => {
                let acc = slot(grads, *a, g.len());
                for ((s, gi), x) in acc.iter_mut().zip(g).zip(val(*a)) {
                    if *x > 0.0 {
                        *s += gi;
                    }
                }
            }
            Op::Sigmoid { a } => {
                let acc = slot(grads, *a, g.len());
                for ((s, gi), y) in acc.iter_mut().zip(g).zip(node.value.data()) {
                    *s += gi * y * (1.0 - y);
                }
            }
            Op::Tanh { a } => {
                let acc = slot(grads, *a, g.len());
                for ((s, gi), y) in acc.iter_mut().zip(g).zip(node.value.data()) {
                    *s += gi * (1.0 - y * y);
                }
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = kernels::split_axis(out_shape, *axis);
                let y = node.value.data();
                let acc = slot(grads, *a, g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            acc[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
            Op::SumAll { a } => {
                let n = nodes[a.0].value.numel();
                let acc = slot(grads, *a, n);
                acc.iter_mut().for_each(|s| *s += g[0]);
            }
            Op::SumAxis { a, axis } => {
                let in_shape = nodes[a.0].value.shape();
                let (outer, len, inner) = kernels::split_axis(in_shape, *axis);
                let acc = slot(grads, *a, outer * len * inner);
                for o in 0..outer {
                    for j in 0..len {
                        add_into(
                            &mut acc[(o * len + j) * inner..(o * len + j + 1) * inner],
                            &g[o * inner..(o + 1) * inner],
                        );
                    }
                }
            }
            Op::Dropout { a, mask } => {
                let acc = slot(grads, *a, g.len());
                for ((s, gi), m) in acc.iter_mut().zip(g).zip(mask) {
                    *s += gi * m;
                }
            }
            Op::MaxPool { a, argmax } => {
                let acc = slot(grads, *a, nodes[a.0].value.numel());
                for (gi, &idx) in g.iter().zip(argmax) {
                    acc[idx] += gi;
                }
            }
            Op::NearestDown { a, src } => {
                let acc = slot(grads, *a, nodes[a.0].value.numel());
                for (gi, &idx) in g.iter().zip(src) {
                    acc[idx] += gi;
                }
            }
            Op::Reshape { a } => add_into(slot(grads, *a, g.len()), g),
            Op::Broadcast { a } => {
                let in_shape = nodes[a.0].value.shape();
                let red = kernels::reduce_broadcast(g, out_shape, in_shape);
                add_into(slot(grads, *a, red.len()), &red);
            }
            Op::SwapAxes { a, d0, d1 } => {
                let mut back = vec![0.0; g.len()];
                kernels::swap_axes(g, out_shape, *d0, *d1, &mut back);
                add_into(slot(grads, *a, g.len()), &back);
            }
            Op::Gather { table, ids } => {
                let e = out_shape[1];
                let acc = slot(grads, *table, nodes[table.0].value.numel());
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut acc[id * e..(id + 1) * e], &g[r * e..(r + 1) * e]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let b = targets.len();
                let a = probs.len() / b;
                let scale = g[0] / b as f64;
                let acc = slot(grads, *logits, probs.len());
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..a {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        acc[i * a + j] += scale * (probs[i * a + j] - onehot);
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (s, x) in acc.iter_mut().zip(g) {
        *s += x;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(vec![4]));
        let y = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_matches_hand_values() {
        // e^1, e^2, e^3 over their sum, to 5 decimals
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_slice(&[1.0, 2.0, 3.0]));
        let y = t.softmax(x, 0).unwrap();
        assert!(close(t.value(y).data(), &[0.09003, 0.24473, 0.66524], 5e-6));
    }

    #[test]
    fn softmax_axis_out_of_range_is_an_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(
            t.softmax(x, 2),
            Err(Error::AxisOutOfRange { op: "softmax", .. })
        ));
    }

    #[test]
    fn relu_definition() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_slice(&[-1.0, 0.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        let c = t.constant(Tensor::zeros(vec![3]));
        assert!(matches!(
            t.add(a, c),
            Err(Error::ShapeMismatch { op: "add", .. })
        ));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_slice(&[0.3, -2.0, 5.0]), true);
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn relu_grad_is_zero_on_negatives() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_slice(&[-1.0, 2.0]), true);
        let r = t.relu(x);
        let s = t.sum(r);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_empty_tapes() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_slice(&[1.0, 2.0]), true);
        let y = t.scale(x, 2.0);
        assert!(matches!(t.backward(y), Err(Error::NonScalarLoss(_))));

        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.0), true);
        assert!(matches!(t.backward(x), Err(Error::EmptyTape)));
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_slice(&[1.0, 2.0]));
        let b = t.relu(a);
        let _ = t.sum(b);
        assert_eq!(t.recorded_ops(), 0);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn(vec![50], |i| i as f64));
        let y = t.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(t.value(y), t.value(x));
        let z = t.dropout(x, 0.25, false, &mut rng).unwrap();
        assert_eq!(t.value(z), t.value(x));
        assert!(t.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_expectation_matches_input() {
        // 10^4 draws of a unit input: mean of the scaled mask should be 1
        // within three standard errors.
        let p = 0.25;
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t = Tape::new();
        let x = t.constant(Tensor::ones(vec![n]));
        let y = t.dropout(x, p, true, &mut rng).unwrap();
        let mean = t.value(y).sum() / n as f64;
        // per-draw variance of the scaled Bernoulli: p / (1 - p)
        let se = (p / (1.0 - p) / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn(vec![2, 3, 4, 5], |i| (i as f64 * 0.7).sin()));
        let eye = Tensor::from_fn(vec![3, 3, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let w = t.constant(eye);
        let y = t.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn conv_stride_and_padding_output_shape() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::ones(vec![1, 2, 7, 7]));
        let w = t.constant(Tensor::ones(vec![4, 2, 3, 3]));
        let y = t.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(t.shape(y), &[1, 4, 4, 4]);
        // interior windows cover 2 * 9 ones
        assert_eq!(t.value(y).data()[5], 18.0);
        // corner window sees a 2x2 patch per channel
        assert_eq!(t.value(y).data()[0], 8.0);
    }

    #[test]
    fn max_pool_picks_block_maxima() {
        let mut t = Tape::new();
        let x = t.leaf(
            Tensor::new(
                vec![1, 4, 4],
                vec![
                    1.0, 2.0, 0.0, 0.0, //
                    3.0, 4.0, 0.0, 9.0, //
                    0.0, 0.0, 5.0, 5.0, //
                    -1.0, 7.0, 5.0, 5.0,
                ],
            )
            .unwrap(),
            true,
        );
        let y = t.max_pool(x, 2).unwrap();
        assert_eq!(t.value(y).data(), &[4.0, 9.0, 7.0, 5.0]);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        let gx = g.get(x).unwrap().data();
        assert_eq!(gx.iter().sum::<f64>(), 4.0);
        // tie in the last block resolves to its first element
        assert_eq!(gx[10], 1.0);
        assert!(t_not_divisible());
    }

    fn t_not_divisible() -> bool {
        let mut t = Tape::new();
        let x = t.constant(Tensor::ones(vec![1, 5, 4]));
        t.max_pool(x, 2).is_err()
    }

    #[test]
    fn gather_only_touches_used_rows() {
        let mut t = Tape::new();
        let table = t.leaf(Tensor::from_fn(vec![5, 2], |i| i as f64), true);
        let rows = t.gather_rows(table, &[3, 1, 3]).unwrap();
        assert_eq!(t.value(rows).data(), &[6.0, 7.0, 2.0, 3.0, 6.0, 7.0]);
        let s = t.sum(rows);
        let g = t.backward(s).unwrap();
        assert_eq!(
            g.get(table).unwrap().data(),
            &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0]
        );
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_classes() {
        let mut t = Tape::new();
        let l = t.leaf(Tensor::zeros(vec![3, 4]), true);
        let ce = t.cross_entropy(l, &[0, 1, 3]).unwrap();
        assert!((t.value(ce).item() - 4f64.ln()).abs() < 1e-12);
    }
}
