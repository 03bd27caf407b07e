//! Wengert tape: ops record their inputs and a value; `backward` replays the
//! list in reverse, accumulating vector-Jacobian products. One tape owns one
//! training step; tensors are immutable once an op has written them.

use std::sync::Arc;

use super::conv::{check_weight_shape, conv3d_adjoint_input, conv3d_forward, conv3d_weight_grad, conv_shapes, ConvShapes};
use super::{CausalMask, ConvSpec, Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
pub enum Op<S: Scalar> {
    Leaf,
    Conv3d { x: Var, w: Var, spec: ConvSpec, mask: Option<CausalMask> },
    ConvTranspose3d { x: Var, w: Var, spec: ConvSpec },
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: S },
    Relu { x: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Dropout { x: Var, keep: Arc<Vec<bool>>, scale: S },
    Concat { xs: Vec<Var>, axis: usize },
    SliceAxis { x: Var, axis: usize, start: usize, len: usize },
    TileAxis { x: Var, axis: usize, reps: usize },
    Reshape { x: Var },
    MatMul { a: Var, b: Var },
    MatMulNT { a: Var, b: Var },
    CausalSoftmax { scores: Var, ranks: Arc<Vec<usize>> },
    Embed { table: Var, indices: Arc<Vec<u32>> },
    StraightThrough { x: Var },
    SumAll { x: Var },
    SumSq { x: Var },
    CrossEntropy { logits: Var, targets: Arc<Vec<u32>> },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires: bool,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

fn stable_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Accumulated gradient, if any flowed to this var.
    pub fn grad(&self, var: Var) -> Option<&[S]> {
        self.grads[var.0].as_deref()
    }

    pub fn grad_tensor(&self, var: Var) -> Option<Tensor<S>> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[var.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires: bool) -> Var {
        self.nodes.push(Node { value, op, requires });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op_name: &'static str, value: Tensor<S>, op: Op<S>, requires: bool) -> Result<Var> {
        if let Some(index) = value.first_non_finite() {
            return Err(TensorError::NonFinite { op: op_name, index });
        }
        Ok(self.push(value, op, requires))
    }

    fn requires(&self, var: Var) -> bool {
        self.nodes[var.0].requires
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that participates in backward; honors `tensor.requires_grad()`.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        let requires = value.requires_grad();
        self.push(value, Op::Leaf, requires)
    }

    /// Trainable leaf regardless of the tensor's flag.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, spec: &ConvSpec) -> Result<Var> {
        self.conv3d_impl(x, w, spec, None)
    }

    /// Convolution whose kernel taps are restricted by `mask`, in forward and
    /// backward alike; masked taps are skipped, never multiplied.
    pub fn masked_conv(&mut self, x: Var, w: Var, spec: &ConvSpec, mask: &CausalMask) -> Result<Var> {
        mask.matches(spec)?;
        self.conv3d_impl(x, w, spec, Some(mask.clone()))
    }

    fn conv3d_impl(&mut self, x: Var, w: Var, spec: &ConvSpec, mask: Option<CausalMask>) -> Result<Var> {
        let shapes = conv_shapes(spec, self.shape(x))?;
        check_weight_shape(spec, self.shape(w))?;
        let data = conv3d_forward(
            self.value(x).data(),
            &shapes,
            spec,
            self.value(w).data(),
            mask.as_ref(),
        );
        let out_shape = vec![shapes.out_ext[0], shapes.out_ext[1], shapes.out_ext[2], spec.out_channels];
        let requires = self.requires(x) || self.requires(w);
        self.push_checked(
            "conv3d",
            Tensor::new(out_shape, data)?,
            Op::Conv3d { x, w, spec: *spec, mask },
            requires,
        )
    }

    /// Transposed convolution: the exact adjoint of `conv3d` with the same
    /// spec and weights. Consumes `spec.out_channels`, emits
    /// `spec.in_channels`, and inverts the forward extent arithmetic.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, spec: &ConvSpec) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        if in_shape.len() != 4 || in_shape[3] != spec.out_channels {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose3d",
                detail: format!("input {:?} must be rank 4 with {} channels", in_shape, spec.out_channels),
            });
        }
        check_weight_shape(spec, self.shape(w))?;
        let shapes = self.transpose_shapes(spec, &in_shape)?;
        let data = conv3d_adjoint_input(self.value(x).data(), &shapes, spec, self.value(w).data(), None);
        let out_shape = vec![shapes.in_ext[0], shapes.in_ext[1], shapes.in_ext[2], spec.in_channels];
        let requires = self.requires(x) || self.requires(w);
        self.push_checked(
            "conv_transpose3d",
            Tensor::new(out_shape, data)?,
            Op::ConvTranspose3d { x, w, spec: *spec },
            requires,
        )
    }

    fn transpose_shapes(&self, spec: &ConvSpec, in_shape: &[usize]) -> Result<ConvShapes> {
        let grid = [in_shape[0], in_shape[1], in_shape[2]];
        let up = spec.transpose_out_extents(grid)?;
        // Geometry of the mirrored forward conv: its input is our output.
        let forward = spec.out_extents(up)?;
        if forward != grid {
            return Err(TensorError::BadConv(format!(
                "transpose extents {:?} do not invert to the input grid {:?}",
                up, grid
            )));
        }
        Ok(ConvShapes { in_ext: up, out_ext: grid, pads: spec.pads(up) })
    }

    /// Broadcast `bias` (shape `[C]`) over the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let channels = *shape.last().ok_or_else(|| TensorError::ShapeMismatch {
            op: "add_bias",
            detail: "input must have at least one axis".into(),
        })?;
        if self.shape(bias) != [channels] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                detail: format!("bias {:?} vs channels {}", self.shape(bias), channels),
            });
        }
        let b = self.value(bias).data().to_vec();
        let data: Vec<S> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| *v + b[i % channels])
            .collect();
        let requires = self.requires(x) || self.requires(bias);
        self.push_checked("add_bias", Tensor::new(shape, data)?, Op::AddBias { x, bias }, requires)
    }

    fn zip_elementwise(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let shape = self.shape(a).to_vec();
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let requires = self.requires(a) || self.requires(b);
        self.push_checked(op_name, Tensor::new(shape, data)?, op, requires)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let data: Vec<S> = self.value(x).data().iter().map(|v| *v * factor).collect();
        let requires = self.requires(x);
        self.push_checked("scale", Tensor::new(shape, data)?, Op::Scale { x, factor }, requires)
    }

    fn map_elementwise(&mut self, op_name: &'static str, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let data: Vec<S> = self.value(x).data().iter().map(|v| f(*v)).collect();
        let requires = self.requires(x);
        self.push_checked(op_name, Tensor::new(shape, data)?, op, requires)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map_elementwise("relu", x, |v| if v > S::zero() { v } else { S::zero() }, Op::Relu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map_elementwise("tanh", x, |v| v.tanh(), Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_elementwise("sigmoid", x, stable_sigmoid, Op::Sigmoid { x })
    }

    /// Inverted dropout: kept elements are scaled by `1/(1-rate)`; the mask
    /// is drawn by the caller so the tape itself stays deterministic.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl rand::Rng) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return self.scale(x, S::zero());
        }
        let n = self.value(x).numel();
        let keep: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() >= rate).collect();
        let scale = S::from_f64(1.0 / (1.0 - rate));
        let shape = self.shape(x).to_vec();
        let data: Vec<S> = self
            .value(x)
            .data()
            .iter()
            .zip(keep.iter())
            .map(|(v, k)| if *k { *v * scale } else { S::zero() })
            .collect();
        let requires = self.requires(x);
        self.push_checked(
            "dropout",
            Tensor::new(shape, data)?,
            Op::Dropout { x, keep: Arc::new(keep), scale },
            requires,
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(TensorError::ShapeMismatch { op: "concat", detail: "no inputs".into() });
        }
        let base = self.shape(xs[0]).to_vec();
        if axis >= base.len() {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                detail: format!("axis {} out of range for rank {}", axis, base.len()),
            });
        }
        let mut axis_total = 0usize;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &e)| i != axis && e != base[i])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    detail: format!("{:?} vs {:?} (axis {})", s, base, axis),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = vec![S::zero(); outer * axis_total * inner];
        let mut offset = 0usize;
        for &v in xs {
            let ext = self.shape(v)[axis];
            let src = self.value(v).data();
            for o in 0..outer {
                let dst_base = (o * axis_total + offset) * inner;
                let src_base = o * ext * inner;
                data[dst_base..dst_base + ext * inner]
                    .copy_from_slice(&src[src_base..src_base + ext * inner]);
            }
            offset += ext;
        }
        let requires = xs.iter().any(|&v| self.requires(v));
        self.push_checked("concat", Tensor::new(out_shape, data)?, Op::Concat { xs: xs.to_vec(), axis }, requires)
    }

    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "slice_axis",
                detail: format!("slice {}..{} on axis {} of {:?}", start, start + len, axis, shape),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src = self.value(x).data();
        let mut data = vec![S::zero(); outer * len * inner];
        for o in 0..outer {
            let src_base = (o * shape[axis] + start) * inner;
            let dst_base = o * len * inner;
            data[dst_base..dst_base + len * inner].copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        let requires = self.requires(x);
        self.push_checked(
            "slice_axis",
            Tensor::new(out_shape, data)?,
            Op::SliceAxis { x, axis, start, len },
            requires,
        )
    }

    pub fn tile_axis(&mut self, x: Var, axis: usize, reps: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || reps == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "tile_axis",
                detail: format!("axis {} reps {} on {:?}", axis, reps, shape),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let block: usize = shape[axis..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] *= reps;
        let src = self.value(x).data();
        let mut data = vec![S::zero(); src.len() * reps];
        for o in 0..outer {
            for r in 0..reps {
                let dst = (o * reps + r) * block;
                data[dst..dst + block].copy_from_slice(&src[o * block..(o + 1) * block]);
            }
        }
        let requires = self.requires(x);
        self.push_checked("tile_axis", Tensor::new(out_shape, data)?, Op::TileAxis { x, axis, reps }, requires)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape(x), shape),
            });
        }
        let data = self.value(x).data().to_vec();
        let requires = self.requires(x);
        self.push_checked("reshape", Tensor::new(shape, data)?, Op::Reshape { x }, requires)
    }

    fn matmul_dims(&self, op: &'static str, a: Var, b: Var, transposed: bool) -> Result<(usize, usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected matrices, got {:?} and {:?}", sa, sb),
            });
        }
        let (n, k) = (sa[0], sa[1]);
        let (k2, m) = if transposed { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("inner dims differ: {:?} x {:?}", sa, sb),
            });
        }
        Ok((n, k, m))
    }

    /// `[n,k] x [k,m] -> [n,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k, m) = self.matmul_dims("matmul", a, b, false)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            for p in 0..k {
                let av = da[i * k + p];
                if av == S::zero() {
                    continue;
                }
                let brow = &db[p * m..(p + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, bv) in orow.iter_mut().zip(brow.iter()) {
                    *o = *o + av * *bv;
                }
            }
        }
        let requires = self.requires(a) || self.requires(b);
        self.push_checked("matmul", Tensor::new(vec![n, m], out)?, Op::MatMul { a, b }, requires)
    }

    /// `[n,k] x [m,k]^T -> [n,m]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k, m) = self.matmul_dims("matmul_nt", a, b, true)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            let arow = &da[i * k..(i + 1) * k];
            for j in 0..m {
                let brow = &db[j * k..(j + 1) * k];
                let mut acc = S::zero();
                for (av, bv) in arow.iter().zip(brow.iter()) {
                    acc = acc + *av * *bv;
                }
                out[i * m + j] = acc;
            }
        }
        let requires = self.requires(a) || self.requires(b);
        self.push_checked("matmul_nt", Tensor::new(vec![n, m], out)?, Op::MatMulNT { a, b }, requires)
    }

    /// Row-wise softmax over keys whose rank in `ranks` is <= the query's
    /// rank. Disallowed keys are excluded from the computation entirely, so
    /// the output is bit-invariant to them.
    pub fn causal_softmax(&mut self, scores: Var, ranks: Arc<Vec<usize>>) -> Result<Var> {
        let shape = self.shape(scores).to_vec();
        if shape.len() != 2 || shape[0] != shape[1] || shape[0] != ranks.len() {
            return Err(TensorError::ShapeMismatch {
                op: "causal_softmax",
                detail: format!("scores {:?} vs {} ranked positions", shape, ranks.len()),
            });
        }
        let n = shape[0];
        let src = self.value(scores).data();
        let mut out = vec![S::zero(); n * n];
        for q in 0..n {
            let row = &src[q * n..(q + 1) * n];
            let mut max = S::neg_infinity();
            for key in 0..n {
                if ranks[key] <= ranks[q] && row[key] > max {
                    max = row[key];
                }
            }
            let mut denom = S::zero();
            for key in 0..n {
                if ranks[key] <= ranks[q] {
                    denom = denom + (row[key] - max).exp();
                }
            }
            for key in 0..n {
                if ranks[key] <= ranks[q] {
                    out[q * n + key] = (row[key] - max).exp() / denom;
                }
            }
        }
        let requires = self.requires(scores);
        self.push_checked(
            "causal_softmax",
            Tensor::new(shape, out)?,
            Op::CausalSoftmax { scores, ranks },
            requires,
        )
    }

    /// Gathers rows of `table` (`[K, E]`) at `indices`, producing
    /// `grid_shape + [E]`. The table gradient is a scatter-add.
    pub fn embed(&mut self, table: Var, indices: Arc<Vec<u32>>, grid_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embed",
                detail: format!("table must be [K, E], got {:?}", ts),
            });
        }
        let sites: usize = grid_shape.iter().product();
        if sites != indices.len() {
            return Err(TensorError::ShapeMismatch {
                op: "embed",
                detail: format!("{} indices vs grid {:?}", indices.len(), grid_shape),
            });
        }
        let (k, e) = (ts[0], ts[1]);
        let data = self.value(table).data();
        let mut out = vec![S::zero(); sites * e];
        for (i, &idx) in indices.iter().enumerate() {
            let idx = idx as usize;
            if idx >= k {
                return Err(TensorError::ShapeMismatch {
                    op: "embed",
                    detail: format!("index {} out of range for {} rows", idx, k),
                });
            }
            out[i * e..(i + 1) * e].copy_from_slice(&data[idx * e..(idx + 1) * e]);
        }
        let mut shape = grid_shape.to_vec();
        shape.push(e);
        let requires = self.requires(table);
        self.push_checked("embed", Tensor::new(shape, out)?, Op::Embed { table, indices }, requires)
    }

    /// Forward value is `quantized`; backward copies the output gradient
    /// unchanged onto `x` (the pre-quantization activations).
    pub fn straight_through(&mut self, x: Var, quantized: Tensor<S>) -> Result<Var> {
        if quantized.shape() != self.shape(x) {
            return Err(TensorError::ShapeMismatch {
                op: "straight_through",
                detail: format!("{:?} vs {:?}", quantized.shape(), self.shape(x)),
            });
        }
        let requires = self.requires(x);
        self.push_checked("straight_through", quantized, Op::StraightThrough { x }, requires)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total: S = self.value(x).data().iter().copied().sum();
        let requires = self.requires(x);
        self.push_checked("sum_all", Tensor::scalar(total), Op::SumAll { x }, requires)
    }

    /// Sum of squares; `sum_sq(sub(a, b))` is the squared L2 distance.
    pub fn sum_sq(&mut self, x: Var) -> Result<Var> {
        let total: S = self.value(x).data().iter().map(|v| *v * *v).sum();
        let requires = self.requires(x);
        self.push_checked("sum_sq", Tensor::scalar(total), Op::SumSq { x }, requires)
    }

    /// Total negative log-likelihood in nats of `targets` under row-wise
    /// softmax of `logits` (`[n, K]`).
    pub fn cross_entropy(&mut self, logits: Var, targets: Arc<Vec<u32>>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("logits {:?} vs {} targets", shape, targets.len()),
            });
        }
        let k = shape[1];
        let data = self.value(logits).data();
        let mut total = S::zero();
        for (i, &t) in targets.iter().enumerate() {
            let t = t as usize;
            if t >= k {
                return Err(TensorError::ShapeMismatch {
                    op: "cross_entropy",
                    detail: format!("target {} out of range for {} classes", t, k),
                });
            }
            let row = &data[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse: S = row.iter().map(|v| (*v - max).exp()).sum();
            total = total + max + lse.ln() - row[t];
        }
        let requires = self.requires(logits);
        self.push_checked("cross_entropy", Tensor::scalar(total), Op::CrossEntropy { logits, targets }, requires)
    }

    /// Reverse sweep from a scalar loss. Every var on the path to a
    /// gradient-tracking leaf receives `dLoss/dVar`; repeated calls without
    /// `reset_grads` accumulate. The sweep works in a per-call buffer so a
    /// second call contributes exactly one more `dLoss/dVar`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut pass: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        pass[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires {
                continue;
            }
            let Some(gout) = pass[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            self.backward_op(&mut pass, Var(i), &op, &gout);
            pass[i] = Some(gout);
        }
        for (slot, contrib) in self.grads.iter_mut().zip(pass.into_iter()) {
            if let Some(c) = contrib {
                match slot {
                    Some(existing) => {
                        for (e, v) in existing.iter_mut().zip(c.iter()) {
                            *e = *e + *v;
                        }
                    }
                    None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }

    fn deposit(pass: &mut [Option<Vec<S>>], var: Var, contrib: &[S]) {
        match &mut pass[var.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib.iter()) {
                    *e = *e + *c;
                }
            }
            slot => *slot = Some(contrib.to_vec()),
        }
    }

    fn backward_op(&self, pass: &mut [Option<Vec<S>>], out: Var, op: &Op<S>, g: &[S]) {
        match op {
            Op::Leaf => {}
            Op::Conv3d { x, w, spec, mask } => {
                let shapes = conv_shapes(spec, self.shape(*x)).expect("recorded conv shapes");
                if self.requires(*x) {
                    let dx = conv3d_adjoint_input(g, &shapes, spec, self.value(*w).data(), mask.as_ref());
                    Self::deposit(pass, *x, &dx);
                }
                if self.requires(*w) {
                    let dw = conv3d_weight_grad(self.value(*x).data(), g, &shapes, spec, mask.as_ref());
                    Self::deposit(pass, *w, &dw);
                }
            }
            Op::ConvTranspose3d { x, w, spec } => {
                let shapes = self.transpose_shapes(spec, self.shape(*x)).expect("recorded transpose shapes");
                if self.requires(*x) {
                    let dx = conv3d_forward(g, &shapes, spec, self.value(*w).data(), None);
                    Self::deposit(pass, *x, &dx);
                }
                if self.requires(*w) {
                    let dw = conv3d_weight_grad(g, self.value(*x).data(), &shapes, spec, None);
                    Self::deposit(pass, *w, &dw);
                }
            }
            Op::AddBias { x, bias } => {
                if self.requires(*x) {
                    Self::deposit(pass, *x, g);
                }
                if self.requires(*bias) {
                    let channels = self.value(*bias).numel();
                    let mut db = vec![S::zero(); channels];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % channels] = db[i % channels] + *gv;
                    }
                    Self::deposit(pass, *bias, &db);
                }
            }
            Op::Add { a, b } => {
                if self.requires(*a) {
                    Self::deposit(pass, *a, g);
                }
                if self.requires(*b) {
                    Self::deposit(pass, *b, g);
                }
            }
            Op::Sub { a, b } => {
                if self.requires(*a) {
                    Self::deposit(pass, *a, g);
                }
                if self.requires(*b) {
                    let neg: Vec<S> = g.iter().map(|v| -*v).collect();
                    Self::deposit(pass, *b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.requires(*a) {
                    let da: Vec<S> = g.iter().zip(self.value(*b).data()).map(|(gv, bv)| *gv * *bv).collect();
                    Self::deposit(pass, *a, &da);
                }
                if self.requires(*b) {
                    let db: Vec<S> = g.iter().zip(self.value(*a).data()).map(|(gv, av)| *gv * *av).collect();
                    Self::deposit(pass, *b, &db);
                }
            }
            Op::Scale { x, factor } => {
                if self.requires(*x) {
                    let dx: Vec<S> = g.iter().map(|v| *v * *factor).collect();
                    Self::deposit(pass, *x, &dx);
                }
            }
            Op::Relu { x } => {
                if self.requires(*x) {
                    let dx: Vec<S> = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(gv, xv)| if *xv > S::zero() { *gv } else { S::zero() })
                        .collect();
                    Self::deposit(pass, *x, &dx);
                }
            }
            Op::Tanh { x } => {
                if self.requires(*x) {
                    let dx: Vec<S> = g
                        .iter()
                        .zip(self.value(out).data())
                        .map(|(gv, yv)| *gv * (S::one() - *yv * *yv))
                        .collect();
                    Self::deposit(pass, *x, &dx);
                }
            }
            Op::Sigmoid { x } => {
                if self.requires(*x) {
                    let dx: Vec<S> = g
                        .iter()
                        .zip(self.value(out).data())
                        .map(|(gv, yv)| *gv * *yv * (S::one() - *yv))
                        .collect();
                    Self::deposit(pass, *x, &dx);
                }
            }
            Op::Dropout { x, keep, scale } => {
                if self.requires(*x) {
                    let dx: Vec<S> = g
                        .iter()
                        .zip(keep.iter())
                        .map(|(gv, k)| if *k { *gv * *scale } else { S::zero() })
                        .collect();
                    Self::deposit(pass, *x, &dx);
                }
            }
            Op::Concat { xs, axis } => {
                let out_shape = self.shape(out).to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0usize;
                for &v in xs {
                    let ext = self.shape(v)[*axis];
                    if self.requires(v) {
                        let mut dv = vec![S::zero(); outer * ext * inner];
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * ext * inner;
                            dv[dst..dst + ext * inner].copy_from_slice(&g[src..src + ext * inner]);
                        }
                        Self::deposit(pass, v, &dv);
                    }
                    offset += ext;
                }
            }
            Op::SliceAxis { x, axis, start, len } => {
                if self.requires(*x) {
                    let in_shape = self.shape(*x).to_vec();
                    let outer: usize = in_shape[..*axis].iter().product();
                    let inner: usize = in_shape[*axis + 1..].iter().product();
                    let mut dx = vec![S::zero(); self.value(*x).numel()];
                    for o in 0..outer {
                        let dst = (o * in_shape[*axis] + start) * inner;
                        let src = o * len * inner;
                        dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    Self::deposit(pass, *x, &dx);
                }
            }
            Op::TileAxis { x, axis, reps } => {
                if self.requires(*x) {
                    let in_shape = self.shape(*x).to_vec();
                    let outer: usize = in_shape[..*axis].iter().product();
                    let block: usize = in_shape[*axis..].iter().product();
                    let mut dx = vec![S::zero(); self.value(*x).numel()];
                    for o in 0..outer {
                        for r in 0..*reps {
                            let src = (o * reps + r) * block;
                            let dst = &mut dx[o * block..(o + 1) * block];
                            for (d, s) in dst.iter_mut().zip(&g[src..src + block]) {
                                *d = *d + *s;
                            }
                        }
                    }
                    Self::deposit(pass, *x, &dx);
                }
            }
            Op::Reshape { x } => {
                if self.requires(*x) {
                    Self::deposit(pass, *x, g);
                }
            }
            Op::MatMul { a, b } => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[1];
                if self.requires(*a) {
                    // dA = g . B^T
                    let db = self.value(*b).data();
                    let mut da = vec![S::zero(); n * k];
                    for i in 0..n {
                        for j in 0..m {
                            let gv = g[i * m + j];
                            if gv == S::zero() {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] = da[i * k + p] + gv * db[p * m + j];
                            }
                        }
                    }
                    Self::deposit(pass, *a, &da);
                }
                if self.requires(*b) {
                    // dB = A^T . g
                    let daa = self.value(*a).data();
                    let mut db = vec![S::zero(); k * m];
                    for i in 0..n {
                        for p in 0..k {
                            let av = daa[i * k + p];
                            if av == S::zero() {
                                continue;
                            }
                            for j in 0..m {
                                db[p * m + j] = db[p * m + j] + av * g[i * m + j];
                            }
                        }
                    }
                    Self::deposit(pass, *b, &db);
                }
            }
            Op::MatMulNT { a, b } => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[0];
                if self.requires(*a) {
                    // dA = g . B
                    let db = self.value(*b).data();
                    let mut da = vec![S::zero(); n * k];
                    for i in 0..n {
                        for j in 0..m {
                            let gv = g[i * m + j];
                            if gv == S::zero() {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] = da[i * k + p] + gv * db[j * k + p];
                            }
                        }
                    }
                    Self::deposit(pass, *a, &da);
                }
                if self.requires(*b) {
                    // dB = g^T . A
                    let daa = self.value(*a).data();
                    let mut db = vec![S::zero(); m * k];
                    for i in 0..n {
                        for j in 0..m {
                            let gv = g[i * m + j];
                            if gv == S::zero() {
                                continue;
                            }
                            for p in 0..k {
                                db[j * k + p] = db[j * k + p] + gv * daa[i * k + p];
                            }
                        }
                    }
                    Self::deposit(pass, *b, &db);
                }
            }
            Op::CausalSoftmax { scores, ranks } => {
                if self.requires(*scores) {
                    let n = ranks.len();
                    let probs = self.value(out).data();
                    let mut ds = vec![S::zero(); n * n];
                    for q in 0..n {
                        let prow = &probs[q * n..(q + 1) * n];
                        let grow = &g[q * n..(q + 1) * n];
                        let mut dot = S::zero();
                        for key in 0..n {
                            if ranks[key] <= ranks[q] {
                                dot = dot + grow[key] * prow[key];
                            }
                        }
                        for key in 0..n {
                            if ranks[key] <= ranks[q] {
                                ds[q * n + key] = prow[key] * (grow[key] - dot);
                            }
                        }
                    }
                    Self::deposit(pass, *scores, &ds);
                }
            }
            Op::Embed { table, indices } => {
                if self.requires(*table) {
                    let e = self.shape(*table)[1];
                    let mut dt = vec![S::zero(); self.value(*table).numel()];
                    for (i, &idx) in indices.iter().enumerate() {
                        let row = &mut dt[idx as usize * e..(idx as usize + 1) * e];
                        for (d, gv) in row.iter_mut().zip(&g[i * e..(i + 1) * e]) {
                            *d = *d + *gv;
                        }
                    }
                    Self::deposit(pass, *table, &dt);
                }
            }
            Op::StraightThrough { x } => {
                if self.requires(*x) {
                    Self::deposit(pass, *x, g);
                }
            }
            Op::SumAll { x } => {
                if self.requires(*x) {
                    let dx = vec![g[0]; self.value(*x).numel()];
                    Self::deposit(pass, *x, &dx);
                }
            }
            Op::SumSq { x } => {
                if self.requires(*x) {
                    let two = S::from_f64(2.0);
                    let dx: Vec<S> = self.value(*x).data().iter().map(|v| two * *v * g[0]).collect();
                    Self::deposit(pass, *x, &dx);
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if self.requires(*logits) {
                    let (n, k) = (self.shape(*logits)[0], self.shape(*logits)[1]);
                    let data = self.value(*logits).data();
                    let mut dl = vec![S::zero(); n * k];
                    for (i, &t) in targets.iter().enumerate() {
                        let row = &data[i * k..(i + 1) * k];
                        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                        let denom: S = row.iter().map(|v| (*v - max).exp()).sum();
                        for j in 0..k {
                            let p = (row[j] - max).exp() / denom;
                            let delta = if j == t as usize { S::one() } else { S::zero() };
                            dl[i * k + j] = g[0] * (p - delta);
                        }
                    }
                    Self::deposit(pass, *logits, &dl);
                }
            }
        }
    }
}

/// `tanh(conv_a(x)) * sigmoid(conv_b(x))`; both convolutions share one spec
/// and an optional causal mask.
pub fn gated_block<S: Scalar>(
    tape: &mut Tape<S>,
    input: Var,
    weights_a: Var,
    weights_b: Var,
    spec: &ConvSpec,
    mask: Option<&CausalMask>,
) -> Result<Var> {
    let a = match mask {
        Some(m) => tape.masked_conv(input, weights_a, spec, m)?,
        None => tape.conv3d(input, weights_a, spec)?,
    };
    let b = match mask {
        Some(m) => tape.masked_conv(input, weights_b, spec, m)?,
        None => tape.conv3d(input, weights_b, spec)?,
    };
    let t = tape.tanh(a)?;
    let s = tape.sigmoid(b)?;
    tape.mul(t, s)
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub output: Var,
}

/// Multi-head self attention over `[N, C]` with softmax support limited to
/// keys at or before the query in `causal_order` (a rank per position;
/// identity ranks give raster-time order).
pub fn multi_head_attention<S: Scalar>(
    tape: &mut Tape<S>,
    input: Var,
    weights: &AttentionWeights,
    heads: usize,
    causal_order: Arc<Vec<usize>>,
) -> Result<Var> {
    let shape = tape.shape(input).to_vec();
    if shape.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "multi_head_attention",
            detail: format!("expected [N, C], got {:?}", shape),
        });
    }
    let (n, channels) = (shape[0], shape[1]);
    if heads == 0 || channels % heads != 0 {
        return Err(TensorError::HeadSplit { channels, heads });
    }
    if causal_order.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "multi_head_attention",
            detail: format!("{} positions vs {} ranks", n, causal_order.len()),
        });
    }
    let head_dim = channels / heads;
    let q = tape.matmul(input, weights.query)?;
    let k = tape.matmul(input, weights.key)?;
    let v = tape.matmul(input, weights.value)?;
    let scale = S::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_axis(q, 1, h * head_dim, head_dim)?;
        let kh = tape.slice_axis(k, 1, h * head_dim, head_dim)?;
        let vh = tape.slice_axis(v, 1, h * head_dim, head_dim)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scaled = tape.scale(scores, scale)?;
        let attn = tape.causal_softmax(scaled, causal_order.clone())?;
        head_outputs.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat(&head_outputs, 1)?;
    tape.matmul(merged, weights.output)
}
