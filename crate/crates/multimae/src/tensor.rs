//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks the recording in reverse and populates gradients for every node that
//! (transitively) depends on a `requires_grad` leaf. Tapes are dynamic: build
//! a fresh one per training step and read gradients out through the [`Var`]
//! handles returned by the ops.
//!
//! The element type is generic so the same graph code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

use std::fmt;

use thiserror::Error;

/// Element types the engine supports: `f32` for training, `f64` for
/// gradient-check mode.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Gaussian error function; backs the exact (non-tanh) gelu.
    fn erf(self) -> Self;
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Shorthand for lossy f64 -> E conversion.
pub fn el<E: Scalar>(x: f64) -> E {
    E::from_f64(x).expect("f64 converts to every supported scalar")
}

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, data has {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: index {index} out of bounds for extent {extent}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("{op}: duplicate index {index}")]
    DuplicateIndex { op: &'static str, index: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward already ran on this tape; call reset_grads first")]
    BackwardWithoutReset,
    #[error("concat needs at least one input")]
    EmptyConcat,
}

/// Plain tensor value: shape plus row-major data.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                expected,
                actual: data.len(),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: E) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self, TensorError> {
        Tensor::new(shape.to_vec(), values.iter().map(|&v| el(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> E {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|v| v.to_f64().expect("scalar converts to f64"))
            .collect()
    }

    /// Cast between element types (f32 <-> f64).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| el(v.to_f64().unwrap())).collect(),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<E> {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: E },
    AddScalar { a: usize },
    Abs { a: usize },
    Gelu { a: usize },
    MatMul { a: usize, b: usize },
    Transpose { a: usize, ax0: usize, ax1: usize },
    Reshape { a: usize },
    Concat { parts: Vec<usize>, axis: usize },
    IndexSelect { a: usize, axis: usize, indices: Vec<usize> },
    ScatterRows { base: usize, rows: usize, indices: Vec<usize> },
    Pick { a: usize, indices: Vec<usize> },
    Softmax { a: usize },
    LogSoftmax { a: usize },
    LayerNorm { a: usize, gain: usize, bias: usize, eps: E },
    Sum { a: usize },
    Mean { a: usize },
}

struct Node<E> {
    value: Tensor<E>,
    grad: Option<Vec<E>>,
    needs_grad: bool,
    op: Op<E>,
}

/// Dynamic recording of one forward pass.
pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
    backward_done: bool,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf value. Gradients accumulate into it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that never receives gradient (inputs, targets, masks).
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<Tensor<E>> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    fn push(&mut self, value: Tensor<E>, needs_grad: bool, op: Op<E>) -> Var {
        debug_assert!(
            value.data.iter().all(|x| x.is_finite()),
            "non-finite value produced by forward op"
        );
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(id)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn shape(&self, id: usize) -> &[usize] {
        &self.nodes[id].value.shape
    }

    fn data(&self, id: usize) -> &[E] {
        &self.nodes[id].value.data
    }

    // ---- elementwise -----------------------------------------------------

    /// Elementwise add. `b`'s shape must equal `a`'s or be a suffix of it,
    /// in which case `b` is broadcast over the leading axes (bias add).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a.0).to_vec(), self.shape(b.0).to_vec());
        if !is_suffix(&sb, &sa) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        let bn = self.nodes[b.0].value.numel().max(1);
        let data: Vec<E> = self
            .data(a.0)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + self.nodes[b.0].value.data[i % bn])
            .collect();
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(
            Tensor { shape: sa, data },
            needs,
            Op::Add { a: a.0, b: b.0 },
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a.0).to_vec(), self.shape(b.0).to_vec());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "sub",
                lhs: sa,
                rhs: sb,
            });
        }
        let data: Vec<E> = self
            .data(a.0)
            .iter()
            .zip(self.data(b.0))
            .map(|(&x, &y)| x - y)
            .collect();
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(
            Tensor { shape: sa, data },
            needs,
            Op::Sub { a: a.0, b: b.0 },
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a.0).to_vec(), self.shape(b.0).to_vec());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: sa,
                rhs: sb,
            });
        }
        let data: Vec<E> = self
            .data(a.0)
            .iter()
            .zip(self.data(b.0))
            .map(|(&x, &y)| x * y)
            .collect();
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(
            Tensor { shape: sa, data },
            needs,
            Op::Mul { a: a.0, b: b.0 },
        ))
    }

    pub fn scale(&mut self, a: Var, c: E) -> Var {
        let shape = self.shape(a.0).to_vec();
        let data: Vec<E> = self.data(a.0).iter().map(|&x| x * c).collect();
        let needs = self.needs(&[a.0]);
        self.push(Tensor { shape, data }, needs, Op::Scale { a: a.0, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: E) -> Var {
        let shape = self.shape(a.0).to_vec();
        let data: Vec<E> = self.data(a.0).iter().map(|&x| x + c).collect();
        let needs = self.needs(&[a.0]);
        self.push(Tensor { shape, data }, needs, Op::AddScalar { a: a.0 })
    }

    /// |x| with subgradient 0 at x = 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let shape = self.shape(a.0).to_vec();
        let data: Vec<E> = self.data(a.0).iter().map(|&x| x.abs()).collect();
        let needs = self.needs(&[a.0]);
        self.push(Tensor { shape, data }, needs, Op::Abs { a: a.0 })
    }

    /// Exact Gaussian gelu: x * Phi(x) = 0.5 x (1 + erf(x / sqrt(2))).
    pub fn gelu(&mut self, a: Var) -> Var {
        let shape = self.shape(a.0).to_vec();
        let half = el::<E>(0.5);
        let inv_sqrt2 = el::<E>(std::f64::consts::FRAC_1_SQRT_2);
        let data: Vec<E> = self
            .data(a.0)
            .iter()
            .map(|&x| half * x * (E::one() + (x * inv_sqrt2).erf()))
            .collect();
        let needs = self.needs(&[a.0]);
        self.push(Tensor { shape, data }, needs, Op::Gelu { a: a.0 })
    }

    // ---- linear algebra --------------------------------------------------

    /// Batched matrix product. `a` is `[.., m, k]`; `b` is `[k, n]`
    /// (broadcast over the batch) or `[.., k, n]` with identical batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a.0).to_vec();
        let sb = self.shape(b.0).to_vec();
        let (m, k, n, batch, b_batched) = matmul_dims(&sa, &sb)?;
        let a_data = self.data(a.0);
        let b_data = self.data(b.0);
        let mut out = vec![E::zero(); batch * m * n];
        for t in 0..batch {
            let a_off = t * m * k;
            let b_off = if b_batched { t * k * n } else { 0 };
            matmul2d(
                &a_data[a_off..a_off + m * k],
                &b_data[b_off..b_off + k * n],
                m,
                k,
                n,
                &mut out[t * m * n..(t + 1) * m * n],
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(
            Tensor { shape, data: out },
            needs,
            Op::MatMul { a: a.0, b: b.0 },
        ))
    }

    /// Swap two axes.
    pub fn transpose(&mut self, a: Var, ax0: usize, ax1: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a.0).to_vec();
        let rank = shape.len();
        for &ax in &[ax0, ax1] {
            if ax >= rank {
                return Err(TensorError::AxisOutOfRange {
                    op: "transpose",
                    axis: ax,
                    rank,
                });
            }
        }
        let out = transpose_data(&self.nodes[a.0].value, ax0, ax1);
        let needs = self.needs(&[a.0]);
        Ok(self.push(out, needs, Op::Transpose { a: a.0, ax0, ax1 }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].value.numel() {
            return Err(TensorError::ShapeDataMismatch {
                shape: shape.to_vec(),
                expected: numel,
                actual: self.nodes[a.0].value.numel(),
            });
        }
        let data = self.data(a.0).to_vec();
        let needs = self.needs(&[a.0]);
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            needs,
            Op::Reshape { a: a.0 },
        ))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyConcat);
        }
        let first = self.shape(parts[0].0).to_vec();
        let rank = first.len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                rank,
            });
        }
        let mut axis_total = 0;
        for p in parts {
            let s = self.shape(p.0);
            if s.len() != rank
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![E::zero(); outer * axis_total * inner];
        let mut offset = 0;
        for p in parts {
            let extent = self.shape(p.0)[axis];
            let src = self.data(p.0);
            for o in 0..outer {
                let dst_start = (o * axis_total + offset) * inner;
                let src_start = o * extent * inner;
                data[dst_start..dst_start + extent * inner]
                    .copy_from_slice(&src[src_start..src_start + extent * inner]);
            }
            offset += extent;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let needs = self.needs(&ids);
        Ok(self.push(
            Tensor { shape, data },
            needs,
            Op::Concat { parts: ids, axis },
        ))
    }

    /// Gather slices along `axis` in the given index order. Also serves as
    /// embedding lookup (`axis = 0` on the table). Indices may repeat.
    pub fn index_select(
        &mut self,
        a: Var,
        axis: usize,
        indices: &[usize],
    ) -> Result<Var, TensorError> {
        let shape = self.shape(a.0).to_vec();
        let rank = shape.len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange {
                op: "index_select",
                axis,
                rank,
            });
        }
        let extent = shape[axis];
        for &i in indices {
            if i >= extent {
                return Err(TensorError::IndexOutOfBounds {
                    op: "index_select",
                    index: i,
                    extent,
                });
            }
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(a.0);
        let mut data = vec![E::zero(); outer * indices.len() * inner];
        for o in 0..outer {
            for (j, &idx) in indices.iter().enumerate() {
                let dst = (o * indices.len() + j) * inner;
                let s = (o * extent + idx) * inner;
                data[dst..dst + inner].copy_from_slice(&src[s..s + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let needs = self.needs(&[a.0]);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            needs,
            Op::IndexSelect {
                a: a.0,
                axis,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Copy of `base` with row `indices[j]` replaced by `rows[j]`.
    /// Indices must be unique; rows index the first axis.
    pub fn scatter_rows(
        &mut self,
        base: Var,
        indices: &[usize],
        rows: Var,
    ) -> Result<Var, TensorError> {
        let sb = self.shape(base.0).to_vec();
        let sr = self.shape(rows.0).to_vec();
        if sb.is_empty() || sr.is_empty() || sb[1..] != sr[1..] || sr[0] != indices.len() {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_rows",
                lhs: sb,
                rhs: sr,
            });
        }
        let mut seen = vec![false; sb[0]];
        for &i in indices {
            if i >= sb[0] {
                return Err(TensorError::IndexOutOfBounds {
                    op: "scatter_rows",
                    index: i,
                    extent: sb[0],
                });
            }
            if seen[i] {
                return Err(TensorError::DuplicateIndex {
                    op: "scatter_rows",
                    index: i,
                });
            }
            seen[i] = true;
        }
        let inner: usize = sb[1..].iter().product();
        let mut data = self.data(base.0).to_vec();
        let rows_data = self.data(rows.0);
        for (j, &idx) in indices.iter().enumerate() {
            data[idx * inner..(idx + 1) * inner]
                .copy_from_slice(&rows_data[j * inner..(j + 1) * inner]);
        }
        let needs = self.needs(&[base.0, rows.0]);
        Ok(self.push(
            Tensor { shape: sb, data },
            needs,
            Op::ScatterRows {
                base: base.0,
                rows: rows.0,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Per-row column gather: from `[r, c]` take `out[r] = a[r, indices[r]]`.
    pub fn pick(&mut self, a: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a.0).to_vec();
        if shape.len() != 2 || shape[0] != indices.len() {
            return Err(TensorError::InvalidShape {
                op: "pick",
                shape,
                reason: format!("expected [r, c] with r == {}", indices.len()),
            });
        }
        let cols = shape[1];
        for &i in indices {
            if i >= cols {
                return Err(TensorError::IndexOutOfBounds {
                    op: "pick",
                    index: i,
                    extent: cols,
                });
            }
        }
        let src = self.data(a.0);
        let data: Vec<E> = indices
            .iter()
            .enumerate()
            .map(|(r, &c)| src[r * cols + c])
            .collect();
        let needs = self.needs(&[a.0]);
        Ok(self.push(
            Tensor {
                shape: vec![indices.len()],
                data,
            },
            needs,
            Op::Pick {
                a: a.0,
                indices: indices.to_vec(),
            },
        ))
    }

    // ---- normalization / nonlinearity over the last axis -----------------

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let shape = self.shape(a.0).to_vec();
        let d = last_dim("softmax", &shape)?;
        let mut data = self.data(a.0).to_vec();
        for slice in data.chunks_mut(d) {
            let max = slice.iter().cloned().fold(E::neg_infinity(), E::max);
            let mut sum = E::zero();
            for x in slice.iter_mut() {
                *x = (*x - max).exp();
                sum = sum + *x;
            }
            for x in slice.iter_mut() {
                *x = *x / sum;
            }
        }
        let needs = self.needs(&[a.0]);
        Ok(self.push(Tensor { shape, data }, needs, Op::Softmax { a: a.0 }))
    }

    /// Log-softmax over the last axis via the log-sum-exp trick.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let shape = self.shape(a.0).to_vec();
        let d = last_dim("log_softmax", &shape)?;
        let mut data = self.data(a.0).to_vec();
        for slice in data.chunks_mut(d) {
            let max = slice.iter().cloned().fold(E::neg_infinity(), E::max);
            let mut sum = E::zero();
            for &x in slice.iter() {
                sum = sum + (x - max).exp();
            }
            let lse = max + sum.ln();
            for x in slice.iter_mut() {
                *x = *x - lse;
            }
        }
        let needs = self.needs(&[a.0]);
        Ok(self.push(Tensor { shape, data }, needs, Op::LogSoftmax { a: a.0 }))
    }

    /// Layer norm over the last axis: population mean/variance, `eps` added
    /// to the variance, then the affine `gain * xhat + bias`.
    pub fn layer_norm(
        &mut self,
        a: Var,
        gain: Var,
        bias: Var,
        eps: E,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(a.0).to_vec();
        let d = last_dim("layer_norm", &shape)?;
        for v in [gain, bias] {
            if self.shape(v.0) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape,
                    rhs: self.shape(v.0).to_vec(),
                });
            }
        }
        let dn = el::<E>(d as f64);
        let mut data = self.data(a.0).to_vec();
        let gain_d = self.data(gain.0).to_vec();
        let bias_d = self.data(bias.0).to_vec();
        for slice in data.chunks_mut(d) {
            let mean = slice.iter().fold(E::zero(), |s, &x| s + x) / dn;
            let var = slice
                .iter()
                .fold(E::zero(), |s, &x| s + (x - mean) * (x - mean))
                / dn;
            let inv_std = E::one() / (var + eps).sqrt();
            for (x, (&g, &b)) in slice.iter_mut().zip(gain_d.iter().zip(&bias_d)) {
                *x = (*x - mean) * inv_std * g + b;
            }
        }
        let needs = self.needs(&[a.0, gain.0, bias.0]);
        Ok(self.push(
            Tensor { shape, data },
            needs,
            Op::LayerNorm {
                a: a.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
        ))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.data(a.0).iter().fold(E::zero(), |s, &x| s + x);
        let needs = self.needs(&[a.0]);
        self.push(Tensor::scalar(total), needs, Op::Sum { a: a.0 })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel().max(1);
        let total = self.data(a.0).iter().fold(E::zero(), |s, &x| s + x);
        let needs = self.needs(&[a.0]);
        self.push(
            Tensor::scalar(total / el(n as f64)),
            needs,
            Op::Mean { a: a.0 },
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss. Populates `grad` on every node that
    /// needs one; gradients of a tensor feeding several consumers accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardWithoutReset);
        }
        let loss_shape = self.shape(loss.0);
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss_shape.to_vec(),
            });
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![E::one()]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let grad = self.nodes[i].grad.as_ref().unwrap().clone();
            self.backprop_node(i, &grad);
        }
        Ok(())
    }

    /// Drop all gradients and re-arm backward (for inspection workflows;
    /// training builds a fresh tape per step instead).
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    fn accumulate(&mut self, id: usize, contribution: &[E]) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let numel = self.nodes[id].value.numel();
        let grad = self.nodes[id].grad.get_or_insert_with(|| vec![E::zero(); numel]);
        for (g, &c) in grad.iter_mut().zip(contribution) {
            *g = *g + c;
        }
    }

    fn backprop_node(&mut self, i: usize, grad: &[E]) {
        // Ops that need no saved-state borrow handle their own accumulate calls.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, grad);
                let bn = self.nodes[b].value.numel();
                if self.nodes[b].needs_grad {
                    let mut gb = vec![E::zero(); bn];
                    for (i, &g) in grad.iter().enumerate() {
                        gb[i % bn] = gb[i % bn] + g;
                    }
                    self.accumulate(b, &gb);
                }
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, grad);
                if self.nodes[b].needs_grad {
                    let neg: Vec<E> = grad.iter().map(|&g| -g).collect();
                    self.accumulate(b, &neg);
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.nodes[a].needs_grad {
                    let ga: Vec<E> = grad
                        .iter()
                        .zip(self.data(b))
                        .map(|(&g, &y)| g * y)
                        .collect();
                    self.accumulate(a, &ga);
                }
                if self.nodes[b].needs_grad {
                    let gb: Vec<E> = grad
                        .iter()
                        .zip(self.data(a))
                        .map(|(&g, &x)| g * x)
                        .collect();
                    self.accumulate(b, &gb);
                }
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                let ga: Vec<E> = grad.iter().map(|&g| g * c).collect();
                self.accumulate(a, &ga);
            }
            Op::AddScalar { a } => {
                let a = *a;
                self.accumulate(a, grad);
            }
            Op::Abs { a } => {
                let a = *a;
                let ga: Vec<E> = grad
                    .iter()
                    .zip(self.data(a))
                    .map(|(&g, &x)| {
                        if x > E::zero() {
                            g
                        } else if x < E::zero() {
                            -g
                        } else {
                            E::zero()
                        }
                    })
                    .collect();
                self.accumulate(a, &ga);
            }
            Op::Gelu { a } => {
                let a = *a;
                let half = el::<E>(0.5);
                let inv_sqrt2 = el::<E>(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_tau = el::<E>(1.0 / std::f64::consts::TAU.sqrt());
                let ga: Vec<E> = grad
                    .iter()
                    .zip(self.data(a))
                    .map(|(&g, &x)| {
                        let cdf = half * (E::one() + (x * inv_sqrt2).erf());
                        let pdf = inv_sqrt_tau * (-half * x * x).exp();
                        g * (cdf + x * pdf)
                    })
                    .collect();
                self.accumulate(a, &ga);
            }
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let (m, k, n, batch, b_batched) = matmul_dims(&sa, &sb).expect("checked forward");
                if self.nodes[a].needs_grad {
                    // dA = dC . B^T, batch by batch
                    let mut ga = vec![E::zero(); batch * m * k];
                    for t in 0..batch {
                        let b_off = if b_batched { t * k * n } else { 0 };
                        let bt = transpose2d(&self.data(b)[b_off..b_off + k * n], k, n);
                        matmul2d(
                            &grad[t * m * n..(t + 1) * m * n],
                            &bt,
                            m,
                            n,
                            k,
                            &mut ga[t * m * k..(t + 1) * m * k],
                        );
                    }
                    self.accumulate(a, &ga);
                }
                if self.nodes[b].needs_grad {
                    // dB = A^T . dC; broadcast b sums over the batch
                    let gb_len = if b_batched { batch * k * n } else { k * n };
                    let mut gb = vec![E::zero(); gb_len];
                    for t in 0..batch {
                        let at = transpose2d(&self.data(a)[t * m * k..(t + 1) * m * k], m, k);
                        let off = if b_batched { t * k * n } else { 0 };
                        matmul2d(
                            &at,
                            &grad[t * m * n..(t + 1) * m * n],
                            k,
                            m,
                            n,
                            &mut gb[off..off + k * n],
                        );
                    }
                    self.accumulate(b, &gb);
                }
            }
            Op::Transpose { a, ax0, ax1 } => {
                let (a, ax0, ax1) = (*a, *ax0, *ax1);
                let g = Tensor {
                    shape: self.shape(i).to_vec(),
                    data: grad.to_vec(),
                };
                let back = transpose_data(&g, ax0, ax1);
                self.accumulate(a, &back.data);
            }
            Op::Reshape { a } => {
                let a = *a;
                self.accumulate(a, grad);
            }
            Op::Concat { parts, axis } => {
                let parts = parts.clone();
                let axis = *axis;
                let out_shape = self.shape(i).to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let axis_total = out_shape[axis];
                let mut offset = 0;
                for p in parts {
                    let extent = self.shape(p)[axis];
                    if self.nodes[p].needs_grad {
                        let mut gp = vec![E::zero(); outer * extent * inner];
                        for o in 0..outer {
                            let src = (o * axis_total + offset) * inner;
                            let dst = o * extent * inner;
                            gp[dst..dst + extent * inner]
                                .copy_from_slice(&grad[src..src + extent * inner]);
                        }
                        self.accumulate(p, &gp);
                    }
                    offset += extent;
                }
            }
            Op::IndexSelect { a, axis, indices } => {
                let a = *a;
                let axis = *axis;
                let indices = indices.clone();
                if self.nodes[a].needs_grad {
                    let src_shape = self.shape(a).to_vec();
                    let extent = src_shape[axis];
                    let outer: usize = src_shape[..axis].iter().product();
                    let inner: usize = src_shape[axis + 1..].iter().product();
                    let mut ga = vec![E::zero(); self.nodes[a].value.numel()];
                    for o in 0..outer {
                        for (j, &idx) in indices.iter().enumerate() {
                            let src = (o * indices.len() + j) * inner;
                            let dst = (o * extent + idx) * inner;
                            for t in 0..inner {
                                ga[dst + t] = ga[dst + t] + grad[src + t];
                            }
                        }
                    }
                    self.accumulate(a, &ga);
                }
            }
            Op::ScatterRows { base, rows, indices } => {
                let (base, rows) = (*base, *rows);
                let indices = indices.clone();
                let inner: usize = self.shape(i)[1..].iter().product();
                if self.nodes[rows].needs_grad {
                    let mut gr = vec![E::zero(); indices.len() * inner];
                    for (j, &idx) in indices.iter().enumerate() {
                        gr[j * inner..(j + 1) * inner]
                            .copy_from_slice(&grad[idx * inner..(idx + 1) * inner]);
                    }
                    self.accumulate(rows, &gr);
                }
                if self.nodes[base].needs_grad {
                    let mut gb = grad.to_vec();
                    for &idx in &indices {
                        for t in 0..inner {
                            gb[idx * inner + t] = E::zero();
                        }
                    }
                    self.accumulate(base, &gb);
                }
            }
            Op::Pick { a, indices } => {
                let a = *a;
                let indices = indices.clone();
                if self.nodes[a].needs_grad {
                    let cols = self.shape(a)[1];
                    let mut ga = vec![E::zero(); self.nodes[a].value.numel()];
                    for (r, &c) in indices.iter().enumerate() {
                        ga[r * cols + c] = grad[r];
                    }
                    self.accumulate(a, &ga);
                }
            }
            Op::Softmax { a } => {
                let a = *a;
                let d = *self.shape(i).last().unwrap();
                let out = self.data(i).to_vec();
                let mut ga = vec![E::zero(); out.len()];
                for (slice, (gs, gos)) in out
                    .chunks(d)
                    .zip(grad.chunks(d).zip(ga.chunks_mut(d)))
                {
                    let dot = slice
                        .iter()
                        .zip(gs)
                        .fold(E::zero(), |s, (&y, &g)| s + y * g);
                    for ((&y, &g), go) in slice.iter().zip(gs).zip(gos.iter_mut()) {
                        *go = y * (g - dot);
                    }
                }
                self.accumulate(a, &ga);
            }
            Op::LogSoftmax { a } => {
                let a = *a;
                let d = *self.shape(i).last().unwrap();
                let out = self.data(i).to_vec();
                let mut ga = vec![E::zero(); out.len()];
                for (slice, (gs, gos)) in out
                    .chunks(d)
                    .zip(grad.chunks(d).zip(ga.chunks_mut(d)))
                {
                    let gsum = gs.iter().fold(E::zero(), |s, &g| s + g);
                    for ((&ls, &g), go) in slice.iter().zip(gs).zip(gos.iter_mut()) {
                        *go = g - ls.exp() * gsum;
                    }
                }
                self.accumulate(a, &ga);
            }
            Op::LayerNorm { a, gain, bias, eps } => {
                let (a, gain, bias, eps) = (*a, *gain, *bias, *eps);
                let d = *self.shape(i).last().unwrap();
                let dn = el::<E>(d as f64);
                let x = self.data(a).to_vec();
                let g_gain = self.data(gain).to_vec();
                let mut ga = vec![E::zero(); x.len()];
                let mut ggain = vec![E::zero(); d];
                let mut gbias = vec![E::zero(); d];
                for (xs, (gs, gas)) in x
                    .chunks(d)
                    .zip(grad.chunks(d).zip(ga.chunks_mut(d)))
                {
                    let mean = xs.iter().fold(E::zero(), |s, &v| s + v) / dn;
                    let var = xs
                        .iter()
                        .fold(E::zero(), |s, &v| s + (v - mean) * (v - mean))
                        / dn;
                    let inv_std = E::one() / (var + eps).sqrt();
                    let xhat: Vec<E> = xs.iter().map(|&v| (v - mean) * inv_std).collect();
                    let dxhat: Vec<E> = gs
                        .iter()
                        .zip(&g_gain)
                        .map(|(&g, &gn)| g * gn)
                        .collect();
                    for j in 0..d {
                        ggain[j] = ggain[j] + gs[j] * xhat[j];
                        gbias[j] = gbias[j] + gs[j];
                    }
                    let sum_dxhat = dxhat.iter().fold(E::zero(), |s, &v| s + v);
                    let sum_dxhat_xhat = dxhat
                        .iter()
                        .zip(&xhat)
                        .fold(E::zero(), |s, (&dv, &xv)| s + dv * xv);
                    for j in 0..d {
                        gas[j] = inv_std / dn * (dn * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                self.accumulate(a, &ga);
                self.accumulate(gain, &ggain);
                self.accumulate(bias, &gbias);
            }
            Op::Sum { a } => {
                let a = *a;
                if self.nodes[a].needs_grad {
                    let ga = vec![grad[0]; self.nodes[a].value.numel()];
                    self.accumulate(a, &ga);
                }
            }
            Op::Mean { a } => {
                let a = *a;
                if self.nodes[a].needs_grad {
                    let n = self.nodes[a].value.numel();
                    let ga = vec![grad[0] / el(n as f64); n];
                    self.accumulate(a, &ga);
                }
            }
        }
    }
}

fn last_dim(op: &'static str, shape: &[usize]) -> Result<usize, TensorError> {
    match shape.last() {
        Some(&d) if d >= 1 => Ok(d),
        _ => Err(TensorError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "needs a non-empty last axis".into(),
        }),
    }
}

/// `b` equals `a` or is a trailing suffix of it.
fn is_suffix(b: &[usize], a: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

/// Validate matmul shapes; returns (m, k, n, batch, b_is_batched).
fn matmul_dims(
    sa: &[usize],
    sb: &[usize],
) -> Result<(usize, usize, usize, usize, bool), TensorError> {
    let err = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: sa.to_vec(),
        rhs: sb.to_vec(),
    };
    if sa.len() < 2 || sb.len() < 2 {
        return Err(err());
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != kb {
        return Err(err());
    }
    let batch: usize = sa[..sa.len() - 2].iter().product();
    let b_batched = sb.len() > 2;
    if b_batched && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
        return Err(err());
    }
    Ok((m, k, n, batch, b_batched))
}

/// C += A.B with A [m,k], B [k,n]; `out` must be zeroed by the caller.
fn matmul2d<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

fn transpose2d<E: Scalar>(a: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn transpose_data<E: Scalar>(t: &Tensor<E>, ax0: usize, ax1: usize) -> Tensor<E> {
    if ax0 == ax1 {
        return t.clone();
    }
    let rank = t.shape.len();
    let mut out_shape = t.shape.clone();
    out_shape.swap(ax0, ax1);

    let in_strides = row_major_strides(&t.shape);
    let out_strides = row_major_strides(&out_shape);
    let mut data = vec![E::zero(); t.data.len()];
    let mut coords = vec![0usize; rank];
    for (flat, &v) in t.data.iter().enumerate() {
        let mut rem = flat;
        for d in 0..rank {
            coords[d] = rem / in_strides[d];
            rem %= in_strides[d];
        }
        coords.swap(ax0, ax1);
        let mut out_idx = 0;
        for d in 0..rank {
            out_idx += coords[d] * out_strides[d];
        }
        data[out_idx] = v;
    }
    Tensor {
        shape: out_shape,
        data,
    }
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};

    fn t64(shape: &[usize], values: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, values).unwrap()
    }

    #[test]
    fn tensor_rejects_shape_data_mismatch() {
        let err = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeDataMismatch { .. }));
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_oracle() {
        // [[1,2],[3,4]] . [[5,6],[7,8]] = [[19,22],[43,50]]
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_batched_matches_per_slice() {
        let mut rng = crate::rng::Rng::from_seed(1);
        let a_data: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.normal()).collect();
        let b_data: Vec<f64> = (0..2 * 4 * 2).map(|_| rng.normal()).collect();
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t64(&[2, 3, 4], &a_data));
        let b = tape.constant(t64(&[2, 4, 2], &b_data));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 3, 2]);
        for t in 0..2 {
            let mut tape2 = Tape::<f64>::new();
            let a2 = tape2.constant(t64(&[3, 4], &a_data[t * 12..(t + 1) * 12]));
            let b2 = tape2.constant(t64(&[4, 2], &b_data[t * 8..(t + 1) * 8]));
            let c2 = tape2.matmul(a2, b2).unwrap();
            assert_eq!(
                &tape.value(c).data()[t * 6..(t + 1) * 6],
                tape2.value(c2).data()
            );
        }
    }

    /// Oracle harness: checks every requires_grad leaf of `build` against
    /// central finite differences in f64.
    fn check_grads<F>(build: F, leaves: &[(&[usize], Vec<f64>)], tol: f64)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = leaves
            .iter()
            .map(|(shape, data)| tape.leaf(t64(shape, data), true))
            .collect();
        let loss = build(&mut tape, &vars);
        tape.backward(loss).unwrap();

        for (li, (shape, data)) in leaves.iter().enumerate() {
            let analytic = tape.grad(vars[li]).expect("leaf grad").to_f64_vec();
            let numeric = central_diff(
                |perturbed| {
                    let mut t2 = Tape::<f64>::new();
                    let vars2: Vec<Var> = leaves
                        .iter()
                        .enumerate()
                        .map(|(j, (s, d))| {
                            let vals = if j == li { perturbed } else { d.as_slice() };
                            t2.leaf(t64(s, vals), false)
                        })
                        .collect();
                    let l = build(&mut t2, &vars2);
                    t2.value(l).item()
                },
                data,
                1e-4,
            );
            let err = max_rel_err(&analytic, &numeric);
            assert!(
                err < tol,
                "leaf {li} shape {shape:?}: rel err {err}\n analytic {analytic:?}\n numeric {numeric:?}"
            );
        }
    }

    fn randoms(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::rng::Rng::from_seed(seed);
        (0..n).map(|_| rng.normal()).collect()
    }

    #[test]
    fn grad_matmul_matches_finite_differences() {
        check_grads(
            |t, v| {
                let c = t.matmul(v[0], v[1]).unwrap();
                t.sum(c)
            },
            &[(&[3, 3], randoms(9, 2)), (&[3, 3], randoms(9, 3))],
            1e-5,
        );
    }

    #[test]
    fn grad_batched_matmul_broadcast_rhs() {
        check_grads(
            |t, v| {
                let c = t.matmul(v[0], v[1]).unwrap();
                let s = t.gelu(c);
                t.sum(s)
            },
            &[(&[2, 2, 3], randoms(12, 4)), (&[3, 2], randoms(6, 5))],
            1e-5,
        );
    }

    #[test]
    fn softmax_uniform_and_overflow() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t64(&[4], &[0.0; 4]));
        let s = tape.softmax(a).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        let b = tape.constant(t64(&[2], &[1000.0, 0.0]));
        let s2 = tape.softmax(b).unwrap();
        let out = tape.value(s2).data();
        assert!(out[0].is_finite() && (out[0] - 1.0).abs() < 1e-12);
        assert!(out[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad_checks() {
        let data = randoms(10, 7);
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t64(&[2, 5], &data));
        let s = tape.softmax(a).unwrap();
        for row in tape.value(s).data().chunks(5) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        check_grads(
            |t, v| {
                let s = t.softmax(v[0]).unwrap();
                let w = t.constant(t64(&[5], &randoms(5, 8)));
                let p = t.mul(s, w).unwrap();
                t.sum(p)
            },
            &[(&[5], data[..5].to_vec())],
            1e-5,
        );
    }

    #[test]
    fn layer_norm_zero_variance_and_standardized() {
        let mut tape = Tape::<f64>::new();
        let gain = tape.constant(t64(&[4], &[1.0; 4]));
        let bias = tape.constant(t64(&[4], &[0.0; 4]));
        let x = tape.constant(t64(&[4], &[5.0; 4]));
        let y = tape.layer_norm(x, gain, bias, 1e-6).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
        // [1,-1] is already mean 0 / var 1; eps -> 0 keeps it fixed
        let gain2 = tape.constant(t64(&[2], &[1.0; 2]));
        let bias2 = tape.constant(t64(&[2], &[0.0; 2]));
        let x2 = tape.constant(t64(&[2], &[1.0, -1.0]));
        let y2 = tape.layer_norm(x2, gain2, bias2, 1e-12).unwrap();
        let out = tape.value(y2).data();
        assert!((out[0] - 1.0).abs() < 1e-6 && (out[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_slices_standardized_and_grads_check() {
        let data = randoms(16, 9);
        let mut tape = Tape::<f64>::new();
        let gain = tape.constant(t64(&[8], &[1.0; 8]));
        let bias = tape.constant(t64(&[8], &[0.0; 8]));
        let x = tape.constant(t64(&[2, 8], &data));
        let y = tape.layer_norm(x, gain, bias, 1e-6).unwrap();
        for slice in tape.value(y).data().chunks(8) {
            let mean: f64 = slice.iter().sum::<f64>() / 8.0;
            let var: f64 = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
        check_grads(
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-6).unwrap();
                let w = t.constant(t64(&[8], &randoms(8, 10)));
                let p = t.mul(y, w).unwrap();
                t.sum(p)
            },
            &[
                (&[8], data[..8].to_vec()),
                (&[8], randoms(8, 11)),
                (&[8], randoms(8, 12)),
            ],
            1e-5,
        );
    }

    #[test]
    fn gelu_values_and_grads() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[3], &[0.0, 10.0, -10.0]));
        let y = tape.gelu(x);
        let out = tape.value(y).data();
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 10.0).abs() < 1e-6);
        assert!(out[2].abs() < 1e-6);
        check_grads(
            |t, v| {
                let y = t.gelu(v[0]);
                t.sum(y)
            },
            &[(&[4], vec![-2.0, -0.5, 0.5, 2.0])],
            1e-5,
        );
    }

    #[test]
    fn grad_of_shared_tensor_sums_both_uses() {
        // loss = sum(x * x) + sum(x): x feeds three consumers overall
        check_grads(
            |t, v| {
                let sq = t.mul(v[0], v[0]).unwrap();
                let s1 = t.sum(sq);
                let s2 = t.sum(v[0]);
                t.add(s1, s2).unwrap()
            },
            &[(&[5], randoms(5, 13))],
            1e-5,
        );
        // analytic spot check: d/dx (x^2 + x) = 2x + 1 at x = 3 is 7
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.add(sq, x).unwrap();
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 7.0);
    }

    #[test]
    fn backward_analytic_cases() {
        // loss = x^2 at x = 3 -> grad 6
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 6.0);

        // loss = sum(x) -> all-ones
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[4], &[1.0, 2.0, 3.0, 4.0]), true);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_contract_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]), true);
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));

        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        let err = tape.backward(loss).unwrap_err();
        assert!(matches!(err, TensorError::BackwardWithoutReset));
        tape.reset_grads();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn grad_index_select_scatter_pick_concat() {
        check_grads(
            |t, v| {
                let picked = t.index_select(v[0], 0, &[2, 0, 2]).unwrap();
                t.sum(picked)
            },
            &[(&[3, 2], randoms(6, 14))],
            1e-5,
        );
        check_grads(
            |t, v| {
                let scattered = t.scatter_rows(v[0], &[1, 3], v[1]).unwrap();
                let sq = t.mul(scattered, scattered).unwrap();
                t.sum(sq)
            },
            &[(&[4, 2], randoms(8, 15)), (&[2, 2], randoms(4, 16))],
            1e-5,
        );
        check_grads(
            |t, v| {
                let ls = t.log_softmax(v[0]).unwrap();
                let picked = t.pick(ls, &[1, 0]).unwrap();
                let m = t.mean(picked);
                t.scale(m, -1.0)
            },
            &[(&[2, 3], randoms(6, 17))],
            1e-5,
        );
        check_grads(
            |t, v| {
                let c = t.concat(&[v[0], v[1]], 1).unwrap();
                let g = t.gelu(c);
                t.mean(g)
            },
            &[(&[2, 2], randoms(4, 18)), (&[2, 3], randoms(6, 19))],
            1e-5,
        );
    }

    #[test]
    fn grad_elementwise_and_transpose_and_reshape() {
        check_grads(
            |t, v| {
                let a = t.add(v[0], v[1]).unwrap();
                let b = t.sub(a, v[2]).unwrap();
                let c = t.mul(b, b).unwrap();
                let d = t.scale(c, 0.5);
                let e = t.add_scalar(d, 1.0);
                let f = t.abs(e);
                t.mean(f)
            },
            &[
                (&[2, 3], randoms(6, 20)),
                (&[3], randoms(3, 21)),
                (&[2, 3], randoms(6, 22)),
            ],
            1e-5,
        );
        check_grads(
            |t, v| {
                let tr = t.transpose(v[0], 0, 2).unwrap();
                let rs = t.reshape(tr, &[4, 3]).unwrap();
                let sq = t.mul(rs, rs).unwrap();
                t.sum(sq)
            },
            &[(&[3, 2, 2], randoms(12, 23))],
            1e-5,
        );
    }

    #[test]
    fn transpose_transpose_is_identity() {
        let data = randoms(24, 24);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[2, 3, 4], &data));
        let t1 = tape.transpose(x, 0, 2).unwrap();
        let t2 = tape.transpose(t1, 0, 2).unwrap();
        assert_eq!(tape.value(t2).data(), tape.value(x).data());
        assert_eq!(tape.value(t1).shape(), &[4, 3, 2]);
    }

    #[test]
    fn scatter_rows_rejects_duplicates_and_oob() {
        let mut tape = Tape::<f64>::new();
        let base = tape.constant(Tensor::zeros(&[4, 2]));
        let rows = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            tape.scatter_rows(base, &[1, 1], rows).unwrap_err(),
            TensorError::DuplicateIndex { .. }
        ));
        assert!(matches!(
            tape.scatter_rows(base, &[1, 7], rows).unwrap_err(),
            TensorError::IndexOutOfBounds { .. }
        ));
    }

    #[test]
    fn ops_are_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let a = tape.constant(Tensor::from_f64(&[4, 4], &randoms(16, 25)).unwrap());
            let b = tape.constant(Tensor::from_f64(&[4, 4], &randoms(16, 26)).unwrap());
            let c = tape.matmul(a, b).unwrap();
            let s = tape.softmax(c).unwrap();
            let g = tape.gelu(s);
            tape.value(g).data().to_vec()
        };
        let x = run();
        let y = run();
        assert_eq!(x, y, "identical inputs must give bit-identical outputs");
    }
}
