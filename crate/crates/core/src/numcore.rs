//! Dense tensors and a tape for reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! creation order, which is already a topological order. [`Graph::backward`]
//! walks that list once in reverse and accumulates gradients for every node
//! that transitively depends on a leaf created with `requires_grad = true`.
//!
//! Broadcasting is limited to a *suffix* rule: for binary elementwise ops the
//! right operand may have a shape equal to a trailing part of the left
//! operand's shape (a bias `[n]` against `[m, n]`, a positional table `[L, h]`
//! against `[B, L, h]`). Matmul accepts `[m,k]x[k,n]`, `[B,m,k]x[k,n]` and
//! `[B,m,k]x[B,k,n]`.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: index {index} out of range for bound {bound}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: invalid axis {axis} for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("backward already ran on this graph")]
    BackwardTwice,
    #[error("nothing recorded: loss does not depend on any tensor that requires grad")]
    EmptyGraph,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Element type of a tensor. Training runs in `f32`; `f64` exists so the
/// same op code can be checked against finite differences without f32
/// rounding dominating the comparison.
pub trait Real:
    num_traits::Float + std::iter::Sum + std::fmt::Debug + Default + Send + Sync + 'static
{
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn lit(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).unwrap()
    }

    fn as_f64(self) -> f64 {
        <Self as num_traits::ToPrimitive>::to_f64(&self).unwrap()
    }
}

fn strides(m: usize, k: usize, n: usize, a_t: bool, b_t: bool) -> [isize; 4] {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    [rsa, csa, rsb, csb]
}

// `c (+)= op(a) * op(b)` with `op(a)` logically `[m,k]` and `op(b)` logically `[k,n]`.
// SAFETY (both impls): callers pass slices covering the strided extents.
impl Real for f32 {
    fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, c: &mut [f32], accumulate: bool) {
        let [rsa, csa, rsb, csb] = strides(m, k, n, a_t, b_t);
        let beta = if accumulate { 1.0 } else { 0.0 };
        unsafe {
            matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
        }
    }
}

impl Real for f64 {
    fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], accumulate: bool) {
        let [rsa, csa, rsb, csb] = strides(m, k, n, a_t, b_t);
        let beta = if accumulate { 1.0 } else { 0.0 };
        unsafe {
            matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
        }
    }
}

/// Row-major dense tensor. `f32` unless stated otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || numel(&shape) != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0));
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: T, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = rng.sample(StandardNormal);
            T::lit(z) * std
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.is_empty() || numel(shape) != self.data.len() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Indices `[start, end)` along the first axis.
    pub fn rows(&self, start: usize, end: usize) -> Result<Self> {
        slice_axis(self, 0, start, end)
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64().powi(2)).sum()
    }

    pub fn l2_distance(&self, other: &Self) -> Result<f64> {
        check_same("l2_distance", self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum::<f64>()
            .sqrt())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        check_same("max_abs_diff", self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Elementwise map into a new tensor of the same shape.
    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        check_same("zip_map", self, other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_same<T>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

/// Concatenate along `axis`; all other dims must agree.
pub fn concat_axis<T: Real>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or(TensorError::InvalidShape {
        shape: vec![0],
        len: 0,
    })?;
    let rank = first.shape.len();
    if axis >= rank {
        return Err(TensorError::InvalidAxis {
            op: "concat",
            axis,
            rank,
        });
    }
    let mut out_shape = first.shape.clone();
    out_shape[axis] = 0;
    for p in parts {
        let compatible = p.shape.len() == rank
            && p.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                left: first.shape.clone(),
                right: p.shape.clone(),
            });
        }
        out_shape[axis] += p.shape[axis];
    }
    let outer = numel(&first.shape[..axis]);
    let inner = numel(&first.shape[axis + 1..]);
    let mut data = Vec::with_capacity(numel(&out_shape));
    for o in 0..outer {
        for p in parts {
            let block = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
        }
    }
    Tensor::new(out_shape, data)
}

/// Indices `[start, end)` along `axis`.
pub fn slice_axis<T: Real>(a: &Tensor<T>, axis: usize, start: usize, end: usize) -> Result<Tensor<T>> {
    let rank = a.shape.len();
    if axis >= rank {
        return Err(TensorError::InvalidAxis {
            op: "slice",
            axis,
            rank,
        });
    }
    if start >= end || end > a.shape[axis] {
        return Err(TensorError::OutOfRange {
            op: "slice",
            index: end.max(start),
            bound: a.shape[axis],
        });
    }
    let outer = numel(&a.shape[..axis]);
    let inner = numel(&a.shape[axis + 1..]);
    let span = a.shape[axis] * inner;
    let mut data = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        data.extend_from_slice(&a.data[o * span + start * inner..o * span + end * inner]);
    }
    let mut shape = a.shape.clone();
    shape[axis] = end - start;
    Tensor::new(shape, data)
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, batched: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: T },
    Softmax { a: Var },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu { a: Var },
    Gather { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Sum { a: Var },
    Mean { a: Var },
    Mse { a: Var, b: Var },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Operation tape. One graph per forward/backward pass.
#[derive(Debug)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf. Rejects non-finite data.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        Ok(self.push(value, requires_grad, Op::Leaf))
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batched, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (false, vec![sa[0], sb[1]]),
            (3, 2) if sa[2] == sb[0] => (false, vec![sa[0], sa[1], sb[1]]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (true, vec![sa[0], sa[1], sb[2]]),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    left: sa,
                    right: sb,
                })
            }
        };
        let mut out = vec![T::zero(); numel(&out_shape)];
        let va = &self.nodes[a.0].value.data;
        let vb = &self.nodes[b.0].value.data;
        if batched {
            let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            for i in 0..bs {
                T::gemm(
                    m,
                    k,
                    n,
                    &va[i * m * k..(i + 1) * m * k],
                    false,
                    &vb[i * k * n..(i + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        } else {
            let k = *sa.last().unwrap();
            let m = va.len() / k;
            T::gemm(m, k, sb[1], va, false, vb, false, &mut out, false);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            rg,
            Op::MatMul { a, b, batched },
        ))
    }

    fn binary(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        if !broadcast_ok(&va.shape, &vb.shape) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: va.shape.clone(),
                right: vb.shape.clone(),
            });
        }
        let nb = vb.data.len();
        let data = va
            .data
            .chunks(nb)
            .flat_map(|chunk| chunk.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)))
            .collect();
        Ok(Tensor {
            shape: va.shape.clone(),
            data,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        if !s.is_finite() {
            return Err(TensorError::NonFinite { op: "scale" });
        }
        let t = self.nodes[a.0].value.map(|x| x * s);
        let rg = self.rg(&[a]);
        Ok(self.push(t, rg, Op::Scale { a, s }))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let n = *va.shape.last().unwrap();
        let mut data = va.data.clone();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let rg = self.rg(&[a]);
        Ok(self.push(t, rg, Op::Softmax { a }))
    }

    /// Layer norm over the last axis with affine `gamma`, `beta` of shape `[n]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let n = *vx.shape.last().unwrap();
        for p in [gamma, beta] {
            let s = self.shape(p);
            if s != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: vx.shape.clone(),
                    right: s.to_vec(),
                });
            }
        }
        let g = &self.nodes[gamma.0].value.data;
        let bt = &self.nodes[beta.0].value.data;
        let nf = T::lit(n as f64);
        let rows = vx.data.len() / n;
        let mut xhat = vec![T::zero(); vx.data.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.data.len()];
        for r in 0..rows {
            let row = &vx.data[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + bt[j];
            }
        }
        let t = Tensor {
            shape: vx.shape.clone(),
            data: out,
        };
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.nodes[a.0].value.map(gelu);
        let rg = self.rg(&[a]);
        Ok(self.push(t, rg, Op::Gelu { a }))
    }

    /// Rows of a `[V, d]` table selected by `ids`, giving `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = &self.nodes[table.0].value;
        if vt.shape.len() != 2 {
            return Err(TensorError::InvalidAxis {
                op: "gather",
                axis: 1,
                rank: vt.shape.len(),
            });
        }
        if ids.is_empty() {
            return Err(TensorError::InvalidShape {
                shape: vec![0, vt.shape[1]],
                len: 0,
            });
        }
        let (v, d) = (vt.shape[0], vt.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::OutOfRange {
                    op: "gather",
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(&vt.data[id * d..(id + 1) * d]);
        }
        let t = Tensor {
            shape: vec![ids.len(), d],
            data,
        };
        let rg = self.rg(&[table]);
        Ok(self.push(
            t,
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|v| &self.nodes[v.0].value).collect();
        let t = concat_axis(&values, axis)?;
        let rg = self.rg(parts);
        Ok(self.push(
            t,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = slice_axis(&self.nodes[a.0].value, axis, start, end)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, rg, Op::Slice { a, axis, start }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[a.0].value.clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, rg, Op::Reshape { a }))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let rank = va.shape.len();
        if perm.len() != rank {
            return Err(TensorError::InvalidAxis {
                op: "permute",
                axis: perm.len(),
                rank,
            });
        }
        let mut seen = vec![false; rank];
        for &p in perm {
            if p >= rank || seen[p] {
                return Err(TensorError::InvalidAxis {
                    op: "permute",
                    axis: p,
                    rank,
                });
            }
            seen[p] = true;
        }
        let (data, shape) = permute_data(&va.data, &va.shape, perm);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor { shape, data },
            rg,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.nodes[a.0].value.data.iter().copied().sum();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Sum { a }))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let s = va.data.iter().copied().sum::<T>() / T::lit(va.data.len() as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Mean { a }))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        check_same("mse", va, vb)?;
        let s = va
            .data
            .iter()
            .zip(&vb.data)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / T::lit(va.data.len() as f64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Mse { a, b }))
    }

    /// Mean cross-entropy of `[n, V]` logits against `n` class ids, fused with log-softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = &self.nodes[logits.0].value;
        if vl.shape.len() != 2 || vl.shape[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: vl.shape.clone(),
                right: vec![targets.len()],
            });
        }
        let v = vl.shape[1];
        let mut probs = vl.data.clone();
        let mut loss = 0.0f64;
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            if t >= v {
                return Err(TensorError::OutOfRange {
                    op: "cross_entropy",
                    index: t,
                    bound: v,
                });
            }
            let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
            let lse = row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[t].as_f64();
            softmax_in_place(row);
        }
        let value = T::lit(loss / targets.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(value),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`. Leaves that require grad but lie on
    /// no path to `loss` receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::BackwardTwice);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.data.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: lv.shape.clone(),
            });
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::EmptyGraph);
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let nodes = &self.nodes;
        let out = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &nodes[i];
                match (g, node.requires_grad, &node.op) {
                    (Some(data), _, _) => Some(Tensor {
                        shape: node.value.shape.clone(),
                        data,
                    }),
                    (None, true, Op::Leaf) => Some(Tensor::zeros(&node.value.shape)),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.data.len()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, batched } => {
                let (va, vb) = (val(*a), val(*b));
                if *batched {
                    let (bs, m, k, n) = (va.shape[0], va.shape[1], va.shape[2], vb.shape[2]);
                    acc(*a, &mut |ga| {
                        for j in 0..bs {
                            T::gemm(
                                m,
                                n,
                                k,
                                &gy[j * m * n..(j + 1) * m * n],
                                false,
                                &vb.data[j * k * n..(j + 1) * k * n],
                                true,
                                &mut ga[j * m * k..(j + 1) * m * k],
                                true,
                            );
                        }
                    });
                    acc(*b, &mut |gb| {
                        for j in 0..bs {
                            T::gemm(
                                k,
                                m,
                                n,
                                &va.data[j * m * k..(j + 1) * m * k],
                                true,
                                &gy[j * m * n..(j + 1) * m * n],
                                false,
                                &mut gb[j * k * n..(j + 1) * k * n],
                                true,
                            );
                        }
                    });
                } else {
                    let k = *va.shape.last().unwrap();
                    let m = va.data.len() / k;
                    let n = vb.shape[1];
                    acc(*a, &mut |ga| T::gemm(m, n, k, gy, false, &vb.data, true, ga, true));
                    acc(*b, &mut |gb| T::gemm(k, m, n, &va.data, true, gy, false, gb, true));
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(nodes[i].op, Op::Sub { .. }) {
                    -T::one()
                } else {
                    T::one()
                };
                acc(*a, &mut |ga| add_into(ga, gy));
                let nb = val(*b).data.len();
                acc(*b, &mut |gb| {
                    for chunk in gy.chunks(nb) {
                        for (g, &d) in gb.iter_mut().zip(chunk) {
                            *g = *g + sign * d;
                        }
                    }
                });
            }
            Op::Mul { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                let nb = vb.data.len();
                acc(*a, &mut |ga| {
                    for (j, g) in ga.iter_mut().enumerate() {
                        *g = *g + gy[j] * vb.data[j % nb];
                    }
                });
                acc(*b, &mut |gb| {
                    for (j, (&d, &x)) in gy.iter().zip(&va.data).enumerate() {
                        gb[j % nb] = gb[j % nb] + d * x;
                    }
                });
            }
            Op::Scale { a, s } => acc(*a, &mut |ga| {
                for (g, &d) in ga.iter_mut().zip(gy) {
                    *g = *g + *s * d;
                }
            }),
            Op::Softmax { a } => {
                let y = &nodes[i].value;
                let n = *y.shape.last().unwrap();
                acc(*a, &mut |ga| {
                    for ((gr, yr), dr) in ga.chunks_mut(n).zip(y.data.chunks(n)).zip(gy.chunks(n)) {
                        let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            gr[j] = gr[j] + yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let g = &val(*gamma).data;
                let n = g.len();
                let nf = T::lit(n as f64);
                acc(*x, &mut |gx| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let dy = &gy[r * n..(r + 1) * n];
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            let dxh = dy[j] * g[j];
                            s1 = s1 + dxh;
                            s2 = s2 + dxh * xh[j];
                        }
                        for j in 0..n {
                            let dxh = dy[j] * g[j];
                            gx[r * n + j] = gx[r * n + j] + rs / nf * (nf * dxh - s1 - xh[j] * s2);
                        }
                    }
                });
                acc(*gamma, &mut |gg| {
                    for (j, (&d, &h)) in gy.iter().zip(xhat.iter()).enumerate() {
                        gg[j % n] = gg[j % n] + d * h;
                    }
                });
                acc(*beta, &mut |gb| {
                    for (j, &d) in gy.iter().enumerate() {
                        gb[j % n] = gb[j % n] + d;
                    }
                });
            }
            Op::Gelu { a } => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for ((g, &d), &x) in ga.iter_mut().zip(gy).zip(&va.data) {
                        *g = *g + d * gelu_grad(x);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = val(*table).shape[1];
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &gy[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let shape0 = &val(parts[0]).shape;
                let outer = numel(&shape0[..*axis]);
                let inner = numel(&shape0[axis + 1..]);
                let total = nodes[i].value.shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let block = val(*p).shape[*axis] * inner;
                    acc(*p, &mut |gp| {
                        for o in 0..outer {
                            add_into(
                                &mut gp[o * block..(o + 1) * block],
                                &gy[o * total + offset..o * total + offset + block],
                            );
                        }
                    });
                    offset += block;
                }
            }
            Op::Slice { a, axis, start } => {
                let sa = &val(*a).shape;
                let outer = numel(&sa[..*axis]);
                let inner = numel(&sa[axis + 1..]);
                let span = sa[*axis] * inner;
                let block = nodes[i].value.shape[*axis] * inner;
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        let dst = o * span + start * inner;
                        add_into(&mut ga[dst..dst + block], &gy[o * block..(o + 1) * block]);
                    }
                });
            }
            Op::Reshape { a } => acc(*a, &mut |ga| add_into(ga, gy)),
            Op::Permute { a, perm } => {
                let mut inv = vec![0usize; perm.len()];
                for (j, &p) in perm.iter().enumerate() {
                    inv[p] = j;
                }
                let (back, _) = permute_data(gy, &nodes[i].value.shape, &inv);
                acc(*a, &mut |ga| add_into(ga, &back));
            }
            Op::Sum { a } => acc(*a, &mut |ga| ga.iter_mut().for_each(|g| *g = *g + gy[0])),
            Op::Mean { a } => {
                let n = T::lit(val(*a).data.len() as f64);
                acc(*a, &mut |ga| ga.iter_mut().for_each(|g| *g = *g + gy[0] / n));
            }
            Op::Mse { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                let c = T::lit(2.0) * gy[0] / T::lit(va.data.len() as f64);
                acc(*a, &mut |ga| {
                    for (j, g) in ga.iter_mut().enumerate() {
                        *g = *g + c * (va.data[j] - vb.data[j]);
                    }
                });
                acc(*b, &mut |gb| {
                    for (j, g) in gb.iter_mut().enumerate() {
                        *g = *g - c * (va.data[j] - vb.data[j]);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = val(*logits).shape[1];
                let c = gy[0] / T::lit(targets.len() as f64);
                acc(*logits, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gl[r * v + j] = gl[r * v + j] + c * (probs[r * v + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(0.044715);
    T::lit(0.5) * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let th = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * k * x * x)
}

/// Central finite-difference check of the gradient of a scalar function.
///
/// `f` builds the function on a fresh graph from the leaf it is handed.
/// Returns `max_i |analytic_i - fd_i| / (|analytic_i| + 1e-8)`.
/// Run it on `f64` tensors to check backward rules; in `f32` the
/// finite-difference noise (about `ulp(f)/h`) dominates small coordinates.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    if h <= T::zero() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    let mut g = Graph::new();
    let xv = g.param(x.clone())?;
    let y = f(&mut g, xv)?;
    if g.value(y).numel() != 1 {
        return Err(TensorError::NotScalar {
            shape: g.shape(y).to_vec(),
        });
    }
    let analytic = match g.backward(y) {
        Ok(grads) => grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())),
        // A loss that never touches `x` has an identically zero gradient.
        Err(TensorError::EmptyGraph) => Tensor::zeros(x.shape()),
        Err(e) => return Err(e),
    };
    let eval = |t: Tensor<T>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t)?;
        let y = f(&mut g, v)?;
        Ok(g.value(y).data()[0].as_f64())
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data[i] = plus.data[i] + h;
        let mut minus = x.clone();
        minus.data[i] = minus.data[i] - h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h.as_f64());
        let a = analytic.data[i].as_f64();
        worst = worst.max((a - fd).abs() / (a.abs() + 1e-8));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let i = g.constant(t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[3])).unwrap();
        let s = g.softmax(a).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn mse_of_self_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[4, 3], 1.0, &mut rng)).unwrap();
        let m = g.mse(x, x).unwrap();
        assert_eq!(g.value(m).item().unwrap(), 0.0);
    }

    #[test]
    fn square_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn cross_entropy_grad_closed_form() {
        let logits = t(&[1, 3], &[0.5, -1.0, 2.0]);
        let mut g = Graph::new();
        let l = g.param(logits.clone()).unwrap();
        let ce = g.cross_entropy(l, &[1]).unwrap();
        let grads = g.backward(ce).unwrap();
        let mut p = logits.data().to_vec();
        softmax_in_place(&mut p);
        p[1] -= 1.0;
        let got = grads.get(l).unwrap().data();
        for (a, b) in got.iter().zip(&p) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_twice_is_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.0)).unwrap();
        let y = g.scale(x, 2.0).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.backward(y).unwrap_err(), TensorError::BackwardTwice);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2])).unwrap();
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::NotScalar { .. })));
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.backward(c).unwrap_err(), TensorError::EmptyGraph);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn non_finite_leaf_rejected() {
        let mut g = Graph::new();
        let err = g.constant(t(&[2], &[1.0, f32::NAN])).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn dead_path_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        let unused = g.param(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let y = g.sum(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn grad_check_sum_is_exact() {
        let x = t(&[4], &[0.3, -1.0, 2.0, 5.0]);
        let err = grad_check(|g, x| g.sum(x), &x, 1e-3).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn grad_check_dead_input() {
        let x = t(&[3], &[0.3, -1.0, 2.0]);
        let err = grad_check(
            |g, _x| {
                let c = g.constant(Tensor::scalar(2.0))?;
                g.scale(c, 3.0)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_rejects_non_scalar() {
        let x = t(&[3], &[0.3, -1.0, 2.0]);
        let err = grad_check(|g, x| g.scale(x, 2.0), &x, 1e-3).unwrap_err();
        assert!(matches!(err, TensorError::NotScalar { .. }));
    }

    #[test]
    fn permute_round_trip() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f32);
        let (p, s) = permute_data(x.data(), x.shape(), &[2, 0, 1]);
        assert_eq!(s, vec![4, 2, 3]);
        // element (a,b,c) of x lands at (c,a,b)
        assert_eq!(p[(3 * 2 + 1) * 3 + 2], x.data()[(3 + 2) * 4 + 3]);
        let (back, s2) = permute_data(&p, &s, &[1, 2, 0]);
        assert_eq!(s2, vec![2, 3, 4]);
        assert_eq!(back, x.data());
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let a = Tensor::from_fn(&[2, 3, 2], |i| i as f32);
        let b = Tensor::from_fn(&[2, 1, 2], |i| 100.0 + i as f32);
        let c = concat_axis(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 4, 2]);
        assert_eq!(slice_axis(&c, 1, 0, 3).unwrap(), a);
        assert_eq!(slice_axis(&c, 1, 3, 4).unwrap(), b);
    }

    #[test]
    fn forward_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::randn(&[5, 7], 1.0, &mut rng);
        let b = Tensor::randn(&[7, 3], 1.0, &mut rng);
        let run = || {
            let mut g = Graph::new();
            let x = g.constant(a.clone()).unwrap();
            let w = g.constant(b.clone()).unwrap();
            let y = g.matmul(x, w).unwrap();
            let s = g.softmax(y).unwrap();
            g.value(s).clone()
        };
        assert_eq!(run(), run());
    }
}
