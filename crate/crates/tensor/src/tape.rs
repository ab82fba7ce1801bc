//! Operation tape with reverse-mode differentiation.
//!
//! Every forward op appends one node holding its output value and whatever
//! it needs for the backward pass. Nodes are appended in execution order, so
//! the tape is already topologically sorted and the backward sweep is a single
//! reverse pass over it.
//!
//! Broadcasting is limited to leading batch axes: the second operand of
//! [`Tape::add`] and [`Tape::mul`] may have a shape equal to a trailing suffix
//! of the first operand's shape.

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{invalid, Result, TensorError};
use crate::real::{lit, Real};
use crate::tensor::{numel, Tensor};

pub const LEAKY_RELU_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.idx
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    MatMul { a: usize, b: usize, batched: bool },
    Transpose(usize),
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Softmax(usize),
    Sigmoid(usize),
    Silu(usize),
    LeakyRelu(usize),
    LayerNorm { a: usize, inv_std: Vec<F> },
    GroupNorm { a: usize, groups: usize, inv_std: Vec<F> },
    Sum(usize),
    Mean(usize),
    SumAxis { a: usize, axis: usize },
    MeanAxis { a: usize, axis: usize },
    Affine { a: usize, scale: F },
    Gather { table: usize, indices: Vec<usize> },
    External { inputs: Vec<usize>, grads: Vec<Tensor<F>> },
}

#[derive(Debug)]
struct Node<F> {
    value: Rc<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// A single-writer record of executed operations.
#[derive(Debug)]
pub struct Tape<F> {
    id: u32,
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<F> {
    tape: u32,
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient with respect to `v`; zeros if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor<F> {
        assert_eq!(v.tape, self.tape, "variable belongs to a different tape");
        let shape = self.shapes[v.idx].clone();
        match &self.grads[v.idx] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn check_finite<F: Real>(op: &'static str, t: &Tensor<F>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn mismatch<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn grad_buf<F: Real>(grads: &mut [Option<Vec<F>>], idx: usize, len: usize) -> &mut Vec<F> {
    grads[idx].get_or_insert_with(|| vec![F::zero(); len])
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn nodes(&self) -> Ref<'_, Vec<Node<F>>> {
        self.nodes.borrow()
    }

    fn push(&self, op_name: &'static str, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Result<Var> {
        check_finite(op_name, &value)?;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            idx: nodes.len() - 1,
        })
    }

    /// Records a leaf. Differentiable leaves receive gradients in [`Tape::backward`].
    pub fn leaf(&self, value: Tensor<F>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn var(&self, value: Tensor<F>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<F>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<F>> {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        self.nodes()[v.idx].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    fn rg(&self, idx: usize) -> bool {
        self.nodes()[idx].requires_grad
    }

    fn binary_operands(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let nodes = self.nodes();
        let (sa, sb) = (nodes[ia].value.shape(), nodes[ib].value.shape());
        if sa.ends_with(sb) {
            Ok((ia, ib))
        } else if sb.ends_with(sa) {
            Ok((ib, ia))
        } else {
            mismatch(op, sa, sb)
        }
    }

    /// Elementwise sum; one operand may broadcast over leading axes.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_operands("add", a, b)?;
        let out = {
            let nodes = self.nodes();
            let (va, vb) = (&nodes[ia].value, &nodes[ib].value);
            let nb = vb.len();
            let data = va
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + vb.data()[i % nb])
                .collect();
            Tensor::new(va.shape().to_vec(), data)?
        };
        let rg = self.rg(ia) || self.rg(ib);
        self.push("add", out, Op::Add(ia, ib), rg)
    }

    /// Elementwise product; one operand may broadcast over leading axes.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_operands("mul", a, b)?;
        let out = {
            let nodes = self.nodes();
            let (va, vb) = (&nodes[ia].value, &nodes[ib].value);
            let nb = vb.len();
            let data = va
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x * vb.data()[i % nb])
                .collect();
            Tensor::new(va.shape().to_vec(), data)?
        };
        let rg = self.rg(ia) || self.rg(ib);
        self.push("mul", out, Op::Mul(ia, ib), rg)
    }

    /// `a - b` as `a + (-1) * b`.
    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let nb = self.affine(b, lit(-1.0), F::zero())?;
        self.add(a, nb)
    }

    /// Matrix product. `a: (..., m, k)` times either a shared `b: (k, n)` or a
    /// batched `b: (..., k, n)` with the same leading axes as `a`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (out, batched) = {
            let nodes = self.nodes();
            let (va, vb) = (&nodes[ia].value, &nodes[ib].value);
            let (sa, sb) = (va.shape(), vb.shape());
            if sa.len() < 2 || sb.len() < 2 {
                return mismatch("matmul", sa, sb);
            }
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
            if k != k2 {
                return mismatch("matmul", sa, sb);
            }
            let mut out_shape = sa[..sa.len() - 1].to_vec();
            out_shape.push(n);
            if sb.len() == 2 {
                let rows = va.len() / k;
                let mut out = vec![F::zero(); rows * n];
                F::gemm(rows, k, n, va.data(), k as isize, 1, vb.data(), n as isize, 1, F::zero(), &mut out);
                (Tensor::new(out_shape, out)?, false)
            } else {
                if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                    return mismatch("matmul", sa, sb);
                }
                let batch = numel(&sa[..sa.len() - 2]);
                let mut out = vec![F::zero(); batch * m * n];
                for bi in 0..batch {
                    F::gemm(
                        m,
                        k,
                        n,
                        &va.data()[bi * m * k..(bi + 1) * m * k],
                        k as isize,
                        1,
                        &vb.data()[bi * k * n..(bi + 1) * k * n],
                        n as isize,
                        1,
                        F::zero(),
                        &mut out[bi * m * n..(bi + 1) * m * n],
                    );
                }
                (Tensor::new(out_shape, out)?, true)
            }
        };
        let rg = self.rg(ia) || self.rg(ib);
        self.push("matmul", out, Op::MatMul { a: ia, b: ib, batched }, rg)
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = {
            let nodes = self.nodes();
            let va = &nodes[ia].value;
            let s = va.shape();
            if s.len() < 2 {
                return invalid("transpose", format!("needs rank >= 2, got {s:?}"));
            }
            transpose_last2(va)
        };
        let rg = self.rg(ia);
        self.push("transpose", out, Op::Transpose(ia), rg)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = {
            let nodes = self.nodes();
            let va = &nodes[ia].value;
            if numel(shape) != va.len() {
                return mismatch("reshape", va.shape(), shape);
            }
            Tensor::new(shape.to_vec(), va.data().to_vec())?
        };
        let rg = self.rg(ia);
        self.push("reshape", out, Op::Reshape(ia), rg)
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return invalid("concat", "no inputs");
        }
        let idxs = parts.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let out = {
            let nodes = self.nodes();
            let first = nodes[idxs[0]].value.shape().to_vec();
            if axis >= first.len() {
                return invalid("concat", format!("axis {axis} out of range for {first:?}"));
            }
            let mut total = 0;
            for &i in &idxs {
                let s = nodes[i].value.shape();
                let same = s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
                if !same {
                    return mismatch("concat", &first, s);
                }
                total += s[axis];
            }
            let (outer, _, inner) = split_axis(&first, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for &i in &idxs {
                    let v = &nodes[i].value;
                    let chunk = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = first;
            shape[axis] = total;
            Tensor::new(shape, data)?
        };
        let rg = idxs.iter().any(|&i| self.rg(i));
        self.push("concat", out, Op::Concat { inputs: idxs, axis }, rg)
    }

    /// Sub-range `[start, end)` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = {
            let nodes = self.nodes();
            let va = &nodes[ia].value;
            let s = va.shape();
            if axis >= s.len() || start >= end || end > s[axis] {
                return invalid("slice", format!("range {start}..{end} on axis {axis} of {s:?}"));
            }
            let (outer, d, inner) = split_axis(s, axis);
            let w = end - start;
            let mut data = Vec::with_capacity(outer * w * inner);
            for o in 0..outer {
                let base = o * d * inner;
                data.extend_from_slice(&va.data()[base + start * inner..base + end * inner]);
            }
            let mut shape = s.to_vec();
            shape[axis] = w;
            Tensor::new(shape, data)?
        };
        let rg = self.rg(ia);
        self.push("slice", out, Op::Slice { a: ia, axis, start }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = {
            let nodes = self.nodes();
            let va = &nodes[ia].value;
            let w = *va.shape().last().unwrap();
            let mut data = va.data().to_vec();
            for row in data.chunks_mut(w) {
                let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
                let mut sum = F::zero();
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                for x in row.iter_mut() {
                    *x /= sum;
                }
            }
            Tensor::new(va.shape().to_vec(), data)?
        };
        let rg = self.rg(ia);
        self.push("softmax", out, Op::Softmax(ia), rg)
    }

    fn unary(&self, name: &'static str, a: Var, f: impl Fn(F) -> F, op: impl FnOnce(usize) -> Op<F>) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = {
            let nodes = self.nodes();
            let va = &nodes[ia].value;
            Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())?
        };
        let rg = self.rg(ia);
        self.push(name, out, op(ia), rg)
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid)
    }

    pub fn silu(&self, a: Var) -> Result<Var> {
        self.unary("silu", a, |x| x * sigmoid(x), Op::Silu)
    }

    pub fn leaky_relu(&self, a: Var) -> Result<Var> {
        let slope: F = lit(LEAKY_RELU_SLOPE);
        self.unary("leaky_relu", a, move |x| if x > F::zero() { x } else { slope * x }, Op::LeakyRelu)
    }

    /// `scale * a + shift` with scalar constants.
    pub fn affine(&self, a: Var, scale: F, shift: F) -> Result<Var> {
        self.unary("affine", a, |x| scale * x + shift, |ia| Op::Affine { a: ia, scale })
    }

    /// Normalizes over the last axis (no learned affine).
    pub fn layer_norm(&self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let (out, inv_std) = {
            let nodes = self.nodes();
            let va = &nodes[ia].value;
            let w = *va.shape().last().unwrap();
            let mut data = va.data().to_vec();
            let mut inv_std = Vec::with_capacity(data.len() / w);
            for row in data.chunks_mut(w) {
                inv_std.push(normalize_in_place(row.iter_mut()));
            }
            (Tensor::new(va.shape().to_vec(), data)?, inv_std)
        };
        let rg = self.rg(ia);
        self.push("layer_norm", out, Op::LayerNorm { a: ia, inv_std }, rg)
    }

    /// Group normalization of `(..., positions, channels)` input: statistics are
    /// taken over all positions and the channels of each group.
    pub fn group_norm(&self, a: Var, groups: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let (out, inv_std) = {
            let nodes = self.nodes();
            let va = &nodes[ia].value;
            let s = va.shape();
            if s.len() < 2 || groups == 0 || !s[s.len() - 1].is_multiple_of(groups) {
                return invalid("group_norm", format!("{groups} groups for shape {s:?}"));
            }
            let (l, c) = (s[s.len() - 2], s[s.len() - 1]);
            let batch = va.len() / (l * c);
            let cg = c / groups;
            let mut data = va.data().to_vec();
            let mut inv_std = Vec::with_capacity(batch * groups);
            for b in 0..batch {
                let block = &mut data[b * l * c..(b + 1) * l * c];
                for g in 0..groups {
                    let it = block
                        .chunks_mut(c)
                        .flat_map(|row| row[g * cg..(g + 1) * cg].iter_mut());
                    inv_std.push(normalize_in_place(it));
                }
            }
            (Tensor::new(s.to_vec(), data)?, inv_std)
        };
        let rg = self.rg(ia);
        self.push("group_norm", out, Op::GroupNorm { a: ia, groups, inv_std }, rg)
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s: F = self.nodes()[ia].value.data().iter().copied().sum();
        let rg = self.rg(ia);
        self.push("sum", Tensor::scalar(s), Op::Sum(ia), rg)
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let m = {
            let nodes = self.nodes();
            let v = &nodes[ia].value;
            v.data().iter().copied().sum::<F>() / lit(v.len() as f64)
        };
        let rg = self.rg(ia);
        self.push("mean", Tensor::scalar(m), Op::Mean(ia), rg)
    }

    fn reduce_axis(&self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = {
            let nodes = self.nodes();
            let va = &nodes[ia].value;
            let s = va.shape();
            if axis >= s.len() {
                return invalid("reduce", format!("axis {axis} out of range for {s:?}"));
            }
            let (outer, d, inner) = split_axis(s, axis);
            let mut data = vec![F::zero(); outer * inner];
            for o in 0..outer {
                for j in 0..d {
                    let src = &va.data()[(o * d + j) * inner..(o * d + j + 1) * inner];
                    for (acc, &x) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *acc += x;
                    }
                }
            }
            if mean {
                let inv: F = lit(1.0 / d as f64);
                data.iter_mut().for_each(|x| *x *= inv);
            }
            let mut shape = s.to_vec();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            Tensor::new(shape, data)?
        };
        let rg = self.rg(ia);
        let op = if mean {
            Op::MeanAxis { a: ia, axis }
        } else {
            Op::SumAxis { a: ia, axis }
        };
        self.push(if mean { "mean_axis" } else { "sum_axis" }, out, op, rg)
    }

    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    /// Embedding lookup: rows of `table` (indexed along axis 0) in `indices` order.
    pub fn gather(&self, table: Var, indices: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let out = {
            let nodes = self.nodes();
            let vt = &nodes[it].value;
            let rows = vt.shape()[0];
            if indices.is_empty() {
                return invalid("gather", "empty index list");
            }
            if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
                return invalid("gather", format!("index {bad} out of range for {rows} rows"));
            }
            let w = vt.len() / rows;
            let mut data = Vec::with_capacity(indices.len() * w);
            for &i in indices {
                data.extend_from_slice(&vt.data()[i * w..(i + 1) * w]);
            }
            let mut shape = vt.shape().to_vec();
            shape[0] = indices.len();
            Tensor::new(shape, data)?
        };
        let rg = self.rg(it);
        self.push(
            "gather",
            out,
            Op::Gather {
                table: it,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    /// Scalar node whose input gradients were computed outside the tape.
    ///
    /// `grads[i]` must have the shape of `inputs[i]`; the backward pass scales
    /// them by the upstream gradient.
    pub fn external_scalar(&self, value: F, inputs: &[Var], grads: Vec<Tensor<F>>) -> Result<Var> {
        if inputs.len() != grads.len() {
            return invalid("external_scalar", "one gradient per input required");
        }
        let idxs = inputs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        for (&i, g) in idxs.iter().zip(&grads) {
            let s = self.nodes()[i].value.shape().to_vec();
            if s != g.shape() {
                return mismatch("external_scalar", &s, g.shape());
            }
            check_finite("external_scalar", g)?;
        }
        let rg = idxs.iter().any(|&i| self.rg(i));
        self.push(
            "external_scalar",
            Tensor::scalar(value),
            Op::External { inputs: idxs, grads },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let il = self.idx(loss)?;
        let nodes = self.nodes();
        if nodes[il].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(nodes[il].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; nodes.len()];
        grads[il] = Some(vec![F::one()]);
        for i in (0..=il).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, i, &g, &mut grads);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

#[inline]
fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Normalizes the iterated values to zero mean / unit variance; returns 1/std.
fn normalize_in_place<'a, F: Real + 'a>(it: impl Iterator<Item = &'a mut F>) -> F {
    let mut vals: Vec<&mut F> = it.collect();
    let n: F = lit(vals.len() as f64);
    let mean = vals.iter().map(|x| **x).sum::<F>() / n;
    let var = vals.iter().map(|x| (**x - mean) * (**x - mean)).sum::<F>() / n;
    let inv = F::one() / (var + lit(NORM_EPS)).sqrt();
    for x in vals.iter_mut() {
        **x = (**x - mean) * inv;
    }
    inv
}

fn transpose_last2<F: Real>(t: &Tensor<F>) -> Tensor<F> {
    let s = t.shape();
    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
    let batch = t.len() / (r * c);
    let mut out = vec![F::zero(); t.len()];
    for b in 0..batch {
        let src = &t.data()[b * r * c..(b + 1) * r * c];
        let dst = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    let mut shape = s.to_vec();
    let n = shape.len();
    shape.swap(n - 2, n - 1);
    Tensor::new(shape, out).expect("transpose shape")
}

/// Backward of a normalization over index sets with stored `1/std`:
/// `dx = inv * (g - mean(g) - y * mean(g * y))`.
fn norm_backward<F: Real>(y: &[F], g: &[F], inv: F, out: &mut [F]) {
    let n: F = lit(y.len() as f64);
    let mg = g.iter().copied().sum::<F>() / n;
    let mgy = g.iter().zip(y).map(|(&a, &b)| a * b).sum::<F>() / n;
    for ((o, &gi), &yi) in out.iter_mut().zip(g).zip(y) {
        *o += inv * (gi - mg - yi * mgy);
    }
}

fn backprop_node<F: Real>(nodes: &[Node<F>], i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
    let rg = |j: usize| nodes[j].requires_grad;
    let val = |j: usize| &nodes[j].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if rg(*a) {
                let ga = grad_buf(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
            if rg(*b) {
                let nb = val(*b).len();
                let gb = grad_buf(grads, *b, nb);
                for (k, &y) in g.iter().enumerate() {
                    gb[k % nb] += y;
                }
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            let nb = vb.len();
            if rg(*a) {
                let ga = grad_buf(grads, *a, g.len());
                for (k, &y) in g.iter().enumerate() {
                    ga[k] += y * vb[k % nb];
                }
            }
            if rg(*b) {
                let gb = grad_buf(grads, *b, nb);
                for (k, &y) in g.iter().enumerate() {
                    gb[k % nb] += y * va[k];
                }
            }
        }
        Op::MatMul { a, b, batched } => {
            let (va, vb) = (val(*a), val(*b));
            let (sa, sb) = (va.shape(), vb.shape());
            let k = sa[sa.len() - 1];
            let n = sb[sb.len() - 1];
            if !batched {
                let rows = va.len() / k;
                if rg(*a) {
                    let ga = grad_buf(grads, *a, va.len());
                    // ga (rows x k) += g (rows x n) * b^T
                    F::gemm(rows, n, k, g, n as isize, 1, vb.data(), 1, n as isize, F::one(), ga);
                }
                if rg(*b) {
                    let gb = grad_buf(grads, *b, vb.len());
                    // gb (k x n) += a^T * g
                    F::gemm(k, rows, n, va.data(), 1, k as isize, g, n as isize, 1, F::one(), gb);
                }
            } else {
                let m = sa[sa.len() - 2];
                let batch = va.len() / (m * k);
                if rg(*a) {
                    let ga = grad_buf(grads, *a, va.len());
                    for bi in 0..batch {
                        F::gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            n as isize,
                            1,
                            &vb.data()[bi * k * n..(bi + 1) * k * n],
                            1,
                            n as isize,
                            F::one(),
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                }
                if rg(*b) {
                    let gb = grad_buf(grads, *b, vb.len());
                    for bi in 0..batch {
                        F::gemm(
                            k,
                            m,
                            n,
                            &va.data()[bi * m * k..(bi + 1) * m * k],
                            1,
                            k as isize,
                            &g[bi * m * n..(bi + 1) * m * n],
                            n as isize,
                            1,
                            F::one(),
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                }
            }
        }
        Op::Transpose(a) => {
            if rg(*a) {
                let out_shape = nodes[i].value.shape().to_vec();
                let gt = transpose_last2(&Tensor::new(out_shape, g.to_vec()).expect("shape"));
                let ga = grad_buf(grads, *a, g.len());
                ga.iter_mut().zip(gt.data()).for_each(|(x, &y)| *x += y);
            }
        }
        Op::Reshape(a) => {
            if rg(*a) {
                let ga = grad_buf(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
        }
        Op::Concat { inputs, axis } => {
            let out_shape = nodes[i].value.shape();
            let (outer, total, inner) = split_axis(out_shape, *axis);
            let mut offset = 0;
            for &inp in inputs {
                let d = val(inp).shape()[*axis];
                if rg(inp) {
                    let len = val(inp).len();
                    let gi = grad_buf(grads, inp, len);
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + d) * inner];
                        let dst = &mut gi[o * d * inner..(o + 1) * d * inner];
                        dst.iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                    }
                }
                offset += d;
            }
        }
        Op::Slice { a, axis, start } => {
            if rg(*a) {
                let in_shape = val(*a).shape().to_vec();
                let (outer, d, inner) = split_axis(&in_shape, *axis);
                let w = nodes[i].value.shape()[*axis];
                let ga = grad_buf(grads, *a, numel(&in_shape));
                for o in 0..outer {
                    let dst = &mut ga[(o * d + start) * inner..(o * d + start + w) * inner];
                    let src = &g[o * w * inner..(o + 1) * w * inner];
                    dst.iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                }
            }
        }
        Op::Softmax(a) => {
            if rg(*a) {
                let y = nodes[i].value.data();
                let w = *nodes[i].value.shape().last().unwrap();
                let ga = grad_buf(grads, *a, y.len());
                for ((yr, gr), out) in y.chunks(w).zip(g.chunks(w)).zip(ga.chunks_mut(w)) {
                    let dot: F = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((o, &p), &q) in out.iter_mut().zip(yr).zip(gr) {
                        *o += p * (q - dot);
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            if rg(*a) {
                let y = nodes[i].value.data();
                let ga = grad_buf(grads, *a, y.len());
                for ((o, &yi), &gi) in ga.iter_mut().zip(y).zip(g) {
                    *o += gi * yi * (F::one() - yi);
                }
            }
        }
        Op::Silu(a) => {
            if rg(*a) {
                let x = val(*a).data();
                let ga = grad_buf(grads, *a, x.len());
                for ((o, &xi), &gi) in ga.iter_mut().zip(x).zip(g) {
                    let s = sigmoid(xi);
                    *o += gi * s * (F::one() + xi * (F::one() - s));
                }
            }
        }
        Op::LeakyRelu(a) => {
            if rg(*a) {
                let x = val(*a).data();
                let slope: F = lit(LEAKY_RELU_SLOPE);
                let ga = grad_buf(grads, *a, x.len());
                for ((o, &xi), &gi) in ga.iter_mut().zip(x).zip(g) {
                    *o += if xi > F::zero() { gi } else { slope * gi };
                }
            }
        }
        Op::LayerNorm { a, inv_std } => {
            if rg(*a) {
                let y = nodes[i].value.data();
                let w = *nodes[i].value.shape().last().unwrap();
                let ga = grad_buf(grads, *a, y.len());
                for (r, &inv) in inv_std.iter().enumerate() {
                    norm_backward(&y[r * w..(r + 1) * w], &g[r * w..(r + 1) * w], inv, &mut ga[r * w..(r + 1) * w]);
                }
            }
        }
        Op::GroupNorm { a, groups, inv_std } => {
            if rg(*a) {
                let s = nodes[i].value.shape();
                let (l, c) = (s[s.len() - 2], s[s.len() - 1]);
                let cg = c / groups;
                let y = nodes[i].value.data();
                let batch = y.len() / (l * c);
                let ga = grad_buf(grads, *a, y.len());
                for b in 0..batch {
                    for grp in 0..*groups {
                        let ids: Vec<usize> = (0..l)
                            .flat_map(|p| (0..cg).map(move |ch| b * l * c + p * c + grp * cg + ch))
                            .collect();
                        let ys: Vec<F> = ids.iter().map(|&k| y[k]).collect();
                        let gs: Vec<F> = ids.iter().map(|&k| g[k]).collect();
                        let mut out = vec![F::zero(); ids.len()];
                        norm_backward(&ys, &gs, inv_std[b * groups + grp], &mut out);
                        for (&k, o) in ids.iter().zip(out) {
                            ga[k] += o;
                        }
                    }
                }
            }
        }
        Op::Sum(a) | Op::Mean(a) => {
            if rg(*a) {
                let n = val(*a).len();
                let scale = if matches!(nodes[i].op, Op::Mean(_)) {
                    g[0] / lit(n as f64)
                } else {
                    g[0]
                };
                let ga = grad_buf(grads, *a, n);
                ga.iter_mut().for_each(|x| *x += scale);
            }
        }
        Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
            if rg(*a) {
                let in_shape = val(*a).shape().to_vec();
                let (outer, d, inner) = split_axis(&in_shape, *axis);
                let scale: F = if matches!(nodes[i].op, Op::MeanAxis { .. }) {
                    lit(1.0 / d as f64)
                } else {
                    F::one()
                };
                let ga = grad_buf(grads, *a, numel(&in_shape));
                for o in 0..outer {
                    for j in 0..d {
                        let dst = &mut ga[(o * d + j) * inner..(o * d + j + 1) * inner];
                        let src = &g[o * inner..(o + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(x, &y)| *x += scale * y);
                    }
                }
            }
        }
        Op::Affine { a, scale } => {
            if rg(*a) {
                let ga = grad_buf(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += *scale * y);
            }
        }
        Op::Gather { table, indices } => {
            if rg(*table) {
                let vt = val(*table);
                let w = vt.len() / vt.shape()[0];
                let gt = grad_buf(grads, *table, vt.len());
                for (r, &ix) in indices.iter().enumerate() {
                    let dst = &mut gt[ix * w..(ix + 1) * w];
                    dst.iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(x, &y)| *x += y);
                }
            }
        }
        Op::External { inputs, grads: local } => {
            for (&inp, lg) in inputs.iter().zip(local) {
                if rg(inp) {
                    let gi = grad_buf(grads, inp, lg.len());
                    gi.iter_mut().zip(lg.data()).for_each(|(x, &y)| *x += g[0] * y);
                }
            }
        }
    }
}
