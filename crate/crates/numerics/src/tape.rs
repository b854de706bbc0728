//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! Every op appends one node holding its forward value plus whatever it
//! needs for the backward pass. Nodes are only ever appended, so execution
//! order is already a topological order and [`Tape::backward`] walks it in
//! reverse.

use crate::error::{NumericsError, Result};
use crate::scalar::{gemm, Layout, Scalar};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Reshape {
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Relu {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Transpose {
        x: Var,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Conv1d {
        x: Var,
        w: Var,
        bias: Var,
        cols: Vec<T>,
        len: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: Vec<T>,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    WeightedCe {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
        total_weight: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed ops. Confined to one thread; parameters enter
/// as leaves and leave again as plain [`Tensor`]s.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], retained for leaves only.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Raw gradient of a leaf, `None` if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a leaf as a tensor; zeros when the leaf is unreachable.
    pub fn wrt(&self, var: Var) -> Tensor<T> {
        let shape = &self.shapes[var.0];
        match self.get(var) {
            Some(g) => Tensor::from_vec(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Moves the gradient out, zeros when unreachable.
    pub fn take(&mut self, var: Var) -> Vec<T> {
        let n = self.shapes[var.0].iter().product();
        self.grads[var.0].take().unwrap_or_else(|| vec![T::zero(); n])
    }
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(NumericsError::Dimension {
            op,
            msg: format!("expected a 2-D tensor, got {shape:?}"),
        }),
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], var: Var, len: usize) -> &mut Vec<T> {
    grads[var.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], var: Var, contrib: Vec<T>) {
    match &mut grads[var.0] {
        Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, &b)| *a += b),
        empty => *empty = Some(contrib),
    }
}

fn softmax_rows_in_place<T: Scalar>(data: &mut [T], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        let inv = T::one() / total;
        row.iter_mut().for_each(|x| *x *= inv);
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: receives a gradient on backward.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Non-trainable leaf (inputs, targets, frozen weights).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (m, k) = dims2("matmul", &sa)?;
        let (k2, n) = dims2("matmul", &sb)?;
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            Layout::row_major(k),
            self.value(b).data(),
            Layout::row_major(n),
            T::zero(),
            &mut out,
            Layout::row_major(n),
        );
        let value = Tensor::from_vec(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Adds a `[n]` bias to every last-axis slice of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(NumericsError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(v, &bb)| *v += bb);
        }
        let value = Tensor::from_vec(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu { x }, &[x])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        Ok(self.push(value, Op::Transpose { x }, &[x]))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(NumericsError::EmptyInput { op: "concat_cols" })?;
        let (rows, _) = dims2("concat_cols", self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2("concat_cols", self.shape(p))?;
            if r != rows {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::from_vec(vec![rows, total], out)?;
        Ok(self.push(
            value,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    /// Selects rows of a 2-D tensor (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = dims2("gather_rows", self.shape(x))?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(NumericsError::Dimension {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {r} rows"),
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let value = Tensor::from_vec(vec![rows.len(), c], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Kernel-3 convolution over time with one step of zero padding on each
    /// side, on a single channel-major sequence: `[C_in×T] → [C_out×T]`.
    pub fn conv1d(&mut self, x: Var, kernels: Var, bias: Var) -> Result<Var> {
        let (cin, len) = dims2("conv1d", self.shape(x))?;
        let xt = self.transpose(x)?;
        let xt = self.reshape(xt, &[1, len, cin])?;
        let y = self.conv1d_time_major(xt, kernels, bias)?;
        let cout = self.value(y).last_dim();
        let y = self.reshape(y, &[len, cout])?;
        self.transpose(y)
    }

    /// Batched time-major convolution `[B×T×C_in] → [B×T×C_out]` with kernels
    /// `[C_out×C_in×3]`, same padding. Implemented as im2col + gemm.
    pub fn conv1d_time_major(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (batch, len, cin) = match *self.shape(x) {
            [b, t, c] => (b, t, c),
            _ => {
                return Err(NumericsError::Dimension {
                    op: "conv1d",
                    msg: format!("expected [batch, time, channels], got {:?}", self.shape(x)),
                })
            }
        };
        if len == 0 || batch == 0 {
            return Err(NumericsError::EmptyInput { op: "conv1d" });
        }
        let cout = match *self.shape(w) {
            [co, ci, 3] if ci == cin => co,
            _ => {
                return Err(NumericsError::ShapeMismatch {
                    op: "conv1d",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(w).to_vec(),
                })
            }
        };
        if self.shape(bias) != [cout] {
            return Err(NumericsError::ShapeMismatch {
                op: "conv1d",
                lhs: self.shape(w).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let width = 3 * cin;
        let src = self.value(x).data();
        let mut cols = vec![T::zero(); batch * len * width];
        for b in 0..batch {
            for t in 0..len {
                let row = &mut cols[(b * len + t) * width..(b * len + t + 1) * width];
                for j in 0..3 {
                    let s = t as isize + j as isize - 1;
                    if s < 0 || s >= len as isize {
                        continue;
                    }
                    let base = (b * len + s as usize) * cin;
                    for ci in 0..cin {
                        row[ci * 3 + j] = src[base + ci];
                    }
                }
            }
        }
        let rows = batch * len;
        let mut out = vec![T::zero(); rows * cout];
        let bvals = self.value(bias).data();
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(bvals);
        }
        // Kernel tensor viewed as a [3·C_in × C_out] matrix.
        gemm(
            rows,
            width,
            cout,
            T::one(),
            &cols,
            Layout::row_major(width),
            self.value(w).data(),
            Layout::transposed(width),
            T::one(),
            &mut out,
            Layout::row_major(cout),
        );
        let value = Tensor::from_vec(vec![batch, len, cout], out)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                w,
                bias,
                cols,
                len,
            },
            &[x, w, bias],
        ))
    }

    /// Normalizes every last-axis slice to zero mean and unit variance, then
    /// applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d == 0 {
            return Err(NumericsError::EmptyInput { op: "layer_norm" });
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = src.len() / d;
        let inv_d = T::one() / T::of(d as f64);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let xs = &src[r * d..(r + 1) * d];
            let mean = xs.iter().copied().sum::<T>() * inv_d;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (xs[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        let value = Tensor::from_vec(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_lastaxis(&mut self, x: Var) -> Var {
        let d = self.value(x).last_dim();
        let mut value = self.value(x).clone();
        if d > 0 {
            softmax_rows_in_place(value.data_mut(), d);
        }
        self.push(value, Op::Softmax { x }, &[x])
    }

    /// Single-head `softmax(Q·Kᵀ/√d)·V` for `Q:[Tq×d]`, `K,V:[Tk×d]`.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        self.attention(q, k, v, 1, 1)
    }

    /// Batched multi-head scaled dot-product attention.
    ///
    /// `q` is `[batch·Tq × D]`, `k` and `v` are `[batch·Tk × D]`; the feature
    /// axis is split into `heads` contiguous slices of width `D / heads`,
    /// each attended independently, and the head outputs are laid back side
    /// by side.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let (qr, d) = dims2("attention", self.shape(q))?;
        let (kr, dk) = dims2("attention", self.shape(k))?;
        let (vr, dv) = dims2("attention", self.shape(v))?;
        if d == 0 {
            return Err(NumericsError::Dimension {
                op: "attention",
                msg: "feature dimension is zero".into(),
            });
        }
        if d != dk || kr != vr || d != dv {
            return Err(NumericsError::ShapeMismatch {
                op: "attention",
                lhs: self.shape(q).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        if batch == 0 || heads == 0 || qr % batch != 0 || kr % batch != 0 || d % heads != 0 {
            return Err(NumericsError::Dimension {
                op: "attention",
                msg: format!("{qr}/{kr} rows and {d} features do not split into batch {batch} × heads {heads}"),
            });
        }
        let (tq, tk, dh) = (qr / batch, kr / batch, d / heads);
        let scale = T::one() / T::of(dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![T::zero(); batch * heads * tq * tk];
        let mut out = vec![T::zero(); qr * d];
        let strided = Layout { rs: d, cs: 1 };
        for b in 0..batch {
            for h in 0..heads {
                let qo = b * tq * d + h * dh;
                let ko = b * tk * d + h * dh;
                let p = &mut probs[(b * heads + h) * tq * tk..(b * heads + h + 1) * tq * tk];
                gemm(
                    tq,
                    dh,
                    tk,
                    scale,
                    &qd[qo..],
                    strided,
                    &kd[ko..],
                    Layout { rs: 1, cs: d },
                    T::zero(),
                    p,
                    Layout::row_major(tk),
                );
                softmax_rows_in_place(p, tk);
                gemm(
                    tq,
                    tk,
                    dh,
                    T::one(),
                    p,
                    Layout::row_major(tk),
                    &vd[ko..],
                    strided,
                    T::zero(),
                    &mut out[qo..],
                    strided,
                );
            }
        }
        let value = Tensor::from_vec(vec![qr, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Mean squared error between equally shaped tensors, as a scalar.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse_loss", pred, target)?;
        let p = self.value(pred).data();
        if p.is_empty() {
            return Err(NumericsError::EmptyInput { op: "mse_loss" });
        }
        let t = self.value(target).data();
        let n = T::of(p.len() as f64);
        let loss = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n;
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }, &[pred, target]))
    }

    /// Class-weighted cross-entropy over `[B×C]` logits, normalized by the
    /// summed weight of the batch: `−Σ w_y·log p_y / Σ w_y`.
    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: &[usize], class_weights: &[T]) -> Result<Var> {
        let (rows, classes) = dims2("weighted_cross_entropy", self.shape(logits))?;
        if rows == 0 {
            return Err(NumericsError::EmptyInput {
                op: "weighted_cross_entropy",
            });
        }
        if labels.len() != rows || class_weights.len() != classes {
            return Err(NumericsError::ShapeMismatch {
                op: "weighted_cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![labels.len(), class_weights.len()],
            });
        }
        if class_weights.iter().any(|w| !(w.is_finite() && *w > T::zero())) {
            return Err(NumericsError::InvalidWeights(
                class_weights.iter().map(|w| w.as_f64()).collect(),
            ));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(NumericsError::InvalidLabel { row, label, classes });
        }
        let z = self.value(logits).data();
        let mut probs = z.to_vec();
        softmax_rows_in_place(&mut probs, classes);
        let mut total_weight = T::zero();
        let mut acc = T::zero();
        for (r, &y) in labels.iter().enumerate() {
            let row = &z[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            let w = class_weights[y];
            acc += w * (lse - row[y]);
            total_weight += w;
        }
        let value = Tensor::scalar(acc / total_weight);
        Ok(self.push(
            value,
            Op::WeightedCe {
                logits,
                labels: labels.to_vec(),
                weights: class_weights.to_vec(),
                probs,
                total_weight,
            },
            &[logits],
        ))
    }

    /// Propagates gradients from a scalar loss to every leaf that requires
    /// them. A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(NumericsError::TapeConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut kept: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, g, &mut grads, &mut kept, i);
        }
        Ok(Gradients {
            grads: kept,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        kept: &mut [Option<Vec<T>>],
        index: usize,
    ) {
        match &node.op {
            Op::Leaf => kept[index] = Some(g),
            Op::Reshape { x } => accumulate(grads, *x, g),
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[a.0].value.shape()[0], self.nodes[a.0].value.shape()[1]);
                let n = self.nodes[b.0].value.shape()[1];
                if self.needs(*a) {
                    let da = slot(grads, *a, m * k);
                    gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &g,
                        Layout::row_major(n),
                        self.val(*b),
                        Layout::transposed(n),
                        T::one(),
                        da,
                        Layout::row_major(k),
                    );
                }
                if self.needs(*b) {
                    let db = slot(grads, *b, k * n);
                    gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.val(*a),
                        Layout::transposed(k),
                        &g,
                        Layout::row_major(n),
                        T::one(),
                        db,
                        Layout::row_major(n),
                    );
                }
            }
            Op::Add { a, b } => match (self.needs(*a), self.needs(*b)) {
                (true, true) => {
                    accumulate(grads, *a, g.clone());
                    accumulate(grads, *b, g);
                }
                (true, false) => accumulate(grads, *a, g),
                (false, true) => accumulate(grads, *b, g),
                (false, false) => {}
            },
            Op::AddBias { x, bias } => {
                if self.needs(*bias) {
                    let n = self.val(*bias).len();
                    let db = slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                }
                if self.needs(*x) {
                    accumulate(grads, *x, g);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let c: Vec<T> = g.iter().zip(self.val(*b)).map(|(&gg, &bb)| gg * bb).collect();
                    accumulate(grads, *a, c);
                }
                if self.needs(*b) {
                    let c: Vec<T> = g.iter().zip(self.val(*a)).map(|(&gg, &aa)| gg * aa).collect();
                    accumulate(grads, *b, c);
                }
            }
            Op::Scale { x, factor } => {
                let mut g = g;
                g.iter_mut().for_each(|v| *v *= *factor);
                accumulate(grads, *x, g);
            }
            Op::Relu { x } => {
                let mut g = g;
                for (gg, &o) in g.iter_mut().zip(node.value.data()) {
                    if o <= T::zero() {
                        *gg = T::zero();
                    }
                }
                accumulate(grads, *x, g);
            }
            Op::Sum { x } => {
                let n = self.val(*x).len();
                let dx = slot(grads, *x, n);
                dx.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::Transpose { x } => {
                let (r, c) = (self.nodes[x.0].value.shape()[0], self.nodes[x.0].value.shape()[1]);
                let dx = slot(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total = node.value.last_dim();
                let rows = node.value.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.last_dim();
                    if self.needs(p) {
                        let dp = slot(grads, p, rows * w);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            dp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows { x, rows } => {
                let c = node.value.last_dim();
                let n = self.val(*x).len();
                let dx = slot(grads, *x, n);
                for (i, &r) in rows.iter().enumerate() {
                    dx[r * c..(r + 1) * c]
                        .iter_mut()
                        .zip(&g[i * c..(i + 1) * c])
                        .for_each(|(a, &b)| *a += b);
                }
            }
            Op::Conv1d {
                x,
                w,
                bias,
                cols,
                len,
            } => {
                let cin = self.nodes[x.0].value.last_dim();
                let cout = node.value.last_dim();
                let width = 3 * cin;
                let rows = g.len() / cout;
                if self.needs(*bias) {
                    let db = slot(grads, *bias, cout);
                    for row in g.chunks(cout) {
                        db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                }
                if self.needs(*w) {
                    let dw = slot(grads, *w, cout * width);
                    gemm(
                        width,
                        rows,
                        cout,
                        T::one(),
                        cols,
                        Layout::transposed(width),
                        &g,
                        Layout::row_major(cout),
                        T::one(),
                        dw,
                        Layout::transposed(width),
                    );
                }
                if self.needs(*x) {
                    let mut dcols = vec![T::zero(); rows * width];
                    gemm(
                        rows,
                        cout,
                        width,
                        T::one(),
                        &g,
                        Layout::row_major(cout),
                        self.val(*w),
                        Layout::row_major(width),
                        T::zero(),
                        &mut dcols,
                        Layout::row_major(width),
                    );
                    let len = *len;
                    let batch = rows / len;
                    let dx = slot(grads, *x, rows * cin);
                    for b in 0..batch {
                        for t in 0..len {
                            let row = &dcols[(b * len + t) * width..(b * len + t + 1) * width];
                            for j in 0..3 {
                                let s = t as isize + j as isize - 1;
                                if s < 0 || s >= len as isize {
                                    continue;
                                }
                                let base = (b * len + s as usize) * cin;
                                for ci in 0..cin {
                                    dx[base + ci] += row[ci * 3 + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let rows = g.len() / d;
                if self.needs(*gamma) {
                    let dg = slot(grads, *gamma, d);
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.needs(*beta) {
                    let db = slot(grads, *beta, d);
                    for row in g.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                }
                if self.needs(*x) {
                    let gm = self.val(*gamma);
                    let inv_d = T::one() / T::of(d as f64);
                    let dx = slot(grads, *x, rows * d);
                    let mut dxh = vec![T::zero(); d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..d {
                            dxh[j] = gr[j] * gm[j];
                            mean_d += dxh[j];
                            mean_dx += dxh[j] * xh[j];
                        }
                        mean_d *= inv_d;
                        mean_dx *= inv_d;
                        for j in 0..d {
                            dx[r * d + j] += rstd[r] * (dxh[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let d = node.value.last_dim();
                let y = node.value.data();
                let mut c = vec![T::zero(); g.len()];
                for ((cr, gr), yr) in c.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        cr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *x, c);
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            } => {
                let (batch, heads) = (*batch, *heads);
                let d = node.value.last_dim();
                let tq = node.value.shape()[0] / batch;
                let tk = self.nodes[k.0].value.shape()[0] / batch;
                let dh = d / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let (qd, kd, vd) = (self.val(*q), self.val(*k), self.val(*v));
                let mut dq = vec![T::zero(); qd.len()];
                let mut dk = vec![T::zero(); kd.len()];
                let mut dv = vec![T::zero(); vd.len()];
                let mut ds = vec![T::zero(); tq * tk];
                let strided = Layout { rs: d, cs: 1 };
                for b in 0..batch {
                    for h in 0..heads {
                        let qo = b * tq * d + h * dh;
                        let ko = b * tk * d + h * dh;
                        let p = &probs[(b * heads + h) * tq * tk..(b * heads + h + 1) * tq * tk];
                        // dV = Pᵀ·dO
                        gemm(
                            tk,
                            tq,
                            dh,
                            T::one(),
                            p,
                            Layout::transposed(tk),
                            &g[qo..],
                            strided,
                            T::one(),
                            &mut dv[ko..],
                            strided,
                        );
                        // dP = dO·Vᵀ
                        gemm(
                            tq,
                            dh,
                            tk,
                            T::one(),
                            &g[qo..],
                            strided,
                            &vd[ko..],
                            Layout { rs: 1, cs: d },
                            T::zero(),
                            &mut ds,
                            Layout::row_major(tk),
                        );
                        for (dsr, pr) in ds.chunks_mut(tk).zip(p.chunks(tk)) {
                            let dot: T = dsr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                            for j in 0..tk {
                                dsr[j] = pr[j] * (dsr[j] - dot);
                            }
                        }
                        gemm(
                            tq,
                            tk,
                            dh,
                            scale,
                            &ds,
                            Layout::row_major(tk),
                            &kd[ko..],
                            strided,
                            T::one(),
                            &mut dq[qo..],
                            strided,
                        );
                        gemm(
                            tk,
                            tq,
                            dh,
                            scale,
                            &ds,
                            Layout::transposed(tk),
                            &qd[qo..],
                            strided,
                            T::one(),
                            &mut dk[ko..],
                            strided,
                        );
                    }
                }
                if self.needs(*q) {
                    accumulate(grads, *q, dq);
                }
                if self.needs(*k) {
                    accumulate(grads, *k, dk);
                }
                if self.needs(*v) {
                    accumulate(grads, *v, dv);
                }
            }
            Op::Mse { pred, target } => {
                let p = self.val(*pred);
                let t = self.val(*target);
                let coef = g[0] * T::of(2.0) / T::of(p.len() as f64);
                let dp: Vec<T> = p.iter().zip(t).map(|(&a, &b)| coef * (a - b)).collect();
                if self.needs(*target) {
                    let dt: Vec<T> = dp.iter().map(|&v| -v).collect();
                    accumulate(grads, *target, dt);
                }
                if self.needs(*pred) {
                    accumulate(grads, *pred, dp);
                }
            }
            Op::WeightedCe {
                logits,
                labels,
                weights,
                probs,
                total_weight,
            } => {
                let classes = weights.len();
                let mut dz = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    let coef = g[0] * weights[y] / *total_weight;
                    let row = &mut dz[r * classes..(r + 1) * classes];
                    row[y] -= T::one();
                    row.iter_mut().for_each(|v| *v *= coef);
                }
                accumulate(grads, *logits, dz);
            }
        }
    }
}
