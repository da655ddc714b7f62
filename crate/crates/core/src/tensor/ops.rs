//! Differentiable primitives: broadcasting arithmetic, activations,
//! batched matrix products, reductions and layout changes.

use super::gemm::{gemm, MatLayout};
use super::{lit, numel, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// Broadcast result of two shapes, aligning trailing axes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}")));
            }
        };
    }
    Ok(out)
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Strides of `shape` viewed inside `out` (left-padded, zero on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Visits every flat index of `out` in row-major order together with the
/// matching offsets into two strided operands.
pub(crate) fn for_each_strided(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let total = numel(out);
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        for j in 0..last {
            f(o + j, ia + j * la, ib + j * lb);
        }
        o += last;
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn apply_binary<T: Scalar>(op: BinaryOp, x: T, y: T) -> T {
    match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
        BinaryOp::Div => x / y,
    }
}

impl<T: Scalar> Tensor<T> {
    /// Element-wise binary operation with trailing-axis broadcasting.
    pub fn binary(&self, op: BinaryOp, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = (self.data(), other.data());
        let same = self.shape() == other.shape();
        let out_shape = if same {
            self.shape().to_vec()
        } else {
            broadcast_shape(self.shape(), other.shape())?
        };
        let sa = broadcast_strides(self.shape(), &out_shape);
        let sb = broadcast_strides(other.shape(), &out_shape);
        let data: Vec<T> = if same {
            a.iter().zip(b).map(|(&x, &y)| apply_binary(op, x, y)).collect()
        } else {
            let mut out = vec![T::zero(); numel(&out_shape)];
            for_each_strided(&out_shape, &sa, &sb, |o, ia, ib| {
                out[o] = apply_binary(op, a[ia], b[ib]);
            });
            out
        };
        let (lhs, rhs) = (self.clone(), other.clone());
        let (need_a, need_b) = (self.needs_grad(), other.needs_grad());
        let shape_for_grad = out_shape.clone();
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone(), other.clone()],
            move |g| {
                let (a, b) = (lhs.data(), rhs.data());
                let mut ga = need_a.then(|| vec![T::zero(); a.len()]);
                let mut gb = need_b.then(|| vec![T::zero(); b.len()]);
                for_each_strided(&shape_for_grad, &sa, &sb, |o, ia, ib| {
                    let go = g[o];
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += match op {
                            BinaryOp::Add | BinaryOp::Sub => go,
                            BinaryOp::Mul => go * b[ib],
                            BinaryOp::Div => go / b[ib],
                        };
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += match op {
                            BinaryOp::Add => go,
                            BinaryOp::Sub => -go,
                            BinaryOp::Mul => go * a[ia],
                            BinaryOp::Div => -go * a[ia] / (b[ib] * b[ib]),
                        };
                    }
                });
                vec![ga, gb]
            },
        ))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryOp::Mul, other)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryOp::Div, other)
    }

    /// Element-wise activation or elementary function.
    ///
    /// The relu subgradient at exactly zero is taken to be zero.
    pub fn unary(&self, op: UnaryOp) -> Tensor<T> {
        let sigmoid = |v: T| T::one() / (T::one() + (-v).exp());
        let data = self
            .data()
            .iter()
            .map(|&v| match op {
                UnaryOp::Relu => v.max(T::zero()),
                UnaryOp::Sigmoid => sigmoid(v),
                UnaryOp::Exp => v.exp(),
                UnaryOp::Log => v.ln(),
                UnaryOp::Neg => -v,
            })
            .collect();
        let input = self.clone();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |g| {
            let x = input.data();
            let gx = g
                .iter()
                .zip(x)
                .map(|(&go, &v)| match op {
                    UnaryOp::Relu => {
                        if v > T::zero() {
                            go
                        } else {
                            T::zero()
                        }
                    }
                    UnaryOp::Sigmoid => {
                        let s = sigmoid(v);
                        go * s * (T::one() - s)
                    }
                    UnaryOp::Exp => go * v.exp(),
                    UnaryOp::Log => go / v,
                    UnaryOp::Neg => -go,
                })
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(UnaryOp::Relu)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(UnaryOp::Sigmoid)
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(UnaryOp::Exp)
    }

    pub fn log(&self) -> Tensor<T> {
        self.unary(UnaryOp::Log)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary(UnaryOp::Neg)
    }

    pub fn mul_scalar(&self, s: T) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v * s).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |g| {
            vec![Some(g.iter().map(|&v| v * s).collect())]
        })
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v + s).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], |g| {
            vec![Some(g.to_vec())]
        })
    }

    /// Matrix product over the last two axes. Leading (batch) axes must
    /// agree, or one side must have none / a single batch.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(format!("matmul needs rank >= 2, got {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape(format!("matmul inner extents differ: {sa:?} x {sb:?}")));
        }
        let (batch_a, batch_b) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (na, nb) = (numel(batch_a), numel(batch_b));
        let batch_shape: Vec<usize> = if batch_a == batch_b || nb == 1 && na >= nb {
            batch_a.to_vec()
        } else if na == 1 {
            batch_b.to_vec()
        } else {
            return Err(Error::shape(format!("matmul batch extents differ: {sa:?} x {sb:?}")));
        };
        let batches = numel(&batch_shape).max(1);
        let mut out_shape = batch_shape;
        out_shape.extend([m, n]);

        let mut data = vec![T::zero(); batches * m * n];
        let (a, b) = (self.data(), other.data());
        for i in 0..batches {
            let ao = if na == 1 { 0 } else { i * m * k };
            let bo = if nb == 1 { 0 } else { i * k * n };
            gemm(
                m,
                k,
                n,
                &a[ao..ao + m * k],
                MatLayout::Normal,
                &b[bo..bo + k * n],
                MatLayout::Normal,
                &mut data[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let (lhs, rhs) = (self.clone(), other.clone());
        let (need_a, need_b) = (self.needs_grad(), other.needs_grad());
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone(), other.clone()],
            move |g| {
                let (a, b) = (lhs.data(), rhs.data());
                let mut ga = need_a.then(|| vec![T::zero(); a.len()]);
                let mut gb = need_b.then(|| vec![T::zero(); b.len()]);
                for i in 0..batches {
                    let ao = if na == 1 { 0 } else { i * m * k };
                    let bo = if nb == 1 { 0 } else { i * k * n };
                    let gc = &g[i * m * n..(i + 1) * m * n];
                    if let Some(ga) = ga.as_mut() {
                        // dA = dC * B^T
                        gemm(
                            m,
                            n,
                            k,
                            gc,
                            MatLayout::Normal,
                            &b[bo..bo + k * n],
                            MatLayout::Transposed,
                            &mut ga[ao..ao + m * k],
                            true,
                        );
                    }
                    if let Some(gb) = gb.as_mut() {
                        // dB = A^T * dC
                        gemm(
                            k,
                            m,
                            n,
                            &a[ao..ao + m * k],
                            MatLayout::Transposed,
                            gc,
                            MatLayout::Normal,
                            &mut gb[bo..bo + k * n],
                            true,
                        );
                    }
                }
                vec![ga, gb]
            },
        ))
    }

    /// Reduces over `axes`. With `keep` the reduced axes remain with extent
    /// one. Max routes its gradient to the first maximal element in
    /// row-major order.
    pub fn reduce(&self, op: ReduceOp, axes: &[usize], keep: bool) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut reduced = vec![false; rank];
        for &ax in axes {
            if ax >= rank {
                return Err(Error::InvalidAxis { axis: ax, rank });
            }
            reduced[ax] = true;
        }
        let kept_shape: Vec<usize> = self
            .shape()
            .iter()
            .zip(&reduced)
            .map(|(&e, &r)| if r { 1 } else { e })
            .collect();
        let out_len = numel(&kept_shape);
        let group = self.numel() / out_len;
        let kept_strides = contiguous_strides(&kept_shape);
        let map_strides: Vec<usize> = kept_strides
            .iter()
            .zip(&reduced)
            .map(|(&s, &r)| if r { 0 } else { s })
            .collect();
        let zeros = vec![0; rank];
        let x = self.data();

        let mut data = match op {
            ReduceOp::Max => vec![T::neg_infinity(); out_len],
            _ => vec![T::zero(); out_len],
        };
        let mut argmax = vec![0usize; if op == ReduceOp::Max { out_len } else { 0 }];
        for_each_strided(self.shape(), &map_strides, &zeros, |i, o, _| match op {
            ReduceOp::Sum | ReduceOp::Mean => data[o] += x[i],
            ReduceOp::Max => {
                if x[i] > data[o] {
                    data[o] = x[i];
                    argmax[o] = i;
                }
            }
        });
        if op == ReduceOp::Mean {
            let inv = T::one() / lit::<T>(group as f64);
            data.iter_mut().for_each(|v| *v *= inv);
        }
        let out_shape = if keep {
            kept_shape
        } else {
            let s: Vec<usize> = self
                .shape()
                .iter()
                .zip(&reduced)
                .filter(|(_, &r)| !r)
                .map(|(&e, _)| e)
                .collect();
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        };
        let in_shape = self.shape().to_vec();
        let len = self.numel();
        Ok(Tensor::from_op(data, out_shape, vec![self.clone()], move |g| {
            let mut gx = vec![T::zero(); len];
            match op {
                ReduceOp::Max => {
                    for (o, &i) in argmax.iter().enumerate() {
                        gx[i] += g[o];
                    }
                }
                ReduceOp::Sum | ReduceOp::Mean => {
                    let scale = if op == ReduceOp::Mean {
                        T::one() / lit::<T>(group as f64)
                    } else {
                        T::one()
                    };
                    for_each_strided(&in_shape, &map_strides, &zeros, |i, o, _| {
                        gx[i] = g[o] * scale;
                    });
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn sum_axes(&self, axes: &[usize], keep: bool) -> Result<Tensor<T>> {
        self.reduce(ReduceOp::Sum, axes, keep)
    }

    pub fn mean_axes(&self, axes: &[usize], keep: bool) -> Result<Tensor<T>> {
        self.reduce(ReduceOp::Mean, axes, keep)
    }

    pub fn max_axes(&self, axes: &[usize], keep: bool) -> Result<Tensor<T>> {
        self.reduce(ReduceOp::Max, axes, keep)
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.reduce(ReduceOp::Sum, &axes, false).expect("all axes are valid")
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.reduce(ReduceOp::Mean, &axes, false).expect("all axes are valid")
    }

    /// Reinterprets the row-major sequence under a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::ElementCount {
                shape: shape.to_vec(),
                expected: numel(shape),
                actual: self.numel(),
            });
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// Reorders axes: output axis `i` is input axis `order[i]`.
    pub fn permute(&self, order: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if order.len() != rank {
            return Err(Error::InvalidArgument(format!(
                "permutation {order:?} does not match rank {rank}"
            )));
        }
        for &ax in order {
            if ax >= rank || seen[ax] {
                return Err(Error::InvalidArgument(format!("{order:?} is not a permutation")));
            }
            seen[ax] = true;
        }
        let in_strides = contiguous_strides(self.shape());
        let out_shape: Vec<usize> = order.iter().map(|&ax| self.shape()[ax]).collect();
        let gather: Vec<usize> = order.iter().map(|&ax| in_strides[ax]).collect();
        let zeros = vec![0; rank];
        let x = self.data();
        let mut data = vec![T::zero(); self.numel()];
        for_each_strided(&out_shape, &gather, &zeros, |o, i, _| data[o] = x[i]);
        let len = self.numel();
        let shape_for_grad = out_shape.clone();
        Ok(Tensor::from_op(data, out_shape, vec![self.clone()], move |g| {
            let mut gx = vec![T::zero(); len];
            for_each_strided(&shape_for_grad, &gather, &zeros, |o, i, _| gx[i] = g[o]);
            vec![Some(gx)]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor<T>> {
        let rank = self.rank();
        if rank < 2 {
            return Err(Error::shape("transpose needs rank >= 2"));
        }
        let mut order: Vec<usize> = (0..rank).collect();
        order.swap(rank - 2, rank - 1);
        self.permute(&order)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check::{grad_check, GradCheckOptions};
    use proptest::prelude::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    /// Naive broadcast oracle: expand both operands by explicit index math.
    fn broadcast_oracle(a: &[f64], sa: &[usize], b: &[f64], sb: &[usize]) -> (Vec<usize>, Vec<f64>) {
        let rank = sa.len().max(sb.len());
        let pad = |s: &[usize]| {
            let mut p = vec![1; rank - s.len()];
            p.extend_from_slice(s);
            p
        };
        let (pa, pb) = (pad(sa), pad(sb));
        let out: Vec<usize> = (0..rank).map(|i| pa[i].max(pb[i])).collect();
        let total: usize = out.iter().product();
        let mut vals = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut idx = vec![0; rank];
            for d in (0..rank).rev() {
                idx[d] = rem % out[d];
                rem /= out[d];
            }
            let offset = |p: &[usize]| {
                let mut off = 0;
                for d in 0..rank {
                    let i = if p[d] == 1 { 0 } else { idx[d] };
                    off = off * p[d] + i;
                }
                off
            };
            vals.push(a[offset(&pa)] * b[offset(&pb)]);
        }
        (out, vals)
    }

    #[test]
    fn add_two_vectors() {
        let r = t(&[1.0, 2.0], &[2]).add(&t(&[3.0, 4.0], &[2])).unwrap();
        assert_eq!(r.data(), &[4.0, 6.0]);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        assert_eq!(t(&[0.0], &[1]).sigmoid().data(), &[0.5]);
    }

    #[test]
    fn column_times_row_matches_loop_oracle() {
        let a = [1.5, -2.0];
        let b = [0.5, 3.0, -1.0];
        let r = t(&a, &[2, 1]).mul(&t(&b, &[1, 3])).unwrap();
        assert_eq!(r.shape(), &[2, 3]);
        let (shape, expect) = broadcast_oracle(&a, &[2, 1], &b, &[1, 3]);
        assert_eq!(shape, vec![2, 3]);
        assert_eq!(r.data(), expect.as_slice());
    }

    #[test]
    fn incompatible_broadcast_is_an_error() {
        let err = t(&[1.0, 2.0, 3.0], &[3]).add(&t(&[1.0, 2.0], &[2])).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn identity_matmul_and_hand_product() {
        let m = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let eye = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        assert_eq!(eye.matmul(&m).unwrap().data(), m.data());
        let r = m.matmul(&t(&[5.0, 6.0, 7.0, 8.0], &[2, 2])).unwrap();
        assert_eq!(r.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn batched_matmul_shape_and_errors() {
        let a = Tensor::<f64>::ones(&[2, 3, 4]);
        let b = Tensor::<f64>::ones(&[2, 4, 5]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 5]);
        assert!(c.data().iter().all(|&v| v == 4.0));
        let bad = Tensor::<f64>::ones(&[2, 3, 5]);
        assert!(matches!(a.matmul(&bad), Err(Error::ShapeMismatch(_))));
        let shared = Tensor::<f64>::ones(&[4, 2]);
        assert_eq!(a.matmul(&shared).unwrap().shape(), &[2, 3, 2]);
    }

    #[test]
    fn reductions() {
        let m = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        assert_eq!(m.sum_axes(&[1], false).unwrap().data(), &[3.0, 7.0]);
        let c = Tensor::<f64>::full(&[3, 4], 2.5);
        assert_eq!(c.mean_all().data(), &[2.5]);
        assert!(matches!(m.sum_axes(&[2], false), Err(Error::InvalidAxis { axis: 2, rank: 2 })));
    }

    #[test]
    fn max_ties_route_gradient_to_first_occurrence() {
        let x = Tensor::<f64>::parameter(vec![1.0, 5.0, 5.0, 2.0], &[2, 2]).unwrap();
        let m = x.max_axes(&[1], false).unwrap();
        assert_eq!(m.data(), &[5.0, 5.0]);
        m.sum_all().backward().unwrap();
        // Enumerate: row 0 max at col 1, row 1 max at col 0 (first of ties).
        let mut expect = vec![0.0; 4];
        for row in 0..2 {
            let vals = &x.data()[row * 2..row * 2 + 2];
            let best = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let first = vals.iter().position(|&v| v == best).unwrap();
            expect[row * 2 + first] = 1.0;
        }
        assert_eq!(x.grad().unwrap(), expect);
    }

    #[test]
    fn reshape_preserves_sequence() {
        let m = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let r = m.reshape(&[3, 2]).unwrap();
        assert_eq!(r.data(), m.data());
        assert!(matches!(m.reshape(&[4, 2]), Err(Error::ElementCount { .. })));
    }

    #[test]
    fn nchw_to_nhwc_index_oracle() {
        let shape = [2, 3, 4, 5];
        let data: Vec<f64> = (0..120).map(|v| v as f64).collect();
        let x = t(&data, &shape);
        let p = x.permute(&[0, 2, 3, 1]).unwrap();
        assert_eq!(p.shape(), &[2, 4, 5, 3]);
        for n in 0..2 {
            for c in 0..3 {
                for h in 0..4 {
                    for w in 0..5 {
                        let src = ((n * 3 + c) * 4 + h) * 5 + w;
                        let dst = ((n * 4 + h) * 5 + w) * 3 + c;
                        assert_eq!(p.data()[dst], data[src]);
                    }
                }
            }
        }
    }

    #[test]
    fn primitive_gradients_pass_finite_differences() {
        let opts = GradCheckOptions::default();
        let x0 = t(&[0.3, -0.7, 1.1, 0.45, -1.3, 0.8], &[2, 3]);
        let pos = t(&[0.3, 0.7, 1.1, 0.45, 1.3, 0.8], &[2, 3]);
        let other = t(&[0.9, -0.2, 0.6], &[1, 3]);
        let checks: Vec<(&str, Tensor<f64>, Box<dyn Fn(&Tensor<f64>) -> Result<Tensor<f64>>>)> = vec![
            ("add", x0.clone(), Box::new(|x| Ok(x.add(&other)?.mul(x)?.sum_all()))),
            ("sub", x0.clone(), Box::new(|x| Ok(other.sub(x)?.mul(x)?.sum_all()))),
            ("mul", x0.clone(), Box::new(|x| Ok(x.mul(&other)?.sum_all()))),
            ("div", x0.clone(), Box::new(|x| Ok(other.div(&x.exp())?.sum_all()))),
            ("relu", x0.clone(), Box::new(|x| Ok(x.relu().mul(x)?.sum_all()))),
            ("sigmoid", x0.clone(), Box::new(|x| Ok(x.sigmoid().sum_all()))),
            ("exp", x0.clone(), Box::new(|x| Ok(x.exp().sum_all()))),
            ("log", pos.clone(), Box::new(|x| Ok(x.log().sum_all()))),
            ("matmul", x0.clone(), Box::new(|x| Ok(x.matmul(&x.transpose_last()?)?.sum_all()))),
            ("mean", x0.clone(), Box::new(|x| Ok(x.mean_axes(&[0], true)?.exp().sum_all()))),
            ("max", x0.clone(), Box::new(|x| Ok(x.max_axes(&[1], false)?.exp().sum_all()))),
            ("reshape", x0.clone(), Box::new(|x| Ok(x.reshape(&[3, 2])?.transpose_last()?.matmul(&other.reshape(&[3, 1])?)?.exp().sum_all()))),
            ("permute", x0.clone(), Box::new(|x| Ok(x.permute(&[1, 0])?.mul(&other.reshape(&[3, 1])?)?.exp().sum_all()))),
        ];
        for (name, x, f) in checks {
            let report = grad_check(|v| f(v), &x, &opts).unwrap();
            assert!(report.max_rel_error < 1e-5, "{name}: {report:?}");
        }
    }

    fn small_shape() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..=4, 1..=3)
    }

    proptest! {
        #[test]
        fn broadcast_matches_index_oracle(sa in small_shape(), sb in small_shape(), mask in prop::collection::vec(any::<bool>(), 3)) {
            // Force compatibility: keep the right-aligned extents of `sa` in `sb`
            // or collapse them to one.
            let rank = sa.len().max(sb.len());
            let mut sb = sb;
            for i in 0..sb.len() {
                let from_right = sb.len() - 1 - i;
                if from_right < sa.len() {
                    let ea = sa[sa.len() - 1 - from_right];
                    sb[i] = if mask[i % 3] { ea } else { 1 };
                }
            }
            let _ = rank;
            let na: usize = sa.iter().product();
            let nb: usize = sb.iter().product();
            let a: Vec<f64> = (0..na).map(|i| i as f64 * 0.5 - 1.0).collect();
            let b: Vec<f64> = (0..nb).map(|i| 2.0 - i as f64 * 0.25).collect();
            let r = t(&a, &sa).mul(&t(&b, &sb)).unwrap();
            let (shape, expect) = broadcast_oracle(&a, &sa, &b, &sb);
            prop_assert_eq!(r.shape(), shape.as_slice());
            prop_assert_eq!(r.data(), expect.as_slice());
        }

        #[test]
        fn reshape_and_permute_round_trip_bitwise(shape in prop::collection::vec(1usize..=4, 2..=4), seed in 0u64..1000) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 7.0).collect();
            let x = t(&data, &shape);
            let flat = x.reshape(&[n]).unwrap().reshape(&shape).unwrap();
            prop_assert_eq!(flat.data(), x.data());
            let mut order: Vec<usize> = (0..shape.len()).collect();
            order.rotate_left((seed as usize) % shape.len());
            let mut inverse = vec![0; order.len()];
            for (i, &o) in order.iter().enumerate() {
                inverse[o] = i;
            }
            let back = x.permute(&order).unwrap().permute(&inverse).unwrap();
            prop_assert_eq!(back.shape(), x.shape());
            prop_assert_eq!(back.data(), x.data());
        }
    }
}
