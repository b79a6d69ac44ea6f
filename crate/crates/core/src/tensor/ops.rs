//! Elementwise, reduction, shape and linear-algebra primitives.

use std::sync::Arc;

use super::{numel, split_axis, Scalar, Tensor, Var};
use crate::error::{dim_err, Result};

fn same_shape<T: Scalar>(a: &Var<'_, T>, b: &Var<'_, T>, op: &str) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(dim_err!("{op}: shapes {sa:?} and {sb:?} differ"));
    }
    Ok(())
}

fn check_axis(shape: &[usize], axis: usize, op: &str) -> Result<()> {
    if axis >= shape.len() {
        return Err(dim_err!("{op}: axis {axis} out of range for shape {shape:?}"));
    }
    Ok(())
}

fn shape_without(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        same_shape(&self, &other, "add")?;
        let value = self.value().zip_map(&other.value(), |a, b| a + b);
        Ok(self.graph().apply("add", &[self, other], value, |g, _| {
            vec![Some(g.clone()), Some(g.clone())]
        }))
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        same_shape(&self, &other, "sub")?;
        let value = self.value().zip_map(&other.value(), |a, b| a - b);
        Ok(self.graph().apply("sub", &[self, other], value, |g, _| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        }))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        same_shape(&self, &other, "mul")?;
        let (a, b) = (self.value(), other.value());
        let value = a.zip_map(&b, |x, y| x * y);
        Ok(self.graph().apply("mul", &[self, other], value, move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |gv, y| gv * y)),
                need[1].then(|| g.zip_map(&a, |gv, x| gv * x)),
            ]
        }))
    }

    pub fn scale(self, c: T) -> Var<'g, T> {
        let value = self.value().map(|v| v * c);
        self.graph()
            .apply("scale", &[self], value, move |g, _| vec![Some(g.map(|v| v * c))])
    }

    pub fn add_scalar(self, c: T) -> Var<'g, T> {
        let value = self.value().map(|v| v + c);
        self.graph()
            .apply("add_scalar", &[self], value, |g, _| vec![Some(g.clone())])
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-T::one())
    }

    pub fn square(self) -> Var<'g, T> {
        let x = self.value();
        let value = x.map(|v| v * v);
        let two = T::from_f64(2.0);
        self.graph().apply("square", &[self], value, move |g, _| {
            vec![Some(g.zip_map(&x, |gv, v| two * v * gv))]
        })
    }

    pub fn exp(self) -> Var<'g, T> {
        let y = Arc::new(self.value().map(|v| v.exp()));
        let saved = y.clone();
        self.graph().apply("exp", &[self], y, move |g, _| {
            vec![Some(g.zip_map(&saved, |gv, e| gv * e))]
        })
    }

    /// Natural logarithm; inputs must be positive for a finite result.
    pub fn log(self) -> Var<'g, T> {
        let x = self.value();
        let value = x.map(|v| v.ln());
        self.graph().apply("log", &[self], value, move |g, _| {
            vec![Some(g.zip_map(&x, |gv, v| gv / v))]
        })
    }

    pub fn sqrt(self) -> Var<'g, T> {
        let y = Arc::new(self.value().map(|v| v.sqrt()));
        let saved = y.clone();
        let half = T::from_f64(0.5);
        self.graph().apply("sqrt", &[self], y, move |g, _| {
            vec![Some(g.zip_map(&saved, |gv, s| gv * half / s))]
        })
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(self) -> Var<'g, T> {
        let x = self.value();
        let value = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.graph().apply("relu", &[self], value, move |g, _| {
            vec![Some(g.zip_map(&x, |gv, v| if v > T::zero() { gv } else { T::zero() }))]
        })
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let total: T = x.data().iter().copied().sum();
        let shape = x.shape().to_vec();
        self.graph().apply("sum", &[self], Tensor::scalar(total), move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.item()))]
        })
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.value().len();
        self.sum().scale(T::one() / T::from_f64(n as f64))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        check_axis(x.shape(), axis, "sum_axis")?;
        let in_shape = x.shape().to_vec();
        let (outer, n, inner) = split_axis(&in_shape, axis);
        let mut out = vec![T::zero(); outer * inner];
        let xd = x.data();
        for o in 0..outer {
            for j in 0..n {
                let src = &xd[(o * n + j) * inner..(o * n + j + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let value = Tensor::new(shape_without(&in_shape, axis), out)?;
        Ok(self.graph().apply("sum_axis", &[self], value, move |g, _| {
            let gd = g.data();
            let mut dx = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                for _ in 0..n {
                    dx.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::new(in_shape.clone(), dx).expect("shape"))]
        }))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        check_axis(&shape, axis, "mean_axis")?;
        let n = shape[axis];
        Ok(self.sum_axis(axis)?.scale(T::one() / T::from_f64(n as f64)))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        check_axis(x.shape(), axis, "softmax")?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let y = Arc::new(softmax_values(&x, outer, n, inner));
        let saved = y.clone();
        Ok(self.graph().apply("softmax", &[self], y, move |g, _| {
            let (yd, gd) = (saved.data(), g.data());
            let mut dx = vec![T::zero(); yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * n + j) * inner + i;
                    let dot: T = (0..n).map(|j| gd[idx(j)] * yd[idx(j)]).sum();
                    for j in 0..n {
                        dx[idx(j)] = yd[idx(j)] * (gd[idx(j)] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(saved.shape().to_vec(), dx).expect("shape"))]
        }))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        check_axis(x.shape(), axis, "log_softmax")?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![T::zero(); xd.len()];
        let mut probs = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| xd[idx(j)]).fold(T::neg_infinity(), T::max);
                let lse = (0..n).map(|j| (xd[idx(j)] - max).exp()).sum::<T>().ln() + max;
                for j in 0..n {
                    out[idx(j)] = xd[idx(j)] - lse;
                    probs[idx(j)] = out[idx(j)].exp();
                }
            }
        }
        let shape = x.shape().to_vec();
        let value = Tensor::new(shape.clone(), out)?;
        Ok(self.graph().apply("log_softmax", &[self], value, move |g, _| {
            let gd = g.data();
            let mut dx = vec![T::zero(); gd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * n + j) * inner + i;
                    let total: T = (0..n).map(|j| gd[idx(j)]).sum();
                    for j in 0..n {
                        dx[idx(j)] = gd[idx(j)] - probs[idx(j)] * total;
                    }
                }
            }
            vec![Some(Tensor::new(shape.clone(), dx).expect("shape"))]
        }))
    }

    /// Picks entry `index` along `axis`, removing the axis.
    pub fn select(self, axis: usize, index: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        check_axis(x.shape(), axis, "select")?;
        let in_shape = x.shape().to_vec();
        let (outer, n, inner) = split_axis(&in_shape, axis);
        if index >= n {
            return Err(dim_err!("select: index {index} out of range for axis of length {n}"));
        }
        let xd = x.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * n + index) * inner..(o * n + index + 1) * inner]);
        }
        let value = Tensor::new(shape_without(&in_shape, axis), out)?;
        Ok(self.graph().apply("select", &[self], value, move |g, _| {
            let mut dx = vec![T::zero(); numel(&in_shape)];
            let gd = g.data();
            for o in 0..outer {
                dx[(o * n + index) * inner..(o * n + index + 1) * inner]
                    .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
            }
            vec![Some(Tensor::new(in_shape.clone(), dx).expect("shape"))]
        }))
    }

    /// Row-wise gather on a `[N × K]` matrix: output `[N]` with entry
    /// `x[r, indices[r]]`.
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.len() != 2 || shape[0] != indices.len() {
            return Err(dim_err!(
                "gather_rows: need [{}, K] input, got {shape:?}",
                indices.len()
            ));
        }
        let k = shape[1];
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(dim_err!("gather_rows: index {bad} out of range for {k} columns"));
        }
        let value: Vec<T> = indices
            .iter()
            .enumerate()
            .map(|(r, &c)| x.data()[r * k + c])
            .collect();
        let indices = indices.to_vec();
        let value = Tensor::new([indices.len()], value)?;
        Ok(self.graph().apply("gather_rows", &[self], value, move |g, _| {
            let mut dx = vec![T::zero(); shape[0] * k];
            for (r, &c) in indices.iter().enumerate() {
                dx[r * k + c] = g.data()[r];
            }
            vec![Some(Tensor::new(shape.clone(), dx).expect("shape"))]
        }))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'g, T>> {
        let shape = shape.into();
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let value = (*x).clone().reshape(shape)?;
        Ok(self.graph().apply("reshape", &[self], value, move |g, _| {
            vec![Some(g.clone().reshape(in_shape.clone()).expect("shape"))]
        }))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let &[r, c] = x.shape() else {
            return Err(dim_err!("transpose needs rank 2, got {:?}", x.shape()));
        };
        let value = transpose2(x.data(), r, c);
        let value = Tensor::new([c, r], value)?;
        Ok(self.graph().apply("transpose", &[self], value, move |g, _| {
            vec![Some(Tensor::new([r, c], transpose2(g.data(), c, r)).expect("shape"))]
        }))
    }

    /// Matrix product of `[m × k]` and `[k × n]`.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            return Err(dim_err!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                a.shape(),
                b.shape()
            ));
        };
        if k != k2 {
            return Err(dim_err!(
                "matmul inner dimensions differ: {:?} x {:?}",
                a.shape(),
                b.shape()
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1), T::zero(), &mut out);
        let value = Tensor::new([m, n], out)?;
        Ok(self.graph().apply("matmul", &[self, other], value, move |g, need| {
            let gd = g.data();
            let da = need[0].then(|| {
                // g · bᵀ
                let mut da = vec![T::zero(); m * k];
                T::gemm(m, n, k, gd, (n as isize, 1), b.data(), (1, n as isize), T::zero(), &mut da);
                Tensor::new([m, k], da).expect("shape")
            });
            let db = need[1].then(|| {
                // aᵀ · g
                let mut db = vec![T::zero(); k * n];
                T::gemm(k, m, n, a.data(), (1, k as isize), gd, (n as isize, 1), T::zero(), &mut db);
                Tensor::new([k, n], db).expect("shape")
            });
            vec![da, db]
        }))
    }

    /// Divides each slice along `axis` by its Euclidean norm. A zero slice
    /// stays zero (and passes no gradient).
    pub fn l2_normalize(self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        check_axis(x.shape(), axis, "l2_normalize")?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let xd = x.data();
        let mut norms = vec![T::zero(); outer * inner];
        let mut y = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let norm = (0..n).map(|j| xd[idx(j)] * xd[idx(j)]).sum::<T>().sqrt();
                norms[o * inner + i] = norm;
                if norm > T::zero() {
                    for j in 0..n {
                        y[idx(j)] = xd[idx(j)] / norm;
                    }
                }
            }
        }
        let shape = x.shape().to_vec();
        let y = Arc::new(Tensor::new(shape.clone(), y)?);
        let saved = y.clone();
        Ok(self.graph().apply("l2_normalize", &[self], y, move |g, _| {
            let (yd, gd) = (saved.data(), g.data());
            let mut dx = vec![T::zero(); yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let norm = norms[o * inner + i];
                    if norm <= T::zero() {
                        continue;
                    }
                    let idx = |j: usize| (o * n + j) * inner + i;
                    let dot: T = (0..n).map(|j| yd[idx(j)] * gd[idx(j)]).sum();
                    for j in 0..n {
                        dx[idx(j)] = (gd[idx(j)] - yd[idx(j)] * dot) / norm;
                    }
                }
            }
            vec![Some(Tensor::new(shape.clone(), dx).expect("shape"))]
        }))
    }

    /// Euclidean norm of each slice along `axis`, removing it. The
    /// subgradient at a zero slice is zero.
    pub fn l2_norm(self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        check_axis(x.shape(), axis, "l2_norm")?;
        let in_shape = x.shape().to_vec();
        let (outer, n, inner) = split_axis(&in_shape, axis);
        let xd = x.data();
        let mut norms = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                norms[o * inner + i] = (0..n)
                    .map(|j| {
                        let v = xd[(o * n + j) * inner + i];
                        v * v
                    })
                    .sum::<T>()
                    .sqrt();
            }
        }
        let norms = Arc::new(Tensor::new(shape_without(&in_shape, axis), norms)?);
        let saved = norms.clone();
        Ok(self.graph().apply("l2_norm", &[self], norms, move |g, _| {
            let (xd, nd, gd) = (x.data(), saved.data(), g.data());
            let mut dx = vec![T::zero(); xd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let norm = nd[o * inner + i];
                    if norm <= T::zero() {
                        continue;
                    }
                    let scale = gd[o * inner + i] / norm;
                    for j in 0..n {
                        let idx = (o * n + j) * inner + i;
                        dx[idx] = xd[idx] * scale;
                    }
                }
            }
            vec![Some(Tensor::new(in_shape.clone(), dx).expect("shape"))]
        }))
    }

    /// Affine map `x · wᵀ + b` for `x: [N × in]`, `w: [out × in]`, `b: [out]`.
    pub fn linear(self, weight: Var<'g, T>, bias: Var<'g, T>) -> Result<Var<'g, T>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (&[batch, fan_in], &[fan_out, w_in]) = (x.shape(), w.shape()) else {
            return Err(dim_err!(
                "linear needs [N, in] input and [out, in] weight, got {:?} and {:?}",
                x.shape(),
                w.shape()
            ));
        };
        if fan_in != w_in || b.shape() != [fan_out] {
            return Err(dim_err!(
                "linear: input {:?}, weight {:?}, bias {:?} disagree",
                x.shape(),
                w.shape(),
                b.shape()
            ));
        }
        let mut out = Vec::with_capacity(batch * fan_out);
        for _ in 0..batch {
            out.extend_from_slice(b.data());
        }
        T::gemm(
            batch,
            fan_in,
            fan_out,
            x.data(),
            (fan_in as isize, 1),
            w.data(),
            (1, fan_in as isize),
            T::one(),
            &mut out,
        );
        let value = Tensor::new([batch, fan_out], out)?;
        Ok(self.graph().apply("linear", &[self, weight, bias], value, move |g, need| {
            let gd = g.data();
            let dx = need[0].then(|| {
                let mut dx = vec![T::zero(); batch * fan_in];
                T::gemm(
                    batch,
                    fan_out,
                    fan_in,
                    gd,
                    (fan_out as isize, 1),
                    w.data(),
                    (fan_in as isize, 1),
                    T::zero(),
                    &mut dx,
                );
                Tensor::new([batch, fan_in], dx).expect("shape")
            });
            let dw = need[1].then(|| {
                let mut dw = vec![T::zero(); fan_out * fan_in];
                T::gemm(
                    fan_out,
                    batch,
                    fan_in,
                    gd,
                    (1, fan_out as isize),
                    x.data(),
                    (fan_in as isize, 1),
                    T::zero(),
                    &mut dw,
                );
                Tensor::new([fan_out, fan_in], dw).expect("shape")
            });
            let db = need[2].then(|| {
                let mut db = vec![T::zero(); fan_out];
                for r in 0..batch {
                    for (d, &v) in db.iter_mut().zip(&gd[r * fan_out..(r + 1) * fan_out]) {
                        *d += v;
                    }
                }
                Tensor::new([fan_out], db).expect("shape")
            });
            vec![dx, dw, db]
        }))
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'g, T: Scalar>(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
    let Some(first) = parts.first() else {
        return Err(dim_err!("concat of zero tensors"));
    };
    let values: Vec<Arc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    check_axis(&base, axis, "concat")?;
    for v in &values[1..] {
        let s = v.shape();
        if s.len() != base.len()
            || s.iter().enumerate().any(|(d, &e)| d != axis && e != base[d])
        {
            return Err(dim_err!("concat: shapes {base:?} and {s:?} incompatible on axis {axis}"));
        }
    }
    let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let (outer, _, inner) = split_axis(&base, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &len) in values.iter().zip(&lens) {
            out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let mut shape = base.clone();
    shape[axis] = total;
    let value = Tensor::new(shape, out)?;
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    Ok(first.graph().apply("concat", parts, value, move |g, need| {
        let gd = g.data();
        let mut offset = 0;
        let mut grads = Vec::with_capacity(lens.len());
        for (p, &len) in lens.iter().enumerate() {
            if need[p] {
                let mut d = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let start = (o * total + offset) * inner;
                    d.extend_from_slice(&gd[start..start + len * inner]);
                }
                grads.push(Some(Tensor::new(shapes[p].clone(), d).expect("shape")));
            } else {
                grads.push(None);
            }
            offset += len;
        }
        grads
    }))
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack<'g, T: Scalar>(parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    let rows = parts
        .iter()
        .map(|p| {
            let mut s = p.shape();
            s.insert(0, 1);
            p.reshape(s)
        })
        .collect::<Result<Vec<_>>>()?;
    concat(&rows, 0)
}

pub(crate) fn softmax_values<T: Scalar>(x: &Tensor<T>, outer: usize, n: usize, inner: usize) -> Tensor<T> {
    let xd = x.data();
    let mut y = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| xd[idx(j)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..n {
                let e = (xd[idx(j)] - max).exp();
                y[idx(j)] = e;
                total += e;
            }
            for j in 0..n {
                y[idx(j)] = y[idx(j)] / total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), y).expect("shape")
}

fn transpose2<T: Scalar>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 1], &[0., 1.]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[2.0, 4.0]);

        let x = g.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let eye = g.constant(Tensor::eye(3));
        assert_eq!(*eye.matmul(x).unwrap().value(), *x.value());

        let z = g.constant(Tensor::zeros([2, 3]));
        let r = g.constant(t(&[3, 4], &[0.3; 12]));
        assert_eq!(*z.matmul(r).unwrap().value(), Tensor::zeros([2, 4]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let msg = a.matmul(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn relu_examples() {
        let g = Graph::new();
        let x = g.variable(t(&[3], &[-1., 0., 2.]));
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
        let x = g.variable(t(&[2], &[-1., 2.]));
        let loss = x.relu().sum();
        g.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_examples() {
        let g = Graph::new();
        let s = g.constant(t(&[2], &[0., 0.])).softmax(0).unwrap();
        assert_eq!(s.value().data(), &[0.5, 0.5]);
        let s = g.constant(t(&[3], &[7.5, 7.5, 7.5])).softmax(0).unwrap();
        for &v in s.value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let ln = [1f64.ln(), 2f64.ln(), 3f64.ln()];
        let s = g.constant(t(&[3], &ln)).softmax(0).unwrap();
        for (v, e) in s.value().data().iter().zip([1. / 6., 2. / 6., 3. / 6.]) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_along_inner_axis() {
        let g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1., 2., 3., 0., 0., 0.]));
        let cols = x.softmax(0).unwrap().value();
        for c in 0..3 {
            assert!((cols.at(&[0, c]) + cols.at(&[1, c]) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_examples() {
        let g = Graph::new();
        let x = g.variable(t(&[3], &[0.5, -1.0, 4.0]));
        g.backward(x.sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 1.0]);

        let g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        g.backward(x.mul(x).unwrap().sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn l2_normalize_zero_slice_stays_zero() {
        let g = Graph::new();
        let x = g.variable(t(&[2, 2], &[0., 0., 3., 4.]));
        let y = x.l2_normalize(1).unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.0, 0.6, 0.8]);
        g.backward(y.sum()).unwrap();
        assert_eq!(&x.grad().unwrap().data()[..2], &[0.0, 0.0]);
    }

    #[test]
    fn reductions_and_reshapes() {
        let g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        assert_eq!(x.sum_axis(0).unwrap().value().data(), &[5., 7., 9.]);
        assert_eq!(x.mean_axis(1).unwrap().value().data(), &[2., 5.]);
        assert_eq!(x.select(1, 2).unwrap().value().data(), &[3., 6.]);
        assert_eq!(x.transpose().unwrap().value().data(), &[1., 4., 2., 5., 3., 6.]);
        assert_eq!(x.gather_rows(&[2, 0]).unwrap().value().data(), &[3., 4.]);
        let c = concat(&[x, x.select(1, 0).unwrap().reshape([2, 1]).unwrap()], 1).unwrap();
        assert_eq!(c.value().data(), &[1., 2., 3., 1., 4., 5., 6., 4.]);
        assert!(x.gather_rows(&[3, 0]).is_err());
        assert!(x.sum_axis(2).is_err());
    }
}
