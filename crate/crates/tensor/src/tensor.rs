use std::fmt;
use std::sync::Arc;

use crate::error::{contract, shape_err, Result};
use crate::kernels;

/// Immutable row-major n-dimensional array of `f64`.
///
/// Cloning is cheap: the buffer is reference counted and only copied on
/// mutation through [`Tensor::data_mut`].
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if numel_of(&shape) != data.len() {
            return Err(shape_err("new", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![], vec![v])
    }

    pub fn vector(v: Vec<f64>) -> Self {
        Self::from_parts(vec![v.len()], v)
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: f64) -> Self {
        let shape = shape.into();
        let n = numel_of(&shape);
        Self::from_parts(shape, vec![v; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let data = (0..numel_of(&shape)).map(&mut f).collect();
        Self::from_parts(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(contract("item", format!("tensor of shape {:?} is not a scalar", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.ndim(), "index rank");
        let mut off = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range for axis {i}");
            off = off * ext + ix;
        }
        self.data[off]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if numel_of(&shape) != self.numel() {
            return Err(shape_err("reshape", &self.shape, &shape));
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two equal-shape tensors.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(shape_err("zip_map", &self.shape, &other.shape));
        }
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Broadcasting elementwise op; see [`broadcast_shape`].
    pub fn broadcast_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let out_shape = broadcast_shape(op, &self.shape, &other.shape)?;
        let n = numel_of(&out_shape);
        let (a, b) = (self.data(), other.data());
        let data = if a.len() == n && b.len() == n {
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
        } else if a.len() == n {
            let inner = b.len();
            a.iter().enumerate().map(|(i, &x)| f(x, b[i % inner])).collect()
        } else {
            let inner = a.len();
            b.iter().enumerate().map(|(i, &y)| f(a[i % inner], y)).collect()
        };
        Ok(Self::from_parts(out_shape, data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.broadcast_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.broadcast_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.broadcast_with(other, "mul", |a, b| a * b)
    }

    /// Sums a broadcast gradient back down to `shape` (a suffix of `self.shape`).
    pub fn reduce_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let inner = numel_of(shape);
        let mut out = vec![0.0; inner];
        for chunk in self.data.chunks(inner.max(1)) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        Self::from_parts(shape.to_vec(), out)
    }

    /// Batched matrix product `op(a) · op(b)` where `op` optionally transposes
    /// the trailing two axes. `b` may be 2-D and is then shared across the batch.
    pub fn matmul_ex(&self, other: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
        let op = "matmul";
        if self.ndim() < 2 || other.ndim() < 2 {
            return Err(shape_err(op, &self.shape, &other.shape));
        }
        let (ar, ac) = (self.shape[self.ndim() - 2], self.shape[self.ndim() - 1]);
        let (br, bc) = (other.shape[other.ndim() - 2], other.shape[other.ndim() - 1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err(op, &self.shape, &other.shape));
        }
        let a_batch = &self.shape[..self.ndim() - 2];
        let b_batch = &other.shape[..other.ndim() - 2];
        let mut out_shape = a_batch.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; numel_of(&out_shape)];
        if b_batch.is_empty() && !ta {
            // Fold the batch into the row dimension: one large product.
            let rows = numel_of(a_batch) * m;
            kernels::gemm(self.data(), other.data(), &mut out, rows, k, n, false, tb);
        } else if a_batch == b_batch {
            let batches = numel_of(a_batch);
            let (sa, sb, sc) = (m * k, k * n, m * n);
            for bi in 0..batches {
                kernels::gemm(
                    &self.data()[bi * sa..(bi + 1) * sa],
                    &other.data()[bi * sb..(bi + 1) * sb],
                    &mut out[bi * sc..(bi + 1) * sc],
                    m,
                    k,
                    n,
                    ta,
                    tb,
                );
            }
        } else if b_batch.is_empty() {
            let batches = numel_of(a_batch);
            let (sa, sc) = (m * k, m * n);
            for bi in 0..batches {
                kernels::gemm(
                    &self.data()[bi * sa..(bi + 1) * sa],
                    other.data(),
                    &mut out[bi * sc..(bi + 1) * sc],
                    m,
                    k,
                    n,
                    ta,
                    tb,
                );
            }
        } else {
            return Err(shape_err(op, &self.shape, &other.shape));
        }
        Ok(Self::from_parts(out_shape, out))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_ex(other, false, false)
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", &self.shape, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let mut in_strides = vec![1usize; nd];
        for i in (0..nd.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * self.shape[i + 1];
        }
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = self.numel();
        let mut out = Vec::with_capacity(n);
        let mut idx = vec![0usize; nd];
        let src = self.data();
        let mut off = 0usize;
        for _ in 0..n {
            out.push(src[off]);
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                off += strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                off -= strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Self::from_parts(out_shape, out))
    }

    /// Swaps the trailing two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let nd = self.ndim();
        if nd < 2 {
            return Err(shape_err("transpose", &self.shape, &[]));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| contract("concat", "no inputs"))?;
        let nd = first.ndim();
        if axis >= nd {
            return Err(shape_err("concat", first.shape(), &[axis]));
        }
        for p in parts {
            let ok = p.ndim() == nd && (0..nd).all(|i| i == axis || p.shape[i] == first.shape[i]);
            if !ok {
                return Err(shape_err("concat", first.shape(), p.shape()));
            }
        }
        let outer = numel_of(&first.shape[..axis]);
        let inner = numel_of(&first.shape[axis + 1..]);
        let total_axis: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut out_shape = first.shape.clone();
        out_shape[axis] = total_axis;
        let mut out = Vec::with_capacity(numel_of(&out_shape));
        for o in 0..outer {
            for p in parts {
                let blk = p.shape[axis] * inner;
                out.extend_from_slice(&p.data()[o * blk..(o + 1) * blk]);
            }
        }
        Ok(Self::from_parts(out_shape, out))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.ndim() || start + len > self.shape[axis] {
            return Err(shape_err("narrow", &self.shape, &[axis, start, len]));
        }
        let outer = numel_of(&self.shape[..axis]);
        let inner = numel_of(&self.shape[axis + 1..]);
        let ext = self.shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self::from_parts(shape, out))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.ndim() {
            return Err(shape_err("sum_axis", &self.shape, &[axis]));
        }
        let outer = numel_of(&self.shape[..axis]);
        let inner = numel_of(&self.shape[axis + 1..]);
        let ext = self.shape[axis];
        let mut out = vec![0.0; outer * inner];
        let src = self.data();
        for o in 0..outer {
            for a in 0..ext {
                let base = (o * ext + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Self::from_parts(shape, out))
    }

    /// Inserts `axis` with extent `ext`, repeating values along it.
    pub fn expand_axis(&self, axis: usize, ext: usize) -> Result<Tensor> {
        if axis > self.ndim() {
            return Err(shape_err("expand_axis", &self.shape, &[axis]));
        }
        let outer = numel_of(&self.shape[..axis]);
        let inner = numel_of(&self.shape[axis..]);
        let mut out = Vec::with_capacity(outer * ext * inner);
        for o in 0..outer {
            let blk = &self.data()[o * inner..(o + 1) * inner];
            for _ in 0..ext {
                out.extend_from_slice(blk);
            }
        }
        let mut shape = self.shape.clone();
        shape.insert(axis, ext);
        Ok(Self::from_parts(shape, out))
    }

    /// Softmax along `axis` with max-subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        self.along_axis("softmax", axis, |xs, out| {
            let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &x) in out.iter_mut().zip(xs) {
                *o = (x - m).exp();
                z += *o;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        })
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        self.along_axis("log_softmax", axis, |xs, out| {
            let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            for (o, &x) in out.iter_mut().zip(xs) {
                *o = x - lse;
            }
        })
    }

    /// Applies `f` to every 1-D fibre along `axis`.
    pub(crate) fn along_axis(&self, op: &'static str, axis: usize, f: impl Fn(&[f64], &mut [f64])) -> Result<Tensor> {
        if axis >= self.ndim() {
            return Err(shape_err(op, &self.shape, &[axis]));
        }
        let ext = self.shape[axis];
        let inner = numel_of(&self.shape[axis + 1..]);
        let outer = numel_of(&self.shape[..axis]);
        let src = self.data();
        let mut out = vec![0.0; src.len()];
        if inner == 1 {
            for (xs, os) in src.chunks(ext.max(1)).zip(out.chunks_mut(ext.max(1))) {
                f(xs, os);
            }
        } else {
            let mut buf = vec![0.0; ext];
            let mut obuf = vec![0.0; ext];
            for o in 0..outer {
                for i in 0..inner {
                    for a in 0..ext {
                        buf[a] = src[(o * ext + a) * inner + i];
                    }
                    f(&buf, &mut obuf);
                    for a in 0..ext {
                        out[(o * ext + a) * inner + i] = obuf[a];
                    }
                }
            }
        }
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    /// Selects rows along axis 0; `None` yields a zero row.
    pub fn gather_rows(&self, index: &[Option<usize>]) -> Result<Tensor> {
        if self.ndim() == 0 {
            return Err(shape_err("gather_rows", &self.shape, &[]));
        }
        let rows = self.shape[0];
        let width = numel_of(&self.shape[1..]);
        let mut out = vec![0.0; index.len() * width];
        for (r, ix) in index.iter().enumerate() {
            if let Some(i) = *ix {
                if i >= rows {
                    return Err(shape_err("gather_rows", &self.shape, &[i]));
                }
                out[r * width..(r + 1) * width].copy_from_slice(&self.data()[i * width..(i + 1) * width]);
            }
        }
        let mut shape = self.shape.clone();
        shape[0] = index.len();
        Ok(Self::from_parts(shape, out))
    }

    /// Adjoint of [`Tensor::gather_rows`]: accumulates rows into `rows` slots.
    pub fn scatter_add_rows(&self, index: &[Option<usize>], rows: usize) -> Tensor {
        let width = numel_of(&self.shape[1..]);
        let mut out = vec![0.0; rows * width];
        for (r, ix) in index.iter().enumerate() {
            if let Some(i) = *ix {
                let dst = &mut out[i * width..(i + 1) * width];
                for (d, s) in dst.iter_mut().zip(&self.data()[r * width..(r + 1) * width]) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[0] = rows;
        Self::from_parts(shape, out)
    }
}

/// Broadcasting rule: equal shapes, or one shape is a suffix of the other
/// (missing leading axes are repeated), or one side has a single element.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let na = numel_of(a);
    let nb = numel_of(b);
    if nb == 1 && b.len() <= a.len() {
        return Ok(a.to_vec());
    }
    if na == 1 && a.len() <= b.len() {
        return Ok(b.to_vec());
    }
    if b.len() < a.len() && a[a.len() - b.len()..] == *b {
        return Ok(a.to_vec());
    }
    if a.len() < b.len() && b[b.len() - a.len()..] == *a {
        return Ok(b.to_vec());
    }
    Err(shape_err(op, a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn broadcast_suffix() {
        let a = t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let b = t(&[3], &[10.0, 20.0, 30.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        let c = t(&[2], &[1.0, 1.0]);
        let err = a.add(&c).unwrap_err();
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[2]"));
    }

    #[test]
    fn permute_matches_definition() {
        let a = Tensor::from_fn(vec![2, 3, 4], |i| i as f64);
        let p = a.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(p.at(&[k, i, j]), a.at(&[i, j, k]));
                }
            }
        }
    }

    #[test]
    fn softmax_along_inner_axis() {
        let a = t(&[2, 2], &[0.0, 0.0, 3f64.ln(), 0.0]);
        let s = a.softmax(0).unwrap();
        assert!((s.at(&[0, 0]) - 0.25).abs() < 1e-15);
        assert!((s.at(&[1, 0]) - 0.75).abs() < 1e-15);
        assert!((s.at(&[0, 1]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn narrow_and_concat_inverse() {
        let a = Tensor::from_fn(vec![2, 5], |i| i as f64);
        let l = a.narrow(1, 0, 2).unwrap();
        let r = a.narrow(1, 2, 3).unwrap();
        assert_eq!(Tensor::concat(&[&l, &r], 1).unwrap(), a);
    }

    #[test]
    fn batched_matmul_shared_rhs() {
        let a = Tensor::from_fn(vec![2, 2, 3], |i| i as f64);
        let b = Tensor::from_fn(vec![3, 2], |i| (i % 3) as f64);
        let c = a.matmul(&b).unwrap();
        for bi in 0..2 {
            let ai = a.narrow(0, bi, 1).unwrap().reshape(vec![2, 3]).unwrap();
            let ci = ai.matmul(&b).unwrap();
            assert_eq!(c.narrow(0, bi, 1).unwrap().data(), ci.data());
        }
    }
}
