//! Dense row-major `f64` tensors with NumPy-style broadcasting.
//!
//! This is the storage type behind the autodiff tape in [`crate::autograd`].
//! Shapes are plain `Vec<usize>`; a scalar has an empty shape and one element.

use crate::error::{FlagError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    strides
}

/// Result shape of broadcasting `a` against `b`, or `None` when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the broadcast shape `out` (0 on broadcast axes).
fn strides_in(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = row_major_strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Walks every multi-index of `shape` in row-major order, calling `f` with the
/// flat offsets into each of the stride sets.
fn for_each_index<const K: usize>(shape: &[usize], strides: [&[usize]; K], mut f: impl FnMut([usize; K])) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    let nd = shape.len();
    let mut idx = vec![0usize; nd];
    let mut offs = [0usize; K];
    for _ in 0..total {
        f(offs);
        // odometer increment
        let mut ax = nd;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            for k in 0..K {
                offs[k] += strides[k][ax];
            }
            if idx[ax] < shape[ax] {
                break;
            }
            for k in 0..K {
                offs[k] -= strides[k][ax] * shape[ax];
            }
            idx[ax] = 0;
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(FlagError::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(FlagError::Shape(format!("cannot reshape {:?} into {:?}", self.shape, shape)));
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Element-wise binary op with broadcasting.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Self { shape: self.shape.clone(), data });
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape).ok_or_else(|| {
            FlagError::Shape(format!("cannot broadcast {:?} with {:?}", self.shape, other.shape))
        })?;
        let trim = |s: &[usize]| s.iter().position(|&d| d != 1).unwrap_or(s.len());
        let (a_core, b_core) = (&self.shape[trim(&self.shape)..], &other.shape[trim(&other.shape)..]);
        // trailing-suffix fast path, e.g. [.., H] op [H]
        if out_shape == self.shape && self.shape.ends_with(b_core) {
            let m = other.len();
            let mut data = Vec::with_capacity(self.len());
            for chunk in self.data.chunks(m.max(1)) {
                data.extend(chunk.iter().zip(&other.data).map(|(&a, &b)| f(a, b)));
            }
            return Ok(Self { shape: out_shape, data });
        }
        if out_shape == other.shape && other.shape.ends_with(a_core) {
            let m = self.len();
            let mut data = Vec::with_capacity(other.len());
            for chunk in other.data.chunks(m.max(1)) {
                data.extend(self.data.iter().zip(chunk).map(|(&a, &b)| f(a, b)));
            }
            return Ok(Self { shape: out_shape, data });
        }
        let sa = strides_in(&self.shape, &out_shape);
        let sb = strides_in(&other.shape, &out_shape);
        let mut data = Vec::with_capacity(numel(&out_shape));
        let nd = out_shape.len();
        let (len, da, db) = (out_shape[nd - 1], sa[nd - 1], sb[nd - 1]);
        for_each_index(&out_shape[..nd - 1], [&sa[..nd - 1], &sb[..nd - 1]], |[ia, ib]| match (da, db) {
            (1, 1) => data.extend(self.data[ia..ia + len].iter().zip(&other.data[ib..ib + len]).map(|(&a, &b)| f(a, b))),
            (1, 0) => {
                let b = other.data[ib];
                data.extend(self.data[ia..ia + len].iter().map(|&a| f(a, b)));
            }
            (0, 1) => {
                let a = self.data[ia];
                data.extend(other.data[ib..ib + len].iter().map(|&b| f(a, b)));
            }
            _ => data.extend((0..len).map(|i| f(self.data[ia + i * da], other.data[ib + i * db]))),
        });
        Ok(Self { shape: out_shape, data })
    }

    /// Sums a broadcast result back down to `shape` (the adjoint of broadcasting).
    pub fn sum_to(&self, shape: &[usize]) -> Self {
        if self.shape == shape {
            return self.clone();
        }
        let n = numel(shape);
        if n == 1 {
            return Self { shape: shape.to_vec(), data: vec![self.sum()] };
        }
        // shape is a trailing suffix (modulo leading ones) of self
        let trimmed: Vec<usize> = shape.iter().copied().skip_while(|&d| d == 1).collect();
        if self.shape.ends_with(&trimmed) {
            let mut data = vec![0.0; n];
            for chunk in self.data.chunks(n) {
                for (o, &v) in data.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            return Self { shape: shape.to_vec(), data };
        }
        let so = strides_in(shape, &self.shape);
        let si = row_major_strides(&self.shape);
        let mut data = vec![0.0; n];
        let nd = self.ndim();
        let (len, step) = (self.shape[nd - 1], so[nd - 1]);
        for_each_index(&self.shape[..nd - 1], [&si[..nd - 1], &so[..nd - 1]], |[i, o]| {
            let src = &self.data[i..i + len];
            if step == 0 {
                data[o] += src.iter().sum::<f64>();
            } else {
                for (d, &v) in data[o..o + len].iter_mut().zip(src) {
                    *d += v;
                }
            }
        });
        Self { shape: shape.to_vec(), data }
    }

    /// Materializes a broadcast of `self` to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        let target = broadcast_shape(&self.shape, shape)
            .filter(|s| s.as_slice() == shape)
            .ok_or_else(|| FlagError::Shape(format!("cannot broadcast {:?} to {:?}", self.shape, shape)))?;
        let zero = Tensor::zeros(&target);
        zero.zip_with(self, |_, b| b)
    }

    /// General axis permutation; `axes[i]` is the source axis of output axis `i`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(FlagError::Shape(format!("bad permutation {:?} for {:?}", axes, self.shape)));
        }
        let src = row_major_strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let gather: Vec<usize> = axes.iter().map(|&a| src[a]).collect();
        let mut data = Vec::with_capacity(self.len());
        if nd == 0 {
            return Ok(self.clone());
        }
        let (len, step) = (out_shape[nd - 1], gather[nd - 1]);
        for_each_index(&out_shape[..nd - 1], [&gather[..nd - 1]], |[i]| {
            if step == 1 {
                data.extend_from_slice(&self.data[i..i + len]);
            } else {
                data.extend((0..len).map(|j| self.data[i + j * step]));
            }
        });
        Ok(Self { shape: out_shape, data })
    }

    /// Split `shape` around `axis` into (outer, dim, inner) element counts.
    pub(crate) fn axis_split(&self, axis: usize) -> (usize, usize, usize) {
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        (outer, self.shape[axis], inner)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Self {
        let (outer, dim, inner) = self.axis_split(axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let base = (o * dim + d) * inner;
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (x, &v) in dst.iter_mut().zip(&self.data[base..base + inner]) {
                    *x += v;
                }
            }
        }
        let mut shape = self.shape.clone();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Self { shape, data }
    }

    /// Rows `idx` of the leading axis, in order (repeats allowed).
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let rows = *self.shape.first().ok_or_else(|| FlagError::Shape("select_rows on a scalar".into()))?;
        let inner = self.len() / rows.max(1);
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &r in idx {
            if r >= rows {
                return Err(FlagError::Shape(format!("row {r} out of range for {rows} rows")));
            }
            data.extend_from_slice(&self.data[r * inner..(r + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Ok(Self { shape, data })
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.ndim() || start + len > self.shape[axis] {
            return Err(FlagError::Shape(format!(
                "narrow axis {axis} [{start}, {}) out of range for {:?}",
                start + len,
                self.shape
            )));
        }
        let (outer, dim, inner) = self.axis_split(axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self { shape, data })
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| FlagError::Shape("concat of nothing".into()))?;
        let nd = first.ndim();
        for p in parts {
            let ok = p.ndim() == nd
                && (0..nd).all(|a| a == axis || p.shape[a] == first.shape[a]);
            if !ok {
                return Err(FlagError::Shape(format!(
                    "concat axis {axis}: {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
        }
        let (outer, _, inner) = first.axis_split(axis);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let w = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self { shape, data })
    }
}

/// C (+)= op(A)·op(B) for row-major slices, where op is an optional transpose.
/// `a` is m×k (or k×m when `ta`), `b` is k×n (or n×k when `tb`), `c` is m×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are asserted above and the strides describe
    // in-bounds row-major layouts of those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
