//! Dense `f64` tensors and a reverse-mode gradient tape.
//!
//! [`Tensor`] is a plain row-major value with forward kernels. Recording
//! happens through [`Tape`], whose [`Var`] handles mirror the tensor
//! operations and register backward rules. A tape created with
//! [`Tape::no_grad`] evaluates the same operations without keeping the
//! graph.

mod conv;
pub mod gradcheck;
mod tape;

pub use conv::Conv3dSpec;
pub use gradcheck::finite_diff_check;
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Added under the square root of every L2 normalization.
pub const NORM_EPS: f64 = 1e-12;
/// Lower clamp for natural-log inputs.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// Rank-0 tensor.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `rows × cols` matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::shape("from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, &self.shape, &[0, 0])),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = *self.shape.last().unwrap_or(&1);
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn exp(&self) -> Tensor {
        self.map(f64::exp)
    }

    pub fn ln(&self) -> Tensor {
        self.map(|v| v.max(LOG_EPS).ln())
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    /// Adds `bias` (shape `[m]`) to every trailing row of `self`.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let m = *self.shape.last().unwrap_or(&0);
        if bias.shape != [m] {
            return Err(Error::shape("add_row", &self.shape, &bias.shape));
        }
        let mut out = self.clone();
        for chunk in out.data.chunks_mut(m.max(1)) {
            for (v, b) in chunk.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = self.dims2("matmul")?;
        let (k2, m) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; n * m];
        matmul_into(&self.data, &other.data, &mut out, n, k, m);
        Tensor::new(vec![n, m], out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = self.dims2("matmul_t")?;
        let (m, k2) = other.dims2("matmul_t")?;
        if k != k2 {
            return Err(Error::shape("matmul_t", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b = &other.data[j * k..(j + 1) * k];
                out[i * m + j] = dot(a, b);
            }
        }
        Tensor::new(vec![n, m], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// `x · weight + bias` for `x: [n, in]`, `weight: [in, out]`, `bias: [out]`.
    pub fn affine(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        self.matmul(weight)?.add_row(bias)
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.rank() {
            return Err(Error::shape(op, &self.shape, &[axis]));
        }
        Ok(())
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis, "sum_axis")?;
        let (outer, n, inner) = axis_split(&self.shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += self.data[base + i];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Tensor::new(shape, out)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let n = *self
            .shape
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", &self.shape, &[axis]))?;
        Ok(self.sum_axis(axis)?.scale(1.0 / n as f64))
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis, "softmax")?;
        let mut out = self.clone();
        for_each_lane(&self.shape, axis, |idx| {
            let max = idx.clone().map(|i| self.data[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in idx.clone() {
                let e = (self.data[i] - max).exp();
                out.data[i] = e;
                total += e;
            }
            for i in idx {
                out.data[i] /= total;
            }
        });
        Ok(out)
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis, "log_softmax")?;
        let mut out = self.clone();
        for_each_lane(&self.shape, axis, |idx| {
            let max = idx.clone().map(|i| self.data[i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + idx.clone().map(|i| (self.data[i] - max).exp()).sum::<f64>().ln();
            for i in idx {
                out.data[i] = self.data[i] - lse;
            }
        });
        Ok(out)
    }

    /// Normalizes every lane of the last axis to unit L2 norm.
    pub fn l2_normalize(&self) -> Result<Tensor> {
        let m = match self.shape.last() {
            Some(&m) if m > 0 => m,
            _ => return Err(Error::shape("l2_normalize", &self.shape, &[1])),
        };
        let mut out = self.clone();
        for chunk in out.data.chunks_mut(m) {
            let s = (chunk.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
            chunk.iter_mut().for_each(|v| *v /= s);
        }
        Ok(out)
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", &[], &[]))?;
        first.check_axis(axis, "concat")?;
        let mut shape = first.shape.clone();
        let mut total = 0;
        for p in parts {
            let same_rank = p.rank() == first.rank();
            let conforms = same_rank
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !conforms {
                return Err(Error::shape("concat", &first.shape, &p.shape));
            }
            total += p.shape[axis];
        }
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let span = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * span..(o + 1) * span]);
            }
        }
        Tensor::new(shape, data)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("slice_cols")?;
        if start > end || end > c {
            return Err(Error::shape("slice_cols", &self.shape, &[start, end]));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Tensor::new(vec![r, w], data)
    }

    pub fn diagonal(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("diagonal")?;
        if r != c {
            return Err(Error::shape("diagonal", &self.shape, &[r, r]));
        }
        Ok(Tensor::vector((0..r).map(|i| self.data[i * r + i]).collect()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += a[n×k] · b[k×m]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Calls `f` with the flat indices of every lane along `axis`.
pub(crate) fn for_each_lane(
    shape: &[usize],
    axis: usize,
    mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>),
) {
    let (outer, n, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let start = o * n * inner + i;
            f((start..start + n * inner).step_by(inner));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_against_hand_product() {
        // [[1,2,3],[4,5,6]] · [[1,0],[0,1],[1,1]] = [[4,5],[10,11]]
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[4.0, 5.0, 10.0, 11.0]);
        assert_eq!(a.matmul_t(&b.transpose().unwrap()).unwrap(), c);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let a = Tensor::zeros(vec![2, 3]);
        let err = a.matmul(&a).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
    }

    #[test]
    fn relu_and_normalize_basics() {
        let r = Tensor::vector(vec![-1.0, 0.0, 2.0]).relu();
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        let n = Tensor::vector(vec![3.0, 4.0]).l2_normalize().unwrap();
        assert!((n.data()[0] - 0.6).abs() < 1e-12);
        assert!((n.data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn softmax_cases() {
        let s = Tensor::vector(vec![0.0, 0.0]).softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = Tensor::vector(vec![1.0, 0.0]).softmax(0).unwrap();
        let e = std::f64::consts::E;
        assert!((s.data()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((s.data()[0] - 0.7311).abs() < 1e-4);
        assert!((s.data()[1] - 0.2689).abs() < 1e-4);
        let s = Tensor::vector(vec![1000.0, 0.0]).softmax(0).unwrap();
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_along_first_axis_sums_columns() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.0]]).unwrap();
        let s = x.softmax(0).unwrap();
        let sums = s.sum_axis(0).unwrap();
        for v in sums.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let ls = x.log_softmax(0).unwrap();
        assert!(ls.exp().max_abs_diff(&s) < 1e-12);
    }

    #[test]
    fn concat_middle_axis() {
        let a = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2, 2], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(
            c.data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        assert!(Tensor::concat(&[&a, &Tensor::zeros(vec![3, 1, 2])], 1).is_err());
    }

    #[test]
    fn reductions() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(x.sum_axis(0).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(x.mean_axis(1).unwrap().data(), &[1.5, 3.5]);
        assert_eq!(x.sum_all(), 10.0);
        assert_eq!(x.diagonal().unwrap().data(), &[1.0, 4.0]);
        assert_eq!(x.slice_cols(1, 2).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn ln_clamps() {
        let y = Tensor::vector(vec![0.0, 1.0]).ln();
        assert!((y.data()[0] - LOG_EPS.ln()).abs() < 1e-12);
        assert_eq!(y.data()[1], 0.0);
    }
}
