//! Dense row-major `f64` tensors and the numeric kernels shared by the tape.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64`.
///
/// Gradient bookkeeping does not live here: a `Tensor` is a plain value, and
/// the `requires_grad` flag and gradient buffer belong to the tape node that
/// wraps it (see [`crate::autodiff::Tape`]).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[len / cols, cols]`.
    pub fn rows(&self) -> usize {
        let cols = self.cols();
        if cols == 0 {
            0
        } else {
            self.data.len() / cols
        }
    }

    pub fn row(&self, index: usize) -> &[f64] {
        let cols = self.cols();
        &self.data[index * cols..(index + 1) * cols]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Plain matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k, n) = matmul_dims(self, other)?;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out, 0.0);
        Tensor::new(vec![m, n], out)
    }

    /// Softmax along `axis`, see [`softmax_line_sorted`].
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = axis_split(&self.shape, axis)?;
        let mut out = vec![0.0; self.data.len()];
        let mut line = vec![0.0; len];
        let mut probs = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for a in 0..len {
                    line[a] = self.data[(o * len + a) * inner + i];
                }
                softmax_line_sorted(&line, None, &mut probs);
                for a in 0..len {
                    out[(o * len + a) * inner + i] = probs[a];
                }
            }
        }
        Tensor::new(self.shape.clone(), out)
    }
}

pub(crate) fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok((a.shape[0], a.shape[1], b.shape[1]))
}

/// Splits a shape around `axis` into `(outer, axis_len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Index {
            index: axis,
            len: shape.len(),
        });
    }
    let len = shape[axis];
    if len == 0 {
        return Err(Error::Shape {
            op: "softmax",
            lhs: shape.to_vec(),
            rhs: vec![axis],
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, len, inner))
}

/// Row-major GEMM: `c = op(a) * op(b) + beta * c`.
///
/// `a` is stored `[m, k]` (or `[k, m]` when `trans_a`), `b` is stored
/// `[k, n]` (or `[n, k]` when `trans_b`), `c` is `[m, n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
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

/// General strided GEMM: `c = alpha · a · b + beta · c` where `a` is
/// `m × k` and `b` is `k × n`, each addressed through row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn strided_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
    alpha: f64,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, cc: usize, rs: usize, cs: usize| (r - 1) * rs + (cc - 1) * cs;
    if k > 0 {
        assert!(a.len() > last(m, k, rsa, csa) && b.len() > last(k, n, rsb, csb));
    }
    assert!(c.len() > last(m, n, rsc, csc));
    // SAFETY: the asserts above bound the largest offset each operand reaches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Numerically stable softmax of one line. Entries with `mask[i] == false`
/// get probability exactly zero. The normalizer is summed left to right.
pub(crate) fn softmax_line(x: &[f64], mask: Option<&[bool]>, out: &mut [f64]) {
    exp_shifted(x, mask, out);
    let total: f64 = out.iter().sum();
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// As [`softmax_line`] but the normalizer is summed in sorted order, so
/// permuting the input permutes the output bit for bit.
pub(crate) fn softmax_line_sorted(x: &[f64], mask: Option<&[bool]>, out: &mut [f64]) {
    exp_shifted(x, mask, out);
    let mut sorted: Vec<f64> = out.to_vec();
    sorted.sort_unstable_by(|a, b| a.total_cmp(b));
    let total: f64 = sorted.iter().sum();
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn exp_shifted(x: &[f64], mask: Option<&[bool]>, out: &mut [f64]) {
    let keep = |i: usize| mask.map_or(true, |m| m[i]);
    let mut max = f64::NEG_INFINITY;
    for (i, &v) in x.iter().enumerate() {
        if keep(i) && v > max {
            max = v;
        }
    }
    for (i, (o, &v)) in out.iter_mut().zip(x).enumerate() {
        *o = if keep(i) { libm::exp(v - max) } else { 0.0 };
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU: `0.5x(1 + tanh(√(2/π)(x + 0.044715x³)))`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_tanh(x))
}

pub(crate) fn gelu_tanh(x: f64) -> f64 {
    libm::tanh(GELU_C * (x + GELU_A * x * x * x))
}

pub(crate) fn gelu_grad_from_tanh(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_matrix() {
        let a = Tensor::matrix(2, 2, vec![1.5, -2.0, 0.25, 4.0]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn one_by_one_product() {
        let a = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let b = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        match a.matmul(&b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn transposed_gemm_matches_naive() {
        // a stored [k, m] = [3, 2], b stored [n, k] = [2, 3]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, -1.0, 2.0, 1.0, 0.5];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, true, &b, true, &mut c, 0.0);
        let mut naive = [0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..3 {
                    naive[i * 2 + j] += a[p * 2 + i] * b[j * 3 + p];
                }
            }
        }
        assert_eq!(c, naive);
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::vector(vec![0.0, 0.0]).softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = Tensor::vector(vec![1000.0, 0.0]).softmax(0).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-300);
        assert!(Tensor::zeros(&[0]).softmax(0).is_err());
    }

    #[test]
    fn softmax_along_first_axis() {
        let t = Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 3.0]).unwrap();
        let s = t.softmax(0).unwrap();
        assert_eq!(s.data()[0], 0.5);
        assert_eq!(s.data()[2], 0.5);
        assert!((s.data()[1] + s.data()[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
    }
}
