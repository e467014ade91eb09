//! Dense row-major tensors and the plain (non-recording) kernels that both
//! the autodiff graph and the cached inference paths are built on.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    /// Panicking constructor for internal call sites where the extents are
    /// derived from the data itself.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&v| T::of(v)).collect())
    }

    /// Builds an `n×d` matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::contract("ragged rows"));
        }
        Self::new(vec![rows.len(), d], rows.concat())
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

    /// Size of the trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Number of rows when viewed as a `rows × cols` matrix.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Dimension {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape("zip", other)?;
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.numel(), other.numel());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub(crate) fn same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension {
                op,
                left: self.shape.clone(),
                right: vec![],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (n, m) = self.as_matrix("transpose")?;
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Ok(Self::from_parts(vec![m, n], out))
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (n, k) = self.as_matrix("matmul")?;
        let (k2, m) = rhs.as_matrix("matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); n * m];
        matmul_into(&self.data, &rhs.data, &mut out, n, k, m);
        Ok(Self::from_parts(vec![n, m], out))
    }

    /// Concatenates 2-D tensors along the column axis.
    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let n = parts[0].rows();
        if parts.iter().any(|p| p.shape.len() != 2 || p.rows() != n) {
            return Err(Error::Dimension {
                op: "concat_cols",
                left: parts[0].shape.clone(),
                right: parts.iter().flat_map(|p| p.shape.clone()).collect(),
            });
        }
        let width: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Self::from_parts(vec![n, width], data))
    }
}

/// `out[n×m] += a[n×k] · b[k×m]`, both row-major.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    T::gemm(n, k, m, a, k as isize, 1, b, m as isize, 1, out);
}

/// `out[n×k] += g[n×m] · bᵀ` for row-major `b[k×m]`.
pub(crate) fn matmul_bt_into<T: Scalar>(g: &[T], b: &[T], out: &mut [T], n: usize, m: usize, k: usize) {
    T::gemm(n, m, k, g, m as isize, 1, b, 1, m as isize, out);
}

/// `out[k×m] += aᵀ · g` for row-major `a[n×k]`, `g[n×m]`.
pub(crate) fn matmul_at_into<T: Scalar>(a: &[T], g: &[T], out: &mut [T], k: usize, n: usize, m: usize) {
    T::gemm(k, n, m, a, 1, k as isize, g, m as isize, 1, out);
}

/// `out[i,j] = Σ_k x[i,k]·w[k,j] + b[j]`
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = x.matmul(w)?;
    if b.numel() != out.cols() {
        return Err(Error::Dimension {
            op: "linear bias",
            left: w.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let m = out.cols();
    for row in out.data.chunks_mut(m) {
        for (o, &bv) in row.iter_mut().zip(&b.data) {
            *o += bv;
        }
    }
    Ok(out)
}

pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let c = x.cols();
    for row in out.data.chunks_mut(c) {
        softmax_in_place(row);
    }
    out
}

pub fn log_softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let c = x.cols();
    for row in out.data.chunks_mut(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Per-row statistics kept by layer norm for its backward pass.
#[derive(Clone, Debug)]
pub(crate) struct NormStats<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// `(x − mean)/sqrt(var + eps)·gamma + beta` per row, biased variance.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    Ok(layer_norm_with_stats(x, gamma, beta, eps)?.0)
}

pub(crate) fn layer_norm_with_stats<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let d = x.cols();
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::Dimension {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gamma.shape().to_vec(),
        });
    }
    let n = x.rows();
    let dn = T::of(d as f64);
    let mut out = Vec::with_capacity(x.numel());
    let mut xhat = Vec::with_capacity(x.numel());
    let mut rstd = Vec::with_capacity(n);
    for row in x.data.chunks(d) {
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        for (j, &v) in row.iter().enumerate() {
            let xh = (v - mean) * r;
            xhat.push(xh);
            out.push(xh * gamma.data[j] + beta.data[j]);
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        NormStats { xhat, rstd },
    ))
}
