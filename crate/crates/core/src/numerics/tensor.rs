use crate::error::{Error, Result};

use super::scalar::{DType, Scalar};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dims("tensor", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::ZERO; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::from_f64(x)).collect())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::ONE;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64()).collect()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dims("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Standard matrix product of 2-D operands, or of same-batch 3-D operands.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, m, k, n) = matmul_dims(&self.shape, &rhs.shape)?;
        let mut out = vec![T::ZERO; batch * m * n];
        for g in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::ONE,
                &self.data[g * m * k..],
                k as isize,
                1,
                &rhs.data[g * k * n..],
                n as isize,
                1,
                T::ZERO,
                &mut out[g * m * n..],
                n as isize,
                1,
            );
        }
        let shape = if self.shape.len() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        Tensor::new(&shape, out)
    }

    pub fn softmax_lastdim(&self) -> Tensor<T> {
        let mut out = self.clone();
        softmax_rows(&mut out.data, self.last_dim());
        out
    }

    /// Per-slice normalization over the last dimension with `eps` inside the square root.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let d = self.last_dim();
        if gamma.numel() != d || beta.numel() != d {
            return Err(Error::dims("layer_norm", &self.shape, gamma.shape()));
        }
        let mut out = vec![T::ZERO; self.numel()];
        for (row, dst) in self.data.chunks(d).zip(out.chunks_mut(d)) {
            let (mean, rstd) = moments(row, eps);
            for j in 0..d {
                dst[j] = (row[j] - mean) * rstd * gamma.data[j] + beta.data[j];
            }
        }
        Tensor::new(&self.shape, out)
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Ok((1, *m, *k, *n)),
        ([g, m, k], [g2, k2, n]) if k == k2 && g == g2 => Ok((*g, *m, *k, *n)),
        _ => Err(Error::dims("matmul", a, b)),
    }
}

pub(crate) fn softmax_rows<T: Scalar>(data: &mut [T], d: usize) {
    for row in data.chunks_mut(d) {
        let max = row.iter().copied().fold(row[0], T::max);
        let mut sum = T::ZERO;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        let inv = T::ONE / sum;
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
}

/// Mean and reciprocal standard deviation (population variance).
pub(crate) fn moments<T: Scalar>(row: &[T], eps: f64) -> (T, T) {
    let d = T::from_f64(row.len() as f64);
    let mut mean = T::ZERO;
    for &x in row {
        mean += x;
    }
    mean = mean / d;
    let mut var = T::ZERO;
    for &x in row {
        let c = x - mean;
        var += c * c;
    }
    var = var / d;
    (mean, T::ONE / (var + T::from_f64(eps)).sqrt())
}
