use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `f64` tensor. Immutable once built; every operation
/// returns a fresh value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Input("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(&[rows.len(), cols], data)
    }

    /// Standard-normal samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a scalar-sized tensor (`[]` or `[1]`).
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise binary op. `rhs` must have the same shape or a shape that
    /// equals a trailing suffix of `self`'s shape (e.g. a bias `[d]` over
    /// `[n, d]`). Anything else is rejected.
    pub fn zip_map(&self, rhs: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if !is_suffix(&rhs.shape, &self.shape) {
            return Err(Error::dim(op, &self.shape, &rhs.shape));
        }
        let period = rhs.numel().max(1);
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(k, &a)| f(a, rhs.data[k % period]))
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_map(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_map(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_map(rhs, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    /// Sums `self` (shape `big`) down to the trailing suffix shape `small`.
    /// The inverse of suffix broadcasting, used for gradients.
    pub fn reduce_to_suffix(&self, small: &[usize]) -> Result<Tensor> {
        if !is_suffix(small, &self.shape) {
            return Err(Error::dim("reduce_to_suffix", &self.shape, small));
        }
        let period: usize = small.iter().product::<usize>().max(1);
        let mut out = vec![0.0; period];
        for chunk in self.data.chunks(period) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        Tensor::new(small, out)
    }

    /// 2-D matrix product `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::dim("matmul", &self.shape, &rhs.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &rhs.data, &mut out, m, k, n);
        Tensor::new(&[m, n], out)
    }

    /// Batched product `[b, m, k] x [b, k, n] -> [b, m, n]`.
    pub fn batch_matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 3
            || rhs.rank() != 3
            || self.shape[0] != rhs.shape[0]
            || self.shape[2] != rhs.shape[1]
        {
            return Err(Error::dim("batch_matmul", &self.shape, &rhs.shape));
        }
        let (b, m, k, n) = (self.shape[0], self.shape[1], self.shape[2], rhs.shape[2]);
        let mut out = vec![0.0; b * m * n];
        for batch in 0..b {
            matmul_into(
                &self.data[batch * m * k..(batch + 1) * m * k],
                &rhs.data[batch * k * n..(batch + 1) * k * n],
                &mut out[batch * m * n..(batch + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Tensor::new(&[b, m, n], out)
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::dim("transpose2d", &self.shape, &[]));
        }
        self.permute(&[1, 0])
    }

    /// General axis permutation: output axis `k` is input axis `perm[k]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", &self.shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = strides(&self.shape);
        // stride in the input for each output axis
        let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = Vec::with_capacity(self.numel());
        let mut index = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..self.numel() {
            out.push(self.data[offset]);
            for axis in (0..rank).rev() {
                index[axis] += 1;
                offset += walk[axis];
                if index[axis] < out_shape[axis] {
                    break;
                }
                offset -= walk[axis] * out_shape[axis];
                index[axis] = 0;
            }
        }
        Tensor::new(&out_shape, out)
    }

    /// Softmax over the last dimension, with max subtraction.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        let n = self.last_dim();
        if self.numel() == 0 || n == 0 {
            return Err(Error::dim("softmax_lastdim", &self.shape, &[]));
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Tensor::new(&self.shape, out)
    }

    /// Sum over the last dimension; the result drops that dimension.
    pub fn sum_lastdim(&self) -> Result<Tensor> {
        if self.rank() == 0 {
            return Err(Error::dim("sum_lastdim", &self.shape, &[]));
        }
        let n = self.last_dim();
        let data = if n == 0 {
            vec![0.0; self.shape[..self.rank() - 1].iter().product()]
        } else {
            self.data.chunks(n).map(|row| row.iter().sum()).collect()
        };
        Tensor::new(&self.shape[..self.rank() - 1], data)
    }

    /// Repeats every element `n` times along a new trailing dimension.
    pub fn expand_last(&self, n: usize) -> Tensor {
        let mut shape = self.shape.clone();
        shape.push(n);
        let data = self
            .data
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, n))
            .collect();
        Self { shape, data }
    }

    /// Picks index `idx` of the last dimension; the result drops it.
    pub fn select_last(&self, idx: usize) -> Result<Tensor> {
        let n = self.last_dim();
        if self.rank() == 0 || idx >= n {
            return Err(Error::dim("select_last", &self.shape, &[idx]));
        }
        let data = self.data.chunks(n).map(|row| row[idx]).collect();
        Tensor::new(&self.shape[..self.rank() - 1], data)
    }
}

pub(crate) fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * shape[k + 1];
    }
    s
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_examples() {
        let m = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let eye = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert_eq!(m.matmul(&eye).unwrap(), m);
        assert_eq!(eye.matmul(&m).unwrap(), m);
        let col = Tensor::from_rows(&[&[5.0], &[6.0]]).unwrap();
        let out = m.matmul(&col).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        assert_eq!(out.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::from_vec(vec![0.0, 0.0]).softmax_lastdim().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let c = 17.25;
        let s = Tensor::from_vec(vec![c, c, c]).softmax_lastdim().unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = Tensor::from_vec(vec![1f64.ln(), 3f64.ln()]).softmax_lastdim().unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_empty_is_error() {
        assert!(Tensor::zeros(&[0]).softmax_lastdim().is_err());
    }

    #[test]
    fn permute_matches_index_arithmetic() {
        let t = Tensor::new(&[2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(p.data()[c * 6 + a * 3 + b], t.data()[a * 12 + b * 4 + c]);
                }
            }
        }
        assert!(t.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn broadcasting_only_on_trailing_suffix() {
        let a = Tensor::ones(&[2, 3]);
        assert!(a.add(&Tensor::ones(&[3])).is_ok());
        assert!(a.add(&Tensor::ones(&[2])).is_err());
        assert!(a.add(&Tensor::ones(&[1, 3])).is_err());
    }

    #[test]
    fn sum_and_select_last() {
        let t = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(t.sum_lastdim().unwrap().data(), &[3.0, 7.0]);
        assert_eq!(t.select_last(1).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(t.expand_last(2).shape(), &[2, 2, 2]);
    }
}
