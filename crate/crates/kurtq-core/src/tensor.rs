//! Dense FP32 tensors and the elementary kernels of the toolkit.
//!
//! Layout is row-major everywhere; matmul accumulates in FP32. Tensors are
//! immutable values after construction: every kernel is a pure function of
//! its inputs, so tensors may be shared freely across threads.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Dense FP32 n-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that `data.len()` equals the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::BadShape {
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Identity matrix of side `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::DimMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: Vec::new(),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(Error::NonScalarLoss {
                numel: self.data.len(),
            });
        }
        Ok(self.data[0])
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn col_slice(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("col_slice")?;
        if start + len > n {
            return Err(Error::DimMismatch {
                op: "col_slice",
                lhs: self.shape.clone(),
                rhs: vec![start, len],
            });
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&self.data[i * n + start..i * n + start + len]);
        }
        Tensor::new(vec![m, len], out)
    }
}

/// Pointwise operations exposed by [`elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Sub,
}

/// Pointwise binary kernel. Shapes must match, except `add` also accepts a
/// trailing vector `[n]` broadcast over the rows of an `[m, n]` tensor
/// (bias add).
pub fn elementwise(op: Elementwise, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match op {
        Elementwise::Add => add(a, b),
        Elementwise::Mul => mul(a, b),
        Elementwise::Sub => sub(a, b),
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
        return Tensor::new(a.shape.clone(), data);
    }
    // Bias broadcast: [m, n] + [n].
    if a.rank() == 2 && b.shape.as_slice() == [a.shape[1]] {
        let (m, n) = (a.shape[0], a.shape[1]);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(a.data[i * n + j] + b.data[j]);
            }
        }
        return Tensor::new(a.shape.clone(), data);
    }
    Err(Error::DimMismatch {
        op: "add",
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    })
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    Tensor::new(a.shape.clone(), data)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape.clone(), data)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::DimMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

/// Multiply every element by a constant.
pub fn scale(a: &Tensor, c: f32) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|x| x * c).collect(),
    }
}

/// Row-major matrix product `[m, k] x [k, n] -> [m, n]`, FP32 accumulation.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::DimMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn relu(a: &Tensor) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| x.max(0.0)).collect(),
    }
}

/// Row softmax of an `[m, n]` tensor with per-row max subtraction.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2("softmax_rows")?;
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = &a.data[i * n..(i + 1) * n];
        let max = row.iter().fold(f32::NEG_INFINITY, |acc, &v| acc.max(v));
        let exps: Vec<f32> = row.iter().map(|&v| libm::expf(v - max)).collect();
        let sum: f32 = exps.iter().sum();
        data.extend(exps.iter().map(|e| e / sum));
    }
    Tensor::new(a.shape.clone(), data)
}

/// Per-row layer normalization with learned gain and bias vectors.
///
/// Each row is shifted to mean 0 and scaled to unit variance (population
/// variance, stabilized by `eps`) before gain and bias are applied.
pub fn layer_norm(a: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
    let (m, n) = a.dims2("layer_norm")?;
    if gain.shape.as_slice() != [n] || bias.shape.as_slice() != [n] {
        return Err(Error::DimMismatch {
            op: "layer_norm",
            lhs: a.shape.clone(),
            rhs: gain.shape.clone(),
        });
    }
    if !(eps > 0.0) {
        return Err(Error::BadParam {
            what: "layer_norm eps",
            value: eps as f64,
        });
    }
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = &a.data[i * n..(i + 1) * n];
        let mean = row.iter().sum::<f32>() / n as f32;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
        let inv = 1.0 / libm::sqrtf(var + eps);
        for j in 0..n {
            data.push((row[j] - mean) * inv * gain.data[j] + bias.data[j]);
        }
    }
    Tensor::new(a.shape.clone(), data)
}

/// Column means of an `[m, n]` tensor as a `[1, n]` row.
pub fn mean_rows(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2("mean_rows")?;
    let mut out = vec![0.0f32; n];
    for i in 0..m {
        for j in 0..n {
            out[j] += a.data[i * n + j];
        }
    }
    for v in &mut out {
        *v /= m as f32;
    }
    Tensor::new(vec![1, n], out)
}

/// Concatenate rank-2 tensors along columns.
pub fn col_concat(parts: &[&Tensor]) -> Result<Tensor> {
    let (m, _) = parts
        .first()
        .ok_or(Error::DimMismatch {
            op: "col_concat",
            lhs: Vec::new(),
            rhs: Vec::new(),
        })?
        .dims2("col_concat")?;
    let mut total = 0;
    for p in parts {
        let (pm, pn) = p.dims2("col_concat")?;
        if pm != m {
            return Err(Error::DimMismatch {
                op: "col_concat",
                lhs: parts[0].shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        total += pn;
    }
    let mut data = Vec::with_capacity(m * total);
    for i in 0..m {
        for p in parts {
            let n = p.shape[1];
            data.extend_from_slice(&p.data[i * n..(i + 1) * n]);
        }
    }
    Tensor::new(vec![m, total], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn new_rejects_bad_length() {
        let err = Tensor::new(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert_eq!(err, Error::BadShape { expected: 6, got: 5 });
    }

    #[test]
    fn matmul_identity_is_exact() {
        let a = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let out = matmul(&Tensor::eye(2), &a).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_hand_evaluated() {
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let a = t(&[1, 1], &[2.0]);
        let b = t(&[1, 1], &[0.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[3, 1], &[1.0, 2.0, 3.0]);
        match matmul(&a, &b).unwrap_err() {
            Error::DimMismatch { op, lhs, rhs } => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![1, 2]);
                assert_eq!(rhs, vec![3, 1]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn elementwise_examples() {
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        let two = t(&[3], &[2.0, 2.0, 2.0]);
        let zero = Tensor::zeros(&[3]);
        assert_eq!(
            elementwise(Elementwise::Mul, &x, &two).unwrap().data(),
            &[2.0, 4.0, 6.0]
        );
        assert_eq!(elementwise(Elementwise::Add, &x, &zero).unwrap(), x);
        assert_eq!(elementwise(Elementwise::Mul, &x, &zero).unwrap(), zero);
        assert!(elementwise(Elementwise::Sub, &x, &t(&[2], &[1.0, 2.0])).is_err());
    }

    #[test]
    fn bias_add_broadcasts_rows() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2], &[10.0, 20.0]);
        assert_eq!(add(&a, &b).unwrap().data(), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let sym = softmax_rows(&t(&[1, 2], &[0.0, 0.0])).unwrap();
        assert_eq!(sym.data(), &[0.5, 0.5]);
        let big = softmax_rows(&t(&[1, 2], &[1000.0, 1000.0])).unwrap();
        assert_eq!(big.data(), &[0.5, 0.5]);
        assert!(big.is_finite());
    }

    #[test]
    fn softmax_closed_form() {
        let out = softmax_rows(&t(&[1, 2], &[0.0, 3.0f32.ln()])).unwrap();
        assert!((out.data()[0] - 0.25).abs() < 1e-6);
        assert!((out.data()[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let a = t(&[2, 3], &[1.0, -2.0, 9999.0, 0.5, 0.25, -9999.0]);
        let out = softmax_rows(&a).unwrap();
        for i in 0..2 {
            let s: f32 = out.data()[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_constant_row_maps_to_zero() {
        let a = t(&[1, 3], &[1.0, 1.0, 1.0]);
        let gain = Tensor::full(&[3], 1.0);
        let bias = Tensor::zeros(&[3]);
        let out = layer_norm(&a, &gain, &bias, 1e-5).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_standardizes() {
        let a = t(&[1, 2], &[-1.0, 1.0]);
        let out = layer_norm(&a, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), 1e-5).unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-4);
        assert!((out.data()[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_zero_gain_yields_bias() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let bias = t(&[2], &[5.0, -5.0]);
        let out = layer_norm(&a, &Tensor::zeros(&[2]), &bias, 1e-5).unwrap();
        assert_eq!(out.data(), &[5.0, -5.0, 5.0, -5.0]);
    }

    #[test]
    fn relu_definition() {
        assert_eq!(relu(&t(&[3], &[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu(&t(&[2], &[-3.0, -0.5])).data(), &[0.0, 0.0]);
        let pos = t(&[2], &[3.0, 0.5]);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn mean_rows_and_slices() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(mean_rows(&a).unwrap().data(), &[2.0, 3.0]);
        let s = a.col_slice(1, 1).unwrap();
        assert_eq!(s.data(), &[2.0, 4.0]);
        let c = col_concat(&[&a.col_slice(0, 1).unwrap(), &s]).unwrap();
        assert_eq!(c, a);
    }

    #[test]
    fn transpose_round_trip() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(a.transpose().unwrap().transpose().unwrap(), a);
        assert_eq!(a.transpose().unwrap().data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
