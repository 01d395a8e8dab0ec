//! Symmetric uniform FP32 -> INT8 quantization.
//!
//! A tensor is represented by one positive FP32 scale and INT8 values in
//! [-127, 127]; -128 is never produced, so the grid is truly symmetric.
//! The scale comes from the max-abs rule `max|t| / 127`. Rounding is
//! half-to-even, computed in f64 so the decision is platform-stable.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest INT8 magnitude of the symmetric range.
pub const QMAX: i32 = 127;

/// INT8 tensor plus one FP32 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct QTensor {
    shape: Vec<usize>,
    values: Vec<i8>,
    scale: f32,
}

impl QTensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Rebuilds a quantized tensor from stored parts (checkpoint loading).
    pub fn from_parts(shape: Vec<usize>, values: Vec<i8>, scale: f32) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::BadShape {
                expected,
                got: values.len(),
            });
        }
        if !(scale > 0.0) {
            return Err(Error::BadParam {
                what: "quantization scale",
                value: scale as f64,
            });
        }
        Ok(QTensor {
            shape,
            values,
            scale,
        })
    }

    /// Transpose of a rank-2 quantized tensor (scale unchanged).
    pub fn transpose(&self) -> Result<QTensor> {
        if self.shape.len() != 2 {
            return Err(Error::DimMismatch {
                op: "qtranspose",
                lhs: self.shape.clone(),
                rhs: Vec::new(),
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut values = alloc::vec![0i8; m * n];
        for i in 0..m {
            for j in 0..n {
                values[j * m + i] = self.values[i * n + j];
            }
        }
        Ok(QTensor {
            shape: alloc::vec![n, m],
            values,
            scale: self.scale,
        })
    }

    /// Columns `[start, start+len)` of a rank-2 quantized tensor.
    pub fn col_slice(&self, start: usize, len: usize) -> Result<QTensor> {
        if self.shape.len() != 2 || start + len > self.shape[1] {
            return Err(Error::DimMismatch {
                op: "qcol_slice",
                lhs: self.shape.clone(),
                rhs: alloc::vec![start, len],
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut values = Vec::with_capacity(m * len);
        for i in 0..m {
            values.extend_from_slice(&self.values[i * n + start..i * n + start + len]);
        }
        Ok(QTensor {
            shape: alloc::vec![m, len],
            values,
            scale: self.scale,
        })
    }
}

/// Max-abs scale: `max|t| / 127`, or 1.0 for an all-zero tensor.
pub fn compute_scale_maxabs(t: &Tensor) -> f32 {
    let m = t.max_abs();
    if m == 0.0 {
        1.0
    } else {
        m / QMAX as f32
    }
}

/// Round half to even, exact for the INT8 magnitudes involved.
fn round_half_even(x: f64) -> f64 {
    let floor = libm::floor(x);
    let frac = x - floor;
    if frac > 0.5 {
        floor + 1.0
    } else if frac < 0.5 {
        floor
    } else if (floor as i64) % 2 == 0 {
        floor
    } else {
        floor + 1.0
    }
}

fn quantize_value(v: f32, scale: f32) -> i8 {
    let q = round_half_even(v as f64 / scale as f64);
    q.clamp(-(QMAX as f64), QMAX as f64) as i8
}

/// `q_i = clamp(round_half_even(t_i / scale), -127, 127)`.
pub fn quantize(t: &Tensor, scale: f32) -> Result<QTensor> {
    if !(scale > 0.0) {
        return Err(Error::BadParam {
            what: "quantization scale",
            value: scale as f64,
        });
    }
    QTensor::from_parts(
        t.shape().to_vec(),
        t.data().iter().map(|&v| quantize_value(v, scale)).collect(),
        scale,
    )
}

/// `t_i = q_i * scale`.
pub fn dequantize(q: &QTensor) -> Tensor {
    let data = q.values.iter().map(|&v| v as f32 * q.scale).collect();
    Tensor::new(q.shape.clone(), data).expect("shape preserved")
}

/// Quantize-then-dequantize; the forward half of the fake-quantize node.
pub fn fake_quant(t: &Tensor, scale: f32) -> Result<Tensor> {
    Ok(dequantize(&quantize(t, scale)?))
}

/// Straight-through mask: 1 where `|t| <= 127 * scale`, 0 outside.
pub fn ste_mask(t: &Tensor, scale: f32) -> Tensor {
    let limit = QMAX as f32 * scale;
    let data = t
        .data()
        .iter()
        .map(|&v| if v.abs() <= limit { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

/// INT8 matrix product with exact INT32 accumulation, rescaled to FP32.
pub fn int8_matmul(a: &QTensor, b: &QTensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::DimMismatch {
            op: "int8_matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let rescale = a.scale * b.scale;
    let mut out = alloc::vec![0.0f32; m * n];
    for i in 0..m {
        let mut acc = alloc::vec![0i32; n];
        let arow = &a.values[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let av = av as i32;
            let brow = &b.values[p * n..(p + 1) * n];
            for (sum, &bv) in acc.iter_mut().zip(brow) {
                *sum += av * bv as i32;
            }
        }
        for (o, sum) in out[i * n..(i + 1) * n].iter_mut().zip(acc) {
            *o = sum as f32 * rescale;
        }
    }
    Tensor::new(alloc::vec![m, n], out)
}

/// Running max-abs observer for activation scales during QAT.
#[derive(Clone, Debug)]
pub struct ActCalibrator {
    running_absmax: f32,
    decay: f32,
    observed: bool,
}

impl ActCalibrator {
    pub fn new(decay: f32) -> Result<Self> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::BadParam {
                what: "calibrator decay",
                value: decay as f64,
            });
        }
        Ok(ActCalibrator {
            running_absmax: 0.0,
            decay,
            observed: false,
        })
    }

    /// `running_absmax <- max(decay * running_absmax, max|t|)`.
    pub fn observe(&mut self, t: &Tensor) {
        self.running_absmax = (self.decay * self.running_absmax).max(t.max_abs());
        self.observed = true;
    }

    pub fn running_absmax(&self) -> f32 {
        self.running_absmax
    }

    /// True once at least one batch has been observed.
    pub fn calibrated(&self) -> bool {
        self.observed
    }

    /// Activation scale `running_absmax / 127`, 1.0 while the stat is zero.
    pub fn scale(&self) -> f32 {
        if self.running_absmax == 0.0 {
            1.0
        } else {
            self.running_absmax / QMAX as f32
        }
    }

    /// Restores a calibrator from a persisted running max (checkpoint load).
    pub fn from_absmax(running_absmax: f32, decay: f32) -> Result<Self> {
        let mut c = ActCalibrator::new(decay)?;
        c.running_absmax = running_absmax;
        c.observed = true;
        Ok(c)
    }
}
