//! Reverse-mode differentiation over the tensor kernels.
//!
//! A `Tape` records operations eagerly (values are computed at insertion) in
//! topological order; `backward` walks the record in reverse and accumulates
//! gradients by summation wherever a node fans out. Non-differentiable
//! points take the conventional rules: relu uses subgradient 0 at the
//! origin, fake-quantize uses the straight-through estimator (identity
//! inside the representable range, zero outside).
//!
//! A tape is single-owner state: one training step builds and consumes it.
//! Distinct tapes are independent and may live on distinct threads.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kure;
use crate::quant;
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f32,
    },
    FakeQuant {
        x: NodeId,
        scale: f32,
    },
    Gather {
        table: NodeId,
        tokens: Vec<usize>,
    },
    MeanRows(NodeId),
    ColSlice {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ColConcat(Vec<NodeId>),
    Transpose(NodeId),
    Scale(NodeId, f32),
    AddConst(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Kurtosis {
        x: NodeId,
        eps: f64,
    },
    CrossEntropy {
        logits: NodeId,
        target: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], one slot per node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a node; zeros of the node's shape if the loss does not
    /// depend on it.
    pub fn wrt(&self, tape: &Tape, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(id).shape()),
        }
    }

    /// True if any gradient flowed into the node.
    pub fn reached(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

/// Operation record for one forward computation.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    /// Addition; also accepts the `[m, n] + [n]` bias broadcast.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::sub(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = tensor::relu(self.value(x));
        self.push(value, Op::Relu(x))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let value = tensor::softmax_rows(self.value(x))?;
        Ok(self.push(value, Op::SoftmaxRows(x)))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f32) -> Result<NodeId> {
        let value = tensor::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Fake-quantize with straight-through backward.
    pub fn fake_quant(&mut self, x: NodeId, scale: f32) -> Result<NodeId> {
        let value = quant::fake_quant(self.value(x), scale)?;
        Ok(self.push(value, Op::FakeQuant { x, scale }))
    }

    /// Row lookup: output row i is `table` row `tokens[i]`.
    pub fn gather(&mut self, table: NodeId, tokens: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let (rows, cols) = t.dims2("gather")?;
        let mut data = Vec::with_capacity(tokens.len() * cols);
        for &tok in tokens {
            if tok >= rows {
                return Err(Error::TokenOutOfRange {
                    token: tok,
                    vocab: rows,
                });
            }
            data.extend_from_slice(&t.data()[tok * cols..(tok + 1) * cols]);
        }
        let value = Tensor::new(vec![tokens.len(), cols], data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                tokens: tokens.to_vec(),
            },
        ))
    }

    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let value = tensor::mean_rows(self.value(x))?;
        Ok(self.push(value, Op::MeanRows(x)))
    }

    pub fn col_slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let value = self.value(x).col_slice(start, len)?;
        Ok(self.push(value, Op::ColSlice { x, start, len }))
    }

    pub fn col_concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = tensor::col_concat(&tensors)?;
        Ok(self.push(value, Op::ColConcat(parts.to_vec())))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).transpose()?;
        Ok(self.push(value, Op::Transpose(x)))
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        let value = tensor::scale(self.value(x), c);
        self.push(value, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: NodeId, c: f32) -> NodeId {
        let data = self.value(x).data().iter().map(|v| v + c).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).expect("shape preserved");
        self.push(value, Op::AddConst(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|v| v * v).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).expect("shape preserved");
        self.push(value, Op::Square(x))
    }

    /// Sum of all elements as a `[1]` scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::Sum(x))
    }

    /// Kurtosis of all elements as a `[1]` scalar (see [`kure::kurtosis`]).
    pub fn kurtosis(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let value = Tensor::scalar(kure::kurtosis(self.value(x), eps)?);
        Ok(self.push(value, Op::Kurtosis { x, eps }))
    }

    /// Softmax cross-entropy of `[1, C]` logits against a class index.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let l = self.value(logits);
        let (rows, classes) = l.dims2("cross_entropy")?;
        if rows != 1 || target >= classes {
            return Err(Error::DimMismatch {
                op: "cross_entropy",
                lhs: l.shape().to_vec(),
                rhs: vec![target],
            });
        }
        let row = l.data();
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v));
        let lse = max + libm::logf(row.iter().map(|&v| libm::expf(v - max)).sum::<f32>());
        let value = Tensor::scalar(lse - row[target]);
        Ok(self.push(value, Op::CrossEntropy { logits, target }))
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss {
                numel: self.value(loss).numel(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let upstream = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(idx, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, idx: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let da = tensor::matmul(dy, &self.value(*b).transpose()?)?;
                let db = tensor::matmul(&self.value(*a).transpose()?, dy)?;
                add_grad(grads, *a, da);
                add_grad(grads, *b, db);
            }
            Op::Add(a, b) => {
                add_grad(grads, *a, dy.clone());
                if self.value(*b).shape() == dy.shape() {
                    add_grad(grads, *b, dy.clone());
                } else {
                    // Bias broadcast: fold rows back into the vector.
                    let (m, n) = dy.dims2("add-backward")?;
                    let mut db = vec![0.0f32; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += dy.data()[i * n + j];
                        }
                    }
                    add_grad(grads, *b, Tensor::new(vec![n], db)?);
                }
            }
            Op::Sub(a, b) => {
                add_grad(grads, *a, dy.clone());
                add_grad(grads, *b, tensor::scale(dy, -1.0));
            }
            Op::Mul(a, b) => {
                add_grad(grads, *a, tensor::mul(dy, self.value(*b))?);
                add_grad(grads, *b, tensor::mul(dy, self.value(*a))?);
            }
            Op::Relu(x) => {
                let data = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                add_grad(grads, *x, Tensor::new(dy.shape().to_vec(), data)?);
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[idx].value;
                let (m, n) = y.dims2("softmax-backward")?;
                let mut dx = vec![0.0f32; m * n];
                for i in 0..m {
                    let yrow = &y.data()[i * n..(i + 1) * n];
                    let grow = &dy.data()[i * n..(i + 1) * n];
                    let dot: f32 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[i * n + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                add_grad(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let (m, n) = xv.dims2("layer_norm-backward")?;
                let mut dx = vec![0.0f32; m * n];
                let mut dgain = vec![0.0f32; n];
                let mut dbias = vec![0.0f32; n];
                for i in 0..m {
                    let row = &xv.data()[i * n..(i + 1) * n];
                    let grow = &dy.data()[i * n..(i + 1) * n];
                    let mean = row.iter().sum::<f32>() / n as f32;
                    let var =
                        row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
                    let inv = 1.0 / libm::sqrtf(var + eps);
                    let xhat: Vec<f32> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let t: Vec<f32> = grow
                        .iter()
                        .zip(gv.data())
                        .map(|(&g, &w)| g * w)
                        .collect();
                    let mean_t = t.iter().sum::<f32>() / n as f32;
                    let mean_tx = t
                        .iter()
                        .zip(&xhat)
                        .map(|(&a, &b)| a * b)
                        .sum::<f32>()
                        / n as f32;
                    for j in 0..n {
                        dx[i * n + j] = inv * (t[j] - mean_t - xhat[j] * mean_tx);
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                    }
                }
                add_grad(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                add_grad(grads, *gain, Tensor::new(vec![n], dgain)?);
                add_grad(grads, *bias, Tensor::new(vec![n], dbias)?);
            }
            Op::FakeQuant { x, scale } => {
                let mask = quant::ste_mask(self.value(*x), *scale);
                add_grad(grads, *x, tensor::mul(dy, &mask)?);
            }
            Op::Gather { table, tokens } => {
                let t = self.value(*table);
                let (rows, cols) = t.dims2("gather-backward")?;
                let mut dt = vec![0.0f32; rows * cols];
                for (i, &tok) in tokens.iter().enumerate() {
                    for j in 0..cols {
                        dt[tok * cols + j] += dy.data()[i * cols + j];
                    }
                }
                add_grad(grads, *table, Tensor::new(vec![rows, cols], dt)?);
            }
            Op::MeanRows(x) => {
                let (m, n) = self.value(*x).dims2("mean_rows-backward")?;
                let inv = 1.0 / m as f32;
                let mut dx = Vec::with_capacity(m * n);
                for _ in 0..m {
                    dx.extend(dy.data().iter().map(|&g| g * inv));
                }
                add_grad(grads, *x, Tensor::new(vec![m, n], dx)?);
            }
            Op::ColSlice { x, start, len } => {
                let (m, n) = self.value(*x).dims2("col_slice-backward")?;
                let mut dx = vec![0.0f32; m * n];
                for i in 0..m {
                    for j in 0..*len {
                        dx[i * n + start + j] = dy.data()[i * len + j];
                    }
                }
                add_grad(grads, *x, Tensor::new(vec![m, n], dx)?);
            }
            Op::ColConcat(parts) => {
                let (m, _) = dy.dims2("col_concat-backward")?;
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).shape()[1];
                    let total = dy.shape()[1];
                    let mut dp = Vec::with_capacity(m * n);
                    for i in 0..m {
                        dp.extend_from_slice(
                            &dy.data()[i * total + offset..i * total + offset + n],
                        );
                    }
                    add_grad(grads, p, Tensor::new(vec![m, n], dp)?);
                    offset += n;
                }
            }
            Op::Transpose(x) => {
                add_grad(grads, *x, dy.transpose()?);
            }
            Op::Scale(x, c) => {
                add_grad(grads, *x, tensor::scale(dy, *c));
            }
            Op::AddConst(x) => {
                add_grad(grads, *x, dy.clone());
            }
            Op::Square(x) => {
                let two_x = tensor::scale(self.value(*x), 2.0);
                add_grad(grads, *x, tensor::mul(dy, &two_x)?);
            }
            Op::Sum(x) => {
                let g = dy.data()[0];
                add_grad(grads, *x, Tensor::full(self.value(*x).shape(), g));
            }
            Op::Kurtosis { x, eps } => {
                let g = kure::kurtosis_grad(self.value(*x), *eps)?;
                add_grad(grads, *x, tensor::scale(&g, dy.data()[0]));
            }
            Op::CrossEntropy { logits, target } => {
                let l = self.value(*logits);
                let p = tensor::softmax_rows(l)?;
                let mut dl = tensor::scale(&p, dy.data()[0]);
                dl.data_mut()[*target] -= dy.data()[0];
                add_grad(grads, *logits, dl);
            }
        }
        Ok(())
    }
}

fn add_grad(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Central-difference gradient audit.
///
/// `f` evaluates the scalar function (in f64, so the differences are not
/// drowned by FP32 rounding); `analytic` is the gradient under test, usually
/// taken from a tape backward pass. Returns the max over elements of
/// `|analytic - central| / (|analytic| + |central| + 1e-8)`.
pub fn grad_check<F>(f: F, analytic: &Tensor, x: &Tensor, eps: f64) -> Result<f32>
where
    F: Fn(&Tensor) -> f64,
{
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::BadParam {
            what: "grad_check eps",
            value: eps,
        });
    }
    if analytic.shape() != x.shape() {
        return Err(Error::DimMismatch {
            op: "grad_check",
            lhs: analytic.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    let mut worst = 0.0f32;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let x_up = (orig as f64 + eps) as f32;
        let x_dn = (orig as f64 - eps) as f32;
        probe.data_mut()[i] = x_up;
        let up = f(&probe);
        probe.data_mut()[i] = x_dn;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        // Divide by the realized step; FP32 storage quantizes the probes.
        let central = ((up - down) / (x_up as f64 - x_dn as f64)) as f32;
        let a = analytic.data()[i];
        let rel = (a - central).abs() / (a.abs() + central.abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rand_tensor, Dist, Rng};

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap());
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(&tape, x), Tensor::full(&[2, 2], 1.0));
    }

    #[test]
    fn sum_of_squares_gradient_is_2x() {
        let mut tape = Tape::new();
        let xv = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let x = tape.leaf(xv.clone());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(&tape, x), tensor::scale(&xv, 2.0));
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[4], 2.0));
        let c = tape.leaf(Tensor::scalar(5.0));
        let loss = tape.sum(c);
        let grads = tape.backward(loss).unwrap();
        assert!(!grads.reached(x));
        assert_eq!(grads.wrt(&tape, x), Tensor::zeros(&[4]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[3], 1.0));
        assert!(matches!(
            tape.backward(x),
            Err(Error::NonScalarLoss { numel: 3 })
        ));
    }

    #[test]
    fn fanout_accumulates_by_summation() {
        // loss = sum(x + x) => grad = 2.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2], 3.0));
        let doubled = tape.add(x, x).unwrap();
        let loss = tape.sum(doubled);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(&tape, x), Tensor::full(&[2], 2.0));
    }

    #[test]
    fn ste_gradient_is_masked_identity() {
        let mut tape = Tape::new();
        let xv = Tensor::new(vec![3], vec![0.104, 10.0, -0.5]).unwrap();
        let x = tape.leaf(xv.clone());
        let fq = tape.fake_quant(x, 0.01).unwrap();
        let weights = tape.leaf(Tensor::new(vec![3], vec![2.0, 2.0, 2.0]).unwrap());
        let weighted = tape.mul(fq, weights).unwrap();
        let loss = tape.sum(weighted);
        let grads = tape.backward(loss).unwrap();
        // In range: upstream (2.0) passes through; out of range: zero.
        assert_eq!(grads.wrt(&tape, x).data(), &[2.0, 0.0, 2.0]);
    }

    #[test]
    fn gather_scatters_gradient() {
        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::new(vec![3, 2], vec![1.0; 6]).unwrap());
        let picked = tape.gather(table, &[2, 0, 2]).unwrap();
        let loss = tape.sum(picked);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(
            grads.wrt(&tape, table).data(),
            &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]
        );
    }

    #[test]
    fn gather_rejects_out_of_range_token() {
        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::new(vec![3, 2], vec![1.0; 6]).unwrap());
        assert!(matches!(
            tape.gather(table, &[3]),
            Err(Error::TokenOutOfRange { token: 3, vocab: 3 })
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![1, 3], vec![0.2, -0.7, 1.1]).unwrap());
        let loss = tape.cross_entropy(logits, 2).unwrap();
        let grads = tape.backward(loss).unwrap();
        let p = tensor::softmax_rows(tape.value(logits)).unwrap();
        let g = grads.wrt(&tape, logits);
        assert!((g.data()[0] - p.data()[0]).abs() < 1e-6);
        assert!((g.data()[1] - p.data()[1]).abs() < 1e-6);
        assert!((g.data()[2] - (p.data()[2] - 1.0)).abs() < 1e-6);
    }

    #[test]
    fn grad_check_validates_eps() {
        let x = Tensor::full(&[2], 1.0);
        let g = Tensor::full(&[2], 1.0);
        assert!(grad_check(|_| 0.0, &g, &x, 1e-6).is_err());
        assert!(grad_check(|_| 0.0, &g, &x, 0.5).is_err());
    }

    #[test]
    fn grad_check_linear_function_is_exact() {
        // f linear => central difference is exact up to arithmetic noise.
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 0.7, 2.0]).unwrap();
        let coef = [2.0f64, -1.0, 0.5, 3.0];
        let f = |t: &Tensor| -> f64 {
            t.data()
                .iter()
                .zip(coef.iter())
                .map(|(&v, &c)| v as f64 * c)
                .sum()
        };
        let analytic = Tensor::new(vec![4], coef.iter().map(|&c| c as f32).collect()).unwrap();
        let err = grad_check(f, &analytic, &x, 1e-3).unwrap();
        assert!(err < 1e-6, "linear grad_check error {err}");
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let mut rng = Rng::new(9);
        let x = rand_tensor(&mut rng, &[64], Dist::Normal { mean: 0.0, std: 1.0 }).unwrap();
        let f = |t: &Tensor| -> f64 { t.data().iter().map(|&v| (v as f64) * (v as f64)).sum() };
        let analytic = tensor::scale(&x, 2.0);
        let err = grad_check(f, &analytic, &x, 1e-3).unwrap();
        assert!(err < 1e-4, "sum-of-squares grad_check error {err}");
    }

    // Tape backward for each kernel against f64 central differences, using
    // sum-shaped losses so every input coordinate carries healthy gradient.
    fn tape_grad_vs_f64<F>(build: impl Fn(&mut Tape, NodeId) -> NodeId, f64_eval: F, x: &Tensor, tol: f32)
    where
        F: Fn(&Tensor) -> f64,
    {
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let loss = build(&mut tape, xid);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.wrt(&tape, xid);
        let err = grad_check(f64_eval, &analytic, x, 1e-3).unwrap();
        assert!(err < tol, "gradient error {err} exceeds {tol}");
    }

    fn f64_softmax_rows(x: &Tensor) -> Vec<f64> {
        let n = x.shape()[1];
        let m = x.shape()[0];
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row: Vec<f64> = x.data()[i * n..(i + 1) * n]
                .iter()
                .map(|&v| v as f64)
                .collect();
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| e / sum));
        }
        out
    }

    #[test]
    fn softmax_backward_matches_central_difference() {
        let mut rng = Rng::new(4);
        let x = rand_tensor(&mut rng, &[3, 5], Dist::Normal { mean: 0.0, std: 1.0 }).unwrap();
        tape_grad_vs_f64(
            |tape, xid| {
                let s = tape.softmax_rows(xid).unwrap();
                let sq = tape.square(s);
                tape.sum(sq)
            },
            |t| f64_softmax_rows(t).iter().map(|v| v * v).sum(),
            &x,
            1e-4,
        );
    }

    #[test]
    fn layer_norm_backward_matches_central_difference() {
        let mut rng = Rng::new(6);
        let x = rand_tensor(&mut rng, &[4, 8], Dist::Normal { mean: 0.0, std: 1.0 }).unwrap();
        let gain = rand_tensor(&mut rng, &[8], Dist::Uniform { low: 0.5, high: 1.5 }).unwrap();
        let bias = rand_tensor(&mut rng, &[8], Dist::Uniform { low: -0.5, high: 0.5 }).unwrap();
        let eps = 1e-5f32;
        let g2 = gain.clone();
        let b2 = bias.clone();
        let f = move |t: &Tensor| -> f64 {
            let m = t.shape()[0];
            let n = t.shape()[1];
            let mut acc = 0.0f64;
            for i in 0..m {
                let row: Vec<f64> = t.data()[i * n..(i + 1) * n]
                    .iter()
                    .map(|&v| v as f64)
                    .collect();
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps as f64).sqrt();
                for j in 0..n {
                    let y = (row[j] - mean) * inv * g2.data()[j] as f64 + b2.data()[j] as f64;
                    acc += y * y;
                }
            }
            acc
        };
        tape_grad_vs_f64(
            |tape, xid| {
                let g = tape.leaf(gain.clone());
                let b = tape.leaf(bias.clone());
                let ln = tape.layer_norm(xid, g, b, eps).unwrap();
                let sq = tape.square(ln);
                tape.sum(sq)
            },
            f,
            &x,
            2e-4,
        );
    }

    #[test]
    fn matmul_backward_matches_central_difference() {
        let mut rng = Rng::new(8);
        let x = rand_tensor(&mut rng, &[3, 4], Dist::Normal { mean: 0.0, std: 1.0 }).unwrap();
        let w = rand_tensor(&mut rng, &[4, 2], Dist::Normal { mean: 0.0, std: 1.0 }).unwrap();
        let w2 = w.clone();
        tape_grad_vs_f64(
            |tape, xid| {
                let wid = tape.leaf(w.clone());
                let y = tape.matmul(xid, wid).unwrap();
                let sq = tape.square(y);
                tape.sum(sq)
            },
            move |t: &Tensor| -> f64 {
                let (m, k) = (3, 4);
                let n = 2;
                let mut acc = 0.0f64;
                for i in 0..m {
                    for j in 0..n {
                        let mut s = 0.0f64;
                        for p in 0..k {
                            s += t.data()[i * k + p] as f64 * w2.data()[p * n + j] as f64;
                        }
                        acc += s * s;
                    }
                }
                acc
            },
            &x,
            1e-4,
        );
    }
}
