//! Kurtosis statistics and the selective kurtosis regularizer.
//!
//! Kurtosis here is the fourth central moment over the squared second
//! central moment, with population (divide-by-n) normalization, so the
//! uniform distribution sits at 1.8 and the normal at 3.0. Moments are
//! accumulated in f64; fourth powers of desk-scale weights are far below
//! what FP32 sums resolve.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

/// Kurtosis of the uniform distribution, the regularizer's default target.
pub const UNIFORM_KURTOSIS: f32 = 1.8;

/// Default stabilizer added to the second moment before squaring.
pub const MOMENT_EPS: f64 = 1e-12;

struct Moments {
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

fn central_moments(data: &[f32]) -> Moments {
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0f64, 0.0f64, 0.0f64);
    for &v in data {
        let d = v as f64 - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    Moments {
        mean,
        m2: m2 / n,
        m3: m3 / n,
        m4: m4 / n,
    }
}

/// Kurtosis `m4 / (m2 + eps)^2` of all tensor elements.
///
/// Errors on fewer than two elements; a constant tensor reports 0 (callers
/// treat that as the degenerate flag rather than a meaningful value).
pub fn kurtosis(t: &Tensor, eps: f64) -> Result<f32> {
    if t.numel() < 2 {
        return Err(Error::Degenerate {
            what: "kurtosis",
            numel: t.numel(),
        });
    }
    let m = central_moments(t.data());
    if m.m2 == 0.0 {
        return Ok(0.0);
    }
    let denom = m.m2 + eps;
    Ok((m.m4 / (denom * denom)) as f32)
}

/// Analytic gradient of [`kurtosis`] with respect to each element:
/// `(4/n) * ((d_j^3 - m3) / (m2+eps)^2 - m4 * d_j / (m2+eps)^3)`
/// with `d_j` the centered element. Degenerate tensors get a zero gradient.
pub fn kurtosis_grad(t: &Tensor, eps: f64) -> Result<Tensor> {
    if t.numel() < 2 {
        return Err(Error::Degenerate {
            what: "kurtosis_grad",
            numel: t.numel(),
        });
    }
    let m = central_moments(t.data());
    if m.m2 == 0.0 {
        return Ok(Tensor::zeros(t.shape()));
    }
    let n = t.numel() as f64;
    let denom = m.m2 + eps;
    let denom2 = denom * denom;
    let denom3 = denom2 * denom;
    let coeff = 4.0 / n;
    let data = t
        .data()
        .iter()
        .map(|&v| {
            let d = v as f64 - m.mean;
            (coeff * ((d * d * d - m.m3) / denom2 - m.m4 * d / denom3)) as f32
        })
        .collect();
    Tensor::new(t.shape().to_vec(), data)
}

/// Per-tensor summary statistics used by the report.
#[derive(Clone, Copy, Debug)]
pub struct TensorStats {
    pub numel: usize,
    pub min: f32,
    pub max: f32,
    pub mean: f32,
    pub std: f32,
    pub kurtosis: f32,
    pub degenerate: bool,
}

/// Statistics of a tensor; total on every input with at least one element.
pub fn tensor_stats(t: &Tensor, eps: f64) -> Result<TensorStats> {
    if t.numel() == 0 {
        return Err(Error::Degenerate {
            what: "tensor_stats",
            numel: 0,
        });
    }
    let m = central_moments(t.data());
    let min = t.data().iter().fold(f32::INFINITY, |a, &b| a.min(b));
    let max = t.data().iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let degenerate = t.numel() < 2 || m.m2 == 0.0;
    let kurtosis = if degenerate {
        0.0
    } else {
        let denom = m.m2 + eps;
        (m.m4 / (denom * denom)) as f32
    };
    Ok(TensorStats {
        numel: t.numel(),
        min,
        max,
        mean: m.mean as f32,
        std: libm::sqrt(m.m2) as f32,
        kurtosis,
        degenerate,
    })
}

/// Functional form of the regularizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KureMode {
    /// Sum of per-tensor kurtosis values.
    PlainSum,
    /// Sum of squared deviations from a target kurtosis.
    TargetDeviation,
}

/// One row of a [`KurtosisReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub name: String,
    pub numel: usize,
    pub min: f32,
    pub max: f32,
    pub mean: f32,
    pub std: f32,
    pub kurtosis: f32,
    pub included: bool,
    pub degenerate: bool,
}

/// Per-tensor kurtosis table driving the selection policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KurtosisReport {
    pub entries: Vec<ReportEntry>,
    pub lambda: f32,
    pub mode: KureMode,
    pub target: f32,
}

impl KurtosisReport {
    pub fn entry(&self, name: &str) -> Option<&ReportEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn included_count(&self) -> usize {
        self.entries.iter().filter(|e| e.included).count()
    }

    pub fn excluded_count(&self) -> usize {
        self.entries.len() - self.included_count()
    }

    /// Mean `|K - target|` over included, non-degenerate tensors.
    pub fn mean_abs_deviation(&self, target: f32) -> f32 {
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for e in &self.entries {
            if e.included && !e.degenerate {
                sum += (e.kurtosis - target).abs() as f64;
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            (sum / count as f64) as f32
        }
    }
}

/// Minimal glob: `*` matches any run of characters, everything else literal.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    fn inner(p: &[u8], n: &[u8]) -> bool {
        match p.first() {
            None => n.is_empty(),
            Some(b'*') => {
                for skip in 0..=n.len() {
                    if inner(&p[1..], &n[skip..]) {
                        return true;
                    }
                }
                false
            }
            Some(&c) => n.first() == Some(&c) && inner(&p[1..], &n[1..]),
        }
    }
    inner(pattern.as_bytes(), name.as_bytes())
}

/// Builds the per-tensor report over the model's weight matrices.
///
/// The regularizer targets the multiplicative weights (rank-2 tensors);
/// biases and layer-norm vectors are not listed. A tensor is included when
/// its kurtosis is at or below `threshold` and its name matches no
/// exclusion pattern.
pub fn kurtosis_report(
    params: &ModelParams,
    threshold: f32,
    exclusion_patterns: &[String],
    lambda: f32,
    mode: KureMode,
    target: f32,
) -> KurtosisReport {
    let mut entries = Vec::new();
    for (name, tensor) in params.iter() {
        if tensor.rank() != 2 {
            continue;
        }
        let stats = tensor_stats(tensor, MOMENT_EPS).expect("weight tensors are non-empty");
        let name_excluded = exclusion_patterns.iter().any(|p| glob_match(p, name));
        let included = stats.kurtosis <= threshold && !name_excluded;
        entries.push(ReportEntry {
            name: String::from(name),
            numel: stats.numel,
            min: stats.min,
            max: stats.max,
            mean: stats.mean,
            std: stats.std,
            kurtosis: stats.kurtosis,
            included,
            degenerate: stats.degenerate,
        });
    }
    KurtosisReport {
        entries,
        lambda,
        mode,
        target,
    }
}

/// Penalty value from already-computed kurtosis values.
pub fn penalty_from_kurtoses(kurtoses: &[f32], mode: KureMode, target: f32) -> f32 {
    let mut acc = 0.0f64;
    for &k in kurtoses {
        match mode {
            KureMode::PlainSum => acc += k as f64,
            KureMode::TargetDeviation => {
                let d = k as f64 - target as f64;
                acc += d * d;
            }
        }
    }
    acc as f32
}

/// Adds the regularizer subgraph to a tape over the included tensors.
///
/// Returns `None` when the inclusion set is empty: the penalty is exactly
/// zero and no gradient flows anywhere. Excluded tensors are never touched,
/// so their regularizer gradient is bitwise zero. Degenerate (constant)
/// tensors are skipped to keep them out of both value and gradient.
pub fn penalty_node(
    tape: &mut Tape,
    tensors: &[(NodeId, bool)],
    mode: KureMode,
    target: f32,
    eps: f64,
) -> Result<Option<NodeId>> {
    let mut acc: Option<NodeId> = None;
    for &(id, included) in tensors {
        if !included {
            continue;
        }
        let stats = tensor_stats(tape.value(id), eps)?;
        if stats.degenerate {
            continue;
        }
        let k = tape.kurtosis(id, eps)?;
        let term = match mode {
            KureMode::PlainSum => k,
            KureMode::TargetDeviation => {
                let d = tape.add_const(k, -target);
                tape.square(d)
            }
        };
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    Ok(acc)
}
