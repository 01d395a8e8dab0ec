//! Seeded random tensors with a fixed, documented generator.
//!
//! The generator is xoshiro256++ seeded through SplitMix64, with all
//! floating-point transforms done in f64 via `libm` software routines, so a
//! given seed produces bit-identical sample streams on every platform.
//! Distributions: uniform via the 53-bit mantissa ladder, normal via
//! Box-Muller, Student-t via Bailey's polar method
//! `t = sqrt(dof * (u^(-2/dof) - 1)) * cos(2*pi*v)`.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Deterministic pseudorandom generator (xoshiro256++/SplitMix64).
#[derive(Clone, Debug)]
pub struct Rng {
    state: [u64; 4],
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        // SplitMix64 expansion of the seed into the xoshiro state.
        let mut sm = seed;
        let mut next = || {
            sm = sm.wrapping_add(0x9E3779B97F4A7C15);
            let mut z = sm;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
            z ^ (z >> 31)
        };
        Rng {
            state: [next(), next(), next(), next()],
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)` with 53 random mantissa bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`, safe as a logarithm argument.
    fn next_f64_open(&mut self) -> f64 {
        1.0 - self.next_f64()
    }

    fn next_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.next_f64()
    }

    /// Standard normal via Box-Muller.
    fn next_normal(&mut self) -> f64 {
        let u = self.next_f64_open();
        let v = self.next_f64();
        libm::sqrt(-2.0 * libm::log(u)) * libm::cos(2.0 * core::f64::consts::PI * v)
    }

    /// Student-t with `dof` degrees of freedom via Bailey's polar method.
    fn next_student_t(&mut self, dof: f64) -> f64 {
        let u = self.next_f64_open();
        let v = self.next_f64();
        libm::sqrt(dof * (libm::pow(u, -2.0 / dof) - 1.0))
            * libm::cos(2.0 * core::f64::consts::PI * v)
    }

    /// Uniform integer in `[0, n)` by rejection-free modulo of a 64-bit draw.
    ///
    /// The modulo bias is below 2^-50 for every `n` used here.
    pub fn next_index(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}

/// Sampling distributions for [`rand_tensor`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Dist {
    Uniform { low: f32, high: f32 },
    Normal { mean: f32, std: f32 },
    StudentT { dof: f32, scale: f32 },
}

impl Dist {
    fn validate(&self) -> Result<()> {
        match *self {
            Dist::Uniform { low, high } => {
                if !(high > low) {
                    return Err(Error::BadParam {
                        what: "uniform bounds (high must exceed low)",
                        value: (high - low) as f64,
                    });
                }
            }
            Dist::Normal { std, .. } => {
                if !(std > 0.0) {
                    return Err(Error::BadParam {
                        what: "normal std",
                        value: std as f64,
                    });
                }
            }
            Dist::StudentT { dof, scale } => {
                if !(dof > 0.0) {
                    return Err(Error::BadParam {
                        what: "student_t dof",
                        value: dof as f64,
                    });
                }
                if !(scale > 0.0) {
                    return Err(Error::BadParam {
                        what: "student_t scale",
                        value: scale as f64,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Fills a tensor of the given shape with reproducible samples.
pub fn rand_tensor(rng: &mut Rng, shape: &[usize], dist: Dist) -> Result<Tensor> {
    dist.validate()?;
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    match dist {
        Dist::Uniform { low, high } => {
            for _ in 0..n {
                data.push(rng.next_range(low as f64, high as f64) as f32);
            }
        }
        Dist::Normal { mean, std } => {
            for _ in 0..n {
                data.push((mean as f64 + std as f64 * rng.next_normal()) as f32);
            }
        }
        Dist::StudentT { dof, scale } => {
            for _ in 0..n {
                data.push((scale as f64 * rng.next_student_t(dof as f64)) as f32);
            }
        }
    }
    Tensor::new(shape.to_vec(), data)
}
