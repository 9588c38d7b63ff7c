//! Base distributions for the flow and the seeded random source they draw from.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistributionError {
    #[error("point lies outside the support of the base distribution")]
    OutOfSupport,
    #[error("invalid distribution: {0}")]
    Invalid(String),
    #[error("expected {expected} coordinates, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
}

/// Seeded ChaCha20 stream.
///
/// Uniforms take the top 53 bits of a `u64` draw, giving values on `[0, 1)`.
/// Normals use the Marsaglia polar method; the second variate of each accepted
/// pair is cached and returned by the next call.
#[derive(Debug, Clone)]
pub struct SimRng {
    inner: ChaCha20Rng,
    seed: u64,
    spare_normal: Option<f64>,
}

impl SimRng {
    pub fn new(seed: u64) -> Self {
        SimRng {
            inner: ChaCha20Rng::seed_from_u64(seed),
            seed,
            spare_normal: None,
        }
    }

    /// Independent stream `stream` of the same seed.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SimRng {
            inner,
            seed,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(v) = self.spare_normal.take() {
            return v;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let factor = (-2.0 * s.ln() / s).sqrt();
                self.spare_normal = Some(v * factor);
                return u * factor;
            }
        }
    }
}

/// Base density `p_Z` of a flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseDistribution {
    StandardNormal {
        dim: usize,
    },
    IsotropicNormal {
        dim: usize,
        variance: f64,
    },
    UniformUnitCube {
        dim: usize,
    },
    /// Equal-weight mixture of `N(mean1, variance I)` and `N(mean2, variance I)`.
    TwoComponentGaussianMixture {
        dim: usize,
        mean1: Vec<f64>,
        mean2: Vec<f64>,
        variance: f64,
    },
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn isotropic_log_density(z: &[f64], mean: Option<&[f64]>, variance: f64) -> f64 {
    let sq: f64 = match mean {
        Some(m) => z.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum(),
        None => z.iter().map(|a| a * a).sum(),
    };
    -0.5 * z.len() as f64 * (LN_2PI + variance.ln()) - sq / (2.0 * variance)
}

impl BaseDistribution {
    pub fn dim(&self) -> usize {
        match self {
            BaseDistribution::StandardNormal { dim }
            | BaseDistribution::IsotropicNormal { dim, .. }
            | BaseDistribution::UniformUnitCube { dim }
            | BaseDistribution::TwoComponentGaussianMixture { dim, .. } => *dim,
        }
    }

    pub fn validate(&self) -> Result<(), DistributionError> {
        let dim = self.dim();
        if dim == 0 {
            return Err(DistributionError::Invalid(
                "dimension must be positive".into(),
            ));
        }
        match self {
            BaseDistribution::IsotropicNormal { variance, .. } if !(*variance > 0.0) => Err(
                DistributionError::Invalid(format!("variance must be positive, got {variance}")),
            ),
            BaseDistribution::TwoComponentGaussianMixture {
                mean1,
                mean2,
                variance,
                ..
            } => {
                if !(*variance > 0.0) {
                    return Err(DistributionError::Invalid(format!(
                        "variance must be positive, got {variance}"
                    )));
                }
                if mean1.len() != dim || mean2.len() != dim {
                    return Err(DistributionError::Invalid(
                        "mixture means must have length dim".into(),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Draws `n` iid rows, returning an `[n, dim]` tensor.
    ///
    /// Mixture rows first draw one uniform to pick the component.
    pub fn sample(&self, n: usize, rng: &mut SimRng) -> Tensor {
        let dim = self.dim();
        let mut data = Vec::with_capacity(n * dim);
        for _ in 0..n {
            match self {
                BaseDistribution::StandardNormal { .. } => {
                    data.extend((0..dim).map(|_| rng.standard_normal()));
                }
                BaseDistribution::IsotropicNormal { variance, .. } => {
                    let sd = variance.sqrt();
                    data.extend((0..dim).map(|_| sd * rng.standard_normal()));
                }
                BaseDistribution::UniformUnitCube { .. } => {
                    data.extend((0..dim).map(|_| rng.uniform()));
                }
                BaseDistribution::TwoComponentGaussianMixture {
                    mean1,
                    mean2,
                    variance,
                    ..
                } => {
                    let sd = variance.sqrt();
                    let mean = if rng.uniform() < 0.5 { mean1 } else { mean2 };
                    data.extend(mean.iter().map(|m| m + sd * rng.standard_normal()));
                }
            }
        }
        Tensor::from_parts(vec![n, dim], data)
    }

    /// Exact `ln p_Z(z)`.
    pub fn log_density(&self, z: &[f64]) -> Result<f64, DistributionError> {
        if z.len() != self.dim() {
            return Err(DistributionError::Dimension {
                expected: self.dim(),
                actual: z.len(),
            });
        }
        Ok(match self {
            BaseDistribution::StandardNormal { .. } => isotropic_log_density(z, None, 1.0),
            BaseDistribution::IsotropicNormal { variance, .. } => {
                isotropic_log_density(z, None, *variance)
            }
            BaseDistribution::UniformUnitCube { .. } => {
                if z.iter().all(|&v| (0.0..=1.0).contains(&v)) {
                    0.0
                } else {
                    return Err(DistributionError::OutOfSupport);
                }
            }
            BaseDistribution::TwoComponentGaussianMixture {
                mean1,
                mean2,
                variance,
                ..
            } => {
                let a = isotropic_log_density(z, Some(mean1), *variance);
                let b = isotropic_log_density(z, Some(mean2), *variance);
                let m = a.max(b);
                m + ((a - m).exp() + (b - m).exp()).ln() + 0.5f64.ln()
            }
        })
    }

    /// Row-wise `ln p_Z` of a recorded `[n, dim]` batch, shape `[n, 1]`.
    pub fn log_density_tape(&self, tape: &mut Tape, z: Var) -> Result<Var, DistributionError> {
        let shape = tape.value(z).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.dim() {
            return Err(DistributionError::Dimension {
                expected: self.dim(),
                actual: shape.get(1).copied().unwrap_or(0),
            });
        }
        let n = shape[0];
        let dim = self.dim() as f64;
        let gaussian = |tape: &mut Tape, z: Var, mean: Option<&[f64]>, variance: f64| {
            let centred = match mean {
                Some(m) => {
                    let neg = tape.constant(Tensor::vector(m.iter().map(|v| -v).collect()))?;
                    tape.add_row(z, neg)?
                }
                None => z,
            };
            let sq = tape.square(centred)?;
            let s = tape.sum_rows(sq)?;
            let scaled = tape.scale(s, -0.5 / variance)?;
            tape.shift(scaled, -0.5 * dim * (LN_2PI + variance.ln()))
        };
        Ok(match self {
            BaseDistribution::StandardNormal { .. } => gaussian(tape, z, None, 1.0)?,
            BaseDistribution::IsotropicNormal { variance, .. } => {
                gaussian(tape, z, None, *variance)?
            }
            BaseDistribution::UniformUnitCube { .. } => {
                if tape
                    .value(z)
                    .data()
                    .iter()
                    .any(|v| !(0.0..=1.0).contains(v))
                {
                    return Err(DistributionError::OutOfSupport);
                }
                tape.constant(Tensor::zeros(&[n, 1]))?
            }
            BaseDistribution::TwoComponentGaussianMixture {
                mean1,
                mean2,
                variance,
                ..
            } => {
                let a = gaussian(tape, z, Some(mean1), *variance)?;
                let b = gaussian(tape, z, Some(mean2), *variance)?;
                // max(a, b) = -min(-a, -b)
                let na = tape.neg(a)?;
                let nb = tape.neg(b)?;
                let both = tape.concat_columns(&[na, nb])?;
                let neg_max = tape.min_reduce(both)?;
                let ea = tape.add(a, neg_max)?;
                let eb = tape.add(b, neg_max)?;
                let ea = tape.exp(ea)?;
                let eb = tape.exp(eb)?;
                let s = tape.add(ea, eb)?;
                let l = tape.ln(s)?;
                let l = tape.sub(l, neg_max)?;
                tape.shift(l, 0.5f64.ln())?
            }
        })
    }
}
