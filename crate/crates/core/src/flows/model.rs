use crate::autodiff::{Tape, Var};
use crate::distributions::{BaseDistribution, SimRng};
use crate::tensor::Tensor;

use super::architecture::ArchitectureSpec;
use super::layers::{Layer, ParamBinder};
use super::FlowError;

/// Rows evaluated per tape when no gradients are needed.
const CHUNK_ROWS: usize = 4096;

/// Composition of invertible layers on top of a base distribution, evaluated
/// in the generating direction `x = ψ(z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    architecture: ArchitectureSpec,
    layers: Vec<Layer>,
}

/// Draws from a flow with everything needed for density ratios.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub z: Tensor,
    pub x: Tensor,
    pub logdet: Vec<f64>,
    /// `ln q(x) = ln p_Z(z) - ln|det Dψ(z)|`.
    pub log_q: Vec<f64>,
}

impl FlowSample {
    pub fn len(&self) -> usize {
        self.logdet.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logdet.is_empty()
    }
}

/// Recorded output of a forward pass.
pub struct ForwardVars {
    pub x: Var,
    /// Per-row `ln|det Dψ|`, shape `[n, 1]`.
    pub logdet: Var,
    /// Parameter leaves in [`FlowModel::params`] order.
    pub params: Vec<Var>,
}

impl FlowModel {
    pub(crate) fn from_parts(architecture: ArchitectureSpec, layers: Vec<Layer>) -> Self {
        FlowModel {
            architecture,
            layers,
        }
    }

    /// A model with no layers: `ψ` is the identity.
    pub fn identity(base: BaseDistribution) -> Self {
        FlowModel {
            architecture: ArchitectureSpec {
                dim: base.dim(),
                base,
                layers: Vec::new(),
                init_scale: 0.0,
            },
            layers: Vec::new(),
        }
    }

    pub fn architecture(&self) -> &ArchitectureSpec {
        &self.architecture
    }

    pub fn base(&self) -> &BaseDistribution {
        &self.architecture.base
    }

    pub fn dim(&self) -> usize {
        self.architecture.dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Records `ψ` applied to the `[n, dim]` batch `z`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        z: Var,
        trainable: bool,
    ) -> Result<ForwardVars, FlowError> {
        let shape = tape.value(z).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.dim() {
            return Err(FlowError::Dimension {
                expected: self.dim(),
                actual: shape.get(1).copied().unwrap_or(0),
            });
        }
        let mut binder = ParamBinder::new(trainable);
        let mut x = z;
        let mut logdet: Option<Var> = None;
        for layer in &self.layers {
            let out = layer.forward(tape, x, &mut binder)?;
            x = out.x;
            if let Some(ld) = out.logdet {
                logdet = Some(match logdet {
                    Some(acc) => tape.add(acc, ld)?,
                    None => ld,
                });
            }
        }
        let logdet = match logdet {
            Some(ld) => ld,
            None => tape.constant(Tensor::zeros(&[shape[0], 1]))?,
        };
        Ok(ForwardVars {
            x,
            logdet,
            params: binder.into_vars(),
        })
    }

    /// Plain evaluation: `(x, ln|det Dψ|)` for each row of `z`.
    pub fn forward(&self, z: &Tensor) -> Result<(Tensor, Vec<f64>), FlowError> {
        if z.rank() != 2 || z.cols() != self.dim() {
            return Err(FlowError::Dimension {
                expected: self.dim(),
                actual: z.shape().get(1).copied().unwrap_or(0),
            });
        }
        let n = z.rows();
        let dim = self.dim();
        let mut xs = Vec::with_capacity(n * dim);
        let mut logdets = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK_ROWS).min(n);
            let chunk = Tensor::from_parts(
                vec![end - start, dim],
                z.data()[start * dim..end * dim].to_vec(),
            );
            let mut tape = Tape::new();
            let zv = tape.constant(chunk)?;
            let out = self.forward_tape(&mut tape, zv, false)?;
            xs.extend_from_slice(tape.value(out.x).data());
            logdets.extend_from_slice(tape.value(out.logdet).data());
            start = end;
        }
        Ok((Tensor::from_parts(vec![n, dim], xs), logdets))
    }

    /// `ln q(x) = ln p_Z(z) - logdet` for a row produced by [`FlowModel::forward`].
    pub fn sample_log_density(&self, z: &[f64], logdet: f64) -> Result<f64, FlowError> {
        Ok(self.base().log_density(z)? - logdet)
    }

    pub fn sample(&self, n: usize, rng: &mut SimRng) -> Result<FlowSample, FlowError> {
        let z = self.base().sample(n, rng);
        self.push_forward(z)
    }

    /// Maps given base draws through the flow.
    pub fn push_forward(&self, z: Tensor) -> Result<FlowSample, FlowError> {
        let (x, logdet) = self.forward(&z)?;
        let log_q = (0..z.rows())
            .map(|i| self.sample_log_density(z.row(i), logdet[i]))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(FlowSample {
            z,
            x,
            logdet,
            log_q,
        })
    }

    /// Overwrites all parameters, checking shapes.
    pub fn set_params(&mut self, values: Vec<Tensor>) -> Result<(), FlowError> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(FlowError::Architecture(format!(
                "expected {} parameter arrays, got {}",
                slots.len(),
                values.len()
            )));
        }
        for (slot, value) in slots.iter_mut().zip(values) {
            if slot.shape() != value.shape() {
                return Err(FlowError::Architecture(format!(
                    "parameter shape {:?} does not match {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            if !value.is_finite() {
                return Err(FlowError::Architecture("non-finite parameter".into()));
            }
            **slot = value;
        }
        Ok(())
    }
}
