//! Declarative layer stacks and the presets used by the bundled scenarios.

use serde::{Deserialize, Serialize};

use crate::distributions::{BaseDistribution, SimRng};
use crate::tensor::Tensor;

use super::layers::{Conditioner, Coupling, Dense, Layer, RationalLayer};
use super::model::FlowModel;
use super::FlowError;

/// Default magnitude of the initial output-layer weights; keeps a fresh flow
/// close to the identity.
pub const DEFAULT_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConditionerSpec {
    Affine,
    /// Hidden layer widths; `tanh` after each.
    Perceptron {
        hidden: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Rational {
        compositions: usize,
    },
    Coupling {
        split: usize,
        compositions: usize,
        conditioner: ConditionerSpec,
        unit_interval: bool,
    },
    Permutation {
        perm: Vec<usize>,
    },
    ElementwiseExp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub dim: usize,
    pub base: BaseDistribution,
    pub layers: Vec<LayerSpec>,
    pub init_scale: f64,
}

/// Size of the transformed partition for an equal split.
pub fn equal_split(dim: usize) -> usize {
    dim.div_ceil(2)
}

/// `x[i] = z[(i + shift) mod dim]`.
pub fn cyclic_shift(dim: usize, shift: usize) -> Vec<usize> {
    (0..dim).map(|i| (i + shift) % dim).collect()
}

impl ArchitectureSpec {
    /// `couplings` (coupling, permutation) pairs.
    #[allow(clippy::too_many_arguments)]
    pub fn coupling_stack(
        base: BaseDistribution,
        couplings: usize,
        split: usize,
        compositions: usize,
        conditioner: ConditionerSpec,
        unit_interval: bool,
        perm: Vec<usize>,
    ) -> Self {
        let dim = base.dim();
        let mut layers = Vec::with_capacity(2 * couplings);
        for _ in 0..couplings {
            layers.push(LayerSpec::Coupling {
                split,
                compositions,
                conditioner: conditioner.clone(),
                unit_interval,
            });
            layers.push(LayerSpec::Permutation { perm: perm.clone() });
        }
        ArchitectureSpec {
            dim,
            base,
            layers,
            init_scale: DEFAULT_INIT_SCALE,
        }
    }

    /// One-dimensional: a bare stack of three rational functions (15 parameters).
    pub fn truncated_normal() -> Self {
        ArchitectureSpec {
            dim: 1,
            base: BaseDistribution::StandardNormal { dim: 1 },
            layers: vec![LayerSpec::Rational { compositions: 3 }],
            init_scale: DEFAULT_INIT_SCALE,
        }
    }

    /// Six affine-conditioned couplings on a 2D normal, then `exp`.
    pub fn sum_exp(compositions: usize) -> Self {
        let mut spec = ArchitectureSpec::coupling_stack(
            BaseDistribution::StandardNormal { dim: 2 },
            6,
            1,
            compositions,
            ConditionerSpec::Affine,
            false,
            vec![1, 0],
        );
        spec.layers.push(LayerSpec::ElementwiseExp);
        spec
    }

    /// Five unit-interval couplings on `[0,1]^5`, transforming the first
    /// three coordinates and cycling by `[3,4,5,1,2]`.
    pub fn bridge() -> Self {
        ArchitectureSpec::coupling_stack(
            BaseDistribution::UniformUnitCube { dim: 5 },
            5,
            3,
            1,
            ConditionerSpec::Affine,
            true,
            vec![2, 3, 4, 0, 1],
        )
    }

    /// Equal-split perceptron couplings over an isotropic normal of variance `dt`.
    pub fn asian(steps: usize, dt: f64, couplings: usize, hidden: usize) -> Self {
        let split = equal_split(steps);
        ArchitectureSpec::coupling_stack(
            BaseDistribution::IsotropicNormal {
                dim: steps,
                variance: dt,
            },
            couplings,
            split,
            1,
            ConditionerSpec::Perceptron {
                hidden: vec![hidden],
            },
            false,
            cyclic_shift(steps, split),
        )
    }

    /// Equal-split perceptron couplings over the two-mode mixture base with
    /// means `(1,-1,…,1,-1)` and `(1,…,1)` and variance `2T/d`.
    pub fn double_slit(d: usize, horizon: f64, couplings: usize, hidden: usize) -> Self {
        let split = equal_split(d);
        let mean1 = (0..d)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        ArchitectureSpec::coupling_stack(
            BaseDistribution::TwoComponentGaussianMixture {
                dim: d,
                mean1,
                mean2: vec![1.0; d],
                variance: 2.0 * horizon / d as f64,
            },
            couplings,
            split,
            1,
            ConditionerSpec::Perceptron {
                hidden: vec![hidden],
            },
            false,
            cyclic_shift(d, split),
        )
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        if self.dim == 0 {
            return Err(FlowError::Architecture("dimension must be positive".into()));
        }
        if self.base.dim() != self.dim {
            return Err(FlowError::Dimension {
                expected: self.dim,
                actual: self.base.dim(),
            });
        }
        self.base.validate()?;
        for layer in &self.layers {
            match layer {
                LayerSpec::Rational { compositions } => {
                    if *compositions == 0 {
                        return Err(FlowError::Architecture("zero compositions".into()));
                    }
                }
                LayerSpec::Coupling {
                    split,
                    compositions,
                    conditioner,
                    ..
                } => {
                    if *split == 0 || *split >= self.dim {
                        return Err(FlowError::Architecture(format!(
                            "coupling split {split} must lie in 1..{}",
                            self.dim
                        )));
                    }
                    if *compositions == 0 {
                        return Err(FlowError::Architecture("zero compositions".into()));
                    }
                    if let ConditionerSpec::Perceptron { hidden } = conditioner {
                        if hidden.contains(&0) {
                            return Err(FlowError::Architecture("zero-width hidden layer".into()));
                        }
                    }
                }
                LayerSpec::Permutation { perm } => {
                    let mut seen = vec![false; self.dim];
                    if perm.len() != self.dim {
                        return Err(FlowError::Dimension {
                            expected: self.dim,
                            actual: perm.len(),
                        });
                    }
                    for &p in perm {
                        if p >= self.dim || seen[p] {
                            return Err(FlowError::Architecture(format!(
                                "{perm:?} is not a permutation of 0..{}",
                                self.dim
                            )));
                        }
                        seen[p] = true;
                    }
                }
                LayerSpec::ElementwiseExp => {}
            }
        }
        Ok(())
    }
}

fn uniform_tensor(shape: &[usize], scale: f64, rng: &mut SimRng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = scale * (2.0 * rng.uniform() - 1.0);
    }
    t
}

fn build_conditioner(
    spec: &ConditionerSpec,
    inputs: usize,
    outputs: usize,
    init_scale: f64,
    rng: &mut SimRng,
) -> Conditioner {
    match spec {
        ConditionerSpec::Affine => Conditioner::Affine {
            dense: Dense {
                weight: uniform_tensor(&[inputs, outputs], init_scale, rng),
                bias: uniform_tensor(&[outputs], init_scale, rng),
            },
        },
        ConditionerSpec::Perceptron { hidden } => {
            let mut layers = Vec::with_capacity(hidden.len() + 1);
            let mut fan_in = inputs;
            for &width in hidden {
                let bound = 1.0 / (fan_in as f64).sqrt();
                layers.push(Dense {
                    weight: uniform_tensor(&[fan_in, width], bound, rng),
                    bias: Tensor::zeros(&[width]),
                });
                fan_in = width;
            }
            layers.push(Dense {
                weight: uniform_tensor(&[fan_in, outputs], init_scale, rng),
                bias: uniform_tensor(&[outputs], init_scale, rng),
            });
            Conditioner::Perceptron { layers }
        }
    }
}

/// Instantiates a layer stack with randomly initialised parameters.
pub fn build_architecture(
    spec: &ArchitectureSpec,
    rng: &mut SimRng,
) -> Result<FlowModel, FlowError> {
    spec.validate()?;
    let dim = spec.dim;
    let layers = spec
        .layers
        .iter()
        .map(|l| match l {
            LayerSpec::Rational { compositions } => Layer::Rational(RationalLayer {
                compositions: *compositions,
                raw: uniform_tensor(&[5 * compositions * dim], spec.init_scale, rng),
            }),
            LayerSpec::Coupling {
                split,
                compositions,
                conditioner,
                unit_interval,
            } => Layer::Coupling(Coupling {
                split: *split,
                compositions: *compositions,
                conditioner: build_conditioner(
                    conditioner,
                    dim - split,
                    5 * compositions * split,
                    spec.init_scale,
                    rng,
                ),
                unit_interval: *unit_interval,
            }),
            LayerSpec::Permutation { perm } => Layer::Permutation { perm: perm.clone() },
            LayerSpec::ElementwiseExp => Layer::ElementwiseExp,
        })
        .collect();
    Ok(FlowModel::from_parts(spec.clone(), layers))
}
