//! Normalizing flows built from monotone rational stages.

mod architecture;
mod layers;
mod model;
mod rational;

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::distributions::DistributionError;

pub use architecture::{
    build_architecture, cyclic_shift, equal_split, ArchitectureSpec, ConditionerSpec, LayerSpec,
    DEFAULT_INIT_SCALE,
};
pub use layers::{Conditioner, Coupling, Dense, Layer, LayerOutput, ParamBinder, RationalLayer};
pub use model::{FlowModel, FlowSample, ForwardVars};
pub use rational::{
    bound_coefficient, constrain_tape, invert_scalar, invert_stage, rational_tape,
    unit_rational_tape, RationalStage, ThetaVars, RAW_LIMIT, SAFETY_FACTOR,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlowError {
    #[error("conditioner output {value} exceeds the admissible range")]
    ConditionerOutOfRange { value: f64 },
    #[error("could not bracket the preimage of {target}")]
    BracketOverflow { target: f64 },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("expected dimension {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
}
