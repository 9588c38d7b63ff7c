//! Normalizing-flow importance sampling for rare events.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod distributions;
pub mod estimators;
pub mod flows;
pub mod targets;
pub mod tensor;
pub mod training;
