//! Invertible layers and the conditioners that parameterise couplings.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

use super::rational::{constrain_tape, rational_tape, unit_rational_tape, RationalStage};
use super::FlowError;

/// Lifts layer parameters onto a tape in a fixed order.
pub struct ParamBinder {
    trainable: bool,
    vars: Vec<Var>,
}

impl ParamBinder {
    pub fn new(trainable: bool) -> Self {
        ParamBinder {
            trainable,
            vars: Vec::new(),
        }
    }

    pub fn bind(&mut self, tape: &mut Tape, value: &Tensor) -> Result<Var, FlowError> {
        let v = tape.lift(value.clone(), self.trainable)?;
        self.vars.push(v);
        Ok(v)
    }

    pub fn into_vars(self) -> Vec<Var> {
        self.vars
    }
}

/// One dense layer `y = x W + b` with `W: [inputs, outputs]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    fn apply(&self, tape: &mut Tape, x: Var, binder: &mut ParamBinder) -> Result<Var, FlowError> {
        let w = binder.bind(tape, &self.weight)?;
        let b = binder.bind(tape, &self.bias)?;
        let y = tape.matmul(x, w)?;
        Ok(tape.add_row(y, b)?)
    }
}

/// Maps the untouched partition to raw coupling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Conditioner {
    /// A linear map plus a constant vector.
    Affine { dense: Dense },
    /// Dense layers with `tanh` between them and a linear output.
    Perceptron { layers: Vec<Dense> },
}

impl Conditioner {
    pub fn outputs(&self) -> usize {
        match self {
            Conditioner::Affine { dense } => dense.outputs(),
            Conditioner::Perceptron { layers } => layers.last().map_or(0, Dense::outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        match self {
            Conditioner::Affine { dense } => dense.inputs(),
            Conditioner::Perceptron { layers } => layers.first().map_or(0, Dense::inputs),
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        match self {
            Conditioner::Affine { dense } => vec![&dense.weight, &dense.bias],
            Conditioner::Perceptron { layers } => {
                layers.iter().flat_map(|d| [&d.weight, &d.bias]).collect()
            }
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Conditioner::Affine { dense } => vec![&mut dense.weight, &mut dense.bias],
            Conditioner::Perceptron { layers } => layers
                .iter_mut()
                .flat_map(|d| [&mut d.weight, &mut d.bias])
                .collect(),
        }
    }

    fn apply(&self, tape: &mut Tape, x: Var, binder: &mut ParamBinder) -> Result<Var, FlowError> {
        match self {
            Conditioner::Affine { dense } => dense.apply(tape, x, binder),
            Conditioner::Perceptron { layers } => {
                let mut h = x;
                for (i, dense) in layers.iter().enumerate() {
                    h = dense.apply(tape, h, binder)?;
                    if i + 1 < layers.len() {
                        h = tape.tanh(h)?;
                    }
                }
                Ok(h)
            }
        }
    }
}

/// Coupling layer: the first `split` coordinates pass through a stack of
/// rational functions whose parameters the conditioner computes from the rest.
///
/// Raw parameter `j` of stage `s` for transformed coordinate `a` sits in
/// conditioner output column `(5 s + j) * split + a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub split: usize,
    pub compositions: usize,
    pub conditioner: Conditioner,
    /// Keep `[0, 1]` fixed by normalising each stage's endpoints.
    pub unit_interval: bool,
}

/// Elementwise rational stack with free parameters (no conditioner), used
/// where a coupling has nothing to condition on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationalLayer {
    pub compositions: usize,
    /// Raw parameters laid out as for a coupling with `split = dim`.
    pub raw: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Rational(RationalLayer),
    Coupling(Coupling),
    /// `x[i] = z[perm[i]]`.
    Permutation {
        perm: Vec<usize>,
    },
    ElementwiseExp,
}

/// Output of one layer on a batch: new coordinates and, when non-zero, the
/// per-row log-determinant `[n, 1]`.
pub struct LayerOutput {
    pub x: Var,
    pub logdet: Option<Var>,
}

/// Applies `compositions` stages whose raw parameters are the columns of `raw`.
fn rational_stack(
    tape: &mut Tape,
    z: Var,
    raw: Var,
    width: usize,
    compositions: usize,
    unit_interval: bool,
) -> Result<(Var, Var), FlowError> {
    let mut x = z;
    let mut total: Option<Var> = None;
    for s in 0..compositions {
        let mut block = [x; 5];
        for (j, slot) in block.iter_mut().enumerate() {
            let start = (5 * s + j) * width;
            *slot = tape.column_range(raw, start, start + width)?;
        }
        let th = constrain_tape(tape, block)?;
        let (next, dlog) = if unit_interval {
            unit_rational_tape(tape, x, &th)?
        } else {
            rational_tape(tape, x, &th)?
        };
        x = next;
        total = Some(match total {
            Some(t) => tape.add(t, dlog)?,
            None => dlog,
        });
    }
    let total = total.ok_or_else(|| FlowError::Architecture("zero compositions".into()))?;
    Ok((x, total))
}

impl Layer {
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Rational(r) => vec![&r.raw],
            Layer::Coupling(c) => c.conditioner.params(),
            Layer::Permutation { .. } | Layer::ElementwiseExp => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Rational(r) => vec![&mut r.raw],
            Layer::Coupling(c) => c.conditioner.params_mut(),
            Layer::Permutation { .. } | Layer::ElementwiseExp => Vec::new(),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        z: Var,
        binder: &mut ParamBinder,
    ) -> Result<LayerOutput, FlowError> {
        let n = tape.value(z).rows();
        let dim = tape.value(z).cols();
        match self {
            Layer::Rational(r) => {
                let raw = binder.bind(tape, &r.raw)?;
                let raw = tape.repeat_rows(raw, n)?;
                let (x, dlog) = rational_stack(tape, z, raw, dim, r.compositions, false)?;
                let logdet = tape.sum_rows(dlog)?;
                Ok(LayerOutput {
                    x,
                    logdet: Some(logdet),
                })
            }
            Layer::Coupling(c) => {
                let za = tape.column_range(z, 0, c.split)?;
                let zb = tape.column_range(z, c.split, dim)?;
                let raw = c.conditioner.apply(tape, zb, binder)?;
                let (xa, dlog) =
                    rational_stack(tape, za, raw, c.split, c.compositions, c.unit_interval)?;
                let x = tape.concat_columns(&[xa, zb])?;
                let logdet = tape.sum_rows(dlog)?;
                Ok(LayerOutput {
                    x,
                    logdet: Some(logdet),
                })
            }
            Layer::Permutation { perm } => Ok(LayerOutput {
                x: tape.select_columns(z, perm)?,
                logdet: None,
            }),
            Layer::ElementwiseExp => {
                let x = tape.exp(z)?;
                let logdet = tape.sum_rows(z)?;
                Ok(LayerOutput {
                    x,
                    logdet: Some(logdet),
                })
            }
        }
    }

    /// Constrained stages of a rational layer for coordinate `a`.
    pub fn rational_stages(&self, a: usize) -> Option<Vec<RationalStage>> {
        let Layer::Rational(r) = self else {
            return None;
        };
        let width = r.raw.len() / (5 * r.compositions);
        (0..r.compositions)
            .map(|s| {
                let raw = [0, 1, 2, 3, 4].map(|j| r.raw.data()[(5 * s + j) * width + a]);
                RationalStage::constrain(raw).ok()
            })
            .collect()
    }
}
