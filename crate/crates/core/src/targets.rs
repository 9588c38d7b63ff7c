//! Unnormalised target log-densities `ln h(x)` for the bundled scenarios.
//!
//! Every target has a plain per-point evaluator and a batched tape evaluator
//! over `[n, dim]` inputs returning `[n, 1]`; the two agree to rounding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::distributions::{BaseDistribution, DistributionError, SimRng};
use crate::tensor::Tensor;

/// Slack allowed when checking that bridge inputs lie in the unit cube.
const CUBE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TargetError {
    #[error("input outside the target's support: {0}")]
    OutOfSupport(String),
    #[error("expected {expected} coordinates, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("invalid target: {0}")]
    Invalid(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
}

pub type Result<T> = std::result::Result<T, TargetError>;

/// `ln ρ = -α (γ - S)` below the level, 0 on the event.
pub fn log_penalty(alpha: f64, gamma: f64, s: f64) -> f64 {
    if s >= gamma {
        0.0
    } else {
        -alpha * (gamma - s)
    }
}

/// `v(x) = x` for `x >= δ`, `δ e^{x/δ - 1}` below: a positive C¹ stand-in for `x⁺`.
pub fn smooth_ramp(x: f64, delta: f64) -> f64 {
    if x >= delta {
        x
    } else {
        delta * (x / delta - 1.0).exp()
    }
}

pub fn smooth_ramp_derivative(x: f64, delta: f64) -> f64 {
    if x >= delta {
        1.0
    } else {
        (x / delta - 1.0).exp()
    }
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

fn ln_std_normal(x: f64) -> f64 {
    -LN_SQRT_2PI - 0.5 * x * x
}

fn check_len(x: &[f64], dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(TargetError::Dimension {
            expected: dim,
            actual: x.len(),
        });
    }
    Ok(())
}

pub fn trunc_normal_log_h(x: f64, gamma: f64, alpha: f64) -> f64 {
    ln_std_normal(x) + log_penalty(alpha, gamma, x)
}

pub fn sum_exp_log_h(x: &[f64], gamma: f64, alpha: f64) -> Result<f64> {
    check_len(x, 2)?;
    if x.iter().any(|&v| !(v > 0.0)) {
        return Err(TargetError::OutOfSupport(format!(
            "sum-exp needs positive coordinates, got {x:?}"
        )));
    }
    let s = x[0] + x[1];
    Ok(-s + log_penalty(alpha, gamma, s))
}

fn check_cube(x: &[f64]) -> Result<()> {
    check_len(x, 5)?;
    if x.iter()
        .any(|&v| !(-CUBE_TOLERANCE..=1.0 + CUBE_TOLERANCE).contains(&v))
    {
        return Err(TargetError::OutOfSupport(format!(
            "bridge lengths must lie in [0, 1], got {x:?}"
        )));
    }
    Ok(())
}

/// Edge weights of the four routes through the bridge network, as columns.
/// Routes: `X1+X4`, `X1+3X3+2X5`, `2X2+3X3+X4`, `2X2+2X5`.
const BRIDGE_ROUTES: [[f64; 5]; 4] = [
    [1.0, 0.0, 0.0, 1.0, 0.0],
    [1.0, 0.0, 3.0, 0.0, 2.0],
    [0.0, 2.0, 3.0, 1.0, 0.0],
    [0.0, 2.0, 0.0, 0.0, 2.0],
];

fn route_lengths(x: &[f64]) -> [f64; 4] {
    BRIDGE_ROUTES.map(|w| w.iter().zip(x).map(|(a, b)| a * b).sum())
}

/// Shortest route length through the bridge network.
pub fn bridge_h(x: &[f64]) -> Result<f64> {
    check_cube(x)?;
    Ok(route_lengths(x).into_iter().fold(f64::INFINITY, f64::min))
}

/// Which difference defines the "inner route shortest" event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeConvention {
    /// `S = min(inner) - min(outer)`.
    AsPrinted,
    /// `S = min(outer) - min(inner)`: `S >= 0` exactly when an inner route is shortest.
    Negated,
}

impl BridgeConvention {
    pub fn name(self) -> &'static str {
        match self {
            BridgeConvention::AsPrinted => "as_printed",
            BridgeConvention::Negated => "negated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "as_printed" => Some(BridgeConvention::AsPrinted),
            "negated" => Some(BridgeConvention::Negated),
            _ => None,
        }
    }
}

pub fn bridge_conditional_s(x: &[f64], convention: BridgeConvention) -> Result<f64> {
    check_cube(x)?;
    let [outer1, inner1, inner2, outer2] = route_lengths(x);
    let diff = inner1.min(inner2) - outer1.min(outer2);
    Ok(match convention {
        BridgeConvention::AsPrinted => diff,
        BridgeConvention::Negated => -diff,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsianSpec {
    pub rate: f64,
    pub sigma: f64,
    pub strike: f64,
    pub spot: f64,
    pub maturity: f64,
    pub steps: usize,
    pub delta: f64,
}

impl Default for AsianSpec {
    fn default() -> Self {
        AsianSpec {
            rate: 0.07,
            sigma: 0.2,
            strike: 35.0,
            spot: 40.0,
            maturity: 4.0 / 12.0,
            steps: 88,
            delta: 0.5,
        }
    }
}

impl AsianSpec {
    pub fn dt(&self) -> f64 {
        self.maturity / self.steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || self.steps == 0 || !(self.delta > 0.0) || !(self.maturity > 0.0) {
            return Err(TargetError::Invalid(format!(
                "asian parameters need sigma > 0, steps >= 1, delta > 0, maturity > 0: {self:?}"
            )));
        }
        Ok(())
    }

    /// Nominal law of the increments.
    pub fn base(&self) -> BaseDistribution {
        BaseDistribution::IsotropicNormal {
            dim: self.steps,
            variance: self.dt(),
        }
    }

    fn drift(&self, i: usize) -> f64 {
        (self.rate - 0.5 * self.sigma * self.sigma) * (i as f64 * self.dt())
    }

    fn discount(&self) -> f64 {
        (-self.rate * self.maturity).exp()
    }
}

/// Prices at `t_0..t_n` from Wiener increments `x`, and their average.
pub fn asian_paths(x: &[f64], spec: &AsianSpec) -> Result<(Vec<f64>, f64)> {
    check_len(x, spec.steps)?;
    let mut prices = Vec::with_capacity(spec.steps + 1);
    prices.push(spec.spot);
    let mut w = 0.0;
    for (i, dx) in x.iter().enumerate() {
        w += dx;
        prices.push(spec.spot * (spec.drift(i + 1) + spec.sigma * w).exp());
    }
    let avg = prices.iter().sum::<f64>() / prices.len() as f64;
    Ok((prices, avg))
}

/// `e^{-rT}(S̄_T - K)`, not floored at zero.
pub fn asian_discounted_payoff(x: &[f64], spec: &AsianSpec) -> Result<f64> {
    let (_, avg) = asian_paths(x, spec)?;
    Ok(spec.discount() * (avg - spec.strike))
}

pub fn asian_log_h_expected_payoff(x: &[f64], spec: &AsianSpec) -> Result<f64> {
    let s = asian_discounted_payoff(x, spec)?;
    Ok(smooth_ramp(s, spec.delta).ln() + spec.base().log_density(x)?)
}

pub fn asian_log_h_rare(x: &[f64], spec: &AsianSpec, gamma: f64, alpha: f64) -> Result<f64> {
    let s = asian_discounted_payoff(x, spec)?;
    Ok(spec.base().log_density(x)? + log_penalty(alpha, gamma, s))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoubleSlitSpec {
    pub horizon: f64,
    pub d: usize,
    pub x_slit: f64,
    pub y_slit: f64,
    pub w_slit: f64,
    pub x_screen: f64,
}

impl DoubleSlitSpec {
    pub fn new(d: usize) -> Self {
        DoubleSlitSpec {
            horizon: 1.0,
            d,
            x_slit: 5.0,
            y_slit: 1.5,
            w_slit: 1.0,
            x_screen: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || !self.d.is_multiple_of(2) {
            return Err(TargetError::Invalid(format!(
                "double-slit dimension must be even and at least 2, got {}",
                self.d
            )));
        }
        if !(self.w_slit > 0.0) || !(self.x_screen > self.x_slit) || !(self.horizon > 0.0) {
            return Err(TargetError::Invalid(format!(
                "double-slit geometry needs w_slit > 0, x_screen > x_slit, T > 0: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn variance(&self) -> f64 {
        2.0 * self.horizon / self.d as f64
    }

    /// Nominal law `g_d` of the increments.
    pub fn base(&self) -> BaseDistribution {
        BaseDistribution::IsotropicNormal {
            dim: self.d,
            variance: self.variance(),
        }
    }

    fn half_gap(&self, y: f64) -> f64 {
        let f1 = ((y - self.y_slit).abs() - 0.5 * self.w_slit).max(0.0);
        let f2 = ((y + self.y_slit).abs() - 0.5 * self.w_slit).max(0.0);
        f1.min(f2)
    }
}

/// Positions `V_1..V_{d/2}` reached from the origin.
pub fn double_slit_path(q: &[f64]) -> Vec<(f64, f64)> {
    let mut pos = (0.0, 0.0);
    q.chunks_exact(2)
        .map(|step| {
            pos = (pos.0 + step[0], pos.1 + step[1]);
            pos
        })
        .collect()
}

/// First step index (0-based into the path) with `X_{k-1} <= x_slit <= X_k`.
fn first_slit_crossing(xs: impl Iterator<Item = f64>, x_slit: f64) -> Option<usize> {
    let mut prev = 0.0;
    for (k, x) in xs.enumerate() {
        if prev <= x_slit && x_slit <= x {
            return Some(k);
        }
        prev = x;
    }
    None
}

pub fn double_slit_s(q: &[f64], spec: &DoubleSlitSpec) -> Result<f64> {
    spec.validate()?;
    check_len(q, spec.d)?;
    let path = double_slit_path(q);
    let slit = first_slit_crossing(path.iter().map(|p| p.0), spec.x_slit)
        .map_or(0.0, |k| spec.half_gap(path[k].1));
    let x_max = path.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let screen = (spec.x_screen - x_max).max(0.0);
    Ok(-(slit + screen))
}

pub fn double_slit_log_h(q: &[f64], spec: &DoubleSlitSpec, alpha: f64) -> Result<f64> {
    let s = double_slit_s(q, spec)?;
    Ok(spec.base().log_density(q)? + log_penalty(alpha, 0.0, s))
}

/// `y` where the path first reaches `x_screen`, linearly interpolated along
/// the crossing step.
pub fn screen_crossing_y(q: &[f64], spec: &DoubleSlitSpec) -> Option<f64> {
    let mut prev = (0.0, 0.0);
    for p in double_slit_path(q) {
        if p.0 >= spec.x_screen {
            let dx = p.0 - prev.0;
            let t = if dx > 0.0 {
                (spec.x_screen - prev.0) / dx
            } else {
                1.0
            };
            return Some(prev.1 + t * (p.1 - prev.1));
        }
        prev = p;
    }
    None
}

/// A scenario's nominal density, performance function and training target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    /// `P(X >= γ)` for `X ~ N(0, 1)`.
    TruncNormal { gamma: f64, alpha: f64 },
    /// `P(X1 + X2 >= γ)` for independent unit exponentials.
    SumExp { gamma: f64, alpha: f64 },
    /// `E[H(X)]`, shortest bridge route with uniform edge lengths.
    Bridge,
    /// `E[H(X) | inner route shortest]`.
    BridgeConditional {
        alpha: f64,
        convention: BridgeConvention,
    },
    /// Expected discounted Asian call payoff.
    AsianPayoff { spec: AsianSpec },
    /// `P(e^{-rT}(S̄_T - K) >= γ)`.
    AsianRare {
        spec: AsianSpec,
        gamma: f64,
        alpha: f64,
    },
    /// Probability of passing a slit and reaching the screen.
    DoubleSlit { spec: DoubleSlitSpec, alpha: f64 },
}

impl Target {
    pub fn dim(&self) -> usize {
        match self {
            Target::TruncNormal { .. } => 1,
            Target::SumExp { .. } => 2,
            Target::Bridge | Target::BridgeConditional { .. } => 5,
            Target::AsianPayoff { spec } | Target::AsianRare { spec, .. } => spec.steps,
            Target::DoubleSlit { spec, .. } => spec.d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let alpha = match self {
            Target::TruncNormal { alpha, .. }
            | Target::SumExp { alpha, .. }
            | Target::BridgeConditional { alpha, .. }
            | Target::AsianRare { alpha, .. }
            | Target::DoubleSlit { alpha, .. } => Some(*alpha),
            Target::Bridge | Target::AsianPayoff { .. } => None,
        };
        if let Some(a) = alpha {
            if !(a > 0.0) || !a.is_finite() {
                return Err(TargetError::Invalid(format!(
                    "alpha must be positive, got {a}"
                )));
            }
        }
        match self {
            Target::AsianPayoff { spec } | Target::AsianRare { spec, .. } => spec.validate(),
            Target::DoubleSlit { spec, .. } => spec.validate(),
            _ => Ok(()),
        }
    }

    /// Level `γ` of the rare event, when the target has one.
    pub fn gamma(&self) -> Option<f64> {
        match self {
            Target::TruncNormal { gamma, .. }
            | Target::SumExp { gamma, .. }
            | Target::AsianRare { gamma, .. } => Some(*gamma),
            Target::BridgeConditional { .. } | Target::DoubleSlit { .. } => Some(0.0),
            Target::Bridge | Target::AsianPayoff { .. } => None,
        }
    }

    /// Normalised log-density of the nominal law `p`; `-inf` off its support.
    pub fn log_p(&self, x: &[f64]) -> Result<f64> {
        check_len(x, self.dim())?;
        Ok(match self {
            Target::TruncNormal { .. } => ln_std_normal(x[0]),
            Target::SumExp { .. } => {
                if x.iter().all(|&v| v >= 0.0) {
                    -(x[0] + x[1])
                } else {
                    f64::NEG_INFINITY
                }
            }
            Target::Bridge | Target::BridgeConditional { .. } => {
                if x.iter().all(|&v| (0.0..=1.0).contains(&v)) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            Target::AsianPayoff { spec } | Target::AsianRare { spec, .. } => {
                spec.base().log_density(x)?
            }
            Target::DoubleSlit { spec, .. } => spec.base().log_density(x)?,
        })
    }

    /// `n` independent draws from the nominal law `p`.
    pub fn sample_nominal(&self, n: usize, rng: &mut SimRng) -> Tensor {
        match self {
            Target::TruncNormal { .. } => {
                BaseDistribution::StandardNormal { dim: 1 }.sample(n, rng)
            }
            Target::SumExp { .. } => {
                let u = BaseDistribution::UniformUnitCube { dim: 2 }.sample(n, rng);
                u.map(|v| -(1.0 - v).ln())
            }
            Target::Bridge | Target::BridgeConditional { .. } => {
                BaseDistribution::UniformUnitCube { dim: 5 }.sample(n, rng)
            }
            Target::AsianPayoff { spec } | Target::AsianRare { spec, .. } => {
                spec.base().sample(n, rng)
            }
            Target::DoubleSlit { spec, .. } => spec.base().sample(n, rng),
        }
    }

    /// Performance `S(x)`; for the Asian payoff target this is the
    /// discounted payoff before flooring.
    pub fn performance(&self, x: &[f64]) -> Result<Option<f64>> {
        check_len(x, self.dim())?;
        Ok(match self {
            Target::TruncNormal { .. } => Some(x[0]),
            Target::SumExp { .. } => Some(x[0] + x[1]),
            Target::Bridge => None,
            Target::BridgeConditional { convention, .. } => {
                Some(bridge_conditional_s(x, *convention)?)
            }
            Target::AsianPayoff { spec } | Target::AsianRare { spec, .. } => {
                Some(asian_discounted_payoff(x, spec)?)
            }
            Target::DoubleSlit { spec, .. } => Some(double_slit_s(x, spec)?),
        })
    }

    /// Exact event indicator `S(x) >= γ`.
    pub fn indicator(&self, x: &[f64]) -> Result<Option<bool>> {
        let (Some(gamma), Some(s)) = (self.gamma(), self.performance(x)?) else {
            return Ok(None);
        };
        Ok(Some(s >= gamma))
    }

    /// Quantity `H(x)` whose (conditional) expectation is sought.
    pub fn payoff(&self, x: &[f64]) -> Result<Option<f64>> {
        Ok(match self {
            Target::Bridge | Target::BridgeConditional { .. } => Some(bridge_h(x)?),
            Target::AsianPayoff { spec } => Some(asian_discounted_payoff(x, spec)?.max(0.0)),
            _ => None,
        })
    }

    pub fn log_h(&self, x: &[f64]) -> Result<f64> {
        check_len(x, self.dim())?;
        match self {
            Target::TruncNormal { gamma, alpha } => Ok(trunc_normal_log_h(x[0], *gamma, *alpha)),
            Target::SumExp { gamma, alpha } => sum_exp_log_h(x, *gamma, *alpha),
            Target::Bridge => Ok(bridge_h(x)?.ln()),
            Target::BridgeConditional { alpha, convention } => {
                let s = bridge_conditional_s(x, *convention)?;
                Ok(bridge_h(x)?.ln() + log_penalty(*alpha, 0.0, s))
            }
            Target::AsianPayoff { spec } => asian_log_h_expected_payoff(x, spec),
            Target::AsianRare { spec, gamma, alpha } => asian_log_h_rare(x, spec, *gamma, *alpha),
            Target::DoubleSlit { spec, alpha } => double_slit_log_h(x, spec, *alpha),
        }
    }

    /// Batched `ln h` on a tape: `[n, dim] -> [n, 1]`.
    pub fn log_h_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.dim() {
            return Err(TargetError::Dimension {
                expected: self.dim(),
                actual: shape.get(1).copied().unwrap_or(0),
            });
        }
        match self {
            Target::TruncNormal { gamma, alpha } => {
                let sq = tape.square(x)?;
                let base = tape.scale(sq, -0.5)?;
                let base = tape.shift(base, -LN_SQRT_2PI)?;
                let pen = log_penalty_tape(tape, x, *gamma, *alpha)?;
                Ok(tape.add(base, pen)?)
            }
            Target::SumExp { gamma, alpha } => {
                if tape.value(x).data().iter().any(|&v| !(v > 0.0)) {
                    return Err(TargetError::OutOfSupport(
                        "sum-exp needs positive coordinates".into(),
                    ));
                }
                let s = tape.sum_rows(x)?;
                let base = tape.neg(s)?;
                let pen = log_penalty_tape(tape, s, *gamma, *alpha)?;
                Ok(tape.add(base, pen)?)
            }
            Target::Bridge => {
                let h = bridge_h_tape(tape, x)?;
                Ok(tape.ln(h)?)
            }
            Target::BridgeConditional { alpha, convention } => {
                let h = bridge_h_tape(tape, x)?;
                let ln_h = tape.ln(h)?;
                let s = bridge_s_tape(tape, x, *convention)?;
                let pen = log_penalty_tape(tape, s, 0.0, *alpha)?;
                Ok(tape.add(ln_h, pen)?)
            }
            Target::AsianPayoff { spec } => {
                let s = asian_payoff_tape(tape, x, spec)?;
                let ramp = tape.log_smooth_ramp(s, spec.delta)?;
                let base = spec.base().log_density_tape(tape, x)?;
                Ok(tape.add(ramp, base)?)
            }
            Target::AsianRare { spec, gamma, alpha } => {
                let s = asian_payoff_tape(tape, x, spec)?;
                let pen = log_penalty_tape(tape, s, *gamma, *alpha)?;
                let base = spec.base().log_density_tape(tape, x)?;
                Ok(tape.add(base, pen)?)
            }
            Target::DoubleSlit { spec, alpha } => {
                spec.validate()?;
                let s = double_slit_s_tape(tape, x, spec)?;
                let pen = log_penalty_tape(tape, s, 0.0, *alpha)?;
                let base = spec.base().log_density_tape(tape, x)?;
                Ok(tape.add(base, pen)?)
            }
        }
    }
}

/// `-α relu(γ - S)` for an `[n, 1]` performance column.
pub fn log_penalty_tape(tape: &mut Tape, s: Var, gamma: f64, alpha: f64) -> Result<Var> {
    let neg = tape.neg(s)?;
    let gap = tape.shift(neg, gamma)?;
    let gap = tape.relu(gap)?;
    Ok(tape.scale(gap, -alpha)?)
}

fn check_cube_tape(tape: &Tape, x: Var) -> Result<()> {
    if tape
        .value(x)
        .data()
        .iter()
        .any(|&v| !(-CUBE_TOLERANCE..=1.0 + CUBE_TOLERANCE).contains(&v))
    {
        return Err(TargetError::OutOfSupport(
            "bridge lengths must lie in [0, 1]".into(),
        ));
    }
    Ok(())
}

fn routes_tape(tape: &mut Tape, x: Var, routes: &[usize]) -> Result<Var> {
    let mut w = vec![0.0; 5 * routes.len()];
    for (c, &r) in routes.iter().enumerate() {
        for i in 0..5 {
            w[i * routes.len() + c] = BRIDGE_ROUTES[r][i];
        }
    }
    let w = tape.constant(Tensor::from_parts(vec![5, routes.len()], w))?;
    Ok(tape.matmul(x, w)?)
}

fn bridge_h_tape(tape: &mut Tape, x: Var) -> Result<Var> {
    check_cube_tape(tape, x)?;
    let all = routes_tape(tape, x, &[0, 1, 2, 3])?;
    Ok(tape.min_reduce(all)?)
}

fn bridge_s_tape(tape: &mut Tape, x: Var, convention: BridgeConvention) -> Result<Var> {
    check_cube_tape(tape, x)?;
    let inner = routes_tape(tape, x, &[1, 2])?;
    let inner = tape.min_reduce(inner)?;
    let outer = routes_tape(tape, x, &[0, 3])?;
    let outer = tape.min_reduce(outer)?;
    Ok(match convention {
        BridgeConvention::AsPrinted => tape.sub(inner, outer)?,
        BridgeConvention::Negated => tape.sub(outer, inner)?,
    })
}

/// Discounted payoff `e^{-rT}(S̄_T - K)` per row, `[n, 1]`.
fn asian_payoff_tape(tape: &mut Tape, x: Var, spec: &AsianSpec) -> Result<Var> {
    spec.validate()?;
    let n = spec.steps;
    let w = tape.cumsum_rows(x)?;
    let w = tape.scale(w, spec.sigma)?;
    let drift: Vec<f64> = (1..=n).map(|i| spec.spot.ln() + spec.drift(i)).collect();
    let drift = tape.constant(Tensor::vector(drift))?;
    let log_prices = tape.add_row(w, drift)?;
    let prices = tape.exp(log_prices)?;
    let total = tape.sum_rows(prices)?;
    let avg = tape.shift(total, spec.spot)?;
    let avg = tape.scale(avg, 1.0 / (n + 1) as f64)?;
    let excess = tape.shift(avg, -spec.strike)?;
    Ok(tape.scale(excess, spec.discount())?)
}

fn double_slit_s_tape(tape: &mut Tape, q: Var, spec: &DoubleSlitSpec) -> Result<Var> {
    let rows = tape.value(q).rows();
    let steps = spec.d / 2;
    let evens: Vec<usize> = (0..steps).map(|k| 2 * k).collect();
    let odds: Vec<usize> = (0..steps).map(|k| 2 * k + 1).collect();
    let dx = tape.select_columns(q, &evens)?;
    let dy = tape.select_columns(q, &odds)?;
    let xs = tape.cumsum_rows(dx)?;
    let ys = tape.cumsum_rows(dy)?;

    let mut cols = Vec::with_capacity(rows);
    let mut mask = Vec::with_capacity(rows);
    {
        let xv = tape.value(xs);
        for i in 0..rows {
            match first_slit_crossing(xv.row(i).iter().copied(), spec.x_slit) {
                Some(k) => {
                    cols.push(k);
                    mask.push(1.0);
                }
                None => {
                    cols.push(0);
                    mask.push(0.0);
                }
            }
        }
    }
    let yn = tape.gather_columns(ys, &cols)?;
    let half = 0.5 * spec.w_slit;
    let mut gaps = [yn; 2];
    for (slot, centre) in gaps.iter_mut().zip([spec.y_slit, -spec.y_slit]) {
        let d = tape.shift(yn, -centre)?;
        let d = tape.abs(d)?;
        let d = tape.shift(d, -half)?;
        *slot = tape.relu(d)?;
    }
    let both = tape.concat_columns(&gaps)?;
    let slit = tape.min_reduce(both)?;
    let mask = tape.constant(Tensor::from_parts(vec![rows, 1], mask))?;
    let slit = tape.mul(slit, mask)?;

    let neg_x = tape.neg(xs)?;
    let neg_max = tape.min_reduce(neg_x)?;
    let short = tape.shift(neg_max, spec.x_screen)?;
    let screen = tape.relu(short)?;
    let total = tape.add(slit, screen)?;
    Ok(tape.neg(total)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(log_penalty(100.0, 3.0, 3.3), 0.0);
        assert!(close(log_penalty(100.0, 3.0, 2.99), -1.0, 1e-12));
        let rhos: Vec<f64> = [10.0, 100.0, 1000.0]
            .iter()
            .map(|&a| log_penalty(a, 1.0, 0.9).exp())
            .collect();
        assert!(close(rhos[0], (-1.0f64).exp(), 1e-12));
        assert!(close(rhos[1], (-10.0f64).exp(), 1e-15));
        assert!(rhos[2] < rhos[1] && rhos[1] < rhos[0]);
    }

    #[test]
    fn ramp_examples() {
        assert_eq!(smooth_ramp(2.0, 0.5), 2.0);
        assert_eq!(smooth_ramp(0.5, 0.5), 0.5);
        assert!(close(
            smooth_ramp(0.0, 0.5),
            0.5 / std::f64::consts::E,
            1e-15
        ));
        assert!(close(smooth_ramp(0.0, 0.5), 0.18394, 1e-5));
        let h = 1e-7;
        let left = (smooth_ramp(0.5, 0.5) - smooth_ramp(0.5 - h, 0.5)) / h;
        let right = (smooth_ramp(0.5 + h, 0.5) - smooth_ramp(0.5, 0.5)) / h;
        assert!(close(left, 1.0, 1e-6) && close(right, 1.0, 1e-6));
    }

    #[test]
    fn trunc_normal_examples() {
        assert!(close(trunc_normal_log_h(3.0, 3.0, 100.0), -5.418939, 1e-6));
        assert_eq!(trunc_normal_log_h(4.0, 3.0, 100.0), ln_std_normal(4.0));
        assert!(close(
            trunc_normal_log_h(2.9, 3.0, 100.0),
            ln_std_normal(2.9) - 10.0,
            1e-10
        ));
    }

    #[test]
    fn sum_exp_examples() {
        assert_eq!(sum_exp_log_h(&[6.0, 5.0], 10.0, 100.0).unwrap(), -11.0);
        assert!(close(
            sum_exp_log_h(&[5.0, 4.99], 10.0, 100.0).unwrap(),
            -10.99,
            1e-10
        ));
        assert!(sum_exp_log_h(&[-1.0, 5.0], 10.0, 100.0).is_err());
    }

    #[test]
    fn bridge_examples() {
        assert_eq!(bridge_h(&[1.0; 5]).unwrap(), 2.0);
        assert_eq!(bridge_h(&[0.0; 5]).unwrap(), 0.0);
        assert!(bridge_h(&[1.5, 0.0, 0.0, 0.0, 0.0]).is_err());
        let c = BridgeConvention::AsPrinted;
        assert_eq!(bridge_conditional_s(&[1.0; 5], c).unwrap(), 4.0);
        assert_eq!(
            bridge_conditional_s(&[1.0, 1.0, 0.0, 1.0, 0.0], c).unwrap(),
            -1.0
        );
        assert_eq!(
            bridge_conditional_s(&[1.0, 1.0, 0.0, 1.0, 0.0], BridgeConvention::Negated).unwrap(),
            1.0
        );
    }

    #[test]
    fn asian_zero_increments_follow_drift() {
        let spec = AsianSpec::default();
        let (prices, _) = asian_paths(&vec![0.0; 88], &spec).unwrap();
        for (i, p) in prices.iter().enumerate() {
            let t = i as f64 * spec.dt();
            let expected = spec.spot * ((spec.rate - 0.02) * t).exp();
            assert!(close(*p, expected, 1e-12 * expected));
        }
    }

    #[test]
    fn asian_at_strike_gives_ramp_floor() {
        let spec = AsianSpec {
            strike: 40.0,
            rate: 0.0,
            sigma: 1e-300,
            ..AsianSpec::default()
        };
        let x = vec![0.0; spec.steps];
        let lh = asian_log_h_expected_payoff(&x, &spec).unwrap();
        let base = spec.base().log_density(&x).unwrap();
        assert!(close(lh - base, 0.5f64.ln() - 1.0, 1e-12));
    }

    #[test]
    fn double_slit_examples() {
        let spec = DoubleSlitSpec::new(4);
        // (5, 1.5) then (6, 0): through the upper slit centre, final x = 11.
        let q = [5.0, 1.5, 6.0, 0.0];
        assert_eq!(double_slit_s(&q, &spec).unwrap(), 0.0);
        // Never reaches the slit; furthest x is 4.
        let q = [4.0, 0.0, -1.0, 3.0];
        assert_eq!(double_slit_s(&q, &spec).unwrap(), -(0.0 + 6.0));
        let q = [8.0, 0.0, -5.0, 0.0];
        // Crosses the slit at y = 0: distance to either slit is 1.5 - 0.5 = 1.
        assert_eq!(double_slit_s(&q, &spec).unwrap(), -(1.0 + 2.0));
        assert!(double_slit_s(&[0.0; 3], &DoubleSlitSpec::new(3)).is_err());
        let base = spec.base().log_density(&q).unwrap();
        assert!(close(
            double_slit_log_h(&q, &spec, 100.0).unwrap(),
            base - 300.0,
            1e-10
        ));
    }

    #[test]
    fn screen_crossing_interpolates() {
        let spec = DoubleSlitSpec::new(4);
        let y = screen_crossing_y(&[6.0, 2.0, 6.0, 2.0], &spec).unwrap();
        assert!(close(y, 2.0 + 2.0 * (4.0 / 6.0), 1e-12));
        assert_eq!(screen_crossing_y(&[1.0, 0.0, 1.0, 0.0], &spec), None);
    }

    fn all_targets() -> Vec<(Target, BaseDistribution)> {
        let asian = AsianSpec {
            steps: 8,
            maturity: 8.0 / 88.0 * (4.0 / 12.0),
            ..AsianSpec::default()
        };
        let slit = DoubleSlitSpec::new(12);
        vec![
            (
                Target::TruncNormal {
                    gamma: 0.5,
                    alpha: 100.0,
                },
                BaseDistribution::StandardNormal { dim: 1 },
            ),
            (
                Target::SumExp {
                    gamma: 3.0,
                    alpha: 100.0,
                },
                BaseDistribution::UniformUnitCube { dim: 2 },
            ),
            (Target::Bridge, BaseDistribution::UniformUnitCube { dim: 5 }),
            (
                Target::BridgeConditional {
                    alpha: 100.0,
                    convention: BridgeConvention::Negated,
                },
                BaseDistribution::UniformUnitCube { dim: 5 },
            ),
            (
                Target::AsianPayoff {
                    spec: asian.clone(),
                },
                BaseDistribution::StandardNormal { dim: 8 },
            ),
            (
                Target::AsianRare {
                    spec: asian,
                    gamma: 8.0,
                    alpha: 100.0,
                },
                BaseDistribution::StandardNormal { dim: 8 },
            ),
            (
                Target::DoubleSlit {
                    spec: slit,
                    alpha: 100.0,
                },
                BaseDistribution::IsotropicNormal {
                    dim: 12,
                    variance: 4.0,
                },
            ),
        ]
    }

    #[test]
    fn tape_and_plain_evaluators_agree() {
        let mut rng = SimRng::new(11);
        for (target, sampler) in all_targets() {
            let mut x = sampler.sample(64, &mut rng);
            if matches!(target, Target::SumExp { .. }) {
                x = x.map(|v| 4.0 * v + 1e-3);
            }
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone()).unwrap();
            let lh = target.log_h_tape(&mut tape, xv).unwrap();
            let got = tape.value(lh);
            assert_eq!(got.shape(), &[64, 1]);
            for i in 0..64 {
                let want = target.log_h(x.row(i)).unwrap();
                assert!(
                    close(got.data()[i], want, 1e-9 * want.abs().max(1.0)),
                    "{target:?} row {i}: {} vs {want}",
                    got.data()[i]
                );
            }
        }
    }

    #[test]
    fn penalty_vanishes_exactly_on_event() {
        let mut rng = SimRng::new(5);
        for (target, sampler) in all_targets() {
            let Some(gamma) = target.gamma() else {
                continue;
            };
            let alpha = match &target {
                Target::TruncNormal { alpha, .. }
                | Target::SumExp { alpha, .. }
                | Target::BridgeConditional { alpha, .. }
                | Target::AsianRare { alpha, .. }
                | Target::DoubleSlit { alpha, .. } => *alpha,
                _ => unreachable!(),
            };
            let x = sampler.sample(500, &mut rng);
            for i in 0..500 {
                let row: Vec<f64> = if matches!(target, Target::SumExp { .. }) {
                    x.row(i).iter().map(|v| 4.0 * v + 1e-3).collect()
                } else {
                    x.row(i).to_vec()
                };
                let s = target.performance(&row).unwrap().unwrap();
                let inside = target.indicator(&row).unwrap().unwrap();
                assert_eq!(log_penalty(alpha, gamma, s) == 0.0, inside);
            }
        }
    }
}
