//! The monotone rational coupling function
//! `r(z) = θ1 z + θ2 + θ3 / (1 + (θ4 z + θ5)^2)` and its parameter constraints.

use crate::autodiff::{Tape, Var};

use super::FlowError;

/// Shrinks `|θ3|` strictly inside the invertibility bound.
pub const SAFETY_FACTOR: f64 = 0.95;

/// Raw conditioner outputs beyond this magnitude would overflow `exp`.
pub const RAW_LIMIT: f64 = 700.0;

/// `8√3 / 9`, the invertibility bound on `|θ3| θ4 / θ1`.
pub fn bound_coefficient() -> f64 {
    8.0 * 3f64.sqrt() / 9.0
}

/// Constrained parameters of one rational function for one coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RationalStage {
    pub theta: [f64; 5],
}

impl RationalStage {
    pub const IDENTITY: RationalStage = RationalStage {
        theta: [1.0, 0.0, 0.0, 1.0, 0.0],
    };

    /// Maps unconstrained values onto the invertible region:
    /// `θ1 = e^{θ1'}`, `θ4 = e^{θ4'}`, `θ3 = 0.95 (8√3 θ1 / 9θ4) tanh θ3'`.
    pub fn constrain(raw: [f64; 5]) -> Result<Self, FlowError> {
        check_raw(raw[0])?;
        check_raw(raw[3])?;
        let t1 = raw[0].exp();
        let t4 = raw[3].exp();
        let t3 = SAFETY_FACTOR * bound_coefficient() * (raw[0] - raw[3]).exp() * raw[2].tanh();
        Ok(RationalStage {
            theta: [t1, raw[1], t3, t4, raw[4]],
        })
    }

    pub fn eval(&self, z: f64) -> f64 {
        let [t1, t2, t3, t4, t5] = self.theta;
        let u = t4 * z + t5;
        t1 * z + t2 + t3 / (1.0 + u * u)
    }

    pub fn derivative(&self, z: f64) -> f64 {
        let [t1, _, t3, t4, t5] = self.theta;
        let u = t4 * z + t5;
        let q = 1.0 / (1.0 + u * u);
        t1 - 2.0 * t3 * t4 * u * q * q
    }

    /// `r(1) - r(0)`, positive for constrained parameters.
    pub fn unit_span(&self) -> f64 {
        let [t1, _, t3, t4, t5] = self.theta;
        let q0 = 1.0 / (1.0 + t5 * t5);
        let u1 = t4 + t5;
        let q1 = 1.0 / (1.0 + u1 * u1);
        t1 + t3 * (q1 - q0)
    }

    /// Endpoint-normalised variant `(r(z) - r(0)) / (r(1) - r(0))`.
    pub fn eval_unit(&self, z: f64) -> f64 {
        let [t1, _, t3, t4, t5] = self.theta;
        let q0 = 1.0 / (1.0 + t5 * t5);
        let u = t4 * z + t5;
        let q = 1.0 / (1.0 + u * u);
        (t1 * z + t3 * (q - q0)) / self.unit_span()
    }

    pub fn derivative_unit(&self, z: f64) -> f64 {
        self.derivative(z) / self.unit_span()
    }

    /// Whether the strict invertibility conditions hold.
    pub fn is_invertible(&self) -> bool {
        let [t1, _, t3, t4, _] = self.theta;
        t1 > 0.0 && t4 > 0.0 && t3.abs() < bound_coefficient() * t1 / t4
    }
}

fn check_raw(v: f64) -> Result<(), FlowError> {
    if v.is_finite() && v.abs() <= RAW_LIMIT {
        Ok(())
    } else {
        Err(FlowError::ConditionerOutOfRange { value: v })
    }
}

/// Recorded constrained parameters, each an `[n, k]` block.
#[derive(Debug, Clone, Copy)]
pub struct ThetaVars {
    pub t1: Var,
    pub t2: Var,
    pub t3: Var,
    pub t4: Var,
    pub t5: Var,
}

/// Applies the constraint map to five raw `[n, k]` blocks.
pub fn constrain_tape(tape: &mut Tape, raw: [Var; 5]) -> Result<ThetaVars, FlowError> {
    for &v in &[raw[0], raw[3]] {
        if let Some(&bad) = tape.value(v).data().iter().find(|x| x.abs() > RAW_LIMIT) {
            return Err(FlowError::ConditionerOutOfRange { value: bad });
        }
    }
    let t1 = tape.exp(raw[0])?;
    let t4 = tape.exp(raw[3])?;
    let log_ratio = tape.sub(raw[0], raw[3])?;
    let ratio = tape.exp(log_ratio)?;
    let squash = tape.tanh(raw[2])?;
    let t3 = tape.mul(ratio, squash)?;
    let t3 = tape.scale(t3, SAFETY_FACTOR * bound_coefficient())?;
    Ok(ThetaVars {
        t1,
        t2: raw[1],
        t3,
        t4,
        t5: raw[4],
    })
}

/// `1 / (1 + (θ4 z + θ5)^2)` together with `θ4 z + θ5`.
fn bump(tape: &mut Tape, z: Var, th: &ThetaVars) -> Result<(Var, Var), FlowError> {
    let u = tape.mul(th.t4, z)?;
    let u = tape.add(u, th.t5)?;
    let u2 = tape.square(u)?;
    let denom = tape.shift(u2, 1.0)?;
    let q = tape.recip(denom)?;
    Ok((u, q))
}

/// `ln r'(z) = ln(θ1 - 2 θ3 θ4 u q^2)`.
fn log_slope(tape: &mut Tape, u: Var, q: Var, th: &ThetaVars) -> Result<Var, FlowError> {
    let q2 = tape.square(q)?;
    let a = tape.mul(th.t3, th.t4)?;
    let a = tape.mul(a, u)?;
    let a = tape.mul(a, q2)?;
    let a = tape.scale(a, -2.0)?;
    let slope = tape.add(th.t1, a)?;
    Ok(tape.ln(slope)?)
}

/// One rational stage applied elementwise; returns `(r(z), ln r'(z))`.
pub fn rational_tape(tape: &mut Tape, z: Var, th: &ThetaVars) -> Result<(Var, Var), FlowError> {
    let (u, q) = bump(tape, z, th)?;
    let lin = tape.mul(th.t1, z)?;
    let lin = tape.add(lin, th.t2)?;
    let b = tape.mul(th.t3, q)?;
    let x = tape.add(lin, b)?;
    let dlog = log_slope(tape, u, q, th)?;
    Ok((x, dlog))
}

/// Endpoint-normalised stage on `[0, 1]`; returns `(r̃(z), ln r̃'(z))`.
pub fn unit_rational_tape(
    tape: &mut Tape,
    z: Var,
    th: &ThetaVars,
) -> Result<(Var, Var), FlowError> {
    let (u, q) = bump(tape, z, th)?;
    // q at z = 0 and z = 1
    let t5sq = tape.square(th.t5)?;
    let d0 = tape.shift(t5sq, 1.0)?;
    let q0 = tape.recip(d0)?;
    let u1 = tape.add(th.t4, th.t5)?;
    let u1sq = tape.square(u1)?;
    let d1 = tape.shift(u1sq, 1.0)?;
    let q1 = tape.recip(d1)?;

    let dq1 = tape.sub(q1, q0)?;
    let span = tape.mul(th.t3, dq1)?;
    let span = tape.add(th.t1, span)?;

    let dq = tape.sub(q, q0)?;
    let num_b = tape.mul(th.t3, dq)?;
    let num_a = tape.mul(th.t1, z)?;
    let num = tape.add(num_a, num_b)?;
    let x = tape.div(num, span)?;

    let dlog = log_slope(tape, u, q, th)?;
    let log_span = tape.ln(span)?;
    let dlog = tape.sub(dlog, log_span)?;
    Ok((x, dlog))
}

/// Solves `stage(z) = x` for a strictly increasing stage by bisection.
///
/// The bracket starts at `[-1, 1]` and doubles until it encloses `x`.
pub fn invert_stage(f: impl Fn(f64) -> f64, x: f64, tol: f64) -> Result<f64, FlowError> {
    let limit = 2f64.powi(60);
    let mut lo = -1.0;
    let mut hi = 1.0;
    while f(lo) > x {
        lo *= 2.0;
        if lo.abs() > limit {
            return Err(FlowError::BracketOverflow { target: x });
        }
    }
    while f(hi) < x {
        hi *= 2.0;
        if hi > limit {
            return Err(FlowError::BracketOverflow { target: x });
        }
    }
    loop {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if (fm - x).abs() <= tol || mid <= lo || mid >= hi {
            return Ok(mid);
        }
        if fm < x {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

/// Inverts a composition `r_k ∘ … ∘ r_1` for one coordinate.
pub fn invert_scalar(
    stages: &[RationalStage],
    unit_interval: bool,
    x: f64,
    tol: f64,
) -> Result<f64, FlowError> {
    let mut v = x;
    for stage in stages.iter().rev() {
        v = if unit_interval {
            invert_stage(|z| stage.eval_unit(z), v, tol)?
        } else {
            invert_stage(|z| stage.eval(z), v, tol)?
        };
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::SimRng;
    use crate::tensor::Tensor;

    fn random_stage(rng: &mut SimRng, spread: f64) -> RationalStage {
        let raw = [0; 5].map(|_| spread * (2.0 * rng.uniform() - 1.0));
        RationalStage::constrain(raw).unwrap()
    }

    #[test]
    fn zero_raw_is_identity() {
        let s = RationalStage::constrain([0.0; 5]).unwrap();
        assert_eq!(s, RationalStage::IDENTITY);
        assert_eq!(s.eval(2.5), 2.5);
        assert_eq!(s.derivative(-1.0), 1.0);
    }

    #[test]
    fn theta3_saturates_at_safety_bound() {
        let s = RationalStage::constrain([0.0, 0.0, 40.0, 0.0, 0.0]).unwrap();
        let expected = 0.95 * 8.0 * 3f64.sqrt() / 9.0;
        assert!((s.theta[2] - expected).abs() < 1e-12);
        assert!((s.theta[2] - 1.46260).abs() < 5e-5);
        assert!(s.is_invertible());
    }

    #[test]
    fn overflowing_raw_is_rejected() {
        assert!(matches!(
            RationalStage::constrain([701.0, 0.0, 0.0, 0.0, 0.0]),
            Err(FlowError::ConditionerOutOfRange { .. })
        ));
        assert!(matches!(
            RationalStage::constrain([0.0, 0.0, 0.0, -750.0, 0.0]),
            Err(FlowError::ConditionerOutOfRange { .. })
        ));
    }

    #[test]
    fn bump_example() {
        let s = RationalStage {
            theta: [1.0, 0.0, 1.0, 1.0, 0.0],
        };
        assert_eq!(s.eval(0.0), 1.0);
        assert_eq!(s.derivative(0.0), 1.0);
    }

    #[test]
    fn tape_matches_plain_and_slope_matches_differences() {
        let mut rng = SimRng::new(11);
        for _ in 0..50 {
            let raw = [0; 5].map(|_| 2.0 * (2.0 * rng.uniform() - 1.0));
            let stage = RationalStage::constrain(raw).unwrap();
            let z = 4.0 * (2.0 * rng.uniform() - 1.0);
            let mut tape = Tape::new();
            let vars = raw.map(|r| tape.constant(Tensor::vector(vec![r])).unwrap());
            let th = constrain_tape(&mut tape, vars).unwrap();
            let zv = tape.constant(Tensor::vector(vec![z])).unwrap();
            let (x, dlog) = rational_tape(&mut tape, zv, &th).unwrap();
            assert!((tape.value(x).data()[0] - stage.eval(z)).abs() < 1e-12);
            let h = 1e-6;
            let slope = (stage.eval(z + h) - stage.eval(z - h)) / (2.0 * h);
            assert!((tape.value(dlog).data()[0] - slope.ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn unit_stage_fixes_endpoints_and_matches_tape() {
        let mut rng = SimRng::new(5);
        for _ in 0..50 {
            let raw = [0; 5].map(|_| 3.0 * (2.0 * rng.uniform() - 1.0));
            let stage = RationalStage::constrain(raw).unwrap();
            assert_eq!(stage.eval_unit(0.0), 0.0);
            assert_eq!(stage.eval_unit(1.0), 1.0);
            let z = rng.uniform();
            let mut tape = Tape::new();
            let vars = raw.map(|r| tape.constant(Tensor::vector(vec![r])).unwrap());
            let th = constrain_tape(&mut tape, vars).unwrap();
            let zv = tape.constant(Tensor::vector(vec![z])).unwrap();
            let (x, dlog) = unit_rational_tape(&mut tape, zv, &th).unwrap();
            assert!((tape.value(x).data()[0] - stage.eval_unit(z)).abs() < 1e-12);
            let h = 1e-7;
            let slope = (stage.eval_unit(z + h) - stage.eval_unit(z - h)) / (2.0 * h);
            assert!((tape.value(dlog).data()[0] - slope.ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn slope_positive_on_wide_grid() {
        let mut rng = SimRng::new(99);
        for _ in 0..10_000 {
            let stage = random_stage(&mut rng, 4.0);
            for i in 0..=100 {
                let z = -50.0 + i as f64;
                assert!(stage.derivative(z) > 0.0, "{stage:?} at {z}");
            }
        }
    }

    #[test]
    fn identity_inversion() {
        let z = invert_scalar(&[RationalStage::IDENTITY], false, 3.5, 1e-12).unwrap();
        assert!((z - 3.5).abs() < 1e-12);
    }

    #[test]
    fn round_trip_inversion() {
        let mut rng = SimRng::new(21);
        for _ in 0..2_000 {
            let stages: Vec<_> = (0..3).map(|_| random_stage(&mut rng, 2.0)).collect();
            let z = 6.0 * (2.0 * rng.uniform() - 1.0);
            let x = stages.iter().fold(z, |v, s| s.eval(v));
            let back = invert_scalar(&stages, false, x, 1e-14).unwrap();
            assert!((back - z).abs() < 1e-10, "{z} vs {back}");
        }
    }

    #[test]
    fn bracketing_never_fails() {
        let mut rng = SimRng::new(8);
        for _ in 0..10_000 {
            let stage = random_stage(&mut rng, 5.0);
            let x = 1e3 * (2.0 * rng.uniform() - 1.0);
            let z = invert_stage(|v| stage.eval(v), x, 1e-9).unwrap();
            assert!((stage.eval(z) - x).abs() <= 1e-9 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn bracket_overflow_is_reported() {
        let flat = |z: f64| 1e-30 * z;
        assert!(matches!(
            invert_stage(flat, 1e20, 1e-9),
            Err(FlowError::BracketOverflow { .. })
        ));
    }
}
