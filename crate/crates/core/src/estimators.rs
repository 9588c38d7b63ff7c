//! Importance-sampling estimators driven by a flow's density.
//!
//! Likelihood ratios are formed as `exp(ln p - ln q)`; in hundreds of
//! dimensions the two log-densities are large and their ratio would
//! underflow if computed directly.

use thiserror::Error;

use crate::distributions::SimRng;
use crate::flows::{FlowError, FlowModel, FlowSample};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error("non-finite importance weight at sample {index}")]
    NonFiniteWeight { index: usize },
    #[error("estimate is zero")]
    ZeroEstimate,
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("invalid estimator input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

pub type Result<T> = std::result::Result<T, EstimatorError>;

/// A Monte Carlo estimate with its spread.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub estimate: f64,
    /// Standard deviation of the summands (`n - 1` denominator).
    pub sample_std: f64,
    /// `sample_std / (√n |estimate|)`; infinite for a zero estimate with spread.
    pub rel_std_error: f64,
    pub n: usize,
    pub seed: u64,
    /// Set when an event estimator saw no sample inside the event.
    pub no_hits: bool,
    pub summands: Option<Vec<f64>>,
}

impl EstimateReport {
    /// Mean and spread of `summands`.
    pub fn from_summands(summands: Vec<f64>, seed: u64) -> Result<Self> {
        let n = summands.len();
        if n < 2 {
            return Err(EstimatorError::TooFewSamples(n));
        }
        let mean = summands.iter().sum::<f64>() / n as f64;
        let var = summands
            .iter()
            .map(|s| (s - mean) * (s - mean))
            .sum::<f64>()
            / (n - 1) as f64;
        let std = var.sqrt();
        Ok(EstimateReport {
            estimate: mean,
            sample_std: std,
            rel_std_error: relative_error(std, mean, n),
            n,
            seed,
            no_hits: false,
            summands: Some(summands),
        })
    }

    pub fn variance(&self) -> f64 {
        self.sample_std * self.sample_std
    }

    /// Drops the retained summands.
    pub fn without_summands(mut self) -> Self {
        self.summands = None;
        self
    }
}

fn relative_error(std: f64, estimate: f64, n: usize) -> f64 {
    if std == 0.0 {
        0.0
    } else if estimate == 0.0 {
        f64::INFINITY
    } else {
        std / ((n as f64).sqrt() * estimate.abs())
    }
}

/// `p(x_k)/q(x_k)` for every row of a flow sample.
pub fn is_weights(sample: &FlowSample, log_p: impl Fn(&[f64]) -> f64) -> Result<Vec<f64>> {
    (0..sample.len())
        .map(|k| {
            let w = (log_p(sample.x.row(k)) - sample.log_q[k]).exp();
            if w.is_finite() {
                Ok(w)
            } else {
                Err(EstimatorError::NonFiniteWeight { index: k })
            }
        })
        .collect()
}

fn draw(model: &FlowModel, n: usize, rng: &mut SimRng) -> Result<FlowSample> {
    if n < 2 {
        return Err(EstimatorError::TooFewSamples(n));
    }
    Ok(model.sample(n, rng)?)
}

/// `ĉ = mean[1_A(X) p(X)/q(X)]` with `X ~ q`.
pub fn estimate_rare_prob(
    model: &FlowModel,
    log_p: impl Fn(&[f64]) -> f64,
    indicator: impl Fn(&[f64]) -> bool,
    n: usize,
    rng: &mut SimRng,
) -> Result<EstimateReport> {
    let sample = draw(model, n, rng)?;
    rare_prob_on(&sample, log_p, indicator, rng.seed())
}

/// [`estimate_rare_prob`] on an existing sample.
pub fn rare_prob_on(
    sample: &FlowSample,
    log_p: impl Fn(&[f64]) -> f64,
    indicator: impl Fn(&[f64]) -> bool,
    seed: u64,
) -> Result<EstimateReport> {
    let w = is_weights(sample, log_p)?;
    let mut hits = 0usize;
    let summands = w
        .iter()
        .enumerate()
        .map(|(k, &wk)| {
            if indicator(sample.x.row(k)) {
                hits += 1;
                wk
            } else {
                0.0
            }
        })
        .collect();
    let mut report = EstimateReport::from_summands(summands, seed)?;
    report.no_hits = hits == 0;
    Ok(report)
}

/// `ℓ̂ = mean[H(X) p(X)/q(X)]` with `X ~ q`.
pub fn estimate_expectation(
    model: &FlowModel,
    log_p: impl Fn(&[f64]) -> f64,
    h: impl Fn(&[f64]) -> f64,
    n: usize,
    rng: &mut SimRng,
) -> Result<EstimateReport> {
    let sample = draw(model, n, rng)?;
    expectation_on(&sample, log_p, h, rng.seed())
}

pub fn expectation_on(
    sample: &FlowSample,
    log_p: impl Fn(&[f64]) -> f64,
    h: impl Fn(&[f64]) -> f64,
    seed: u64,
) -> Result<EstimateReport> {
    let w = is_weights(sample, log_p)?;
    let summands = w
        .iter()
        .enumerate()
        .map(|(k, &wk)| h(sample.x.row(k)) * wk)
        .collect();
    EstimateReport::from_summands(summands, seed)
}

/// Output of the conditional estimator: the ratio and its two ingredients,
/// all from one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalReport {
    /// `ℓ̂^A`.
    pub conditional: EstimateReport,
    /// `ĉ`.
    pub probability: EstimateReport,
    /// `mean[H 1_A p/q]`.
    pub joint: EstimateReport,
}

/// `ℓ̂^A = Σ H 1_A p/q / (n ĉ)`.
///
/// The spread is the delta-method one for a ratio of means `ā / b̄`: the
/// summands are linearised as `(a_k - R b_k) / b̄` with `R = ā / b̄`, so
/// `sample_std² = (s_a² - 2 R s_ab + R² s_b²) / b̄²`.
pub fn estimate_conditional_expectation(
    model: &FlowModel,
    log_p: impl Fn(&[f64]) -> f64,
    h: impl Fn(&[f64]) -> f64,
    indicator: impl Fn(&[f64]) -> bool,
    n: usize,
    rng: &mut SimRng,
) -> Result<ConditionalReport> {
    let sample = draw(model, n, rng)?;
    conditional_on(&sample, log_p, h, indicator, rng.seed())
}

pub fn conditional_on(
    sample: &FlowSample,
    log_p: impl Fn(&[f64]) -> f64,
    h: impl Fn(&[f64]) -> f64,
    indicator: impl Fn(&[f64]) -> bool,
    seed: u64,
) -> Result<ConditionalReport> {
    let w = is_weights(sample, log_p)?;
    let n = w.len();
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let mut hits = 0usize;
    for (k, &wk) in w.iter().enumerate() {
        let row = sample.x.row(k);
        if indicator(row) {
            hits += 1;
            a.push(h(row) * wk);
            b.push(wk);
        } else {
            a.push(0.0);
            b.push(0.0);
        }
    }
    let mut joint = EstimateReport::from_summands(a, seed)?;
    let mut probability = EstimateReport::from_summands(b, seed)?;
    joint.no_hits = hits == 0;
    probability.no_hits = hits == 0;
    if probability.estimate == 0.0 {
        return Err(EstimatorError::ZeroEstimate);
    }
    let ratio = joint.estimate / probability.estimate;
    let (sa, sb) = (
        joint.summands.as_deref().unwrap_or(&[]),
        probability.summands.as_deref().unwrap_or(&[]),
    );
    let cov = sa
        .iter()
        .zip(sb)
        .map(|(x, y)| (x - joint.estimate) * (y - probability.estimate))
        .sum::<f64>()
        / (n - 1) as f64;
    let lin_var =
        (joint.variance() - 2.0 * ratio * cov + ratio * ratio * probability.variance()).max(0.0);
    let std = lin_var.sqrt() / probability.estimate.abs();
    let conditional = EstimateReport {
        estimate: ratio,
        sample_std: std,
        rel_std_error: relative_error(std, ratio, n),
        n,
        seed,
        no_hits: hits == 0,
        summands: None,
    };
    Ok(ConditionalReport {
        conditional,
        probability,
        joint,
    })
}

/// `D(q*, q) = E_q[(q*/q) ln(q*/q)]` for `q* = f / norm`, where `log_f` is
/// `ln f` (`-inf` where `f` vanishes, contributing `0 ln 0 = 0`).
pub fn estimate_kl_to(
    model: &FlowModel,
    log_f: impl Fn(&[f64]) -> f64,
    norm: f64,
    n: usize,
    rng: &mut SimRng,
) -> Result<EstimateReport> {
    let sample = draw(model, n, rng)?;
    kl_on(&sample, log_f, norm, rng.seed())
}

pub fn kl_on(
    sample: &FlowSample,
    log_f: impl Fn(&[f64]) -> f64,
    norm: f64,
    seed: u64,
) -> Result<EstimateReport> {
    if !(norm > 0.0) {
        return Err(EstimatorError::Invalid(format!(
            "normalising constant must be positive, got {norm}"
        )));
    }
    let ln_norm = norm.ln();
    let summands = (0..sample.len())
        .map(|k| {
            let lf = log_f(sample.x.row(k));
            if lf == f64::NEG_INFINITY {
                return Ok(0.0);
            }
            let lr = lf - ln_norm - sample.log_q[k];
            let s = lr.exp() * lr;
            if s.is_finite() {
                Ok(s)
            } else {
                Err(EstimatorError::NonFiniteWeight { index: k })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    EstimateReport::from_summands(summands, seed)
}

/// KL divergence from `q` to `p` truncated to the event and renormalised by `c_hat`.
pub fn estimate_kl(
    model: &FlowModel,
    log_p: impl Fn(&[f64]) -> f64,
    indicator: impl Fn(&[f64]) -> bool,
    c_hat: f64,
    n: usize,
    rng: &mut SimRng,
) -> Result<EstimateReport> {
    estimate_kl_to(
        model,
        |x| {
            if indicator(x) {
                log_p(x)
            } else {
                f64::NEG_INFINITY
            }
        },
        c_hat,
        n,
        rng,
    )
}

/// Sample size giving relative standard error `target_rel_err`:
/// `(σ / (|estimate| · target))²`, rounded to the nearest integer.
pub fn required_sample_size(report: &EstimateReport, target_rel_err: f64) -> Result<u64> {
    if report.estimate == 0.0 {
        return Err(EstimatorError::ZeroEstimate);
    }
    if !(target_rel_err > 0.0) {
        return Err(EstimatorError::Invalid(format!(
            "target relative error must be positive, got {target_rel_err}"
        )));
    }
    let r = report.sample_std / (report.estimate.abs() * target_rel_err);
    Ok((r * r).round() as u64)
}

/// Plain sample mean of `f` over draws `x` from the nominal law.
pub fn crude_monte_carlo(
    x: &Tensor,
    f: impl Fn(&[f64]) -> f64,
    seed: u64,
) -> Result<EstimateReport> {
    let summands = (0..x.rows()).map(|k| f(x.row(k))).collect();
    EstimateReport::from_summands(summands, seed)
}

/// `Var_crude / Var_IS` for matched sample sizes.
pub fn variance_reduction(crude: &EstimateReport, is: &EstimateReport) -> f64 {
    crude.variance() / is.variance()
}
