//! Built-in scenarios and their default settings.

use std::fmt;
use std::path::PathBuf;

use crate::distributions::BaseDistribution;
use crate::flows::{cyclic_shift, equal_split, ArchitectureSpec, ConditionerSpec, LayerSpec};
use crate::targets::{AsianSpec, BridgeConvention, DoubleSlitSpec, Target};
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScenarioKind {
    TruncNormal,
    SumExp,
    Bridge,
    BridgeConditional,
    AsianPayoff,
    AsianRare,
    DoubleSlit,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 7] = [
        ScenarioKind::TruncNormal,
        ScenarioKind::SumExp,
        ScenarioKind::Bridge,
        ScenarioKind::BridgeConditional,
        ScenarioKind::AsianPayoff,
        ScenarioKind::AsianRare,
        ScenarioKind::DoubleSlit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::TruncNormal => "trunc-normal",
            ScenarioKind::SumExp => "sum-exp",
            ScenarioKind::Bridge => "bridge",
            ScenarioKind::BridgeConditional => "bridge-conditional",
            ScenarioKind::AsianPayoff => "asian-payoff",
            ScenarioKind::AsianRare => "asian-rare",
            ScenarioKind::DoubleSlit => "double-slit",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        ScenarioKind::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Keys accepted in the `[scenario]` section.
    pub fn parameter_keys(self) -> &'static [&'static str] {
        const ASIAN: &[&str] = &[
            "rate", "sigma", "strike", "spot", "maturity", "steps", "delta",
        ];
        const ASIAN_RARE: &[&str] = &[
            "rate", "sigma", "strike", "spot", "maturity", "steps", "delta", "gamma", "alpha",
        ];
        match self {
            ScenarioKind::TruncNormal | ScenarioKind::SumExp => &["gamma", "alpha"],
            ScenarioKind::Bridge => &[],
            ScenarioKind::BridgeConditional => &["alpha", "convention", "warm_start"],
            ScenarioKind::AsianPayoff => ASIAN,
            ScenarioKind::AsianRare => ASIAN_RARE,
            ScenarioKind::DoubleSlit => &[
                "d", "horizon", "x_slit", "y_slit", "w_slit", "x_screen", "alpha",
            ],
        }
    }

    /// Keys accepted in the `[architecture]` section.
    pub fn architecture_keys(self) -> &'static [&'static str] {
        match self {
            ScenarioKind::TruncNormal => &["compositions", "init_scale"],
            ScenarioKind::SumExp => &["couplings", "compositions", "init_scale"],
            _ => &["couplings", "compositions", "hidden", "init_scale"],
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Full-scale settings or a reduced run that fits on a workstation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Paper,
    Desk,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "paper" => Some(Profile::Paper),
            "desk" => Some(Profile::Desk),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationConfig {
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureConfig {
    pub couplings: usize,
    pub compositions: usize,
    /// Hidden width of perceptron conditioners. For the bridge scenarios 0
    /// selects affine conditioners.
    pub hidden: usize,
    pub init_scale: f64,
}

/// Every scenario parameter; only the ones relevant to the chosen scenario
/// are read or echoed.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioParams {
    pub gamma: f64,
    pub alpha: f64,
    pub convention: BridgeConvention,
    pub asian: AsianSpec,
    pub slit: DoubleSlitSpec,
    /// Iterations spent on the unconditional bridge target before the
    /// conditional one; spreads mass over both event corners.
    pub warm_start: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: ScenarioKind,
    pub profile: Profile,
    pub output_dir: PathBuf,
    pub train: TrainConfig,
    pub estimation: EstimationConfig,
    pub architecture: ArchitectureConfig,
    pub params: ScenarioParams,
}

fn train(iterations: u64, batch: usize, learning_rate: f64, weight_decay: f64) -> TrainConfig {
    TrainConfig {
        iterations,
        batch,
        learning_rate,
        weight_decay,
        seed: 1,
        ..TrainConfig::default()
    }
}

impl ExperimentConfig {
    /// Defaults for `kind` under `profile`.
    pub fn defaults(kind: ScenarioKind, profile: Profile) -> Self {
        use Profile::{Desk, Paper};
        use ScenarioKind::*;
        let d = match profile {
            Paper => 100,
            Desk => 20,
        };
        let params = ScenarioParams {
            gamma: match kind {
                TruncNormal => 3.0,
                SumExp => 10.0,
                AsianRare => 14.0,
                _ => 0.0,
            },
            alpha: 100.0,
            convention: BridgeConvention::Negated,
            asian: AsianSpec::default(),
            slit: DoubleSlitSpec::new(d),
            warm_start: match (kind, profile) {
                (BridgeConditional, Desk) => 2000,
                _ => 0,
            },
        };
        let train = match (kind, profile) {
            (TruncNormal, Paper) => train(30_000, 1000, 1e-3, 1e-4),
            (TruncNormal, Desk) => train(10_000, 1000, 1e-3, 1e-4),
            (SumExp, Paper) => train(100_000, 10_000, 1e-4, 1e-4),
            (SumExp, Desk) => train(20_000, 1000, 1e-3, 1e-4),
            (Bridge, Paper) => train(300_000, 10_000, 1e-4, 1e-4),
            (Bridge, Desk) => train(50_000, 200, 1e-3, 1e-4),
            (BridgeConditional, Paper) => train(500_000, 10_000, 1e-4, 1e-4),
            (BridgeConditional, Desk) => train(20_000, 1000, 1e-3, 1e-4),
            (AsianPayoff, Paper) => train(30_000, 1000, 1e-4, 1e-4),
            (AsianPayoff, Desk) => train(5000, 64, 1e-4, 1e-4),
            (AsianRare, Paper) => train(100_000, 1000, 1e-4, 1e-4),
            (AsianRare, Desk) => train(5000, 64, 1e-4, 1e-4),
            (DoubleSlit, Paper) => train(100_000, 200, 1e-6, 1e-8),
            (DoubleSlit, Desk) => train(20_000, 64, 1e-4, 1e-8),
        };
        let architecture = match (kind, profile) {
            (TruncNormal, _) => ArchitectureConfig {
                couplings: 0,
                compositions: 3,
                hidden: 0,
                init_scale: 0.01,
            },
            (SumExp, _) => ArchitectureConfig {
                couplings: 6,
                compositions: 1,
                hidden: 0,
                init_scale: 0.01,
            },
            (BridgeConditional, Desk) => ArchitectureConfig {
                couplings: 5,
                compositions: 1,
                hidden: 16,
                init_scale: 0.01,
            },
            (Bridge | BridgeConditional, _) => ArchitectureConfig {
                couplings: 5,
                compositions: 1,
                hidden: 0,
                init_scale: 0.01,
            },
            (AsianPayoff | AsianRare, Paper) => ArchitectureConfig {
                couplings: 6,
                compositions: 1,
                hidden: 2 * (params.asian.steps - equal_split(params.asian.steps)),
                init_scale: 0.01,
            },
            (AsianPayoff | AsianRare, Desk) => ArchitectureConfig {
                couplings: 6,
                compositions: 1,
                hidden: 16,
                init_scale: 0.01,
            },
            (DoubleSlit, Paper) => ArchitectureConfig {
                couplings: 20,
                compositions: 1,
                hidden: d,
                init_scale: 0.01,
            },
            (DoubleSlit, Desk) => ArchitectureConfig {
                couplings: 8,
                compositions: 1,
                hidden: d,
                init_scale: 0.01,
            },
        };
        ExperimentConfig {
            scenario: kind,
            profile,
            output_dir: PathBuf::from("runs").join(kind.name()),
            train,
            estimation: EstimationConfig { n: 10_000, seed: 7 },
            architecture,
            params,
        }
    }

    pub fn target(&self) -> Target {
        let p = &self.params;
        match self.scenario {
            ScenarioKind::TruncNormal => Target::TruncNormal {
                gamma: p.gamma,
                alpha: p.alpha,
            },
            ScenarioKind::SumExp => Target::SumExp {
                gamma: p.gamma,
                alpha: p.alpha,
            },
            ScenarioKind::Bridge => Target::Bridge,
            ScenarioKind::BridgeConditional => Target::BridgeConditional {
                alpha: p.alpha,
                convention: p.convention,
            },
            ScenarioKind::AsianPayoff => Target::AsianPayoff {
                spec: p.asian.clone(),
            },
            ScenarioKind::AsianRare => Target::AsianRare {
                spec: p.asian.clone(),
                gamma: p.gamma,
                alpha: p.alpha,
            },
            ScenarioKind::DoubleSlit => Target::DoubleSlit {
                spec: p.slit.clone(),
                alpha: p.alpha,
            },
        }
    }

    pub fn architecture_spec(&self) -> ArchitectureSpec {
        let a = &self.architecture;
        let mut spec = match self.scenario {
            ScenarioKind::TruncNormal => ArchitectureSpec {
                dim: 1,
                base: BaseDistribution::StandardNormal { dim: 1 },
                layers: vec![LayerSpec::Rational {
                    compositions: a.compositions,
                }],
                init_scale: a.init_scale,
            },
            ScenarioKind::SumExp => {
                let mut spec = ArchitectureSpec::coupling_stack(
                    BaseDistribution::StandardNormal { dim: 2 },
                    a.couplings,
                    1,
                    a.compositions,
                    ConditionerSpec::Affine,
                    false,
                    vec![1, 0],
                );
                spec.layers.push(LayerSpec::ElementwiseExp);
                spec
            }
            ScenarioKind::Bridge | ScenarioKind::BridgeConditional => {
                ArchitectureSpec::coupling_stack(
                    BaseDistribution::UniformUnitCube { dim: 5 },
                    a.couplings,
                    3,
                    a.compositions,
                    if a.hidden == 0 {
                        ConditionerSpec::Affine
                    } else {
                        ConditionerSpec::Perceptron {
                            hidden: vec![a.hidden],
                        }
                    },
                    true,
                    vec![2, 3, 4, 0, 1],
                )
            }
            ScenarioKind::AsianPayoff | ScenarioKind::AsianRare => {
                let steps = self.params.asian.steps;
                let split = equal_split(steps);
                ArchitectureSpec::coupling_stack(
                    self.params.asian.base(),
                    a.couplings,
                    split,
                    a.compositions,
                    ConditionerSpec::Perceptron {
                        hidden: vec![a.hidden],
                    },
                    false,
                    cyclic_shift(steps, split),
                )
            }
            ScenarioKind::DoubleSlit => {
                let s = &self.params.slit;
                let mut spec = ArchitectureSpec::double_slit(s.d, s.horizon, a.couplings, a.hidden);
                for layer in &mut spec.layers {
                    if let LayerSpec::Coupling { compositions, .. } = layer {
                        *compositions = a.compositions;
                    }
                }
                spec
            }
        };
        spec.init_scale = a.init_scale;
        spec
    }
}

/// Published or analytic reference values shown next to estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    /// Name of the estimate row this value is compared with.
    pub estimator: &'static str,
    pub label: &'static str,
    pub value: f64,
    /// Relative standard error reported alongside the value, if any.
    pub rel_error: Option<f64>,
}

/// `1 - Φ(γ)`.
pub fn normal_tail(gamma: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::new(0.0, 1.0).map_or(f64::NAN, |n| n.sf(gamma))
}

/// Reference values for the default parameters of each scenario.
pub fn references(cfg: &ExperimentConfig) -> Vec<Reference> {
    let p = &cfg.params;
    match cfg.scenario {
        ScenarioKind::TruncNormal => vec![
            Reference {
                estimator: "c_is",
                label: "c (analytic)",
                value: normal_tail(p.gamma),
                rel_error: None,
            },
            Reference {
                estimator: "c_is",
                label: "c (published IS, n=1000)",
                value: 0.00134576,
                rel_error: Some(0.003),
            },
            Reference {
                estimator: "kl",
                label: "KL (published)",
                value: 0.03465,
                rel_error: Some(0.0056),
            },
        ],
        ScenarioKind::SumExp => vec![
            Reference {
                estimator: "c_is",
                label: "c (analytic)",
                value: (1.0 + p.gamma) * (-p.gamma).exp(),
                rel_error: None,
            },
            Reference {
                estimator: "c_is",
                label: "c (published IS)",
                value: 0.00049920,
                rel_error: Some(0.004),
            },
        ],
        ScenarioKind::Bridge => vec![
            Reference {
                estimator: "ell_is",
                label: "ell (analytic)",
                value: 1339.0 / 1440.0,
                rel_error: None,
            },
            Reference {
                estimator: "variance_reduction",
                label: "variance reduction (published)",
                value: 65.0,
                rel_error: None,
            },
        ],
        ScenarioKind::BridgeConditional => vec![
            Reference {
                estimator: "c_is",
                label: "c (published)",
                value: 0.0346,
                rel_error: Some(0.013),
            },
            Reference {
                estimator: "ell_cond_is",
                label: "ell_cond (published)",
                value: 0.913,
                rel_error: Some(0.017),
            },
        ],
        ScenarioKind::AsianPayoff => vec![
            Reference {
                estimator: "ell_is",
                label: "ell (published IS)",
                value: 5.3580,
                rel_error: Some(0.0023),
            },
            Reference {
                estimator: "variance_reduction",
                label: "variance reduction (published)",
                value: 4.4,
                rel_error: None,
            },
        ],
        ScenarioKind::AsianRare => vec![
            Reference {
                estimator: "c_is",
                label: "c (published IS)",
                value: 0.0015797,
                rel_error: Some(0.0046),
            },
            Reference {
                estimator: "variance_reduction",
                label: "variance reduction (published)",
                value: 2100.0,
                rel_error: None,
            },
        ],
        ScenarioKind::DoubleSlit => vec![Reference {
            estimator: "success_rate",
            label: "success rate (published, d=100)",
            value: 0.916,
            rel_error: None,
        }],
    }
}

/// `-ln` of the target's normalising constant when it is known in closed form.
pub fn loss_floor(cfg: &ExperimentConfig) -> Option<f64> {
    let p = &cfg.params;
    match cfg.scenario {
        ScenarioKind::TruncNormal => Some(-normal_tail(p.gamma).ln()),
        ScenarioKind::SumExp => Some(-((1.0 + p.gamma) * (-p.gamma).exp()).ln()),
        ScenarioKind::Bridge => Some(-(1339.0f64 / 1440.0).ln()),
        _ => None,
    }
}
