//! Experiment config files.
//!
//! ```text
//! # comment
//! scenario = bridge
//! profile = desk
//! output_dir = runs/bridge
//!
//! [train]
//! iterations = 50000
//! learning_rate = 0.001
//!
//! [estimation]
//! n = 10000
//!
//! [architecture]
//! couplings = 5
//!
//! [scenario]
//! alpha = 100
//! ```
//!
//! Values are bare words. Unset fields take the scenario's defaults for the
//! chosen profile; unknown sections and keys are errors.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use super::scenario::{ExperimentConfig, Profile, ScenarioKind};
use crate::targets::BridgeConvention;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("missing scenario")]
    MissingScenario,
    #[error("invalid config: {0}")]
    Invalid(String),
}

const TRAIN_KEYS: &[&str] = &[
    "iterations",
    "batch",
    "learning_rate",
    "weight_decay",
    "seed",
    "beta1",
    "beta2",
    "epsilon",
    "log_every",
];
const ESTIMATION_KEYS: &[&str] = &["n", "seed"];
const TOP_KEYS: &[&str] = &["scenario", "profile", "output_dir"];

struct Entry {
    line: usize,
    section: String,
    key: String,
    value: String,
}

fn err(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError::Line {
        line,
        message: message.into(),
    }
}

fn tokenize(text: &str) -> Result<Vec<Entry>, ConfigError> {
    let mut section = String::new();
    let mut entries: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| err(line, format!("malformed section header `{content}`")))?
                .trim();
            if !matches!(name, "train" | "estimation" | "architecture" | "scenario") {
                return Err(err(line, format!("unknown section [{name}]")));
            }
            section = name.to_string();
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(line, format!("expected `key = value`, got `{content}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(err(
                line,
                format!("expected `key = value`, got `{content}`"),
            ));
        }
        if entries.iter().any(|e| e.section == section && e.key == key) {
            return Err(err(line, format!("duplicate key `{key}`")));
        }
        entries.push(Entry {
            line,
            section: section.clone(),
            key: key.to_string(),
            value: value.to_string(),
        });
    }
    Ok(entries)
}

fn parse_value<T: FromStr>(e: &Entry, what: &str) -> Result<T, ConfigError> {
    e.value.parse().map_err(|_| {
        err(
            e.line,
            format!("`{}` expects {what}, got `{}`", e.key, e.value),
        )
    })
}

fn parse_float(e: &Entry) -> Result<f64, ConfigError> {
    let v: f64 = parse_value(e, "a number")?;
    if !v.is_finite() {
        return Err(err(e.line, format!("`{}` must be finite", e.key)));
    }
    Ok(v)
}

/// Parses a config, filling unset fields from the scenario defaults.
/// `profile` overrides the file's `profile` key when given.
pub fn parse_config(text: &str, profile: Option<Profile>) -> Result<ExperimentConfig, ConfigError> {
    let entries = tokenize(text)?;
    let top = |key: &str| {
        entries
            .iter()
            .find(|e| e.section.is_empty() && e.key == key)
    };
    let scenario_entry = top("scenario").ok_or(ConfigError::MissingScenario)?;
    let kind = ScenarioKind::parse(&scenario_entry.value).ok_or_else(|| {
        err(
            scenario_entry.line,
            format!("unknown scenario `{}`", scenario_entry.value),
        )
    })?;
    let file_profile = match top("profile") {
        Some(e) => Some(
            Profile::parse(&e.value)
                .ok_or_else(|| err(e.line, format!("unknown profile `{}`", e.value)))?,
        ),
        None => None,
    };
    let profile = profile.or(file_profile).unwrap_or(Profile::Paper);
    let mut cfg = ExperimentConfig::defaults(kind, profile);
    // The double-slit dimension changes other defaults, so apply it first.
    if kind == ScenarioKind::DoubleSlit {
        if let Some(e) = entries
            .iter()
            .find(|e| e.section == "scenario" && e.key == "d")
        {
            let d: usize = parse_value(e, "an integer")?;
            cfg.params.slit.d = d;
            cfg.architecture.hidden = d;
        }
    }
    if matches!(kind, ScenarioKind::AsianPayoff | ScenarioKind::AsianRare)
        && profile == Profile::Paper
    {
        if let Some(e) = entries
            .iter()
            .find(|e| e.section == "scenario" && e.key == "steps")
        {
            let steps: usize = parse_value(e, "an integer")?;
            cfg.architecture.hidden = 2 * (steps - crate::flows::equal_split(steps));
        }
    }

    for e in &entries {
        match e.section.as_str() {
            "" => match e.key.as_str() {
                "scenario" | "profile" => {}
                "output_dir" => cfg.output_dir = PathBuf::from(&e.value),
                _ => return Err(unknown(e, TOP_KEYS)),
            },
            "train" => {
                let t = &mut cfg.train;
                match e.key.as_str() {
                    "iterations" => t.iterations = parse_value(e, "an integer")?,
                    "batch" => t.batch = parse_value(e, "an integer")?,
                    "learning_rate" => t.learning_rate = parse_float(e)?,
                    "weight_decay" => t.weight_decay = parse_float(e)?,
                    "seed" => t.seed = parse_value(e, "an integer")?,
                    "beta1" => t.beta1 = parse_float(e)?,
                    "beta2" => t.beta2 = parse_float(e)?,
                    "epsilon" => t.epsilon = parse_float(e)?,
                    "log_every" => t.log_every = parse_value(e, "an integer")?,
                    _ => return Err(unknown(e, TRAIN_KEYS)),
                }
            }
            "estimation" => match e.key.as_str() {
                "n" => cfg.estimation.n = parse_value(e, "an integer")?,
                "seed" => cfg.estimation.seed = parse_value(e, "an integer")?,
                _ => return Err(unknown(e, ESTIMATION_KEYS)),
            },
            "architecture" => {
                let allowed = kind.architecture_keys();
                if !allowed.contains(&e.key.as_str()) {
                    return Err(unknown(e, allowed));
                }
                let a = &mut cfg.architecture;
                match e.key.as_str() {
                    "couplings" => a.couplings = parse_value(e, "an integer")?,
                    "compositions" => a.compositions = parse_value(e, "an integer")?,
                    "hidden" => a.hidden = parse_value(e, "an integer")?,
                    "init_scale" => a.init_scale = parse_float(e)?,
                    _ => unreachable!(),
                }
            }
            "scenario" => {
                let allowed = kind.parameter_keys();
                if !allowed.contains(&e.key.as_str()) {
                    return Err(unknown(e, allowed));
                }
                let p = &mut cfg.params;
                match e.key.as_str() {
                    "gamma" => p.gamma = parse_float(e)?,
                    "alpha" => p.alpha = parse_float(e)?,
                    "convention" => {
                        p.convention = BridgeConvention::parse(&e.value).ok_or_else(|| {
                            err(
                                e.line,
                                format!(
                                    "`convention` expects as_printed or negated, got `{}`",
                                    e.value
                                ),
                            )
                        })?
                    }
                    "rate" => p.asian.rate = parse_float(e)?,
                    "sigma" => p.asian.sigma = parse_float(e)?,
                    "strike" => p.asian.strike = parse_float(e)?,
                    "spot" => p.asian.spot = parse_float(e)?,
                    "maturity" => p.asian.maturity = parse_float(e)?,
                    "steps" => p.asian.steps = parse_value(e, "an integer")?,
                    "delta" => p.asian.delta = parse_float(e)?,
                    "warm_start" => p.warm_start = parse_value(e, "an integer")?,
                    "d" => {}
                    "horizon" => p.slit.horizon = parse_float(e)?,
                    "x_slit" => p.slit.x_slit = parse_float(e)?,
                    "y_slit" => p.slit.y_slit = parse_float(e)?,
                    "w_slit" => p.slit.w_slit = parse_float(e)?,
                    "x_screen" => p.slit.x_screen = parse_float(e)?,
                    _ => unreachable!(),
                }
            }
            _ => unreachable!(),
        }
    }
    validate(&cfg)?;
    Ok(cfg)
}

fn unknown(e: &Entry, allowed: &[&str]) -> ConfigError {
    let place = if e.section.is_empty() {
        "at top level".to_string()
    } else {
        format!("in [{}]", e.section)
    };
    err(
        e.line,
        format!(
            "unknown key `{}` {place} (allowed: {})",
            e.key,
            allowed.join(", ")
        ),
    )
}

/// Checks everything that can be checked without training.
pub fn validate(cfg: &ExperimentConfig) -> Result<(), ConfigError> {
    cfg.train
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    cfg.target()
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    cfg.architecture_spec()
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    if cfg.estimation.n < 2 {
        return Err(ConfigError::Invalid(
            "estimation n must be at least 2".into(),
        ));
    }
    if cfg.architecture.compositions == 0 {
        return Err(ConfigError::Invalid("compositions must be positive".into()));
    }
    Ok(())
}

/// Writes every field of `cfg` in config syntax; parsing the result gives `cfg` back.
pub fn echo_config(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    let kind = cfg.scenario;
    let _ = writeln!(s, "scenario = {}", kind.name());
    let _ = writeln!(s, "profile = {}", cfg.profile.name());
    let _ = writeln!(s, "output_dir = {}", cfg.output_dir.display());
    let t = &cfg.train;
    let _ = writeln!(s, "\n[train]");
    let _ = writeln!(s, "iterations = {}", t.iterations);
    let _ = writeln!(s, "batch = {}", t.batch);
    let _ = writeln!(s, "learning_rate = {:?}", t.learning_rate);
    let _ = writeln!(s, "weight_decay = {:?}", t.weight_decay);
    let _ = writeln!(s, "seed = {}", t.seed);
    let _ = writeln!(s, "beta1 = {:?}", t.beta1);
    let _ = writeln!(s, "beta2 = {:?}", t.beta2);
    let _ = writeln!(s, "epsilon = {:?}", t.epsilon);
    let _ = writeln!(s, "log_every = {}", t.log_every);
    let _ = writeln!(s, "\n[estimation]");
    let _ = writeln!(s, "n = {}", cfg.estimation.n);
    let _ = writeln!(s, "seed = {}", cfg.estimation.seed);
    let _ = writeln!(s, "\n[architecture]");
    let a = &cfg.architecture;
    for key in kind.architecture_keys() {
        let _ = match *key {
            "couplings" => writeln!(s, "couplings = {}", a.couplings),
            "compositions" => writeln!(s, "compositions = {}", a.compositions),
            "hidden" => writeln!(s, "hidden = {}", a.hidden),
            "init_scale" => writeln!(s, "init_scale = {:?}", a.init_scale),
            _ => Ok(()),
        };
    }
    let keys = kind.parameter_keys();
    if !keys.is_empty() {
        let _ = writeln!(s, "\n[scenario]");
    }
    let p = &cfg.params;
    for key in keys {
        let _ = match *key {
            "gamma" => writeln!(s, "gamma = {:?}", p.gamma),
            "alpha" => writeln!(s, "alpha = {:?}", p.alpha),
            "convention" => writeln!(s, "convention = {}", p.convention.name()),
            "rate" => writeln!(s, "rate = {:?}", p.asian.rate),
            "sigma" => writeln!(s, "sigma = {:?}", p.asian.sigma),
            "strike" => writeln!(s, "strike = {:?}", p.asian.strike),
            "spot" => writeln!(s, "spot = {:?}", p.asian.spot),
            "maturity" => writeln!(s, "maturity = {:?}", p.asian.maturity),
            "steps" => writeln!(s, "steps = {}", p.asian.steps),
            "delta" => writeln!(s, "delta = {:?}", p.asian.delta),
            "warm_start" => writeln!(s, "warm_start = {}", p.warm_start),
            "d" => writeln!(s, "d = {}", p.slit.d),
            "horizon" => writeln!(s, "horizon = {:?}", p.slit.horizon),
            "x_slit" => writeln!(s, "x_slit = {:?}", p.slit.x_slit),
            "y_slit" => writeln!(s, "y_slit = {:?}", p.slit.y_slit),
            "w_slit" => writeln!(s, "w_slit = {:?}", p.slit.w_slit),
            "x_screen" => writeln!(s, "x_screen = {:?}", p.slit.x_screen),
            _ => Ok(()),
        };
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bare_scenario_gets_paper_defaults() {
        let cfg = parse_config("scenario = bridge\n", None).unwrap();
        assert_eq!(cfg.profile, Profile::Paper);
        assert_eq!(cfg.architecture.couplings, 5);
        assert_eq!(cfg.train.learning_rate, 1e-4);
        assert_eq!(cfg.train.weight_decay, 1e-4);
        assert_eq!(cfg.train.batch, 10_000);
        let spec = cfg.architecture_spec();
        assert!(spec.layers.contains(&crate::flows::LayerSpec::Permutation {
            perm: vec![2, 3, 4, 0, 1]
        }));
    }

    #[test]
    fn bad_value_names_its_line() {
        let e =
            parse_config("scenario = bridge\n[train]\nlearning_rate = banana\n", None).unwrap_err();
        assert!(matches!(e, ConfigError::Line { line: 3, .. }), "{e}");
    }

    #[test]
    fn empty_file_is_missing_scenario() {
        assert_eq!(parse_config("", None), Err(ConfigError::MissingScenario));
        assert_eq!(
            parse_config("# only a comment\n", None),
            Err(ConfigError::MissingScenario)
        );
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        assert!(parse_config("scenario = bridge\nlearning_rat = 1\n", None).is_err());
        assert!(parse_config("scenario = bridge\n[scenario]\ngamma = 1\n", None).is_err());
        assert!(parse_config("scenario = bridge\n[trian]\n", None).is_err());
        assert!(parse_config(
            "scenario = trunc-normal\n[architecture]\nhidden = 3\n",
            None
        )
        .is_err());
        assert!(parse_config("scenario = bridge\nscenario = bridge\n", None).is_err());
    }

    #[test]
    fn odd_double_slit_dimension_is_a_config_error() {
        let e = parse_config("scenario = double-slit\n[scenario]\nd = 21\n", None).unwrap_err();
        assert!(matches!(e, ConfigError::Invalid(_)), "{e}");
    }

    #[test]
    fn echo_round_trips_for_every_scenario_and_profile() {
        for kind in ScenarioKind::ALL {
            for profile in [Profile::Paper, Profile::Desk] {
                let mut cfg = ExperimentConfig::defaults(kind, profile);
                cfg.train.learning_rate = 0.1 + 0.2;
                cfg.train.epsilon = 1e-300;
                let text = echo_config(&cfg);
                let back = parse_config(&text, None).unwrap();
                assert_eq!(back, cfg, "{text}");
            }
        }
    }

    #[test]
    fn profile_flag_overrides_file() {
        let cfg = parse_config(
            "scenario = trunc-normal\nprofile = paper\n",
            Some(Profile::Desk),
        )
        .unwrap();
        assert_eq!(cfg.profile, Profile::Desk);
        assert_eq!(cfg.train.iterations, 10_000);
    }
}
