//! The `train`, `estimate`, `sample`, `kl` and `report` subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use super::config::{echo_config, parse_config};
use super::scenario::{loss_floor, references, ExperimentConfig, Profile, ScenarioKind};
use super::{fmt_f64, read_file, write_file, CliError, Csv};
use crate::distributions::SimRng;
use crate::estimators::{
    conditional_on, crude_monte_carlo, expectation_on, kl_on, rare_prob_on, variance_reduction,
    EstimateReport, EstimatorError,
};
use crate::flows::{build_architecture, FlowModel, FlowSample};
use crate::targets::{asian_paths, double_slit_path, screen_crossing_y, Target};
use crate::training::{
    load_checkpoint, save_checkpoint, train, train_with, Checkpoint, TrainConfig, TrainingError,
    TrainingHistory, INIT_STREAM,
};

pub const MODEL_FILE: &str = "model.json";
pub const DIVERGED_FILE: &str = "model.diverged.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const ESTIMATE_FILE: &str = "estimate.csv";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const KL_FILE: &str = "kl.csv";

/// Stream of the estimation seed used for flow draws.
pub const IS_STREAM: u64 = 0;
/// Stream of the estimation seed used for crude Monte Carlo draws.
pub const CRUDE_STREAM: u64 = 1;

pub fn version_string() -> String {
    format!("rareflow {}", env!("CARGO_PKG_VERSION"))
}

pub fn load_config(path: &Path, profile: Option<Profile>) -> Result<ExperimentConfig, CliError> {
    let text = read_file(path)?;
    Ok(parse_config(&text, profile)?)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Loads a checkpoint and checks that it was trained for `cfg`'s scenario.
pub fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<FlowModel, CliError> {
    let ck = load_checkpoint(path)?;
    match ck.scenario.as_deref() {
        Some(name) if name == cfg.scenario.name() => {}
        other => {
            return Err(CliError::Usage(format!(
                "checkpoint {} was trained for {}, config is {}",
                path.display(),
                other.unwrap_or("no scenario"),
                cfg.scenario
            )))
        }
    }
    if ck.model.dim() != cfg.target().dim() {
        return Err(CliError::Usage(format!(
            "checkpoint dimension {} does not match the config ({})",
            ck.model.dim(),
            cfg.target().dim()
        )));
    }
    Ok(ck.model)
}

pub fn manifest(cfg: &ExperimentConfig) -> String {
    format!(
        "# {}\n# seed {}\n{}",
        version_string(),
        cfg.train.seed,
        echo_config(cfg)
    )
}

pub fn history_csv(history: &TrainingHistory) -> Csv {
    let mut csv = Csv::new(&["iteration", "loss", "smoothed_loss", "in_region_fraction"]);
    for r in &history.records {
        csv.raw_row([
            r.iteration.to_string(),
            fmt_f64(r.loss),
            fmt_f64(r.smoothed_loss),
            r.in_region.map(fmt_f64).unwrap_or_default(),
        ]);
    }
    csv
}

fn timing_csv(history: &TrainingHistory) -> Csv {
    let mut csv = Csv::new(&["iteration", "seconds"]);
    for (r, s) in history.records.iter().zip(&history.seconds) {
        csv.raw_row([r.iteration.to_string(), format!("{s:.3}")]);
    }
    csv
}

pub struct TrainOutcome {
    pub model: FlowModel,
    pub history: TrainingHistory,
}

/// Trains a fresh model for `cfg` and writes the model, loss history, timing
/// and manifest into `out`. On divergence the last finite parameters are
/// saved to [`DIVERGED_FILE`].
pub fn cmd_train(
    cfg: &ExperimentConfig,
    out: &Path,
    mut progress: impl FnMut(&str),
) -> Result<TrainOutcome, CliError> {
    let target = cfg.target();
    ensure_dir(out)?;
    let mut model = build_architecture(
        &cfg.architecture_spec(),
        &mut SimRng::with_stream(cfg.train.seed, INIT_STREAM),
    )?;
    write_file(&out.join(MANIFEST_FILE), &manifest(cfg))?;
    if cfg.params.warm_start > 0 {
        progress(&format!(
            "warm start: {} iterations on the unconditional bridge target",
            cfg.params.warm_start
        ));
        let warm = TrainConfig {
            iterations: cfg.params.warm_start,
            seed: !cfg.train.seed,
            ..cfg.train.clone()
        };
        train(&mut model, &Target::Bridge, &warm)?;
    }
    let total = cfg.train.iterations;
    let step = (total / 10).max(1);
    let result = train_with(&mut model, &target, &cfg.train, |r| {
        if r.iteration % step == 0 || r.iteration == total {
            let region = r
                .in_region
                .map(|f| format!(", in region {:.1}%", 100.0 * f))
                .unwrap_or_default();
            progress(&format!(
                "iteration {}/{}: smoothed loss {:.5}{region}",
                r.iteration, total, r.smoothed_loss
            ));
        }
    });
    let history = match result {
        Ok(h) => h,
        Err(TrainingError::Diverged {
            iteration,
            reason,
            snapshot,
        }) => {
            let path = out.join(DIVERGED_FILE);
            if model.set_params(snapshot).is_ok() {
                let ck = checkpoint(cfg, &model, iteration.saturating_sub(1));
                save_checkpoint(&ck, &path)?;
            }
            return Err(CliError::Numeric(format!(
                "training diverged at iteration {iteration}: {reason}; last parameters in {}",
                path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&checkpoint(cfg, &model, total), &out.join(MODEL_FILE))?;
    history_csv(&history).write(&out.join(HISTORY_FILE))?;
    timing_csv(&history).write(&out.join(TIMING_FILE))?;
    Ok(TrainOutcome { model, history })
}

fn checkpoint(cfg: &ExperimentConfig, model: &FlowModel, iterations: u64) -> Checkpoint {
    Checkpoint {
        model: model.clone(),
        scenario: Some(cfg.scenario.name().to_string()),
        train_config: Some(cfg.train.clone()),
        seed: cfg.train.seed,
        iterations,
    }
}

/// One line of `estimate.csv`. Spread columns are empty for derived
/// quantities such as variance ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRow {
    pub estimator: String,
    pub estimate: f64,
    pub sample_std: Option<f64>,
    pub rel_std_error: Option<f64>,
    pub n: usize,
    pub seed: u64,
}

impl EstimateRow {
    fn from_report(name: &str, r: &EstimateReport) -> Self {
        EstimateRow {
            estimator: name.to_string(),
            estimate: r.estimate,
            sample_std: Some(r.sample_std),
            rel_std_error: Some(r.rel_std_error),
            n: r.n,
            seed: r.seed,
        }
    }

    fn derived(name: &str, value: f64, n: usize, seed: u64) -> Self {
        EstimateRow {
            estimator: name.to_string(),
            estimate: value,
            sample_std: None,
            rel_std_error: None,
            n,
            seed,
        }
    }
}

pub const ESTIMATE_HEADER: [&str; 6] = [
    "estimator",
    "estimate",
    "sample_std",
    "rel_std_error",
    "n",
    "seed",
];

pub fn estimate_csv(rows: &[EstimateRow]) -> Csv {
    let mut csv = Csv::new(&ESTIMATE_HEADER);
    for r in rows {
        csv.raw_row([
            r.estimator.clone(),
            fmt_f64(r.estimate),
            r.sample_std.map(fmt_f64).unwrap_or_default(),
            r.rel_std_error.map(fmt_f64).unwrap_or_default(),
            r.n.to_string(),
            r.seed.to_string(),
        ]);
    }
    csv
}

/// Parses rows written by [`estimate_csv`].
pub fn parse_estimate_csv(text: &str) -> Result<Vec<EstimateRow>, CliError> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    if header != ESTIMATE_HEADER {
        return Err(CliError::Io(
            "estimate file has an unexpected header".into(),
        ));
    }
    let bad = |line: &str| CliError::Io(format!("malformed estimate row: {line}"));
    let opt = |s: &str| -> Result<Option<f64>, ()> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| ())
        }
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let c: Vec<&str> = line.split(',').collect();
            if c.len() != 6 {
                return Err(bad(line));
            }
            Ok(EstimateRow {
                estimator: c[0].to_string(),
                estimate: c[1].parse().map_err(|_| bad(line))?,
                sample_std: opt(c[2]).map_err(|_| bad(line))?,
                rel_std_error: opt(c[3]).map_err(|_| bad(line))?,
                n: c[4].parse().map_err(|_| bad(line))?,
                seed: c[5].parse().map_err(|_| bad(line))?,
            })
        })
        .collect()
}

fn log_p_fn(target: &Target) -> impl Fn(&[f64]) -> f64 + '_ {
    move |x| target.log_p(x).unwrap_or(f64::NEG_INFINITY)
}

fn indicator_fn(target: &Target) -> impl Fn(&[f64]) -> bool + '_ {
    move |x| matches!(target.indicator(x), Ok(Some(true)))
}

fn payoff_fn(target: &Target) -> impl Fn(&[f64]) -> f64 + '_ {
    move |x| target.payoff(x).ok().flatten().unwrap_or(0.0)
}

/// `ln f` of the optimal proposal `f / norm` for the scenario.
fn log_optimal(target: &Target) -> impl Fn(&[f64]) -> f64 + '_ {
    let log_p = log_p_fn(target);
    let ind = indicator_fn(target);
    let h = payoff_fn(target);
    move |x| match target {
        Target::Bridge | Target::AsianPayoff { .. } => log_p(x) + h(x).ln(),
        Target::BridgeConditional { .. } => {
            if ind(x) {
                log_p(x) + h(x).ln()
            } else {
                f64::NEG_INFINITY
            }
        }
        _ => {
            if ind(x) {
                log_p(x)
            } else {
                f64::NEG_INFINITY
            }
        }
    }
}

/// Importance-sampling and crude estimates for `cfg` using `model`.
pub fn compute_estimates(
    cfg: &ExperimentConfig,
    model: &FlowModel,
) -> Result<Vec<EstimateRow>, CliError> {
    let target = cfg.target();
    let (n, seed) = (cfg.estimation.n, cfg.estimation.seed);
    let sample = model.sample(n, &mut SimRng::with_stream(seed, IS_STREAM))?;
    let crude_x = target.sample_nominal(n, &mut SimRng::with_stream(seed, CRUDE_STREAM));
    let log_p = log_p_fn(&target);
    let ind = indicator_fn(&target);
    let h = payoff_fn(&target);
    let mut rows = Vec::new();
    let kl_norm = match &target {
        Target::Bridge | Target::AsianPayoff { .. } => {
            let is = expectation_on(&sample, &log_p, &h, seed)?;
            let crude = crude_monte_carlo(&crude_x, &h, seed)?;
            rows.push(EstimateRow::from_report("ell_is", &is));
            rows.push(EstimateRow::from_report("ell_crude", &crude));
            rows.push(EstimateRow::derived(
                "variance_reduction",
                variance_reduction(&crude, &is),
                n,
                seed,
            ));
            is.estimate
        }
        Target::BridgeConditional { .. } => {
            let cond = conditional_on(&sample, &log_p, &h, &ind, seed)?;
            let crude = crude_monte_carlo(&crude_x, |x| if ind(x) { 1.0 } else { 0.0 }, seed)?;
            rows.push(EstimateRow::from_report("c_is", &cond.probability));
            rows.push(EstimateRow::from_report("ell_cond_is", &cond.conditional));
            rows.push(EstimateRow::from_report("c_crude", &crude));
            rows.push(EstimateRow::derived(
                "variance_reduction",
                variance_reduction(&crude, &cond.probability),
                n,
                seed,
            ));
            cond.joint.estimate
        }
        _ => {
            let is = rare_prob_on(&sample, &log_p, &ind, seed)?;
            let crude = crude_monte_carlo(&crude_x, |x| if ind(x) { 1.0 } else { 0.0 }, seed)?;
            rows.push(EstimateRow::from_report("c_is", &is));
            rows.push(EstimateRow::from_report("c_crude", &crude));
            rows.push(EstimateRow::derived(
                "variance_reduction",
                variance_reduction(&crude, &is),
                n,
                seed,
            ));
            if matches!(target, Target::DoubleSlit { .. }) {
                let hits = (0..sample.len())
                    .map(|k| if ind(sample.x.row(k)) { 1.0 } else { 0.0 })
                    .collect();
                let rate = EstimateReport::from_summands(hits, seed)?;
                rows.push(EstimateRow::from_report("success_rate", &rate));
            }
            is.estimate
        }
    };
    rows.push(kl_row(&target, &sample, kl_norm, seed)?);
    Ok(rows)
}

/// KL divergence from the optimal proposal; `NaN` when the normalising
/// estimate is zero.
fn kl_row(
    target: &Target,
    sample: &FlowSample,
    norm: f64,
    seed: u64,
) -> Result<EstimateRow, CliError> {
    if norm > 0.0 {
        let r = kl_on(sample, log_optimal(target), norm, seed)?;
        Ok(EstimateRow::from_report("kl", &r))
    } else {
        Ok(EstimateRow::derived("kl", f64::NAN, sample.len(), seed))
    }
}

/// Runs [`compute_estimates`] on a saved checkpoint and writes `estimate.csv`.
pub fn cmd_estimate(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    out: &Path,
) -> Result<Vec<EstimateRow>, CliError> {
    let model = load_model(cfg, checkpoint)?;
    let rows = compute_estimates(cfg, &model)?;
    ensure_dir(out)?;
    estimate_csv(&rows).write(&out.join(ESTIMATE_FILE))?;
    Ok(rows)
}

/// Only the KL divergence, written to `kl.csv`.
pub fn cmd_kl(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    out: &Path,
) -> Result<EstimateRow, CliError> {
    let model = load_model(cfg, checkpoint)?;
    let row = compute_estimates(cfg, &model)?
        .into_iter()
        .find(|r| r.estimator == "kl")
        .ok_or_else(|| CliError::Numeric(EstimatorError::ZeroEstimate.to_string()))?;
    ensure_dir(out)?;
    estimate_csv(std::slice::from_ref(&row)).write(&out.join(KL_FILE))?;
    Ok(row)
}

/// Per-draw table for `n` flow samples.
pub fn samples_csv(
    cfg: &ExperimentConfig,
    model: &FlowModel,
    n: usize,
    seed: u64,
) -> Result<Csv, CliError> {
    let target = cfg.target();
    let dim = target.dim();
    let has_s = target
        .performance(&vec![0.0; dim])
        .map_or(true, |s| s.is_some());
    let has_region = target.gamma().is_some();
    let has_h = target.payoff(&vec![0.5; dim]).map_or(true, |h| h.is_some());
    let mut header: Vec<String> = (1..=dim).map(|i| format!("x_{i}")).collect();
    header.extend(["ln_q".to_string(), "ln_p".to_string()]);
    if has_s {
        header.push("S".into());
    }
    if has_region {
        header.push("in_region".into());
    }
    if has_h {
        header.push("H".into());
    }
    match &target {
        Target::AsianPayoff { spec } | Target::AsianRare { spec, .. } => {
            header.extend((0..=spec.steps).map(|i| format!("price_{i}")));
        }
        Target::DoubleSlit { spec, .. } => {
            header.extend((1..=spec.d / 2).map(|k| format!("path_x_{k}")));
            header.extend((1..=spec.d / 2).map(|k| format!("path_y_{k}")));
            header.push("screen_y".into());
        }
        _ => {}
    }
    let mut csv = Csv::new(&header);
    if n == 0 {
        return Ok(csv);
    }
    let sample = model.sample(n, &mut SimRng::with_stream(seed, IS_STREAM))?;
    for k in 0..n {
        let x = sample.x.row(k);
        let mut cells: Vec<String> = x.iter().map(|&v| fmt_f64(v)).collect();
        cells.push(fmt_f64(sample.log_q[k]));
        cells.push(fmt_f64(target.log_p(x)?));
        if has_s {
            cells.push(target.performance(x)?.map(fmt_f64).unwrap_or_default());
        }
        if has_region {
            let hit = target.indicator(x)? == Some(true);
            cells.push(u8::from(hit).to_string());
        }
        if has_h {
            cells.push(target.payoff(x)?.map(fmt_f64).unwrap_or_default());
        }
        match &target {
            Target::AsianPayoff { spec } | Target::AsianRare { spec, .. } => {
                let (prices, _) = asian_paths(x, spec)?;
                cells.extend(prices.into_iter().map(fmt_f64));
            }
            Target::DoubleSlit { spec, .. } => {
                let path = double_slit_path(x);
                cells.extend(path.iter().map(|p| fmt_f64(p.0)));
                cells.extend(path.iter().map(|p| fmt_f64(p.1)));
                cells.push(screen_crossing_y(x, spec).map(fmt_f64).unwrap_or_default());
            }
            _ => {}
        }
        csv.raw_row(cells);
    }
    Ok(csv)
}

pub fn cmd_sample(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    n: usize,
    seed: u64,
    out: &Path,
) -> Result<PathBuf, CliError> {
    let model = load_model(cfg, checkpoint)?;
    let csv = samples_csv(cfg, &model, n, seed)?;
    ensure_dir(out)?;
    let path = out.join(SAMPLES_FILE);
    csv.write(&path)?;
    Ok(path)
}

/// Human-readable summary of a run directory, comparing estimates with
/// reference values.
pub fn cmd_report(run_dir: &Path) -> Result<String, CliError> {
    let needed = [MANIFEST_FILE, HISTORY_FILE, ESTIMATE_FILE];
    let missing: Vec<&str> = needed
        .iter()
        .copied()
        .filter(|f| !run_dir.join(f).is_file())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Io(format!(
            "{} is missing {}",
            run_dir.display(),
            missing.join(", ")
        )));
    }
    let cfg = parse_config(&read_file(&run_dir.join(MANIFEST_FILE))?, None)?;
    let history = read_file(&run_dir.join(HISTORY_FILE))?;
    let rows = parse_estimate_csv(&read_file(&run_dir.join(ESTIMATE_FILE))?)?;

    let mut out = String::new();
    out.push_str(&format!(
        "scenario {} ({} profile)\n",
        cfg.scenario,
        cfg.profile.name()
    ));
    if let Some(last) = history.lines().skip(1).filter(|l| !l.is_empty()).last() {
        let cells: Vec<&str> = last.split(',').collect();
        out.push_str(&format!(
            "trained {} iterations, final smoothed loss {}\n",
            cells[0], cells[2]
        ));
        if let (Some(floor), Ok(smoothed)) = (loss_floor(&cfg), cells[2].parse::<f64>()) {
            out.push_str(&format!(
                "  loss floor -ln c = {floor:.5} (gap {:+.5})\n",
                smoothed - floor
            ));
        }
    }
    out.push_str("estimates:\n");
    for r in &rows {
        let rel = r
            .rel_std_error
            .map(|e| format!("  rel. s.e. {:.3}%", 100.0 * e))
            .unwrap_or_default();
        out.push_str(&format!(
            "  {:<20} {:<14.6e} n={} seed={}{rel}\n",
            r.estimator, r.estimate, r.n, r.seed
        ));
    }
    let refs = references(&cfg);
    if !refs.is_empty() {
        out.push_str("references:\n");
    }
    for rf in refs {
        let cmp = rows
            .iter()
            .find(|r| r.estimator == rf.estimator)
            .map(|r| {
                format!(
                    "  {} deviates {:+.2}%",
                    r.estimator,
                    100.0 * (r.estimate / rf.value - 1.0)
                )
            })
            .unwrap_or_default();
        out.push_str(&format!("  {:<34} {:<12.6e}{cmp}\n", rf.label, rf.value));
    }
    if cfg.scenario == ScenarioKind::DoubleSlit && cfg.params.slit.d != 100 {
        out.push_str(&format!(
            "  (published success rate is for d=100, this run uses d={})\n",
            cfg.params.slit.d
        ));
    }
    Ok(out)
}
