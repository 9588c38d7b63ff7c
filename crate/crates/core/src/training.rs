//! KL-objective training with Adam, and checkpoint files.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::distributions::{DistributionError, SimRng};
use crate::flows::{build_architecture, ArchitectureSpec, FlowError, FlowModel};
use crate::targets::{Target, TargetError};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_FORMAT: &str = "rareflow-checkpoint";

/// Stream of a seed reserved for drawing training batches.
pub const TRAIN_STREAM: u64 = 1;
/// Stream of a seed reserved for parameter initialisation.
pub const INIT_STREAM: u64 = 0;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged {
        iteration: u64,
        reason: String,
        /// Parameters as they were before the failing step.
        snapshot: Vec<Tensor>,
    },
    #[error("non-finite gradient in parameter array {index}")]
    NonFiniteGradient { index: usize },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u64, expected: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
}

impl TrainingError {
    /// Failures caused by the numbers rather than inputs or files.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainingError::Diverged { .. } | TrainingError::NonFiniteGradient { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, TrainingError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            batch: 1000,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainingError::Config(m.to_string()));
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.epsilon >= 0.0) {
            return bad("epsilon must be non-negative");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        Ok(())
    }

    /// Number of logged points averaged by the smoothed loss.
    pub fn smoothing_window(&self) -> usize {
        (self.iterations as usize / 100).max(100)
    }
}

/// Adam moments, one pair per parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(shapes: &[&Tensor]) -> Self {
        let zeros: Vec<Tensor> = shapes.iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One Adam update with L2 weight decay folded into the gradient.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainingError::Config(format!(
            "{} parameter arrays, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(TrainingError::Config(format!(
                "gradient shape {:?} does not match parameter shape {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(TrainingError::NonFiniteGradient { index: i });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = grads[i].data();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j] + cfg.weight_decay * *w;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Recorded objective for one batch.
pub struct Objective {
    /// `L̂`, shape `[1]`.
    pub loss: Var,
    /// Generated points `ψ(z)`.
    pub x: Var,
    /// Parameter leaves in model order.
    pub params: Vec<Var>,
}

/// `L̂ = mean[ln p_Z(z) - ln|det Dψ(z)| - ln h(ψ(z))]` over the rows of `batch`.
pub fn estimate_objective(
    tape: &mut Tape,
    model: &FlowModel,
    target: &Target,
    batch: &Tensor,
) -> Result<Objective> {
    let z = tape.constant(batch.clone())?;
    let fw = model.forward_tape(tape, z, true)?;
    let log_pz = model.base().log_density_tape(tape, z)?;
    let log_h = target.log_h_tape(tape, fw.x)?;
    let a = tape.sub(log_pz, fw.logdet)?;
    let summands = tape.sub(a, log_h)?;
    let loss = tape.mean(summands)?;
    Ok(Objective {
        loss,
        x: fw.x,
        params: fw.params,
    })
}

/// Loss and gradients for one batch, in [`FlowModel::params`] order.
pub fn objective_and_gradients(
    model: &FlowModel,
    target: &Target,
    batch: &Tensor,
) -> Result<(f64, Vec<Tensor>, Tensor)> {
    let mut tape = Tape::new();
    let obj = estimate_objective(&mut tape, model, target, batch)?;
    let loss = tape.value(obj.loss).data()[0];
    let grads = tape.backward(obj.loss)?;
    let grads = obj
        .params
        .iter()
        .map(|&p| {
            grads
                .get(p)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(p).shape()))
        })
        .collect();
    Ok((loss, grads, tape.value(obj.x).clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    /// Completed iterations when the record was taken (1-based).
    pub iteration: u64,
    pub loss: f64,
    pub smoothed_loss: f64,
    /// Share of the batch inside the rare-event region, when there is one.
    pub in_region: Option<f64>,
}

/// Logged training progress. Wall-clock times are kept apart from the
/// records so that reruns compare equal.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingHistory {
    pub records: Vec<HistoryRecord>,
    pub seconds: Vec<f64>,
}

impl TrainingHistory {
    pub fn final_smoothed_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.smoothed_loss)
    }

    /// Mean raw loss over the first and last tenth of the records.
    pub fn decile_means(&self) -> Option<(f64, f64)> {
        let n = self.records.len();
        if n < 10 {
            return None;
        }
        let k = n / 10;
        let mean = |rs: &[HistoryRecord]| rs.iter().map(|r| r.loss).sum::<f64>() / rs.len() as f64;
        Some((mean(&self.records[..k]), mean(&self.records[n - k..])))
    }
}

fn in_region_fraction(target: &Target, x: &Tensor) -> Result<Option<f64>> {
    if target.gamma().is_none() {
        return Ok(None);
    }
    let mut hits = 0usize;
    for i in 0..x.rows() {
        if target.indicator(x.row(i))? == Some(true) {
            hits += 1;
        }
    }
    Ok(Some(hits as f64 / x.rows() as f64))
}

/// Runs `cfg.iterations` Adam steps on fresh base batches.
pub fn train(model: &mut FlowModel, target: &Target, cfg: &TrainConfig) -> Result<TrainingHistory> {
    train_with(model, target, cfg, |_| {})
}

/// As [`train`], calling `observe` on every logged record.
pub fn train_with(
    model: &mut FlowModel,
    target: &Target,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&HistoryRecord),
) -> Result<TrainingHistory> {
    cfg.validate()?;
    target.validate()?;
    if model.dim() != target.dim() {
        return Err(FlowError::Dimension {
            expected: target.dim(),
            actual: model.dim(),
        }
        .into());
    }
    let mut rng = SimRng::with_stream(cfg.seed, TRAIN_STREAM);
    let mut state = OptimizerState::new(&model.params());
    let mut history = TrainingHistory::default();
    let window = cfg.smoothing_window();
    let mut recent = std::collections::VecDeque::with_capacity(window);
    let mut recent_sum = 0.0;
    let start = Instant::now();

    for it in 1..=cfg.iterations {
        let batch = model.base().sample(cfg.batch, &mut rng);
        let diverged = |reason: String, model: &FlowModel| TrainingError::Diverged {
            iteration: it,
            reason,
            snapshot: model.params().into_iter().cloned().collect(),
        };
        let (loss, grads, x) = match objective_and_gradients(model, target, &batch) {
            Ok(v) => v,
            Err(
                e
                @ (TrainingError::Autodiff(_) | TrainingError::Flow(_) | TrainingError::Target(_)),
            ) => return Err(diverged(e.to_string(), model)),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(diverged(format!("loss {loss}"), model));
        }
        {
            let mut params = model.params_mut();
            if let Err(e) = adam_step(&mut params, &grads, &mut state, cfg) {
                drop(params);
                return Err(diverged(e.to_string(), model));
            }
        }
        if it % cfg.log_every == 0 || it == cfg.iterations {
            if recent.len() == window {
                recent_sum -= recent.pop_front().unwrap_or(0.0);
            }
            recent.push_back(loss);
            recent_sum += loss;
            let record = HistoryRecord {
                iteration: it,
                loss,
                smoothed_loss: recent_sum / recent.len() as f64,
                in_region: in_region_fraction(target, &x)?,
            };
            observe(&record);
            history.records.push(record);
            history.seconds.push(start.elapsed().as_secs_f64());
        }
    }
    Ok(history)
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    scenario: Option<String>,
    architecture: ArchitectureSpec,
    /// Parameter arrays of each layer, in layer order.
    parameters: Vec<Vec<Tensor>>,
    train_config: Option<TrainConfig>,
    seed: u64,
    iterations: u64,
}

/// A model plus the provenance needed to resume or reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: FlowModel,
    pub scenario: Option<String>,
    pub train_config: Option<TrainConfig>,
    pub seed: u64,
    pub iterations: u64,
}

/// Writes `checkpoint` as JSON via a temporary file and a rename.
pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        scenario: checkpoint.scenario.clone(),
        architecture: checkpoint.model.architecture().clone(),
        parameters: checkpoint
            .model
            .layers()
            .iter()
            .map(|l| l.params().into_iter().cloned().collect())
            .collect(),
        train_config: checkpoint.train_config.clone(),
        seed: checkpoint.seed,
        iterations: checkpoint.iterations,
    };
    let text =
        serde_json::to_string_pretty(&file).map_err(|e| TrainingError::Malformed(e.to_string()))?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(text.as_bytes())?;
        f.write_all(b"\n")?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    parse_checkpoint(&text)
}

pub fn parse_checkpoint(text: &str) -> Result<Checkpoint> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| TrainingError::Malformed(e.to_string()))?;
    if value.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(TrainingError::Malformed("missing format tag".into()));
    }
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| TrainingError::Malformed("missing version".into()))?;
    if version != u64::from(CHECKPOINT_VERSION) {
        return Err(TrainingError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let file: CheckpointFile =
        serde_json::from_value(value).map_err(|e| TrainingError::Malformed(e.to_string()))?;
    let mut model = build_architecture(&file.architecture, &mut SimRng::new(0))?;
    if file.parameters.len() != model.layers().len() {
        return Err(TrainingError::Malformed(format!(
            "{} parameter groups for {} layers",
            file.parameters.len(),
            model.layers().len()
        )));
    }
    model.set_params(file.parameters.into_iter().flatten().collect())?;
    Ok(Checkpoint {
        model,
        scenario: file.scenario,
        train_config: file.train_config,
        seed: file.seed,
        iterations: file.iterations,
    })
}
