//! REINFORCE training with a greedy rollout baseline.

pub mod baseline;
pub mod checkpoint;
pub mod evaluate;

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::instances::{tour_cost, DynamicInstance, ProblemSpec};
use crate::model::rollout::{rollout_batch, taped_rollout, Chooser, Strategy, TapedRollout};
use crate::model::{DecodeMode, EncoderConfig, Model, ModelConfig};
use crate::params::{Adam, Gradients};
use crate::realtime::{rt_rollout_batch, rt_taped_rollout};
use crate::rng::{derive_seed, stream_rng, streams};

pub use baseline::{baseline_update, paired_t_test, PairedTest};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use evaluate::{evaluate, solve_all, summarize, EvalStrategy, EvalSummary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub problem: ProblemSpec,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub mode: DecodeMode,
    #[serde(default = "defaults::clip")]
    pub clip: f64,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::instances_per_epoch")]
    pub instances_per_epoch: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    /// Significance level of the baseline replacement test.
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::grad_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub seed: u64,
    /// Fixed set used for the reported validation cost.
    #[serde(default = "defaults::validation_size")]
    pub validation_size: usize,
    /// Fresh set drawn every epoch for the baseline replacement test.
    #[serde(default = "defaults::validation_size")]
    pub baseline_eval_size: usize,
    /// Decisions see only revealed slices (real-time policy).
    #[serde(default)]
    pub realtime: bool,
    /// Warm start from an existing checkpoint.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    /// Keep one checkpoint file per epoch instead of overwriting.
    #[serde(default)]
    pub keep_checkpoints: bool,
}

mod defaults {
    pub fn clip() -> f64 {
        10.0
    }
    pub fn epochs() -> usize {
        50
    }
    pub fn instances_per_epoch() -> usize {
        12800
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn learning_rate() -> f64 {
        1e-4
    }
    pub fn alpha() -> f64 {
        0.05
    }
    pub fn grad_clip() -> f64 {
        1.0
    }
    pub fn validation_size() -> usize {
        1000
    }
}

impl TrainConfig {
    pub fn new(problem: ProblemSpec) -> Self {
        TrainConfig {
            problem,
            encoder: EncoderConfig::default(),
            mode: DecodeMode::default(),
            clip: defaults::clip(),
            epochs: defaults::epochs(),
            instances_per_epoch: defaults::instances_per_epoch(),
            batch_size: defaults::batch_size(),
            learning_rate: defaults::learning_rate(),
            alpha: defaults::alpha(),
            grad_clip: defaults::grad_clip(),
            seed: 0,
            validation_size: defaults::validation_size(),
            baseline_eval_size: defaults::validation_size(),
            realtime: false,
            init_checkpoint: None,
            keep_checkpoints: false,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            kind: self.problem.kind,
            encoder: self.encoder.clone(),
            clip: self.clip,
            mode: self.mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        let positive = [
            ("epochs", self.epochs),
            ("instances_per_epoch", self.instances_per_epoch),
            ("batch_size", self.batch_size),
            ("validation_size", self.validation_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::param(format!("{name} must be positive")));
            }
        }
        if self.instances_per_epoch % self.batch_size != 0 {
            return Err(Error::param(format!(
                "instances_per_epoch {} is not divisible by batch_size {}",
                self.instances_per_epoch, self.batch_size
            )));
        }
        if self.baseline_eval_size < 2 {
            return Err(Error::param("baseline_eval_size must be at least 2"));
        }
        if !(self.learning_rate > 0.0 && self.grad_clip > 0.0) {
            return Err(Error::param("learning_rate and grad_clip must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::param("alpha must lie in (0, 1)"));
        }
        if self.realtime && self.mode != DecodeMode::Temporal {
            return Err(Error::param("real-time policies always read the newest slice; use mode = temporal"));
        }
        self.problem.generate(0).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_cost: f64,
    pub val_cost: f64,
    pub baseline_swapped: bool,
    pub wall_time_s: f64,
}

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Record of one run, written next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub crate_version: String,
    pub source_revision: Option<String>,
    pub started_unix_s: u64,
    #[serde(default)]
    pub initial_val_cost: Option<f64>,
    #[serde(default)]
    pub metrics: Vec<EpochMetrics>,
    #[serde(default)]
    pub checkpoints: Vec<PathBuf>,
    #[serde(default)]
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, config: serde_json::Value, seed: u64) -> Self {
        RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: command.into(),
            config,
            seed,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            source_revision: None,
            started_unix_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            initial_val_cost: None,
            metrics: Vec::new(),
            checkpoints: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn push_metrics(&mut self, m: EpochMetrics) {
        self.metrics.push(m);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// `mean((cost - baseline) * log_prob)`.
pub fn reinforce_loss(costs: &[f64], baselines: &[f64], log_probs: &[f64]) -> Result<f64> {
    if costs.len() != baselines.len() || costs.len() != log_probs.len() || costs.is_empty() {
        return Err(Error::param(format!(
            "loss inputs differ in length: {} costs, {} baselines, {} log-probabilities",
            costs.len(),
            baselines.len(),
            log_probs.len()
        )));
    }
    let total: f64 = costs
        .iter()
        .zip(baselines)
        .zip(log_probs)
        .map(|((c, b), l)| (c - b) * l)
        .sum();
    Ok(total / costs.len() as f64)
}

/// Accumulates the gradient of [`reinforce_loss`] into `grads`; baselines
/// enter only as constants.
pub fn reinforce_backward(rollout: &TapedRollout, costs: &[f64], baselines: &[f64], grads: &mut Gradients) {
    let b = costs.len() as f64;
    let seed = Mat::from_shape_fn((costs.len(), 1), |(i, _)| (costs[i] - baselines[i]) / b);
    rollout.tape.backward_params(rollout.log_probs, seed, grads);
}

/// Greedy costs of the (frozen) incumbent; no tape is kept.
pub fn baseline_rollout(incumbent: &Model, instances: &[DynamicInstance], realtime: bool) -> Result<Vec<f64>> {
    let sols = if realtime {
        rt_rollout_batch(incumbent, instances)?
    } else {
        rollout_batch(incumbent, instances, Strategy::Greedy, 0)?
    };
    Ok(sols.into_iter().map(|s| s.cost).collect())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub struct TrainOutcome {
    pub model: Model,
    pub manifest: RunManifest,
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    epoch: usize,
    batch: usize,
    instance_seeds: Vec<u64>,
    orders: &'a [Vec<usize>],
    costs: &'a [f64],
    baselines: &'a [f64],
    log_probs: &'a [f64],
}

/// Trains with real-time rollouts for both learner and baseline.
pub fn rt_train(config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut config = config.clone();
    config.realtime = true;
    train(&config, out_dir)
}

/// Runs the full training loop. With `out_dir`, writes checkpoints,
/// `metrics.jsonl` and `manifest.json` there.
pub fn train(config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let seed = config.seed;
    let rt = config.realtime;
    let command = if rt { "rt-train" } else { "train" };
    let mut manifest = RunManifest::new(command, serde_json::to_value(config)?, seed);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        // Start the metrics file afresh.
        fs::write(dir.join("metrics.jsonl"), b"")?;
    }
    let mut model = match &config.init_checkpoint {
        Some(path) => {
            let m = load_checkpoint(path)?;
            if m.config != config.model_config() {
                return Err(Error::param(format!(
                    "checkpoint {} has a different model configuration",
                    path.display()
                )));
            }
            m
        }
        None => Model::new(config.model_config(), derive_seed(seed, streams::INIT, 0))?,
    };
    let mut incumbent = model.clone();
    let mut adam = Adam::new(&model.store, config.learning_rate);
    let validation = config
        .problem
        .generate_set(seed, streams::VALIDATION, 0, config.validation_size)?;
    let initial = mean(&baseline_rollout(&model, &validation, rt)?);
    manifest.initial_val_cost = Some(initial);
    log::info!("{command}: initial validation cost {initial:.4}");
    let start = Instant::now();
    let batches = config.instances_per_epoch / config.batch_size;
    for epoch in 0..config.epochs {
        let mut train_costs = Vec::with_capacity(config.instances_per_epoch);
        for batch in 0..batches {
            let first = (epoch * config.instances_per_epoch + batch * config.batch_size) as u64;
            let insts = config
                .problem
                .generate_set(seed, streams::TRAIN_INSTANCES, first, config.batch_size)?;
            let refs: Vec<&DynamicInstance> = insts.iter().collect();
            let chooser = Chooser::Sample(
                (0..config.batch_size as u64)
                    .map(|i| stream_rng(seed, streams::SAMPLING, first + i))
                    .collect(),
            );
            let learner = if rt {
                rt_taped_rollout(&model, &refs, chooser)?
            } else {
                taped_rollout(&model, &refs, chooser)?
            };
            let costs: Vec<f64> = insts
                .iter()
                .zip(&learner.orders)
                .map(|(i, o)| tour_cost(i, o))
                .collect();
            let baselines = baseline_rollout(&incumbent, &insts, rt)?;
            let log_probs = learner.log_prob_values();
            let loss = reinforce_loss(&costs, &baselines, &log_probs)?;
            let mut grads = Gradients::zeros_like(&model.store);
            reinforce_backward(&learner, &costs, &baselines, &mut grads);
            if !loss.is_finite() || !grads.is_finite() {
                let dump = NonFiniteDump {
                    epoch,
                    batch,
                    instance_seeds: insts.iter().map(|i| i.seed).collect(),
                    orders: &learner.orders,
                    costs: &costs,
                    baselines: &baselines,
                    log_probs: &log_probs,
                };
                let mut detail = format!("loss {loss}; batch: {}", serde_json::to_string(&dump)?);
                if let Some(dir) = out_dir {
                    let path = dir.join("nonfinite-batch.json");
                    fs::write(&path, serde_json::to_vec_pretty(&dump)?)?;
                    detail = format!("loss {loss}; batch dumped to {}", path.display());
                }
                return Err(Error::NonFinite { epoch, batch, detail });
            }
            grads.clip_norm(config.grad_clip);
            adam.step(&mut model.store, &grads);
            train_costs.extend_from_slice(&costs);
        }
        let val_cost = mean(&baseline_rollout(&model, &validation, rt)?);
        let challenge = config.problem.generate_set(
            seed,
            streams::BASELINE_EVAL,
            (epoch * config.baseline_eval_size) as u64,
            config.baseline_eval_size,
        )?;
        let cand = baseline_rollout(&model, &challenge, rt)?;
        let inc = baseline_rollout(&incumbent, &challenge, rt)?;
        let swapped = baseline_update(&cand, &inc, config.alpha)?;
        if swapped {
            incumbent = model.clone();
        }
        let metrics = EpochMetrics {
            epoch,
            train_cost: mean(&train_costs),
            val_cost,
            baseline_swapped: swapped,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "{command}: epoch {epoch} train {:.4} val {:.4} swapped {swapped} ({:.1}s)",
            metrics.train_cost,
            metrics.val_cost,
            metrics.wall_time_s
        );
        if let Some(dir) = out_dir {
            let name = if config.keep_checkpoints {
                format!("epoch-{epoch:03}.ckpt.json")
            } else {
                "last.ckpt.json".to_string()
            };
            let path = dir.join(name);
            save_checkpoint(&path, &model, Some(epoch), Some(val_cost))?;
            if !manifest.checkpoints.contains(&path) {
                manifest.checkpoints.push(path);
            }
            let mut f = OpenOptions::new().append(true).open(dir.join("metrics.jsonl"))?;
            writeln!(f, "{}", serde_json::to_string(&metrics)?)?;
        }
        manifest.push_metrics(metrics);
        if let Some(dir) = out_dir {
            manifest.save(&dir.join("manifest.json"))?;
        }
    }
    if let Some(dir) = out_dir {
        let path = dir.join("model.ckpt.json");
        let last = manifest.metrics.last().map(|m| m.val_cost);
        save_checkpoint(&path, &model, Some(config.epochs - 1), last)?;
        manifest.checkpoints.push(path);
        manifest.save(&dir.join("manifest.json"))?;
    }
    Ok(TrainOutcome { model, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_formula() {
        let l = reinforce_loss(&[5.0, 3.0], &[4.0, 4.0], &[-1.0, -2.0]).unwrap();
        assert!((l - 0.5).abs() < 1e-15);
        assert_eq!(reinforce_loss(&[1.0, 2.0], &[1.0, 2.0], &[-3.0, -4.0]).unwrap(), 0.0);
        assert!(reinforce_loss(&[1.0], &[1.0, 2.0], &[0.0]).is_err());
    }

    #[test]
    fn config_rejects_indivisible_epoch() {
        let mut c = TrainConfig::new(ProblemSpec::new(crate::instances::ProblemKind::Tsp, 5));
        c.instances_per_epoch = 100;
        c.batch_size = 32;
        assert!(c.validate().is_err());
        c.instances_per_epoch = 96;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn config_toml_defaults() {
        let c: TrainConfig = serde_json::from_str(r#"{"problem":{"kind":"tsp","n":10}}"#).unwrap();
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.problem.delta_max, 0.1);
        assert_eq!(c.problem.horizon(), 11);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"problem":{"kind":"tsp","n":10},"bogus":1}"#).is_err());
    }
}
