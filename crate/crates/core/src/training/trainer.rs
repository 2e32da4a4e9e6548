use std::collections::BTreeSet;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::amp::{AmpConfig, AmpState, StepOutcome};
use super::loss::{bce_with_logits, bce_with_logits_tensor};
use super::optim::{Adam, OptimizerConfig};
use super::scheduler::{SchedulerConfig, SchedulerState};
use crate::batch::{assemble_batch, infer_logits, sigmoid};
use crate::data::{plan_epoch, DatasetIndex, EpochPlan, EpochSpec, ImageStore, PreprocessConfig, Split};
use crate::error::{Error, Result};
use crate::metrics::{metrics_report, MetricsReport};
use crate::models::{build_model, ForwardMode, Model, ModelConfig, Param};
use crate::seed::{derive_seed, STREAM_DROPOUT, STREAM_FLIP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: u64,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub scheduler: SchedulerConfig,
    pub amp: AmpConfig,
    /// Decision threshold for validation metrics.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            scheduler: SchedulerConfig::default(),
            amp: AmpConfig::default(),
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_metrics: Option<MetricsReport>,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub loss_scale: f64,
    pub skipped_steps: u64,
}

/// Everything needed to continue training exactly where it stopped.
pub struct TrainingState {
    pub model: Model,
    pub optimizer: Adam,
    pub scheduler: SchedulerState,
    pub amp: AmpState,
    /// Epochs completed; also the number of the next epoch to plan.
    pub epoch: u64,
    pub global_step: u64,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
}

impl TrainingState {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        Self::with_model(build_model(model_cfg)?, cfg)
    }

    pub fn with_model(model: Model, cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            model,
            optimizer: Adam::new(cfg.optimizer.clone())?,
            scheduler: SchedulerState::new(&cfg.scheduler, cfg.optimizer.initial_lr)?,
            amp: AmpState::new(&cfg.amp)?,
            epoch: 0,
            global_step: 0,
            seed: cfg.seed,
            history: Vec::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.scheduler.current_lr
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.history
            .iter()
            .filter_map(|h| h.val_loss)
            .min_by(f64::total_cmp)
    }
}

/// Data the training loop reads from.
pub struct DataContext<'a> {
    pub index: &'a DatasetIndex,
    pub store: &'a dyn ImageStore,
    pub preprocess: &'a PreprocessConfig,
    pub epoch_spec: &'a EpochSpec,
    pub threshold: f64,
}

/// Test hooks for the training loop.
#[derive(Debug, Clone, Default)]
pub struct TrainHooks {
    /// Global steps whose gradients are overwritten with +Inf after unscaling.
    pub overflow_steps: BTreeSet<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub outcome: StepOutcome,
}

/// One optimization step on a prepared batch.
pub fn train_step(
    state: &mut TrainingState,
    batch: &crate::batch::Batch,
    hooks: &TrainHooks,
) -> Result<StepReport> {
    let mode = ForwardMode::train(derive_seed(state.seed, &[STREAM_DROPOUT, state.global_step]))
        .with_dtype(state.amp.compute_dtype());
    let logits = state.model.forward(&batch.input, &mode)?;
    let b = batch.labels.len();
    let targets = Tensor::from_vec(batch.targets(), (b, 1), &Device::Cpu)?;
    let loss = bce_with_logits_tensor(&logits, &targets)?;
    let loss_value = loss.to_scalar::<f32>()? as f64;
    if !loss_value.is_finite() && !state.amp.enabled {
        return Err(Error::Diverged(format!(
            "loss is {loss_value} at step {} (epoch {}, lr {})",
            state.global_step,
            state.epoch,
            state.lr()
        )));
    }

    let scale = state.amp.scale();
    let scaled = if scale != 1.0 { (&loss * scale)? } else { loss };
    let grad_store = scaled.backward()?;
    let mut grads: Vec<(Arc<Param>, Tensor)> = Vec::new();
    let mut non_finite = !loss_value.is_finite();
    for p in state.model.store().params() {
        if !p.is_trainable() {
            continue;
        }
        let Some(g) = grad_store.get(p.var().as_tensor()) else {
            continue;
        };
        let mut g = g.to_dtype(DType::F32)?;
        if scale != 1.0 {
            g = (g / scale)?;
        }
        grads.push((p.clone(), g));
    }
    if hooks.overflow_steps.contains(&state.global_step) {
        if let Some((_, g)) = grads.first_mut() {
            *g = g.ones_like()?.affine(0.0, f64::INFINITY)?;
        }
    }
    for (_, g) in &grads {
        if !g.sum_all()?.to_scalar::<f32>()?.is_finite() {
            non_finite = true;
            break;
        }
    }
    if non_finite && !state.amp.enabled {
        return Err(Error::Diverged(format!(
            "non-finite gradient at step {} (epoch {})",
            state.global_step, state.epoch
        )));
    }
    if !non_finite {
        state.optimizer.step(&grads, state.lr())?;
    }
    let outcome = state.amp.update(non_finite);
    state.global_step += 1;
    Ok(StepReport {
        loss: loss_value,
        outcome,
    })
}

/// Validation loss and metrics over the val split, if it has samples.
pub fn validate(state: &TrainingState, data: &DataContext<'_>) -> Result<Option<(f64, Option<MetricsReport>)>> {
    let records = data.index.split_records(Split::Val);
    if records.is_empty() {
        return Ok(None);
    }
    let logits = infer_logits(&state.model, &records, data.store, data.preprocess, data.epoch_spec.batch_size)?;
    let labels: Vec<u8> = records.iter().map(|r| r.label.as_u8()).collect();
    let targets: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let loss = bce_with_logits(&logits, &targets)?;
    let scores: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let metrics = match metrics_report(&scores, &labels, data.threshold) {
        Ok(m) => Some(m),
        Err(Error::SingleClass) => None,
        Err(e) => return Err(e),
    };
    Ok(Some((loss, metrics)))
}

/// Runs every batch of `plan` in order, then validates and steps the
/// scheduler. Without a val split the scheduler follows the train loss.
pub fn train_epoch(
    state: &mut TrainingState,
    plan: &EpochPlan,
    data: &DataContext<'_>,
    hooks: &TrainHooks,
) -> Result<EpochRecord> {
    if plan.epoch_number != state.epoch {
        return Err(Error::Wiring(format!(
            "plan is for epoch {} but the state is at epoch {}",
            plan.epoch_number, state.epoch
        )));
    }
    let lr = state.lr();
    let skipped_before = state.amp.skipped_steps;
    let records = data.index.records();
    let mut loss_sum = 0.0;
    for (bi, planned) in plan.batches.iter().enumerate() {
        let members: Vec<_> = planned.members.iter().map(|&p| &records[p]).collect();
        let batch = assemble_batch(
            &members,
            data.store,
            data.preprocess,
            true,
            |slot| derive_seed(plan.epoch_seed, &[STREAM_FLIP, bi as u64, slot as u64]),
            state.model.is_hybrid(),
        )?;
        loss_sum += train_step(state, &batch, hooks)?.loss;
    }
    let train_loss = loss_sum / plan.batches.len().max(1) as f64;

    let (val_loss, val_metrics) = match validate(state, data)? {
        Some((l, m)) => (Some(l), m),
        None => {
            log::warn!("no validation samples; scheduling on train loss");
            (None, None)
        }
    };
    let monitored = val_loss.unwrap_or(train_loss);
    if state.scheduler.step(monitored)? {
        log::info!("plateau: learning rate reduced to {:e}", state.lr());
    }
    let record = EpochRecord {
        epoch: state.epoch,
        train_loss,
        val_loss,
        val_metrics,
        lr,
        loss_scale: state.amp.loss_scale,
        skipped_steps: state.amp.skipped_steps - skipped_before,
    };
    state.history.push(record.clone());
    state.epoch += 1;
    Ok(record)
}

/// Plans and trains epochs until `epochs` are complete, calling
/// `after_epoch` with each record (for checkpointing and logging).
pub fn fit(
    state: &mut TrainingState,
    data: &DataContext<'_>,
    epochs: u64,
    hooks: &TrainHooks,
    mut after_epoch: impl FnMut(&TrainingState, &EpochRecord) -> Result<()>,
) -> Result<()> {
    while state.epoch < epochs {
        let plan = plan_epoch(data.index, data.epoch_spec, state.epoch)?;
        let record = train_epoch(state, &plan, data, hooks)?;
        log::info!(
            "epoch {} train_loss {:.5} val_loss {} lr {:e}",
            record.epoch,
            record.train_loss,
            record.val_loss.map_or("-".into(), |v| format!("{v:.5}")),
            record.lr
        );
        after_epoch(state, &record)?;
    }
    Ok(())
}
