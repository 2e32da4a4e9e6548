//! The training framework: loss, optimizer, plateau scheduling, dynamic loss
//! scaling, the epoch loop and checkpoints.

mod amp;
mod checkpoint;
mod loss;
mod optim;
mod scheduler;
mod trainer;

pub use amp::{AmpConfig, AmpState, StepOutcome};
pub use checkpoint::{
    checkpoint_model_config, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint,
    CHECKPOINT_VERSION,
};
pub use loss::{bce_with_logits, bce_with_logits_grad, bce_with_logits_tensor};
pub use optim::{Adam, Moments, OptimizerConfig};
pub use scheduler::{PlateauMode, SchedulerConfig, SchedulerState};
pub use trainer::{
    fit, train_epoch, train_step, validate, DataContext, EpochRecord, StepReport, TrainConfig,
    TrainHooks, TrainingState,
};
