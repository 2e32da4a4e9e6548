//! Training and evaluation toolkit for binary real/fake image classifiers.
//!
//! The crate covers the whole loop: indexing labeled image folders, planning
//! class-balanced epochs, preprocessing, Fourier amplitude/phase features,
//! single-logit classifiers (plain and hybrid spatial+frequency), the training
//! framework (BCE-with-logits, Adam, plateau scheduling, dynamic loss scaling,
//! checkpoints) and the evaluation metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod batch;
pub mod data;
pub mod error;
pub mod evalbench;
pub mod metrics;
pub mod models;
pub mod seed;
pub mod spectral;
pub mod toy;
pub mod training;

pub use error::{Error, Result};
pub use data::{
    build_index, plan_epoch, DatasetIndex, EpochPlan, EpochSpec, FileStore, ImageStore, ImageTensor, IndexReport,
    Label, LabeledRoot, MemoryStore, PreprocessConfig, SampleRecord, Split, SplitRule,
};
pub use evalbench::{bench_timing, evaluate, render_report, BenchConfig, TimingReport};
pub use metrics::{metrics_report, roc_curve, ConfusionCounts, MetricsReport, RocCurve};
pub use models::{build_model, BackboneId, ForwardMode, Model, ModelConfig, ModelInput, ParamReport};
pub use spectral::{fft2, inverse_fft2, spectral_stack, ComplexSpectrum, FrequencyInput, RealGrid, SpectralFeatures};
pub use training::{
    fit, load_checkpoint, save_checkpoint, AmpConfig, EpochRecord, OptimizerConfig, SchedulerConfig, TrainConfig,
    TrainingState,
};
