//! Single-logit classifiers: a spatial backbone with a dropout + linear head,
//! and a hybrid that also runs a small convolutional branch over the Fourier
//! amplitude/phase input and fuses the two feature vectors by concatenation.

mod backbone;
mod classifier;
mod config;
mod layers;

pub use backbone::{Backbone, EfficientNet, TinyCnn};
pub use classifier::{
    build_classifier, build_hybrid, build_model, trainable_parameter_report, BlockGradient,
    Classifier, ForwardMode, FrequencyBranch, Head, HybridClassifier, Model, ModelInput,
    ParamReport,
};
pub use config::{BackboneId, FreqBranchConfig, Fusion, ModelConfig};
pub use layers::{dropout, sigmoid, Buffer, Param, ParamStore};
