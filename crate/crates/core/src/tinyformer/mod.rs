//! Gated toy transformer encoder classifier.

mod config;
pub mod io;
mod mask;
mod model;
mod state;
mod train;

pub use config::{LayerLayout, ModelConfig, Module};
pub use mask::{active_budget, apply_masked_delta, MaskPair};
pub use model::{
    backward_sample, batch_grad_with, cross_entropy, forward, forward_sample, log_softmax, loss_and_grads,
    ones_gates, par_map_samples, sample_ce_grad, sample_grad_with, softmax, validate_sample, Gates, LossGrads,
    Sample, SampleCache, SampleGrad,
};
pub use state::{init_model, LayerOffsets, ModelState, ModuleMap, ParamLayout};
pub use train::{sgd_epochs, sgd_epochs_with, train, TrainHParams, TrainOutcome};
