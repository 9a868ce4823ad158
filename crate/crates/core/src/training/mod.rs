//! Adamax with exponential decay, masked losses and the ELBO, metrics,
//! and the epoch loop.

mod fit;
mod loss;
mod metrics;
mod optim;

pub use fit::{
    evaluate, fit, heldout_errors, mean_loss, train_epoch, FitResult, MetricsRecord, SampleError,
    Task, TrainingConfig,
};
pub use loss::{
    bce_with_logits, cross_entropy, elbo, gaussian_nll_sum, kl_standard_normal, masked_mse,
    masked_mse_seq, masked_sse, KlSchedule, LossKind, LossSpec, Target,
};
pub use metrics::{accuracy, argmax_rows, auc};
pub use optim::{clip_grad_norm, AdamaxState, BETA1, BETA2};

#[cfg(test)]
mod tests;
