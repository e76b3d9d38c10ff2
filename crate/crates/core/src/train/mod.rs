//! Losses, optimiser, training loop and parameter files.

mod adam;
mod checkpoint;
mod loss;
mod trainer;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_expecting, save_checkpoint, MAGIC, VERSION,
};
pub use loss::{
    bce_loss, cce_loss, l1_loss, multitask_loss, multitask_loss_on_tape, soft_layout, soft_penalty,
    soft_penalty_on_tape, LossBreakdown, LossVars, PROB_CLAMP,
};
pub use trainer::{
    evaluate_loss, predict, prime_age_bias, train, train_step, train_with, write_log_csv, EpochLog, TrainConfig, TrainOutcome,
    AGE_BIAS, LOG_HEADER,
};
