//! Loss, metrics, optimizer, learning-rate schedule, and the training loop.

mod adam;
mod loss;
mod run;
mod schedule;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use loss::{l2_loss, mean_squared_error, psnr, psnr_from_mse};
pub use run::{
    evaluate, load_sample, train, train_step, write_metrics, EvalReport, EvalRow, EvalSummary, MetricRow, Sample,
    TrainOutcome, METRICS_HEADER,
};
pub use schedule::{lr_at_epoch, Schedule, Start, TrainConfig, DEFAULT_GAMMA};
