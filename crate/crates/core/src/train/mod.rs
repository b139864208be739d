//! Two-stage training: plans and schedules, AdamW with clipping, and the
//! resumable stage loop.

mod optim;
mod plan;
mod run;

pub use optim::{clip_grad_norm, grad_norm, AdamW, Grads};
pub use plan::{Overflow, Schedule, TrainPlan};
pub use run::{
    apply_gradients, instruction_loss, loss_and_grads, prepare_examples, run_stage, select_for_stage, train_step,
    Example, RunOptions, StageReport, StepMetrics, LOSS_FILE, MODEL_FILE, STATE_FILE,
};
