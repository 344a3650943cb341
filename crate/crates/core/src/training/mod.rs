//! Joint optimization under the freezing policy, with mode-dependent prompts.

mod freeze;
mod gating;
mod loss;
mod pipeline;
mod trainer;

pub use freeze::{build_trainable_set, classify, FreezePolicy, ParamGroup, TrainableSet};
pub use gating::{check_gradient_gating, GatingReport};
pub use loss::{segmentation_loss, sigmoid, LossOutput, LossSwitches, LossValues, LOGIT_CLAMP, SMOOTH};
pub use pipeline::{logits_to_arrays, run_batch, run_mode_pipeline, BatchOutput, PipelineItem, PipelineResult, PromptConfig};
pub use trainer::{changed_parameters, parameter_report, train, train_model, BudgetConfig, EpochRecord, TrainConfig, TrainOutcome};
