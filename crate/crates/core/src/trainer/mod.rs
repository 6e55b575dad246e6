//! Pretraining (SAP + MLM), DAgger fine-tuning, GRPO reinforcement
//! fine-tuning, evaluation and checkpoint selection.

mod config;
mod dagger;
mod driver;
mod eval;
mod grpo;
mod pretrain;
mod rollout;

pub use config::{LrSchedule, Stage, TemperatureSchedule, TrainConfig, PRETRAIN_SOURCES, SCHEMA_VERSION};
pub use dagger::{dagger_rollout, sft_update, LabeledStep, LabeledTrajectory};
pub use driver::{grpo_params, run_stage, EvalPoint, LogRecord, MemorySink, StageOutcome, StageSink};
pub use eval::{evaluate, evaluate_expert, navigation_score, select_checkpoint};
pub use grpo::{
    clipped_objective, compute_advantages, grpo_pass, grpo_sample_group, grpo_update, k3, reference_logps,
    sampling_dropout, update_dropout, GrpoLoss, GrpoParams, Rollout, StepTerms, TrajectoryGroup, RFT_FROZEN,
    RFT_TRAINABLE,
};
pub use pretrain::{
    mask_tokens, pretrain_accuracy, pretrain_step, pretrain_task, sap_teacher_forced, PretrainLoss, PretrainTask,
};
pub use rollout::{
    action_to_token, expert_record, graph_task, policy_rollout, teacher_states, token_to_action, DecisionStep,
};
