//! Multi-reward group-relative policy optimization.

pub mod advantage;
pub mod surrogate;
pub mod train;

pub use advantage::{
    aggregate_and_batch_normalize, group_advantages, normalize_joint, normalize_per_reward,
    standardize, AdvantageTable, BatchStats, NormalizationMode, DEGENERATE_STD,
};
pub use surrogate::{
    grpo_surrogate, grpo_surrogate_value, importance_ratio, included_steps, total_loss,
    velocity_kl, velocity_kl_backward, Ratio, SurrogateConfig, SurrogateInput, SurrogateStats,
    RATIO_EXPONENT_LIMIT,
};
pub use train::{
    collect_batch, rl_train_step, rollout_groups, summarize_rewards, GrpoConfig, PolicyBundle,
    RolloutBatch, StepMetrics,
};
