//! Flow-matching path, samplers, velocity model and loss.

pub mod loss;
pub mod model;
pub mod path;
pub mod sample;

pub use loss::{fm_loss, fm_loss_value, fm_loss_with_draws, FmDraws, FmExample};
pub use model::{
    time_features, CondBatch, CondCache, Condition, Conditioner, ConditioningSpec, ModelSpec,
    Policy, VelocityModel, TIME_FEATURES,
};
pub use path::{
    interpolate, log_prob, mean_coefficients, noise_scale, ode_step, predict_endpoints, sde_step,
    step_mean, target_velocity, time_grid, EndpointPrediction, FlowStep,
};
pub use sample::{
    rollout, sample_group, sample_ode, sample_trajectories, write_trajectory_csv, Trajectory,
};
