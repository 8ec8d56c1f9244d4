//! Dense tensors, seeded randomness, parameter storage, a small MLP with
//! manual backward, AdamW, and the finite-difference gradient oracle.

pub mod adamw;
pub mod fd;
pub mod mlp;
pub mod params;
pub mod rng;
pub mod tensor;

pub use adamw::{AdamW, AdamWConfig, LrSchedule, LrScheduler, StepOutcome};
pub use fd::{finite_difference_grad, finite_difference_grad_scoped, FdGrads, FdScope};
pub use mlp::{Activation, Linear, MlpCache, MlpNet};
pub use params::{Param, ParamId, ParamStore};
pub use rng::SeededRng;
pub use tensor::{max_relative_error, mean_std, Tensor};
