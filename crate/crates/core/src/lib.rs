//! Learning deterministic state-space models with multiple shooting.
//!
//! The crate trains a transition network `f` and an observation network `g`
//! from noisy, partially observed measurement sequences. Each training
//! trajectory is split into sub-trajectories whose initial states (shooting
//! nodes) are optimized jointly with the network weights; continuity between
//! consecutive sub-trajectories is enforced with a quadratic penalty whose
//! weight is raised once during training. Trained models are used for
//! forecasting through an unscented Kalman filter that runs directly on the
//! learned networks.
//!
//! Module map:
//!
//! * [`autodiff`]: dense tensors and reverse-mode differentiation;
//! * [`models`]: transition/observation families and checkpoints;
//! * [`shooting`]: segmentation, shooting nodes and the penalized losses;
//! * [`optim`]: Adam, the penalty/learning-rate schedule and the training loop;
//! * [`systems`]: pendulum and Lorenz data generation, dataset files;
//! * [`inference`]: the unscented Kalman filter;
//! * [`eval`]: forecasting metrics and long-rollout diagnostics.

pub mod autodiff;
pub mod eval;
pub mod inference;
pub mod models;
pub mod optim;
pub mod shooting;
pub mod systems;
