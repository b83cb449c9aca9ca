//! Adam, the penalty/learning-rate schedule and the training loop.
//!
//! Training runs shuffled mini-batches over trajectories. Each batch takes
//! one Adam step on the model weights and on the shooting nodes of the
//! trajectories in the batch (every trajectory owns its node moments, so
//! untouched nodes keep their state bit for bit). Schedule events fire at
//! the start of an epoch:
//!
//! | epoch          | actions                                  |
//! |----------------|------------------------------------------|
//! | `bump_epoch`   | α ← α̃, reset all Adam moments, lr ÷ 10   |
//! | `decay_epoch`  | lr ÷ 10                                  |

mod history;

pub use history::{EpochRecord, HistoryError, TrainHistory, HISTORY_HEADER};

use crate::autodiff::Tensor;
use crate::models::{init_params, ModelError, ModelParameters, ObservationSpec, TransitionSpec};
use crate::shooting::{
    batch_gradients, init_nodes, NodeInit, Segmentation, ShootingError, ShootingNodeStore,
};
use crate::systems::TrajectoryDataset;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use std::time::Instant;
use thiserror::Error;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("shape mismatch: parameter {param:?} vs gradient {grad:?}")]
    ShapeMismatch { param: Vec<usize>, grad: Vec<usize> },
    #[error("expected {expected} gradients, got {got}")]
    GradientCount { expected: usize, got: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch}{}: {message}",
        trajectory.map(|t| format!(", trajectory {t}")).unwrap_or_default()
    )]
    NonFinite {
        epoch: usize,
        batch: usize,
        trajectory: Option<usize>,
        message: String,
    },
    #[error(transparent)]
    Shooting(#[from] ShootingError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// First and second moments of one tensor plus its step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    first: Tensor,
    second: Tensor,
    step: u64,
}

impl AdamMoments {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            first: Tensor::zeros(shape),
            second: Tensor::zeros(shape),
            step: 0,
        }
    }

    pub fn reset(&mut self) {
        self.first.data_mut().fill(0.0);
        self.second.data_mut().fill(0.0);
        self.step = 0;
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first(&self) -> &Tensor {
        &self.first
    }

    pub fn second(&self) -> &Tensor {
        &self.second
    }

    pub fn is_zero(&self) -> bool {
        self.step == 0
            && self
                .first
                .data()
                .iter()
                .chain(self.second.data())
                .all(|v| *v == 0.0)
    }
}

/// One bias-corrected Adam update of `value` in place.
pub fn adam_step(
    cfg: &AdamConfig,
    moments: &mut AdamMoments,
    value: &mut Tensor,
    grad: &Tensor,
) -> Result<(), OptimError> {
    if value.shape() != grad.shape() || moments.first.shape() != grad.shape() {
        return Err(OptimError::ShapeMismatch {
            param: value.shape().to_vec(),
            grad: grad.shape().to_vec(),
        });
    }
    moments.step += 1;
    let t = moments.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let m = moments.first.data_mut();
    let v = moments.second.data_mut();
    for (i, (p, g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam state for every tensor of a [`ModelParameters`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    moments: Vec<AdamMoments>,
}

impl AdamState {
    pub fn new(params: &ModelParameters, config: AdamConfig) -> Self {
        Self {
            config,
            moments: params
                .tensors()
                .iter()
                .map(|t| AdamMoments::new(t.var.value.shape()))
                .collect(),
        }
    }

    pub fn reset(&mut self) {
        self.moments.iter_mut().for_each(AdamMoments::reset);
    }

    pub fn moments(&self) -> &[AdamMoments] {
        &self.moments
    }

    /// Applies `grads` (canonical tensor order) to `params`.
    pub fn step(
        &mut self,
        params: &mut ModelParameters,
        grads: &[Tensor],
    ) -> Result<(), OptimError> {
        if grads.len() != self.moments.len() {
            return Err(OptimError::GradientCount {
                expected: self.moments.len(),
                got: grads.len(),
            });
        }
        for ((t, m), g) in params
            .tensors_mut()
            .iter_mut()
            .zip(&mut self.moments)
            .zip(grads)
        {
            adam_step(&self.config, m, &mut t.var.value, g)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub bump_epoch: usize,
    pub alpha_initial: f64,
    pub alpha_tilde: f64,
    pub decay_epoch: usize,
    pub lr: f64,
    pub decay_factor: f64,
    pub batch_size: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 1000,
            bump_epoch: 200,
            alpha_initial: 1.0,
            alpha_tilde: 1e3,
            decay_epoch: 600,
            lr: 1e-3,
            decay_factor: 10.0,
            batch_size: 40,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleAction {
    SetAlpha(f64),
    ResetOptimizer,
    ScaleLr(f64),
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: &str| Err(OptimError::InvalidSchedule(m.to_string()));
        if !(0 < self.bump_epoch
            && self.bump_epoch < self.decay_epoch
            && self.decay_epoch <= self.epochs)
        {
            return bad("need 0 < bump_epoch < decay_epoch <= epochs");
        }
        if !(self.lr > 0.0 && self.decay_factor > 0.0) {
            return bad("learning rate and decay factor must be positive");
        }
        if !(self.alpha_initial > 0.0 && self.alpha_tilde >= self.alpha_initial) {
            return bad("need 0 < alpha_initial <= alpha_tilde");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        Ok(())
    }

    /// Actions applied at the start of `epoch` (1-based).
    pub fn schedule_event(&self, epoch: usize) -> Vec<ScheduleAction> {
        if epoch == self.bump_epoch {
            vec![
                ScheduleAction::SetAlpha(self.alpha_tilde),
                ScheduleAction::ResetOptimizer,
                ScheduleAction::ScaleLr(1.0 / self.decay_factor),
            ]
        } else if epoch == self.decay_epoch {
            vec![ScheduleAction::ScaleLr(1.0 / self.decay_factor)]
        } else {
            Vec::new()
        }
    }

    /// `(α, lr)` in force during `epoch`.
    pub fn state_at(&self, epoch: usize) -> (f64, f64) {
        let mut alpha = self.alpha_initial;
        let mut lr = self.lr;
        for e in 1..=epoch {
            for a in self.schedule_event(e) {
                match a {
                    ScheduleAction::SetAlpha(v) => alpha = v,
                    ScheduleAction::ScaleLr(f) => lr *= f,
                    ScheduleAction::ResetOptimizer => {}
                }
            }
        }
        (alpha, lr)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub schedule: TrainSchedule,
    pub seed: u64,
    /// Trajectories per independently evaluated group inside a batch. The
    /// result depends on this value but not on the thread count.
    pub group_size: usize,
}

impl TrainOptions {
    pub fn new(schedule: TrainSchedule, seed: u64) -> Self {
        Self {
            schedule,
            seed,
            group_size: 10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParameters,
    pub nodes: ShootingNodeStore,
    pub history: TrainHistory,
}

/// Seed offset separating the shuffling stream from weight initialization.
const SHUFFLE_STREAM: u64 = 0x5EED_5F1E;

/// Initializes a model and nodes from `seed`, then trains them.
#[allow(clippy::too_many_arguments)]
pub fn train(
    dataset: &TrajectoryDataset,
    tspec: &TransitionSpec,
    ospec: &ObservationSpec,
    segmentation: Segmentation,
    node_init: NodeInit,
    options: &TrainOptions,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, OptimError> {
    let params = init_params(tspec, ospec, options.seed)?;
    let nodes = init_nodes(dataset, segmentation, node_init, ospec, tspec.state_dim())?;
    train_from(dataset, params, nodes, options, on_epoch)
}

/// Trains existing parameters and nodes under `options.schedule`.
pub fn train_from(
    dataset: &TrajectoryDataset,
    mut params: ModelParameters,
    mut nodes: ShootingNodeStore,
    options: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, OptimError> {
    let schedule = &options.schedule;
    schedule.validate()?;
    if nodes.len() != dataset.len() {
        return Err(OptimError::Shooting(ShootingError::Shape(format!(
            "{} node sets for {} trajectories",
            nodes.len(),
            dataset.len()
        ))));
    }
    if schedule.batch_size > dataset.len() {
        return Err(OptimError::InvalidSchedule(format!(
            "batch size {} exceeds the {} training trajectories",
            schedule.batch_size,
            dataset.len()
        )));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(options.seed ^ SHUFFLE_STREAM);
    let mut adam = AdamState::new(
        &params,
        AdamConfig {
            lr: schedule.lr,
            ..AdamConfig::default()
        },
    );
    let mut alpha = schedule.alpha_initial;
    let mut history = TrainHistory::default();
    let start = Instant::now();
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 1..=schedule.epochs {
        for action in schedule.schedule_event(epoch) {
            match action {
                ScheduleAction::SetAlpha(a) => alpha = a,
                ScheduleAction::ResetOptimizer => {
                    adam.reset();
                    nodes.reset_moments();
                }
                ScheduleAction::ScaleLr(f) => adam.config.lr *= f,
            }
        }
        order.shuffle(&mut rng);
        let (mut fit, mut defect) = (0.0, 0.0);
        for (b, batch) in order.chunks(schedule.batch_size).enumerate() {
            let abort = |trajectory, message: String| OptimError::NonFinite {
                epoch,
                batch: b,
                trajectory,
                message,
            };
            let grads =
                match batch_gradients(&params, &nodes, dataset, batch, alpha, options.group_size) {
                    Ok(g) => g,
                    Err(ShootingError::NonFinite { trajectory, source }) => {
                        return Err(abort(trajectory, source.to_string()))
                    }
                    Err(e) => return Err(e.into()),
                };
            if !grads.loss.is_finite() || grads.params.iter().any(|g| !g.is_finite()) {
                return Err(abort(None, "non-finite gradient".into()));
            }
            if let Some((j, _)) = grads.nodes.iter().find(|(_, g)| !g.is_finite()) {
                return Err(abort(Some(*j), "non-finite node gradient".into()));
            }
            adam.step(&mut params, &grads.params)?;
            for (j, g) in &grads.nodes {
                let (var, moments) = nodes.slot_mut(*j);
                adam_step(&adam.config, moments, &mut var.value, g)?;
                nodes.record_update(*j);
            }
            for (_, t) in &grads.per_trajectory {
                fit += t.fit;
                defect += t.defect;
            }
        }
        let record = EpochRecord {
            epoch,
            fit: fit / dataset.len() as f64,
            defect: defect / dataset.len() as f64,
            alpha,
            lr: adam.config.lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainOutcome {
        params,
        nodes,
        history,
    })
}
