//! Forecast rollouts, error metrics and long-horizon diagnostics.
//!
//! The test protocol filters the first `filter_len` measurements of each
//! sequence with the UKF, rolls the last posterior mean forward `horizon`
//! steps and compares the predicted measurements, in raw units, with the
//! noiseless ground truth. A last-measurement-hold predictor is scored
//! alongside as a baseline.

use crate::autodiff::{reduce_loss, LossKind, Tensor};
use crate::inference::{filter_sequence, InferenceError, UkfConfig};
use crate::models::{ModelError, ModelEvaluator, ModelParameters};
use crate::systems::{NormStats, TrajectoryDataset};
use rayon::prelude::*;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("dataset has no ground-truth block; evaluation needs noiseless targets")]
    MissingGroundTruth,
    #[error("filter length {filter_len} + horizon {horizon} exceeds sequence length {horizon_available}")]
    TooLong {
        filter_len: usize,
        horizon: usize,
        horizon_available: usize,
    },
    #[error("rollout became non-finite at step {step}")]
    NonFiniteRollout { step: usize },
    #[error("trajectory {trajectory}: {source}")]
    Inference {
        trajectory: usize,
        source: InferenceError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Mse,
    Bce,
}

/// How binary cross-entropy is averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BceConvention {
    /// Mean over pixels and frames.
    #[default]
    PerPixel,
    /// Sum over the pixels of a frame, mean over frames.
    FrameSum,
}

/// `[g(f(x)), …, g(f^k(x))]`.
pub fn rollout_predict(
    params: &ModelParameters,
    x: &[f64],
    k: usize,
) -> Result<Vec<Vec<f64>>, EvalError> {
    let mut ev = ModelEvaluator::new(params)?;
    rollout_with(&mut ev, x, k)
}

fn rollout_with(
    ev: &mut ModelEvaluator<'_>,
    x: &[f64],
    k: usize,
) -> Result<Vec<Vec<f64>>, EvalError> {
    let mut state = Tensor::row_vector(x);
    let mut out = Vec::with_capacity(k);
    for step in 1..=k {
        state = ev
            .transition(&state)
            .map_err(|_| EvalError::NonFiniteRollout { step })?;
        let y = ev
            .observe(&state)
            .map_err(|_| EvalError::NonFiniteRollout { step })?;
        out.push(y.into_data());
    }
    Ok(out)
}

/// Average error of `predictions` against `truth` (equal-length flat buffers
/// of `p`-channel frames).
pub fn prediction_error(
    predictions: &[f64],
    truth: &[f64],
    p: usize,
    metric: Metric,
    convention: BceConvention,
) -> Result<f64, EvalError> {
    if predictions.len() != truth.len() || p == 0 || !truth.len().is_multiple_of(p) {
        return Err(EvalError::Shape(format!(
            "{} predictions vs {} targets with {p} channels",
            predictions.len(),
            truth.len()
        )));
    }
    let to_tensor = |v: &[f64]| Tensor::new(vec![v.len()], v.to_vec()).expect("flat shape");
    let (pt, tt) = (to_tensor(predictions), to_tensor(truth));
    let value = match metric {
        Metric::Mse => reduce_loss(LossKind::Mse, &pt, &tt),
        Metric::Bce => reduce_loss(LossKind::bce(), &pt, &tt),
    }
    .map_err(|e| EvalError::Shape(e.to_string()))?;
    Ok(match (metric, convention) {
        (Metric::Bce, BceConvention::FrameSum) => value * p as f64,
        _ => value,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryScore {
    pub index: usize,
    pub mse: f64,
    pub bce: Option<f64>,
    pub baseline_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionReport {
    pub per_trajectory: Vec<TrajectoryScore>,
    pub mse: f64,
    /// Standard deviation of the per-trajectory MSE.
    pub mse_std: f64,
    pub bce: Option<f64>,
    pub bce_std: Option<f64>,
    pub baseline_mse: f64,
    pub filter_len: usize,
    pub horizon: usize,
    pub bce_convention: BceConvention,
    /// Metrics are computed in raw (de-normalized) units.
    pub denormalized: bool,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl PredictionReport {
    pub fn from_scores(
        per_trajectory: Vec<TrajectoryScore>,
        filter_len: usize,
        horizon: usize,
        bce_convention: BceConvention,
    ) -> Self {
        let mse: Vec<f64> = per_trajectory.iter().map(|s| s.mse).collect();
        let (mse_mean, mse_std) = mean_std(&mse);
        let bce: Option<Vec<f64>> = per_trajectory.iter().map(|s| s.bce).collect();
        let bce_stats = bce.filter(|b| !b.is_empty()).map(|b| mean_std(&b));
        let baseline: Vec<f64> = per_trajectory.iter().map(|s| s.baseline_mse).collect();
        Self {
            mse: mse_mean,
            mse_std,
            bce: bce_stats.map(|s| s.0),
            bce_std: bce_stats.map(|s| s.1),
            baseline_mse: mean_std(&baseline).0,
            per_trajectory,
            filter_len,
            horizon,
            bce_convention,
            denormalized: true,
        }
    }

    /// Aggregate row first, then one row per trajectory.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        let mut s = String::from("trajectory,mse,bce,baseline_mse\n");
        let _ = writeln!(
            s,
            "mean,{:e},{},{:e}",
            self.mse,
            opt(self.bce),
            self.baseline_mse
        );
        for t in &self.per_trajectory {
            let _ = writeln!(
                s,
                "{},{:e},{},{:e}",
                t.index,
                t.mse,
                opt(t.bce),
                t.baseline_mse
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        let num = |v: f64| {
            if v.is_finite() {
                format!("{v:e}")
            } else {
                "null".into()
            }
        };
        let opt = |v: Option<f64>| v.map(num).unwrap_or_else(|| "null".into());
        format!(
            concat!(
                "{{\n  \"trajectories\": {},\n  \"filter_len\": {},\n  \"horizon\": {},\n",
                "  \"mse\": {},\n  \"mse_std_over_trajectories\": {},\n  \"bce\": {},\n",
                "  \"bce_std_over_trajectories\": {},\n  \"bce_convention\": \"{}\",\n",
                "  \"baseline_hold_mse\": {},\n  \"denormalized\": {}\n}}\n"
            ),
            self.per_trajectory.len(),
            self.filter_len,
            self.horizon,
            num(self.mse),
            num(self.mse_std),
            opt(self.bce),
            opt(self.bce_std),
            match self.bce_convention {
                BceConvention::PerPixel => "per_pixel",
                BceConvention::FrameSum => "frame_sum",
            },
            num(self.baseline_mse),
            self.denormalized
        )
    }
}

/// Filtered forecast of one test sequence plus its inputs, in raw units.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecast {
    pub predicted: Vec<f64>,
    pub truth: Vec<f64>,
    pub hold: Vec<f64>,
}

/// Filters the first `filter_len` measurements of trajectory `j` (raw units,
/// normalized with `stats` for the filter) and predicts the next `horizon`.
pub fn forecast_trajectory(
    params: &ModelParameters,
    cfg: &UkfConfig,
    dataset: &TrajectoryDataset,
    stats: &NormStats,
    j: usize,
    filter_len: usize,
    horizon: usize,
) -> Result<Forecast, EvalError> {
    let p = dataset.measurement_dim();
    let truth_all = dataset
        .ground_truth(j)
        .ok_or(EvalError::MissingGroundTruth)?;
    let mut raw = dataset.trajectory(j)[..filter_len * p].to_vec();
    if let Some(own) = dataset.normalization() {
        own.invert(&mut raw);
    }
    let mut observed = raw.clone();
    stats.apply(&mut observed);
    let beliefs =
        filter_sequence(params, &observed, cfg).map_err(|source| EvalError::Inference {
            trajectory: j,
            source,
        })?;
    let last = beliefs.last().expect("filter_len >= 1");
    let mut predicted = rollout_predict(params, last.mean.as_slice(), horizon)?.concat();
    stats.invert(&mut predicted);
    let hold_frame = &raw[(filter_len - 1) * p..];
    Ok(Forecast {
        predicted,
        truth: truth_all[filter_len * p..(filter_len + horizon) * p].to_vec(),
        hold: hold_frame.repeat(horizon),
    })
}

/// Runs the filter-then-forecast protocol on every trajectory of `dataset`.
///
/// `stats` are the training normalization statistics. Trajectories are
/// scored in parallel and reduced in index order.
pub fn evaluate_testset(
    params: &ModelParameters,
    cfg: &UkfConfig,
    dataset: &TrajectoryDataset,
    stats: &NormStats,
    filter_len: usize,
    horizon: usize,
    convention: BceConvention,
) -> Result<PredictionReport, EvalError> {
    if !dataset.has_ground_truth() {
        return Err(EvalError::MissingGroundTruth);
    }
    let p = dataset.measurement_dim();
    if p != params.observation_spec().output_dim() || stats.dim() != p {
        return Err(EvalError::Shape(format!(
            "dataset has {p} channels, model emits {}, statistics cover {}",
            params.observation_spec().output_dim(),
            stats.dim()
        )));
    }
    if filter_len == 0 || horizon == 0 || filter_len + horizon > dataset.horizon() {
        return Err(EvalError::TooLong {
            filter_len,
            horizon,
            horizon_available: dataset.horizon(),
        });
    }
    let raw = dataset.denormalize();
    let scores: Result<Vec<TrajectoryScore>, EvalError> = (0..raw.len())
        .into_par_iter()
        .map(|j| {
            let fc = forecast_trajectory(params, cfg, &raw, stats, j, filter_len, horizon)?;
            let mse = prediction_error(&fc.predicted, &fc.truth, p, Metric::Mse, convention)?;
            let bce = if raw.is_image() {
                Some(prediction_error(
                    &fc.predicted,
                    &fc.truth,
                    p,
                    Metric::Bce,
                    convention,
                )?)
            } else {
                None
            };
            let baseline_mse = prediction_error(&fc.hold, &fc.truth, p, Metric::Mse, convention)?;
            Ok(TrajectoryScore {
                index: j,
                mse,
                bce,
                baseline_mse,
            })
        })
        .collect();
    Ok(PredictionReport::from_scores(
        scores?, filter_len, horizon, convention,
    ))
}

/// Axis-aligned box used as the reference scale for divergence checks.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundingBox {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl BoundingBox {
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a [f64]>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let mut b = Self {
            min: first.to_vec(),
            max: first.to_vec(),
        };
        for p in it {
            b.include(p);
        }
        Some(b)
    }

    pub fn include(&mut self, p: &[f64]) {
        for (i, v) in p.iter().enumerate() {
            self.min[i] = self.min[i].min(*v);
            self.max[i] = self.max[i].max(*v);
        }
    }

    /// Largest absolute value reached by coordinate `i`.
    pub fn max_abs(&self, i: usize) -> f64 {
        self.min[i].abs().max(self.max[i].abs())
    }

    /// Whether `p` has a coordinate beyond `factor` times the box's reach.
    pub fn exceeded_by(&self, p: &[f64], factor: f64) -> bool {
        p.iter()
            .enumerate()
            .any(|(i, v)| !(v.abs() <= factor * self.max_abs(i)))
    }
}

/// Divergence threshold of [`attractor_rollout`], as a multiple of the
/// reference box.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AttractorReport {
    /// `steps + 1` states starting with the node (shorter if the rollout
    /// stopped on a non-finite state).
    pub states: Vec<Vec<f64>>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub mean: Vec<f64>,
    pub diverged: bool,
    /// First step leaving `DIVERGENCE_FACTOR ×` the reference box.
    pub divergence_step: Option<usize>,
}

impl AttractorReport {
    /// Whether every visited state lies within `factor` times `reference`.
    pub fn within(&self, reference: &BoundingBox, factor: f64) -> bool {
        self.states
            .iter()
            .all(|s| !reference.exceeded_by(s, factor))
    }

    pub fn to_csv(&self) -> String {
        let d = self.states.first().map_or(0, Vec::len);
        let mut s = String::from("step");
        for i in 0..d {
            let _ = write!(s, ",x{i}");
        }
        s.push('\n');
        for (t, x) in self.states.iter().enumerate() {
            let _ = write!(s, "{t}");
            for v in x {
                let _ = write!(s, ",{v:e}");
            }
            s.push('\n');
        }
        s
    }
}

/// Free rollout of `steps` transitions from `node`. Divergence is reported,
/// never raised: a non-finite state ends the rollout with the flag set.
pub fn attractor_rollout(
    params: &ModelParameters,
    node: &[f64],
    steps: usize,
    reference: &BoundingBox,
) -> Result<AttractorReport, EvalError> {
    let mut ev = ModelEvaluator::new(params)?;
    let mut states = vec![node.to_vec()];
    let mut divergence_step = reference.exceeded_by(node, DIVERGENCE_FACTOR).then_some(0);
    let mut x = Tensor::row_vector(node);
    for step in 1..=steps {
        match ev.transition(&x) {
            Ok(next) => {
                if divergence_step.is_none()
                    && reference.exceeded_by(next.data(), DIVERGENCE_FACTOR)
                {
                    divergence_step = Some(step);
                }
                states.push(next.data().to_vec());
                x = next;
            }
            Err(_) => {
                divergence_step.get_or_insert(step);
                break;
            }
        }
    }
    let d = node.len();
    let bbox =
        BoundingBox::from_points(states.iter().map(Vec::as_slice)).expect("at least the node");
    let mean = (0..d)
        .map(|i| states.iter().map(|s| s[i]).sum::<f64>() / states.len() as f64)
        .collect();
    Ok(AttractorReport {
        min: bbox.min,
        max: bbox.max,
        mean,
        diverged: divergence_step.is_some(),
        divergence_step,
        states,
    })
}
