//! Multiple-shooting segmentation, shooting nodes and the penalized loss.
//!
//! A trajectory of `T` measurements is cut into `m = T / n` segments of `n`
//! steps. Segment `i` starts from its own trainable state `s_i` and is rolled
//! out `n - 1` times to explain its measurements; one more step gives
//! `f^n(s_i)`, which should land on `s_{i+1}`. Per trajectory:
//!
//! ```text
//! fit    = 1/(m n) Σ_i Σ_k ‖g(f^(k-1)(s_i)) − y_((i-1)n+k)‖²
//! defect = 1/(m-1) Σ_{i<m} ‖s_{i+1} − f^n(s_i)‖²        (0 when m = 1)
//! total  = fit + α · defect
//! ```
//!
//! A batch loss is the mean of `total` over its trajectories. All segments of
//! a batch are rolled out together as the rows of one state matrix.

use crate::autodiff::{AutodiffError, Graph, Tensor, Var, Variable};
use crate::models::{BoundModel, Checkpoint, ModelError, ModelParameters, ObservationSpec};
use crate::optim::AdamMoments;
use crate::systems::TrajectoryDataset;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShootingError {
    #[error("segment length {segment_len} must divide T = {horizon} (n must divide T)")]
    Indivisible { horizon: usize, segment_len: usize },
    #[error("segment length and horizon must be at least 1")]
    EmptySegmentation,
    #[error("measurement-prefix node initialization requires a projection observation")]
    PrefixNeedsProjection,
    #[error("unknown trajectory id {0}")]
    UnknownTrajectory(usize),
    #[error("trajectory id {0} appears twice in the batch")]
    DuplicateTrajectory(usize),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss{}: {source}", trajectory.map(|t| format!(" on trajectory {t}")).unwrap_or_default())]
    NonFinite {
        trajectory: Option<usize>,
        source: ModelError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<AutodiffError> for ShootingError {
    fn from(e: AutodiffError) -> Self {
        ShootingError::Model(e.into())
    }
}

fn is_non_finite(e: &ModelError) -> bool {
    matches!(
        e,
        ModelError::NonFiniteState { .. } | ModelError::Autodiff(AutodiffError::NonFinite { .. })
    )
}

fn lift(e: ModelError) -> ShootingError {
    if is_non_finite(&e) {
        ShootingError::NonFinite {
            trajectory: None,
            source: e,
        }
    } else {
        ShootingError::Model(e)
    }
}

impl From<ShootingError> for ModelError {
    fn from(e: ShootingError) -> Self {
        match e {
            ShootingError::Model(m) | ShootingError::NonFinite { source: m, .. } => m,
            other => ModelError::InvalidSpec(other.to_string()),
        }
    }
}

/// Split of a length-`T` trajectory into `m` segments of `n` steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segmentation {
    horizon: usize,
    segment_len: usize,
    segments: usize,
}

impl Segmentation {
    pub fn new(horizon: usize, segment_len: usize) -> Result<Self, ShootingError> {
        if horizon == 0 || segment_len == 0 {
            return Err(ShootingError::EmptySegmentation);
        }
        if !horizon.is_multiple_of(segment_len) {
            return Err(ShootingError::Indivisible {
                horizon,
                segment_len,
            });
        }
        Ok(Self {
            horizon,
            segment_len,
            segments: horizon / segment_len,
        })
    }

    /// `T`.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// `n`.
    pub fn segment_len(&self) -> usize {
        self.segment_len
    }

    /// `m`.
    pub fn segments(&self) -> usize {
        self.segments
    }

    /// Zero-based index of the first measurement of segment `i` (zero-based).
    pub fn start(&self, i: usize) -> usize {
        i * self.segment_len
    }

    pub fn starts(&self) -> Vec<usize> {
        (0..self.segments).map(|i| self.start(i)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeInit {
    Zeros,
    /// Observed coordinates take the measurement at the segment start.
    MeasurementPrefix,
}

/// Trainable shooting nodes: one `[m × d]` variable per trajectory, with its
/// own optimizer moments and an update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct ShootingNodeStore {
    segmentation: Segmentation,
    state_dim: usize,
    nodes: Vec<Variable>,
    moments: Vec<AdamMoments>,
    updates: Vec<u64>,
}

/// Embeds a measurement into state space: observed coordinates are copied,
/// the others are zero.
pub fn measurement_embedding(indices: &[usize], state_dim: usize, y: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; state_dim];
    for (&i, &v) in indices.iter().zip(y) {
        x[i] = v;
    }
    x
}

pub fn init_nodes(
    dataset: &TrajectoryDataset,
    segmentation: Segmentation,
    strategy: NodeInit,
    observation: &ObservationSpec,
    state_dim: usize,
) -> Result<ShootingNodeStore, ShootingError> {
    if dataset.horizon() != segmentation.horizon() {
        return Err(ShootingError::Shape(format!(
            "dataset horizon {} differs from segmentation horizon {}",
            dataset.horizon(),
            segmentation.horizon()
        )));
    }
    let indices = match (strategy, observation) {
        (NodeInit::MeasurementPrefix, ObservationSpec::Projection { indices }) => {
            Some(indices.as_slice())
        }
        (NodeInit::MeasurementPrefix, _) => return Err(ShootingError::PrefixNeedsProjection),
        (NodeInit::Zeros, _) => None,
    };
    let m = segmentation.segments();
    let nodes = (0..dataset.len())
        .map(|j| {
            let mut data = Vec::with_capacity(m * state_dim);
            for i in 0..m {
                match indices {
                    Some(idx) => data.extend(measurement_embedding(
                        idx,
                        state_dim,
                        dataset.measurement(j, segmentation.start(i)),
                    )),
                    None => data.extend(std::iter::repeat_n(0.0, state_dim)),
                }
            }
            Variable::trainable(Tensor::new(vec![m, state_dim], data).expect("node shape"))
        })
        .collect::<Vec<_>>();
    Ok(ShootingNodeStore::from_nodes(
        segmentation,
        state_dim,
        nodes,
    ))
}

impl ShootingNodeStore {
    fn from_nodes(segmentation: Segmentation, state_dim: usize, nodes: Vec<Variable>) -> Self {
        let moments = nodes
            .iter()
            .map(|v| AdamMoments::new(v.value.shape()))
            .collect();
        let updates = vec![0; nodes.len()];
        Self {
            segmentation,
            state_dim,
            nodes,
            moments,
            updates,
        }
    }

    pub fn segmentation(&self) -> Segmentation {
        self.segmentation
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Number of trajectories.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `[m × d]` nodes of trajectory `j`.
    pub fn nodes(&self, j: usize) -> &Variable {
        &self.nodes[j]
    }

    pub fn nodes_mut(&mut self, j: usize) -> &mut Variable {
        &mut self.nodes[j]
    }

    /// Node `i` of trajectory `j`.
    pub fn node(&self, j: usize, i: usize) -> &[f64] {
        self.nodes[j].value.row(i)
    }

    pub fn moments(&self, j: usize) -> &AdamMoments {
        &self.moments[j]
    }

    /// Mutable access to the nodes and optimizer moments of trajectory `j`.
    pub fn slot_mut(&mut self, j: usize) -> (&mut Variable, &mut AdamMoments) {
        (&mut self.nodes[j], &mut self.moments[j])
    }

    pub fn reset_moments(&mut self) {
        for m in &mut self.moments {
            m.reset();
        }
    }

    /// How many optimizer steps each trajectory's nodes have received.
    pub fn update_counts(&self) -> &[u64] {
        &self.updates
    }

    pub(crate) fn record_update(&mut self, j: usize) {
        self.updates[j] += 1;
    }

    /// Every node as a flat list, trajectory-major.
    pub fn all_nodes(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.nodes
            .iter()
            .flat_map(|v| (0..v.value.rows()).map(move |i| v.value.row(i)))
    }

    pub fn push_to_checkpoint(&self, ck: &mut Checkpoint) {
        ck.push(
            "meta.segmentation",
            Tensor::vector(&[
                self.segmentation.horizon() as f64,
                self.segmentation.segment_len() as f64,
            ]),
        );
        for (j, v) in self.nodes.iter().enumerate() {
            for i in 0..v.value.rows() {
                ck.push(node_name(j, i), Tensor::vector(v.value.row(i)));
            }
        }
    }

    /// Restores nodes written by [`ShootingNodeStore::push_to_checkpoint`].
    /// Optimizer moments and counters start fresh.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Option<Self>, ShootingError> {
        let Some(meta) = ck.get("meta.segmentation") else {
            return Ok(None);
        };
        let seg = Segmentation::new(meta.data()[0] as usize, meta.data()[1] as usize)?;
        let m = seg.segments();
        let mut nodes = Vec::new();
        let mut state_dim = 0;
        for j in 0.. {
            if ck.get(&node_name(j, 0)).is_none() {
                break;
            }
            let mut data = Vec::new();
            for i in 0..m {
                let t = ck
                    .get(&node_name(j, i))
                    .ok_or_else(|| ShootingError::Shape(format!("missing node {j}.{i}")))?;
                state_dim = t.numel();
                data.extend_from_slice(t.data());
            }
            nodes.push(Variable::trainable(
                Tensor::new(vec![m, state_dim], data)
                    .map_err(|e| ShootingError::Shape(e.to_string()))?,
            ));
        }
        Ok(Some(Self::from_nodes(seg, state_dim, nodes)))
    }
}

pub fn node_name(trajectory: usize, segment: usize) -> String {
    format!("nodes.{trajectory}.{segment}")
}

/// Fit term, continuity defect and their penalized sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub fit: f64,
    pub defect: f64,
    pub total: f64,
}

/// Loss recorded in a graph for a group of trajectories.
pub struct RecordedLoss {
    /// `Σ_j total_j` over the group.
    pub total_sum: Var,
    /// `Σ_j fit_j` and `Σ_j defect_j` as graph values.
    pub fit_sum: Var,
    pub defect_sum: Option<Var>,
    /// Per-trajectory values, in input order.
    pub per_trajectory: Vec<LossTerms>,
}

/// Records the penalized loss of several trajectories sharing one rollout.
///
/// `nodes[j]` is the `[m × d]` node matrix of trajectory `j` and
/// `measurements[j]` its `T × p` row-major measurements.
pub fn record_loss(
    g: &mut Graph,
    model: &BoundModel<'_>,
    nodes: &[Var],
    measurements: &[&[f64]],
    seg: Segmentation,
    alpha: f64,
) -> Result<RecordedLoss, ShootingError> {
    let b = nodes.len();
    if b == 0 || measurements.len() != b {
        return Err(ShootingError::EmptyBatch);
    }
    let (m, n) = (seg.segments(), seg.segment_len());
    let p = model.params().observation_spec().output_dim();
    for (v, y) in nodes.iter().zip(measurements) {
        let shape = g.value(*v).shape();
        if shape != [m, model.params().state_dim()] {
            return Err(ShootingError::Shape(format!(
                "node matrix {shape:?}, expected [{m}, d]"
            )));
        }
        if y.len() != seg.horizon() * p {
            return Err(ShootingError::Shape(format!(
                "measurement length {} != T·p = {}",
                y.len(),
                seg.horizon() * p
            )));
        }
    }
    let rows = b * m;
    let starts = if b == 1 {
        nodes[0]
    } else {
        g.concat_rows(nodes)?
    };

    // The defect needs f^n(s_i); with a single segment that step is unused.
    let steps = if m > 1 { n } else { n - 1 };
    let states = model.iterate(g, starts, steps).map_err(lift)?;

    let stacked = if n == 1 {
        states[0]
    } else {
        g.concat_rows(&states[..n])?
    };
    let predicted = model.observe(g, stacked).map_err(lift)?;

    // Row k·R + (j·m + i) holds y_j at time i·n + k.
    let mut target = Vec::with_capacity(n * rows * p);
    for k in 0..n {
        for y in measurements {
            for i in 0..m {
                let t = seg.start(i) + k;
                target.extend_from_slice(&y[t * p..(t + 1) * p]);
            }
        }
    }
    let target = g.constant(Tensor::new(vec![n * rows, p], target)?);
    let residual = g.sub(predicted, target)?;
    let fit_sq = g.sum_squares(residual)?;
    let fit_scale = 1.0 / (m * n) as f64;

    let mut fit_j = vec![0.0; b];
    for (row, chunk) in g.value(residual).data().chunks(p).enumerate() {
        let traj = (row % rows) / m;
        fit_j[traj] += chunk.iter().map(|v| v * v).sum::<f64>();
    }

    let mut defect_j = vec![0.0; b];
    let fit_sum = g.scale(fit_sq, fit_scale)?;
    let mut defect_sum = None;
    let total_sum = if m > 1 {
        let mut prev = Vec::with_capacity(b * (m - 1));
        let mut next = Vec::with_capacity(b * (m - 1));
        for j in 0..b {
            for i in 0..m - 1 {
                prev.push(j * m + i);
                next.push(j * m + i + 1);
            }
        }
        let reached = g.select_rows(states[n], &prev)?;
        let wanted = g.select_rows(starts, &next)?;
        let gap = g.sub(wanted, reached)?;
        for (row, chunk) in g
            .value(gap)
            .data()
            .chunks(model.params().state_dim())
            .enumerate()
        {
            defect_j[row / (m - 1)] += chunk.iter().map(|v| v * v).sum::<f64>();
        }
        let def_sq = g.sum_squares(gap)?;
        defect_sum = Some(g.scale(def_sq, 1.0 / (m - 1) as f64)?);
        let defect = g.scale(def_sq, alpha / (m - 1) as f64)?;
        g.add(fit_sum, defect)?
    } else {
        fit_sum
    };

    let defect_scale = if m > 1 { 1.0 / (m - 1) as f64 } else { 0.0 };
    let per_trajectory = fit_j
        .iter()
        .zip(&defect_j)
        .map(|(&f, &d)| {
            let fit = f * fit_scale;
            let defect = d * defect_scale;
            LossTerms {
                fit,
                defect,
                total: fit + alpha * defect,
            }
        })
        .collect();
    Ok(RecordedLoss {
        total_sum,
        fit_sum,
        defect_sum,
        per_trajectory,
    })
}

/// Loss of one trajectory given its node matrix `[m × d]` and `[T × p]`
/// measurements.
pub fn trajectory_loss(
    params: &ModelParameters,
    nodes: &Tensor,
    measurements: &Tensor,
    seg: Segmentation,
    alpha: f64,
) -> Result<LossTerms, ShootingError> {
    let mut g = Graph::new();
    let model = params.bind(&mut g, false)?;
    let s = g.constant(nodes.clone());
    let rec = record_loss(&mut g, &model, &[s], &[measurements.data()], seg, alpha)?;
    // Report the graph's own reductions so single-segment losses agree
    // bitwise with `ivp_loss` and α = 0 gives total == fit exactly.
    Ok(LossTerms {
        fit: g.value(rec.fit_sum).item(),
        defect: rec.defect_sum.map_or(0.0, |v| g.value(v).item()),
        total: g.value(rec.total_sum).item(),
    })
}

/// Single-shooting objective: `1/T Σ_t ‖g(f^(t-1)(x₁)) − y_t‖²`.
pub fn ivp_loss(
    params: &ModelParameters,
    x1: &[f64],
    measurements: &Tensor,
) -> Result<f64, ShootingError> {
    let horizon = measurements.rows();
    let p = params.observation_spec().output_dim();
    if measurements.cols() != p {
        return Err(ShootingError::Shape(format!(
            "measurement dim {} != observation dim {p}",
            measurements.cols()
        )));
    }
    let mut g = Graph::new();
    let model = params.bind(&mut g, false)?;
    let x = g.constant(Tensor::new(vec![1, x1.len()], x1.to_vec())?);
    let states = model.iterate(&mut g, x, horizon - 1).map_err(lift)?;
    let stacked = if horizon == 1 {
        states[0]
    } else {
        g.concat_rows(&states)?
    };
    let predicted = model.observe(&mut g, stacked).map_err(lift)?;
    let y = g.constant(measurements.clone().reshape(vec![horizon, p])?);
    let residual = g.sub(predicted, y)?;
    let sq = g.sum_squares(residual)?;
    let scaled = g.scale(sq, 1.0 / horizon as f64)?;
    Ok(g.value(scaled).item())
}

fn check_batch(store: &ShootingNodeStore, batch: &[usize]) -> Result<(), ShootingError> {
    if batch.is_empty() {
        return Err(ShootingError::EmptyBatch);
    }
    for (k, &j) in batch.iter().enumerate() {
        if j >= store.len() {
            return Err(ShootingError::UnknownTrajectory(j));
        }
        if batch[..k].contains(&j) {
            return Err(ShootingError::DuplicateTrajectory(j));
        }
    }
    Ok(())
}

/// Mean of the per-trajectory totals over `batch`.
pub fn batch_loss(
    params: &ModelParameters,
    store: &ShootingNodeStore,
    dataset: &TrajectoryDataset,
    batch: &[usize],
    alpha: f64,
) -> Result<f64, ShootingError> {
    check_batch(store, batch)?;
    let mut sum = 0.0;
    for &j in batch {
        let y = dataset.trajectory_tensor(j);
        sum += trajectory_loss(
            params,
            &store.nodes(j).value,
            &y,
            store.segmentation(),
            alpha,
        )?
        .total;
    }
    Ok(sum / batch.len() as f64)
}

/// Loss value and gradients of one mini-batch.
#[derive(Debug)]
pub struct BatchGradients {
    /// Batch loss (mean of totals).
    pub loss: f64,
    /// `(trajectory id, terms)` in batch order.
    pub per_trajectory: Vec<(usize, LossTerms)>,
    /// Gradient of the batch loss for each model tensor.
    pub params: Vec<Tensor>,
    /// `(trajectory id, gradient of its node matrix)` in batch order.
    pub nodes: Vec<(usize, Tensor)>,
}

struct ChunkResult {
    loss: f64,
    terms: Vec<(usize, LossTerms)>,
    params: Vec<Option<Tensor>>,
    nodes: Vec<(usize, Tensor)>,
}

fn chunk_gradients(
    params: &ModelParameters,
    store: &ShootingNodeStore,
    dataset: &TrajectoryDataset,
    chunk: &[usize],
    batch_len: usize,
    alpha: f64,
) -> Result<ChunkResult, ShootingError> {
    let mut g = Graph::new();
    let model = params.bind(&mut g, true)?;
    let node_vars: Vec<Var> = chunk
        .iter()
        .map(|&j| g.param(store.nodes(j).value.clone()))
        .collect();
    let ys: Vec<&[f64]> = chunk.iter().map(|&j| dataset.trajectory(j)).collect();
    let rec = record_loss(&mut g, &model, &node_vars, &ys, store.segmentation(), alpha)?;
    let loss = g.scale(rec.total_sum, 1.0 / batch_len as f64)?;
    let mut grads = g.backward(loss)?;
    let param_grads = model.vars().iter().map(|v| grads.take(*v)).collect();
    let nodes = chunk
        .iter()
        .zip(&node_vars)
        .map(|(&j, v)| {
            let gr = grads
                .take(*v)
                .unwrap_or_else(|| Tensor::zeros(store.nodes(j).value.shape()));
            (j, gr)
        })
        .collect();
    Ok(ChunkResult {
        loss: g.value(loss).item(),
        terms: chunk.iter().copied().zip(rec.per_trajectory).collect(),
        params: param_grads,
        nodes,
    })
}

/// Gradients of the batch loss w.r.t. every model tensor and the nodes of
/// the batch trajectories.
///
/// The batch is evaluated in independent groups of at most `group_size`
/// trajectories (in parallel when a thread pool is available). Groups are
/// fixed by position, and their results are reduced in order, so the output
/// does not depend on the number of threads.
pub fn batch_gradients(
    params: &ModelParameters,
    store: &ShootingNodeStore,
    dataset: &TrajectoryDataset,
    batch: &[usize],
    alpha: f64,
    group_size: usize,
) -> Result<BatchGradients, ShootingError> {
    check_batch(store, batch)?;
    let group_size = group_size.max(1);
    let results: Vec<Result<ChunkResult, ShootingError>> = batch
        .par_chunks(group_size)
        .map(|chunk| chunk_gradients(params, store, dataset, chunk, batch.len(), alpha))
        .collect();

    let mut loss = 0.0;
    let mut per_trajectory = Vec::with_capacity(batch.len());
    let mut node_grads = Vec::with_capacity(batch.len());
    let mut param_grads: Vec<Tensor> = params
        .tensors()
        .iter()
        .map(|t| Tensor::zeros(t.var.value.shape()))
        .collect();
    for (chunk, res) in batch.chunks(group_size).zip(results) {
        let res = match res {
            Ok(r) => r,
            Err(ShootingError::NonFinite { source, .. }) => {
                return Err(ShootingError::NonFinite {
                    trajectory: locate_non_finite(params, store, dataset, chunk, alpha),
                    source,
                })
            }
            Err(e) => return Err(e),
        };
        loss += res.loss;
        per_trajectory.extend(res.terms);
        node_grads.extend(res.nodes);
        for (acc, gr) in param_grads.iter_mut().zip(res.params) {
            if let Some(gr) = gr {
                acc.add_assign(&gr)?;
            }
        }
    }
    Ok(BatchGradients {
        loss,
        per_trajectory,
        params: param_grads,
        nodes: node_grads,
    })
}

fn locate_non_finite(
    params: &ModelParameters,
    store: &ShootingNodeStore,
    dataset: &TrajectoryDataset,
    chunk: &[usize],
    alpha: f64,
) -> Option<usize> {
    chunk.iter().copied().find(|&j| {
        let y = dataset.trajectory_tensor(j);
        matches!(
            trajectory_loss(
                params,
                &store.nodes(j).value,
                &y,
                store.segmentation(),
                alpha
            ),
            Err(ShootingError::NonFinite { .. })
        )
    })
}

#[cfg(test)]
mod tests;
