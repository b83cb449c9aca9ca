//! Transition and observation networks of a deterministic state-space model.
//!
//! The transition `f` advances a latent state and the observation `g` maps a
//! state to the noiseless part of a measurement:
//!
//! ```text
//! x[t+1] = f(x[t])
//! y[t]   = g(x[t]) + noise
//! ```
//!
//! Both transition families are residual, `f(x) = x + r(x)`, so the networks
//! only learn the per-step increment:
//!
//! * fully connected: `r(x) = mlp(x)` with ReLU hidden layers and a linear
//!   output layer;
//! * locally linear: `r(x) = Σ_k β_k(x) A_k x` where `β` is a one-hidden-layer
//!   ReLU network followed by a softmax.
//!
//! States are always handled in batches: a `[rows × d]` matrix holds one
//! state per row.

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::autodiff::{AutodiffError, Gradients, Graph, Tensor, Var, Variable};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use thiserror::Error;

/// Magnitude of the initial entries of each locally-linear map `A_k`.
pub const LOCAL_MAP_INIT_SCALE: f64 = 0.01;
/// Extra scaling of the fully-connected output layer at initialization.
pub const FC_OUTPUT_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error("state dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite state at rollout step {step}")]
    NonFiniteState { step: usize },
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum TransitionSpec {
    FullyConnected {
        state_dim: usize,
        hidden: Vec<usize>,
    },
    LocallyLinear {
        state_dim: usize,
        /// Number of linear maps `K`.
        maps: usize,
        /// Width of the hidden layer of the mixture-weight network.
        hidden: usize,
    },
}

impl TransitionSpec {
    /// Defaults used for the image experiments: three hidden layers of 512.
    pub fn fully_connected(state_dim: usize) -> Self {
        TransitionSpec::FullyConnected {
            state_dim,
            hidden: vec![512, 512, 512],
        }
    }

    /// Defaults: 32 maps, mixture network hidden width 1024.
    pub fn locally_linear(state_dim: usize) -> Self {
        TransitionSpec::LocallyLinear {
            state_dim,
            maps: 32,
            hidden: 1024,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            TransitionSpec::FullyConnected { state_dim, .. }
            | TransitionSpec::LocallyLinear { state_dim, .. } => *state_dim,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            TransitionSpec::FullyConnected { state_dim, hidden } => {
                if *state_dim == 0 || hidden.contains(&0) {
                    return Err(ModelError::InvalidSpec(
                        "fully connected transition needs positive state dim and widths".into(),
                    ));
                }
            }
            TransitionSpec::LocallyLinear {
                state_dim,
                maps,
                hidden,
            } => {
                if *state_dim == 0 || *maps == 0 || *hidden == 0 {
                    return Err(ModelError::InvalidSpec(
                        "locally linear transition needs positive state dim, K and width".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ObservationSpec {
    /// Emits the listed state coordinates verbatim.
    Projection { indices: Vec<usize> },
    /// ReLU MLP, optionally followed by a sigmoid on the output layer.
    MlpDecoder {
        hidden: Vec<usize>,
        output_dim: usize,
        sigmoid: bool,
    },
}

impl ObservationSpec {
    pub fn output_dim(&self) -> usize {
        match self {
            ObservationSpec::Projection { indices } => indices.len(),
            ObservationSpec::MlpDecoder { output_dim, .. } => *output_dim,
        }
    }

    pub fn is_projection(&self) -> bool {
        matches!(self, ObservationSpec::Projection { .. })
    }

    pub fn validate(&self, state_dim: usize) -> Result<(), ModelError> {
        match self {
            ObservationSpec::Projection { indices } => {
                if indices.is_empty() {
                    return Err(ModelError::InvalidSpec(
                        "projection needs at least one index".into(),
                    ));
                }
                for (i, &a) in indices.iter().enumerate() {
                    if a >= state_dim {
                        return Err(ModelError::InvalidSpec(format!(
                            "projection index {a} out of range for state dim {state_dim}"
                        )));
                    }
                    if indices[..i].contains(&a) {
                        return Err(ModelError::InvalidSpec(format!(
                            "duplicate projection index {a}"
                        )));
                    }
                }
            }
            ObservationSpec::MlpDecoder {
                hidden, output_dim, ..
            } => {
                if *output_dim == 0 || hidden.contains(&0) {
                    return Err(ModelError::InvalidSpec(
                        "decoder widths must be positive".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedVariable {
    pub name: String,
    pub var: Variable,
}

/// Indices of the tensors that make up one dense layer.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Dense {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
enum TransitionLayout {
    FullyConnected(Vec<Dense>),
    LocallyLinear {
        hidden: Dense,
        logits: Dense,
        maps: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq)]
enum ObservationLayout {
    Projection,
    Decoder(Vec<Dense>),
}

/// All trainable weights of `f` and `g`, addressable by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    transition: TransitionSpec,
    observation: ObservationSpec,
    tensors: Vec<NamedVariable>,
    tlayout: TransitionLayout,
    olayout: ObservationLayout,
}

fn layer_dims(input: usize, hidden: &[usize], output: usize) -> Vec<(usize, usize)> {
    let mut dims = Vec::with_capacity(hidden.len() + 1);
    let mut prev = input;
    for &h in hidden.iter().chain(std::iter::once(&output)) {
        dims.push((prev, h));
        prev = h;
    }
    dims
}

fn uniform(rng: &mut Xoshiro256PlusPlus, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

fn fc_name(l: usize, part: &str) -> String {
    format!("transition.fc.{l}.{part}")
}

fn beta_name(l: usize, part: &str) -> String {
    format!("transition.ll.beta.{l}.{part}")
}

fn map_name(k: usize) -> String {
    format!("transition.ll.A.{k}")
}

fn decoder_name(l: usize, part: &str) -> String {
    format!("observation.decoder.{l}.{part}")
}

impl ModelParameters {
    /// Builds the tensor list in canonical order: transition layers, then
    /// observation layers. `values` supplies each tensor by name and shape.
    fn assemble(
        transition: TransitionSpec,
        observation: ObservationSpec,
        mut values: impl FnMut(&str, &[usize], Init) -> Result<Tensor, ModelError>,
    ) -> Result<Self, ModelError> {
        transition.validate()?;
        let d = transition.state_dim();
        observation.validate(d)?;
        let mut tensors = Vec::new();
        let mut push =
            |name: String, shape: &[usize], init: Init, tensors: &mut Vec<NamedVariable>| {
                let value = values(&name, shape, init)?;
                if value.shape() != shape {
                    return Err(ModelError::InvalidSpec(format!(
                        "tensor `{name}` has shape {:?}, expected {shape:?}",
                        value.shape()
                    )));
                }
                tensors.push(NamedVariable {
                    name,
                    var: Variable::trainable(value),
                });
                Ok(tensors.len() - 1)
            };

        let tlayout = match &transition {
            TransitionSpec::FullyConnected { hidden, .. } => {
                let dims = layer_dims(d, hidden, d);
                let last = dims.len() - 1;
                let mut layers = Vec::new();
                for (l, &(i, o)) in dims.iter().enumerate() {
                    let scale = if l == last { FC_OUTPUT_INIT_SCALE } else { 1.0 };
                    let weight = push(
                        fc_name(l, "weight"),
                        &[i, o],
                        Init::FanIn { fan_in: i, scale },
                        &mut tensors,
                    )?;
                    let bias = push(fc_name(l, "bias"), &[o], Init::Zero, &mut tensors)?;
                    layers.push(Dense { weight, bias });
                }
                TransitionLayout::FullyConnected(layers)
            }
            TransitionSpec::LocallyLinear { maps, hidden, .. } => {
                let w0 = push(
                    beta_name(0, "weight"),
                    &[d, *hidden],
                    Init::FanIn {
                        fan_in: d,
                        scale: 1.0,
                    },
                    &mut tensors,
                )?;
                let b0 = push(beta_name(0, "bias"), &[*hidden], Init::Zero, &mut tensors)?;
                let w1 = push(
                    beta_name(1, "weight"),
                    &[*hidden, *maps],
                    Init::FanIn {
                        fan_in: *hidden,
                        scale: 1.0,
                    },
                    &mut tensors,
                )?;
                let b1 = push(beta_name(1, "bias"), &[*maps], Init::Zero, &mut tensors)?;
                let mut idx = Vec::with_capacity(*maps);
                for k in 0..*maps {
                    idx.push(push(
                        map_name(k),
                        &[d, d],
                        Init::Uniform(LOCAL_MAP_INIT_SCALE),
                        &mut tensors,
                    )?);
                }
                TransitionLayout::LocallyLinear {
                    hidden: Dense {
                        weight: w0,
                        bias: b0,
                    },
                    logits: Dense {
                        weight: w1,
                        bias: b1,
                    },
                    maps: idx,
                }
            }
        };

        let olayout = match &observation {
            ObservationSpec::Projection { .. } => ObservationLayout::Projection,
            ObservationSpec::MlpDecoder {
                hidden, output_dim, ..
            } => {
                let mut layers = Vec::new();
                for (l, (i, o)) in layer_dims(d, hidden, *output_dim).into_iter().enumerate() {
                    let weight = push(
                        decoder_name(l, "weight"),
                        &[i, o],
                        Init::FanIn {
                            fan_in: i,
                            scale: 1.0,
                        },
                        &mut tensors,
                    )?;
                    // Nonzero: with zero biases and zero nodes every ReLU sits
                    // at its kink and the nodes never receive a gradient.
                    let bias = push(
                        decoder_name(l, "bias"),
                        &[o],
                        Init::FanIn {
                            fan_in: i,
                            scale: 1.0,
                        },
                        &mut tensors,
                    )?;
                    layers.push(Dense { weight, bias });
                }
                ObservationLayout::Decoder(layers)
            }
        };

        Ok(Self {
            transition,
            observation,
            tensors,
            tlayout,
            olayout,
        })
    }

    /// Rebuilds parameters from named tensors (e.g. a checkpoint).
    pub fn from_named(
        transition: TransitionSpec,
        observation: ObservationSpec,
        named: &[(String, Tensor)],
    ) -> Result<Self, ModelError> {
        Self::assemble(transition, observation, |name, _, _| {
            named
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| ModelError::MissingTensor(name.to_string()))
        })
    }

    pub fn transition_spec(&self) -> &TransitionSpec {
        &self.transition
    }

    pub fn observation_spec(&self) -> &ObservationSpec {
        &self.observation
    }

    pub fn state_dim(&self) -> usize {
        self.transition.state_dim()
    }

    pub fn tensors(&self) -> &[NamedVariable] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [NamedVariable] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &t.var.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors
            .iter_mut()
            .find(|t| t.name == name)
            .map(|t| &mut t.var.value)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.var.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.var.zero_grad();
        }
    }

    /// Copies all tensors into `g` and returns handles for the forward pass.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Result<BoundModel<'_>, ModelError> {
        let vars: Vec<Var> = self
            .tensors
            .iter()
            .map(|t| g.leaf(t.var.value.clone(), requires_grad && t.var.requires_grad))
            .collect();
        let stacked_maps = match &self.tlayout {
            TransitionLayout::LocallyLinear { maps, .. } => {
                let mut transposed = Vec::with_capacity(maps.len());
                for &k in maps {
                    transposed.push(g.transpose(vars[k])?);
                }
                Some(g.concat_cols(&transposed)?)
            }
            TransitionLayout::FullyConnected(_) => None,
        };
        Ok(BoundModel {
            params: self,
            vars,
            stacked_maps,
        })
    }

    /// Adds the gradients recorded for `bound` into the parameter slots.
    pub fn accumulate_grads(&mut self, bound: &[Var], grads: &Gradients) -> Result<(), ModelError> {
        for (t, v) in self.tensors.iter_mut().zip(bound) {
            if let Some(gr) = grads.get(*v) {
                t.var.accumulate_grad(gr)?;
            }
        }
        Ok(())
    }

    /// `f` applied to each row of `states`, without recording gradients.
    pub fn transition_values(&self, states: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, false)?;
        let x = g.constant(states.clone());
        let y = m.transition(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    /// `g` applied to each row of `states`, without recording gradients.
    pub fn observe_values(&self, states: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, false)?;
        let x = g.constant(states.clone());
        let y = m.observe(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zero,
    FanIn { fan_in: usize, scale: f64 },
    Uniform(f64),
}

/// Deterministic initialization: weights uniform in `±1/√fan_in`, transition
/// biases zero (decoder biases use the weight rule), local maps uniform in `±0.01`, and the fully-connected output layer
/// shrunk by [`FC_OUTPUT_INIT_SCALE`] so both families start near identity.
pub fn init_params(
    transition: &TransitionSpec,
    observation: &ObservationSpec,
    seed: u64,
) -> Result<ModelParameters, ModelError> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    ModelParameters::assemble(transition.clone(), observation.clone(), |_, shape, init| {
        Ok(match init {
            Init::Zero => Tensor::zeros(shape),
            Init::FanIn { fan_in, scale } => {
                uniform(&mut rng, shape, scale / (fan_in as f64).sqrt())
            }
            Init::Uniform(b) => uniform(&mut rng, shape, b),
        })
    })
}

/// Parameters copied into a [`Graph`], ready for forward evaluation.
pub struct BoundModel<'a> {
    params: &'a ModelParameters,
    vars: Vec<Var>,
    stacked_maps: Option<Var>,
}

impl<'a> BoundModel<'a> {
    /// Handles of the parameter leaves, in [`ModelParameters::tensors`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn params(&self) -> &'a ModelParameters {
        self.params
    }

    fn dense(&self, g: &mut Graph, x: Var, layer: Dense) -> Result<Var, ModelError> {
        let h = g.matmul(x, self.vars[layer.weight])?;
        Ok(g.add_row(h, self.vars[layer.bias])?)
    }

    fn check_dim(&self, g: &Graph, x: Var) -> Result<(), ModelError> {
        let d = self.params.state_dim();
        let got = g.value(x).cols();
        if got != d {
            return Err(ModelError::DimensionMismatch { expected: d, got });
        }
        Ok(())
    }

    /// Mixture weights `β(x)` of the locally-linear family (one row per state).
    pub fn mixture_weights(&self, g: &mut Graph, x: Var) -> Result<Option<Var>, ModelError> {
        match &self.params.tlayout {
            TransitionLayout::LocallyLinear { hidden, logits, .. } => {
                let h = self.dense(g, x, *hidden)?;
                let h = g.relu(h)?;
                let z = self.dense(g, h, *logits)?;
                Ok(Some(g.softmax(z)?))
            }
            TransitionLayout::FullyConnected(_) => Ok(None),
        }
    }

    /// One transition step for every row of `x`.
    pub fn transition(&self, g: &mut Graph, x: Var) -> Result<Var, ModelError> {
        self.check_dim(g, x)?;
        let increment = match &self.params.tlayout {
            TransitionLayout::FullyConnected(layers) => {
                let mut h = x;
                for (l, layer) in layers.iter().enumerate() {
                    h = self.dense(g, h, *layer)?;
                    if l + 1 < layers.len() {
                        h = g.relu(h)?;
                    }
                }
                h
            }
            TransitionLayout::LocallyLinear { .. } => {
                let beta = self.mixture_weights(g, x)?.expect("locally linear layout");
                let maps = self.stacked_maps.expect("bound with stacked maps");
                let z = g.matmul(x, maps)?;
                g.mix(beta, z)?
            }
        };
        Ok(g.add(x, increment)?)
    }

    /// Noiseless measurement for every row of `x`.
    pub fn observe(&self, g: &mut Graph, x: Var) -> Result<Var, ModelError> {
        self.check_dim(g, x)?;
        match (&self.params.olayout, &self.params.observation) {
            (ObservationLayout::Projection, ObservationSpec::Projection { indices }) => {
                Ok(g.select_cols(x, indices)?)
            }
            (ObservationLayout::Decoder(layers), ObservationSpec::MlpDecoder { sigmoid, .. }) => {
                let mut h = x;
                for (l, layer) in layers.iter().enumerate() {
                    h = self.dense(g, h, *layer)?;
                    if l + 1 < layers.len() {
                        h = g.relu(h)?;
                    }
                }
                if *sigmoid {
                    h = g.sigmoid(h)?;
                }
                Ok(h)
            }
            _ => unreachable!("layout always follows the observation spec"),
        }
    }

    /// `[x, f(x), …, f^k(x)]`, with every intermediate kept in the graph.
    pub fn iterate(&self, g: &mut Graph, x: Var, k: usize) -> Result<Vec<Var>, ModelError> {
        self.check_dim(g, x)?;
        let mut states = Vec::with_capacity(k + 1);
        states.push(x);
        let mut cur = x;
        for step in 1..=k {
            cur = self.transition(g, cur).map_err(|e| match e {
                ModelError::Autodiff(AutodiffError::NonFinite { .. }) => {
                    ModelError::NonFiniteState { step }
                }
                other => other,
            })?;
            states.push(cur);
        }
        Ok(states)
    }
}

/// Forward-only evaluator that binds the parameters once and reuses the
/// graph across calls.
pub struct ModelEvaluator<'a> {
    graph: Graph,
    model: BoundModel<'a>,
    mark: usize,
}

impl<'a> ModelEvaluator<'a> {
    pub fn new(params: &'a ModelParameters) -> Result<Self, ModelError> {
        let mut graph = Graph::new();
        let model = params.bind(&mut graph, false)?;
        let mark = graph.mark();
        Ok(Self { graph, model, mark })
    }

    pub fn params(&self) -> &'a ModelParameters {
        self.model.params()
    }

    fn run(
        &mut self,
        states: &Tensor,
        op: impl Fn(&BoundModel<'a>, &mut Graph, Var) -> Result<Var, ModelError>,
    ) -> Result<Tensor, ModelError> {
        self.graph.truncate(self.mark);
        let x = self.graph.constant(states.clone());
        let y = op(&self.model, &mut self.graph, x)?;
        Ok(self.graph.value(y).clone())
    }

    /// `f` on every row of `states`.
    pub fn transition(&mut self, states: &Tensor) -> Result<Tensor, ModelError> {
        self.run(states, |m, g, x| m.transition(g, x))
    }

    /// `g` on every row of `states`.
    pub fn observe(&mut self, states: &Tensor) -> Result<Tensor, ModelError> {
        self.run(states, |m, g, x| m.observe(g, x))
    }
}

/// `[x, f(x), …, f^k(x)]` for a single state, as plain vectors.
pub fn iterate(params: &ModelParameters, x: &[f64], k: usize) -> Result<Vec<Vec<f64>>, ModelError> {
    let mut g = Graph::new();
    let m = params.bind(&mut g, false)?;
    let x0 = g.constant(Tensor::row_vector(x));
    let states = m.iterate(&mut g, x0, k)?;
    Ok(states.iter().map(|v| g.value(*v).data().to_vec()).collect())
}

/// Single-state convenience wrapper for `g(x)`.
pub fn observe(params: &ModelParameters, x: &[f64]) -> Result<Vec<f64>, ModelError> {
    Ok(params.observe_values(&Tensor::row_vector(x))?.into_data())
}

#[cfg(test)]
mod tests;
