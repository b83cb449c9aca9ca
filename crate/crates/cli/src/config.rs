//! Flat JSON experiment configuration.
//!
//! Every key is optional; unknown keys are rejected. Keys whose default
//! depends on the system (`horizon`, `noise_std`, `state_dim`, the
//! observation family, ...) are filled in by [`ExperimentConfig::resolve`],
//! and the resolved form is what gets echoed next to training artifacts.

use crate::CliError;
use serde::{Deserialize, Serialize};
use ssm_core::eval::BceConvention;
use ssm_core::inference::UkfConfig;
use ssm_core::models::{ObservationSpec, TransitionSpec};
use ssm_core::optim::TrainSchedule;
use ssm_core::shooting::{NodeInit, Segmentation};
use ssm_core::systems::{read_header, LinearConfig, LorenzConfig, PendulumConfig, SystemConfig};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Pendulum,
    #[default]
    Lorenz,
    Linear,
    /// Measurements read from the `dataset` file.
    File,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionKind {
    #[default]
    LocallyLinear,
    FullyConnected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationKind {
    Projection,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeInitKind {
    Zeros,
    MeasurementPrefix,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BceKind {
    #[default]
    PerPixel,
    FrameSum,
}

impl From<BceKind> for BceConvention {
    fn from(k: BceKind) -> Self {
        match k {
            BceKind::PerPixel => BceConvention::PerPixel,
            BceKind::FrameSum => BceConvention::FrameSum,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemKind,
    /// Training data for `system = "file"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    pub trajectories: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    pub image_size: usize,
    /// Rotation angle of the default linear system.
    pub linear_angle: f64,
    /// Row-major square matrix replacing the rotation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub linear_matrix: Option<Vec<f64>>,
    pub data_seed: u64,

    pub transition: TransitionKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state_dim: Option<usize>,
    pub maps: usize,
    pub mixture_hidden: usize,
    pub fc_hidden: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observation: Option<ObservationKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observed: Option<Vec<usize>>,
    pub decoder_hidden: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoder_sigmoid: Option<bool>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub segment_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node_init: Option<NodeInitKind>,
    pub epochs: usize,
    pub bump_epoch: usize,
    pub decay_epoch: usize,
    pub alpha_initial: f64,
    pub alpha_tilde: f64,
    pub lr: f64,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub group_size: usize,
    pub seed: u64,
    pub progress_every: usize,

    pub ukf_a: f64,
    pub ukf_b: f64,
    pub ukf_k: f64,
    pub ukf_initial_var: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ukf_measurement_var: Option<f64>,
    pub ukf_process_var: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub filter_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_horizon: Option<usize>,
    pub bce_convention: BceKind,

    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let s = TrainSchedule::default();
        let u = UkfConfig::default();
        Self {
            system: SystemKind::default(),
            dataset: None,
            trajectories: 100,
            horizon: None,
            noise_std: None,
            dt: None,
            image_size: 24,
            linear_angle: 0.1,
            linear_matrix: None,
            data_seed: 1,
            transition: TransitionKind::default(),
            state_dim: None,
            maps: 32,
            mixture_hidden: 1024,
            fc_hidden: vec![512, 512, 512],
            observation: None,
            observed: None,
            decoder_hidden: vec![512, 512, 512],
            decoder_sigmoid: None,
            segment_len: None,
            node_init: None,
            epochs: s.epochs,
            bump_epoch: s.bump_epoch,
            decay_epoch: s.decay_epoch,
            alpha_initial: s.alpha_initial,
            alpha_tilde: s.alpha_tilde,
            lr: s.lr,
            decay_factor: s.decay_factor,
            batch_size: s.batch_size,
            group_size: 10,
            seed: 1,
            progress_every: 10,
            ukf_a: u.a,
            ukf_b: u.b,
            ukf_k: u.k,
            ukf_initial_var: u.initial_var,
            ukf_measurement_var: None,
            ukf_process_var: u.process_var,
            filter_len: None,
            eval_horizon: None,
            bce_convention: BceKind::default(),
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| usage(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Fills every system-dependent default and checks the invariants.
    pub fn resolve(&self) -> Result<Self, CliError> {
        let mut c = self.clone();
        let (horizon, noise, channels, is_image) = match c.system {
            SystemKind::Pendulum => (100, 0.2, c.image_size * c.image_size, true),
            SystemKind::Lorenz => (10_000, 2.5, 1, false),
            SystemKind::Linear => {
                let d = c.linear_dim()?;
                (50, 0.05, d, false)
            }
            SystemKind::File => {
                let path = c
                    .dataset
                    .as_ref()
                    .ok_or_else(|| usage("system \"file\" needs a \"dataset\" path"))?;
                let file = fs::File::open(path)
                    .map_err(|e| usage(format!("cannot open dataset {}: {e}", path.display())))?;
                let h = read_header(&mut BufReader::new(file))
                    .map_err(|e| usage(format!("{}: {e}", path.display())))?;
                if c.horizon.is_some_and(|t| t != h.horizon) {
                    return Err(usage("\"horizon\" disagrees with the dataset file"));
                }
                (h.horizon, h.noise_std, h.dim, h.is_image)
            }
        };
        if c.system != SystemKind::File && c.dataset.is_some() {
            return Err(usage("\"dataset\" is only used with system \"file\""));
        }
        let horizon = *c.horizon.get_or_insert(horizon);
        let noise = *c.noise_std.get_or_insert(noise);
        if c.system == SystemKind::Pendulum || c.system == SystemKind::Lorenz {
            c.dt.get_or_insert(if c.system == SystemKind::Pendulum {
                0.1
            } else {
                0.005
            });
        }
        let state_dim = *c.state_dim.get_or_insert(match c.system {
            SystemKind::Pendulum | SystemKind::Lorenz => 3,
            _ => channels,
        });
        let observation = *c.observation.get_or_insert(if is_image {
            ObservationKind::Decoder
        } else {
            ObservationKind::Projection
        });
        match observation {
            ObservationKind::Projection => {
                let observed = c.observed.get_or_insert_with(|| (0..channels).collect());
                if observed.len() != channels {
                    return Err(usage(format!(
                        "\"observed\" lists {} coordinates but the data have {channels} channels",
                        observed.len()
                    )));
                }
                c.decoder_sigmoid = None;
            }
            ObservationKind::Decoder => {
                c.observed = None;
                c.decoder_sigmoid.get_or_insert(is_image);
            }
        }
        let n = *c.segment_len.get_or_insert(if horizon.is_multiple_of(4) {
            horizon / 4
        } else {
            horizon
        });
        Segmentation::new(horizon, n).map_err(|e| usage(e.to_string()))?;
        c.node_init.get_or_insert(match observation {
            ObservationKind::Projection => NodeInitKind::MeasurementPrefix,
            ObservationKind::Decoder => NodeInitKind::Zeros,
        });
        c.ukf_measurement_var
            .get_or_insert(if is_image { noise * noise } else { 0.5 });
        if c.group_size == 0 {
            return Err(usage("\"group_size\" must be positive"));
        }
        c.schedule().validate().map_err(|e| usage(e.to_string()))?;
        let t = c.transition_spec()?;
        t.validate().map_err(|e| usage(e.to_string()))?;
        c.observation_spec(channels)?
            .validate(state_dim)
            .map_err(|e| usage(e.to_string()))?;
        Ok(c)
    }

    fn linear_dim(&self) -> Result<usize, CliError> {
        match &self.linear_matrix {
            None => Ok(2),
            Some(m) => {
                let d = (m.len() as f64).sqrt().round() as usize;
                if d == 0 || d * d != m.len() {
                    return Err(usage("\"linear_matrix\" must be a non-empty square matrix"));
                }
                Ok(d)
            }
        }
    }

    fn resolved<T: Copy>(v: Option<T>, key: &str) -> Result<T, CliError> {
        v.ok_or_else(|| usage(format!("\"{key}\" is unresolved; call resolve() first")))
    }

    /// Simulator for generated systems; `None` for file input.
    pub fn system_config(&self) -> Result<Option<SystemConfig>, CliError> {
        let horizon = Self::resolved(self.horizon, "horizon")?;
        let noise_std = Self::resolved(self.noise_std, "noise_std")?;
        Ok(Some(match self.system {
            SystemKind::Pendulum => SystemConfig::Pendulum(PendulumConfig {
                dt: Self::resolved(self.dt, "dt")?,
                horizon,
                image_size: self.image_size,
                noise_std,
                ..PendulumConfig::default()
            }),
            SystemKind::Lorenz => SystemConfig::Lorenz(LorenzConfig {
                dt: Self::resolved(self.dt, "dt")?,
                horizon,
                noise_std,
                ..LorenzConfig::default()
            }),
            SystemKind::Linear => {
                let mut lc = LinearConfig::rotation(self.linear_angle, horizon, noise_std);
                if let Some(m) = &self.linear_matrix {
                    lc.state_dim = self.linear_dim()?;
                    lc.matrix = m.clone();
                }
                SystemConfig::Linear(lc)
            }
            SystemKind::File => return Ok(None),
        }))
    }

    pub fn transition_spec(&self) -> Result<TransitionSpec, CliError> {
        let state_dim = Self::resolved(self.state_dim, "state_dim")?;
        Ok(match self.transition {
            TransitionKind::LocallyLinear => TransitionSpec::LocallyLinear {
                state_dim,
                maps: self.maps,
                hidden: self.mixture_hidden,
            },
            TransitionKind::FullyConnected => TransitionSpec::FullyConnected {
                state_dim,
                hidden: self.fc_hidden.clone(),
            },
        })
    }

    /// Observation network for data with `channels` measurement channels.
    pub fn observation_spec(&self, channels: usize) -> Result<ObservationSpec, CliError> {
        Ok(match Self::resolved(self.observation, "observation")? {
            ObservationKind::Projection => ObservationSpec::Projection {
                indices: self
                    .observed
                    .clone()
                    .ok_or_else(|| usage("\"observed\" is unresolved"))?,
            },
            ObservationKind::Decoder => ObservationSpec::MlpDecoder {
                hidden: self.decoder_hidden.clone(),
                output_dim: channels,
                sigmoid: Self::resolved(self.decoder_sigmoid, "decoder_sigmoid")?,
            },
        })
    }

    pub fn segmentation(&self) -> Result<Segmentation, CliError> {
        let horizon = Self::resolved(self.horizon, "horizon")?;
        let n = Self::resolved(self.segment_len, "segment_len")?;
        Segmentation::new(horizon, n).map_err(|e| usage(e.to_string()))
    }

    pub fn node_init(&self) -> Result<NodeInit, CliError> {
        Ok(match Self::resolved(self.node_init, "node_init")? {
            NodeInitKind::Zeros => NodeInit::Zeros,
            NodeInitKind::MeasurementPrefix => NodeInit::MeasurementPrefix,
        })
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            epochs: self.epochs,
            bump_epoch: self.bump_epoch,
            alpha_initial: self.alpha_initial,
            alpha_tilde: self.alpha_tilde,
            decay_epoch: self.decay_epoch,
            lr: self.lr,
            decay_factor: self.decay_factor,
            batch_size: self.batch_size,
        }
    }

    /// Filter settings; an unresolved measurement variance falls back to
    /// the library default.
    pub fn ukf(&self) -> UkfConfig {
        let d = UkfConfig::default();
        UkfConfig {
            a: self.ukf_a,
            b: self.ukf_b,
            k: self.ukf_k,
            initial_var: self.ukf_initial_var,
            measurement_var: self.ukf_measurement_var.unwrap_or(d.measurement_var),
            process_var: self.ukf_process_var,
            eig_floor: d.eig_floor,
        }
    }
}
