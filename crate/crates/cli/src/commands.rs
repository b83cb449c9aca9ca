//! Subcommand implementations. Human-readable progress goes to `log`;
//! artifacts are written atomically (temporary file, then rename).

use crate::config::ExperimentConfig;
use crate::CliError;
use ssm_core::autodiff::Tensor;
use ssm_core::eval::{
    attractor_rollout, evaluate_testset, AttractorReport, BceConvention, BoundingBox, EvalError,
    PredictionReport,
};
use ssm_core::inference::UkfConfig;
use ssm_core::models::{Checkpoint, ModelParameters, CHECKPOINT_MAGIC};
use ssm_core::optim::{train, OptimError, TrainHistory, TrainOptions};
use ssm_core::shooting::ShootingNodeStore;
use ssm_core::systems::{
    generate_dataset, read_header, NormStats, TrajectoryDataset, DATASET_MAGIC,
};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const CHECKPOINT_FILE: &str = "model.ssmp";
pub const HISTORY_FILE: &str = "history.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const DATASET_FILE: &str = "train.ssmt";

const META_NORM_MEAN: &str = "meta.norm.mean";
const META_NORM_STD: &str = "meta.norm.std";
const META_NODE_UPDATES: &str = "meta.node_updates";

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let name = path
        .file_name()
        .ok_or_else(|| usage(format!("{} is not a file path", path.display())))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.partial"));
    let result = fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(usage(format!("cannot write {}: {e}", path.display())));
    }
    Ok(())
}

fn save_dataset(ds: &TrajectoryDataset, path: &Path) -> Result<(), CliError> {
    let mut bytes = Vec::new();
    ds.write_to(&mut bytes).map_err(|e| usage(e.to_string()))?;
    write_atomic(path, &bytes)
}

fn load_dataset(path: &Path) -> Result<TrajectoryDataset, CliError> {
    TrajectoryDataset::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn describe(ds: &TrajectoryDataset) -> String {
    format!(
        "N={} T={} p={} noise_std={}{}",
        ds.len(),
        ds.horizon(),
        ds.measurement_dim(),
        ds.noise_std(),
        if ds.is_image() { " (images)" } else { "" }
    )
}

/// Simulates the configured system and writes an `SSMT` file to `out`.
pub fn cmd_generate(
    config: &ExperimentConfig,
    out: &Path,
    log: &mut dyn Write,
) -> Result<TrajectoryDataset, CliError> {
    let c = config.resolve()?;
    let system = c
        .system_config()?
        .ok_or_else(|| usage("system \"file\" cannot be generated"))?;
    if c.trajectories == 0 {
        return Err(usage("\"trajectories\" must be positive"));
    }
    let ds = generate_dataset(&system, c.trajectories, c.data_seed);
    save_dataset(&ds, out)?;
    let _ = writeln!(log, "wrote {}: {}", out.display(), describe(&ds));
    Ok(ds)
}

pub fn load_norm_stats(ck: &Checkpoint) -> Option<NormStats> {
    let (mean, std) = (ck.get(META_NORM_MEAN)?, ck.get(META_NORM_STD)?);
    Some(NormStats {
        mean: mean.data().to_vec(),
        std: std.data().to_vec(),
    })
}

#[derive(Clone, Debug)]
pub struct TrainArtifacts {
    pub params: ModelParameters,
    pub nodes: ShootingNodeStore,
    pub history: TrainHistory,
    pub stats: NormStats,
    pub checkpoint: PathBuf,
    pub history_path: PathBuf,
    pub config_path: PathBuf,
}

/// Trains on `data` (or the config's dataset, or freshly generated data)
/// and writes checkpoint, history and resolved config into `out_dir`.
pub fn cmd_train(
    config: &ExperimentConfig,
    data: Option<&Path>,
    log: &mut dyn Write,
) -> Result<TrainArtifacts, CliError> {
    let c = config.resolve()?;
    fs::create_dir_all(&c.out_dir)
        .map_err(|e| usage(format!("cannot create {}: {e}", c.out_dir.display())))?;
    let raw = match (data, c.dataset.as_deref()) {
        (Some(p), _) | (None, Some(p)) => load_dataset(p)?,
        (None, None) => {
            let system = c.system_config()?.expect("generated system");
            let ds = generate_dataset(&system, c.trajectories, c.data_seed);
            let path = c.out_dir.join(DATASET_FILE);
            save_dataset(&ds, &path)?;
            let _ = writeln!(log, "generated {}: {}", path.display(), describe(&ds));
            ds
        }
    };
    let seg = c.segmentation()?;
    if raw.horizon() != seg.horizon() {
        return Err(usage(format!(
            "dataset has T={} but the config resolves to horizon {}",
            raw.horizon(),
            seg.horizon()
        )));
    }
    let tspec = c.transition_spec()?;
    let ospec = c.observation_spec(raw.measurement_dim())?;
    ospec
        .validate(tspec.state_dim())
        .map_err(|e| usage(e.to_string()))?;
    let (norm, stats) = raw.normalize().map_err(|e| usage(e.to_string()))?;
    let mut options = TrainOptions::new(c.schedule(), c.seed);
    options.group_size = c.group_size;
    let every = c.progress_every.max(1);
    let outcome = train(&norm, &tspec, &ospec, seg, c.node_init()?, &options, |r| {
        if r.epoch % every == 0 || r.epoch == 1 || r.epoch == c.epochs {
            let _ = writeln!(
                log,
                "epoch {:>5}  fit {:.6e}  defect {:.6e}  lr {:.1e}  alpha {:.1e}  {:.1}s",
                r.epoch, r.fit, r.defect, r.lr, r.alpha, r.seconds
            );
        }
    })
    .map_err(|e| match e {
        OptimError::NonFinite { .. } => CliError::Numerical(e.to_string()),
        other => usage(other.to_string()),
    })?;

    let mut ck = Checkpoint::default();
    ck.push_model(&outcome.params);
    outcome.nodes.push_to_checkpoint(&mut ck);
    ck.push(META_NORM_MEAN, Tensor::vector(&stats.mean));
    ck.push(META_NORM_STD, Tensor::vector(&stats.std));
    let counts: Vec<f64> = outcome
        .nodes
        .update_counts()
        .iter()
        .map(|&n| n as f64)
        .collect();
    ck.push(META_NODE_UPDATES, Tensor::vector(&counts));
    let mut bytes = Vec::new();
    ck.write_to(&mut bytes).map_err(|e| usage(e.to_string()))?;

    let checkpoint = c.out_dir.join(CHECKPOINT_FILE);
    let history_path = c.out_dir.join(HISTORY_FILE);
    let config_path = c.out_dir.join(CONFIG_FILE);
    write_atomic(&checkpoint, &bytes)?;
    write_atomic(&history_path, outcome.history.to_csv().as_bytes())?;
    write_atomic(&config_path, c.to_json().as_bytes())?;
    let _ = writeln!(
        log,
        "wrote {}, {} and {}",
        checkpoint.display(),
        history_path.display(),
        config_path.display()
    );
    Ok(TrainArtifacts {
        params: outcome.params,
        nodes: outcome.nodes,
        history: outcome.history,
        stats,
        checkpoint,
        history_path,
        config_path,
    })
}

/// Per-call evaluation settings; unset fields fall back to the config.
#[derive(Clone, Debug, Default)]
pub struct EvalArgs {
    pub filter_len: Option<usize>,
    pub horizon: Option<usize>,
    pub bce_convention: Option<BceConvention>,
    /// Artifacts go to `<prefix>.csv` and `<prefix>.json`.
    pub out_prefix: Option<PathBuf>,
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

/// Filter-then-forecast evaluation of `checkpoint` on `testset`.
pub fn cmd_eval(
    config: Option<&ExperimentConfig>,
    checkpoint: &Path,
    testset: &Path,
    args: &EvalArgs,
    log: &mut dyn Write,
) -> Result<PredictionReport, CliError> {
    let resolved = config.map(ExperimentConfig::resolve).transpose()?;
    let ck = load_checkpoint(checkpoint)?;
    let params = ck
        .to_model()
        .map_err(|e| usage(format!("{}: {e}", checkpoint.display())))?;
    let ds = load_dataset(testset)?;
    if !ds.has_ground_truth() {
        return Err(usage(format!(
            "{} has no ground-truth block; refusing to score forecasts against noisy measurements",
            testset.display()
        )));
    }
    let p = ds.measurement_dim();
    let out_dim = params.observation_spec().output_dim();
    if p != out_dim {
        return Err(usage(format!(
            "test set has {p} channels but the model emits {out_dim}"
        )));
    }
    let stats = load_norm_stats(&ck).unwrap_or_else(|| NormStats::identity(p));

    let from_cfg = |f: fn(&ExperimentConfig) -> Option<usize>| resolved.as_ref().and_then(f);
    let horizon = args
        .horizon
        .or_else(|| from_cfg(|c| c.eval_horizon))
        .unwrap_or(ds.horizon() / 2);
    let filter_len = args
        .filter_len
        .or_else(|| from_cfg(|c| c.filter_len))
        .unwrap_or(ds.horizon().saturating_sub(horizon));
    let convention = args
        .bce_convention
        .or_else(|| resolved.as_ref().map(|c| c.bce_convention.into()))
        .unwrap_or_default();
    let ukf = match &resolved {
        Some(c) => c.ukf(),
        None if ds.is_image() => UkfConfig::for_images(ds.noise_std()),
        None => UkfConfig::default(),
    };

    let report = evaluate_testset(&params, &ukf, &ds, &stats, filter_len, horizon, convention)
        .map_err(|e| match e {
            EvalError::Inference { .. } | EvalError::NonFiniteRollout { .. } => {
                CliError::Numerical(e.to_string())
            }
            other => usage(other.to_string()),
        })?;

    let prefix = match (&args.out_prefix, &resolved) {
        (Some(p), _) => p.clone(),
        (None, Some(c)) => c.out_dir.join("eval"),
        (None, None) => checkpoint.with_file_name("eval"),
    };
    write_atomic(&with_suffix(&prefix, ".csv"), report.to_csv().as_bytes())?;
    write_atomic(&with_suffix(&prefix, ".json"), report.to_json().as_bytes())?;
    let _ = write!(
        log,
        "{} trajectories, filter {} / horizon {}: mse {:.6} ± {:.6} (hold baseline {:.6})",
        report.per_trajectory.len(),
        filter_len,
        horizon,
        report.mse,
        report.mse_std,
        report.baseline_mse
    );
    if let (Some(b), Some(s)) = (report.bce, report.bce_std) {
        let _ = write!(log, ", bce {b:.6} ± {s:.6}");
    }
    let _ = writeln!(log, "\nwrote {}.{{csv,json}}", prefix.display());
    Ok(report)
}

/// Free rollout of `steps` transitions from shooting node
/// `(trajectory, segment)` of the checkpoint.
pub fn cmd_rollout(
    checkpoint: &Path,
    trajectory: usize,
    segment: usize,
    steps: usize,
    out: Option<&Path>,
    log: &mut dyn Write,
) -> Result<AttractorReport, CliError> {
    let ck = load_checkpoint(checkpoint)?;
    let params = ck
        .to_model()
        .map_err(|e| usage(format!("{}: {e}", checkpoint.display())))?;
    let nodes = ShootingNodeStore::from_checkpoint(&ck)
        .map_err(|e| usage(e.to_string()))?
        .ok_or_else(|| usage(format!("{} holds no shooting nodes", checkpoint.display())))?;
    let m = nodes.segmentation().segments();
    if trajectory >= nodes.len() || segment >= m {
        return Err(usage(format!(
            "node ({trajectory}, {segment}) out of range: {} trajectories × {m} segments",
            nodes.len()
        )));
    }
    let reference = BoundingBox::from_points(nodes.all_nodes()).expect("non-empty node store");
    let report = attractor_rollout(&params, nodes.node(trajectory, segment), steps, &reference)
        .map_err(|e| usage(e.to_string()))?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint.with_file_name("rollout.csv"));
    write_atomic(&path, report.to_csv().as_bytes())?;
    for i in 0..report.mean.len() {
        let _ = writeln!(
            log,
            "x{i}: min {:.6} max {:.6} mean {:.6} (nodes span [{:.6}, {:.6}])",
            report.min[i], report.max[i], report.mean[i], reference.min[i], reference.max[i]
        );
    }
    let _ = writeln!(log, "divergence: {}", u8::from(report.diverged));
    if let Some(s) = report.divergence_step {
        let _ = writeln!(log, "warning: rollout left the divergence box at step {s}");
    }
    let _ = writeln!(
        log,
        "wrote {} ({} states)",
        path.display(),
        report.states.len()
    );
    Ok(report)
}

/// Prints the header of a dataset or the tensor table of a checkpoint.
pub fn cmd_inspect(path: &Path, log: &mut dyn Write) -> Result<(), CliError> {
    let mut magic = [0u8; 4];
    fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if &magic == DATASET_MAGIC {
        let file = fs::File::open(path).map_err(|e| usage(e.to_string()))?;
        let h =
            read_header(&mut std::io::BufReader::new(file)).map_err(|e| usage(e.to_string()))?;
        let _ = writeln!(log, "dataset {}", path.display());
        let _ = writeln!(
            log,
            "trajectories {}\nhorizon {}\nchannels {}",
            h.len, h.horizon, h.dim
        );
        let _ = writeln!(
            log,
            "ground_truth {}\nimage {}\nnoise_std {}",
            h.has_truth, h.is_image, h.noise_std
        );
        if h.dim <= 8 {
            let _ = writeln!(
                log,
                "channel_mean {:?}\nchannel_std {:?}",
                h.stats.mean, h.stats.std
            );
        }
    } else if &magic == CHECKPOINT_MAGIC {
        let ck = load_checkpoint(path)?;
        let _ = writeln!(log, "checkpoint {}", path.display());
        match ck.model_specs() {
            Ok((t, o)) => {
                let _ = writeln!(log, "transition {t:?}\nobservation {o:?}");
            }
            Err(e) => {
                let _ = writeln!(log, "no model: {e}");
            }
        }
        let (mut node_count, mut scalars) = (0usize, 0usize);
        for (name, t) in &ck.tensors {
            scalars += t.numel();
            if name.starts_with("nodes.") {
                node_count += 1;
            } else {
                let _ = writeln!(log, "  {name} {:?}", t.shape());
            }
        }
        let _ = writeln!(
            log,
            "  nodes.* {node_count} tensors\n{scalars} scalars in {} tensors",
            ck.tensors.len()
        );
    } else {
        return Err(usage(format!(
            "{}: neither an SSMT dataset nor an SSMP checkpoint",
            path.display()
        )));
    }
    Ok(())
}
