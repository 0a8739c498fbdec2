//! Command implementations behind the `moe-sim` binary. Every command
//! validates its inputs before writing any file.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{ConfigError, GlobalConfig};
use crate::control::{
    grasp_compare, run_task, write_grasp_csv, Approach, ControlError, FeedbackMode, TaskKind, TaskResult, TaskScene,
    TaskSpec,
};
use crate::dataset::{self, CollectContext, DatasetError, DatasetFile};
use crate::estimator::{
    evaluate_rmse, read_checkpoint, train, write_checkpoint, Estimator, EstimatorError, EstimatorParams, Rmse,
    TrainOutcome, Variant,
};
use crate::mechanics::MechanicsError;
use crate::scene::{synth_demonstration, Demonstration, SceneError, Wig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Data {
        path: PathBuf,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("task aborted: {0}")]
    Aborted(String),
    #[error("writing {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 usage, config or solver; 3 missing or corrupt input; 4 training
    /// divergence; 5 task abort; 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Scene(_) => 2,
            CliError::Data { .. } => 3,
            CliError::Aborted(_) => 5,
            CliError::Estimator(EstimatorError::Diverged { .. }) => 4,
            CliError::Estimator(EstimatorError::InvalidTrainConfig(_) | EstimatorError::InvalidConfig(_)) => 2,
            CliError::Dataset(e) => match e {
                DatasetError::BadMagic
                | DatasetError::UnsupportedVersion(_)
                | DatasetError::Checksum { .. }
                | DatasetError::Truncated
                | DatasetError::Frame { .. }
                | DatasetError::FrameSize { .. }
                | DatasetError::Header(_) => 3,
                _ => 2,
            },
            CliError::Control(e) => match e {
                ControlError::InvalidConfig(_)
                | ControlError::InvalidTask(_)
                | ControlError::MissingEstimator
                | ControlError::Unreachable(_)
                | ControlError::Mechanics(_) => 2,
                ControlError::Estimator(EstimatorError::Diverged { .. }) => 4,
                _ => 1,
            },
            CliError::Estimator(_) | CliError::Write { .. } => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn data_err(path: &Path, e: impl std::error::Error + Send + Sync + 'static) -> CliError {
    CliError::Data { path: path.to_path_buf(), source: Box::new(e) }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| CliError::Write { path: path.to_path_buf(), source })
}

pub fn read_dataset(path: &Path) -> Result<DatasetFile> {
    dataset::read(path).map_err(|e| data_err(path, e))
}

pub fn read_params(path: &Path) -> Result<EstimatorParams> {
    let f = fs::File::open(path).map_err(|e| data_err(path, e))?;
    read_checkpoint(std::io::BufReader::new(f)).map_err(|e| data_err(path, e))
}

fn checkpoint_bytes(params: &EstimatorParams) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    Ok(buf)
}

/// Grasp comparison table for press depths in millimetres.
pub fn cmd_grasp_compare(config: &GlobalConfig, depths_mm: &[f64], out: &Path) -> Result<()> {
    if depths_mm.is_empty() || depths_mm.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
        return Err(CliError::Usage("depths must be positive".into()));
    }
    let depths: Vec<f64> = depths_mm.iter().map(|d| d * 1e-3).collect();
    let rows = grasp_compare(
        &config.end_effector(),
        &config.mechanics.rigid,
        &config.head(None),
        &config.controller.profile,
        &depths,
    )?;
    let mut buf = Vec::new();
    write_grasp_csv(&rows, &mut buf)?;
    write_file(out, &buf)
}

pub fn collect_dataset(config: &GlobalConfig, wig: Wig) -> Result<DatasetFile> {
    let ee = config.end_effector();
    let head = config.head(Some(wig));
    let ctx = CollectContext {
        sampler: &config.sampler,
        ee: &ee,
        head: &head,
        camera: &config.camera,
        current: &config.current_model,
    };
    Ok(dataset::collect(&ctx, wig.name())?)
}

pub fn cmd_collect(config: &GlobalConfig, wig: Wig, out: &Path) -> Result<()> {
    let file = collect_dataset(config, wig)?;
    write_file(out, &file.to_bytes())
}

/// Episode split used by both training and evaluation.
pub fn held_out(config: &GlobalConfig, file: &DatasetFile) -> Result<(Vec<dataset::Sample>, Vec<dataset::Sample>)> {
    let (tr, te) = dataset::split(file, config.train.test_fraction, config.train.seed)?;
    Ok((file.select(&tr), file.select(&te)))
}

pub fn train_on(config: &GlobalConfig, file: &DatasetFile, variant: Variant) -> Result<TrainOutcome> {
    let (tr, te) = held_out(config, file)?;
    Ok(train(&tr, &te, &config.train, variant)?)
}

pub fn cmd_train(
    config: &GlobalConfig,
    data: &Path,
    variant: Variant,
    out: &Path,
    history: Option<&Path>,
) -> Result<()> {
    let file = read_dataset(data)?;
    let outcome = train_on(config, &file, variant)?;
    log::info!("best validation loss at epoch {}", outcome.best_epoch);
    let ckpt = checkpoint_bytes(&outcome.params)?;
    let hist = match history {
        Some(_) => {
            let mut buf = Vec::new();
            outcome.history.write_csv(&mut buf)?;
            Some(buf)
        }
        None => None,
    };
    write_file(out, &ckpt)?;
    if let (Some(p), Some(b)) = (history, hist) {
        write_file(p, &b)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub wig: String,
    pub variant: Variant,
    pub seed: u64,
    pub rmse: Rmse,
}

/// Collect, train each variant and score it on held-out episodes, for
/// every wig and seed. Seeds drive collection, the split and training.
pub fn ablation(config: &GlobalConfig, seeds: &[u64]) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for wig in Wig::ALL {
        for &seed in seeds {
            let mut c = config.clone();
            c.sampler.seed = seed;
            c.train.seed = seed;
            let file = collect_dataset(&c, wig)?;
            let (tr, te) = held_out(&c, &file)?;
            for variant in Variant::ALL {
                let out = train(&tr, &te, &c.train, variant)?;
                let rmse = evaluate_rmse(&out.params, &te)?;
                log::info!("{wig} seed {seed} {variant}: rmse {:.4}", rmse.total);
                rows.push(EvalRow { wig: wig.name().into(), variant, seed, rmse });
            }
        }
    }
    Ok(rows)
}

fn eval_csv(rows: &[EvalRow]) -> Result<Vec<u8>> {
    let mut wr = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Estimator(e.into());
    wr.write_record(["wig", "variant", "rmse_total", "rmse_x", "rmse_y", "rmse_z"]).map_err(csv_err)?;
    for r in rows {
        let a = r.rmse.per_axis;
        wr.serialize((&r.wig, r.variant.name(), r.rmse.total, a[0], a[1], a[2])).map_err(csv_err)?;
    }
    wr.into_inner().map_err(|e| CliError::Estimator(EstimatorError::Io(e.into_error())))
}

/// Score checkpoints on the held-out episodes of their datasets.
pub fn cmd_eval(config: &GlobalConfig, pairs: &[(PathBuf, PathBuf)], out: &Path) -> Result<()> {
    if pairs.is_empty() {
        return Err(CliError::Usage("eval needs at least one --data/--checkpoint pair, or --full".into()));
    }
    let mut rows = Vec::new();
    for (data, ckpt) in pairs {
        let file = read_dataset(data)?;
        let params = read_params(ckpt)?;
        let (_, te) = held_out(config, &file)?;
        let rmse = evaluate_rmse(&params, &te)?;
        rows.push(EvalRow { wig: file.wig.clone(), variant: params.variant, seed: config.train.seed, rmse });
    }
    write_file(out, &eval_csv(&rows)?)
}

/// Full three-wig, three-variant table at the configured seed.
pub fn cmd_eval_full(config: &GlobalConfig, out: &Path) -> Result<()> {
    let rows = ablation(config, &[config.train.seed])?;
    write_file(out, &eval_csv(&rows)?)
}

pub struct RunTaskArgs<'a> {
    pub task: TaskKind,
    pub approach: Approach,
    pub mode: FeedbackMode,
    pub checkpoint: Option<&'a Path>,
    pub wig: Option<Wig>,
    pub demo: Option<&'a Path>,
    pub seed: u64,
    pub out: &'a Path,
    pub metrics: &'a Path,
}

pub fn load_demo(path: &Path) -> Result<Demonstration> {
    let f = fs::File::open(path).map_err(|e| data_err(path, e))?;
    Demonstration::read_csv(std::io::BufReader::new(f)).map_err(|e| data_err(path, e))
}

pub fn execute_task(config: &GlobalConfig, args: &RunTaskArgs<'_>) -> Result<TaskResult> {
    let head = config.head(args.wig);
    let spec = match args.task {
        TaskKind::Pat => TaskSpec::pat(args.approach),
        TaskKind::Grasp => TaskSpec::grasp(args.approach),
        TaskKind::Comb => TaskSpec::comb(match args.demo {
            Some(p) => load_demo(p)?,
            None => {
                let d = &config.scene.demonstration;
                synth_demonstration(&head, d.style, d.duration, args.seed)?
            }
        }),
    };
    spec.validate()?;
    let estimator = match (args.checkpoint, args.mode) {
        (Some(p), _) => Some(Estimator::new(read_params(p)?)?),
        (None, FeedbackMode::ForceFeedback) => {
            return Err(CliError::Usage("force-feedback mode needs --checkpoint".into()));
        }
        (None, FeedbackMode::VisionOnly) => None,
    };
    let ee = config.end_effector();
    let camera = config.task_camera();
    let scene = TaskScene {
        ee: &ee,
        head: &head,
        camera: &camera,
        current: &config.current_model,
        provider: &config.scene.pose,
    };
    Ok(run_task(&spec, args.mode, &scene, estimator.as_ref(), &config.controller, args.seed)?)
}

/// Runs a skill and writes its trace and metrics; an aborted run still
/// writes both and then reports the abort.
pub fn cmd_run_task(config: &GlobalConfig, args: &RunTaskArgs<'_>) -> Result<()> {
    let result = execute_task(config, args)?;
    let mut trace = Vec::new();
    result.write_trace_csv(&mut trace)?;
    let mut metrics = Vec::new();
    result.write_metrics_json(&mut metrics)?;
    metrics.push(b'\n');
    write_file(args.out, &trace)?;
    write_file(args.metrics, &metrics)?;
    if result.metrics.aborted {
        let reason = result.metrics.abort_reason.clone().unwrap_or_default();
        return Err(CliError::Aborted(reason));
    }
    Ok(())
}

impl From<MechanicsError> for CliError {
    fn from(e: MechanicsError) -> Self {
        CliError::Control(e.into())
    }
}
