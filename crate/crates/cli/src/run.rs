//! Resolved run configurations and the work each subcommand does.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use sare_core::dataset::{load_dataset, save_dataset, synth_generate, META_FILE, SPLIT_FILES};
use sare_core::embedder::{load_checkpoint, save_checkpoint, train, EpochRecord};
use sare_core::eval::{evaluate_split, EvalConfig};
use sare_core::gradcheck::{random_check, Arithmetic, GradCheckReport, RandomCheckConfig};
use sare_core::gradfield::{
    axis, grad_slice_fixed_dp, grad_surface, slice_to_csv, GradTarget, DEFAULT_RESOLUTION,
};
use sare_core::mining::{mine_tuples, tuples_to_csv, MiningConfig};
use sare_core::{Architecture, EmbedderModel, LossSpec, SynthConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::CliError;

pub const RUN_META_FILE: &str = "run_meta.json";
pub const TUPLES_FILE: &str = "tuples.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const TOPK_FILE: &str = "topk.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.json";
pub const SURFACE_FILE: &str = "surface.csv";
pub const SLICE_FILE: &str = "slice.csv";
pub const DEFAULT_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRun {
    #[serde(default)]
    pub synth: SynthConfig,
    pub out: PathBuf,
}

/// Shape of a freshly initialized embedder.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub architecture: Architecture,
    pub output_dim: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            architecture: Architecture::Linear,
            output_dim: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MineRun {
    pub data: PathBuf,
    /// Checkpoint to embed with; a fresh model of `init` shape otherwise.
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub init: ModelShape,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub mining: MiningConfig,
    pub out: PathBuf,
}

/// The model is initialized from `train.seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    pub data: PathBuf,
    #[serde(default)]
    pub init: ModelShape,
    #[serde(default)]
    pub train: TrainConfig,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRun {
    pub data: PathBuf,
    pub model: PathBuf,
    #[serde(default)]
    pub eval: EvalConfig,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckRun {
    #[serde(default)]
    pub check: RandomCheckConfig,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradfieldRun {
    #[serde(default)]
    pub loss: LossSpec,
    #[serde(default = "default_target")]
    pub target: GradTarget,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    /// Emit the one-dimensional slice at this `dp` instead of the surface.
    #[serde(default)]
    pub slice_dp: Option<f64>,
    pub out: PathBuf,
}

fn default_seed() -> u64 {
    7
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_out() -> PathBuf {
    PathBuf::from(".")
}

fn default_target() -> GradTarget {
    GradTarget::WrtN
}

fn default_resolution() -> usize {
    DEFAULT_RESOLUTION
}

/// What a subcommand left behind.
pub struct Finished {
    pub seed: Option<u64>,
    pub outputs: Vec<&'static str>,
    /// Exit code; nonzero when the run completed but a check failed.
    pub status: i32,
}

fn ok(seed: Option<u64>, outputs: Vec<&'static str>) -> Finished {
    Finished {
        seed,
        outputs,
        status: 0,
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

/// Writes `run_meta.json` into `dir`.
pub fn write_run_meta(
    dir: &Path,
    command: &str,
    config: &impl Serialize,
    done: &Finished,
) -> Result<(), CliError> {
    let meta = json!({
        "command": command,
        "seed": done.seed,
        "config": serde_json::to_value(config)?,
        "outputs": done.outputs,
        "versions": {
            "sare-cli": env!("CARGO_PKG_VERSION"),
            "sare-core": sare_core::VERSION,
        },
    });
    write(
        &dir.join(RUN_META_FILE),
        &(serde_json::to_string_pretty(&meta)? + "\n"),
    )
}

pub fn synth(run: &SynthRun) -> Result<Finished, CliError> {
    let ds = synth_generate(&run.synth)?;
    create_dir(&run.out)?;
    save_dataset(&ds, &run.out)?;
    info!(
        "wrote {} database and {} query descriptors to {}",
        ds.database.len(),
        ds.queries_train.len() + ds.queries_val.len() + ds.queries_test.len(),
        run.out.display()
    );
    let mut outputs = SPLIT_FILES.to_vec();
    outputs.push(META_FILE);
    Ok(ok(Some(run.synth.seed), outputs))
}

pub fn mine(run: &MineRun) -> Result<Finished, CliError> {
    let ds = load_dataset(&run.data)?;
    let (model, seed) = match &run.model {
        Some(path) => {
            let (m, header) = load_checkpoint(path)?;
            (m, header.seed)
        }
        None => {
            let m = EmbedderModel::new(
                run.init.architecture,
                ds.meta.d_in,
                run.init.output_dim,
                run.seed,
            )?;
            (m, run.seed)
        }
    };
    let tuples = mine_tuples(&ds, &model, &run.mining)?;
    create_dir(&run.out)?;
    write(&run.out.join(TUPLES_FILE), &tuples_to_csv(&tuples))?;
    info!("mined {} tuples", tuples.len());
    Ok(ok(Some(seed), vec![TUPLES_FILE]))
}

#[derive(Serialize)]
struct History<'a> {
    best_epoch: Option<usize>,
    epochs: &'a [EpochRecord],
}

pub fn train_cmd(run: &TrainRun) -> Result<Finished, CliError> {
    run.train.validate()?;
    let ds = load_dataset(&run.data)?;
    let init = EmbedderModel::new(
        run.init.architecture,
        ds.meta.d_in,
        run.init.output_dim,
        run.train.seed,
    )?;
    let outcome = train(&init, &ds, &run.train)?;
    create_dir(&run.out)?;
    save_checkpoint(
        &run.out.join(CHECKPOINT_FILE),
        &outcome.model,
        outcome.best_epoch,
    )?;
    let history = History {
        best_epoch: outcome.best_epoch,
        epochs: &outcome.history,
    };
    write(
        &run.out.join(HISTORY_FILE),
        &(serde_json::to_string_pretty(&history)? + "\n"),
    )?;
    Ok(ok(
        Some(run.train.seed),
        vec![CHECKPOINT_FILE, HISTORY_FILE],
    ))
}

pub fn eval(run: &EvalRun) -> Result<Finished, CliError> {
    let ds = load_dataset(&run.data)?;
    let (model, header) = load_checkpoint(&run.model)?;
    let outcome = evaluate_split(&model, &ds, &run.eval)?;
    create_dir(&run.out)?;
    write(&run.out.join(METRICS_FILE), &outcome.report.to_json()?)?;
    write(&run.out.join(TOPK_FILE), &outcome.top_k_csv())?;
    Ok(ok(Some(header.seed), vec![METRICS_FILE, TOPK_FILE]))
}

#[derive(Serialize)]
struct GradcheckSummary<'a> {
    passed: bool,
    threshold: f64,
    loss: &'a LossSpec,
    arithmetic: Arithmetic,
    #[serde(flatten)]
    report: &'a GradCheckReport,
    rejected: usize,
}

/// Prints the JSON report to stdout as well as writing it.
pub fn gradcheck(run: &GradcheckRun) -> Result<Finished, CliError> {
    if !(run.threshold > 0.0 && run.threshold.is_finite()) {
        return Err(CliError::config(format!(
            "threshold must be positive, got {}",
            run.threshold
        )));
    }
    let outcome = random_check(&run.check)?;
    let passed = outcome.report.passes(run.threshold);
    let summary = GradcheckSummary {
        passed,
        threshold: run.threshold,
        loss: &run.check.loss,
        arithmetic: run.check.arithmetic,
        report: &outcome.report,
        rejected: outcome.rejected,
    };
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    print!("{text}");
    create_dir(&run.out)?;
    write(&run.out.join(GRADCHECK_FILE), &text)?;
    Ok(Finished {
        seed: Some(run.check.seed),
        outputs: vec![GRADCHECK_FILE],
        status: if passed { 0 } else { crate::EXIT_CHECK_FAILED },
    })
}

pub fn gradfield(run: &GradfieldRun) -> Result<Finished, CliError> {
    run.loss.validate()?;
    let (name, text) = match run.slice_dp {
        Some(dp) => {
            let grid = axis(run.resolution);
            (
                SLICE_FILE,
                slice_to_csv(&grid, &grad_slice_fixed_dp(&run.loss, dp, &grid)?),
            )
        }
        None => (
            SURFACE_FILE,
            grad_surface(&run.loss, run.target, run.resolution)?.to_csv(),
        ),
    };
    create_dir(&run.out)?;
    write(&run.out.join(name), &text)?;
    Ok(ok(None, vec![name]))
}
