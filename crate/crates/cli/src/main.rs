//! `sare`: synthetic data, tuple mining, training, evaluation, gradient
//! checks and gradient fields from the command line.
//!
//! Every subcommand accepts `--config FILE` with a JSON object shaped like
//! the resolved configuration recorded in `run_meta.json`; flags given on
//! the command line win over the file.

mod config;
mod error;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use config::{LossFlags, Overrides};
use error::CliError;
use run::Finished;

/// Exit status of a gradient check that ran but exceeded its threshold.
pub const EXIT_CHECK_FAILED: i32 = 3;
const EXIT_ERROR: u8 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "sare",
    version,
    about = "Metric-embedding toolkit for place recognition"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic geo-tagged descriptor dataset.
    Synth(SynthArgs),
    /// Mine (query, positive, hard negatives) tuples and write them as CSV.
    Mine(MineArgs),
    /// Train an embedder and write the best checkpoint and the history.
    Train(TrainArgs),
    /// Evaluate a checkpoint: recall@N, mAP and top-K retrievals.
    Eval(EvalArgs),
    /// Compare analytic loss gradients with central differences on random tuples.
    Gradcheck(GradcheckArgs),
    /// Tabulate gradient magnitudes over (d(q,p), d(q,n)).
    Gradfield(GradfieldArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON configuration file; flags override its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossArg {
    Triplet,
    Contrastive,
    Sare,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KernelArg {
    Gaussian,
    Cauchy,
    Exponential,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Independent,
    Joint,
}

#[derive(Debug, Args)]
struct LossArgs {
    /// Objective family [file default: sare].
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// SARE kernel; implies `--loss sare` [default: gaussian].
    #[arg(long, value_enum)]
    kernel: Option<KernelArg>,
    /// SARE negative mode; implies `--loss sare` [default: joint].
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Triplet margin m [default: 0.1].
    #[arg(long)]
    margin_m: Option<f64>,
    /// Contrastive margin tau [default: 0.7].
    #[arg(long)]
    margin_tau: Option<f64>,
}

impl LossArgs {
    fn flags(&self) -> LossFlags {
        LossFlags {
            family: self.loss.map(|l| match l {
                LossArg::Triplet => "triplet_ranking",
                LossArg::Contrastive => "contrastive",
                LossArg::Sare => "sare",
            }),
            kernel: self.kernel.map(|k| match k {
                KernelArg::Gaussian => "gaussian",
                KernelArg::Cauchy => "cauchy",
                KernelArg::Exponential => "exponential",
            }),
            mode: self.mode.map(|m| match m {
                ModeArg::Independent => "independent",
                ModeArg::Joint => "joint",
            }),
            margin_m: self.margin_m,
            margin_tau: self.margin_tau,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ArchArg {
    Linear,
    OneHidden,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Embedder architecture [default: linear].
    #[arg(long, value_enum)]
    arch: Option<ArchArg>,
    /// Hidden layer width; implies `--arch one-hidden`.
    #[arg(long)]
    hidden_width: Option<usize>,
    /// Embedding dimension [default: 32].
    #[arg(long)]
    dim: Option<usize>,
}

impl ModelArgs {
    fn apply(&self, o: &mut Overrides, at: &str) -> Result<(), CliError> {
        let arch = match (self.arch, self.hidden_width) {
            (Some(ArchArg::Linear), Some(_)) => {
                return Err(CliError::config("--hidden-width needs --arch one-hidden"))
            }
            (Some(ArchArg::OneHidden), None) => {
                return Err(CliError::config("--arch one-hidden needs --hidden-width"))
            }
            (Some(ArchArg::Linear), None) => Some(serde_json::json!({ "kind": "linear" })),
            (_, Some(w)) => Some(serde_json::json!({ "kind": "one_hidden", "hidden_width": w })),
            (None, None) => None,
        };
        o.set_opt(&[at, "architecture"], arch);
        o.set_opt(&[at, "output_dim"], self.dim);
        Ok(())
    }
}

#[derive(Debug, Args)]
struct MiningArgs {
    /// Potential-positive radius in meters [default: 10].
    #[arg(long)]
    r_pos: Option<f64>,
    /// Minimum negative distance in meters [default: 25].
    #[arg(long)]
    r_neg: Option<f64>,
    /// Negatives per tuple [default: 10].
    #[arg(long)]
    n_neg: Option<usize>,
    /// Re-mine every this many epochs [default: 1].
    #[arg(long)]
    remine_every: Option<usize>,
}

impl MiningArgs {
    fn apply(&self, o: &mut Overrides, at: &[&str]) {
        let path = |leaf: &'static str| [at, &[leaf]].concat();
        o.set_opt(&path("r_pos"), self.r_pos);
        o.set_opt(&path("r_neg"), self.r_neg);
        o.set_opt(&path("n_neg"), self.n_neg);
        o.set_opt(&path("remine_every"), self.remine_every);
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Number of places [default: 100].
    #[arg(long)]
    n_places: Option<usize>,
    /// Database views per place [default: 10].
    #[arg(long)]
    views: Option<usize>,
    /// Queries per place [default: 3].
    #[arg(long)]
    queries: Option<usize>,
    /// Descriptor dimension [default: 64].
    #[arg(long)]
    d_in: Option<usize>,
    /// Per-view latent noise [default: 0.1].
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Side of the square map in meters [default: 2000].
    #[arg(long)]
    map_extent_m: Option<f64>,
    /// Random seed [default: 7].
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MineArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to embed with; a fresh model is initialized otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    shape: ModelArgs,
    /// Seed of the fresh model [default: 7].
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    mining: MiningArgs,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    shape: ModelArgs,
    #[command(flatten)]
    loss: LossArgs,
    /// Initial learning rate [default: 0.001].
    #[arg(long)]
    lr0: Option<f64>,
    /// Momentum [default: 0.9].
    #[arg(long)]
    momentum: Option<f64>,
    /// L2 weight decay [default: 0.001].
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Halve the learning rate every this many epochs [default: 5].
    #[arg(long)]
    lr_halving_period: Option<usize>,
    /// Tuples per SGD step [default: 4].
    #[arg(long)]
    batch_tuples: Option<usize>,
    /// Number of epochs [default: 30].
    #[arg(long)]
    epochs: Option<usize>,
    /// Seed for initialization and shuffling [default: 7].
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    mining: MiningArgs,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint file.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Query split [default: test].
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    /// Comma-separated N values for recall@N [default: 1,2,5,10,20,25].
    #[arg(long, value_delimiter = ',')]
    n_values: Option<Vec<usize>>,
    /// Geo-distance threshold in meters for queries of unknown place [default: 25].
    #[arg(long)]
    threshold_m: Option<f64>,
    /// Reduce embeddings to this many principal components first.
    #[arg(long)]
    pca_dim: Option<usize>,
    /// Ranked ids written per query [default: 25].
    #[arg(long)]
    top_k: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ArithmeticArg {
    Double,
    DoubleDouble,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    loss: LossArgs,
    /// Embedding dimension [default: 32].
    #[arg(long)]
    dim: Option<usize>,
    /// Negatives per tuple [default: 10].
    #[arg(long)]
    negatives: Option<usize>,
    /// Random tuples to check [default: 100].
    #[arg(long)]
    trials: Option<usize>,
    /// Difference step [default: 1e-7 in double-double, 1e-5 in double].
    #[arg(long)]
    eps: Option<f64>,
    /// Arithmetic of the differenced loss [default: double-double].
    #[arg(long, value_enum)]
    arithmetic: Option<ArithmeticArg>,
    /// Largest accepted relative error [default: 1e-6].
    #[arg(long)]
    threshold: Option<f64>,
    /// Random seed [default: 7].
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: .].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TargetArg {
    WrtP,
    WrtN,
}

#[derive(Debug, Args)]
struct GradfieldArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    loss: LossArgs,
    /// Gradient whose magnitude is tabulated [default: wrt-n].
    #[arg(long, value_enum)]
    target: Option<TargetArg>,
    /// Grid points per axis over [0, 2] [default: 201].
    #[arg(long)]
    resolution: Option<usize>,
    /// Write the d(q,n) slice at this d(q,p) instead of the surface.
    #[arg(long)]
    slice_dp: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn path_value(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.to_string_lossy().into_owned())
}

/// Resolves a config, runs it, and writes `run_meta.json` beside the outputs.
fn execute<T, F>(
    command: &str,
    common: &Common,
    overrides: Overrides,
    loss: Option<(&[&str], LossFlags)>,
    out_dir: impl Fn(&T) -> &Path,
    body: F,
) -> Result<i32, CliError>
where
    T: DeserializeOwned + Serialize,
    F: FnOnce(&T) -> Result<Finished, CliError>,
{
    let resolved: T = config::resolve(
        common.config.as_deref(),
        overrides,
        loss.as_ref().map(|(at, f)| (*at, f)),
    )?;
    let done = body(&resolved)?;
    run::write_run_meta(out_dir(&resolved), command, &resolved, &done)?;
    Ok(done.status)
}

fn dispatch(command: Command) -> Result<i32, CliError> {
    let mut o = Overrides::default();
    match command {
        Command::Synth(a) => {
            o.set_opt(&["synth", "n_places"], a.n_places);
            o.set_opt(&["synth", "views_per_place"], a.views);
            o.set_opt(&["synth", "queries_per_place"], a.queries);
            o.set_opt(&["synth", "d_in"], a.d_in);
            o.set_opt(&["synth", "view_noise_sigma"], a.noise_sigma);
            o.set_opt(&["synth", "map_extent_m"], a.map_extent_m);
            o.set_opt(&["synth", "seed"], a.seed);
            o.set_opt(&["out"], path_value(&a.out));
            execute(
                "synth",
                &a.common,
                o,
                None,
                |r: &run::SynthRun| &r.out,
                run::synth,
            )
        }
        Command::Mine(a) => {
            o.set_opt(&["data"], path_value(&a.data));
            o.set_opt(&["model"], path_value(&a.model));
            a.shape.apply(&mut o, "init")?;
            o.set_opt(&["seed"], a.seed);
            a.mining.apply(&mut o, &["mining"]);
            o.set_opt(&["out"], path_value(&a.out));
            execute(
                "mine",
                &a.common,
                o,
                None,
                |r: &run::MineRun| &r.out,
                run::mine,
            )
        }
        Command::Train(a) => {
            o.set_opt(&["data"], path_value(&a.data));
            a.shape.apply(&mut o, "init")?;
            o.set_opt(&["train", "lr0"], a.lr0);
            o.set_opt(&["train", "momentum"], a.momentum);
            o.set_opt(&["train", "weight_decay"], a.weight_decay);
            o.set_opt(&["train", "lr_halving_period"], a.lr_halving_period);
            o.set_opt(&["train", "batch_tuples"], a.batch_tuples);
            o.set_opt(&["train", "max_epochs"], a.epochs);
            o.set_opt(&["train", "seed"], a.seed);
            a.mining.apply(&mut o, &["train", "mining"]);
            o.set_opt(&["out"], path_value(&a.out));
            let loss = (&["train", "loss"][..], a.loss.flags());
            execute(
                "train",
                &a.common,
                o,
                Some(loss),
                |r: &run::TrainRun| &r.out,
                run::train_cmd,
            )
        }
        Command::Eval(a) => {
            o.set_opt(&["data"], path_value(&a.data));
            o.set_opt(&["model"], path_value(&a.model));
            o.set_opt(
                &["eval", "split"],
                a.split.map(|s| match s {
                    SplitArg::Train => "train",
                    SplitArg::Val => "val",
                    SplitArg::Test => "test",
                }),
            );
            o.set_opt(&["eval", "n_values"], a.n_values);
            o.set_opt(&["eval", "threshold_m"], a.threshold_m);
            o.set_opt(&["eval", "pca_dim"], a.pca_dim);
            o.set_opt(&["eval", "top_k"], a.top_k);
            o.set_opt(&["out"], path_value(&a.out));
            execute(
                "eval",
                &a.common,
                o,
                None,
                |r: &run::EvalRun| &r.out,
                run::eval,
            )
        }
        Command::Gradcheck(a) => {
            o.set_opt(&["check", "dim"], a.dim);
            o.set_opt(&["check", "negatives"], a.negatives);
            o.set_opt(&["check", "trials"], a.trials);
            o.set_opt(&["check", "eps"], a.eps);
            o.set_opt(
                &["check", "arithmetic"],
                a.arithmetic.map(|m| match m {
                    ArithmeticArg::Double => "double",
                    ArithmeticArg::DoubleDouble => "double_double",
                }),
            );
            o.set_opt(&["check", "seed"], a.seed);
            o.set_opt(&["threshold"], a.threshold);
            o.set_opt(&["out"], path_value(&a.out));
            let loss = (&["check", "loss"][..], a.loss.flags());
            execute(
                "gradcheck",
                &a.common,
                o,
                Some(loss),
                |r: &run::GradcheckRun| &r.out,
                run::gradcheck,
            )
        }
        Command::Gradfield(a) => {
            o.set_opt(
                &["target"],
                a.target.map(|t| match t {
                    TargetArg::WrtP => "wrt_p",
                    TargetArg::WrtN => "wrt_n",
                }),
            );
            o.set_opt(&["resolution"], a.resolution);
            o.set_opt(&["slice_dp"], a.slice_dp);
            o.set_opt(&["out"], path_value(&a.out));
            let loss = (&["loss"][..], a.loss.flags());
            execute(
                "gradfield",
                &a.common,
                o,
                Some(loss),
                |r: &run::GradfieldRun| &r.out,
                run::gradfield,
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(cli.command) {
        Ok(status) => ExitCode::from(u8::try_from(status).unwrap_or(EXIT_ERROR)),
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(EXIT_ERROR)
        }
    }
}
