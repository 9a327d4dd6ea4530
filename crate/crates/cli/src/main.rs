mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use rantrack::tracker::Modality;
use rantrack::PredictorKind;

#[derive(Parser, Debug)]
#[command(name = "rantrack", version, about = "Online multi-object tracking with recurrent autoregressive networks")]
struct Cli {
    /// Seed for data generation, initialization and sampling.
    #[arg(long, env = "RAN_SEED", default_value_t = 0, global = true)]
    seed: u64,
    /// TOML run configuration; its keys override the corresponding flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for pair scoring and batch gradients (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene: gt.txt, det.txt and features.txt.
    Synth(SynthArgs),
    /// Train a predictor on one or more scene directories.
    Train(TrainArgs),
    /// Track a scene with a trained checkpoint and write a results file.
    Track(TrackArgs),
    /// Score a results file against ground truth with CLEAR-MOT metrics.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Grid-search the association threshold by MOTA on held-out scenes.
    SearchThreshold(SearchArgs),
    /// Every predictor under every modality on a preset: a 12-row CSV.
    Ablate(ProtocolArgs),
    /// Retrain and evaluate for each external memory span.
    SweepSpan(SweepArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Scene preset: parallel, crossing or occlusion.
    #[arg(long, default_value = "crossing")]
    preset: String,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Predictor: ran, gru, ave or tiv.
    #[arg(long, default_value = "ran")]
    predictor: PredictorKind,
    /// External memory span K.
    #[arg(long, default_value_t = rantrack::model::DEFAULT_SPAN)]
    span: usize,
}

/// Optimizer and sampling flags shared by every training command. The
/// learning rate lives with each command since the defaults differ.
#[derive(Args, Debug, Clone)]
struct OptimArgs {
    /// Training iterations.
    #[arg(long, default_value_t = 300)]
    iterations: usize,
    /// Trajectories per iteration.
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Adam first-moment decay.
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    /// Adam second-moment decay.
    #[arg(long, default_value_t = 0.99)]
    beta2: f64,
    /// Adam denominator offset.
    #[arg(long, default_value_t = 1e-8)]
    adam_epsilon: f64,
    /// RnnDrop keep probability for hidden units.
    #[arg(long, default_value_t = 0.75)]
    keep_prob: f64,
    /// Shortest sampled training crop.
    #[arg(long, default_value_t = 8)]
    crop_min: usize,
    /// Longest sampled training crop.
    #[arg(long, default_value_t = 20)]
    crop_max: usize,
    /// Clip the batch gradient to this norm.
    #[arg(long)]
    max_grad_norm: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct TrackerArgs {
    /// Minimum association log score [default: the checkpoint's tuned value, else -60].
    #[arg(long, allow_hyphen_values = true)]
    threshold: Option<f64>,
    /// Gate radius as a multiple of the track box diagonal.
    #[arg(long, default_value_t = 2.0)]
    gate_factor: f64,
    /// Frames a track may stay lost before it is terminated.
    #[arg(long, default_value_t = 20)]
    t_terminate: u32,
    /// Detections below this confidence are dropped.
    #[arg(long, default_value_t = 0.0)]
    min_conf: f64,
    /// Association cues: a, m or am.
    #[arg(long, default_value = "am")]
    modality: Modality,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Scene directories to train on.
    #[arg(long = "data", required = false, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Checkpoint to write.
    #[arg(long, default_value = "model.json")]
    out: PathBuf,
    /// Loss curve CSV to write.
    #[arg(long, default_value = "loss.csv")]
    loss_csv: PathBuf,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args, Debug)]
struct TrackArgs {
    /// Checkpoint to track with.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Scene directory with det.txt and features.txt.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Results file to write.
    #[arg(long, default_value = "results.txt")]
    out: PathBuf,
    #[command(flatten)]
    tracker: TrackerArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Ground-truth file.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Results file.
    #[arg(long)]
    results: Option<PathBuf>,
    /// IoU needed for a match.
    #[arg(long, default_value_t = rantrack::metrics::DEFAULT_IOU_THRESHOLD)]
    iou: f64,
    /// Also write the report as `metric,value` CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Scene preset the test trajectory is drawn from.
    #[arg(long, default_value = "crossing")]
    preset: String,
    /// Central difference step.
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Check a seeded subset of this many coordinates.
    #[arg(long)]
    max_coords: Option<usize>,
}

#[derive(Args, Debug)]
struct SearchArgs {
    /// Checkpoint to tune.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Validation scene directories.
    #[arg(long = "data", num_args = 1..)]
    data: Vec<PathBuf>,
    /// Comma-separated thresholds [default: a grid from -1000 to 10].
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    grid: Vec<f64>,
    /// Write the `threshold,mota` curve here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Store the best threshold in the checkpoint.
    #[arg(long)]
    write_back: bool,
    #[command(flatten)]
    tracker: TrackerArgs,
}

#[derive(Args, Debug, Clone)]
struct ProtocolArgs {
    /// Scene preset for validation and test scenes.
    #[arg(long, default_value = "crossing")]
    preset: String,
    /// Scenes generated for training.
    #[arg(long, default_value_t = 16)]
    train_scenes: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = rantrack::experiments::PROTOCOL_LEARNING_RATE)]
    lr: f64,
    /// CSV output [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    tracker: TrackerArgs,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Comma-separated memory spans.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8,9,10,11,12")]
    spans: Vec<usize>,
    #[command(flatten)]
    protocol: ProtocolArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()?;
    }
    let ctx = commands::Context {
        seed: cli.seed,
        config: cli.config,
    };
    match cli.command {
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Track(a) => commands::track(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Gradcheck(a) => commands::gradcheck(&ctx, a),
        Command::SearchThreshold(a) => commands::search_threshold(&ctx, a),
        Command::Ablate(a) => commands::ablate(&ctx, a),
        Command::SweepSpan(a) => commands::sweep_span(&ctx, a),
    }
}
