mod commands;
mod render;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dipformer::Error;

/// RGB-D road and scene segmentation toolkit.
#[derive(Parser, Debug)]
#[command(name = "dipformer", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic RGB-D dataset and its manifest.
    Synth(SynthArgs),
    /// Train a model and write checkpoints plus the loss history.
    Train(TrainArgs),
    /// Score a checkpoint on a labeled manifest.
    Eval(EvalArgs),
    /// Predict one image pair; optionally render an attention map.
    Infer(InferArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Count multiply-adds per module at several input sizes.
    Bench(BenchArgs),
    /// Train and score several model variants on the same data.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 4)]
    pub n_cls: usize,
    /// Share of confusable objects whose classes differ only in depth.
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// key=value file with `model.` and `train.` prefixed keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seeds both the initialization and the data order.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Manifest scored at every evaluation step.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Report file; stdout always receives a copy.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Adds threshold-swept binary metrics for this class.
    #[arg(long)]
    pub positive_class: Option<u8>,
    #[arg(long, default_value_t = 256)]
    pub thresholds: usize,
    /// Precision/recall curve CSV (needs --positive-class).
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub rgb: PathBuf,
    #[arg(long)]
    pub depth: PathBuf,
    /// Color-coded prediction.
    #[arg(long)]
    pub out_mask: PathBuf,
    /// Raw class indices as a grayscale PNG.
    #[arg(long)]
    pub out_labels: Option<PathBuf>,
    #[arg(long)]
    pub out_attn: Option<PathBuf>,
    /// 1-based stage for the attention map.
    #[arg(long, default_value_t = 1)]
    pub stage: usize,
    /// Row-major pixel index at the stage's resolution.
    #[arg(long, default_value_t = 0)]
    pub query: usize,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub ops: bool,
    #[arg(long)]
    pub end_to_end: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Parameters sampled by the end-to-end check.
    #[arg(long, default_value_t = 40)]
    pub params: usize,
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub sizes: Vec<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out manifest; defaults to the training data.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "baseline,sao,lca,sao+lca")]
    pub arms: Vec<String>,
    /// Classes whose mean IoU gets its own column.
    #[arg(long, value_delimiter = ',')]
    pub focus: Vec<u8>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

/// What a verb reports when it ran to completion.
pub enum Outcome {
    Ok,
    CheckFailed,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NonFiniteLoss { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DIPF_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Ablate(a) => commands::ablate(&a),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
