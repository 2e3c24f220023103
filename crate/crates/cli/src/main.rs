use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Debug, Parser)]
#[command(name = "awdiff", version, about = "Wavelet-conditioned diffusion on synthetic ultrasound phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labelled phantom dataset directory.
    Phantom(PhantomArgs),
    /// Decompose an image into starlet planes.
    Decompose(DecomposeArgs),
    /// Print the β / ᾱ table of a linear schedule as CSV.
    Schedule(ScheduleArgs),
    /// Train the denoiser on a dataset directory.
    Train(TrainArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Score generated images against originals.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    /// Largest B-line count in the cycling label set.
    #[arg(long, default_value_t = 4)]
    max_blines: usize,
    #[arg(long, default_value_t = 0.2)]
    speckle_sigma: f64,
}

#[derive(Debug, Args)]
struct DecomposeArgs {
    input: PathBuf,
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    scales: usize,
}

#[derive(Debug, Args)]
struct ScheduleArgs {
    #[arg(long = "T", default_value_t = awdiff::diffusion::DEFAULT_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = awdiff::diffusion::DEFAULT_BETA_START)]
    beta_start: f64,
    #[arg(long, default_value_t = awdiff::diffusion::DEFAULT_BETA_END)]
    beta_end: f64,
    /// Write to a file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory with `images/` and `labels.tsv`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, `loss.csv` and `final/`.
    #[arg(long)]
    out: PathBuf,
    /// `key = value` configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from the latest checkpoint under `--out`.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scales: Option<usize>,
    #[arg(long = "T")]
    steps_t: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    ema_decay: Option<f64>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    /// Checkpoint directory (e.g. `<train out>/final`).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image whose starlet planes condition the sampler.
    #[arg(long)]
    reference: PathBuf,
    /// Label prompt, embedded with the toy text encoder.
    #[arg(long, conflicts_with = "embedding")]
    label: Option<String>,
    /// External embedding vector file.
    #[arg(long)]
    embedding: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Sample with the raw weights instead of the EMA shadow.
    #[arg(long)]
    no_ema: bool,
    /// `beta` or `beta_tilde`.
    #[arg(long, default_value = "beta")]
    variance: String,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory of original `.pgm` images.
    #[arg(long)]
    originals: PathBuf,
    /// Directory of generated `.pgm` images, paired by sorted order.
    #[arg(long)]
    generated: PathBuf,
    /// Output directory for `metrics.csv` and `histogram.txt`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    scales: usize,
    #[arg(long, default_value_t = 20)]
    bins: usize,
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("AWDIFF_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| format!("AWDIFF_THREADS must be a non-negative integer, got {raw:?}"))?;
    #[cfg(feature = "parallel")]
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn run(cli: Cli) -> Result<(), String> {
    configure_threads()?;
    let r = match cli.command {
        Command::Phantom(a) => commands::phantom(&a),
        Command::Decompose(a) => commands::decompose(&a.input, &a.out, a.scales),
        Command::Schedule(a) => commands::schedule(&a),
        Command::Train(a) => commands::train(&a),
        Command::Sample(a) => commands::sample(&a),
        Command::Eval(a) => commands::eval(&a),
    };
    r.map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {}", msg.lines().next().unwrap_or_default());
            ExitCode::from(1)
        }
    }
}

fn ensure_dir(dir: &Path) -> awdiff::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| awdiff::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}
