use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use nntc_core::architectures::ResidualChainModel;
use nntc_core::checkpoint::{load_checkpoint, load_for, save_checkpoint, Precision};
use nntc_core::codec::{
    decode_image, decode_progressive, encode_dynamic, encode_image, encode_with_budget, Bitstream, Metric, QualityTarget,
};
use nntc_core::eval::{psnr, rd_csv, rd_curve, ssim_image};
use nntc_core::image::Image;
use nntc_core::trainer::{ingest_images, patch_pool, train, Adam, Dataset, DatasetSpec};

mod config;

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] nntc_core::Error),
    #[error("config: {0}")]
    Config(serde_json::Error),
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
}

type Result<T> = std::result::Result<T, CliError>;

/// Progressive image compression with recurrent networks.
#[derive(Parser)]
#[command(name = "nntc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Downsample a directory of images to 32x32 and split it into train/eval.
    PrepareData(PrepareArgs),
    /// Train a model from a JSON run config.
    Train(TrainArgs),
    /// Compress a PNG into an NNTC stream.
    Encode(EncodeArgs),
    /// Decode an NNTC stream to PNG.
    Decode(DecodeArgs),
    /// Write one PNG per iteration prefix of a stream.
    Progressive(ProgressiveArgs),
    /// Compare a reconstruction against its reference (SSIM and PSNR).
    Evaluate(EvaluateArgs),
    /// Sweep iteration counts over a prepared dataset and emit CSV.
    RdCurve(RdCurveArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Directory searched recursively for images.
    #[arg(long)]
    input: PathBuf,
    /// Output directory; receives train/ and eval/.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 0.9)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run config with "model" and "train" sections.
    #[arg(long)]
    config: PathBuf,
    /// Directory written by prepare-data.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    output: PathBuf,
    /// Continue from this checkpoint (model config must match).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the effective config (defaults filled in) to this path.
    #[arg(long)]
    dump_config: Option<PathBuf>,
    /// Store parameters as f32.
    #[arg(long)]
    f32: bool,
}

#[derive(Args)]
#[group(skip)]
#[command(group(ArgGroup::new("rate").required(true).args(["iterations", "bytes", "psnr", "ssim"])))]
struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Uniform iteration count for every patch.
    #[arg(long)]
    iterations: Option<usize>,
    /// Payload budget in bytes; the header is not counted.
    #[arg(long)]
    bytes: Option<usize>,
    /// Per-patch PSNR target in dB (dynamic allocation).
    #[arg(long)]
    psnr: Option<f64>,
    /// Per-patch SSIM target (dynamic allocation).
    #[arg(long)]
    ssim: Option<f64>,
    /// Lower bound on iterations per patch for dynamic allocation.
    #[arg(long, default_value_t = 1)]
    min_iterations: usize,
    /// Upper bound on iterations per patch for dynamic allocation; defaults to the model maximum.
    #[arg(long)]
    max_iterations: Option<usize>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct ProgressiveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    candidate: PathBuf,
    #[arg(long, default_value_t = 3)]
    channels: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Eval,
}

#[derive(Args)]
struct RdCurveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory written by prepare-data.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated iteration counts.
    #[arg(long, value_delimiter = ',', required = true)]
    iterations: Vec<usize>,
    #[arg(long, value_enum, default_value_t = Split::Eval)]
    split: Split,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::Io(path.display().to_string(), e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::Io(path.display().to_string(), e))
}

fn load_model(path: &Path) -> Result<ResidualChainModel> {
    Ok(load_checkpoint(path)?.model)
}

fn prepare_data(a: PrepareArgs) -> Result<()> {
    let spec = DatasetSpec { source: a.input, channels: a.channels, train_fraction: a.train_fraction, seed: a.seed };
    let data = ingest_images(&spec)?;
    data.save(&a.output)?;
    println!("train={} eval={} rejected={} unreadable={}", data.train.len(), data.eval.len(), data.rejected, data.unreadable);
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(lr) = a.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(steps) = a.steps {
        cfg.train.steps = steps;
    }
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    cfg.train.validate()?;
    if let Some(path) = &a.dump_config {
        write_file(path, cfg.to_json().as_bytes())?;
    }
    let (mut model, mut adam) = match &a.resume {
        Some(path) => {
            let ck = load_for(path, &cfg.model)?;
            let adam = ck.adam.unwrap_or_else(|| Adam::new(ck.model.params()));
            (ck.model, adam)
        }
        None => {
            let model = ResidualChainModel::build(cfg.model.clone(), cfg.train.seed)?;
            let adam = Adam::new(model.params());
            (model, adam)
        }
    };
    let data = Dataset::load(&a.data, cfg.model.channels)?;
    let pool = patch_pool(&data.train, cfg.model.patch_size)?;
    train(&mut model, &pool, &cfg.train, &mut adam, |r| println!("{r}"))?;
    let precision = if a.f32 { Precision::F32 } else { Precision::F64 };
    save_checkpoint(&a.output, &model, Some(&adam), precision)?;
    Ok(())
}

fn encode(a: EncodeArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let img = Image::load_png(&a.input, model.config().channels)?;
    let dynamic = |metric, threshold| QualityTarget {
        metric,
        threshold,
        min_iterations: a.min_iterations,
        max_iterations: a.max_iterations.unwrap_or(model.config().max_iterations),
    };
    let stream = match (a.iterations, a.bytes, a.psnr, a.ssim) {
        (Some(n), ..) => encode_image(&model, &img, n)?,
        (_, Some(b), ..) => encode_with_budget(&model, &img, b)?,
        (_, _, Some(t), _) => encode_dynamic(&model, &img, &dynamic(Metric::Psnr, t))?,
        (_, _, _, Some(t)) => encode_dynamic(&model, &img, &dynamic(Metric::Ssim, t))?,
        _ => unreachable!("clap requires one rate flag"),
    };
    let bytes = stream.to_bytes();
    write_file(&a.output, &bytes)?;
    println!("payload_bytes={} total_bytes={}", stream.payload().len(), bytes.len());
    Ok(())
}

fn read_stream(path: &Path) -> Result<Bitstream> {
    Ok(Bitstream::from_bytes(&read_file(path)?)?)
}

fn decode(a: DecodeArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let stream = read_stream(&a.input)?;
    decode_image(&model, &stream)?.save_png(&a.output)?;
    Ok(())
}

fn progressive(a: ProgressiveArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let stream = read_stream(&a.input)?;
    let frames = decode_progressive(&model, &stream)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| CliError::Io(a.out_dir.display().to_string(), e))?;
    let digits = frames.len().to_string().len().max(2);
    for (t, frame) in frames.iter().enumerate() {
        frame.save_png(&a.out_dir.join(format!("step_{:0digits$}.png", t + 1)))?;
    }
    println!("frames={}", frames.len());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let reference = Image::load_png(&a.reference, a.channels)?;
    let candidate = Image::load_png(&a.candidate, a.channels)?;
    let report = ssim_image(&reference, &candidate)?;
    println!("ssim={} psnr={}", report.mean, psnr(&reference, &candidate, 255.0)?);
    Ok(())
}

fn run_rd_curve(a: RdCurveArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let data = Dataset::load(&a.data, model.config().channels)?;
    let images = match a.split {
        Split::Train => &data.train,
        Split::Eval => &data.eval,
    };
    let csv = rd_csv(&rd_curve(&model, images, &a.iterations)?);
    match &a.output {
        Some(path) => write_file(path, csv.as_bytes()),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareData(a) => prepare_data(a),
        Command::Train(a) => run_train(a),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Progressive(a) => progressive(a),
        Command::Evaluate(a) => evaluate(a),
        Command::RdCurve(a) => run_rd_curve(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
