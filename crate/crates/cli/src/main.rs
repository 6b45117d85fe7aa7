mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use morphfit::texture::FusionMode;
use morphfit::tracker::BoundingBox;

#[derive(Parser)]
#[command(
    name = "morphfit",
    version,
    about = "Fit a morphable face model to video and fuse its texture"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic model, a rendered test sequence and a tracker training set.
    Synth(SynthArgs),
    /// Train a cascaded landmark regressor from PNG images with .pts landmarks.
    TrainTracker(TrainArgs),
    /// Fit shape, expression and camera to one image with known landmarks.
    FitImage(FitImageArgs),
    /// Track, fit and fuse a directory of frames.
    TrackVideo(TrackVideoArgs),
    /// Re-fuse frames from stored per-frame fits.
    Fuse(FuseArgs),
    /// Render the fitted face from a new viewpoint.
    Render(RenderArgs),
    /// Landmark error relative to the ground-truth outer-eye-corner distance.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    frames: usize,
    /// Yaw range of the sequence is ±this many degrees.
    #[arg(long, default_value_t = 30.0)]
    yaw: f64,
    #[arg(long, default_value_t = 160)]
    width: usize,
    #[arg(long, default_value_t = 160)]
    height: usize,
    /// Number of tracker training images.
    #[arg(long, default_value_t = 50)]
    train_count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of PNG images, each with a .pts file of the same stem.
    #[arg(long)]
    data: PathBuf,
    /// Output cascade file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    stages: usize,
    /// Perturbed initializations per training image.
    #[arg(long, default_value_t = 10)]
    perturbations: usize,
    /// Ridge weight relative to the mean squared feature norm.
    #[arg(long, default_value_t = 1e-3)]
    ridge: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FitImageArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    mapping: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    landmarks: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    resolution: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 3)]
    outer_iterations: usize,
}

#[derive(Args)]
struct TrackVideoArgs {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Directory of PNG frames, processed in name order.
    #[arg(long)]
    frames: PathBuf,
    /// Face box of the first frame as x,y,width,height.
    #[arg(long, value_parser = parse_box)]
    face_box: BoundingBox,
    /// Overrides the output directory of the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    frames: PathBuf,
    /// frames.jsonl written by track-video.
    #[arg(long)]
    records: PathBuf,
    #[arg(long, value_parser = parse_mode, default_value = "average")]
    mode: FusionMode,
    /// Fusion super-resolution factor.
    #[arg(long)]
    super_resolution: Option<usize>,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    model: PathBuf,
    /// fit.json from fit-image or frames.jsonl from track-video.
    #[arg(long)]
    fit: PathBuf,
    /// Texture (isomap) PNG.
    #[arg(long)]
    texture: PathBuf,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    yaw: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pitch: f64,
    /// Drop the expression and render the identity alone.
    #[arg(long)]
    neutral: bool,
    #[arg(long, default_value_t = 512)]
    width: usize,
    #[arg(long, default_value_t = 512)]
    height: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted landmarks: a .pts file, a directory of .pts files or frames.jsonl.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth landmarks in the same forms.
    #[arg(long)]
    gt: PathBuf,
    /// Write the report as JSON to this path, or to stdout with "-".
    #[arg(long)]
    json: Option<PathBuf>,
}

fn parse_box(s: &str) -> Result<BoundingBox, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("'{t}': {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, width, height] if width > 0.0 && height > 0.0 => Ok(BoundingBox {
            x,
            y,
            width,
            height,
        }),
        [_, _, _, _] => Err("box width and height must be positive".into()),
        _ => Err(format!("expected x,y,width,height, got {} values", v.len())),
    }
}

fn parse_mode(s: &str) -> Result<FusionMode, String> {
    s.parse().map_err(|e: morphfit::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::TrainTracker(a) => commands::train_tracker(a),
        Command::FitImage(a) => commands::fit_image(a),
        Command::TrackVideo(a) => commands::track_video(a),
        Command::Fuse(a) => commands::fuse(a),
        Command::Render(a) => commands::render(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
