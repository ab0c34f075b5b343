//! `vetocert`: plan masks, certify images, evaluate datasets and fuzz the
//! detection guarantee.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 uncertifiable geometry,
//! 3 soundness violation.

mod commands;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vetocert::AdversaryGeometry;

/// Image or raw-file dimensions disagree with the model.
#[derive(Debug)]
pub struct GeometryMismatch(pub String);

impl std::fmt::Display for GeometryMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "geometry mismatch: {}", self.0)
    }
}

impl std::error::Error for GeometryMismatch {}

#[derive(Parser, Debug)]
#[command(name = "vetocert", version, about = "Certified patch detection for Vision Transformers")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true, env = "VETOCERT_THREADS", value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the mask plan for a geometry.
    Plan(PlanArgs),
    /// Certify one image or every image in a directory.
    Certify(CertifyArgs),
    /// Certify a labelled dataset and report the metrics.
    Evaluate(EvaluateArgs),
    /// Attack a dataset with patches and check the detection guarantee.
    Fuzz(FuzzArgs),
    /// Re-run a counterexample written by `fuzz`.
    Replay(ReplayArgs),
    /// Write deterministic random weights for a toy model.
    Init(InitArgs),
    /// Write a synthetic PNG dataset with a manifest.
    Synth(SynthArgs),
}

fn positive() -> clap::builder::RangedU64ValueParser<usize> {
    clap::builder::RangedU64ValueParser::<usize>::new().range(1..)
}

/// Adversary size: `--adv-size S`, or both `--adv-width` and `--adv-height`.
#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = true)]
pub struct AdvArgs {
    /// Square adversary side in pixels.
    #[arg(long, value_parser = positive(), conflicts_with_all = ["adv_width", "adv_height"])]
    adv_size: Option<usize>,
    #[arg(long, value_parser = positive(), requires = "adv_height")]
    adv_width: Option<usize>,
    #[arg(long, value_parser = positive(), requires = "adv_width")]
    adv_height: Option<usize>,
}

impl AdvArgs {
    pub fn geometry(&self) -> vetocert::Result<AdversaryGeometry> {
        match (self.adv_size, self.adv_width, self.adv_height) {
            (Some(s), _, _) => AdversaryGeometry::square(s),
            (None, Some(w), Some(h)) => AdversaryGeometry::new(w, h),
            _ => unreachable!("clap enforces the adversary group"),
        }
    }
}

#[derive(Args, Debug)]
pub struct PlanArgs {
    /// Square image side; overridden per axis by --image-width/--image-height.
    #[arg(long, default_value_t = 224, value_parser = positive())]
    image_size: usize,
    #[arg(long, value_parser = positive())]
    image_width: Option<usize>,
    #[arg(long, value_parser = positive())]
    image_height: Option<usize>,
    #[arg(long, default_value_t = 16, value_parser = positive())]
    patch_size: usize,
    #[command(flatten)]
    adv: AdvArgs,
    /// Print the full plan document as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
pub struct CertifyArgs {
    /// PVWT weight file.
    #[arg(long)]
    weights: PathBuf,
    /// Image file, or a directory to certify every image in (JSONL output).
    #[arg(long)]
    input: PathBuf,
    /// Read inputs as raw little-endian f32 HWC tensors.
    #[arg(long)]
    raw: bool,
    #[command(flatten)]
    adv: AdvArgs,
    /// Output path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Masked passes run concurrently at most.
    #[arg(long, default_value_t = vetocert::certify::DEFAULT_BATCH_CAP, value_parser = positive())]
    batch_cap: usize,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    weights: PathBuf,
    /// CSV with a `path,label` header or a JSON array of {path, label}.
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    adv: AdvArgs,
    /// Metrics JSON (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// One JSON line per manifest entry.
    #[arg(long)]
    per_sample: Option<PathBuf>,
    /// CSV summary: id,label,prediction,verified,num_dissent.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = vetocert::certify::DEFAULT_BATCH_CAP, value_parser = positive())]
    batch_cap: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum FuzzMode {
    Random,
    Greedy,
}

#[derive(Args, Debug)]
pub struct FuzzArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    adv: AdvArgs,
    /// Random trials per image, or greedy runs per image.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Hill-climbing steps per greedy run.
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = FuzzMode::Random)]
    mode: FuzzMode,
    /// Only attack images whose clean prediction is verified.
    #[arg(long)]
    skip_unverified: bool,
    /// Report JSON (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Where counterexamples go (default: `counterexamples` next to --out,
    /// or in the working directory).
    #[arg(long)]
    bundle_dir: Option<PathBuf>,
    /// Include every trial in the report.
    #[arg(long)]
    verbose: bool,
    /// Test-only: run the masked passes without masking.
    #[arg(long, hide = true)]
    disable_masks: bool,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Counterexample JSON written by `fuzz`.
    #[arg(long)]
    bundle: PathBuf,
}

#[derive(Args, Debug)]
pub struct InitArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 24, value_parser = positive())]
    image_size: usize,
    #[arg(long, default_value_t = 3, value_parser = positive())]
    channels: usize,
    #[arg(long, default_value_t = 4, value_parser = positive())]
    patch_size: usize,
    #[arg(long, default_value_t = 32, value_parser = positive())]
    embed_dim: usize,
    #[arg(long, default_value_t = 2, value_parser = positive())]
    layers: usize,
    #[arg(long, default_value_t = 4, value_parser = positive())]
    heads: usize,
    #[arg(long, default_value_t = 64, value_parser = positive())]
    mlp_dim: usize,
    #[arg(long, default_value_t = 10, value_parser = clap::builder::RangedU64ValueParser::<usize>::new().range(2..))]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Larger initial scale; patches flip predictions more easily.
    #[arg(long)]
    fragile: bool,
    /// Standard deviation of the truncated-normal draws.
    #[arg(long)]
    std: Option<f64>,
    #[arg(long)]
    patch_gain: Option<f64>,
    #[arg(long)]
    attention_gain: Option<f64>,
    #[arg(long)]
    head_gain: Option<f64>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    /// The model's own prediction on the written image.
    Predicted,
    /// Uniform over the classes.
    Random,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Model whose geometry (and, for predicted labels, predictions) to use.
    #[arg(long)]
    weights: PathBuf,
    /// Output directory; receives PNGs and manifest.csv.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 20, value_parser = positive())]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = LabelMode::Predicted)]
    labels: LabelMode,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<GeometryMismatch>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<vetocert::Error>() {
            if e.is_geometry() {
                return 2;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Plan(a) => commands::plan(&a),
        Command::Certify(a) => commands::certify(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Fuzz(a) => commands::fuzz(&a),
        Command::Replay(a) => commands::replay(&a),
        Command::Init(a) => commands::init(&a),
        Command::Synth(a) => commands::synth(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
