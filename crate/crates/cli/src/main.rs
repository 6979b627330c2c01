use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use layoutc_core::attention::GuidanceVariant;
use layoutc_core::parser::{CanvasMode, CoordEncoding};
use layoutc_core::prompt::CotVariant;
use thiserror::Error;

mod commands;
mod config;

use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    pub fn domain(e: impl std::fmt::Display) -> Self {
        Self::Domain(e.to_string())
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::Domain(format!("{}: {e}", path.display()))
    }
}

#[derive(Debug, Parser)]
#[command(name = "layoutc", version, about = "Layout prompting, parsing, attention masks and metrics")]
pub struct Cli {
    /// JSON run configuration; flags override its values
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads for commands that process several inputs
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render prompts
    #[command(subcommand)]
    Prompt(PromptCmd),
    /// Generate, parse and validate layouts
    #[command(subcommand)]
    Layout(LayoutCmd),
    /// Compile and check attention masks
    #[command(subcommand)]
    Mask(MaskCmd),
    /// Run the reference attention block
    #[command(subcommand)]
    Attn(AttnCmd),
    /// Layout and detection metrics
    #[command(subcommand)]
    Eval(EvalCmd),
}

#[derive(Debug, Subcommand)]
pub enum PromptCmd {
    /// Build the full prompt for a caption
    Build(PromptBuildArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct PromptArgs {
    /// Reasoning style of the examples: none, v1, v2, v3
    #[arg(long)]
    pub cot: Option<CotVariant>,
    /// Coordinate frame: 512 or unit
    #[arg(long)]
    pub canvas: Option<CanvasMode>,
    /// Box encoding: xyxy or xywh
    #[arg(long)]
    pub encoding: Option<CoordEncoding>,
    /// Number of in-context examples
    #[arg(long)]
    pub examples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PromptBuildArgs {
    #[arg(long)]
    pub caption: String,
    #[command(flatten)]
    pub prompt: PromptArgs,
    /// Write the rendered prompt here
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum LayoutCmd {
    /// Ask the configured provider for a layout
    Generate(GenerateArgs),
    /// Parse model responses into layout JSON
    Parse(ParseArgs),
    /// Check layout JSON files
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub caption: String,
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    #[arg(long)]
    pub timeout_secs: Option<u64>,
    /// Append request/response records to this JSON-lines log
    #[arg(long, value_name = "FILE")]
    pub capture: Option<PathBuf>,
    /// Answer from a capture log instead of calling the provider
    #[arg(long, value_name = "FILE", conflicts_with = "capture")]
    pub replay: Option<PathBuf>,
    /// Write the layout JSON here
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Write the raw completion text here
    #[arg(long, value_name = "FILE")]
    pub raw_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParseArgs {
    /// Response text files
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Caption to attach; defaults to the last "Caption:" line of each response
    #[arg(long)]
    pub caption: Option<String>,
    #[arg(long)]
    pub canvas: Option<CanvasMode>,
    #[arg(long)]
    pub encoding: Option<CoordEncoding>,
    /// Output file (single input only)
    #[arg(long, value_name = "FILE", conflicts_with = "out_dir")]
    pub out: Option<PathBuf>,
    /// Output directory, one `<stem>.layout.json` per input
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum MaskCmd {
    /// Compile cross and self masks for a layout
    Compile(CompileArgs),
    /// Compare compiled masks against the per-cell reference
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Args)]
pub struct BindArgs {
    /// Layout JSON
    #[arg(long, value_name = "FILE")]
    pub layout: PathBuf,
    /// Caption to bind against; defaults to the layout's caption
    #[arg(long)]
    pub caption: Option<String>,
    /// Externally produced tokens: {"tokens": [...], "spans": [[start, end], ...]}
    #[arg(long, value_name = "FILE")]
    pub tokens: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompileArgs {
    #[command(flatten)]
    pub bind: BindArgs,
    /// Cross-mask resolutions
    #[arg(long, value_delimiter = ',')]
    pub p: Option<Vec<usize>>,
    /// Self-mask resolutions
    #[arg(long, value_delimiter = ',')]
    pub self_p: Option<Vec<usize>>,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Random layouts are drawn from this seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of random layouts per resolution
    #[arg(long, default_value_t = 1000)]
    pub cases: usize,
    /// Resolutions to check
    #[arg(long, value_delimiter = ',')]
    pub p: Option<Vec<usize>>,
    /// Check this layout instead of random ones
    #[arg(long, value_name = "FILE")]
    pub layout: Option<PathBuf>,
    #[arg(long, requires = "layout")]
    pub caption: Option<String>,
    #[arg(long, value_name = "FILE", requires = "layout")]
    pub tokens: Option<PathBuf>,
    /// Also decode the mask files in this directory and compare them
    #[arg(long, value_name = "DIR", requires = "layout")]
    pub masks_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum AttnCmd {
    /// Toy denoising loop with layout-conditioned attention
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of denoising steps
    #[arg(long)]
    pub steps: Option<usize>,
    /// Leading fraction of steps that use the layout adapter
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Latent resolution
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub text_dim: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub inner: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    /// Adapter output gain (0 keeps the adapters inert)
    #[arg(long, default_value_t = 1.0)]
    pub gain: f64,
    #[arg(long)]
    pub variant: Option<GuidanceVariant>,
    #[arg(long)]
    pub g1: Option<f64>,
    #[arg(long)]
    pub g2: Option<f64>,
    #[arg(long)]
    pub g: Option<f64>,
    /// Skip the self-attention adapter
    #[arg(long)]
    pub no_self_mask: bool,
    /// Layout JSON; defaults to the first bundled example
    #[arg(long, value_name = "FILE")]
    pub layout: Option<PathBuf>,
    /// Load block weights from a fixture directory
    #[arg(long, value_name = "DIR")]
    pub weights: Option<PathBuf>,
    /// Save the generated block weights here
    #[arg(long, value_name = "DIR", conflicts_with = "weights")]
    pub save_weights: Option<PathBuf>,
    /// Write the trajectory here
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// Relaxed mean IoU over ground-truth/generated layout pairs
    Miou(PairsArgs),
    /// Fraction of ground-truth objects named in generated layouts
    Hitrate(PairsArgs),
    /// Share of caption entities found by a detector
    Gliprate(GlipArgs),
    /// Exact-count accuracy per numeral
    Count(CountArgs),
}

#[derive(Debug, Args)]
pub struct PairsArgs {
    /// JSON lines of {"id"?, "gt": layout, "gen": layout}
    #[arg(long, value_name = "FILE")]
    pub pairs: PathBuf,
    /// Write the full report (with per-item values) here
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GlipArgs {
    #[arg(long, value_name = "FILE")]
    pub entities: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub detections: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    /// JSON lines of {"image_id", "numeral", "target_phrase"}
    #[arg(long, value_name = "FILE")]
    pub cases: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub detections: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<commands::Outcome, CliError> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let workers = cli.workers.or(cfg.workers);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(CliError::domain)?;
    pool.install(|| commands::dispatch(cli.command, &cfg))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            if outcome.failed {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            println!("{}", serde_json::json!({ "ok": false, "error": e.to_string() }));
            ExitCode::from(1)
        }
    }
}
