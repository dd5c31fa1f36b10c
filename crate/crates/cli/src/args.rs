use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "hdrev",
    version,
    about = "Single-image HDR reconstruction toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write procedural HDR scenes as PFM files.
    Scenes(ScenesArgs),
    /// Synthesize an LDR/HDR training set from a directory of PFM files.
    Synth(SynthArgs),
    /// Create a freshly initialised model bundle.
    Init(InitArgs),
    /// Train one stage of a model bundle.
    Train(TrainArgs),
    /// Reconstruct an HDR image from an 8-bit PPM.
    Infer(InferArgs),
    /// Score a bundle on the test split of a dataset.
    Eval(EvalArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Inverse camera response utilities.
    #[command(subcommand)]
    Crf(CrfCommand),
}

#[derive(Args, Debug)]
pub struct ScenesArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Directory of source `.pfm` radiance maps.
    #[arg(long)]
    pub hdr: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of exposure times, spaced evenly in log2.
    #[arg(long, default_value_t = 7)]
    pub exposures: usize,
    /// Lowest exposure in stops.
    #[arg(long, default_value_t = -3.0, allow_hyphen_values = true)]
    pub ev_lo: f64,
    /// Highest exposure in stops.
    #[arg(long, default_value_t = 3.0, allow_hyphen_values = true)]
    pub ev_hi: f64,
    /// Response curves per exposure.
    #[arg(long, default_value_t = 2)]
    pub crfs: usize,
    /// Source images held out for testing.
    #[arg(long, default_value_t = 1)]
    pub test_sources: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip sensor noise.
    #[arg(long)]
    pub no_noise: bool,
    /// Curve basis file; the built-in basis by default.
    #[arg(long)]
    pub basis: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum PresetArg {
    Toy,
    Paper,
}

#[derive(Args, Debug)]
pub struct InitArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "toy")]
    pub preset: PresetArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Zero heads and an identity mean curve: inference returns its input.
    #[arg(long)]
    pub identity: bool,
    #[arg(long)]
    pub basis: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Deq,
    Lin,
    Hal,
    Joint,
    Refine,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: StageArg,
    /// Dataset directory or its `manifest.jsonl`.
    #[arg(long)]
    pub data: PathBuf,
    /// Bundle directory, updated in place. Created for the first stages.
    #[arg(long)]
    pub bundle: PathBuf,
    /// JSON training config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Loss history (JSON lines); `<bundle>/train_<stage>.jsonl` by default.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Apply the refinement network.
    #[arg(long)]
    pub refine: bool,
    #[arg(long)]
    pub dump_deq: Option<PathBuf>,
    /// Estimated inverse response, one sample per line.
    #[arg(long)]
    pub dump_crf: Option<PathBuf>,
    #[arg(long)]
    pub dump_lin: Option<PathBuf>,
    #[arg(long)]
    pub dump_mask: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Dataset directory or its `manifest.jsonl`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, required_unless_present = "oracle")]
    pub bundle: Option<PathBuf>,
    /// JSON report path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub refine: bool,
    /// Score the ground truth against itself.
    #[arg(long)]
    pub oracle: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    pub points: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Only cases whose name contains this.
    #[arg(long)]
    pub filter: Option<String>,
    /// List the case names and exit.
    #[arg(long)]
    pub list: bool,
}

#[derive(Subcommand, Debug)]
pub enum CrfCommand {
    /// Least-squares basis weights of a curve.
    Fit {
        #[arg(long)]
        curve: PathBuf,
        #[arg(long)]
        basis: Option<PathBuf>,
    },
    /// Map a PFM image through a curve.
    Apply {
        #[arg(long)]
        curve: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write the inverse of a curve.
    Invert {
        #[arg(long)]
        curve: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Text plot of a curve.
    Plot {
        #[arg(long)]
        curve: PathBuf,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 20)]
        height: usize,
    },
    /// Write a gamma curve `x^gamma`.
    Gamma {
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1024)]
        samples: usize,
    },
    /// Write the built-in curve basis.
    Basis {
        #[arg(long)]
        output: PathBuf,
    },
}
