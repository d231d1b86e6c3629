mod commands;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use scaa_core::io::Echo;
use scaa_core::Variant;

#[derive(Parser, Debug)]
#[command(
    name = "scaa",
    version,
    about = "Slice segmentation with 3D context attention, on CPU"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Micro,
    Desk,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Ca,
    Cca,
    Scaa,
    ScaaStar,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Ca => Variant::Ca,
            VariantArg::Cca => Variant::Cca,
            VariantArg::Scaa => Variant::Scaa,
            VariantArg::ScaaStar => Variant::ScaaStar,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic phantom volumes.
    Gen(GenArgs),
    /// Train a model on a directory of volumes.
    Train(TrainArgs),
    /// Segment volumes with a checkpoint.
    Infer(InferArgs),
    /// Score predicted label volumes against references.
    Eval(EvalArgs),
    /// Finite-difference gradient check of the full model.
    Gradcheck(GradcheckArgs),
    /// Activation memory and parameter estimates.
    Memest(MemestArgs),
    /// Export attention vectors for one volume.
    AttnExport(AttnArgs),
    /// Train and compare all four model variants.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// Phantom key-value config; defaults to 64³ with three organs.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Use the 32³ phantom preset.
    #[arg(long)]
    pub micro: bool,
}

#[derive(Args, Debug, Clone)]
pub struct TrainOpts {
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub model: Preset,
    /// Defaults to the preset's variant.
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 150)]
    pub epochs: usize,
    /// Cap on total optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Slices sampled per step.
    #[arg(long, default_value_t = 16)]
    pub slices: usize,
    #[arg(long)]
    pub no_augment: bool,
    /// Record per-step wall time in the log (makes logs non-reproducible).
    #[arg(long)]
    pub record_wall_time: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub opts: TrainOpts,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also write `step_N.ckpt` every N steps.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Reference volumes.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory of predicted `ID.lbl` files.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Preset::Micro)]
    pub model: Preset,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Coordinates checked per tensor.
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
    /// Slices in the checked loss.
    #[arg(long, default_value_t = 2)]
    pub slices: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MemestArgs {
    /// Builtin name (unet2d, unet3d, scaa3dEncoder, scaa2dPath); omit for the full table.
    #[arg(long)]
    pub arch: Option<String>,
    /// Layer-list file instead of a builtin.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Print every layer.
    #[arg(long)]
    pub layers: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AttnArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Index of the volume within `--data`.
    #[arg(long, default_value_t = 0)]
    pub volume: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out volumes; defaults to `--data`.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub opts: TrainOpts,
}

/// Every argument of the chosen subcommand as `key=value`, defaults included.
fn echo(name: &str, m: &ArgMatches) -> Echo {
    let mut e = Echo::new();
    e.insert("command".into(), name.into());
    for id in m.ids() {
        if let Ok(Some(vals)) = m.try_get_raw(id.as_str()) {
            let v: Vec<String> = vals.map(|v| v.to_string_lossy().into_owned()).collect();
            e.insert(id.as_str().to_string(), v.join(","));
        }
    }
    e
}

fn run(argv: Vec<OsString>) -> u8 {
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let echo = echo(name, sub);

    if let Ok(v) = std::env::var("SCAA_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
            _ => {
                eprintln!("error: SCAA_THREADS must be a positive integer, got '{v}'");
                return 1;
            }
        }
    }

    let result = match cli.command {
        Command::Gen(a) => commands::gen(&a, &echo),
        Command::Train(a) => commands::train(&a, &echo),
        Command::Infer(a) => commands::infer(&a, &echo),
        Command::Eval(a) => commands::eval(&a, &echo),
        Command::Gradcheck(a) => commands::gradcheck(&a, &echo),
        Command::Memest(a) => commands::memest(&a, &echo),
        Command::AttnExport(a) => commands::attn_export(&a, &echo),
        Command::Ablate(a) => commands::ablate(&a, &echo),
    };
    match result {
        Ok(()) => 0,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("{}", Cli::command().render_usage());
            1
        }
        Err(commands::Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os().collect()))
}
