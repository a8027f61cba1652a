//! Command-line driver for the reconstruction pipeline: synthetic data
//! generation, band matching, pretraining, fine-tuning, reconstruction,
//! and evaluation. Every command records a run manifest next to its
//! outputs; `rerun` repeats a recorded run bit-for-bit.

mod artifacts;
mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::manifest::{
    DeriveArgs, EvalArgs, GenArgs, ManifestCommand, MatchArgs, ReconstructArgs,
};

/// How a failed run exits: usage errors (bad flags, bad configuration)
/// exit 2, runtime errors (I/O, malformed files, training failures)
/// exit 1.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

pub type CliResult<T> = Result<T, Failure>;

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(msg) | Failure::Runtime(msg) => write!(f, "{msg}"),
        }
    }
}

/// Core errors surface once inputs are being read or the model is
/// running, so they map to runtime failures; flag-level preconditions
/// are checked up front and reported as usage errors instead.
impl From<hsmae_core::Error> for Failure {
    fn from(e: hsmae_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

pub fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(msg.to_string())
}

pub fn runtime(msg: impl std::fmt::Display) -> Failure {
    Failure::Runtime(msg.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn tag(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn from_tag(tag: &str) -> CliResult<Self> {
        match tag {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(runtime(format!(
                "manifest precision {other:?} is neither f32 nor f64"
            ))),
        }
    }
}

#[derive(Parser)]
#[command(name = "hsmae", version, about = "Masked-autoencoder reconstruction of hyperspectral cubes")]
struct Cli {
    /// Numeric precision for computation and checkpoint payloads
    /// (default f32; rerun keeps the manifest's recorded precision).
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a directory of synthetic hyperspectral cubes.
    GenSynthetic(GenFlags),
    /// Match multispectral bands onto a hyperspectral wavelength grid.
    MatchBands(MatchFlags),
    /// Derive NAME_msi.hsc / NAME_hsi.hsc pairs from hyperspectral cubes.
    DeriveMsi(DeriveFlags),
    /// Self-supervised masked pretraining on a directory of cubes.
    Pretrain(PretrainFlags),
    /// Cross-sensor fine-tuning from a pretrained checkpoint.
    Finetune(FinetuneFlags),
    /// Reconstruct a full cube from a multispectral input.
    Reconstruct(ReconstructFlags),
    /// Score reconstructions over a paired MSI/HSI dataset.
    Eval(EvalFlags),
    /// Re-execute a previous run from its manifest.
    Rerun(RerunFlags),
}

#[derive(Args)]
struct GenFlags {
    /// Directory the cubes and run manifest are written into.
    #[arg(long)]
    out: PathBuf,
    /// How many cubes to generate.
    #[arg(long)]
    count: usize,
    /// Cube height in pixels.
    #[arg(long)]
    h: usize,
    /// Cube width in pixels.
    #[arg(long)]
    w: usize,
    /// Number of spectral bands.
    #[arg(long)]
    c: usize,
    /// Endmember spectra mixed into each scene.
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Uniform per-pixel noise amplitude (0 keeps exact mixtures).
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Filename prefix for the generated cubes.
    #[arg(long, default_value = "cube-")]
    prefix: String,
}

#[derive(Args)]
struct MatchFlags {
    /// MSI band table: a preset name (sentinel2-like, desk-msi, ...) or
    /// a JSON path.
    #[arg(long)]
    msi: String,
    /// HSI band table: a preset name (emit-like, enmap-like, desk-hsi,
    /// ...) or a JSON path.
    #[arg(long)]
    hsi: String,
    /// Path of the band match set JSON to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DeriveFlags {
    /// An .hsc file or a directory of them.
    #[arg(long)]
    input: PathBuf,
    /// Band match set produced by match-bands.
    #[arg(long)]
    matches: PathBuf,
    /// Directory receiving the NAME_msi.hsc / NAME_hsi.hsc pairs.
    #[arg(long)]
    out: PathBuf,
}

/// Training knobs shared by pretrain and finetune. Precedence:
/// flags > --config file > preset defaults.
#[derive(Args)]
struct TuneFlags {
    /// Built-in model preset: desk, emit-paper, or enmap-paper.
    #[arg(long)]
    preset: Option<String>,
    /// TOML config file; flags override it, it overrides the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for parameter init, batch order, and mask draws.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Log a metrics row every N steps (the last step always logs).
    #[arg(long)]
    log_every: Option<usize>,
}

#[derive(Args)]
struct PretrainFlags {
    /// Directory of .hsc cubes to train on.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, metrics.csv, and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// Masking strategy: spectral, spatial, or spatial-spectral.
    #[arg(long)]
    mask: Option<String>,
    /// Fraction of maskable units hidden per step, in [0, 1).
    #[arg(long)]
    ratio: Option<f64>,
    /// Also write a numbered checkpoint every N steps.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue training from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    tune: TuneFlags,
}

#[derive(Args)]
struct FinetuneFlags {
    /// Directory of NAME_msi.hsc / NAME_hsi.hsc pairs.
    #[arg(long)]
    pairs: PathBuf,
    /// Pretrained checkpoint to start from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Band match set fixing which bands the encoder sees.
    #[arg(long)]
    matches: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Freeze the encoder; only decoder-side parameters move.
    #[arg(long)]
    frozen: bool,
    #[command(flatten)]
    tune: TuneFlags,
}

#[derive(Args)]
struct ReconstructFlags {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Multispectral input cube (.hsc).
    #[arg(long)]
    input: PathBuf,
    /// Band match set fixing which bands the encoder sees.
    #[arg(long)]
    matches: PathBuf,
    /// Path of the reconstructed .hsc; sibling artifacts (plan,
    /// false-color PNG, spectra CSV) share its stem.
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth cube; adds the `true` column to the spectra CSV.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Pixels for the spectra CSV as row,col pairs, e.g. "3,4;10,2".
    #[arg(long)]
    pixels: Option<String>,
}

#[derive(Args)]
struct EvalFlags {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of NAME_msi.hsc / NAME_hsi.hsc pairs to score.
    #[arg(long)]
    dataset: PathBuf,
    /// Band match set fixing which bands the encoder sees.
    #[arg(long)]
    matches: PathBuf,
    /// Output directory for eval.csv, summary.json, and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// Dynamic range L for SSIM (reflectance data spans about 1).
    #[arg(long, default_value_t = 1.0)]
    dynamic_range: f64,
}

#[derive(Args)]
struct RerunFlags {
    /// Manifest of the run to repeat.
    #[arg(long)]
    manifest: PathBuf,
    /// Redirect outputs (same meaning as the original --out).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            match failure {
                Failure::Usage(_) => ExitCode::from(2),
                Failure::Runtime(_) => ExitCode::from(1),
            }
        }
    }
}

/// Resolves flags into fully-specified command arguments (the form the
/// manifest records), then executes them.
fn dispatch(cli: Cli) -> CliResult<()> {
    let precision = cli.precision.unwrap_or(Precision::F32);
    let cmd = match cli.command {
        Command::GenSynthetic(f) => ManifestCommand::GenSynthetic(GenArgs {
            out: f.out,
            count: f.count,
            h: f.h,
            w: f.w,
            c: f.c,
            classes: f.classes,
            noise: f.noise,
            seed: f.seed,
            prefix: f.prefix,
        }),
        Command::MatchBands(f) => ManifestCommand::MatchBands(MatchArgs {
            msi: f.msi,
            hsi: f.hsi,
            out: f.out,
        }),
        Command::DeriveMsi(f) => ManifestCommand::DeriveMsi(DeriveArgs {
            input: f.input,
            matches: f.matches,
            out: f.out,
        }),
        Command::Pretrain(f) => config::resolve_pretrain(f)?,
        Command::Finetune(f) => config::resolve_finetune(f)?,
        Command::Reconstruct(f) => ManifestCommand::Reconstruct(ReconstructArgs {
            checkpoint: f.checkpoint,
            input: f.input,
            matches: f.matches,
            out: f.out,
            truth: f.truth,
            pixels: f.pixels,
        }),
        Command::Eval(f) => ManifestCommand::Eval(EvalArgs {
            checkpoint: f.checkpoint,
            dataset: f.dataset,
            matches: f.matches,
            out: f.out,
            dynamic_range: f.dynamic_range,
        }),
        Command::Rerun(f) => {
            let recorded = manifest::load(&f.manifest)?;
            let recorded_precision = Precision::from_tag(&recorded.precision)?;
            if let Some(requested) = cli.precision {
                if requested != recorded_precision {
                    return Err(usage(format!(
                        "the manifest was recorded at {}; rerun keeps the original precision",
                        recorded.precision
                    )));
                }
            }
            let mut cmd = recorded.command;
            if let Some(out) = f.out {
                cmd.set_out(out);
            }
            return execute(recorded_precision, &cmd);
        }
    };
    execute(precision, &cmd)
}

fn execute(precision: Precision, cmd: &ManifestCommand) -> CliResult<()> {
    match precision {
        Precision::F32 => run_cmd::<f32>(precision, cmd),
        Precision::F64 => run_cmd::<f64>(precision, cmd),
    }
}

fn run_cmd<T: hsmae_core::Scalar>(precision: Precision, cmd: &ManifestCommand) -> CliResult<()> {
    match cmd {
        ManifestCommand::GenSynthetic(a) => commands::gen_synthetic::<T>(precision, a),
        ManifestCommand::MatchBands(a) => commands::match_bands(precision, a),
        ManifestCommand::DeriveMsi(a) => commands::derive_msi::<T>(precision, a),
        ManifestCommand::Pretrain(a) => commands::pretrain::<T>(precision, a),
        ManifestCommand::Finetune(a) => commands::finetune::<T>(precision, a),
        ManifestCommand::Reconstruct(a) => commands::reconstruct::<T>(precision, a),
        ManifestCommand::Eval(a) => commands::eval::<T>(precision, a),
    }
}
