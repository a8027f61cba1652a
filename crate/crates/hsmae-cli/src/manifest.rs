//! Run manifests: every command writes one next to its outputs,
//! recording the fully resolved arguments, seeds, precision, and tool
//! version. A manifest is sufficient to repeat the run (`hsmae rerun`);
//! all outputs except the manifest itself (which carries a wall-clock
//! stamp) come out byte-identical in the same precision mode.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use hsmae_core::checkpoint::Seeds;
use hsmae_core::model::ModelConfig;
use hsmae_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::{runtime, CliResult, Precision};

pub const MANIFEST_FILE: &str = "run-manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub precision: String,
    /// Unix milliseconds at write time. Informational only; reruns
    /// reproduce every other artifact byte-for-byte, not this field.
    pub wall_clock_ms: u64,
    pub seeds: BTreeMap<String, u64>,
    #[serde(flatten)]
    pub command: ManifestCommand,
}

/// The fully resolved arguments of one command — what actually ran
/// after flags, config file, and preset were merged.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum ManifestCommand {
    GenSynthetic(GenArgs),
    MatchBands(MatchArgs),
    DeriveMsi(DeriveArgs),
    Pretrain(PretrainArgs),
    Finetune(FinetuneArgs),
    Reconstruct(ReconstructArgs),
    Eval(EvalArgs),
}

impl ManifestCommand {
    /// Redirects the command's output path (directory, or file for
    /// match-bands and reconstruct).
    pub fn set_out(&mut self, out: PathBuf) {
        match self {
            ManifestCommand::GenSynthetic(a) => a.out = out,
            ManifestCommand::MatchBands(a) => a.out = out,
            ManifestCommand::DeriveMsi(a) => a.out = out,
            ManifestCommand::Pretrain(a) => a.out = out,
            ManifestCommand::Finetune(a) => a.out = out,
            ManifestCommand::Reconstruct(a) => a.out = out,
            ManifestCommand::Eval(a) => a.out = out,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenArgs {
    pub out: PathBuf,
    pub count: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub classes: usize,
    pub noise: f64,
    pub seed: u64,
    pub prefix: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchArgs {
    pub msi: String,
    pub hsi: String,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeriveArgs {
    pub input: PathBuf,
    pub matches: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub checkpoint_every: Option<usize>,
    /// Seed the initial parameters were drawn from. On resume this is
    /// taken from the checkpoint, not the command line.
    pub init_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneArgs {
    pub pairs: PathBuf,
    pub checkpoint: PathBuf,
    pub matches: PathBuf,
    pub out: PathBuf,
    /// Architecture of the checkpoint, recorded after loading it; a
    /// rerun fails if the file no longer matches.
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructArgs {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub matches: PathBuf,
    pub out: PathBuf,
    pub truth: Option<PathBuf>,
    pub pixels: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub matches: PathBuf,
    pub out: PathBuf,
    pub dynamic_range: f64,
}

pub fn seeds_map(seeds: Seeds) -> BTreeMap<String, u64> {
    BTreeMap::from([("init".to_string(), seeds.init), ("run".to_string(), seeds.run)])
}

/// Writes `run-manifest.json` into `dir`.
pub fn write(
    dir: &Path,
    precision: Precision,
    seeds: BTreeMap<String, u64>,
    command: &ManifestCommand,
) -> CliResult<()> {
    let manifest = RunManifest {
        tool: "hsmae".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        precision: precision.tag().into(),
        wall_clock_ms: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0),
        seeds,
        command: command.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| runtime(format!("writing {}: {e}", path.display())))
}

pub fn load(path: &Path) -> CliResult<RunManifest> {
    let text = fs::read_to_string(path)
        .map_err(|e| runtime(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| runtime(format!("manifest {}: {e}", path.display())))
}
