//! Configuration resolution for the training commands. Three layers,
//! strongest first: command-line flags, a TOML config file (`--config`),
//! and a built-in preset (`--preset`, default `desk`).
//!
//! The file schema mirrors the flag names:
//!
//! ```toml
//! [model]
//! preset = "desk"      # base architecture; fields below override it
//! enc_blocks = 2
//!
//! [train]
//! mask = "spectral"    # pretraining only
//! ratio = 0.75
//! seed = 7
//! lr = 1e-3
//! steps = 300
//! checkpoint_every = 100
//! ```

use std::fs;
use std::path::Path;

use hsmae_core::model::ModelConfig;
use hsmae_core::patching::MaskStrategy;
use hsmae_core::training::TrainConfig;
use serde::Deserialize;

use crate::manifest::{FinetuneArgs, ManifestCommand, PretrainArgs};
use crate::{usage, CliResult, FinetuneFlags, PretrainFlags, TuneFlags};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<String>,
    pub p: Option<usize>,
    pub s: Option<usize>,
    pub enc_blocks: Option<usize>,
    pub dec_blocks: Option<usize>,
    pub enc_dim: Option<usize>,
    pub dec_dim: Option<usize>,
    pub enc_heads: Option<usize>,
    pub dec_heads: Option<usize>,
    pub mlp_ratio: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Masking strategy and ratio apply to pretraining; fine-tuning
    /// always masks exactly the unmatched band groups.
    pub mask: Option<String>,
    pub ratio: Option<f64>,
    pub seed: Option<u64>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub log_every: Option<usize>,
    pub checkpoint_every: Option<usize>,
}

fn load_file(path: &Path) -> CliResult<FileConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

fn parse_mask(name: &str) -> CliResult<MaskStrategy> {
    match name {
        "spectral" => Ok(MaskStrategy::Spectral),
        "spatial" => Ok(MaskStrategy::Spatial),
        "spatial-spectral" => Ok(MaskStrategy::SpatialSpectral),
        "fixed-bands" => Err(usage(
            "fixed-bands masking is derived from a band match set; use finetune with --matches",
        )),
        other => Err(usage(format!(
            "unknown mask strategy {other:?} (expected spectral, spatial, or spatial-spectral)"
        ))),
    }
}

fn resolve_model(file: &FileConfig, tune: &TuneFlags) -> CliResult<ModelConfig> {
    let name = tune
        .preset
        .as_deref()
        .or(file.model.preset.as_deref())
        .unwrap_or("desk");
    let mut cfg = ModelConfig::by_preset(name).ok_or_else(|| {
        usage(format!(
            "unknown preset {name:?} (expected desk, emit-paper, or enmap-paper)"
        ))
    })?;
    let m = &file.model;
    let overrides = [
        (&mut cfg.p, m.p),
        (&mut cfg.s, m.s),
        (&mut cfg.enc_blocks, m.enc_blocks),
        (&mut cfg.dec_blocks, m.dec_blocks),
        (&mut cfg.enc_dim, m.enc_dim),
        (&mut cfg.dec_dim, m.dec_dim),
        (&mut cfg.enc_heads, m.enc_heads),
        (&mut cfg.dec_heads, m.dec_heads),
        (&mut cfg.mlp_ratio, m.mlp_ratio),
    ];
    for (slot, value) in overrides {
        if let Some(v) = value {
            *slot = v;
        }
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

/// Layers the common tuning knobs over `cfg`: file first, flags second.
fn apply_tuning(cfg: &mut TrainConfig, file: &TrainSection, tune: &TuneFlags) {
    if let Some(v) = file.lr {
        cfg.lr = v;
    }
    if let Some(v) = file.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = file.steps {
        cfg.steps = v;
    }
    if let Some(v) = file.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = file.log_every {
        cfg.log_every = v;
    }
    if let Some(v) = tune.lr {
        cfg.lr = v;
    }
    if let Some(v) = tune.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = tune.steps {
        cfg.steps = v;
    }
    if let Some(v) = tune.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = tune.log_every {
        cfg.log_every = v;
    }
}

pub fn resolve_pretrain(flags: PretrainFlags) -> CliResult<ManifestCommand> {
    let file = match &flags.tune.config {
        Some(path) => load_file(path)?,
        None => FileConfig::default(),
    };
    let model = resolve_model(&file, &flags.tune)?;

    let seed = flags.tune.seed.or(file.train.seed).unwrap_or(0);
    let mut train = TrainConfig::pretrain_defaults(seed);
    if let Some(name) = &file.train.mask {
        train.strategy = parse_mask(name)?;
    }
    if let Some(r) = file.train.ratio {
        train.ratio = r;
    }
    apply_tuning(&mut train, &file.train, &flags.tune);
    if let Some(name) = &flags.mask {
        train.strategy = parse_mask(name)?;
    }
    if let Some(r) = flags.ratio {
        train.ratio = r;
    }
    train.validate().map_err(usage)?;

    let checkpoint_every = flags.checkpoint_every.or(file.train.checkpoint_every);
    if checkpoint_every == Some(0) {
        return Err(usage("--checkpoint-every must be >= 1"));
    }
    Ok(ManifestCommand::Pretrain(PretrainArgs {
        data: flags.data,
        out: flags.out,
        resume: flags.resume,
        checkpoint_every,
        init_seed: seed,
        model,
        train,
    }))
}

pub fn resolve_finetune(flags: FinetuneFlags) -> CliResult<ManifestCommand> {
    let file = match &flags.tune.config {
        Some(path) => load_file(path)?,
        None => FileConfig::default(),
    };
    if flags.tune.preset.is_some() || file.model.preset.is_some() {
        return Err(usage(
            "finetune takes its architecture from the checkpoint; drop the preset",
        ));
    }

    let seed = flags.tune.seed.or(file.train.seed).unwrap_or(0);
    let mut train = TrainConfig::finetune_defaults(seed);
    train.freeze_encoder = flags.frozen;
    apply_tuning(&mut train, &file.train, &flags.tune);
    train.validate().map_err(usage)?;

    Ok(ManifestCommand::Finetune(FinetuneArgs {
        pairs: flags.pairs,
        checkpoint: flags.checkpoint,
        matches: flags.matches,
        out: flags.out,
        model: None,
        train,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tune() -> TuneFlags {
        TuneFlags {
            preset: None,
            config: None,
            seed: None,
            lr: None,
            weight_decay: None,
            steps: None,
            batch_size: None,
            log_every: None,
        }
    }

    #[test]
    fn flags_beat_file_beats_preset() {
        let file: FileConfig = toml::from_str(
            "[model]\npreset = \"desk\"\nenc_blocks = 3\n\n[train]\nlr = 0.5\nsteps = 40\n",
        )
        .unwrap();
        let mut flags = tune();
        flags.lr = Some(0.25);
        let model = resolve_model(&file, &flags).unwrap();
        assert_eq!(model.enc_blocks, 3); // file overrides the preset
        assert_eq!(model.enc_dim, ModelConfig::desk().enc_dim);

        let mut train = TrainConfig::pretrain_defaults(0);
        apply_tuning(&mut train, &file.train, &flags);
        assert_eq!(train.lr, 0.25); // flag overrides the file
        assert_eq!(train.steps, 40);
    }

    #[test]
    fn unknown_keys_and_presets_are_usage_errors() {
        assert!(toml::from_str::<FileConfig>("[train]\nlearning_rate = 1.0\n").is_err());
        let mut flags = tune();
        flags.preset = Some("galaxy".into());
        match resolve_model(&FileConfig::default(), &flags) {
            Err(crate::Failure::Usage(msg)) => assert!(msg.contains("galaxy")),
            other => panic!("expected a usage error, got {other:?}"),
        }
    }

    #[test]
    fn fixed_bands_cannot_be_requested_for_pretraining() {
        match parse_mask("fixed-bands") {
            Err(crate::Failure::Usage(msg)) => assert!(msg.contains("band match")),
            other => panic!("expected a usage error, got {other:?}"),
        }
    }
}
