//! Command bodies, generic over the scalar type selected by
//! `--precision`. Flag-level preconditions fail as usage errors (exit
//! 2); everything after — I/O, malformed files, training — as runtime
//! errors (exit 1).

use std::fs;
use std::path::{Path, PathBuf};

use hsmae_core::alignment::{assemble_input, presets, simulate_msi, BandMatchSet};
use hsmae_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Seeds};
use hsmae_core::datacube::{
    compute_stats, denormalize, load_cube, normalize, save_cube, BandStats, BandTable, Cube,
    SynthSpec,
};
use hsmae_core::metrics::{evaluate, EvalSample};
use hsmae_core::model::{decode, encode, init_model, ModelState};
use hsmae_core::patching::{
    build_pos_embed, mask_from_band_match, patchify, unpatchify, GridDims, MaskPlan,
};
use hsmae_core::rng::derive_seed;
use hsmae_core::training::{self, log_to_csv, LogRow, OptState, TrainMode};
use hsmae_core::Scalar;

use crate::manifest::{
    self, seeds_map, DeriveArgs, EvalArgs, FinetuneArgs, GenArgs, ManifestCommand, MatchArgs,
    PretrainArgs, ReconstructArgs,
};
use crate::{artifacts, runtime, usage, CliResult, Precision};

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| runtime(format!("creating {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| runtime(format!("writing {}: {e}", path.display())))
}

/// Directory a file-valued `--out` lives in (manifests go there).
fn manifest_dir(out_file: &Path) -> PathBuf {
    match out_file.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => dir.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// `recon.hsc` -> `recon.spectra.csv` and friends.
fn sibling(out_file: &Path, suffix: &str) -> PathBuf {
    let stem = out_file
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("out");
    out_file.with_file_name(format!("{stem}.{suffix}"))
}

/// All `.hsc` files directly under `dir`, sorted by name so every run
/// sees the dataset in the same order.
fn hsc_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries =
        fs::read_dir(dir).map_err(|e| runtime(format!("reading {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.extension().and_then(|x| x.to_str()) == Some("hsc"))
        .collect();
    files.sort();
    Ok(files)
}

fn load_cubes_dir<T: Scalar>(dir: &Path) -> CliResult<Vec<Cube<T>>> {
    let files = hsc_files(dir)?;
    if files.is_empty() {
        return Err(runtime(format!("no .hsc cubes in {}", dir.display())));
    }
    files.iter().map(|p| Ok(load_cube(p)?)).collect()
}

/// Loads `NAME_msi.hsc` / `NAME_hsi.hsc` pairs, sorted by NAME. An
/// orphaned half is an error rather than a silent skip.
fn load_pairs_dir<T: Scalar>(dir: &Path) -> CliResult<Vec<(String, Cube<T>, Cube<T>)>> {
    let files = hsc_files(dir)?;
    let mut pairs = Vec::new();
    for path in &files {
        let name = match path.file_name().and_then(|s| s.to_str()) {
            Some(n) => n,
            None => continue,
        };
        if let Some(stem) = name.strip_suffix("_msi.hsc") {
            let hsi_path = dir.join(format!("{stem}_hsi.hsc"));
            if !hsi_path.is_file() {
                return Err(runtime(format!(
                    "{} has no matching {stem}_hsi.hsc",
                    path.display()
                )));
            }
            pairs.push((stem.to_string(), load_cube(path)?, load_cube(&hsi_path)?));
        } else if let Some(stem) = name.strip_suffix("_hsi.hsc") {
            if !dir.join(format!("{stem}_msi.hsc")).is_file() {
                return Err(runtime(format!(
                    "{} has no matching {stem}_msi.hsc",
                    path.display()
                )));
            }
        }
    }
    if pairs.is_empty() {
        return Err(runtime(format!(
            "no *_msi.hsc / *_hsi.hsc pairs in {}",
            dir.display()
        )));
    }
    Ok(pairs)
}

/// A band table given as either a built-in preset name or a JSON path.
fn table_spec(spec: &str) -> CliResult<BandTable> {
    Ok(match spec {
        "sentinel2-like" => presets::sentinel2_like(),
        "emit-like" => presets::emit_like(),
        "enmap-like" => presets::enmap_like(),
        "desk-msi" => presets::desk_msi(),
        "desk-hsi" => presets::desk_hsi(),
        path => BandTable::load(Path::new(path))?,
    })
}

fn load_matches(path: &Path) -> CliResult<BandMatchSet> {
    let matches = BandMatchSet::load(path)?;
    matches.validate()?;
    Ok(matches)
}

fn stats_of<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> CliResult<BandStats<T>> {
    ckpt.stats.clone().ok_or_else(|| {
        runtime(format!(
            "checkpoint {} carries no normalization statistics",
            path.display()
        ))
    })
}

/// MSI values assembled onto the HSI grid (reflectance) -> full
/// reconstructed cube (reflectance) under the fixed band-match mask.
fn reconstruct_cube<T: Scalar>(
    state: &ModelState<T>,
    assembled: &Cube<T>,
    plan: &MaskPlan,
    stats: &BandStats<T>,
) -> hsmae_core::Result<Cube<T>> {
    let cfg = &state.config;
    let grid = patchify(&normalize(assembled, stats)?, cfg.p, cfg.s)?;
    let enc_pos = build_pos_embed(&plan.dims, cfg.enc_dim)?;
    let dec_pos = build_pos_embed(&plan.dims, cfg.dec_dim)?;
    let latents = encode(state, &grid, plan, &enc_pos)?;
    let out = decode(state, &latents, plan, &dec_pos)?;
    let values = unpatchify(&out, assembled.h, assembled.w, assembled.c)?;
    let cube = Cube::new(
        assembled.h,
        assembled.w,
        assembled.c,
        values,
        assembled.band_table.clone(),
    )?;
    denormalize(&cube, stats)
}

pub fn gen_synthetic<T: Scalar>(precision: Precision, a: &GenArgs) -> CliResult<()> {
    if a.count == 0 {
        return Err(usage("--count must be >= 1"));
    }
    if a.h == 0 || a.w == 0 || a.c == 0 {
        return Err(usage("--h, --w, and --c must all be >= 1"));
    }
    if a.classes == 0 {
        return Err(usage("--classes must be >= 1"));
    }
    if !(a.noise >= 0.0) {
        return Err(usage("--noise must be >= 0"));
    }
    create_dir(&a.out)?;
    for k in 0..a.count {
        let mut spec = SynthSpec::new(a.h, a.w, a.c, a.classes, derive_seed(&[a.seed, k as u64]));
        spec.noise = a.noise;
        let cube: Cube<T> = hsmae_core::datacube::gen_synthetic(&spec)?;
        save_cube(&cube, &a.out.join(format!("{}{k:03}.hsc", a.prefix)))?;
    }
    let seeds = std::collections::BTreeMap::from([("gen".to_string(), a.seed)]);
    manifest::write(
        &a.out,
        precision,
        seeds,
        &ManifestCommand::GenSynthetic(a.clone()),
    )
}

pub fn match_bands(precision: Precision, a: &MatchArgs) -> CliResult<()> {
    let msi = table_spec(&a.msi)?;
    let hsi = table_spec(&a.hsi)?;
    let set = hsmae_core::alignment::match_bands(&msi, &hsi)?;
    let dir = manifest_dir(&a.out);
    create_dir(&dir)?;
    set.save(&a.out)?;
    manifest::write(
        &dir,
        precision,
        Default::default(),
        &ManifestCommand::MatchBands(a.clone()),
    )
}

pub fn derive_msi<T: Scalar>(precision: Precision, a: &DeriveArgs) -> CliResult<()> {
    let matches = load_matches(&a.matches)?;
    let inputs = if a.input.is_dir() {
        hsc_files(&a.input)?
    } else {
        vec![a.input.clone()]
    };
    if inputs.is_empty() {
        return Err(runtime(format!("no .hsc cubes in {}", a.input.display())));
    }
    create_dir(&a.out)?;
    for path in &inputs {
        let hsi: Cube<T> = load_cube(path)?;
        let msi = simulate_msi(&hsi, &matches)?;
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| runtime(format!("{} has no usable file name", path.display())))?;
        save_cube(&hsi, &a.out.join(format!("{name}_hsi.hsc")))?;
        save_cube(&msi, &a.out.join(format!("{name}_msi.hsc")))?;
    }
    manifest::write(
        &a.out,
        precision,
        Default::default(),
        &ManifestCommand::DeriveMsi(a.clone()),
    )
}

pub fn pretrain<T: Scalar>(precision: Precision, a: &PretrainArgs) -> CliResult<()> {
    // Flags were validated at resolution time; a hand-edited manifest
    // goes through the same checks here.
    a.model.validate().map_err(usage)?;
    a.train.validate().map_err(usage)?;
    if a.train.mode != TrainMode::Pretrain {
        return Err(usage("pretrain needs a train config in pretrain mode"));
    }
    if a.checkpoint_every == Some(0) {
        return Err(usage("--checkpoint-every must be >= 1"));
    }
    let dataset: Vec<Cube<T>> = load_cubes_dir(&a.data)?;
    let stats = compute_stats(&dataset)?;

    let mut recorded = a.clone();
    let (mut state, mut opt) = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint::<T>(path)?;
            if ckpt.state.config != a.model {
                return Err(usage(format!(
                    "checkpoint {} was trained with a different architecture",
                    path.display()
                )));
            }
            let opt = ckpt.opt.ok_or_else(|| {
                runtime(format!(
                    "checkpoint {} has no optimizer state to resume from",
                    path.display()
                ))
            })?;
            recorded.init_seed = ckpt.seeds.init;
            (ckpt.state, opt)
        }
        None => (init_model(&a.model, a.init_seed)?, OptState::new(&a.model)),
    };
    let seeds = Seeds {
        init: recorded.init_seed,
        run: a.train.seed,
    };
    create_dir(&a.out)?;

    // Chunk the run at checkpoint boundaries; mask and batch order are
    // derived from (seed, step), so the chunked trajectory is bitwise
    // identical to an uninterrupted one.
    let mut rows: Vec<LogRow> = Vec::new();
    let stride = a.checkpoint_every.unwrap_or(0);
    while opt.step < a.train.steps {
        let until = if stride == 0 {
            a.train.steps
        } else {
            (opt.step + stride).min(a.train.steps)
        };
        let run = training::pretrain_until(&mut state, &mut opt, &a.train, &dataset, until)?;
        rows.extend(run.log);
        if opt.step < a.train.steps {
            let ckpt = Checkpoint {
                seeds,
                step: opt.step,
                state: state.clone(),
                opt: Some(opt.clone()),
                stats: Some(stats.clone()),
            };
            save_checkpoint(
                &a.out.join(format!("checkpoint-{:06}.smae", opt.step)),
                &ckpt,
            )?;
        }
    }
    let ckpt = Checkpoint {
        seeds,
        step: opt.step,
        state,
        opt: Some(opt),
        stats: Some(stats),
    };
    save_checkpoint(&a.out.join("checkpoint-final.smae"), &ckpt)?;

    // Each chunk also logs its own last step; keep only the rows an
    // unchunked run would have logged.
    rows.retain(|r| r.step % a.train.log_every == 0 || r.step + 1 == a.train.steps);
    rows.dedup_by_key(|r| r.step);
    write_text(&a.out.join("metrics.csv"), &log_to_csv(&rows))?;
    manifest::write(
        &a.out,
        precision,
        seeds_map(seeds),
        &ManifestCommand::Pretrain(recorded),
    )
}

pub fn finetune<T: Scalar>(precision: Precision, a: &FinetuneArgs) -> CliResult<()> {
    a.train.validate().map_err(usage)?;
    if a.train.mode != TrainMode::Finetune {
        return Err(usage("finetune needs a train config in finetune mode"));
    }
    let ckpt = load_checkpoint::<T>(&a.checkpoint)?;
    if let Some(expected) = &a.model {
        if *expected != ckpt.state.config {
            return Err(runtime(format!(
                "checkpoint {} no longer matches the architecture recorded in the manifest",
                a.checkpoint.display()
            )));
        }
    }
    let stats = stats_of(&ckpt, &a.checkpoint)?;
    let matches = load_matches(&a.matches)?;
    let named = load_pairs_dir::<T>(&a.pairs)?;
    let pairs: Vec<(Cube<T>, Cube<T>)> =
        named.into_iter().map(|(_, msi, hsi)| (msi, hsi)).collect();

    create_dir(&a.out)?;
    let mut state = ckpt.state;
    let mut opt = OptState::new(&state.config);
    let run = training::finetune(&mut state, &mut opt, &a.train, &pairs, &matches, &stats)?;

    let seeds = Seeds {
        init: ckpt.seeds.init,
        run: a.train.seed,
    };
    let out_ckpt = Checkpoint {
        seeds,
        step: opt.step,
        state,
        opt: Some(opt),
        stats: Some(stats),
    };
    save_checkpoint(&a.out.join("checkpoint-final.smae"), &out_ckpt)?;
    write_text(&a.out.join("metrics.csv"), &log_to_csv(&run.log))?;

    let mut recorded = a.clone();
    recorded.model = Some(out_ckpt.state.config.clone());
    manifest::write(
        &a.out,
        precision,
        seeds_map(seeds),
        &ManifestCommand::Finetune(recorded),
    )
}

pub fn reconstruct<T: Scalar>(precision: Precision, a: &ReconstructArgs) -> CliResult<()> {
    let pixels = a.pixels.as_deref().map(parse_pixels).transpose()?;
    let ckpt = load_checkpoint::<T>(&a.checkpoint)?;
    let stats = stats_of(&ckpt, &a.checkpoint)?;
    let matches = load_matches(&a.matches)?;
    let msi: Cube<T> = load_cube(&a.input)?;
    let truth: Option<Cube<T>> = a.truth.as_ref().map(|p| load_cube(p)).transpose()?;

    let cfg = &ckpt.state.config;
    let c = matches.hsi_table.bands.len();
    let dims = GridDims::of(msi.h, msi.w, c, cfg.p, cfg.s)?;
    if let Some(t) = &truth {
        if (t.h, t.w, t.c) != (msi.h, msi.w, c) {
            return Err(runtime(format!(
                "truth cube is {}x{}x{}, expected {}x{}x{c}",
                t.h, t.w, t.c, msi.h, msi.w
            )));
        }
    }
    if let Some(pixels) = &pixels {
        for &(i, j) in pixels {
            if i >= msi.h || j >= msi.w {
                return Err(usage(format!(
                    "--pixels {i},{j} is outside the {}x{} image",
                    msi.h, msi.w
                )));
            }
        }
    }

    let plan = mask_from_band_match(&matches, &dims)?;
    let assembled = assemble_input(&msi, &matches, &dims)?;
    let recon = reconstruct_cube(&ckpt.state, &assembled, &plan, &stats)?;

    let dir = manifest_dir(&a.out);
    create_dir(&dir)?;
    save_cube(&recon, &a.out)?;
    write_text(&sibling(&a.out, "plan.json"), &plan.to_json())?;
    artifacts::false_color(&recon, &sibling(&a.out, "falsecolor.png"))?;
    if let Some(pixels) = &pixels {
        let csv = artifacts::spectra_csv(&recon, truth.as_ref(), &plan, pixels);
        write_text(&sibling(&a.out, "spectra.csv"), &csv)?;
    }
    manifest::write(
        &dir,
        precision,
        Default::default(),
        &ManifestCommand::Reconstruct(a.clone()),
    )
}

pub fn eval<T: Scalar>(precision: Precision, a: &EvalArgs) -> CliResult<()> {
    if !(a.dynamic_range > 0.0) {
        return Err(usage("--dynamic-range must be > 0"));
    }
    let ckpt = load_checkpoint::<T>(&a.checkpoint)?;
    let stats = stats_of(&ckpt, &a.checkpoint)?;
    let matches = load_matches(&a.matches)?;
    let named = load_pairs_dir::<T>(&a.dataset)?;

    let cfg = &ckpt.state.config;
    let mut samples = Vec::with_capacity(named.len());
    for (name, msi, hsi) in named {
        let dims = GridDims::of(hsi.h, hsi.w, hsi.c, cfg.p, cfg.s)?;
        let plan = mask_from_band_match(&matches, &dims)?;
        let input = assemble_input(&msi, &matches, &dims)?;
        samples.push(EvalSample {
            sample_id: name,
            input,
            target: hsi,
            plan,
        });
    }
    let outcome = evaluate(
        |s| reconstruct_cube(&ckpt.state, &s.input, &s.plan, &stats),
        &samples,
        &stats,
        a.dynamic_range,
    )?;
    create_dir(&a.out)?;
    write_text(&a.out.join("eval.csv"), &outcome.to_csv())?;
    write_text(&a.out.join("summary.json"), &outcome.to_json())?;
    manifest::write(
        &a.out,
        precision,
        Default::default(),
        &ManifestCommand::Eval(a.clone()),
    )
}

/// Parses `--pixels "3,4;10,2"` into (row, col) pairs.
fn parse_pixels(text: &str) -> CliResult<Vec<(usize, usize)>> {
    let mut pixels = Vec::new();
    for part in text.split(';').filter(|p| !p.trim().is_empty()) {
        let (i, j) = part
            .split_once(',')
            .ok_or_else(|| usage(format!("--pixels entry {part:?} is not row,col")))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| usage(format!("--pixels entry {part:?} is not row,col")))
        };
        pixels.push((parse(i)?, parse(j)?));
    }
    if pixels.is_empty() {
        return Err(usage("--pixels lists no pixels"));
    }
    Ok(pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_lists_parse_and_reject_garbage() {
        assert_eq!(parse_pixels("3,4;10,2").unwrap(), vec![(3, 4), (10, 2)]);
        assert_eq!(parse_pixels(" 1 , 2 ;").unwrap(), vec![(1, 2)]);
        assert!(parse_pixels("").is_err());
        assert!(parse_pixels("3;4").is_err());
        assert!(parse_pixels("a,b").is_err());
    }

    #[test]
    fn sibling_paths_share_the_stem() {
        assert_eq!(
            sibling(Path::new("x/recon.hsc"), "spectra.csv"),
            PathBuf::from("x/recon.spectra.csv")
        );
        assert_eq!(manifest_dir(Path::new("recon.hsc")), PathBuf::from("."));
    }
}
