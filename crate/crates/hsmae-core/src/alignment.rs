//! Cross-sensor band matching and encoder-input assembly.
//!
//! To reconstruct a hyperspectral cube from a multispectral image, each
//! wide MSI band is matched to the narrow HSI bands it observes: a pair
//! matches when their wavelength intervals overlap by more than the
//! threshold (0.6 by default, strict). Matched HSI bands become the fixed
//! visible bands; everything else is masked and left to the decoder.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datacube::{BandInfo, BandTable, Cube};
use crate::error::{Error, Result};
use crate::patching::GridDims;
use crate::Scalar;

/// Default match threshold: strictly more than 60% overlap.
pub const MATCH_THRESHOLD: f64 = 0.6;

/// Which interval width normalizes the overlap length. The HSI width is
/// the default — the question is "does the wide band observe this narrow
/// band" — but the choice is a convention, so it stays configurable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OverlapDenominator {
    #[default]
    #[serde(rename = "hsi")]
    Hsi,
    #[serde(rename = "msi")]
    Msi,
    #[serde(rename = "union")]
    Union,
}

/// Overlap fraction between an MSI and an HSI band: length of the
/// intersection of their wavelength intervals divided by the chosen
/// denominator width. 0 when disjoint, 1 when the denominator interval is
/// fully covered.
pub fn band_overlap_with(msi: &BandInfo, hsi: &BandInfo, denom: OverlapDenominator) -> f64 {
    let lo = msi.lo_nm().max(hsi.lo_nm());
    let hi = msi.hi_nm().min(hsi.hi_nm());
    let intersection = (hi - lo).max(0.0);
    let width = match denom {
        OverlapDenominator::Hsi => hsi.width_nm,
        OverlapDenominator::Msi => msi.width_nm,
        OverlapDenominator::Union => msi.hi_nm().max(hsi.hi_nm()) - msi.lo_nm().min(hsi.lo_nm()),
    };
    (intersection / width).min(1.0)
}

/// [`band_overlap_with`] under the default HSI-width denominator.
pub fn band_overlap(msi: &BandInfo, hsi: &BandInfo) -> f64 {
    band_overlap_with(msi, hsi, OverlapDenominator::Hsi)
}

/// One matched band pair. `overlap_fraction` always exceeds the match
/// threshold it was produced under.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandMatch {
    pub msi_index: usize,
    pub hsi_index: usize,
    pub overlap_fraction: f64,
}

/// The full matching between two sensors, with the tables embedded so the
/// set is a self-contained audit artifact. Each HSI band appears at most
/// once: it takes values from at most one MSI band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandMatchSet {
    pub msi_table: BandTable,
    pub hsi_table: BandTable,
    pub threshold: f64,
    pub denominator: OverlapDenominator,
    /// Sorted by `hsi_index`, ascending.
    pub matches: Vec<BandMatch>,
}

impl BandMatchSet {
    /// Per-HSI-band matched MSI index (`None` for unmatched bands),
    /// indexed by `hsi_index`.
    pub fn hsi_to_msi(&self) -> Vec<Option<usize>> {
        let mut map = vec![None; self.hsi_table.bands.len()];
        for m in &self.matches {
            map[m.hsi_index] = Some(m.msi_index);
        }
        map
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("band match set serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: BandMatchSet = serde_json::from_str(text)
            .map_err(|e| Error::Invalid(format!("band match set: {e}")))?;
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Invalid(msg) => Error::format(path, msg),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.msi_table.validate()?;
        self.hsi_table.validate()?;
        let mut seen = vec![false; self.hsi_table.bands.len()];
        for m in &self.matches {
            if m.hsi_index >= self.hsi_table.bands.len()
                || m.msi_index >= self.msi_table.bands.len()
            {
                return Err(Error::Invalid(format!(
                    "match ({}, {}) out of table range",
                    m.msi_index, m.hsi_index
                )));
            }
            if seen[m.hsi_index] {
                return Err(Error::Invalid(format!(
                    "hsi band {} matched twice",
                    m.hsi_index
                )));
            }
            seen[m.hsi_index] = true;
            if !(m.overlap_fraction > self.threshold) {
                return Err(Error::Invalid(format!(
                    "stored overlap {} does not exceed threshold {}",
                    m.overlap_fraction, self.threshold
                )));
            }
        }
        Ok(())
    }
}

/// Matches every HSI band against the MSI table: a pair qualifies when
/// its overlap strictly exceeds `threshold`; among qualifying MSI bands
/// the largest overlap wins, ties going to the lower `msi_index`.
/// Identity is carried by the `index` fields, so the entry order of the
/// tables cannot change the result.
pub fn match_bands_with(
    msi_table: &BandTable,
    hsi_table: &BandTable,
    threshold: f64,
    denom: OverlapDenominator,
) -> Result<BandMatchSet> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::Invalid(format!(
            "match threshold must be in [0, 1), got {threshold}"
        )));
    }
    let mut matches = Vec::new();
    let mut hsi_sorted: Vec<&BandInfo> = hsi_table.bands.iter().collect();
    hsi_sorted.sort_by_key(|b| b.index);
    let mut msi_sorted: Vec<&BandInfo> = msi_table.bands.iter().collect();
    msi_sorted.sort_by_key(|b| b.index);
    for hsi in hsi_sorted {
        let mut best: Option<(f64, usize)> = None;
        for msi in &msi_sorted {
            let f = band_overlap_with(msi, hsi, denom);
            if f > threshold && best.map_or(true, |(bf, _)| f > bf) {
                best = Some((f, msi.index));
            }
        }
        if let Some((f, msi_index)) = best {
            matches.push(BandMatch {
                msi_index,
                hsi_index: hsi.index,
                overlap_fraction: f,
            });
        }
    }
    Ok(BandMatchSet {
        msi_table: msi_table.clone(),
        hsi_table: hsi_table.clone(),
        threshold,
        denominator: denom,
        matches,
    })
}

/// [`match_bands_with`] under the default threshold and denominator.
pub fn match_bands(msi_table: &BandTable, hsi_table: &BandTable) -> Result<BandMatchSet> {
    match_bands_with(msi_table, hsi_table, MATCH_THRESHOLD, OverlapDenominator::Hsi)
}

/// Builds the encoder input cube for MSI→HSI reconstruction on the HSI
/// grid given by `dims`. Matched HSI bands take their MSI band's value;
/// unmatched bands inside a group with at least one match copy the
/// nearest matched band of that group (ties to the lower band index);
/// bands of fully-unmatched groups are 0 — those groups are masked, so
/// the encoder never sees the placeholder.
pub fn assemble_input<T: Scalar>(
    msi: &Cube<T>,
    matches: &BandMatchSet,
    dims: &GridDims,
) -> Result<Cube<T>> {
    if msi.h != dims.h() || msi.w != dims.w() {
        return Err(Error::Mismatch(format!(
            "msi cube is {}x{} but the target grid is {}x{}",
            msi.h,
            msi.w,
            dims.h(),
            dims.w()
        )));
    }
    if msi.c != matches.msi_table.bands.len() {
        return Err(Error::Mismatch(format!(
            "msi cube has {} bands but the match table lists {}",
            msi.c,
            matches.msi_table.bands.len()
        )));
    }
    let c = dims.c();
    if matches.hsi_table.bands.len() != c {
        return Err(Error::Mismatch(format!(
            "hsi table has {} bands but the grid expects {c}",
            matches.hsi_table.bands.len()
        )));
    }
    let hsi_to_msi = matches.hsi_to_msi();

    // Per HSI band: the MSI band whose value it takes, if its group has
    // any match at all.
    let mut source = vec![None; c];
    for g in 0..dims.gs {
        let lo = g * dims.s;
        let hi = lo + dims.s;
        let matched: Vec<usize> = (lo..hi).filter(|&b| hsi_to_msi[b].is_some()).collect();
        if matched.is_empty() {
            continue;
        }
        for b in lo..hi {
            let mut nearest = matched[0];
            for &m in &matched[1..] {
                if b.abs_diff(m) < b.abs_diff(nearest) {
                    nearest = m;
                }
            }
            source[b] = hsi_to_msi[nearest];
        }
    }

    let mut out = Cube::zeros(msi.h, msi.w, c, matches.hsi_table.clone())?;
    for i in 0..msi.h {
        for j in 0..msi.w {
            let px = msi.pixel(i, j);
            for (b, src) in source.iter().enumerate() {
                if let Some(m) = src {
                    *out.at_mut(i, j, b) = px[*m];
                }
            }
        }
    }
    Ok(out)
}

/// Simulates the MSI view of a hyperspectral cube: each MSI band is the
/// mean of the HSI bands matched to it, or the single nearest-center HSI
/// band when nothing matched. The counterpart of [`assemble_input`] for
/// building paired MSI/HSI datasets from hyperspectral data alone.
pub fn simulate_msi<T: Scalar>(hsi: &Cube<T>, matches: &BandMatchSet) -> Result<Cube<T>> {
    if hsi.c != matches.hsi_table.bands.len() {
        return Err(Error::Mismatch(format!(
            "hsi cube has {} bands but the match table lists {}",
            hsi.c,
            matches.hsi_table.bands.len()
        )));
    }
    let n_msi = matches.msi_table.bands.len();
    let mut sources: Vec<Vec<usize>> = vec![Vec::new(); n_msi];
    for m in &matches.matches {
        sources[m.msi_index].push(m.hsi_index);
    }
    for (m, src) in sources.iter_mut().enumerate() {
        if src.is_empty() {
            src.push(matches.hsi_table.nearest_band(matches.msi_table.bands[m].center_nm));
        }
    }

    let mut out = Cube::zeros(hsi.h, hsi.w, n_msi, matches.msi_table.clone())?;
    for i in 0..hsi.h {
        for j in 0..hsi.w {
            let px = hsi.pixel(i, j);
            for (m, src) in sources.iter().enumerate() {
                let sum: f64 = src.iter().map(|&b| px[b].to_f64()).sum();
                *out.at_mut(i, j, m) = T::cast(sum / src.len() as f64);
            }
        }
    }
    Ok(out)
}

/// Built-in sensor band tables. The satellite tables are representative
/// approximations for experimentation, not calibration data.
pub mod presets {
    use super::*;

    fn embedded(json: &str) -> BandTable {
        let table: BandTable = serde_json::from_str(json).expect("embedded band table parses");
        table.validate().expect("embedded band table is valid");
        table
    }

    /// 13 Sentinel-2-like channels (approximate centers/widths).
    pub fn sentinel2_like() -> BandTable {
        embedded(include_str!("../data/sentinel2-like.json"))
    }

    /// 240 evenly spaced EMIT-like bands over 420–2450 nm.
    pub fn emit_like() -> BandTable {
        embedded(include_str!("../data/emit-like.json"))
    }

    /// 202 evenly spaced EnMAP-like bands over 420–2450 nm.
    pub fn enmap_like() -> BandTable {
        embedded(include_str!("../data/enmap-like.json"))
    }

    /// The 24-band table of desk-scale synthetic cubes.
    pub fn desk_hsi() -> BandTable {
        BandTable::synthetic("desk-hsi", 24, 420.0, 2450.0)
    }

    /// A 4-band MSI companion to [`desk_hsi`]: each band spans two
    /// adjacent HSI bands exactly, so matching yields HSI bands
    /// {2,3, 8,9, 14,15, 20,21} and leaves two of the six s=4 band
    /// groups fully masked.
    pub fn desk_msi() -> BandTable {
        let step = (2450.0 - 420.0) / 24.0;
        let bands = (0..4)
            .map(|k| BandInfo {
                index: k,
                center_nm: 420.0 + step * (6 * k + 3) as f64,
                width_nm: 2.0 * step,
            })
            .collect();
        BandTable::new("desk-msi", bands).expect("desk msi table is valid")
    }
}
