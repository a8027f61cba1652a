//! Band-group tokenization and masking.
//!
//! A cube is split into non-overlapping `(p, p, s)` patches: `gh * gw`
//! spatial positions times `gs = C/s` band groups. A [`MaskPlan`] assigns
//! every token to masked or visible under one of four strategies:
//!
//! * `spectral` — whole band groups are hidden across all spatial
//!   positions, so the model must infer missing wavelengths.
//! * `spatial` — whole spatial columns are hidden across all groups.
//! * `spatial-spectral` — tokens are hidden independently.
//! * `fixed-bands` — visibility follows a sensor band match instead of
//!   randomness; used for multispectral-to-hyperspectral inference.

use serde::{Deserialize, Serialize};

use crate::alignment::BandMatchSet;
use crate::datacube::Cube;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng::Stream;
use crate::Scalar;

/// Token grid geometry: `gh * gw` spatial patches of side `p`, `gs` band
/// groups of `s` adjacent bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDims {
    pub gh: usize,
    pub gw: usize,
    pub gs: usize,
    pub p: usize,
    pub s: usize,
}

impl GridDims {
    pub fn of(h: usize, w: usize, c: usize, p: usize, s: usize) -> Result<Self> {
        if p == 0 || s == 0 {
            return Err(Error::Invalid("patch sizes must be >= 1".into()));
        }
        if h % p != 0 || w % p != 0 {
            return Err(Error::Mismatch(format!(
                "patch side {p} must divide H={h} and W={w}"
            )));
        }
        if c % s != 0 {
            return Err(Error::Mismatch(format!(
                "group size {s} must divide C={c}"
            )));
        }
        Ok(GridDims {
            gh: h / p,
            gw: w / p,
            gs: c / s,
            p,
            s,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.gh * self.gw * self.gs
    }

    pub fn token_len(&self) -> usize {
        self.p * self.p * self.s
    }

    pub fn h(&self) -> usize {
        self.gh * self.p
    }

    pub fn w(&self) -> usize {
        self.gw * self.p
    }

    pub fn c(&self) -> usize {
        self.gs * self.s
    }

    /// Token index of grid cell `(i, j, g)` in row-major `(gh, gw, gs)`.
    #[inline]
    pub fn token_index(&self, i: usize, j: usize, g: usize) -> usize {
        (i * self.gw + j) * self.gs + g
    }

    /// Inverse of [`GridDims::token_index`].
    #[inline]
    pub fn token_coords(&self, t: usize) -> (usize, usize, usize) {
        let g = t % self.gs;
        let rest = t / self.gs;
        (rest / self.gw, rest % self.gw, g)
    }
}

/// The `(p, p, s)`-patched view of a cube: one row per token of length
/// `p*p*s`, tokens in row-major `(gh, gw, gs)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid<T> {
    pub dims: GridDims,
    pub tokens: Mat<T>,
}

/// Splits a cube into `(p, p, s)` tokens. Token `(i, j, g)` holds the
/// block `cube[i*p..(i+1)*p, j*p..(j+1)*p, g*s..(g+1)*s]` flattened in
/// (row, col, band) order.
pub fn patchify<T: Scalar>(cube: &Cube<T>, p: usize, s: usize) -> Result<TokenGrid<T>> {
    let dims = GridDims::of(cube.h, cube.w, cube.c, p, s)?;
    let mut tokens = Mat::zeros(dims.n_tokens(), dims.token_len());
    for i in 0..dims.gh {
        for j in 0..dims.gw {
            for g in 0..dims.gs {
                let row = tokens.row_mut(dims.token_index(i, j, g));
                let mut k = 0;
                for r in 0..p {
                    for cc in 0..p {
                        let px = cube.pixel(i * p + r, j * p + cc);
                        row[k..k + s].copy_from_slice(&px[g * s..(g + 1) * s]);
                        k += s;
                    }
                }
            }
        }
    }
    Ok(TokenGrid { dims, tokens })
}

/// Exact inverse of [`patchify`]: reassembles the `H*W*C` value buffer.
pub fn unpatchify<T: Scalar>(
    grid: &TokenGrid<T>,
    h: usize,
    w: usize,
    c: usize,
) -> Result<Vec<T>> {
    let dims = &grid.dims;
    if dims.h() != h || dims.w() != w || dims.c() != c {
        return Err(Error::Mismatch(format!(
            "grid of {}x{}x{} cannot unpatchify into {h}x{w}x{c}",
            dims.h(),
            dims.w(),
            dims.c()
        )));
    }
    if grid.tokens.shape() != (dims.n_tokens(), dims.token_len()) {
        return Err(Error::Mismatch("token matrix shape".into()));
    }
    let (p, s) = (dims.p, dims.s);
    let mut data = vec![T::zero(); h * w * c];
    for i in 0..dims.gh {
        for j in 0..dims.gw {
            for g in 0..dims.gs {
                let row = grid.tokens.row(dims.token_index(i, j, g));
                let mut k = 0;
                for r in 0..p {
                    for cc in 0..p {
                        let base = ((i * p + r) * w + (j * p + cc)) * c + g * s;
                        data[base..base + s].copy_from_slice(&row[k..k + s]);
                        k += s;
                    }
                }
            }
        }
    }
    Ok(data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskStrategy {
    #[serde(rename = "spatial")]
    Spatial,
    #[serde(rename = "spectral")]
    Spectral,
    #[serde(rename = "spatial-spectral")]
    SpatialSpectral,
    #[serde(rename = "fixed-bands")]
    FixedBands,
}

impl std::fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            MaskStrategy::Spatial => "spatial",
            MaskStrategy::Spectral => "spectral",
            MaskStrategy::SpatialSpectral => "spatial-spectral",
            MaskStrategy::FixedBands => "fixed-bands",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(MaskStrategy::Spatial),
            "spectral" => Ok(MaskStrategy::Spectral),
            "spatial-spectral" => Ok(MaskStrategy::SpatialSpectral),
            "fixed-bands" => Ok(MaskStrategy::FixedBands),
            other => Err(Error::Invalid(format!("unknown mask strategy {other:?}"))),
        }
    }
}

/// Deterministic assignment of every token to masked or visible.
/// Serializes to JSON as a reproducibility artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub strategy: MaskStrategy,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub dims: GridDims,
    /// Masked token indices, sorted ascending.
    pub masked: Vec<usize>,
}

impl MaskPlan {
    pub fn n_tokens(&self) -> usize {
        self.dims.n_tokens()
    }

    pub fn n_masked(&self) -> usize {
        self.masked.len()
    }

    pub fn n_visible(&self) -> usize {
        self.n_tokens() - self.masked.len()
    }

    /// Per-token masked flags, indexed by token index.
    pub fn mask_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.n_tokens()];
        for &t in &self.masked {
            flags[t] = true;
        }
        flags
    }

    /// Visible token indices, sorted ascending (the canonical encoder order).
    pub fn visible(&self) -> Vec<usize> {
        let flags = self.mask_flags();
        (0..self.n_tokens()).filter(|&t| !flags[t]).collect()
    }

    pub fn is_masked(&self, token: usize) -> bool {
        self.masked.binary_search(&token).is_ok()
    }

    /// True if band group `g` is masked at every spatial position.
    pub fn group_fully_masked(&self, g: usize) -> bool {
        let d = &self.dims;
        (0..d.gh).all(|i| (0..d.gw).all(|j| self.is_masked(d.token_index(i, j, g))))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mask plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: MaskPlan =
            serde_json::from_str(text).map_err(|e| Error::Invalid(format!("mask plan: {e}")))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_tokens();
        for w in self.masked.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Invalid(
                    "masked indices must be sorted and unique".into(),
                ));
            }
        }
        if let Some(&last) = self.masked.last() {
            if last >= n {
                return Err(Error::Invalid(format!(
                    "masked index {last} out of range for {n} tokens"
                )));
            }
        }
        Ok(())
    }
}

/// Number of masked units for ratio `r` over `n` units:
/// round-half-away-from-zero, exact rather than in expectation.
pub fn masked_unit_count(r: f64, n: usize) -> usize {
    (r * n as f64).round() as usize
}

/// Draws a deterministic random [`MaskPlan`]. Maskable units are band
/// groups (`spectral`), spatial positions (`spatial`), or single tokens
/// (`spatial-spectral`); exactly `round(r * units)` are masked, chosen
/// uniformly without replacement from the seed.
pub fn sample_mask(
    strategy: MaskStrategy,
    dims: &GridDims,
    r: f64,
    seed: u64,
) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&r) {
        return Err(Error::Invalid(format!(
            "masking ratio must be in [0, 1), got {r}"
        )));
    }
    let mut rng = Stream::seed(seed);
    let masked = match strategy {
        MaskStrategy::Spectral => {
            let k = masked_unit_count(r, dims.gs);
            let groups = rng.choose_sorted(k, dims.gs);
            let mut tokens = Vec::with_capacity(k * dims.gh * dims.gw);
            for i in 0..dims.gh {
                for j in 0..dims.gw {
                    for &g in &groups {
                        tokens.push(dims.token_index(i, j, g));
                    }
                }
            }
            tokens.sort_unstable();
            tokens
        }
        MaskStrategy::Spatial => {
            let k = masked_unit_count(r, dims.gh * dims.gw);
            let cells = rng.choose_sorted(k, dims.gh * dims.gw);
            let mut tokens = Vec::with_capacity(k * dims.gs);
            for &cell in &cells {
                let (i, j) = (cell / dims.gw, cell % dims.gw);
                for g in 0..dims.gs {
                    tokens.push(dims.token_index(i, j, g));
                }
            }
            tokens.sort_unstable();
            tokens
        }
        MaskStrategy::SpatialSpectral => {
            let k = masked_unit_count(r, dims.n_tokens());
            rng.choose_sorted(k, dims.n_tokens())
        }
        MaskStrategy::FixedBands => {
            return Err(Error::Invalid(
                "fixed-bands plans come from mask_from_band_match, not sampling".into(),
            ));
        }
    };
    Ok(MaskPlan {
        strategy,
        r: Some(r),
        seed: Some(seed),
        dims: *dims,
        masked,
    })
}

/// Builds the fixed-bands plan for multispectral input: a band group is
/// visible iff at least one of its `s` bands has a match; every spatial
/// position of a visible group is visible; everything else is masked.
pub fn mask_from_band_match(matches: &BandMatchSet, dims: &GridDims) -> Result<MaskPlan> {
    let c = dims.c();
    let mut group_visible = vec![false; dims.gs];
    for m in &matches.matches {
        if m.hsi_index >= c {
            return Err(Error::Invalid(format!(
                "matched band index {} out of range for C={c}",
                m.hsi_index
            )));
        }
        group_visible[m.hsi_index / dims.s] = true;
    }
    let mut masked = Vec::new();
    for i in 0..dims.gh {
        for j in 0..dims.gw {
            for g in 0..dims.gs {
                if !group_visible[g] {
                    masked.push(dims.token_index(i, j, g));
                }
            }
        }
    }
    masked.sort_unstable();
    Ok(MaskPlan {
        strategy: MaskStrategy::FixedBands,
        r: None,
        seed: None,
        dims: *dims,
        masked,
    })
}

/// Fixed sinusoidal positional table: one row of width `d` per token,
/// the concatenation of row/column sinusoids over `(i, j)` and a separate
/// sinusoidal slice over the band-group index `g`.
#[derive(Debug, Clone)]
pub struct PosEmbed<T> {
    pub dims: GridDims,
    pub width: usize,
    pub table: Mat<T>,
    /// Column where the spectral slice starts (row/col slices precede it).
    pub spectral_offset: usize,
}

fn sinusoid_into(out: &mut [f64], pos: f64, width: usize) {
    debug_assert!(width % 2 == 0);
    let half = width / 2;
    for t in 0..half {
        let freq = 1.0 / 10000f64.powf(2.0 * t as f64 / width as f64);
        out[2 * t] = (pos * freq).sin();
        out[2 * t + 1] = (pos * freq).cos();
    }
}

/// Builds the positional table for embedding width `d` (divisible by 4,
/// at least 8). Deterministic; distinct `(i, j, g)` produce distinct rows.
pub fn build_pos_embed<T: Scalar>(dims: &GridDims, d: usize) -> Result<PosEmbed<T>> {
    if d % 4 != 0 || d < 8 {
        return Err(Error::Invalid(format!(
            "embedding width must be a multiple of 4 and >= 8, got {d}"
        )));
    }
    let even = |x: usize| x & !1;
    let m_spec = even(d / 4);
    let rem = d - m_spec;
    let m_row = even(rem / 2);
    let m_col = rem - m_row;
    let mut table = Mat::zeros(dims.n_tokens(), d);
    let mut row_buf = vec![0.0f64; m_row];
    let mut col_buf = vec![0.0f64; m_col];
    let mut spec_buf = vec![0.0f64; m_spec];
    for i in 0..dims.gh {
        sinusoid_into(&mut row_buf, i as f64, m_row);
        for j in 0..dims.gw {
            sinusoid_into(&mut col_buf, j as f64, m_col);
            for g in 0..dims.gs {
                sinusoid_into(&mut spec_buf, g as f64, m_spec);
                let out = table.row_mut(dims.token_index(i, j, g));
                for (k, &v) in row_buf.iter().chain(&col_buf).chain(&spec_buf).enumerate() {
                    out[k] = T::cast(v);
                }
            }
        }
    }
    Ok(PosEmbed {
        dims: *dims,
        width: d,
        table,
        spectral_offset: m_row + m_col,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datacube::{gen_synthetic, SynthSpec};

    #[test]
    fn token_counts_match_shapes() {
        let d = GridDims::of(32, 32, 24, 8, 4).unwrap();
        assert_eq!((d.gh, d.gw, d.gs), (4, 4, 6));
        assert_eq!(d.n_tokens(), 96);
        assert_eq!(d.token_len(), 256);

        let d = GridDims::of(128, 128, 240, 16, 10).unwrap();
        assert_eq!(d.n_tokens(), 1536);
        assert_eq!(d.token_len(), 2560);
    }

    #[test]
    fn non_divisible_dims_are_rejected() {
        assert!(GridDims::of(30, 32, 24, 8, 4).is_err());
        assert!(GridDims::of(32, 32, 24, 8, 5).is_err());
    }

    #[test]
    fn patchify_places_block_values() {
        let cube: crate::datacube::Cube<f64> =
            gen_synthetic(&SynthSpec::new(4, 4, 4, 2, 5)).unwrap();
        let grid = patchify(&cube, 2, 2).unwrap();
        // token (1, 0, 1) should hold cube[2..4, 0..2, 2..4]
        let t = grid.dims.token_index(1, 0, 1);
        let row = grid.tokens.row(t);
        let mut k = 0;
        for r in 2..4 {
            for cc in 0..2 {
                for band in 2..4 {
                    assert_eq!(row[k], cube.at(r, cc, band));
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn unpatchify_inverts_patchify() {
        let cube: crate::datacube::Cube<f32> =
            gen_synthetic(&SynthSpec::new(8, 8, 12, 3, 3)).unwrap();
        let grid = patchify(&cube, 4, 3).unwrap();
        let back = unpatchify(&grid, 8, 8, 12).unwrap();
        assert_eq!(cube.data, back);
    }

    #[test]
    fn spectral_mask_is_spatially_constant() {
        let dims = GridDims::of(32, 32, 24, 8, 4).unwrap();
        let plan = sample_mask(MaskStrategy::Spectral, &dims, 0.75, 40).unwrap();
        let masked_groups: Vec<usize> = (0..dims.gs)
            .filter(|&g| plan.is_masked(dims.token_index(0, 0, g)))
            .collect();
        assert_eq!(masked_groups.len(), masked_unit_count(0.75, dims.gs));
        for i in 0..dims.gh {
            for j in 0..dims.gw {
                for g in 0..dims.gs {
                    assert_eq!(
                        plan.is_masked(dims.token_index(i, j, g)),
                        masked_groups.contains(&g)
                    );
                }
            }
        }
    }

    #[test]
    fn spectral_mask_answers_spec_arithmetic() {
        // gs = 24, r = 0.75 -> exactly 18 masked groups
        let dims = GridDims::of(16, 16, 96, 8, 4).unwrap();
        assert_eq!(dims.gs, 24);
        let plan = sample_mask(MaskStrategy::Spectral, &dims, 0.75, 1).unwrap();
        assert_eq!(plan.n_masked(), 18 * dims.gh * dims.gw);
    }

    #[test]
    fn spatial_spectral_mask_count_is_exact() {
        let dims = GridDims::of(32, 32, 24, 8, 4).unwrap();
        assert_eq!(dims.n_tokens(), 96);
        let plan = sample_mask(MaskStrategy::SpatialSpectral, &dims, 0.75, 9).unwrap();
        assert_eq!(plan.n_masked(), 72);
    }

    #[test]
    fn spatial_mask_is_group_constant() {
        let dims = GridDims::of(16, 16, 8, 4, 2).unwrap();
        let plan = sample_mask(MaskStrategy::Spatial, &dims, 0.5, 2).unwrap();
        for i in 0..dims.gh {
            for j in 0..dims.gw {
                let m0 = plan.is_masked(dims.token_index(i, j, 0));
                for g in 1..dims.gs {
                    assert_eq!(plan.is_masked(dims.token_index(i, j, g)), m0);
                }
            }
        }
    }

    #[test]
    fn zero_ratio_masks_nothing() {
        let dims = GridDims::of(8, 8, 4, 4, 2).unwrap();
        for strategy in [
            MaskStrategy::Spatial,
            MaskStrategy::Spectral,
            MaskStrategy::SpatialSpectral,
        ] {
            let plan = sample_mask(strategy, &dims, 0.0, 3).unwrap();
            assert!(plan.masked.is_empty());
        }
    }

    #[test]
    fn invalid_ratio_is_rejected() {
        let dims = GridDims::of(8, 8, 4, 4, 2).unwrap();
        assert!(sample_mask(MaskStrategy::SpatialSpectral, &dims, 1.0, 0).is_err());
        assert!(sample_mask(MaskStrategy::SpatialSpectral, &dims, -0.1, 0).is_err());
    }

    #[test]
    fn same_seed_same_plan_distinct_seeds_distinct_plans() {
        let dims = GridDims::of(16, 16, 24, 4, 4).unwrap();
        let a = sample_mask(MaskStrategy::SpatialSpectral, &dims, 0.5, 77).unwrap();
        let b = sample_mask(MaskStrategy::SpatialSpectral, &dims, 0.5, 77).unwrap();
        assert_eq!(a, b);

        let mut distinct = std::collections::HashSet::new();
        for seed in 0..100 {
            let plan = sample_mask(MaskStrategy::SpatialSpectral, &dims, 0.5, seed).unwrap();
            distinct.insert(plan.masked);
        }
        assert!(distinct.len() >= 99, "only {} distinct plans", distinct.len());
    }

    #[test]
    fn mask_plan_json_roundtrip() {
        let dims = GridDims::of(8, 8, 8, 4, 2).unwrap();
        let plan = sample_mask(MaskStrategy::Spectral, &dims, 0.5, 5).unwrap();
        let back = MaskPlan::from_json(&plan.to_json()).unwrap();
        assert_eq!(plan, back);
    }

    #[test]
    fn pos_embed_rejects_bad_width() {
        let dims = GridDims::of(8, 8, 4, 4, 2).unwrap();
        assert!(build_pos_embed::<f64>(&dims, 30).is_err());
        assert!(build_pos_embed::<f64>(&dims, 4).is_err());
    }

    #[test]
    fn pos_embed_spectral_slice_carries_group_identity() {
        let dims = GridDims::of(8, 8, 6, 4, 2).unwrap();
        let pe = build_pos_embed::<f64>(&dims, 16).unwrap();
        let a = pe.table.row(dims.token_index(1, 0, 0));
        let b = pe.table.row(dims.token_index(1, 0, 1));
        // same (i, j): spatial slices equal, spectral slice differs
        assert_eq!(a[..pe.spectral_offset], b[..pe.spectral_offset]);
        assert_ne!(a[pe.spectral_offset..], b[pe.spectral_offset..]);
    }

    #[test]
    fn pos_embed_is_deterministic_and_injective() {
        let dims = GridDims::of(16, 16, 12, 4, 4).unwrap();
        let a = build_pos_embed::<f32>(&dims, 32).unwrap();
        let b = build_pos_embed::<f32>(&dims, 32).unwrap();
        assert_eq!(a.table.as_slice(), b.table.as_slice());
        for t in 0..dims.n_tokens() {
            for u in (t + 1)..dims.n_tokens() {
                assert_ne!(a.table.row(t), a.table.row(u), "tokens {t} and {u}");
            }
        }
    }

    #[test]
    fn pos_embed_self_dot_is_maximal_in_row() {
        // brute force over a 4x4x3 grid
        let dims = GridDims::of(8, 8, 6, 2, 2).unwrap();
        assert_eq!((dims.gh, dims.gw, dims.gs), (4, 4, 3));
        let pe = build_pos_embed::<f64>(&dims, 24).unwrap();
        let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
        for i in 0..dims.gh {
            for j in 0..dims.gw {
                for g in 0..dims.gs {
                    let t = dims.token_index(i, j, g);
                    let self_dot = dot(pe.table.row(t), pe.table.row(t));
                    for j2 in 0..dims.gw {
                        for g2 in 0..dims.gs {
                            let u = dims.token_index(i, j2, g2);
                            if u != t {
                                assert!(
                                    dot(pe.table.row(t), pe.table.row(u)) < self_dot,
                                    "token {t} vs {u}"
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}
