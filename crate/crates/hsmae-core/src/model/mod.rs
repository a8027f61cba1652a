//! The asymmetric masked-autoencoder transformer.
//!
//! The encoder runs over visible tokens only — masked tokens are never
//! gathered, so their contents cannot reach the latents. The decoder
//! receives the projected latents scattered back to their grid positions
//! with a learned mask token standing in at masked positions, runs its
//! own (smaller) block stack, and reconstructs every token with a linear
//! head. The loss is holistic: mean squared error over all pixels, with
//! the masked/unmasked split reported alongside.

pub mod layers;
pub mod params;

use serde::{Deserialize, Serialize};

use crate::datacube::{normalize, BandStats, Cube};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::patching::{build_pos_embed, patchify, unpatchify, MaskPlan, PosEmbed, TokenGrid};
use crate::Scalar;

use layers::{block_backward, block_forward, layer_norm, layer_norm_backward, linear, linear_backward, BlockCache, LnCache};
pub use params::{init_params, BlockP, LinearP, ModelParams, NormP};

/// Architecture hyperparameters. Block counts may be zero (the model
/// degenerates to its projections and head — useful for debugging);
/// everything else must be at least 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: String,
    /// Spatial patch side.
    pub p: usize,
    /// Bands per band group.
    pub s: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub enc_dim: usize,
    pub dec_dim: usize,
    pub enc_heads: usize,
    pub dec_heads: usize,
    pub mlp_ratio: usize,
}

impl ModelConfig {
    /// Values per token: `p * p * s`.
    pub fn token_len(&self) -> usize {
        self.p * self.p * self.s
    }

    /// Tiny configuration for tests and laptop runs: 2 encoder and 1
    /// decoder blocks at widths 64/48.
    pub fn desk() -> Self {
        ModelConfig {
            preset: "desk".into(),
            p: 8,
            s: 4,
            enc_blocks: 2,
            dec_blocks: 1,
            enc_dim: 64,
            dec_dim: 48,
            enc_heads: 4,
            dec_heads: 4,
            mlp_ratio: 4,
        }
    }

    /// Full-size configuration for 128×128×240 cubes: 4 encoder and 2
    /// decoder blocks, widths 768/512, 8 heads each.
    pub fn emit_paper() -> Self {
        ModelConfig {
            preset: "emit-paper".into(),
            p: 16,
            s: 10,
            enc_blocks: 4,
            dec_blocks: 2,
            enc_dim: 768,
            dec_dim: 512,
            enc_heads: 8,
            dec_heads: 8,
            mlp_ratio: 4,
        }
    }

    /// Same tower as [`ModelConfig::emit_paper`] sized for 202-band
    /// cubes (`s = 2`, the only small divisor of 202).
    pub fn enmap_paper() -> Self {
        ModelConfig {
            preset: "enmap-paper".into(),
            s: 2,
            ..ModelConfig::emit_paper()
        }
    }

    pub fn by_preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "emit-paper" => {
                let mut cfg = Self::emit_paper();
                cfg.preset = name.into();
                Some(cfg)
            }
            "enmap-paper" => Some(Self::enmap_paper()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 1 || self.s < 1 || self.mlp_ratio < 1 {
            return Err(Error::Invalid(
                "patch sizes and mlp ratio must be >= 1".into(),
            ));
        }
        if self.enc_heads < 1 || self.dec_heads < 1 {
            return Err(Error::Invalid("head counts must be >= 1".into()));
        }
        for (tag, dim, heads) in [
            ("encoder", self.enc_dim, self.enc_heads),
            ("decoder", self.dec_dim, self.dec_heads),
        ] {
            if dim % heads != 0 {
                return Err(Error::Invalid(format!(
                    "{tag} width {dim} is not divisible by {heads} heads"
                )));
            }
            if dim % 4 != 0 || dim < 8 {
                return Err(Error::Invalid(format!(
                    "{tag} width {dim} must be a multiple of 4 and >= 8"
                )));
            }
        }
        Ok(())
    }
}

/// Configuration plus parameters: everything the forward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Scalar> ModelState<T> {
    pub fn convert<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            params: self.params.convert(),
        }
    }
}

/// Fresh model with seeded initialization (see [`init_params`]).
pub fn init_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelState<T>> {
    cfg.validate()?;
    Ok(ModelState {
        config: cfg.clone(),
        params: init_params(cfg, seed),
    })
}

/// Encoder output: one latent row per visible token, with the token
/// indices the rows correspond to.
#[derive(Debug, Clone, PartialEq)]
pub struct Latents<T> {
    pub indices: Vec<usize>,
    pub data: Mat<T>,
}

fn check_pos<T: Scalar>(pos: &PosEmbed<T>, plan: &MaskPlan, want_width: usize) -> Result<()> {
    if pos.dims != plan.dims {
        return Err(Error::Mismatch(
            "positional table grid differs from the mask plan grid".into(),
        ));
    }
    if pos.width != want_width {
        return Err(Error::Mismatch(format!(
            "positional width {} does not match embedding width {want_width}",
            pos.width
        )));
    }
    Ok(())
}

/// The encoder stack over an explicit token subset: project, add the
/// positional rows for `token_indices`, run the blocks. Token order is
/// the row order given — attention treats rows as a set, so permuting
/// (tokens, indices) together permutes the output rows accordingly.
pub fn encode_tokens<T: Scalar>(
    state: &ModelState<T>,
    tokens: &Mat<T>,
    token_indices: &[usize],
    pos: &PosEmbed<T>,
) -> Result<Mat<T>> {
    let (out, _) = encoder_pass(state, tokens, token_indices, pos)?;
    Ok(out)
}

fn encoder_pass<T: Scalar>(
    state: &ModelState<T>,
    tokens: &Mat<T>,
    token_indices: &[usize],
    pos: &PosEmbed<T>,
) -> Result<(Mat<T>, Vec<BlockCache<T>>)> {
    let cfg = &state.config;
    if token_indices.is_empty() {
        return Err(Error::NoVisibleTokens);
    }
    if tokens.rows() != token_indices.len() {
        return Err(Error::Mismatch(format!(
            "{} token rows for {} indices",
            tokens.rows(),
            token_indices.len()
        )));
    }
    if tokens.cols() != cfg.token_len() {
        return Err(Error::Mismatch(format!(
            "token length {} does not match p*p*s = {}",
            tokens.cols(),
            cfg.token_len()
        )));
    }
    if pos.width != cfg.enc_dim {
        return Err(Error::Mismatch(format!(
            "positional width {} does not match encoder width {}",
            pos.width, cfg.enc_dim
        )));
    }
    let n_tokens = pos.dims.n_tokens();
    let mut seen = vec![false; n_tokens];
    for &t in token_indices {
        if t >= n_tokens {
            return Err(Error::Invalid(format!(
                "token index {t} out of range for {n_tokens} tokens"
            )));
        }
        if seen[t] {
            return Err(Error::Invalid(format!("token index {t} fed twice")));
        }
        seen[t] = true;
    }

    let mut x = linear(tokens, &state.params.token_proj);
    for (row, &t) in token_indices.iter().enumerate() {
        let pr = pos.table.row(t);
        for (v, &p) in x.row_mut(row).iter_mut().zip(pr) {
            *v += p;
        }
    }
    let mut caches = Vec::with_capacity(cfg.enc_blocks);
    for block in &state.params.enc {
        let (next, cache) = block_forward(x, block, cfg.enc_heads);
        x = next;
        caches.push(cache);
    }
    Ok((x, caches))
}

/// Encodes the visible tokens of a grid under a mask plan. Masked token
/// contents are never read: the output is bit-identical under arbitrary
/// changes to them.
pub fn encode<T: Scalar>(
    state: &ModelState<T>,
    grid: &TokenGrid<T>,
    plan: &MaskPlan,
    pos: &PosEmbed<T>,
) -> Result<Latents<T>> {
    if grid.dims != plan.dims {
        return Err(Error::Mismatch(
            "token grid dims differ from the mask plan dims".into(),
        ));
    }
    check_pos(pos, plan, state.config.enc_dim)?;
    let visible = plan.visible();
    if visible.is_empty() {
        return Err(Error::NoVisibleTokens);
    }
    let x_vis = grid.tokens.gather_rows(&visible);
    let (data, _) = encoder_pass(state, &x_vis, &visible, pos)?;
    Ok(Latents {
        indices: visible,
        data,
    })
}

fn decoder_pass<T: Scalar>(
    state: &ModelState<T>,
    latents: &Latents<T>,
    plan: &MaskPlan,
    pos: &PosEmbed<T>,
) -> Result<(TokenGrid<T>, Vec<BlockCache<T>>, Option<LnCache<T>>, Mat<T>)> {
    let cfg = &state.config;
    check_pos(pos, plan, cfg.dec_dim)?;
    if latents.data.cols() != cfg.enc_dim {
        return Err(Error::Mismatch(format!(
            "latent width {} does not match encoder width {}",
            latents.data.cols(),
            cfg.enc_dim
        )));
    }
    if latents.indices.len() != latents.data.rows() {
        return Err(Error::Mismatch(format!(
            "{} latent rows for {} indices",
            latents.data.rows(),
            latents.indices.len()
        )));
    }
    if latents.indices.len() != plan.n_visible() {
        return Err(Error::Mismatch(format!(
            "{} latents for {} visible tokens",
            latents.indices.len(),
            plan.n_visible()
        )));
    }
    let flags = plan.mask_flags();
    let mut placed = vec![false; plan.n_tokens()];
    for &t in &latents.indices {
        if t >= flags.len() || flags[t] {
            return Err(Error::Invalid(format!(
                "latent for token {t}, which is not a visible token"
            )));
        }
        if placed[t] {
            return Err(Error::Invalid(format!("token {t} has two latents")));
        }
        placed[t] = true;
    }

    let z = linear(&latents.data, &state.params.enc_to_dec);
    let mut x = Mat::zeros(plan.n_tokens(), cfg.dec_dim);
    let mask_row = state.params.mask_token.row(0);
    for (t, &masked) in flags.iter().enumerate() {
        if masked {
            x.row_mut(t).copy_from_slice(mask_row);
        }
    }
    for (row, &t) in latents.indices.iter().enumerate() {
        x.row_mut(t).copy_from_slice(z.row(row));
    }
    x.add_assign(&pos.table);

    let mut caches = Vec::with_capacity(cfg.dec_blocks);
    for block in &state.params.dec {
        let (next, cache) = block_forward(x, block, cfg.dec_heads);
        x = next;
        caches.push(cache);
    }
    // the final normalization stabilizes block outputs; with no decoder
    // blocks there is nothing to stabilize and the model stays affine
    let (final_out, final_ln) = if state.params.dec.is_empty() {
        (x, None)
    } else {
        let (out, ln) = layer_norm(&x, &state.params.final_norm);
        (out, Some(ln))
    };
    let tokens = linear(&final_out, &state.params.head);
    Ok((
        TokenGrid {
            dims: plan.dims,
            tokens,
        },
        caches,
        final_ln,
        final_out,
    ))
}

/// Decodes latents into a full reconstructed token grid: latents are
/// projected to the decoder width and scattered to their positions, the
/// mask token fills masked positions, positional rows are added to all,
/// and the head reconstructs every token after the final normalization
/// (skipped in block-free configurations, which stay purely affine).
pub fn decode<T: Scalar>(
    state: &ModelState<T>,
    latents: &Latents<T>,
    plan: &MaskPlan,
    pos: &PosEmbed<T>,
) -> Result<TokenGrid<T>> {
    let (grid, _, _, _) = decoder_pass(state, latents, plan, pos)?;
    Ok(grid)
}

/// The loss split over masked/unmasked/all pixels, in the space the
/// grids live in (normalized space during training). An empty pixel set
/// contributes a mean of 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub masked: f64,
    pub unmasked: f64,
    pub masked_pixels: usize,
    pub unmasked_pixels: usize,
}

/// Mean squared reconstruction error over all pixels, with per-set
/// means: the training objective is `total`.
pub fn holistic_loss<T: Scalar>(
    recon: &TokenGrid<T>,
    target: &TokenGrid<T>,
    plan: &MaskPlan,
) -> Result<LossBreakdown> {
    if recon.dims != target.dims || recon.dims != plan.dims {
        return Err(Error::Mismatch(
            "loss inputs disagree on grid dims".into(),
        ));
    }
    if recon.tokens.shape() != target.tokens.shape() {
        return Err(Error::Mismatch("loss inputs disagree on token shape".into()));
    }
    let flags = plan.mask_flags();
    let token_len = recon.tokens.cols();
    let mut sums = [0.0f64; 2];
    for (t, &masked) in flags.iter().enumerate() {
        let (r, y) = (recon.tokens.row(t), target.tokens.row(t));
        let mut s = 0.0f64;
        for (&a, &b) in r.iter().zip(y) {
            let d = a.to_f64() - b.to_f64();
            s += d * d;
        }
        sums[masked as usize] += s;
    }
    let masked_pixels = plan.n_masked() * token_len;
    let unmasked_pixels = plan.n_visible() * token_len;
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(LossBreakdown {
        total: mean(sums[0] + sums[1], masked_pixels + unmasked_pixels),
        masked: mean(sums[1], masked_pixels),
        unmasked: mean(sums[0], unmasked_pixels),
        masked_pixels,
        unmasked_pixels,
    })
}

/// Forward output: reconstructed cube values in normalized space (H·W·C,
/// row-major) and the loss split.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub recon: Vec<T>,
    pub loss: LossBreakdown,
}

/// Caches for one full forward pass, consumed by [`backward`].
pub(crate) struct TrainCaches<T> {
    x_vis: Mat<T>,
    visible: Vec<usize>,
    enc: Vec<BlockCache<T>>,
    enc_out: Mat<T>,
    dec: Vec<BlockCache<T>>,
    final_ln: Option<LnCache<T>>,
    final_out: Mat<T>,
}

/// Full forward over already-normalized token grids, keeping every
/// activation backward needs.
pub(crate) fn forward_grids<T: Scalar>(
    state: &ModelState<T>,
    grid: &TokenGrid<T>,
    plan: &MaskPlan,
    enc_pos: &PosEmbed<T>,
    dec_pos: &PosEmbed<T>,
) -> Result<(TokenGrid<T>, TrainCaches<T>)> {
    if grid.dims != plan.dims {
        return Err(Error::Mismatch(
            "token grid dims differ from the mask plan dims".into(),
        ));
    }
    check_pos(enc_pos, plan, state.config.enc_dim)?;
    let visible = plan.visible();
    if visible.is_empty() {
        return Err(Error::NoVisibleTokens);
    }
    let x_vis = grid.tokens.gather_rows(&visible);
    let (enc_out, enc_caches) = encoder_pass(state, &x_vis, &visible, enc_pos)?;
    let latents = Latents {
        indices: visible.clone(),
        data: enc_out,
    };
    let (recon, dec_caches, final_ln, final_out) =
        decoder_pass(state, &latents, plan, dec_pos)?;
    Ok((
        recon,
        TrainCaches {
            x_vis,
            visible,
            enc: enc_caches,
            enc_out: latents.data,
            dec: dec_caches,
            final_ln,
            final_out,
        },
    ))
}

/// Backward pass of the total (holistic) loss. Accumulates parameter
/// gradients into `grads` with `+=`, so batches sum naturally.
pub(crate) fn backward<T: Scalar>(
    state: &ModelState<T>,
    caches: &TrainCaches<T>,
    recon: &TokenGrid<T>,
    target: &TokenGrid<T>,
    grads: &mut ModelParams<T>,
) {
    let cfg = &state.config;
    let (n, token_len) = recon.tokens.shape();
    let scale = T::cast(2.0 / (n * token_len) as f64);
    let mut d_r = Mat::zeros(n, token_len);
    for ((d, &a), &b) in d_r
        .as_mut_slice()
        .iter_mut()
        .zip(recon.tokens.iter())
        .zip(target.tokens.iter())
    {
        *d = (a - b) * scale;
    }

    let d_final_out = linear_backward(&d_r, &caches.final_out, &state.params.head, &mut grads.head);
    let mut d = match &caches.final_ln {
        Some(ln) => layer_norm_backward(
            &d_final_out,
            &state.params.final_norm,
            ln,
            &mut grads.final_norm,
        ),
        None => d_final_out,
    };
    for i in (0..state.params.dec.len()).rev() {
        d = block_backward(&d, &state.params.dec[i], cfg.dec_heads, &caches.dec[i], &mut grads.dec[i]);
    }

    // positional rows are constants; the gradient passes through the
    // scatter: masked rows sum into the mask token, visible rows feed
    // the latent projection
    let flags_masked: Vec<bool> = {
        let mut f = vec![true; n];
        for &t in &caches.visible {
            f[t] = false;
        }
        f
    };
    let gm = grads.mask_token.row_mut(0);
    for (t, &masked) in flags_masked.iter().enumerate() {
        if masked {
            for (acc, &v) in gm.iter_mut().zip(d.row(t)) {
                *acc += v;
            }
        }
    }
    let d_z = d.gather_rows(&caches.visible);
    let mut d_enc = linear_backward(
        &d_z,
        &caches.enc_out,
        &state.params.enc_to_dec,
        &mut grads.enc_to_dec,
    );
    for i in (0..state.params.enc.len()).rev() {
        d_enc = block_backward(&d_enc, &state.params.enc[i], cfg.enc_heads, &caches.enc[i], &mut grads.enc[i]);
    }
    linear_backward(&d_enc, &caches.x_vis, &state.params.token_proj, &mut grads.token_proj);
}

/// End-to-end reconstruction of `input` scored against `target` (both in
/// reflectance space; normalization with `stats` happens inside). The
/// returned values stay in normalized space — denormalize for reporting.
pub fn forward_pair<T: Scalar>(
    state: &ModelState<T>,
    input: &Cube<T>,
    target: &Cube<T>,
    plan: &MaskPlan,
    stats: &BandStats<T>,
) -> Result<ForwardOutput<T>> {
    let cfg = &state.config;
    if (input.h, input.w, input.c) != (target.h, target.w, target.c) {
        return Err(Error::Mismatch(format!(
            "input cube {}x{}x{} vs target {}x{}x{}",
            input.h, input.w, input.c, target.h, target.w, target.c
        )));
    }
    let grid_in = patchify(&normalize(input, stats)?, cfg.p, cfg.s)?;
    let grid_tg = patchify(&normalize(target, stats)?, cfg.p, cfg.s)?;
    if grid_in.dims != plan.dims {
        return Err(Error::Mismatch(format!(
            "cube tokenizes to {:?}, mask plan built for {:?}",
            grid_in.dims, plan.dims
        )));
    }
    let enc_pos = build_pos_embed(&plan.dims, cfg.enc_dim)?;
    let dec_pos = build_pos_embed(&plan.dims, cfg.dec_dim)?;
    let (recon_grid, _) = forward_grids(state, &grid_in, plan, &enc_pos, &dec_pos)?;
    let loss = holistic_loss(&recon_grid, &grid_tg, plan)?;
    let recon = unpatchify(&recon_grid, input.h, input.w, input.c)?;
    Ok(ForwardOutput { recon, loss })
}

/// Self-reconstruction: [`forward_pair`] with the cube as its own target.
pub fn forward<T: Scalar>(
    state: &ModelState<T>,
    cube: &Cube<T>,
    plan: &MaskPlan,
    stats: &BandStats<T>,
) -> Result<ForwardOutput<T>> {
    forward_pair(state, cube, cube, plan, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datacube::{compute_stats, gen_synthetic, SynthSpec};
    use crate::patching::{sample_mask, GridDims, MaskStrategy};
    use crate::rng::Stream;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            preset: "test".into(),
            p: 2,
            s: 2,
            enc_blocks: 2,
            dec_blocks: 1,
            enc_dim: 16,
            dec_dim: 12,
            enc_heads: 2,
            dec_heads: 2,
            mlp_ratio: 2,
        }
    }

    fn fixture() -> (ModelState<f64>, Cube<f64>, GridDims) {
        let cfg = small_cfg();
        let state = init_model(&cfg, 42).unwrap();
        let cube = gen_synthetic(&SynthSpec::new(4, 4, 4, 2, 7)).unwrap();
        let dims = GridDims::of(4, 4, 4, 2, 2).unwrap();
        (state, cube, dims)
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut cfg = small_cfg();
        cfg.enc_dim = 15;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.dec_heads = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.enc_blocks = 0;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn presets_are_valid() {
        for name in ["desk", "emit-paper", "enmap-paper"] {
            let cfg = ModelConfig::by_preset(name).unwrap();
            assert_eq!(cfg.preset, name);
            cfg.validate().unwrap();
        }
        assert_eq!(ModelConfig::desk().token_len(), 256);
        assert_eq!(ModelConfig::emit_paper().token_len(), 2560);
        assert!(ModelConfig::by_preset("nope").is_none());
    }

    #[test]
    fn init_is_deterministic_with_unit_gains() {
        let cfg = small_cfg();
        let a: ModelState<f64> = init_model(&cfg, 9).unwrap();
        let b: ModelState<f64> = init_model(&cfg, 9).unwrap();
        assert_eq!(a.params, b.params);
        let c: ModelState<f64> = init_model(&cfg, 10).unwrap();
        assert_ne!(a.params, c.params);
        for (name, m) in a.params.visit() {
            if name.ends_with(".g") {
                assert!(m.iter().all(|&v| v == 1.0), "{name}");
            }
            if name.ends_with(".b") {
                assert!(m.iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn forward_at_init_is_finite() {
        let (state, cube, dims) = fixture();
        let plan = sample_mask(MaskStrategy::SpatialSpectral, &dims, 0.5, 3).unwrap();
        let stats = compute_stats(std::slice::from_ref(&cube)).unwrap();
        let out = forward(&state, &cube, &plan, &stats).unwrap();
        assert!(out.loss.total.is_finite());
        assert!(out.recon.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encode_emits_one_latent_per_visible_token() {
        let (state, cube, dims) = fixture();
        let grid = patchify(&cube, 2, 2).unwrap();
        let pos = build_pos_embed(&dims, 16).unwrap();

        let all_visible = MaskPlan {
            strategy: MaskStrategy::SpatialSpectral,
            r: Some(0.0),
            seed: Some(0),
            dims,
            masked: vec![],
        };
        let lat = encode(&state, &grid, &all_visible, &pos).unwrap();
        assert_eq!(lat.data.shape(), (dims.n_tokens(), 16));

        let plan = sample_mask(MaskStrategy::SpatialSpectral, &dims, 0.75, 5).unwrap();
        let lat = encode(&state, &grid, &plan, &pos).unwrap();
        assert_eq!(lat.data.rows(), plan.n_visible());
        assert_eq!(lat.indices, plan.visible());
    }

    #[test]
    fn encoder_never_reads_masked_tokens() {
        let (state, cube, dims) = fixture();
        let grid = patchify(&cube, 2, 2).unwrap();
        let pos = build_pos_embed(&dims, 16).unwrap();
        let plan = sample_mask(MaskStrategy::SpatialSpectral, &dims, 0.5, 8).unwrap();
        let base = encode(&state, &grid, &plan, &pos).unwrap();

        let mut rng = Stream::seed(99);
        for _ in 0..10 {
            let mut mutated = grid.clone();
            for &t in &plan.masked {
                for v in mutated.tokens.row_mut(t) {
                    *v = rng.uniform_in(-100.0, 100.0);
                }
            }
            let lat = encode(&state, &mutated, &plan, &pos).unwrap();
            assert_eq!(base.data.as_slice(), lat.data.as_slice());
        }
    }

    #[test]
    fn fully_masked_plan_is_an_error() {
        let (state, cube, dims) = fixture();
        let grid = patchify(&cube, 2, 2).unwrap();
        let pos = build_pos_embed(&dims, 16).unwrap();
        let plan = MaskPlan {
            strategy: MaskStrategy::FixedBands,
            r: None,
            seed: None,
            dims,
            masked: (0..dims.n_tokens()).collect(),
        };
        let err = encode(&state, &grid, &plan, &pos).unwrap_err();
        assert!(err.to_string().contains("no visible tokens"), "{err}");
    }

    #[test]
    fn decode_reconstructs_every_token() {
        let (state, cube, dims) = fixture();
        let grid = patchify(&cube, 2, 2).unwrap();
        let enc_pos = build_pos_embed(&dims, 16).unwrap();
        let dec_pos = build_pos_embed(&dims, 12).unwrap();
        for seed in [1u64, 2, 3] {
            let plan = sample_mask(MaskStrategy::Spectral, &dims, 0.5, seed).unwrap();
            let lat = encode(&state, &grid, &plan, &enc_pos).unwrap();
            let out = decode(&state, &lat, &plan, &dec_pos).unwrap();
            assert_eq!(out.tokens.shape(), (dims.n_tokens(), 8));
            let again = decode(&state, &lat, &plan, &dec_pos).unwrap();
            assert_eq!(out.tokens.as_slice(), again.tokens.as_slice());
        }
    }

    #[test]
    fn decode_rejects_wrong_latent_sets() {
        let (state, cube, dims) = fixture();
        let grid = patchify(&cube, 2, 2).unwrap();
        let enc_pos = build_pos_embed(&dims, 16).unwrap();
        let dec_pos = build_pos_embed(&dims, 12).unwrap();
        let plan = sample_mask(MaskStrategy::SpatialSpectral, &dims, 0.5, 4).unwrap();
        let lat = encode(&state, &grid, &plan, &enc_pos).unwrap();

        let mut short = lat.clone();
        short.indices.pop();
        assert!(decode(&state, &short, &plan, &dec_pos).is_err());

        let mut wrong = lat.clone();
        wrong.indices[0] = plan.masked[0];
        assert!(decode(&state, &wrong, &plan, &dec_pos).is_err());
    }

    #[test]
    fn permuted_visible_order_leaves_decode_output_nearly_unchanged() {
        let (state, cube, dims) = fixture();
        let grid = patchify(&cube, 2, 2).unwrap();
        let enc_pos = build_pos_embed(&dims, 16).unwrap();
        let dec_pos = build_pos_embed(&dims, 12).unwrap();
        let plan = sample_mask(MaskStrategy::SpatialSpectral, &dims, 0.5, 12).unwrap();

        let canonical = decode(
            &state,
            &encode(&state, &grid, &plan, &enc_pos).unwrap(),
            &plan,
            &dec_pos,
        )
        .unwrap();

        let visible = plan.visible();
        let perm = Stream::seed(31).permutation(visible.len());
        let shuffled: Vec<usize> = perm.iter().map(|&k| visible[k]).collect();
        let tokens = grid.tokens.gather_rows(&shuffled);
        let data = encode_tokens(&state, &tokens, &shuffled, &enc_pos).unwrap();
        let out = decode(
            &state,
            &Latents {
                indices: shuffled,
                data,
            },
            &plan,
            &dec_pos,
        )
        .unwrap();

        for (a, b) in canonical.tokens.iter().zip(out.tokens.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn holistic_loss_on_equal_grids_is_zero() {
        let (_, cube, dims) = fixture();
        let grid = patchify(&cube, 2, 2).unwrap();
        let plan = sample_mask(MaskStrategy::SpatialSpectral, &dims, 0.5, 2).unwrap();
        let loss = holistic_loss(&grid, &grid, &plan).unwrap();
        assert_eq!((loss.total, loss.masked, loss.unmasked), (0.0, 0.0, 0.0));
    }

    #[test]
    fn holistic_loss_of_unit_residual_is_one() {
        let (_, cube, dims) = fixture();
        let target = patchify(&cube, 2, 2).unwrap();
        let mut recon = target.clone();
        for v in recon.tokens.as_mut_slice() {
            *v += 1.0;
        }
        let plan = sample_mask(MaskStrategy::SpatialSpectral, &dims, 0.5, 2).unwrap();
        let loss = holistic_loss(&recon, &target, &plan).unwrap();
        assert_eq!((loss.total, loss.masked, loss.unmasked), (1.0, 1.0, 1.0));
    }

    #[test]
    fn holistic_loss_concentrated_on_masked_pixels() {
        // 96 tokens, r = 0.75 -> 72 masked; residual 2 there, 0 elsewhere:
        // masked mean 4, unmasked 0, total 4 * 0.75 = 3
        let dims = GridDims::of(32, 32, 24, 8, 4).unwrap();
        assert_eq!(dims.n_tokens(), 96);
        let plan = sample_mask(MaskStrategy::SpatialSpectral, &dims, 0.75, 6).unwrap();
        assert_eq!(plan.n_masked(), 72);
        let cube: Cube<f64> = gen_synthetic(&SynthSpec::new(32, 32, 24, 3, 1)).unwrap();
        let target = patchify(&cube, 8, 4).unwrap();
        let mut recon = target.clone();
        for &t in &plan.masked {
            for v in recon.tokens.row_mut(t) {
                *v += 2.0;
            }
        }
        let loss = holistic_loss(&recon, &target, &plan).unwrap();
        assert!((loss.masked - 4.0).abs() < 1e-12);
        assert_eq!(loss.unmasked, 0.0);
        assert!((loss.total - 3.0).abs() < 1e-12);
    }

    #[test]
    fn loss_decomposition_identity_holds() {
        let (state, cube, dims) = fixture();
        let stats = compute_stats(std::slice::from_ref(&cube)).unwrap();
        for seed in 0..5 {
            let plan = sample_mask(MaskStrategy::SpatialSpectral, &dims, 0.6, seed).unwrap();
            let out = forward(&state, &cube, &plan, &stats).unwrap();
            let l = out.loss;
            let lhs = l.total * (l.masked_pixels + l.unmasked_pixels) as f64;
            let rhs = l.masked * l.masked_pixels as f64 + l.unmasked * l.unmasked_pixels as f64;
            assert!((lhs - rhs).abs() / rhs.abs().max(1e-12) < 1e-6);
        }
    }

    #[test]
    fn forward_total_matches_scalar_oracle() {
        let (state, cube, dims) = fixture();
        let stats = compute_stats(std::slice::from_ref(&cube)).unwrap();
        let plan = sample_mask(MaskStrategy::SpatialSpectral, &dims, 0.5, 9).unwrap();
        let out = forward(&state, &cube, &plan, &stats).unwrap();

        let normed = normalize(&cube, &stats).unwrap();
        let mut sum = 0.0f64;
        for (r, y) in out.recon.iter().zip(&normed.data) {
            sum += (r - y) * (r - y);
        }
        let oracle = sum / normed.data.len() as f64;
        assert!((out.loss.total - oracle).abs() < 1e-12, "{} vs {oracle}", out.loss.total);
    }

    #[test]
    fn empty_mask_forward_has_no_masked_term() {
        let (state, cube, dims) = fixture();
        let stats = compute_stats(std::slice::from_ref(&cube)).unwrap();
        let plan = sample_mask(MaskStrategy::SpatialSpectral, &dims, 0.0, 1).unwrap();
        let out = forward(&state, &cube, &plan, &stats).unwrap();
        assert_eq!(out.loss.masked_pixels, 0);
        assert_eq!(out.loss.masked, 0.0);
        assert_eq!(out.loss.total, out.loss.unmasked);
    }

    #[test]
    fn zero_block_model_still_runs() {
        let mut cfg = small_cfg();
        cfg.enc_blocks = 0;
        cfg.dec_blocks = 0;
        let state: ModelState<f64> = init_model(&cfg, 4).unwrap();
        let cube = gen_synthetic(&SynthSpec::new(4, 4, 4, 2, 7)).unwrap();
        let dims = GridDims::of(4, 4, 4, 2, 2).unwrap();
        let stats = compute_stats(std::slice::from_ref(&cube)).unwrap();
        let plan = sample_mask(MaskStrategy::SpatialSpectral, &dims, 0.5, 3).unwrap();
        let out = forward(&state, &cube, &plan, &stats).unwrap();
        assert!(out.loss.total.is_finite());
    }

    #[test]
    fn f32_and_f64_models_agree_loosely() {
        let (state, cube, dims) = fixture();
        let state32: ModelState<f32> = state.convert();
        let cube32: Cube<f32> = cube.convert();
        let stats64 = compute_stats(std::slice::from_ref(&cube)).unwrap();
        let stats32 = compute_stats(std::slice::from_ref(&cube32)).unwrap();
        let plan = sample_mask(MaskStrategy::SpatialSpectral, &dims, 0.5, 3).unwrap();
        let out64 = forward(&state, &cube, &plan, &stats64).unwrap();
        let out32 = forward(&state32, &cube32, &plan, &stats32).unwrap();
        assert!((out64.loss.total - out32.loss.total).abs() < 1e-3);
    }
}
