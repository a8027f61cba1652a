//! Reconstruction quality metrics: the masked/unmasked/total MSE split
//! and global SSIM.
//!
//! MSE is reported three ways — over masked pixels only, over unmasked
//! pixels only, and over everything — because a masked autoencoder can
//! trivially ace the unmasked set while failing where it matters. SSIM is
//! the single global formula per band (no sliding window), averaged over
//! bands; evaluation reports both normalized and reflectance space.

use serde::{Deserialize, Serialize};

use crate::datacube::{normalize, BandStats, Cube};
use crate::error::{Error, Result};
use crate::patching::MaskPlan;
use crate::Scalar;

/// The three-way MSE split for one cube pair under a mask plan. Means are
/// 0 when the corresponding pixel set is empty. All accumulation is f64.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub total_mse: f64,
    pub masked_mse: f64,
    pub unmasked_mse: f64,
    pub masked_pixels: usize,
    pub unmasked_pixels: usize,
}

/// Computes the MSE split between reconstructed and target values (both
/// `H*W*C` row-major buffers on the plan's grid). A pixel value counts as
/// masked when its token is masked.
pub fn mse_report<T: Scalar>(
    recon: &[T],
    target: &[T],
    plan: &MaskPlan,
) -> Result<MseReport> {
    let d = &plan.dims;
    let (h, w, c) = (d.h(), d.w(), d.c());
    if recon.len() != h * w * c || target.len() != recon.len() {
        return Err(Error::Mismatch(format!(
            "mse_report over a {h}x{w}x{c} grid, got {} and {} values",
            recon.len(),
            target.len()
        )));
    }
    let flags = plan.mask_flags();
    let mut sums = [0.0f64; 2]; // [unmasked, masked]
    let mut counts = [0usize; 2];
    let mut idx = 0;
    for i in 0..h {
        for j in 0..w {
            for band in 0..c {
                let t = d.token_index(i / d.p, j / d.p, band / d.s);
                let r = (recon[idx].to_f64() - target[idx].to_f64()).powi(2);
                let k = flags[t] as usize;
                sums[k] += r;
                counts[k] += 1;
                idx += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(MseReport {
        total_mse: mean(sums[0] + sums[1], counts[0] + counts[1]),
        masked_mse: mean(sums[1], counts[1]),
        unmasked_mse: mean(sums[0], counts[0]),
        masked_pixels: counts[1],
        unmasked_pixels: counts[0],
    })
}

/// Global SSIM between two equally sized images, using population
/// statistics over all values and stabilizers `C1 = (0.01 L)^2`,
/// `C2 = (0.03 L)^2` for dynamic range `L`.
pub fn ssim<T: Scalar>(x: &[T], y: &[T], l: f64) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Mismatch(format!(
            "ssim over {} vs {} values",
            x.len(),
            y.len()
        )));
    }
    if !(l > 0.0) {
        return Err(Error::Invalid(format!("dynamic range must be > 0, got {l}")));
    }
    let n = x.len() as f64;
    let (mut sx, mut sy) = (0.0f64, 0.0f64);
    for (&a, &b) in x.iter().zip(y) {
        sx += a.to_f64();
        sy += b.to_f64();
    }
    let (mx, my) = (sx / n, sy / n);
    let (mut vx, mut vy, mut cov) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a.to_f64() - mx, b.to_f64() - my);
        vx += da * da;
        vy += db * db;
        cov += da * db;
    }
    vx /= n;
    vy /= n;
    cov /= n;
    let c1 = (0.01 * l).powi(2);
    let c2 = (0.03 * l).powi(2);
    Ok(((2.0 * mx * my + c1) * (2.0 * cov + c2))
        / ((mx * mx + my * my + c1) * (vx + vy + c2)))
}

/// Mean of per-band global SSIM over an `h*w*c` cube pair.
pub fn cube_ssim<T: Scalar>(x: &[T], y: &[T], h: usize, w: usize, c: usize, l: f64) -> Result<f64> {
    if x.len() != h * w * c || y.len() != x.len() {
        return Err(Error::Mismatch(format!(
            "cube ssim over {h}x{w}x{c}, got {} and {} values",
            x.len(),
            y.len()
        )));
    }
    let mut xb = vec![T::zero(); h * w];
    let mut yb = vec![T::zero(); h * w];
    let mut acc = 0.0f64;
    for band in 0..c {
        for px in 0..h * w {
            xb[px] = x[px * c + band];
            yb[px] = y[px * c + band];
        }
        acc += ssim(&xb, &yb, l)?;
    }
    Ok(acc / c as f64)
}

/// One evaluation case: an input cube the model reconstructs from, the
/// ground-truth target, and the mask plan in force.
#[derive(Debug, Clone)]
pub struct EvalSample<T> {
    pub sample_id: String,
    pub input: Cube<T>,
    pub target: Cube<T>,
    pub plan: MaskPlan,
}

/// MSE split plus SSIM in one evaluation space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total_mse: f64,
    pub masked_mse: f64,
    pub unmasked_mse: f64,
    pub ssim: f64,
    pub masked_pixels: usize,
    pub unmasked_pixels: usize,
}

/// Dataset-level evaluation: per-sample rows (reflectance space, the CSV
/// payload) and dataset-mean reports in both spaces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOutcome {
    /// Means over samples, reflectance space (dynamic range as given).
    pub reflectance: EvalReport,
    /// Means over samples, normalized space (training-comparable).
    pub normalized: EvalReport,
    pub rows: Vec<SampleRow>,
}

/// One CSV row, reflectance space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub sample_id: String,
    pub total_mse: f64,
    pub masked_mse: f64,
    pub unmasked_mse: f64,
    pub ssim: f64,
}

/// CSV header for [`EvalOutcome::to_csv`].
pub const EVAL_CSV_HEADER: &str = "sample_id,total_mse,masked_mse,unmasked_mse,ssim";

impl EvalOutcome {
    /// Per-sample CSV in dataset order: reflectance-space metrics.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(EVAL_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.sample_id, r.total_mse, r.masked_mse, r.unmasked_mse, r.ssim
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("eval outcome serializes")
    }
}

/// Evaluates `reconstruct` over a dataset. The closure receives each
/// sample and returns the reconstruction in reflectance space; metrics
/// are computed there and, via `stats`, in normalized space. Sample order
/// is preserved; dataset reports are unweighted means over samples.
pub fn evaluate<T: Scalar, F>(
    mut reconstruct: F,
    samples: &[EvalSample<T>],
    stats: &BandStats<T>,
    l: f64,
) -> Result<EvalOutcome>
where
    F: FnMut(&EvalSample<T>) -> Result<Cube<T>>,
{
    if samples.is_empty() {
        return Err(Error::Invalid("evaluation needs at least one sample".into()));
    }
    let mut rows = Vec::with_capacity(samples.len());
    let mut space_sums = [[0.0f64; 4]; 2]; // [reflectance, normalized] x [total, masked, unmasked, ssim]
    let mut masked_px = 0usize;
    let mut unmasked_px = 0usize;
    for sample in samples {
        let recon = reconstruct(sample)?;
        let target = &sample.target;
        if recon.h != target.h || recon.w != target.w || recon.c != target.c {
            return Err(Error::Mismatch(format!(
                "reconstruction of sample {} is {}x{}x{}, target is {}x{}x{}",
                sample.sample_id, recon.h, recon.w, recon.c, target.h, target.w, target.c
            )));
        }
        let refl_mse = mse_report(&recon.data, &target.data, &sample.plan)?;
        let refl_ssim = cube_ssim(&recon.data, &target.data, recon.h, recon.w, recon.c, l)?;

        let recon_n = normalize(&recon, stats)?;
        let target_n = normalize(target, stats)?;
        let norm_mse = mse_report(&recon_n.data, &target_n.data, &sample.plan)?;
        let norm_ssim =
            cube_ssim(&recon_n.data, &target_n.data, recon.h, recon.w, recon.c, l)?;

        for (k, (m, s)) in [(refl_mse, refl_ssim), (norm_mse, norm_ssim)]
            .into_iter()
            .enumerate()
        {
            space_sums[k][0] += m.total_mse;
            space_sums[k][1] += m.masked_mse;
            space_sums[k][2] += m.unmasked_mse;
            space_sums[k][3] += s;
        }
        masked_px += refl_mse.masked_pixels;
        unmasked_px += refl_mse.unmasked_pixels;
        rows.push(SampleRow {
            sample_id: sample.sample_id.clone(),
            total_mse: refl_mse.total_mse,
            masked_mse: refl_mse.masked_mse,
            unmasked_mse: refl_mse.unmasked_mse,
            ssim: refl_ssim,
        });
    }
    let n = samples.len() as f64;
    let report = |sums: [f64; 4]| EvalReport {
        total_mse: sums[0] / n,
        masked_mse: sums[1] / n,
        unmasked_mse: sums[2] / n,
        ssim: sums[3] / n,
        masked_pixels: masked_px,
        unmasked_pixels: unmasked_px,
    };
    Ok(EvalOutcome {
        reflectance: report(space_sums[0]),
        normalized: report(space_sums[1]),
        rows,
    })
}
