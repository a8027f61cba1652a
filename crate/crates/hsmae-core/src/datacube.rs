//! Hyperspectral cube representation, HSC binary I/O, per-band
//! normalization statistics, and a synthetic scene generator so the whole
//! pipeline is testable without satellite downloads.
//!
//! HSC format: one UTF-8 JSON header line terminated by `\n`, then
//! `H*W*C` little-endian f32 values in row-major `(H, W, C)` order. The
//! header carries the shape, the dtype tag, and the band table.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::Scalar;

pub const HSC_MAGIC: &str = "HSC1";

/// One spectral band: wavelength interval `center_nm +/- width_nm / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandInfo {
    pub index: usize,
    pub center_nm: f64,
    pub width_nm: f64,
}

impl BandInfo {
    pub fn lo_nm(&self) -> f64 {
        self.center_nm - self.width_nm / 2.0
    }

    pub fn hi_nm(&self) -> f64 {
        self.center_nm + self.width_nm / 2.0
    }

    fn validate(&self) -> Result<()> {
        if !(self.center_nm > 0.0 && self.width_nm > 0.0) {
            return Err(Error::Invalid(format!(
                "band {}: center and width must be positive",
                self.index
            )));
        }
        if self.lo_nm() <= 0.0 {
            return Err(Error::Invalid(format!(
                "band {}: wavelength interval must stay positive",
                self.index
            )));
        }
        Ok(())
    }
}

/// Ordered wavelength axis of one sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandTable {
    pub sensor_name: String,
    pub bands: Vec<BandInfo>,
}

impl BandTable {
    pub fn new(sensor_name: impl Into<String>, bands: Vec<BandInfo>) -> Result<Self> {
        let table = BandTable {
            sensor_name: sensor_name.into(),
            bands,
        };
        table.validate()?;
        Ok(table)
    }

    /// Evenly spaced bands covering `[lo_nm, hi_nm]`, width = spacing.
    /// The wavelength axis used for synthetic scenes.
    pub fn synthetic(sensor_name: impl Into<String>, c: usize, lo_nm: f64, hi_nm: f64) -> Self {
        assert!(c >= 1 && hi_nm > lo_nm && lo_nm > 0.0);
        let step = (hi_nm - lo_nm) / c as f64;
        let bands = (0..c)
            .map(|k| BandInfo {
                index: k,
                center_nm: lo_nm + step * (k as f64 + 0.5),
                width_nm: step,
            })
            .collect();
        BandTable {
            sensor_name: sensor_name.into(),
            bands,
        }
    }

    pub fn len(&self) -> usize {
        self.bands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands.is_empty() {
            return Err(Error::Invalid("band table must be non-empty".into()));
        }
        for (k, band) in self.bands.iter().enumerate() {
            band.validate()?;
            if band.index != k {
                return Err(Error::Invalid(format!(
                    "band indices must be contiguous from 0 (found {} at position {k})",
                    band.index
                )));
            }
            if k > 0 && band.center_nm <= self.bands[k - 1].center_nm {
                return Err(Error::Invalid(format!(
                    "band centers must be strictly increasing (band {k})"
                )));
            }
        }
        Ok(())
    }

    /// Index of the band whose center is nearest to `nm`.
    pub fn nearest_band(&self, nm: f64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for b in &self.bands {
            let d = (b.center_nm - nm).abs();
            if d < best_d {
                best_d = d;
                best = b.index;
            }
        }
        best
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: BandTable =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        table.validate()?;
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("band table serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// H x W x C reflectance cube with per-band wavelength metadata.
/// Values are stored row-major: index `(i*W + j)*C + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cube<T> {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<T>,
    pub band_table: BandTable,
}

impl<T: Scalar> Cube<T> {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<T>, band_table: BandTable) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Invalid("cube dimensions must be >= 1".into()));
        }
        if data.len() != h * w * c {
            return Err(Error::Mismatch(format!(
                "cube payload has {} values, expected {}",
                data.len(),
                h * w * c
            )));
        }
        if band_table.len() != c {
            return Err(Error::Mismatch(format!(
                "band table mismatch: {} entries for C={c}",
                band_table.len()
            )));
        }
        band_table.validate()?;
        Ok(Cube {
            h,
            w,
            c,
            data,
            band_table,
        })
    }

    pub fn zeros(h: usize, w: usize, c: usize, band_table: BandTable) -> Result<Self> {
        Cube::new(h, w, c, vec![T::zero(); h * w * c], band_table)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, band: usize) -> T {
        self.data[(i * self.w + j) * self.c + band]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize, band: usize) -> &mut T {
        &mut self.data[(i * self.w + j) * self.c + band]
    }

    /// The spectrum at one pixel, length C.
    #[inline]
    pub fn pixel(&self, i: usize, j: usize) -> &[T] {
        let base = (i * self.w + j) * self.c;
        &self.data[base..base + self.c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts the payload scalar type (f32 -> f64 is exact).
    pub fn convert<U: Scalar>(&self) -> Cube<U> {
        Cube {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| U::cast(v.to_f64())).collect(),
            band_table: self.band_table.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct HscHeader {
    magic: String,
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "W")]
    w: usize,
    #[serde(rename = "C")]
    c: usize,
    dtype: String,
    sensor_name: String,
    bands: Vec<BandInfo>,
}

/// Writes `cube` in HSC format. Values are stored as f32 little-endian;
/// byte output is deterministic for identical input.
pub fn save_cube<T: Scalar>(cube: &Cube<T>, path: &Path) -> Result<()> {
    let header = HscHeader {
        magic: HSC_MAGIC.into(),
        h: cube.h,
        w: cube.w,
        c: cube.c,
        dtype: "f32le".into(),
        sensor_name: cube.band_table.sensor_name.clone(),
        bands: cube.band_table.bands.clone(),
    };
    let mut bytes = serde_json::to_vec(&header).expect("header serializes");
    bytes.push(b'\n');
    bytes.reserve(cube.data.len() * 4);
    for &v in &cube.data {
        bytes.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads an HSC file, verifying magic, payload length, band table size,
/// and that every value is finite.
pub fn load_cube<T: Scalar>(path: &Path) -> Result<Cube<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing header line"))?;
    let header: HscHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if header.magic != HSC_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {:?}, expected {HSC_MAGIC:?}", header.magic),
        ));
    }
    if header.dtype != "f32le" {
        return Err(Error::format(
            path,
            format!("unsupported dtype {:?}", header.dtype),
        ));
    }
    let n = header.h * header.w * header.c;
    let payload = &bytes[newline + 1..];
    if payload.len() != n * 4 {
        return Err(Error::format(
            path,
            format!(
                "payload size mismatch: {} bytes, expected {}",
                payload.len(),
                n * 4
            ),
        ));
    }
    if header.bands.len() != header.c {
        return Err(Error::format(
            path,
            format!(
                "band table mismatch: {} entries for C={}",
                header.bands.len(),
                header.c
            ),
        ));
    }
    let mut data = Vec::with_capacity(n);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{}", path.display())));
        }
        data.push(T::cast(v));
    }
    let table = BandTable::new(header.sensor_name, header.bands)?;
    Cube::new(header.h, header.w, header.c, data, table)
}

/// Parameters for the synthetic scene generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub n_endmembers: usize,
    pub seed: u64,
    /// Amplitude of uniform per-pixel noise added after mixing; 0 keeps
    /// the scene an exact convex mixture.
    pub noise: f64,
}

impl SynthSpec {
    pub fn new(h: usize, w: usize, c: usize, n_endmembers: usize, seed: u64) -> Self {
        SynthSpec {
            h,
            w,
            c,
            n_endmembers,
            seed,
            noise: 0.0,
        }
    }
}

/// Generates a smooth synthetic reflectance cube: each endmember spectrum
/// is a sum of Gaussians over the wavelength axis, rescaled into (0, 1);
/// abundance maps are softmaxed sums of spatial Gaussian bumps, so every
/// pixel is a convex mixture. Deterministic in the seed.
pub fn gen_synthetic<T: Scalar>(spec: &SynthSpec) -> Result<Cube<T>> {
    if spec.n_endmembers < 1 {
        return Err(Error::Invalid("n_endmembers must be >= 1".into()));
    }
    if spec.h < 1 || spec.w < 1 || spec.c < 1 {
        return Err(Error::Invalid("cube dimensions must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&spec.noise) {
        return Err(Error::Invalid("noise amplitude must be in [0, 1]".into()));
    }
    let table = BandTable::synthetic("synthetic", spec.c, 420.0, 2450.0);
    let mut rng = Stream::seed(spec.seed);

    // Endmember spectra over the normalized wavelength axis.
    let axis: Vec<f64> = (0..spec.c)
        .map(|k| {
            if spec.c == 1 {
                0.5
            } else {
                k as f64 / (spec.c - 1) as f64
            }
        })
        .collect();
    let mut spectra: Vec<Vec<f64>> = Vec::with_capacity(spec.n_endmembers);
    for _ in 0..spec.n_endmembers {
        let n_bumps = 3 + rng.index(3);
        let bumps: Vec<(f64, f64, f64)> = (0..n_bumps)
            .map(|_| {
                (
                    rng.uniform_in(0.2, 1.0),
                    rng.uniform_in(0.0, 1.0),
                    rng.uniform_in(0.05, 0.3),
                )
            })
            .collect();
        let raw: Vec<f64> = axis
            .iter()
            .map(|&x| {
                bumps
                    .iter()
                    .map(|&(a, mu, sigma)| a * (-(x - mu).powi(2) / (2.0 * sigma * sigma)).exp())
                    .sum()
            })
            .collect();
        let lo_target = rng.uniform_in(0.02, 0.3);
        let hi_target = rng.uniform_in(0.5, 0.98);
        let (mn, mx) = raw
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        let range = mx - mn;
        let spectrum = raw
            .iter()
            .map(|&v| {
                if range < 1e-12 {
                    (lo_target + hi_target) / 2.0
                } else {
                    lo_target + (hi_target - lo_target) * (v - mn) / range
                }
            })
            .collect();
        spectra.push(spectrum);
    }

    // Smooth abundance fields, one per endmember, softmaxed per pixel.
    struct SpatialBump {
        ci: f64,
        cj: f64,
        rho: f64,
        amp: f64,
    }
    let fields: Vec<Vec<SpatialBump>> = (0..spec.n_endmembers)
        .map(|_| {
            (0..3)
                .map(|_| SpatialBump {
                    ci: rng.uniform_in(0.0, spec.h as f64),
                    cj: rng.uniform_in(0.0, spec.w as f64),
                    rho: rng.uniform_in(spec.h.max(spec.w) as f64 / 8.0 + 1.0, spec.h.max(spec.w) as f64 / 2.0 + 2.0),
                    amp: rng.uniform_in(0.5, 2.0),
                })
                .collect()
        })
        .collect();

    let mut data = vec![T::zero(); spec.h * spec.w * spec.c];
    let mut weights = vec![0.0f64; spec.n_endmembers];
    for i in 0..spec.h {
        for j in 0..spec.w {
            let mut max_g = f64::NEG_INFINITY;
            for (e, bumps) in fields.iter().enumerate() {
                let g: f64 = bumps
                    .iter()
                    .map(|b| {
                        let d2 = (i as f64 - b.ci).powi(2) + (j as f64 - b.cj).powi(2);
                        b.amp * (-d2 / (2.0 * b.rho * b.rho)).exp()
                    })
                    .sum();
                weights[e] = g;
                max_g = max_g.max(g);
            }
            let mut z = 0.0;
            for w in weights.iter_mut() {
                *w = (*w - max_g).exp();
                z += *w;
            }
            for w in weights.iter_mut() {
                *w /= z;
            }
            let base = (i * spec.w + j) * spec.c;
            for band in 0..spec.c {
                let mut v: f64 = weights
                    .iter()
                    .zip(&spectra)
                    .map(|(&w, s)| w * s[band])
                    .sum();
                if spec.noise > 0.0 {
                    v += spec.noise * (2.0 * rng.uniform() - 1.0);
                    v = v.clamp(0.0, 1.0);
                }
                data[base + band] = T::cast(v);
            }
        }
    }
    Cube::new(spec.h, spec.w, spec.c, data, table)
}

/// Per-band normalization statistics (population convention).
#[derive(Debug, Clone, PartialEq)]
pub struct BandStats<T> {
    pub mean: Vec<T>,
    pub stddev: Vec<T>,
}

/// Floor applied to per-band stddev so constant bands stay divisible.
pub const STDDEV_FLOOR: f64 = 1e-6;

impl<T: Scalar> BandStats<T> {
    pub fn c(&self) -> usize {
        self.mean.len()
    }

    pub fn convert<U: Scalar>(&self) -> BandStats<U> {
        BandStats {
            mean: self.mean.iter().map(|&v| U::cast(v.to_f64())).collect(),
            stddev: self.stddev.iter().map(|&v| U::cast(v.to_f64())).collect(),
        }
    }
}

/// Mean and population stddev per band over all pixels of all cubes,
/// with the stddev floored at [`STDDEV_FLOOR`]. Accumulates in f64.
pub fn compute_stats<T: Scalar>(cubes: &[Cube<T>]) -> Result<BandStats<T>> {
    let first = cubes
        .first()
        .ok_or_else(|| Error::Invalid("compute_stats needs at least one cube".into()))?;
    let c = first.c;
    for cube in cubes {
        if cube.c != c {
            return Err(Error::Mismatch(format!(
                "cubes disagree on band count: {} vs {c}",
                cube.c
            )));
        }
    }
    let mut sum = vec![0.0f64; c];
    let mut sum_sq = vec![0.0f64; c];
    let mut count = 0usize;
    for cube in cubes {
        count += cube.h * cube.w;
        for px in 0..cube.h * cube.w {
            let base = px * c;
            for band in 0..c {
                let v = cube.data[base + band].to_f64();
                sum[band] += v;
                sum_sq[band] += v * v;
            }
        }
    }
    let n = count as f64;
    let mut mean = Vec::with_capacity(c);
    let mut stddev = Vec::with_capacity(c);
    for band in 0..c {
        let m = sum[band] / n;
        let var = (sum_sq[band] / n - m * m).max(0.0);
        mean.push(T::cast(m));
        stddev.push(T::cast(var.sqrt().max(STDDEV_FLOOR)));
    }
    Ok(BandStats { mean, stddev })
}

/// Per-band standardization `(x - mean) / stddev`.
pub fn normalize<T: Scalar>(cube: &Cube<T>, stats: &BandStats<T>) -> Result<Cube<T>> {
    map_bands(cube, stats, |v, m, s| (v - m) / s)
}

///// Inverse of [`normalize`]: `x * stddev + mean`.
pub fn denormalize<T: Scalar>(cube: &Cube<T>, stats: &BandStats<T>) -> Result<Cube<T>> {
    map_bands(cube, stats, |v, m, s| v * s + m)
}

fn map_bands<T: Scalar>(
    cube: &Cube<T>,
    stats: &BandStats<T>,
    f: impl Fn(T, T, T) -> T,
) -> Result<Cube<T>> {
    if stats.c() != cube.c {
        return Err(Error::Mismatch(format!(
            "stats cover {} bands, cube has {}",
            stats.c(),
            cube.c
        )));
    }
    let mut out = cube.clone();
    for px in 0..cube.h * cube.w {
        let base = px * cube.c;
        for band in 0..cube.c {
            out.data[base + band] = f(
                cube.data[base + band],
                stats.mean[band],
                stats.stddev[band],
            );
        }
    }
    Ok(out)
}

/// Cube-shape presets: `(H, W, C)`.
pub mod presets {
    /// Full-scale shape: 128 x 128 patches with 240 usable bands.
    pub const EMIT: (usize, usize, usize) = (128, 128, 240);
    /// Desk-scale shape for tests and CI.
    pub const DESK: (usize, usize, usize) = (32, 32, 24);
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_cube(seed: u64) -> Cube<f32> {
        gen_synthetic(&SynthSpec::new(6, 5, 8, 3, seed)).unwrap()
    }

    #[test]
    fn hsc_roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cube.hsc");
        let cube = small_cube(7);
        save_cube(&cube, &path).unwrap();
        let loaded: Cube<f32> = load_cube(&path).unwrap();
        assert_eq!(cube.h, loaded.h);
        assert_eq!(cube.band_table, loaded.band_table);
        for (a, b) in cube.data.iter().zip(&loaded.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn save_is_deterministic() {
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.hsc");
        let p2 = dir.path().join("b.hsc");
        let cube = small_cube(3);
        save_cube(&cube, &p1).unwrap();
        save_cube(&cube, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("short.hsc");
        let cube = small_cube(1);
        save_cube(&cube, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4); // one float short
        fs::write(&path, bytes).unwrap();
        let err = load_cube::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("payload size mismatch"), "{err}");
    }

    #[test]
    fn band_count_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.hsc");
        let cube = small_cube(1);
        save_cube(&cube, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let newline = bytes.iter().position(|&b| b == b'\n').unwrap();
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[..newline]).unwrap();
        header["bands"].as_array_mut().unwrap().pop();
        let mut out = serde_json::to_vec(&header).unwrap();
        out.push(b'\n');
        out.extend_from_slice(&bytes[newline + 1..]);
        fs::write(&path, out).unwrap();
        let err = load_cube::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("band table mismatch"), "{err}");
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("nan.hsc");
        let cube = small_cube(1);
        save_cube(&cube, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let newline = bytes.iter().position(|&b| b == b'\n').unwrap();
        let payload_start = newline + 1;
        bytes[payload_start..payload_start + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_cube::<f32>(&path).unwrap_err(),
            Error::NonFinite(_)
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_cube::<f32>(Path::new("/nonexistent/cube.hsc")).unwrap_err(),
            Error::Io { .. }
        ));
    }

    #[test]
    fn synthetic_is_deterministic_and_bounded() {
        let a: Cube<f32> = gen_synthetic(&SynthSpec::new(8, 8, 12, 4, 7)).unwrap();
        let b: Cube<f32> = gen_synthetic(&SynthSpec::new(8, 8, 12, 4, 7)).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let c: Cube<f32> = gen_synthetic(&SynthSpec::new(8, 8, 12, 4, 8)).unwrap();
        assert_ne!(a.data, c.data);
        for &v in &a.data {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn single_endmember_no_noise_has_zero_spatial_variance() {
        let cube: Cube<f64> = gen_synthetic(&SynthSpec::new(5, 4, 6, 1, 9)).unwrap();
        let first = cube.pixel(0, 0).to_vec();
        for i in 0..cube.h {
            for j in 0..cube.w {
                assert_eq!(cube.pixel(i, j), &first[..]);
            }
        }
    }

    #[test]
    fn stats_floor_and_population_convention() {
        let table = BandTable::synthetic("t", 3, 400.0, 700.0);
        let constant = Cube::new(2, 2, 3, vec![0.5f64; 12], table.clone()).unwrap();
        let stats = compute_stats(&[constant]).unwrap();
        for band in 0..3 {
            assert!((stats.mean[band] - 0.5).abs() < 1e-12);
            assert_eq!(stats.stddev[band], STDDEV_FLOOR);
        }

        // band values {0, 1} equally: mean 0.5, population stddev 0.5
        let mut data = vec![0.0f64; 12];
        for px in 0..2 {
            for band in 0..3 {
                data[(px * 2) * 3 + band] = 0.0;
                data[(px * 2 + 1) * 3 + band] = 1.0;
            }
        }
        let cube = Cube::new(2, 2, 3, data, table).unwrap();
        let stats = compute_stats(&[cube]).unwrap();
        for band in 0..3 {
            assert!((stats.mean[band] - 0.5).abs() < 1e-12);
            assert!((stats.stddev[band] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn compute_stats_rejects_empty_and_mismatched() {
        assert!(compute_stats::<f32>(&[]).is_err());
        let a = small_cube(1);
        let b: Cube<f32> = gen_synthetic(&SynthSpec::new(4, 4, 5, 2, 2)).unwrap();
        assert!(compute_stats(&[a, b]).is_err());
    }

    #[test]
    fn normalize_roundtrip_and_centering() {
        let cube = small_cube(11).convert::<f64>();
        let stats = compute_stats(&[cube.clone()]).unwrap();
        let normed = normalize(&cube, &stats).unwrap();
        let back = denormalize(&normed, &stats).unwrap();
        for (a, b) in cube.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-5);
        }
        // re-computed per-band mean of the normalized cube is ~0
        let re = compute_stats(&[normed]).unwrap();
        for band in 0..cube.c {
            assert!(re.mean[band].abs() < 1e-5, "band {band}: {}", re.mean[band]);
        }
    }

    #[test]
    fn constant_cube_at_mean_normalizes_to_zero() {
        let table = BandTable::synthetic("t", 2, 400.0, 700.0);
        let cube = Cube::new(2, 2, 2, vec![0.25f32; 8], table).unwrap();
        let stats = BandStats {
            mean: vec![0.25f32; 2],
            stddev: vec![1.0f32; 2],
        };
        let normed = normalize(&cube, &stats).unwrap();
        assert!(normed.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_rejects_band_count_mismatch() {
        let cube = small_cube(1);
        let stats = BandStats {
            mean: vec![0.0f32; 3],
            stddev: vec![1.0f32; 3],
        };
        assert!(normalize(&cube, &stats).is_err());
    }
}
