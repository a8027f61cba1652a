//! Figure-style artifacts for reconstruct: a false-color rendering of
//! the cube and per-pixel spectra tables.

use std::fmt::Write as _;
use std::path::Path;

use hsmae_core::datacube::Cube;
use hsmae_core::patching::MaskPlan;
use hsmae_core::Scalar;
use image::{Rgb, RgbImage};

use crate::{runtime, CliResult};

/// Red, green, blue false-color targets in nanometres.
const FALSE_COLOR_NM: [f64; 3] = [650.0, 550.0, 450.0];

/// Renders the bands nearest to 650/550/450 nm as an 8-bit RGB PNG,
/// each channel min-max stretched over its own band.
pub fn false_color<T: Scalar>(cube: &Cube<T>, path: &Path) -> CliResult<()> {
    let picks = FALSE_COLOR_NM.map(|nm| cube.band_table.nearest_band(nm));
    let ranges = picks.map(|band| band_range(cube, band));
    let mut img = RgbImage::new(cube.w as u32, cube.h as u32);
    for i in 0..cube.h {
        for j in 0..cube.w {
            let mut rgb = [0u8; 3];
            for (k, &band) in picks.iter().enumerate() {
                let (lo, hi) = ranges[k];
                if hi > lo {
                    let t = (cube.at(i, j, band).to_f64() - lo) / (hi - lo);
                    rgb[k] = (t * 255.0).round().clamp(0.0, 255.0) as u8;
                }
            }
            img.put_pixel(j as u32, i as u32, Rgb(rgb));
        }
    }
    img.save(path)
        .map_err(|e| runtime(format!("writing {}: {e}", path.display())))
}

fn band_range<T: Scalar>(cube: &Cube<T>, band: usize) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..cube.h {
        for j in 0..cube.w {
            let v = cube.at(i, j, band).to_f64();
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    (lo, hi)
}

/// One row per band per requested pixel. The masked flag says whether
/// the band's group was hidden from the encoder at that pixel's token;
/// the `true` column appears only when a ground-truth cube was given.
pub fn spectra_csv<T: Scalar>(
    recon: &Cube<T>,
    truth: Option<&Cube<T>>,
    plan: &MaskPlan,
    pixels: &[(usize, usize)],
) -> String {
    let dims = &plan.dims;
    let mut out = String::from(match truth {
        Some(_) => "row,col,wavelength_nm,true,reconstructed,masked\n",
        None => "row,col,wavelength_nm,reconstructed,masked\n",
    });
    for &(i, j) in pixels {
        for band in 0..recon.c {
            let token = dims.token_index(i / dims.p, j / dims.p, band / dims.s);
            let masked = plan.is_masked(token) as u8;
            let nm = recon.band_table.bands[band].center_nm;
            let r = recon.at(i, j, band).to_f64();
            match truth {
                Some(t) => {
                    let tv = t.at(i, j, band).to_f64();
                    writeln!(out, "{i},{j},{nm},{tv},{r},{masked}").unwrap();
                }
                None => writeln!(out, "{i},{j},{nm},{r},{masked}").unwrap(),
            }
        }
    }
    out
}
