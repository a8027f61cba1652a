//! Self-supervised reconstruction of hyperspectral cubes from partial
//! spectral observations.
//!
//! The pipeline: cubes are split into `(p, p, s)` band-group tokens, a
//! masking strategy hides a fraction of them, and an asymmetric
//! encoder/decoder transformer is trained to reconstruct every pixel
//! (masked and visible alike). Band matching maps a multispectral sensor
//! onto the hyperspectral wavelength grid so the same model can fill in
//! unseen bands from a handful of observed ones.
//!
//! All numeric code is generic over the scalar type via [`Scalar`]
//! (`f32` for speed, `f64` for gradient verification); concrete aliases
//! live at the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, NumCast, ToPrimitive};

pub mod alignment;
pub mod checkpoint;
pub mod datacube;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod patching;
pub mod rng;
pub mod training;

pub use error::{Error, Result};

/// Floating-point scalar the whole pipeline is generic over.
///
/// Implemented for `f32` and `f64`. The byte-level hooks pin the
/// little-endian on-disk encoding used by checkpoints.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Payload dtype tag written to binary manifests.
    const DTYPE: &'static str;
    /// Size of one scalar in the on-disk encoding.
    const BYTE_WIDTH: usize;

    fn cast<U: NumCast>(x: U) -> Self {
        NumCast::from(x).unwrap()
    }

    fn to_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap()
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32le";
    const BYTE_WIDTH: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64le";
    const BYTE_WIDTH: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Single-precision cube, the default for training and I/O.
pub type Cube32 = datacube::Cube<f32>;
/// Double-precision cube, used by gradient verification.
pub type Cube64 = datacube::Cube<f64>;
pub type BandStats32 = datacube::BandStats<f32>;
pub type BandStats64 = datacube::BandStats<f64>;
pub type ModelState32 = model::ModelState<f32>;
pub type ModelState64 = model::ModelState<f64>;
