//! Morphable face reflectance.
//!
//! A Blinn-Phong mixture BRDF with pre-chosen exponents, its spherical
//! harmonics shading under environment lighting, per-texel inverse rendering
//! from OLAT captures, and linear statistical models of reflectance and
//! lighting that can be fit to and finetuned on images.

pub mod adam;
pub mod brdf;
pub mod cli;
pub mod error;
pub mod fit;
pub mod lighting;
pub mod linalg;
pub mod maps;
pub mod manifest;
pub mod model;
pub mod nnls;
pub mod olat;
pub mod pca;
pub mod raster;
pub mod sh;

pub use brdf::{BrdfConfig, Direction, ReflectanceTexel, Rgb};
pub use error::{Error, Result};
pub use maps::ReflectanceMaps;
pub use raster::{Image, Mask};
pub use sh::{EnvMap, ShVector, ZonalTable};
