//! PCA model of environment lighting in normalized SH coefficient space.
//!
//! Each panorama is projected to SH, each color channel is divided by its
//! own band-0 coefficient, and PCA runs over these normalized vectors after
//! azimuthal rotation augmentation. A lighting instance is decoded from
//! PCA coefficients `gamma` and a per-channel band-0 scale `z`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::brdf::{Direction, Rgb};
use crate::error::{Error, Result};
use crate::pca::{pca, ContainerReader, ContainerWriter};
use crate::raster::Image;
use crate::sh::{coeff_count, project_envmap, EnvMap, ShVector};

pub const LIGHT_MAGIC: &[u8; 4] = b"MFLM";
pub const LIGHT_VERSION: u32 = 1;
/// Band-0 coefficients at or below this are treated as a dark environment.
pub const DARK_EPSILON: f64 = 1e-6;
pub const DEFAULT_ROTATIONS: usize = 8;
pub const MAX_DEFAULT_COMPONENTS: usize = 80;

/// Cyclic column shift by `k`, an azimuthal rotation by `2 pi k / W`.
pub fn rotate_equirect(env: &EnvMap, k: usize) -> Result<EnvMap> {
    let (w, h) = (env.width(), env.height());
    if k >= w {
        return Err(Error::Config(format!("column shift {k} outside 0..{w}")));
    }
    let src = env.pixels();
    let img = Image::from_fn(w, h, 3, |x, y, c| src.get((x + w - k) % w, y, c));
    EnvMap::new(img)
}

/// Divides each channel by its own band-0 coefficient.
pub fn normalize_sh(sh: &ShVector) -> Result<ShVector> {
    let mut out = sh.clone();
    for ch in 0..ShVector::CHANNELS {
        let c0 = sh.channel(ch)[0];
        if !(c0 > DARK_EPSILON) {
            return Err(Error::DarkEnvironment { channel: ch, value: c0 });
        }
        out.channel_mut(ch).iter_mut().for_each(|c| *c /= c0);
    }
    Ok(out)
}

/// Band-0 coefficient of every channel.
pub fn band0(sh: &ShVector) -> Rgb {
    [0, 1, 2].map(|ch| sh.channel(ch)[0])
}

#[derive(Clone, Debug, PartialEq)]
pub struct LightingPcaModel {
    order: usize,
    mean: Vec<f32>,
    /// `3 (L+1)^2 x N_L`, column-major, orthonormal columns.
    bases: Vec<f32>,
    sigmas: Vec<f32>,
}

impl LightingPcaModel {
    pub fn from_parts(order: usize, mean: Vec<f32>, bases: Vec<f32>, sigmas: Vec<f32>) -> Result<Self> {
        let dim = 3 * coeff_count(order);
        if mean.len() != dim || bases.len() != dim * sigmas.len() {
            return Err(Error::DimensionMismatch(format!(
                "lighting model of order {order} needs mean {dim} and bases {}, got {} and {}",
                dim * sigmas.len(),
                mean.len(),
                bases.len()
            )));
        }
        Ok(LightingPcaModel {
            order,
            mean,
            bases,
            sigmas,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn component_count(&self) -> usize {
        self.sigmas.len()
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn bases(&self) -> &[f32] {
        &self.bases
    }

    pub fn sigmas(&self) -> &[f32] {
        &self.sigmas
    }

    pub fn sigmas_f64(&self) -> Vec<f64> {
        self.sigmas.iter().map(|&s| s as f64).collect()
    }

    /// `mean + bases * gamma` before the band-0 scale is applied.
    pub fn normalized(&self, gamma: &[f64]) -> Result<ShVector> {
        if gamma.len() != self.component_count() {
            return Err(Error::LengthMismatch {
                expected: self.component_count(),
                got: gamma.len(),
            });
        }
        let d = self.dim();
        let mut v: Vec<f64> = self.mean.iter().map(|&m| m as f64).collect();
        for (j, g) in gamma.iter().enumerate() {
            for (o, b) in v.iter_mut().zip(&self.bases[j * d..(j + 1) * d]) {
                *o += g * *b as f64;
            }
        }
        ShVector::from_coeffs(self.order, v)
    }

    pub fn decode(&self, gamma: &[f64], z: &Rgb) -> Result<ShVector> {
        if let Some(bad) = z.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain(format!("band-0 scale must be positive, got {bad}")));
        }
        let mut sh = self.normalized(gamma)?;
        for (ch, zc) in z.iter().enumerate() {
            sh.channel_mut(ch).iter_mut().for_each(|c| *c *= zc);
        }
        Ok(sh)
    }

    /// PCA coefficients of an already normalized SH vector.
    pub fn project(&self, normalized: &ShVector) -> Result<Vec<f64>> {
        if normalized.order() != self.order {
            return Err(Error::OrderMismatch {
                light: normalized.order(),
                table: self.order,
            });
        }
        let d = self.dim();
        let centered: Vec<f64> = normalized.coeffs().iter().zip(&self.mean).map(|(x, m)| x - *m as f64).collect();
        Ok((0..self.component_count())
            .map(|j| self.bases[j * d..(j + 1) * d].iter().zip(&centered).map(|(b, c)| *b as f64 * c).sum())
            .collect())
    }

    pub fn orthonormality_error(&self) -> f64 {
        let d = self.dim();
        let b = DMatrix::from_iterator(d, self.component_count(), self.bases.iter().map(|&x| x as f64));
        let n = self.component_count();
        (b.tr_mul(&b) - DMatrix::identity(n, n)).abs().max()
    }

    pub fn invariant_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let err = self.orthonormality_error();
        if self.component_count() > 0 && !(err <= 1e-6) {
            out.push(format!("bases deviate from orthonormal by {err:e}"));
        }
        let per = coeff_count(self.order);
        for ch in 0..3 {
            let m0 = self.mean[ch * per] as f64;
            if !((m0 - 1.0).abs() <= 1e-6) {
                out.push(format!("channel {ch} mean band-0 coefficient is {m0}, expected 1"));
            }
        }
        if self.sigmas.windows(2).any(|w| w[0] < w[1]) || self.sigmas.iter().any(|s| !(*s >= 0.0)) {
            out.push("sigmas are not nonnegative and nonincreasing".into());
        }
        out
    }

    fn writer(&self) -> ContainerWriter {
        let mut w = ContainerWriter::new(LIGHT_MAGIC, LIGHT_VERSION);
        w.u32(self.order as u32);
        w.u32(self.component_count() as u32);
        w.f32s(&self.mean);
        w.f32s(&self.bases);
        w.f32s(&self.sigmas);
        w
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.writer().finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ContainerReader::open(bytes, LIGHT_MAGIC, LIGHT_VERSION, "MFLM")?;
        let order = r.u32()? as usize;
        let n = r.u32()? as usize;
        if order > 64 {
            return Err(Error::Format(format!("MFLM: implausible SH order {order}")));
        }
        let d = 3 * coeff_count(order);
        let mean = r.f32s(d)?;
        let bases = r.f32s(d * n)?;
        let sigmas = r.f32s(n)?;
        r.finish()?;
        Self::from_parts(order, mean, bases, sigmas)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.writer().write(path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Evenly spaced column shifts for `rotations` copies of a `width` map.
pub fn rotation_shifts(width: usize, rotations: usize) -> Vec<usize> {
    (0..rotations).map(|i| i * width / rotations).collect()
}

/// Normalized SH vectors of every rotated copy of every environment, in
/// input order.
pub fn augmented_samples(envs: &[EnvMap], rotations: usize, order: usize) -> Result<Vec<ShVector>> {
    if rotations == 0 {
        return Err(Error::Config("at least one rotation is required".into()));
    }
    let jobs: Vec<(usize, usize)> = envs
        .iter()
        .enumerate()
        .flat_map(|(e, env)| rotation_shifts(env.width(), rotations).into_iter().map(move |k| (e, k)))
        .collect();
    jobs.par_iter()
        .map(|&(e, k)| normalize_sh(&project_envmap(&rotate_equirect(&envs[e], k)?, order)))
        .collect()
}

pub fn default_components(samples: usize) -> usize {
    MAX_DEFAULT_COMPONENTS.min(samples.saturating_sub(1))
}

pub fn build_lighting_pca(envs: &[EnvMap], rotations: usize, components: usize, order: usize) -> Result<LightingPcaModel> {
    let samples = augmented_samples(envs, rotations, order)?;
    build_from_samples(&samples, components, order)
}

pub fn build_from_samples(samples: &[ShVector], components: usize, order: usize) -> Result<LightingPcaModel> {
    if samples.len() < 2 {
        return Err(Error::Config(format!(
            "lighting PCA needs at least 2 augmented samples, got {}",
            samples.len()
        )));
    }
    let per = coeff_count(order);
    let d = 3 * per;
    // Band-0 entries are 1 in every sample and carry no variance, so the
    // PCA runs without those rows and they are put back as exact zeros.
    let kept: Vec<usize> = (0..d).filter(|r| r % per != 0).collect();
    let mut data = DMatrix::zeros(kept.len(), samples.len());
    for (j, s) in samples.iter().enumerate() {
        if s.order() != order {
            return Err(Error::OrderMismatch {
                light: s.order(),
                table: order,
            });
        }
        for (r, &src) in kept.iter().enumerate() {
            data[(r, j)] = s.coeffs()[src];
        }
    }
    let reduced = pca(data, components)?;
    let mut p = reduced.clone();
    p.mean = nalgebra::DVector::zeros(d);
    p.bases = DMatrix::zeros(d, components);
    for ch in 0..3 {
        p.mean[ch * per] = 1.0;
    }
    for (r, &dst) in kept.iter().enumerate() {
        p.mean[dst] = reduced.mean[r];
        p.bases.set_row(dst, &reduced.bases.row(r));
    }
    LightingPcaModel::from_parts(
        order,
        p.mean.iter().map(|&x| x as f32).collect(),
        p.bases.iter().map(|&x| x as f32).collect(),
        p.sigmas().iter().map(|&x| x as f32).collect(),
    )
}

/// Random panorama: a positive ambient term plus 3 to 10 colored
/// von Mises-Fisher lobes of varying sharpness.
pub fn synthetic_environment(height: usize, seed: u64) -> EnvMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ambient_level = rng.random_range(0.05..0.3);
    let tint: Rgb = [0.0; 3].map(|_: f64| rng.random_range(0.8..1.2));
    let ambient = tint.map(|t| t * ambient_level);
    let count = rng.random_range(3..=10);
    let lobes: Vec<(Direction, f64, Rgb)> = (0..count)
        .map(|_| {
            let z: f64 = rng.random_range(-1.0..1.0);
            let phi = rng.random_range(0.0..2.0 * PI);
            let dir = Direction::from_spherical(z.acos(), phi);
            let kappa = rng.random_range(2.0..60.0);
            let intensity = rng.random_range(0.2..3.0);
            let color: Rgb = [0.0; 3].map(|_: f64| intensity * rng.random_range(0.6..1.0));
            (dir, kappa, color)
        })
        .collect();
    EnvMap::from_fn(height, |d| {
        let mut rgb = ambient;
        for (mu, kappa, color) in &lobes {
            let s = (kappa * (mu.dot(d) - 1.0)).exp();
            for ch in 0..3 {
                rgb[ch] += color[ch] * s;
            }
        }
        rgb
    })
    .expect("synthetic radiance is finite and positive")
}

/// Shifts every environment by the same number of columns.
pub fn rotate_all(envs: &[EnvMap], k: usize) -> Result<Vec<EnvMap>> {
    envs.iter().map(|e| rotate_equirect(e, k)).collect()
}
