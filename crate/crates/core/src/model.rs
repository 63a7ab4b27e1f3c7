//! The morphable reflectance model: PCA on diffuse maps, with the same
//! combination of training samples carried over to the specular weights.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::brdf::BrdfConfig;
use crate::error::{Error, Result};
use crate::maps::ReflectanceMaps;
use crate::pca::{center_columns, pca, ContainerReader, ContainerWriter};
use crate::raster::Mask;

pub const MODEL_MAGIC: &[u8; 4] = b"MFRM";
pub const MODEL_VERSION: u32 = 1;
pub const MAX_DEFAULT_COMPONENTS: usize = 80;

/// Tolerance of the orthonormality check on diffuse bases.
pub const ORTHONORMALITY_TOLERANCE: f64 = 1e-6;

pub fn default_components(samples: usize) -> usize {
    MAX_DEFAULT_COMPONENTS.min(samples.saturating_sub(1))
}

/// Stored model. Values are f32 so that file round trips are exact; all
/// arithmetic is done in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct MorphableReflectanceModel {
    height: usize,
    width: usize,
    config: BrdfConfig,
    /// Diffuse block (texel-major RGB) followed by the weight block.
    mean: Vec<f32>,
    /// `3 V_t x N_R`, column-major.
    diffuse_bases: Vec<f32>,
    /// `k_bp V_t x N_R`, column-major.
    specular_bases: Vec<f32>,
    sigmas: Vec<f32>,
}

/// f64 working copy of the model's mean and bases, used by the finetuner.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub mean: DVector<f64>,
    pub diffuse: DMatrix<f64>,
    pub specular: DMatrix<f64>,
}

impl ModelParams {
    /// `||mean - other.mean||_1 + ||bases - other.bases||_1`.
    pub fn l1_distance(&self, other: &ModelParams) -> f64 {
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
        d(self.mean.as_slice(), other.mean.as_slice())
            + d(self.diffuse.as_slice(), other.diffuse.as_slice())
            + d(self.specular.as_slice(), other.specular.as_slice())
    }

    pub fn len(&self) -> usize {
        self.mean.len() + self.diffuse.len() + self.specular.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

impl MorphableReflectanceModel {
    /// Assembles a model from its parts, checking sizes.
    pub fn from_parts(
        height: usize,
        width: usize,
        config: BrdfConfig,
        mean: Vec<f32>,
        diffuse_bases: Vec<f32>,
        specular_bases: Vec<f32>,
        sigmas: Vec<f32>,
    ) -> Result<Self> {
        let v = height * width;
        let k = config.lobe_count();
        let r = sigmas.len();
        for (name, got, expected) in [
            ("mean", mean.len(), (3 + k) * v),
            ("diffuse bases", diffuse_bases.len(), 3 * v * r),
            ("specular bases", specular_bases.len(), k * v * r),
        ] {
            if got != expected {
                return Err(Error::DimensionMismatch(format!("{name}: {got} values, expected {expected}")));
            }
        }
        Ok(MorphableReflectanceModel {
            height,
            width,
            config,
            mean,
            diffuse_bases,
            specular_bases,
            sigmas,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn texel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn config(&self) -> &BrdfConfig {
        &self.config
    }

    pub fn lobe_count(&self) -> usize {
        self.config.lobe_count()
    }

    pub fn component_count(&self) -> usize {
        self.sigmas.len()
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn diffuse_bases(&self) -> &[f32] {
        &self.diffuse_bases
    }

    pub fn specular_bases(&self) -> &[f32] {
        &self.specular_bases
    }

    pub fn sigmas(&self) -> &[f32] {
        &self.sigmas
    }

    pub fn sigmas_f64(&self) -> Vec<f64> {
        to_f64(&self.sigmas)
    }

    pub fn params(&self) -> ModelParams {
        let v = self.texel_count();
        let r = self.component_count();
        ModelParams {
            mean: DVector::from_vec(to_f64(&self.mean)),
            diffuse: DMatrix::from_vec(3 * v, r, to_f64(&self.diffuse_bases)),
            specular: DMatrix::from_vec(self.lobe_count() * v, r, to_f64(&self.specular_bases)),
        }
    }

    /// Replaces mean and bases, keeping sigmas.
    pub fn with_params(&self, p: &ModelParams) -> Result<Self> {
        Self::from_parts(
            self.height,
            self.width,
            self.config.clone(),
            to_f32(p.mean.as_slice()),
            to_f32(p.diffuse.as_slice()),
            to_f32(p.specular.as_slice()),
            self.sigmas.clone(),
        )
    }

    fn check_coeffs(&self, beta: &[f64]) -> Result<()> {
        if beta.len() != self.component_count() {
            return Err(Error::LengthMismatch {
                expected: self.component_count(),
                got: beta.len(),
            });
        }
        Ok(())
    }

    /// `mean + [diffuse; specular] * beta` as a flat parameter vector.
    pub fn reconstruct_vector(&self, beta: &[f64]) -> Result<Vec<f64>> {
        self.check_coeffs(beta)?;
        let dv = 3 * self.texel_count();
        let sv = self.lobe_count() * self.texel_count();
        let mut out = to_f64(&self.mean);
        for (j, b) in beta.iter().enumerate() {
            if *b == 0.0 {
                continue;
            }
            let dcol = &self.diffuse_bases[j * dv..(j + 1) * dv];
            let scol = &self.specular_bases[j * sv..(j + 1) * sv];
            for (o, d) in out[..dv].iter_mut().zip(dcol) {
                *o += b * *d as f64;
            }
            for (o, s) in out[dv..].iter_mut().zip(scol) {
                *o += b * *s as f64;
            }
        }
        Ok(out)
    }

    pub fn reconstruct(&self, beta: &[f64]) -> Result<ReflectanceMaps> {
        let v = self.reconstruct_vector(beta)?;
        ReflectanceMaps::from_vector(
            self.config.clone(),
            self.width,
            self.height,
            &v,
            Mask::new(self.width, self.height, true),
        )
    }

    /// Least-squares coefficients from the diffuse block alone.
    pub fn project_coeffs(&self, maps: &ReflectanceMaps) -> Result<Vec<f64>> {
        if maps.width() != self.width || maps.height() != self.height || maps.config != self.config {
            return Err(Error::DimensionMismatch(format!(
                "maps {}x{} ({} lobes) vs model {}x{} ({} lobes)",
                maps.width(),
                maps.height(),
                maps.lobe_count(),
                self.width,
                self.height,
                self.lobe_count()
            )));
        }
        let d = maps.diffuse_vector();
        let dv = d.len();
        let centered: Vec<f64> = d.iter().zip(&self.mean[..dv]).map(|(x, m)| x - *m as f64).collect();
        Ok((0..self.component_count())
            .map(|j| {
                self.diffuse_bases[j * dv..(j + 1) * dv]
                    .iter()
                    .zip(&centered)
                    .map(|(b, c)| *b as f64 * c)
                    .sum()
            })
            .collect())
    }

    /// Draws `beta_j ~ N(0, (scale sigma_j)^2)` and reconstructs.
    pub fn sample_coeffs(&self, seed: u64, scale: f64) -> Result<Vec<f64>> {
        if !(scale > 0.0) {
            return Err(Error::Config(format!("sample scale must be positive, got {scale}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self
            .sigmas
            .iter()
            .map(|s| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale * *s as f64
            })
            .collect())
    }

    pub fn sample(&self, seed: u64, scale: f64) -> Result<ReflectanceMaps> {
        self.reconstruct(&self.sample_coeffs(seed, scale)?)
    }

    /// Largest deviation of the diffuse Gram matrix from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let p = self.params();
        let g = p.diffuse.tr_mul(&p.diffuse);
        (g - DMatrix::identity(self.component_count(), self.component_count()))
            .abs()
            .max()
    }

    /// Human-readable invariant violations; empty when the model is sound.
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let err = self.orthonormality_error();
        if self.component_count() > 0 && !(err <= ORTHONORMALITY_TOLERANCE) {
            out.push(format!("diffuse bases deviate from orthonormal by {err:e}"));
        }
        if self.sigmas.iter().any(|s| !(*s >= 0.0)) {
            out.push("negative or non-finite sigma".into());
        }
        if self.sigmas.windows(2).any(|w| w[0] < w[1]) {
            out.push("sigmas are not nonincreasing".into());
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            out.push("non-finite mean".into());
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.writer().finish()
    }

    fn writer(&self) -> ContainerWriter {
        let mut w = ContainerWriter::new(MODEL_MAGIC, MODEL_VERSION);
        for v in [self.height, self.width, self.lobe_count(), self.component_count()] {
            w.u32(v as u32);
        }
        w.f64s(self.config.exponents());
        w.f32s(&self.mean);
        w.f32s(&self.diffuse_bases);
        w.f32s(&self.specular_bases);
        w.f32s(&self.sigmas);
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ContainerReader::open(bytes, MODEL_MAGIC, MODEL_VERSION, "MFRM")?;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let k = r.u32()? as usize;
        let n_r = r.u32()? as usize;
        let config = BrdfConfig::new(r.f64s(k)?).map_err(|e| Error::Format(format!("MFRM: {e}")))?;
        let v = h.checked_mul(w).ok_or_else(|| Error::Format("MFRM: dimensions overflow".into()))?;
        let mean = r.f32s((3 + k) * v)?;
        let diffuse = r.f32s(3 * v * n_r)?;
        let specular = r.f32s(k * v * n_r)?;
        let sigmas = r.f32s(n_r)?;
        r.finish()?;
        Self::from_parts(h, w, config, mean, diffuse, specular, sigmas)
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

/// Builds the model from registered reflectance maps.
///
/// PCA runs on texels valid in every sample; the remaining texels carry the
/// sample mean and zero basis entries.
pub fn build_model(samples: &[ReflectanceMaps], components: usize) -> Result<MorphableReflectanceModel> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("no reflectance samples".into()))?;
    if samples.len() < 2 {
        return Err(Error::Config("building a model needs at least 2 samples".into()));
    }
    for s in samples {
        first.ensure_same_layout(s)?;
    }
    let n = samples.len();
    if components > n - 1 {
        return Err(Error::Config(format!("N_R = {components} exceeds samples - 1 = {}", n - 1)));
    }
    let (w, h, k) = (first.width(), first.height(), first.lobe_count());
    let v = w * h;
    let shared: Vec<usize> = (0..v).filter(|&i| samples.iter().all(|s| s.valid.at(i))).collect();

    let vectors: Vec<Vec<f64>> = samples.iter().map(|s| s.to_vector()).collect();
    let mean: Vec<f64> = (0..(3 + k) * v)
        .map(|r| vectors.iter().map(|x| x[r]).sum::<f64>() / n as f64)
        .collect();

    let diffuse_rows: Vec<usize> = shared.iter().flat_map(|&t| (0..3).map(move |c| 3 * t + c)).collect();
    let specular_rows: Vec<usize> = shared.iter().flat_map(|&t| (0..k).map(move |c| k * t + c)).collect();
    let diffuse_data = DMatrix::from_fn(diffuse_rows.len(), n, |r, j| vectors[j][diffuse_rows[r]]);
    let mut specular_data = DMatrix::from_fn(specular_rows.len(), n, |r, j| vectors[j][3 * v + specular_rows[r]]);
    center_columns(&mut specular_data);

    let (diffuse_bases, specular_bases, sigmas) = if components == 0 {
        (Vec::new(), Vec::new(), Vec::new())
    } else {
        if diffuse_rows.len() < components {
            return Err(Error::Config(format!(
                "{} shared valid texels cannot support {components} components",
                shared.len()
            )));
        }
        let p = pca(diffuse_data, components)?;
        let transferred = &specular_data * &p.combinations;
        let mut db = vec![0.0f32; 3 * v * components];
        let mut sb = vec![0.0f32; k * v * components];
        for j in 0..components {
            for (r, &row) in diffuse_rows.iter().enumerate() {
                db[j * 3 * v + row] = p.bases[(r, j)] as f32;
            }
            for (r, &row) in specular_rows.iter().enumerate() {
                sb[j * k * v + row] = transferred[(r, j)] as f32;
            }
        }
        (db, sb, to_f32(&p.sigmas()))
    };
    MorphableReflectanceModel::from_parts(h, w, first.config.clone(), to_f32(&mean), diffuse_bases, specular_bases, sigmas)
}
