//! UV-space reflectance parameter maps.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::brdf::{BrdfConfig, ReflectanceTexel};
use crate::error::{Error, Result};
use crate::raster::{Image, Mask};

/// Diffuse color map, per-lobe weight maps, and the mask of texels whose
/// parameters were estimated.
#[derive(Clone, Debug, PartialEq)]
pub struct ReflectanceMaps {
    pub config: BrdfConfig,
    /// 3-channel diffuse color.
    pub diffuse: Image,
    /// One channel per lobe.
    pub weights: Image,
    pub valid: Mask,
}

#[derive(Serialize, Deserialize)]
struct MapsManifest {
    width: usize,
    height: usize,
    exponents: Vec<f64>,
    diffuse: String,
    weights: Vec<String>,
    valid: String,
}

impl ReflectanceMaps {
    pub fn zeros(config: BrdfConfig, width: usize, height: usize) -> Self {
        let k = config.lobe_count();
        ReflectanceMaps {
            config,
            diffuse: Image::new(width, height, 3),
            weights: Image::new(width, height, k),
            valid: Mask::new(width, height, true),
        }
    }

    pub fn from_fn(
        config: BrdfConfig,
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> ReflectanceTexel,
    ) -> Self {
        let mut maps = ReflectanceMaps::zeros(config, width, height);
        for y in 0..height {
            for x in 0..width {
                maps.set_texel(y * width + x, &f(x, y));
            }
        }
        maps
    }

    pub fn width(&self) -> usize {
        self.diffuse.width()
    }

    pub fn height(&self) -> usize {
        self.diffuse.height()
    }

    pub fn texel_count(&self) -> usize {
        self.diffuse.pixel_count()
    }

    pub fn lobe_count(&self) -> usize {
        self.config.lobe_count()
    }

    pub fn texel(&self, i: usize) -> ReflectanceTexel {
        let d = self.diffuse.pixel(i);
        ReflectanceTexel {
            diffuse: [d[0] as f64, d[1] as f64, d[2] as f64],
            weights: self.weights.pixel(i).iter().map(|&w| w as f64).collect(),
        }
    }

    pub fn set_texel(&mut self, i: usize, t: &ReflectanceTexel) {
        for (dst, src) in self.diffuse.pixel_mut(i).iter_mut().zip(t.diffuse) {
            *dst = src as f32;
        }
        for (dst, src) in self.weights.pixel_mut(i).iter_mut().zip(&t.weights) {
            *dst = *src as f32;
        }
    }

    /// Texel index of the horizontal mirror of texel `i`.
    pub fn mirror_index(&self, i: usize) -> usize {
        let w = self.width();
        let (x, y) = (i % w, i / w);
        y * w + (w - 1 - x)
    }

    pub fn flip_horizontal(&self) -> Self {
        ReflectanceMaps {
            config: self.config.clone(),
            diffuse: self.diffuse.flip_horizontal(),
            weights: self.weights.flip_horizontal(),
            valid: self.valid.flip_horizontal(),
        }
    }

    pub fn same_layout(&self, other: &ReflectanceMaps) -> bool {
        self.config == other.config
            && self.width() == other.width()
            && self.height() == other.height()
    }

    pub fn ensure_same_layout(&self, other: &ReflectanceMaps) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "reflectance maps {}x{} ({} lobes) vs {}x{} ({} lobes)",
                self.width(),
                self.height(),
                self.lobe_count(),
                other.width(),
                other.height(),
                other.lobe_count()
            )))
        }
    }

    /// Replaces every invalid texel with the mean over valid texels, leaving
    /// the mask untouched. A map with no valid texels is zero-filled.
    pub fn fill_invalid_with_mean(&mut self) {
        let n = self.texel_count();
        let params = self.config.params_per_texel();
        let mut sum = vec![0.0f64; params];
        let mut count = 0usize;
        for i in (0..n).filter(|&i| self.valid.at(i)) {
            for (s, p) in sum.iter_mut().zip(self.texel(i).to_params()) {
                *s += p;
            }
            count += 1;
        }
        let mean: Vec<f64> = sum.iter().map(|s| if count > 0 { s / count as f64 } else { 0.0 }).collect();
        let fill = ReflectanceTexel::from_params(&mean);
        for i in 0..n {
            if !self.valid.at(i) {
                self.set_texel(i, &fill);
            }
        }
    }

    /// Diffuse block as a flat vector, texel-major with RGB interleaved.
    pub fn diffuse_vector(&self) -> Vec<f64> {
        self.diffuse.data().iter().map(|&v| v as f64).collect()
    }

    /// Weight block as a flat vector, texel-major with lobes interleaved.
    pub fn weight_vector(&self) -> Vec<f64> {
        self.weights.data().iter().map(|&v| v as f64).collect()
    }

    /// Diffuse block followed by the weight block.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = self.diffuse_vector();
        v.extend(self.weight_vector());
        v
    }

    pub fn from_vector(
        config: BrdfConfig,
        width: usize,
        height: usize,
        v: &[f64],
        valid: Mask,
    ) -> Result<Self> {
        let n = width * height;
        let k = config.lobe_count();
        if v.len() != n * (3 + k) {
            return Err(Error::LengthMismatch {
                expected: n * (3 + k),
                got: v.len(),
            });
        }
        let diffuse = Image::from_vec(width, height, 3, v[..3 * n].iter().map(|&x| x as f32).collect())?;
        let weights = Image::from_vec(width, height, k, v[3 * n..].iter().map(|&x| x as f32).collect())?;
        Ok(ReflectanceMaps {
            config,
            diffuse,
            weights,
            valid,
        })
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let k = self.lobe_count();
        let manifest = MapsManifest {
            width: self.width(),
            height: self.height(),
            exponents: self.config.exponents().to_vec(),
            diffuse: "diffuse.pfm".into(),
            weights: (0..k).map(|i| format!("weight_{i}.pfm")).collect(),
            valid: "valid.png".into(),
        };
        self.diffuse.write_pfm(dir.join(&manifest.diffuse))?;
        for (i, name) in manifest.weights.iter().enumerate() {
            let channel = Image::from_fn(self.width(), self.height(), 1, |x, y, _| self.weights.get(x, y, i));
            channel.write_pfm(dir.join(name))?;
        }
        self.valid.write_png(dir.join(&manifest.valid))?;
        crate::manifest::write_json(dir.join("maps.json"), &manifest)
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: MapsManifest = crate::manifest::read_json(dir.join("maps.json"))?;
        let config = BrdfConfig::new(manifest.exponents)?;
        if manifest.weights.len() != config.lobe_count() {
            return Err(Error::Format(format!(
                "{}: {} weight maps for {} lobes",
                dir.display(),
                manifest.weights.len(),
                config.lobe_count()
            )));
        }
        let (w, h) = (manifest.width, manifest.height);
        let diffuse = Image::read_pfm(dir.join(&manifest.diffuse))?;
        if diffuse.width() != w || diffuse.height() != h || diffuse.channels() != 3 {
            return Err(Error::Format(format!("{}: diffuse map has wrong shape", dir.display())));
        }
        let mut weights = Image::new(w, h, config.lobe_count());
        for (i, name) in manifest.weights.iter().enumerate() {
            let ch = Image::read_pfm(dir.join(name))?;
            if ch.width() != w || ch.height() != h || ch.channels() != 1 {
                return Err(Error::Format(format!("{}: {name} has wrong shape", dir.display())));
            }
            for p in 0..w * h {
                weights.pixel_mut(p)[i] = ch.pixel(p)[0];
            }
        }
        let valid = Mask::read_png(dir.join(&manifest.valid))?;
        if valid.width() != w || valid.height() != h {
            return Err(Error::Format(format!("{}: valid mask has wrong shape", dir.display())));
        }
        Ok(ReflectanceMaps {
            config,
            diffuse,
            weights,
            valid,
        })
    }
}
