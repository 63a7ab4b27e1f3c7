//! Image-space rendering from model coefficients, the fitting losses with
//! their analytic gradients, per-image coefficient fitting, and model
//! finetuning by update-by-reconstruction.
//!
//! A rendered pixel is bilinear in the reflectance parameters and the SH
//! lighting coefficients, so every gradient below is a closed-form product.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, Schedule};
use crate::brdf::{BrdfConfig, Direction, ReflectanceTexel, Rgb, ShadingBasis};
use crate::error::{Error, Result};
use crate::lighting::LightingPcaModel;
use crate::maps::ReflectanceMaps;
use crate::model::{ModelParams, MorphableReflectanceModel};
use crate::olat::CaptureRig;
use crate::raster::{Image, Mask};
use crate::sh::{coeff_count, dot, EnvShadingBasis, ShVector, ZonalTable};

/// Per-pixel geometry standing in for a rasterized mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryBuffers {
    pub normals: Image,
    pub views: Image,
    /// `(u, v)` in `[0, 1]`, `v` measured from the top row of the
    /// reflectance maps. Stored with a third, unused channel.
    pub uv: Image,
    pub coverage: Mask,
}

impl GeometryBuffers {
    pub fn width(&self) -> usize {
        self.normals.width()
    }

    pub fn height(&self) -> usize {
        self.normals.height()
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.width(), self.height());
        for (name, img) in [("normals", &self.normals), ("views", &self.views), ("uv", &self.uv)] {
            if img.width() != w || img.height() != h || img.channels() != 3 {
                return Err(Error::DimensionMismatch(format!("{name} buffer must be {w}x{h} with 3 channels")));
            }
        }
        if self.coverage.width() != w || self.coverage.height() != h {
            return Err(Error::DimensionMismatch("coverage mask size".into()));
        }
        for i in (0..w * h).filter(|&i| self.coverage.at(i)) {
            for (name, img) in [("normal", &self.normals), ("view", &self.views)] {
                let p = img.pixel(i);
                let norm = (p[0] as f64).hypot(p[1] as f64).hypot(p[2] as f64);
                if (norm - 1.0).abs() > 1e-4 {
                    return Err(Error::Domain(format!("{name} at pixel {i} has length {norm}")));
                }
            }
            let uv = self.uv.pixel(i);
            if !(0.0..=1.0).contains(&uv[0]) || !(0.0..=1.0).contains(&uv[1]) {
                return Err(Error::Domain(format!("uv ({}, {}) at pixel {i} is outside [0, 1]", uv[0], uv[1])));
            }
        }
        Ok(())
    }

    fn direction(img: &Image, i: usize) -> Option<Direction> {
        let p = img.pixel(i);
        Direction::from_xyz(p[0] as f64, p[1] as f64, p[2] as f64).ok()
    }

    /// Nearest texel of a covered pixel.
    pub fn texel(&self, i: usize, map_width: usize, map_height: usize) -> usize {
        let uv = self.uv.pixel(i);
        let x = ((uv[0] as f64 * map_width as f64) as usize).min(map_width - 1);
        let y = ((uv[1] as f64 * map_height as f64) as usize).min(map_height - 1);
        y * map_width + x
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.normals.write_pfm(dir.join("normals.pfm"))?;
        self.views.write_pfm(dir.join("view.pfm"))?;
        self.uv.write_pfm(dir.join("uv.pfm"))?;
        self.coverage.write_png(dir.join("coverage.png"))
    }

    /// Reads the four buffer files of a target or geometry directory.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let g = GeometryBuffers {
            normals: Image::read_pfm(dir.join("normals.pfm"))?,
            views: Image::read_pfm(dir.join("view.pfm"))?,
            uv: Image::read_pfm(dir.join("uv.pfm"))?,
            coverage: Mask::read_png(dir.join("coverage.png"))?,
        };
        g.validate().map_err(|e| Error::Format(format!("{}: {e}", dir.display())))?;
        Ok(g)
    }

    /// Buffers that view a capture rig's proxy from one of its cameras,
    /// with one pixel per texel.
    pub fn from_rig(rig: &CaptureRig, view: usize) -> Result<Self> {
        if view >= rig.views.len() {
            return Err(Error::Config(format!("rig has no view {view}")));
        }
        let (w, h) = (rig.width(), rig.height());
        let uv = Image::from_fn(w, h, 3, |x, y, c| match c {
            0 => ((x as f64 + 0.5) / w as f64) as f32,
            1 => ((y as f64 + 0.5) / h as f64) as f32,
            _ => 0.0,
        });
        let coverage = Mask::from_fn(w, h, |x, y| {
            let i = y * w + x;
            rig.valid.at(i) && rig.normal(i).dot(&rig.view_dir(view, i)) > 0.0
        });
        Ok(GeometryBuffers {
            normals: rig.normals.clone(),
            views: rig.views[view].clone(),
            uv,
            coverage,
        })
    }
}

/// An image to be explained by the models.
#[derive(Clone, Debug, PartialEq)]
pub struct FitTarget {
    pub image: Image,
    pub skin: Mask,
    pub geometry: GeometryBuffers,
}

#[derive(Serialize, Deserialize)]
struct TargetManifest {
    width: usize,
    height: usize,
    image: String,
    skin: String,
    normals: String,
    views: String,
    uv: String,
    coverage: String,
}

impl FitTarget {
    pub const MANIFEST: &'static str = "target.json";

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let (w, h) = (self.geometry.width(), self.geometry.height());
        if self.image.width() != w || self.image.height() != h || self.image.channels() != 3 {
            return Err(Error::DimensionMismatch(format!("target image must be {w}x{h} RGB")));
        }
        if self.skin.width() != w || self.skin.height() != h {
            return Err(Error::DimensionMismatch("skin mask size".into()));
        }
        if let Some(v) = self.image.data().iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::Domain(format!("target pixel {v} is negative or NaN")));
        }
        Ok(())
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = TargetManifest {
            width: self.image.width(),
            height: self.image.height(),
            image: "image.pfm".into(),
            skin: "skin.png".into(),
            normals: "normals.pfm".into(),
            views: "view.pfm".into(),
            uv: "uv.pfm".into(),
            coverage: "coverage.png".into(),
        };
        self.image.write_pfm(dir.join(&m.image))?;
        self.skin.write_png(dir.join(&m.skin))?;
        self.geometry.save_dir(dir)?;
        crate::manifest::write_json(dir.join(Self::MANIFEST), &m)
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let m: TargetManifest = crate::manifest::read_json(dir.join(Self::MANIFEST))?;
        let t = FitTarget {
            image: Image::read_pfm(dir.join(&m.image))?,
            skin: Mask::read_png(dir.join(&m.skin))?,
            geometry: GeometryBuffers {
                normals: Image::read_pfm(dir.join(&m.normals))?,
                views: Image::read_pfm(dir.join(&m.views))?,
                uv: Image::read_pfm(dir.join(&m.uv))?,
                coverage: Mask::read_png(dir.join(&m.coverage))?,
            },
        };
        if t.image.width() != m.width || t.image.height() != m.height {
            return Err(Error::Format(format!("{}: image size disagrees with manifest", dir.display())));
        }
        t.validate().map_err(|e| Error::Format(format!("{}: {e}", dir.display())))?;
        Ok(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub l1: f64,
    pub coef: f64,
    pub light: f64,
    pub upd: f64,
    /// Perceptual-loss weight. Kept for configuration compatibility; no
    /// perceptual term is computed.
    pub per: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 2.0,
            coef: 0.001,
            light: 10.0,
            upd: 10.0,
            per: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.l1, self.coef, self.light, self.upd, self.per].iter().all(|w| *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be nonnegative: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub coef: f64,
    pub light: f64,
    /// `w_l1 l1 + w_coef coef + w_light light`.
    pub total: f64,
}

/// Model coefficients of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub z: Rgb,
}

impl Coefficients {
    pub fn neutral(n_r: usize, n_l: usize) -> Self {
        Coefficients {
            beta: vec![0.0; n_r],
            gamma: vec![0.0; n_l],
            z: [1.0; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub z: Rgb,
    pub losses: LossBreakdown,
    pub iterations: usize,
    /// Total loss before each iteration.
    pub trace: Vec<f64>,
}

impl FitResult {
    pub fn coefficients(&self) -> Coefficients {
        Coefficients {
            beta: self.beta.clone(),
            gamma: self.gamma.clone(),
            z: self.z,
        }
    }
}

pub fn loss_l1(rendered: &Image, target: &Image, skin: &Mask) -> Result<f64> {
    rendered.ensure_same_shape(target, "rendered vs target")?;
    if skin.width() != target.width() || skin.height() != target.height() {
        return Err(Error::DimensionMismatch("skin mask size".into()));
    }
    let n = skin.count();
    if n == 0 {
        log::warn!("empty skin mask, L1 loss is 0");
        return Ok(0.0);
    }
    let c = rendered.channels();
    let sum: f64 = (0..rendered.pixel_count())
        .filter(|&i| skin.at(i))
        .flat_map(|i| (0..c).map(move |ch| (i, ch)))
        .map(|(i, ch)| (rendered.pixel(i)[ch] as f64 - target.pixel(i)[ch] as f64).abs())
        .sum();
    Ok(sum / (n * c) as f64)
}

fn whitened_sq(x: &[f64], sigma: &[f64]) -> f64 {
    x.iter()
        .zip(sigma)
        .map(|(v, s)| {
            if *s > 0.0 {
                (v / s).powi(2)
            } else if *v == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .sum()
}

/// `sum (beta/sigma_beta)^2 + sum (gamma/sigma_gamma)^2`.
pub fn loss_coef(beta: &[f64], sigma_beta: &[f64], gamma: &[f64], sigma_gamma: &[f64]) -> f64 {
    whitened_sq(beta, sigma_beta) + whitened_sq(gamma, sigma_gamma)
}

/// Squared distance of every channel from the channel mean.
pub fn loss_light(sh: &ShVector) -> f64 {
    let n = coeff_count(sh.order());
    (0..n)
        .map(|k| {
            let v = [0, 1, 2].map(|ch| sh.channel(ch)[k]);
            let m = (v[0] + v[1] + v[2]) / 3.0;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>()
        })
        .sum()
}

/// `||mean - mean0||_1 + ||bases - bases0||_1` over both basis blocks.
pub fn loss_upd(model: &MorphableReflectanceModel, model0: &MorphableReflectanceModel) -> Result<f64> {
    if model.component_count() != model0.component_count() || model.mean().len() != model0.mean().len() {
        return Err(Error::DimensionMismatch("models differ in shape".into()));
    }
    Ok(model.params().l1_distance(&model0.params()))
}

/// f64 view of a reflectance model as the fitter uses it.
#[derive(Clone, Debug)]
pub struct ReflectanceSpace {
    pub config: BrdfConfig,
    pub width: usize,
    pub height: usize,
    pub params: ModelParams,
    pub sigmas: Vec<f64>,
}

impl ReflectanceSpace {
    pub fn new(model: &MorphableReflectanceModel) -> Self {
        ReflectanceSpace {
            config: model.config().clone(),
            width: model.width(),
            height: model.height(),
            params: model.params(),
            sigmas: model.sigmas_f64(),
        }
    }

    pub fn texel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn lobes(&self) -> usize {
        self.config.lobe_count()
    }

    pub fn components(&self) -> usize {
        self.sigmas.len()
    }

    pub fn reflectance(&self, beta: &[f64]) -> Vec<f64> {
        let b = DVector::from_column_slice(beta);
        let mut out = self.params.mean.clone();
        let dv = 3 * self.texel_count();
        out.rows_mut(0, dv).gemv(1.0, &self.params.diffuse, &b, 1.0);
        let sv = out.len() - dv;
        out.rows_mut(dv, sv).gemv(1.0, &self.params.specular, &b, 1.0);
        out.data.into()
    }

    pub fn to_model(&self, template: &MorphableReflectanceModel) -> Result<MorphableReflectanceModel> {
        template.with_params(&self.params)
    }
}

/// f64 view of a lighting model.
#[derive(Clone, Debug)]
pub struct LightSpace {
    pub order: usize,
    pub mean: DVector<f64>,
    pub bases: DMatrix<f64>,
    pub sigmas: Vec<f64>,
}

impl LightSpace {
    pub fn new(model: &LightingPcaModel) -> Self {
        let d = model.dim();
        LightSpace {
            order: model.order(),
            mean: DVector::from_iterator(d, model.mean().iter().map(|&x| x as f64)),
            bases: DMatrix::from_iterator(d, model.component_count(), model.bases().iter().map(|&x| x as f64)),
            sigmas: model.sigmas_f64(),
        }
    }

    pub fn components(&self) -> usize {
        self.sigmas.len()
    }

    /// Normalized coefficients and the scaled lighting.
    pub fn decode(&self, gamma: &[f64], z: &Rgb) -> (DVector<f64>, DVector<f64>) {
        let g = DVector::from_column_slice(gamma);
        let normalized = &self.mean + &self.bases * g;
        let n = coeff_count(self.order);
        let mut k = normalized.clone();
        for ch in 0..3 {
            k.rows_mut(ch * n, n).scale_mut(z[ch]);
        }
        (normalized, k)
    }
}

struct PixelEntry {
    pixel: usize,
    texel: usize,
    skin: bool,
    target: Rgb,
    basis: EnvShadingBasis,
}

/// A target with per-pixel shading bases precomputed.
pub struct PreparedTarget {
    width: usize,
    height: usize,
    entries: Vec<PixelEntry>,
    /// `sum |target|` over skin pixels that no covered pixel renders.
    uncovered_skin_l1: f64,
    skin_count: usize,
}

impl PreparedTarget {
    pub fn new(target: &FitTarget, refl: &ReflectanceSpace, zonal: &ZonalTable) -> Result<Self> {
        target.validate()?;
        Self::build(&target.geometry, Some((&target.image, &target.skin)), refl, zonal)
    }

    /// Geometry only, for rendering.
    pub fn geometry(geometry: &GeometryBuffers, refl: &ReflectanceSpace, zonal: &ZonalTable) -> Result<Self> {
        geometry.validate()?;
        Self::build(geometry, None, refl, zonal)
    }

    fn build(
        g: &GeometryBuffers,
        target: Option<(&Image, &Mask)>,
        refl: &ReflectanceSpace,
        zonal: &ZonalTable,
    ) -> Result<Self> {
        if zonal.lobe_count() != refl.lobes() {
            return Err(Error::DimensionMismatch(format!(
                "zonal table has {} lobes, model {}",
                zonal.lobe_count(),
                refl.lobes()
            )));
        }
        let n = g.width() * g.height();
        let built: Vec<Option<PixelEntry>> = (0..n)
            .into_par_iter()
            .map(|i| {
                if !g.coverage.at(i) {
                    return None;
                }
                let nrm = GeometryBuffers::direction(&g.normals, i)?;
                let view = GeometryBuffers::direction(&g.views, i)?;
                let basis = EnvShadingBasis::new(zonal, &nrm, &view).ok()?;
                let (skin, t) = match target {
                    Some((img, skin)) => {
                        let p = img.pixel(i);
                        (skin.at(i), [p[0] as f64, p[1] as f64, p[2] as f64])
                    }
                    None => (false, [0.0; 3]),
                };
                Some(PixelEntry {
                    pixel: i,
                    texel: g.texel(i, refl.width, refl.height),
                    skin,
                    target: t,
                    basis,
                })
            })
            .collect();
        let mut rendered = vec![false; n];
        let entries: Vec<PixelEntry> = built.into_iter().flatten().inspect(|e| rendered[e.pixel] = true).collect();
        let (skin_count, uncovered_skin_l1) = match target {
            Some((img, skin)) => {
                let count = skin.count();
                let rest = (0..n)
                    .filter(|&i| skin.at(i) && !rendered[i])
                    .map(|i| img.pixel(i).iter().map(|v| v.abs() as f64).sum::<f64>())
                    .sum();
                (count, rest)
            }
            None => (0, 0.0),
        };
        Ok(PreparedTarget {
            width: g.width(),
            height: g.height(),
            entries,
            uncovered_skin_l1,
            skin_count,
        })
    }
}

/// Losses and gradients of the fit objective at one point.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub losses: LossBreakdown,
    pub grad_beta: Vec<f64>,
    pub grad_gamma: Vec<f64>,
    pub grad_log_z: Rgb,
    /// Gradient with respect to the flat reflectance vector, which is also
    /// the gradient with respect to the model mean. Present on request.
    pub grad_reflectance: Option<Vec<f64>>,
}

fn check_coefficients(refl: &ReflectanceSpace, light: &LightSpace, c: &Coefficients) -> Result<()> {
    if c.beta.len() != refl.components() {
        return Err(Error::LengthMismatch {
            expected: refl.components(),
            got: c.beta.len(),
        });
    }
    if c.gamma.len() != light.components() {
        return Err(Error::LengthMismatch {
            expected: light.components(),
            got: c.gamma.len(),
        });
    }
    if c.z.iter().any(|z| !(*z > 0.0)) {
        return Err(Error::Domain(format!("z must be positive, got {:?}", c.z)));
    }
    Ok(())
}

/// Evaluates `w_l1 L_l1 + w_coef L_coef + w_light L_light` and its gradients.
pub fn evaluate(
    refl: &ReflectanceSpace,
    light: &LightSpace,
    prep: &PreparedTarget,
    c: &Coefficients,
    w: &LossWeights,
    want_reflectance_grad: bool,
) -> Result<Evaluation> {
    check_coefficients(refl, light, c)?;
    let n_c = coeff_count(light.order);
    let k = refl.lobes();
    let v = refl.texel_count();
    let r = refl.reflectance(&c.beta);
    let (normalized, lk) = light.decode(&c.gamma, &c.z);

    let scale = if prep.skin_count > 0 {
        w.l1 / (3 * prep.skin_count) as f64
    } else {
        0.0
    };
    let mut l1_sum = prep.uncovered_skin_l1;
    let mut g_k = vec![0.0; 3 * n_c];
    let mut g_r = vec![0.0; r.len()];
    let mut lobe_terms = vec![0.0; k];
    for e in prep.entries.iter().filter(|e| e.skin) {
        let t = e.texel;
        for ch in 0..3 {
            let kc = &lk.as_slice()[ch * n_c..(ch + 1) * n_c];
            let irr = e.basis.channel_terms(kc, &mut lobe_terms);
            let wt = &r[3 * v + k * t..3 * v + k * (t + 1)];
            let cd = r[3 * t + ch];
            let pred = cd * irr + wt.iter().zip(&lobe_terms).map(|(a, b)| a * b).sum::<f64>();
            let res = pred - e.target[ch];
            l1_sum += res.abs();
            if res == 0.0 {
                continue;
            }
            let s = scale * res.signum();
            g_r[3 * t + ch] += s * irr;
            for i in 0..k {
                g_r[3 * v + k * t + i] += s * lobe_terms[i];
            }
            let gk = &mut g_k[ch * n_c..(ch + 1) * n_c];
            for (j, g) in gk.iter_mut().enumerate() {
                let mut acc = cd * e.basis.diffuse[j];
                for i in 0..k {
                    acc += wt[i] * e.basis.lobes[i][j];
                }
                *g += s * acc;
            }
        }
    }
    let l1 = if prep.skin_count > 0 {
        l1_sum / (3 * prep.skin_count) as f64
    } else {
        0.0
    };

    let mut light_loss = 0.0;
    for j in 0..n_c {
        let vals = [0, 1, 2].map(|ch| lk[ch * n_c + j]);
        let m = (vals[0] + vals[1] + vals[2]) / 3.0;
        for ch in 0..3 {
            let d = vals[ch] - m;
            light_loss += d * d;
            g_k[ch * n_c + j] += w.light * 2.0 * d;
        }
    }
    let coef = loss_coef(&c.beta, &refl.sigmas, &c.gamma, &light.sigmas);

    let mut grad_gamma = vec![0.0; light.components()];
    for (jg, gg) in grad_gamma.iter_mut().enumerate() {
        let col = light.bases.column(jg);
        let mut acc = 0.0;
        for ch in 0..3 {
            let s: f64 = (0..n_c).map(|j| col[ch * n_c + j] * g_k[ch * n_c + j]).sum();
            acc += c.z[ch] * s;
        }
        let sg = light.sigmas[jg];
        *gg = acc + if sg > 0.0 { w.coef * 2.0 * c.gamma[jg] / (sg * sg) } else { 0.0 };
    }
    let grad_log_z = [0, 1, 2].map(|ch| {
        let dz: f64 = (0..n_c).map(|j| g_k[ch * n_c + j] * normalized[ch * n_c + j]).sum();
        c.z[ch] * dz
    });
    let dv = 3 * v;
    let gr_d = DVector::from_column_slice(&g_r[..dv]);
    let gr_s = DVector::from_column_slice(&g_r[dv..]);
    let gb = refl.params.diffuse.tr_mul(&gr_d) + refl.params.specular.tr_mul(&gr_s);
    let grad_beta = (0..refl.components())
        .map(|j| {
            let s = refl.sigmas[j];
            gb[j] + if s > 0.0 { w.coef * 2.0 * c.beta[j] / (s * s) } else { 0.0 }
        })
        .collect();

    Ok(Evaluation {
        losses: LossBreakdown {
            l1,
            coef,
            light: light_loss,
            total: w.l1 * l1 + w.coef * coef + w.light * light_loss,
        },
        grad_beta,
        grad_gamma,
        grad_log_z,
        grad_reflectance: want_reflectance_grad.then_some(g_r),
    })
}

/// Renders a prepared geometry with the given coefficients. Uncovered
/// pixels are 0. Reflectance is used as reconstructed, without clamping.
pub fn render_prepared(refl: &ReflectanceSpace, light: &LightSpace, prep: &PreparedTarget, c: &Coefficients) -> Result<Image> {
    check_coefficients(refl, light, c)?;
    let r = refl.reflectance(&c.beta);
    let (_, lk) = light.decode(&c.gamma, &c.z);
    let sh = ShVector::from_coeffs(light.order, lk.data.into())?;
    let maps_texel = |t: usize| {
        let (v, k) = (refl.texel_count(), refl.lobes());
        ReflectanceTexel::new([r[3 * t], r[3 * t + 1], r[3 * t + 2]], r[3 * v + k * t..3 * v + k * (t + 1)].to_vec())
    };
    let mut img = Image::new(prep.width, prep.height, 3);
    for e in &prep.entries {
        let rgb = e.basis.shade(&maps_texel(e.texel), &sh);
        for ch in 0..3 {
            img.pixel_mut(e.pixel)[ch] = rgb[ch] as f32;
        }
    }
    Ok(img)
}

/// Renders model coefficients over geometry buffers with SH lighting.
pub fn render_image(
    model: &MorphableReflectanceModel,
    light_model: &LightingPcaModel,
    c: &Coefficients,
    geometry: &GeometryBuffers,
) -> Result<Image> {
    let refl = ReflectanceSpace::new(model);
    let light = LightSpace::new(light_model);
    let zonal = ZonalTable::cached(&refl.config, light.order);
    let prep = PreparedTarget::geometry(geometry, &refl, &zonal)?;
    render_prepared(&refl, &light, &prep, c)
}

/// Renders reflectance maps under explicit SH lighting. Texel parameters
/// are clamped at zero first.
pub fn render_maps_env(maps: &ReflectanceMaps, sh: &ShVector, geometry: &GeometryBuffers) -> Result<Image> {
    geometry.validate()?;
    let zonal: Arc<ZonalTable> = ZonalTable::cached(&maps.config, sh.order());
    let n = geometry.width() * geometry.height();
    let pixels: Vec<Rgb> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<Rgb> {
            if !geometry.coverage.at(i) {
                return Ok([0.0; 3]);
            }
            let (Some(nrm), Some(view)) = (
                GeometryBuffers::direction(&geometry.normals, i),
                GeometryBuffers::direction(&geometry.views, i),
            ) else {
                return Ok([0.0; 3]);
            };
            if nrm.dot(&view) <= 0.0 {
                return Ok([0.0; 3]);
            }
            let t = clamp_texel(maps.texel(geometry.texel(i, maps.width(), maps.height())));
            crate::sh::shade_env(&t, &maps.config, sh, &zonal, &nrm, &view)
        })
        .collect::<Result<_>>()?;
    image_from_rgb(geometry.width(), geometry.height(), &pixels)
}

/// Renders reflectance maps under a directional light.
pub fn render_maps_point(maps: &ReflectanceMaps, light_dir: &Direction, irradiance: &Rgb, geometry: &GeometryBuffers) -> Result<Image> {
    geometry.validate()?;
    let n = geometry.width() * geometry.height();
    let pixels: Vec<Rgb> = (0..n)
        .into_par_iter()
        .map(|i| {
            if !geometry.coverage.at(i) {
                return [0.0; 3];
            }
            let (Some(nrm), Some(view)) = (
                GeometryBuffers::direction(&geometry.normals, i),
                GeometryBuffers::direction(&geometry.views, i),
            ) else {
                return [0.0; 3];
            };
            let t = clamp_texel(maps.texel(geometry.texel(i, maps.width(), maps.height())));
            ShadingBasis::new(&maps.config, light_dir, &view, &nrm).shade(&t, irradiance)
        })
        .collect();
    image_from_rgb(geometry.width(), geometry.height(), &pixels)
}

fn clamp_texel(mut t: ReflectanceTexel) -> ReflectanceTexel {
    t.diffuse.iter_mut().for_each(|c| *c = c.max(0.0));
    t.weights.iter_mut().for_each(|w| *w = w.max(0.0));
    t
}

fn image_from_rgb(w: usize, h: usize, px: &[Rgb]) -> Result<Image> {
    Image::from_vec(w, h, 3, px.iter().flat_map(|p| p.map(|v| v as f32)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitSettings {
    pub weights: LossWeights,
    pub iterations: usize,
    /// Adam step on whitened coefficients and on `log z`.
    pub step_size: f64,
    pub step_floor: f64,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            weights: LossWeights::default(),
            iterations: 400,
            step_size: 2e-2,
            step_floor: 0.02,
        }
    }
}

/// Per-channel `z` that matches mean skin brightness of the neutral render.
pub fn initial_z(refl: &ReflectanceSpace, light: &LightSpace, prep: &PreparedTarget) -> Result<Rgb> {
    let neutral = Coefficients::neutral(refl.components(), light.components());
    let r = refl.reflectance(&neutral.beta);
    let (_, lk) = light.decode(&neutral.gamma, &neutral.z);
    let n_c = coeff_count(light.order);
    let (v, k) = (refl.texel_count(), refl.lobes());
    let mut rendered = [0.0; 3];
    let mut target = [0.0; 3];
    let mut terms = vec![0.0; k];
    for e in prep.entries.iter().filter(|e| e.skin) {
        for ch in 0..3 {
            let irr = e.basis.channel_terms(&lk.as_slice()[ch * n_c..(ch + 1) * n_c], &mut terms);
            let wt = &r[3 * v + k * e.texel..3 * v + k * (e.texel + 1)];
            rendered[ch] += r[3 * e.texel + ch] * irr + dot(wt, &terms);
            target[ch] += e.target[ch];
        }
    }
    Ok([0, 1, 2].map(|ch| {
        let ratio = target[ch] / rendered[ch];
        if ratio.is_finite() && ratio > 0.0 {
            ratio
        } else {
            1.0
        }
    }))
}

/// Fits `(beta, gamma, log z)` to one prepared target by Adam on whitened
/// coefficients, starting from `start` or from a neutral guess.
pub fn fit_prepared(
    refl: &ReflectanceSpace,
    light: &LightSpace,
    prep: &PreparedTarget,
    settings: &FitSettings,
    start: Option<&Coefficients>,
) -> Result<FitResult> {
    settings.weights.validate()?;
    let (nr, nl) = (refl.components(), light.components());
    let start = match start {
        Some(c) => c.clone(),
        None => Coefficients {
            z: initial_z(refl, light, prep)?,
            ..Coefficients::neutral(nr, nl)
        },
    };
    check_coefficients(refl, light, &start)?;
    let whiten = |x: f64, s: f64| if s > 0.0 { x / s } else { 0.0 };
    let mut x: Vec<f64> = start
        .beta
        .iter()
        .zip(&refl.sigmas)
        .map(|(b, s)| whiten(*b, *s))
        .chain(start.gamma.iter().zip(&light.sigmas).map(|(g, s)| whiten(*g, *s)))
        .chain(start.z.iter().map(|z| z.ln()))
        .collect();
    let unpack = |x: &[f64]| Coefficients {
        beta: x[..nr].iter().zip(&refl.sigmas).map(|(b, s)| b * s).collect(),
        gamma: x[nr..nr + nl].iter().zip(&light.sigmas).map(|(g, s)| g * s).collect(),
        z: [0, 1, 2].map(|ch| x[nr + nl + ch].exp()),
    };
    let mut opt = Adam::new(x.len(), settings.step_size).with_schedule(Schedule::Cosine {
        total: settings.iterations,
        floor: settings.step_floor,
    });
    let mut trace = Vec::with_capacity(settings.iterations + 1);
    let mut grad = vec![0.0; x.len()];
    for it in 0..=settings.iterations {
        let c = unpack(&x);
        let ev = evaluate(refl, light, prep, &c, &settings.weights, false)?;
        trace.push(ev.losses.total);
        if !ev.losses.total.is_finite() {
            let tail: Vec<String> = trace.iter().rev().take(5).map(|v| format!("{v:e}")).collect();
            return Err(Error::Divergence {
                iteration: it,
                trace: format!("last losses {}", tail.join(", ")),
            });
        }
        if it == settings.iterations {
            return Ok(FitResult {
                beta: c.beta,
                gamma: c.gamma,
                z: c.z,
                losses: ev.losses,
                iterations: it,
                trace,
            });
        }
        for j in 0..nr {
            grad[j] = refl.sigmas[j] * ev.grad_beta[j];
        }
        for j in 0..nl {
            grad[nr + j] = light.sigmas[j] * ev.grad_gamma[j];
        }
        grad[nr + nl..].copy_from_slice(&ev.grad_log_z);
        opt.step(&mut x, &grad);
    }
    unreachable!("loop returns on its last iteration")
}

pub fn fit_image(
    target: &FitTarget,
    model: &MorphableReflectanceModel,
    light_model: &LightingPcaModel,
    settings: &FitSettings,
) -> Result<FitResult> {
    let refl = ReflectanceSpace::new(model);
    let light = LightSpace::new(light_model);
    let zonal = ZonalTable::cached(&refl.config, light.order);
    let prep = PreparedTarget::new(target, &refl, &zonal)?;
    fit_prepared(&refl, &light, &prep, settings, None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub weights: LossWeights,
    pub epochs: usize,
    /// Coefficient iterations per target in the first epoch.
    pub fit_iterations: usize,
    /// Warm-started coefficient iterations per target in later epochs.
    pub refit_iterations: usize,
    pub coef_step: f64,
    /// Model update steps per epoch.
    pub model_steps: usize,
    pub model_step: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            weights: LossWeights::default(),
            epochs: 5,
            fit_iterations: 400,
            refit_iterations: 100,
            coef_step: 2e-2,
            model_steps: 50,
            model_step: 1e-5,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.coef_step > 0.0 && self.model_step > 0.0 && self.fit_iterations > 0) {
            return Err(Error::Config(format!("invalid finetune config {self:?}")));
        }
        Ok(())
    }

    fn fit_settings(&self, iterations: usize) -> FitSettings {
        FitSettings {
            weights: self.weights,
            iterations,
            step_size: self.coef_step,
            ..FitSettings::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean L1 over targets after the coefficient fit.
    pub mean_l1: f64,
    /// Mean total fit loss over targets after the model steps.
    pub mean_total: f64,
    pub upd: f64,
    pub orthonormality_error: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: MorphableReflectanceModel,
    pub coefficients: Vec<Coefficients>,
    pub history: Vec<EpochStats>,
}

fn flatten(p: &ModelParams) -> Vec<f64> {
    p.mean.iter().chain(p.diffuse.iter()).chain(p.specular.iter()).copied().collect()
}

fn unflatten(p: &mut ModelParams, flat: &[f64]) {
    let (a, b) = (p.mean.len(), p.diffuse.len());
    p.mean.copy_from_slice(&flat[..a]);
    p.diffuse.copy_from_slice(&flat[a..a + b]);
    p.specular.copy_from_slice(&flat[a + b..]);
}

/// Gradient of `sum_targets total loss` with respect to the flat model
/// parameters `[mean, diffuse bases, specular bases]`.
pub fn model_gradient(
    refl: &ReflectanceSpace,
    light: &LightSpace,
    preps: &[PreparedTarget],
    coeffs: &[Coefficients],
    w: &LossWeights,
) -> Result<(f64, Vec<f64>)> {
    let evals: Vec<Evaluation> = preps
        .par_iter()
        .zip(coeffs)
        .map(|(p, c)| evaluate(refl, light, p, c, w, true))
        .collect::<Result<_>>()?;
    let dv = 3 * refl.texel_count();
    let mut grad = vec![0.0; refl.params.len()];
    let (m, d) = (refl.params.mean.len(), refl.params.diffuse.len());
    let mut total = 0.0;
    // serial reduction in target order keeps the sum deterministic
    for (ev, c) in evals.iter().zip(coeffs) {
        total += ev.losses.total;
        let gr = ev.grad_reflectance.as_ref().expect("requested");
        for (g, x) in grad[..m].iter_mut().zip(gr) {
            *g += x;
        }
        for (j, b) in c.beta.iter().enumerate() {
            if *b == 0.0 {
                continue;
            }
            let dcol = &mut grad[m + j * dv..m + (j + 1) * dv];
            for (g, x) in dcol.iter_mut().zip(&gr[..dv]) {
                *g += b * x;
            }
            let sv = gr.len() - dv;
            let scol = &mut grad[m + d + j * sv..m + d + (j + 1) * sv];
            for (g, x) in scol.iter_mut().zip(&gr[dv..]) {
                *g += b * x;
            }
        }
    }
    Ok((total, grad))
}

/// Thin QR of the diffuse block: bases become `Q`, the specular block is
/// mapped through `R^-1`, and coefficients through `R` so renders are
/// unchanged.
fn reorthonormalize(p: &mut ModelParams, coeffs: &mut [Coefficients]) {
    let r_count = p.diffuse.ncols();
    if r_count == 0 {
        return;
    }
    let qr = p.diffuse.clone().qr();
    let mut q = qr.q();
    let mut r = qr.r();
    for j in 0..r_count {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
            r.row_mut(j).neg_mut();
        }
    }
    let Some(r_inv) = r.clone().try_inverse() else {
        log::warn!("diffuse bases are rank deficient; skipping re-orthonormalization");
        return;
    };
    p.specular = &p.specular * r_inv;
    p.diffuse = q;
    for c in coeffs {
        let b = &r * DVector::from_column_slice(&c.beta);
        c.beta = b.data.into();
    }
}

fn diffuse_orthonormality(p: &ModelParams) -> f64 {
    let n = p.diffuse.ncols();
    (p.diffuse.tr_mul(&p.diffuse) - DMatrix::identity(n, n)).abs().max()
}

/// Jointly refits per-target coefficients and updates the model mean and
/// bases under the L1 drift penalty toward the initial model.
pub fn finetune_model(
    targets: &[FitTarget],
    model0: &MorphableReflectanceModel,
    light_model: &LightingPcaModel,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(Error::Config("finetuning needs at least one target".into()));
    }
    let light = LightSpace::new(light_model);
    let mut refl = ReflectanceSpace::new(model0);
    let anchor = flatten(&refl.params);
    let zonal = ZonalTable::cached(&refl.config, light.order);
    let preps: Vec<PreparedTarget> = targets
        .iter()
        .map(|t| PreparedTarget::new(t, &refl, &zonal))
        .collect::<Result<_>>()?;

    let mut coeffs: Vec<Option<Coefficients>> = vec![None; targets.len()];
    let mut flat = anchor.clone();
    let mut opt = Adam::new(flat.len(), cfg.model_step);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let iters = if epoch == 0 { cfg.fit_iterations } else { cfg.refit_iterations };
        let settings = cfg.fit_settings(iters);
        let fits: Vec<FitResult> = preps
            .par_iter()
            .zip(&coeffs)
            .map(|(p, c)| fit_prepared(&refl, &light, p, &settings, c.as_ref()))
            .collect::<Result<_>>()?;
        let mean_l1 = fits.iter().map(|f| f.losses.l1).sum::<f64>() / fits.len() as f64;
        let mut current: Vec<Coefficients> = fits.iter().map(|f| f.coefficients()).collect();

        let mut total = 0.0;
        for step in 0..cfg.model_steps {
            let (t, grad) = model_gradient(&refl, &light, &preps, &current, &cfg.weights)?;
            if !t.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    iteration: epoch * cfg.model_steps + step,
                    trace: format!("model update loss {t:e}"),
                });
            }
            total = t;
            opt.step_prox_l1(&mut flat, &grad, &anchor, cfg.weights.upd);
            unflatten(&mut refl.params, &flat);
        }
        reorthonormalize(&mut refl.params, &mut current);
        flat = flatten(&refl.params);
        let ortho = diffuse_orthonormality(&refl.params);
        let upd = flat.iter().zip(&anchor).map(|(a, b)| (a - b).abs()).sum();
        log::info!("epoch {epoch}: mean L1 {mean_l1:.6e}, upd {upd:.4e}, orthonormality {ortho:.2e}");
        history.push(EpochStats {
            epoch,
            mean_l1,
            mean_total: total / targets.len() as f64,
            upd,
            orthonormality_error: ortho,
        });
        coeffs = current.into_iter().map(Some).collect();
    }
    Ok(FinetuneOutcome {
        model: refl.to_model(model0)?,
        coefficients: coeffs.into_iter().map(|c| c.expect("every epoch fits every target")).collect(),
        history,
    })
}


#[cfg(test)]
mod tests {
    use super::tests_support::setup;
    use super::*;

    #[test]
    fn loss_examples() {
        let img = Image::filled(4, 4, 3, 0.5);
        let skin = Mask::new(4, 4, true);
        assert_eq!(loss_l1(&img, &img, &skin).unwrap(), 0.0);
        let shifted = img.map(|v| v + 0.1);
        assert!((loss_l1(&shifted, &img, &skin).unwrap() - 0.1).abs() < 1e-6);
        assert_eq!(loss_l1(&shifted, &img, &Mask::new(4, 4, false)).unwrap(), 0.0);

        assert_eq!(loss_coef(&[0.0; 3], &[1.0; 3], &[0.0; 2], &[2.0; 2]), 0.0);
        assert!((loss_coef(&[1.0, 2.0], &[1.0, 2.0], &[0.0], &[1.0]) - 2.0).abs() < 1e-15);
        let a = loss_coef(&[0.3, -0.2], &[1.0, 0.5], &[], &[]);
        let b = loss_coef(&[0.6, -0.4], &[1.0, 0.5], &[], &[]);
        assert!((b - 4.0 * a).abs() < 1e-12);

        let mut sh = ShVector::constant(2, [0.7; 3]);
        assert_eq!(loss_light(&sh), 0.0);
        sh.channel_mut(2)[3] += 0.3;
        assert!((loss_light(&sh) - 2.0 * 0.09 / 3.0).abs() < 1e-12);
        assert!((loss_light(&sh.scaled(2.0)) - 4.0 * loss_light(&sh)).abs() < 1e-12);
    }

    #[test]
    fn loss_upd_examples() {
        let (model, _, _) = setup(4, 2, 2);
        assert_eq!(loss_upd(&model, &model).unwrap(), 0.0);
        let mut p = model.params();
        p.mean.add_scalar_mut(0.25);
        let shifted = model.with_params(&p).unwrap();
        let expected = 0.25 * p.mean.len() as f64;
        assert!((loss_upd(&shifted, &model).unwrap() - expected).abs() < 1e-4 * expected);
        let mut p = model.params();
        p.diffuse.column_mut(0).neg_mut();
        p.specular.column_mut(0).neg_mut();
        let flipped = model.with_params(&p).unwrap();
        let col = model.params();
        let norm = col.diffuse.column(0).abs().sum() + col.specular.column(0).abs().sum();
        assert!((loss_upd(&flipped, &model).unwrap() - 2.0 * norm).abs() < 1e-6 * norm);
    }

    #[test]
    fn render_is_linear_in_z_and_affine_in_beta() {
        let (model, light, geo) = setup(8, 3, 3);
        let c = Coefficients {
            beta: vec![0.1, -0.2, 0.05],
            gamma: vec![0.2, 0.0, -0.1],
            z: [1.0, 0.8, 1.2],
        };
        let a = render_image(&model, &light, &c, &geo).unwrap();
        let double = Coefficients {
            z: c.z.map(|z| 2.0 * z),
            ..c.clone()
        };
        let b = render_image(&model, &light, &double, &geo).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((2.0 * x - y).abs() <= 1e-6 * y.abs().max(1.0));
        }
        let with = |beta: Vec<f64>| Coefficients { beta, ..c.clone() };
        let r1 = render_image(&model, &light, &with(vec![0.1, 0.0, 0.0]), &geo).unwrap();
        let r2 = render_image(&model, &light, &with(vec![0.0, -0.2, 0.05]), &geo).unwrap();
        let r0 = render_image(&model, &light, &with(vec![0.0; 3]), &geo).unwrap();
        let r12 = render_image(&model, &light, &with(vec![0.1, -0.2, 0.05]), &geo).unwrap();
        for i in 0..r12.data().len() {
            let lhs = r12.data()[i] as f64;
            let rhs = r1.data()[i] as f64 + r2.data()[i] as f64 - r0.data()[i] as f64;
            assert!((lhs - rhs).abs() < 1e-6);
        }
    }

    #[test]
    fn fit_recovers_its_own_render() {
        let (model, light, geo) = setup(16, 3, 3);
        let truth = Coefficients {
            beta: model.sigmas_f64().iter().map(|s| 0.5 * s).collect(),
            gamma: light.sigmas_f64().iter().map(|s| -0.5 * s).collect(),
            z: [1.2; 3],
        };
        let image = render_image(&model, &light, &truth, &geo).unwrap();
        let target = FitTarget {
            image,
            skin: geo.coverage.clone(),
            geometry: geo,
        };
        // priors off, so the generating coefficients are a global minimizer
        let settings = FitSettings {
            weights: LossWeights {
                coef: 0.0,
                light: 0.0,
                ..LossWeights::default()
            },
            ..FitSettings::default()
        };
        let res = fit_image(&target, &model, &light, &settings).unwrap();
        let mean = target.image.data().iter().map(|v| *v as f64).sum::<f64>() / target.image.data().len() as f64;
        assert!(res.losses.l1 < 1e-3 * mean, "l1 = {} at mean {mean}", res.losses.l1);
    }

    #[test]
    fn target_directory_round_trip() {
        let (model, light, geo) = setup(6, 2, 2);
        let c = Coefficients::neutral(2, 2);
        let target = FitTarget {
            image: render_image(&model, &light, &c, &geo).unwrap(),
            skin: geo.coverage.clone(),
            geometry: geo,
        };
        let dir = tempfile::tempdir().unwrap();
        target.save_dir(dir.path()).unwrap();
        assert_eq!(FitTarget::load_dir(dir.path()).unwrap(), target);
    }

    #[test]
    fn huge_update_weight_freezes_the_model() {
        let (model, light, geo) = setup(8, 2, 2);
        let truth = Coefficients {
            beta: vec![0.0; 2],
            gamma: vec![0.0; 2],
            z: [1.0; 3],
        };
        let mut image = render_image(&model, &light, &truth, &geo).unwrap();
        image.data_mut().iter_mut().for_each(|v| *v *= 1.3);
        let target = FitTarget {
            image,
            skin: geo.coverage.clone(),
            geometry: geo,
        };
        let cfg = FinetuneConfig {
            weights: LossWeights {
                upd: 1e6,
                ..LossWeights::default()
            },
            epochs: 2,
            fit_iterations: 30,
            refit_iterations: 10,
            model_steps: 5,
            model_step: 1e-2,
            ..FinetuneConfig::default()
        };
        let out = finetune_model(&[target], &model, &light, &cfg).unwrap();
        let diff = out.model.params().l1_distance(&model.params());
        let max = flatten(&out.model.params())
            .iter()
            .zip(flatten(&model.params()))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max <= 1e-6, "max change {max}, total {diff}");
    }
}
