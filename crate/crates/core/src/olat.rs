//! Synthetic OLAT capture rigs, forward rendering, and per-texel inverse
//! rendering of reflectance parameters.
//!
//! The shading model is linear in the texel parameters, so every
//! observation contributes one row per color channel to a small linear
//! system in `3 + k_bp` unknowns. The primary estimator minimizes the
//! `<l,n>`-weighted L1 reconstruction loss plus a penalty on negative
//! parameters with Adam; [`nnls_texel`] solves the squared-error version
//! exactly and serves as the reference.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, Schedule};
use crate::brdf::{clamped_cos, BrdfConfig, Direction, ReflectanceTexel, Rgb, ShadingBasis};
use crate::error::{Error, Result};
use crate::maps::ReflectanceMaps;
use crate::nnls::{condition_number, nnls};
use crate::raster::{Image, Mask};

/// Threshold on `<l,n>` for a texel to count as lit.
pub const SHADOW_COS_THRESHOLD: f64 = 1e-3;

/// Largest extent of the hemisphere proxy's valid disk in UV units.
pub const HEMISPHERE_CAP_RADIUS: f64 = 0.8;

const CAMERA_DISTANCE: f64 = 8.0;
const LIGHT_DISTANCE: f64 = 6.0;
const VIEW_CONE_DEG: f64 = 30.0;
const LIGHT_CONE_DEG: f64 = 45.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProxyGeometry {
    /// Unit hemisphere height field over the UV square, valid on a disk.
    Hemisphere,
    /// Flat patch facing +Z.
    Plane,
}

impl FromStr for ProxyGeometry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hemisphere" => Ok(ProxyGeometry::Hemisphere),
            "plane" => Ok(ProxyGeometry::Plane),
            other => Err(Error::UnsupportedGeometry(other.to_string())),
        }
    }
}

/// Per-texel geometry of one capture: normals, and view and light
/// direction maps for every camera and flash.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptureRig {
    pub normals: Image,
    pub views: Vec<Image>,
    pub lights: Vec<Image>,
    /// Irradiance of every flash.
    pub irradiance: Rgb,
    pub valid: Mask,
}

#[inline]
fn dir_at(map: &Image, i: usize) -> Direction {
    let p = map.pixel(i);
    Direction::from_xyz(p[0] as f64, p[1] as f64, p[2] as f64)
        .unwrap_or_else(|_| Direction::z())
}

impl CaptureRig {
    pub fn width(&self) -> usize {
        self.normals.width()
    }

    pub fn height(&self) -> usize {
        self.normals.height()
    }

    pub fn texel_count(&self) -> usize {
        self.normals.pixel_count()
    }

    pub fn normal(&self, i: usize) -> Direction {
        dir_at(&self.normals, i)
    }

    pub fn view_dir(&self, view: usize, i: usize) -> Direction {
        dir_at(&self.views[view], i)
    }

    pub fn light_dir(&self, light: usize, i: usize) -> Direction {
        dir_at(&self.lights[light], i)
    }

    fn check(&self) -> Result<()> {
        let (w, h) = (self.width(), self.height());
        let ok = self
            .views
            .iter()
            .chain(&self.lights)
            .all(|m| m.width() == w && m.height() == h && m.channels() == 3)
            && self.normals.channels() == 3
            && self.valid.width() == w
            && self.valid.height() == h;
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch("capture rig maps differ in shape".into()))
        }
    }

    /// Horizontal mirror of the rig: maps are flipped and x components negated.
    pub fn mirrored(&self) -> CaptureRig {
        let mirror = |m: &Image| {
            let mut f = m.flip_horizontal();
            for i in 0..f.pixel_count() {
                f.pixel_mut(i)[0] = -f.pixel(i)[0];
            }
            f
        };
        CaptureRig {
            normals: mirror(&self.normals),
            views: self.views.iter().map(mirror).collect(),
            lights: self.lights.iter().map(mirror).collect(),
            irradiance: self.irradiance,
            valid: self.valid.flip_horizontal(),
        }
    }
}

fn cone_positions(rng: &mut ChaCha8Rng, count: usize, cone_deg: f64, distance: f64) -> Vec<Vector3<f64>> {
    let cos_max = cone_deg.to_radians().cos();
    (0..count)
        .map(|k| {
            // azimuth stratified, polar angle uniform in solid angle
            let phi = (k as f64 + rng.random::<f64>()) / count as f64 * 2.0 * std::f64::consts::PI;
            let cos_t = 1.0 - rng.random::<f64>() * (1.0 - cos_max);
            let theta = cos_t.acos();
            *Direction::from_spherical(theta, phi) * distance
        })
        .collect()
}

/// Builds a deterministic rig for a convex proxy surface.
pub fn make_rig(
    n_views: usize,
    n_lights: usize,
    resolution: usize,
    geometry: ProxyGeometry,
    seed: u64,
) -> Result<CaptureRig> {
    if n_views == 0 || n_lights == 0 {
        return Err(Error::Config("a rig needs at least one view and one light".into()));
    }
    if resolution == 0 {
        return Err(Error::Config("rig resolution must be positive".into()));
    }
    let (w, h) = (resolution, resolution);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cameras = cone_positions(&mut rng, n_views, VIEW_CONE_DEG, CAMERA_DISTANCE);
    let flashes = cone_positions(&mut rng, n_lights, LIGHT_CONE_DEG, LIGHT_DISTANCE);

    let mut points = vec![Vector3::zeros(); w * h];
    let mut normals = Image::new(w, h, 3);
    let mut valid = Mask::new(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64 * 2.0 - 1.0;
            let v = 1.0 - (y as f64 + 0.5) / h as f64 * 2.0;
            let i = y * w + x;
            let (p, n, ok) = match geometry {
                ProxyGeometry::Hemisphere => {
                    let r2 = u * u + v * v;
                    let ok = r2 <= HEMISPHERE_CAP_RADIUS * HEMISPHERE_CAP_RADIUS;
                    let z = (1.0 - r2.min(1.0)).sqrt();
                    let p = Vector3::new(u, v, z);
                    (p, if ok { p.normalize() } else { Vector3::z() }, ok)
                }
                ProxyGeometry::Plane => (Vector3::new(u, v, 0.0), Vector3::z(), true),
            };
            points[i] = p;
            valid.set(x, y, ok);
            for c in 0..3 {
                normals.pixel_mut(i)[c] = n[c] as f32;
            }
        }
    }
    let direction_map = |origin: &Vector3<f64>| {
        let mut img = Image::new(w, h, 3);
        for (i, p) in points.iter().enumerate() {
            let d = (origin - p).normalize();
            for c in 0..3 {
                img.pixel_mut(i)[c] = d[c] as f32;
            }
        }
        img
    };
    Ok(CaptureRig {
        normals,
        views: cameras.iter().map(direction_map).collect(),
        lights: flashes.iter().map(direction_map).collect(),
        irradiance: [1.0; 3],
        valid,
    })
}

/// Lit texels for flash `light` on a convex surface.
pub fn shadow_mask_convex(rig: &CaptureRig, light: usize) -> Mask {
    let bits = (0..rig.texel_count())
        .map(|i| {
            rig.valid.at(i) && clamped_cos(&rig.light_dir(light, i), &rig.normal(i)) > SHADOW_COS_THRESHOLD
        })
        .collect();
    Mask::from_bits(rig.width(), rig.height(), bits).expect("mask size matches rig")
}

/// One linear-space OLAT observation in UV space.
#[derive(Clone, Debug, PartialEq)]
pub struct OlatFrame {
    pub view: usize,
    pub light: usize,
    pub image: Image,
    pub shadow: Mask,
}

pub fn render_olat(maps: &ReflectanceMaps, rig: &CaptureRig, view: usize, light: usize) -> Result<OlatFrame> {
    rig.check()?;
    if maps.width() != rig.width() || maps.height() != rig.height() {
        return Err(Error::DimensionMismatch(format!(
            "maps {}x{} vs rig {}x{}",
            maps.width(),
            maps.height(),
            rig.width(),
            rig.height()
        )));
    }
    if view >= rig.views.len() || light >= rig.lights.len() {
        return Err(Error::Config(format!("no view {view} / light {light} in rig")));
    }
    let shadow = shadow_mask_convex(rig, light);
    let mut image = Image::new(rig.width(), rig.height(), 3);
    for i in 0..rig.texel_count() {
        if !shadow.at(i) {
            continue;
        }
        let basis = ShadingBasis::new(&maps.config, &rig.light_dir(light, i), &rig.view_dir(view, i), &rig.normal(i));
        let s = basis.shade(&maps.texel(i), &rig.irradiance);
        for (dst, v) in image.pixel_mut(i).iter_mut().zip(s) {
            *dst = v as f32;
        }
    }
    Ok(OlatFrame {
        view,
        light,
        image,
        shadow,
    })
}

/// Every (view, light) frame of the rig.
pub fn render_all(maps: &ReflectanceMaps, rig: &CaptureRig) -> Result<Vec<OlatFrame>> {
    let pairs: Vec<(usize, usize)> = (0..rig.views.len())
        .flat_map(|v| (0..rig.lights.len()).map(move |l| (v, l)))
        .collect();
    pairs
        .par_iter()
        .map(|&(v, l)| render_olat(maps, rig, v, l))
        .collect()
}

/// A single texel measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub rgb: Rgb,
    pub light: Direction,
    pub view: Direction,
    pub normal: Direction,
    pub shadow: bool,
    pub irradiance: Rgb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Adam,
    Nnls,
}

impl FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Solver::Adam),
            "nnls" => Ok(Solver::Nnls),
            other => Err(Error::Config(format!("unknown solver {other:?} (adam|nnls)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationSettings {
    pub w_reg: f64,
    pub iterations: usize,
    pub step_size: f64,
    /// Final learning rate as a fraction of `step_size` (cosine decay).
    pub step_floor: f64,
    pub flip_probability: f64,
    pub seed: u64,
    pub min_observations: usize,
    /// Texels whose weighted design matrix is worse conditioned are
    /// treated as not estimable.
    pub max_condition: f64,
    pub solver: Solver,
}

impl Default for EstimationSettings {
    fn default() -> Self {
        EstimationSettings {
            w_reg: 100.0,
            iterations: 2000,
            step_size: 5e-3,
            step_floor: 0.01,
            flip_probability: 0.5,
            seed: 0,
            min_observations: 6,
            max_condition: 1e6,
            solver: Solver::Adam,
        }
    }
}

impl EstimationSettings {
    pub fn validate(&self) -> Result<()> {
        let ok = self.w_reg > 0.0
            && self.iterations > 0
            && self.step_size > 0.0
            && (0.0..=1.0).contains(&self.step_floor)
            && (0.0..=1.0).contains(&self.flip_probability)
            && self.min_observations > 0
            && self.max_condition > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid estimation settings {self:?}")))
        }
    }
}

/// Precomputed linear model of one texel's observations.
#[derive(Clone, Debug)]
pub struct TexelProblem {
    lobes: usize,
    /// `<l,n>` weight of each usable observation.
    weights: Vec<f64>,
    targets: Vec<Rgb>,
    /// `E_ch <l,n> / pi` per observation and channel.
    diffuse: Vec<Rgb>,
    /// `E_ch f_i <h,n>^p_i`, row-major `[obs][channel][lobe]`.
    lobe_terms: Vec<f64>,
}

impl TexelProblem {
    pub fn new(obs: &[Observation], cfg: &BrdfConfig) -> Self {
        let k = cfg.lobe_count();
        let mut p = TexelProblem {
            lobes: k,
            weights: Vec::new(),
            targets: Vec::new(),
            diffuse: Vec::new(),
            lobe_terms: Vec::new(),
        };
        for o in obs {
            let ln = clamped_cos(&o.light, &o.normal);
            if !o.shadow || ln <= 0.0 || o.normal.dot(&o.view) <= 0.0 {
                continue;
            }
            let basis = ShadingBasis::new(cfg, &o.light, &o.view, &o.normal);
            p.weights.push(ln);
            p.targets.push(o.rgb);
            p.diffuse.push(o.irradiance.map(|e| e * basis.diffuse));
            for ch in 0..3 {
                p.lobe_terms.extend(basis.lobes.iter().map(|b| o.irradiance[ch] * b));
            }
        }
        p
    }

    pub fn observation_count(&self) -> usize {
        self.weights.len()
    }

    pub fn param_count(&self) -> usize {
        3 + self.lobes
    }

    #[inline]
    fn predict(&self, o: usize, ch: usize, theta: &[f64]) -> f64 {
        let terms = &self.lobe_terms[(o * 3 + ch) * self.lobes..(o * 3 + ch + 1) * self.lobes];
        theta[ch] * self.diffuse[o][ch] + terms.iter().zip(&theta[3..]).map(|(t, w)| t * w).sum::<f64>()
    }

    /// `sum_obs <l,n> * ||pred - target||_1`.
    pub fn recon_loss(&self, theta: &[f64]) -> f64 {
        (0..self.observation_count())
            .map(|o| self.weights[o] * (0..3).map(|ch| (self.predict(o, ch, theta) - self.targets[o][ch]).abs()).sum::<f64>())
            .sum()
    }

    /// Reconstruction loss plus the penalty `-w_reg * sum(theta[theta < 0])`.
    pub fn objective(&self, theta: &[f64], w_reg: f64) -> f64 {
        self.recon_loss(theta) + w_reg * theta.iter().map(|t| (-t).max(0.0)).sum::<f64>()
    }

    /// Subgradient of [`objective`](Self::objective), accumulated into `grad`.
    pub fn accumulate_gradient(&self, theta: &[f64], w_reg: f64, grad: &mut [f64]) {
        let k = self.lobes;
        for o in 0..self.observation_count() {
            for ch in 0..3 {
                let r = self.predict(o, ch, theta) - self.targets[o][ch];
                if r == 0.0 {
                    continue;
                }
                let s = self.weights[o] * r.signum();
                grad[ch] += s * self.diffuse[o][ch];
                let terms = &self.lobe_terms[(o * 3 + ch) * k..(o * 3 + ch + 1) * k];
                for (g, t) in grad[3..].iter_mut().zip(terms) {
                    *g += s * t;
                }
            }
        }
        for (g, t) in grad.iter_mut().zip(theta) {
            if *t < 0.0 {
                *g -= w_reg;
            }
        }
    }

    /// Weighted design matrix and right-hand side, one row per observation
    /// and channel, each scaled by `<l,n>`.
    pub fn linear_system(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.observation_count() * 3;
        let k = self.lobes;
        let mut a = DMatrix::zeros(n, 3 + k);
        let mut b = DVector::zeros(n);
        for o in 0..self.observation_count() {
            let w = self.weights[o];
            for ch in 0..3 {
                let row = o * 3 + ch;
                a[(row, ch)] = w * self.diffuse[o][ch];
                for i in 0..k {
                    a[(row, 3 + i)] = w * self.lobe_terms[(o * 3 + ch) * k + i];
                }
                b[row] = w * self.targets[o][ch];
            }
        }
        (a, b)
    }

    pub fn condition(&self) -> f64 {
        if self.observation_count() == 0 {
            return f64::INFINITY;
        }
        condition_number(&self.linear_system().0)
    }

    fn initial_guess(&self) -> Vec<f64> {
        vec![0.0; self.param_count()]
    }
}

fn check_observations(problem: &TexelProblem, settings: &EstimationSettings) -> Result<()> {
    if problem.observation_count() < settings.min_observations {
        return Err(Error::InsufficientObservations {
            got: problem.observation_count(),
            needed: settings.min_observations,
        });
    }
    Ok(())
}

fn adam_for(settings: &EstimationSettings, len: usize) -> Adam {
    Adam::new(len, settings.step_size).with_schedule(Schedule::Cosine {
        total: settings.iterations,
        floor: settings.step_floor,
    })
}

fn adam_solve(problem: &TexelProblem, settings: &EstimationSettings) -> Vec<f64> {
    let mut theta = problem.initial_guess();
    let mut opt = adam_for(settings, theta.len());
    let mut grad = vec![0.0; theta.len()];
    for _ in 0..settings.iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        problem.accumulate_gradient(&theta, settings.w_reg, &mut grad);
        opt.step(&mut theta, &grad);
    }
    theta
}

/// Estimates one texel by Adam on the weighted L1 loss with the
/// non-negativity penalty.
pub fn estimate_texel(obs: &[Observation], cfg: &BrdfConfig, settings: &EstimationSettings) -> Result<ReflectanceTexel> {
    let problem = TexelProblem::new(obs, cfg);
    check_observations(&problem, settings)?;
    Ok(ReflectanceTexel::from_params(&adam_solve(&problem, settings)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NnlsTexel {
    pub texel: ReflectanceTexel,
    pub condition: f64,
    pub ill_conditioned: bool,
    pub residual_norm: f64,
}

/// Exact non-negative least-squares solution of the weighted system.
pub fn nnls_texel(obs: &[Observation], cfg: &BrdfConfig, settings: &EstimationSettings) -> Result<NnlsTexel> {
    let problem = TexelProblem::new(obs, cfg);
    check_observations(&problem, settings)?;
    Ok(nnls_problem(&problem, settings))
}

fn nnls_problem(problem: &TexelProblem, settings: &EstimationSettings) -> NnlsTexel {
    let (a, b) = problem.linear_system();
    let condition = condition_number(&a);
    let sol = nnls(&a, &b);
    NnlsTexel {
        texel: ReflectanceTexel::from_params(sol.x.as_slice()),
        condition,
        ill_conditioned: !(condition <= settings.max_condition),
        residual_norm: sol.residual_norm,
    }
}

/// Gathers the observations of texel `i` from a set of frames.
pub fn texel_observations(frames: &[OlatFrame], rig: &CaptureRig, i: usize) -> Vec<Observation> {
    let normal = rig.normal(i);
    frames
        .iter()
        .map(|f| {
            let px = f.image.pixel(i);
            Observation {
                rgb: [px[0] as f64, px[1] as f64, px[2] as f64],
                light: rig.light_dir(f.light, i),
                view: rig.view_dir(f.view, i),
                normal,
                shadow: f.shadow.at(i),
                irradiance: rig.irradiance,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TexelStatus {
    Estimated,
    /// Outside the rig's valid region.
    Outside,
    InsufficientObservations,
    IllConditioned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TexelDiagnostic {
    pub observations: usize,
    pub condition: f64,
    /// Weighted L1 reconstruction loss at the returned parameters.
    pub recon_loss: f64,
    pub status: TexelStatus,
}

#[derive(Clone, Debug)]
pub struct Estimate {
    pub maps: ReflectanceMaps,
    pub diagnostics: Vec<TexelDiagnostic>,
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over seed ^ index
    let mut z = (seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Jointly optimizes a mirrored texel pair. On each iteration, with
/// probability `flip_probability`, each texel's parameters are scored
/// against its partner's observations.
fn adam_solve_pair(a: &TexelProblem, b: &TexelProblem, settings: &EstimationSettings, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut ta = a.initial_guess();
    let mut tb = b.initial_guess();
    let mut oa = adam_for(settings, ta.len());
    let mut ob = adam_for(settings, tb.len());
    let mut ga = vec![0.0; ta.len()];
    let mut gb = vec![0.0; tb.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..settings.iterations {
        let flip = rng.random::<f64>() < settings.flip_probability;
        let (pa, pb) = if flip { (b, a) } else { (a, b) };
        ga.iter_mut().for_each(|g| *g = 0.0);
        gb.iter_mut().for_each(|g| *g = 0.0);
        pa.accumulate_gradient(&ta, settings.w_reg, &mut ga);
        pb.accumulate_gradient(&tb, settings.w_reg, &mut gb);
        oa.step(&mut ta, &ga);
        ob.step(&mut tb, &gb);
    }
    (ta, tb)
}

enum Outcome {
    Solved(Vec<f64>, f64),
    Failed(TexelStatus, usize, f64),
}

/// Estimates reflectance maps from a full OLAT set.
pub fn estimate_maps(frames: &[OlatFrame], rig: &CaptureRig, cfg: &BrdfConfig, settings: &EstimationSettings) -> Result<Estimate> {
    settings.validate()?;
    rig.check()?;
    for f in frames {
        if f.image.width() != rig.width() || f.image.height() != rig.height() || f.image.channels() != 3 {
            return Err(Error::DimensionMismatch(format!(
                "frame (view {}, light {}) does not match the rig",
                f.view, f.light
            )));
        }
        if f.view >= rig.views.len() || f.light >= rig.lights.len() {
            return Err(Error::Config(format!(
                "frame references view {} / light {} outside the rig",
                f.view, f.light
            )));
        }
    }
    let (w, h) = (rig.width(), rig.height());
    let n = w * h;
    let mirror = |i: usize| (i / w) * w + (w - 1 - i % w);

    // Per-texel problems and their conditioning, computed once.
    let prepared: Vec<Option<(TexelProblem, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            if !rig.valid.at(i) {
                return None;
            }
            let p = TexelProblem::new(&texel_observations(frames, rig, i), cfg);
            let cond = if p.observation_count() >= settings.min_observations {
                p.condition()
            } else {
                f64::INFINITY
            };
            Some((p, cond))
        })
        .collect();
    let usable = |i: usize| match &prepared[i] {
        Some((p, c)) => p.observation_count() >= settings.min_observations && *c <= settings.max_condition,
        None => false,
    };

    // Work units are mirrored pairs (or a lone center column texel).
    let units: Vec<(usize, Option<usize>)> = (0..n)
        .filter(|&i| i <= mirror(i))
        .map(|i| (i, (mirror(i) != i).then(|| mirror(i))))
        .collect();

    let solve_single = |i: usize| -> Outcome {
        match &prepared[i] {
            None => Outcome::Failed(TexelStatus::Outside, 0, f64::INFINITY),
            Some((p, c)) => {
                if p.observation_count() < settings.min_observations {
                    Outcome::Failed(TexelStatus::InsufficientObservations, p.observation_count(), *c)
                } else if !(*c <= settings.max_condition) {
                    Outcome::Failed(TexelStatus::IllConditioned, p.observation_count(), *c)
                } else {
                    let theta = match settings.solver {
                        Solver::Adam => adam_solve(p, settings),
                        Solver::Nnls => nnls_problem(p, settings).texel.to_params(),
                    };
                    Outcome::Solved(theta, *c)
                }
            }
        }
    };

    let results: Vec<Vec<(usize, Outcome)>> = units
        .par_iter()
        .enumerate()
        .map(|(u, &(i, partner))| match partner {
            Some(j)
                if settings.solver == Solver::Adam
                    && settings.flip_probability > 0.0
                    && usable(i)
                    && usable(j) =>
            {
                let (pi, ci) = prepared[i].as_ref().expect("usable");
                let (pj, cj) = prepared[j].as_ref().expect("usable");
                let (ti, tj) = adam_solve_pair(pi, pj, settings, mix_seed(settings.seed, u as u64));
                vec![(i, Outcome::Solved(ti, *ci)), (j, Outcome::Solved(tj, *cj))]
            }
            Some(j) => vec![(i, solve_single(i)), (j, solve_single(j))],
            None => vec![(i, solve_single(i))],
        })
        .collect();

    let mut maps = ReflectanceMaps::zeros(cfg.clone(), w, h);
    let mut diagnostics = vec![
        TexelDiagnostic {
            observations: 0,
            condition: f64::INFINITY,
            recon_loss: 0.0,
            status: TexelStatus::Outside,
        };
        n
    ];
    let mut estimated = vec![false; n];
    for (i, outcome) in results.into_iter().flatten() {
        match outcome {
            Outcome::Solved(theta, cond) => {
                let p = &prepared[i].as_ref().expect("solved texels are prepared").0;
                diagnostics[i] = TexelDiagnostic {
                    observations: p.observation_count(),
                    condition: cond,
                    recon_loss: p.recon_loss(&theta),
                    status: TexelStatus::Estimated,
                };
                maps.set_texel(i, &ReflectanceTexel::from_params(&theta));
                estimated[i] = true;
            }
            Outcome::Failed(status, count, cond) => {
                diagnostics[i] = TexelDiagnostic {
                    observations: count,
                    condition: cond,
                    recon_loss: 0.0,
                    status,
                };
            }
        }
    }
    maps.valid = Mask::from_bits(w, h, estimated.clone())?;

    // Texels inside the rig that could not be estimated take their mirror's
    // estimate when available; everything else takes the map mean.
    let mut filled = maps.clone();
    filled.fill_invalid_with_mean();
    for i in 0..n {
        if !estimated[i] && rig.valid.at(i) && estimated[mirror(i)] {
            filled.set_texel(i, &maps.texel(mirror(i)));
        }
    }
    Ok(Estimate {
        maps: filled,
        diagnostics,
    })
}

/// Camera extrinsics in the model frame from a head pose.
pub fn camera_from_pose(r: &Matrix3<f64>, t: &Vector3<f64>) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if !(orth < 1e-6) || !((det - 1.0).abs() < 1e-6) {
        return Err(Error::NotRotation(format!("|R^T R - I| = {orth:e}, det = {det}")));
    }
    let rt = r.transpose();
    Ok((rt, -(rt * t)))
}

/// Per-texel relative parameter error `||est - truth|| / ||truth||`.
pub fn relative_errors(estimate: &ReflectanceMaps, truth: &ReflectanceMaps, mask: &Mask) -> Vec<f64> {
    (0..truth.texel_count())
        .filter(|&i| mask.at(i))
        .map(|i| {
            let a = estimate.texel(i).to_params();
            let b = truth.texel(i).to_params();
            let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
            num / den.max(1e-12)
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let mid = v.len() / 2;
    if v.len() % 2 == 0 {
        0.5 * (v[mid - 1] + v[mid])
    } else {
        v[mid]
    }
}

/// Smooth synthetic reflectance maps with spatially varying specular
/// intensity and shininess. With `symmetric`, maps are mirror-symmetric
/// about the vertical center line.
pub fn synthetic_maps(cfg: &BrdfConfig, width: usize, height: usize, seed: u64, symmetric: bool) -> ReflectanceMaps {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.lobe_count();
    let base: Rgb = [0.55 + 0.2 * rng.random::<f64>(), 0.35 + 0.15 * rng.random::<f64>(), 0.25 + 0.15 * rng.random::<f64>()];
    let freq: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| (rng.random_range(0.5..2.5), rng.random_range(0.5..2.5), rng.random_range(0.0..6.3)))
        .collect();
    let spec_scale = 0.15 + 0.15 * rng.random::<f64>();
    let mut t = ReflectanceTexel::zero(k);
    ReflectanceMaps::from_fn(cfg.clone(), width, height, |x, y| {
        let mut u = (x as f64 + 0.5) / width as f64 * 2.0 - 1.0;
        let v = (y as f64 + 0.5) / height as f64 * 2.0 - 1.0;
        if symmetric {
            u = u.abs();
        }
        let wave = |(a, b, ph): (f64, f64, f64)| (a * u * 3.0 + b * v * 3.0 + ph).sin();
        for ch in 0..3 {
            t.diffuse[ch] = base[ch] * (1.0 + 0.25 * wave(freq[ch % 3]));
        }
        // shininess position in [0, 1] selects which lobes dominate
        let shine = 0.5 + 0.5 * wave(freq[3]);
        let (a, b, ph) = freq[1];
        let intensity = spec_scale * (1.0 + 0.5 * wave((b, a, ph + 1.0)));
        for i in 0..k {
            let center = if k == 1 { 0.5 } else { i as f64 / (k - 1) as f64 };
            let d = (shine - center) * k as f64;
            t.weights[i] = intensity * (0.15 + (-d * d).exp());
        }
        t.clone()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FrameEntry {
    view: usize,
    light: usize,
    image: String,
    shadow: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OlatManifest {
    width: usize,
    height: usize,
    exponents: Vec<f64>,
    irradiance: Rgb,
    normals: String,
    valid: String,
    views: Vec<String>,
    lights: Vec<String>,
    frames: Vec<FrameEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truth: Option<String>,
}

/// An OLAT capture on disk: rig, lobe configuration, and frames.
#[derive(Clone, Debug, PartialEq)]
pub struct OlatSet {
    pub config: BrdfConfig,
    pub rig: CaptureRig,
    pub frames: Vec<OlatFrame>,
    /// Ground-truth maps, present for synthetic sets.
    pub truth: Option<ReflectanceMaps>,
}

impl OlatSet {
    pub const MANIFEST: &'static str = "rig.json";

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = OlatManifest {
            width: self.rig.width(),
            height: self.rig.height(),
            exponents: self.config.exponents().to_vec(),
            irradiance: self.rig.irradiance,
            normals: "normals.pfm".into(),
            valid: "valid.png".into(),
            views: (0..self.rig.views.len()).map(|i| format!("view_{i:02}.pfm")).collect(),
            lights: (0..self.rig.lights.len()).map(|j| format!("light_{j:02}.pfm")).collect(),
            frames: self
                .frames
                .iter()
                .map(|f| FrameEntry {
                    view: f.view,
                    light: f.light,
                    image: format!("frame_v{:02}_l{:02}.pfm", f.view, f.light),
                    shadow: format!("shadow_v{:02}_l{:02}.png", f.view, f.light),
                })
                .collect(),
            truth: self.truth.as_ref().map(|_| "truth".into()),
        };
        self.rig.normals.write_pfm(dir.join(&manifest.normals))?;
        self.rig.valid.write_png(dir.join(&manifest.valid))?;
        for (img, name) in self.rig.views.iter().zip(&manifest.views) {
            img.write_pfm(dir.join(name))?;
        }
        for (img, name) in self.rig.lights.iter().zip(&manifest.lights) {
            img.write_pfm(dir.join(name))?;
        }
        for (f, e) in self.frames.iter().zip(&manifest.frames) {
            f.image.write_pfm(dir.join(&e.image))?;
            f.shadow.write_png(dir.join(&e.shadow))?;
        }
        if let (Some(t), Some(name)) = (&self.truth, &manifest.truth) {
            t.save_dir(dir.join(name))?;
        }
        crate::manifest::write_json(dir.join(Self::MANIFEST), &manifest)
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let m: OlatManifest = crate::manifest::read_json(dir.join(Self::MANIFEST))?;
        let config = BrdfConfig::new(m.exponents.clone())?;
        let read_map = |name: &str| -> Result<Image> {
            let img = Image::read_pfm(dir.join(name))?;
            if img.width() != m.width || img.height() != m.height || img.channels() != 3 {
                return Err(Error::Format(format!("{name}: expected {}x{} RGB", m.width, m.height)));
            }
            Ok(img)
        };
        let existing = |name: &str| -> Result<PathBuf> {
            let p = dir.join(name);
            if p.exists() {
                Ok(p)
            } else {
                Err(Error::Format(format!("missing file {} listed in {}", p.display(), Self::MANIFEST)))
            }
        };
        let rig = CaptureRig {
            normals: read_map(&m.normals)?,
            views: m.views.iter().map(|v| read_map(v)).collect::<Result<_>>()?,
            lights: m.lights.iter().map(|l| read_map(l)).collect::<Result<_>>()?,
            irradiance: m.irradiance,
            valid: Mask::read_png(existing(&m.valid)?)?,
        };
        rig.check().map_err(|e| Error::Format(e.to_string()))?;
        let frames = m
            .frames
            .iter()
            .map(|e| {
                if e.view >= rig.views.len() || e.light >= rig.lights.len() {
                    return Err(Error::Format(format!("frame {} references a missing view or light", e.image)));
                }
                existing(&e.image)?;
                let shadow = Mask::read_png(existing(&e.shadow)?)?;
                Ok(OlatFrame {
                    view: e.view,
                    light: e.light,
                    image: read_map(&e.image)?,
                    shadow,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let truth = match &m.truth {
            Some(t) if dir.join(t).exists() => Some(ReflectanceMaps::load_dir(dir.join(t))?),
            _ => None,
        };
        Ok(OlatSet {
            config,
            rig,
            frames,
            truth,
        })
    }
}
