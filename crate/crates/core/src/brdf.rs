//! Reflectance representation and pointwise shading.
//!
//! A texel carries an RGB diffuse color `c` and one weight per Blinn-Phong
//! lobe. The BRDF is `c/pi + sum_i w_i f_i <h,n>^p_i / <l,n>` where `f_i`
//! normalizes lobe `i` to unit hemispherical integral at normal incidence.

use std::f64::consts::PI;
use std::ops::Deref;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;

/// Threshold on `<l,n>` below which the BRDF value itself is undefined.
pub const GRAZING_EPSILON: f64 = 1e-4;

/// Forward display-to-linear exponent.
pub const DISPLAY_GAMMA: f64 = 1.2;

pub type Rgb = [f64; 3];

/// Unit 3-vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Direction(Vector3<f64>);

impl Direction {
    /// Normalizes `v`; fails on (near-)zero input.
    pub fn new(v: Vector3<f64>) -> Result<Self> {
        let norm = v.norm();
        if !(norm > 1e-12) || !norm.is_finite() {
            return Err(Error::DegenerateDirection("cannot normalize a zero vector"));
        }
        Ok(Direction(v / norm))
    }

    pub fn from_xyz(x: f64, y: f64, z: f64) -> Result<Self> {
        Self::new(Vector3::new(x, y, z))
    }

    /// Wraps a vector already known to be unit length.
    pub fn new_unchecked(v: Vector3<f64>) -> Self {
        debug_assert!((v.norm() - 1.0).abs() < 1e-6, "non-unit direction {v:?}");
        Direction(v)
    }

    pub fn z() -> Self {
        Direction(Vector3::z())
    }

    /// Direction with polar angle `theta` from +Z and azimuth `phi`.
    pub fn from_spherical(theta: f64, phi: f64) -> Self {
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        Direction(Vector3::new(st * cp, st * sp, ct))
    }

    pub fn as_vector(&self) -> &Vector3<f64> {
        &self.0
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.0.x, self.0.y, self.0.z]
    }
}

impl Deref for Direction {
    type Target = Vector3<f64>;

    fn deref(&self) -> &Vector3<f64> {
        &self.0
    }
}

/// `max(0, a.b)`.
#[inline]
pub fn clamped_cos(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.dot(b).max(0.0)
}

/// Energy normalization factor of a Blinn-Phong lobe with exponent `p`.
pub fn normalization_factor(p: f64) -> Result<f64> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::Domain(format!("specular exponent must be positive, got {p}")));
    }
    Ok((p + 2.0) / (4.0 * PI * (2.0 - (-p / 2.0).exp2())))
}

pub fn half_vector(l: &Direction, v: &Direction) -> Result<Direction> {
    let sum = l.0 + v.0;
    if sum.norm() < 1e-12 {
        return Err(Error::DegenerateDirection("light and view are antiparallel"));
    }
    Ok(Direction(sum.normalize()))
}

/// Mirror of `v` about `n`.
pub fn reflect_vector(n: &Direction, v: &Direction) -> Result<Direction> {
    let nv = n.dot(v);
    if nv <= 0.0 {
        return Err(Error::BackFacing(nv));
    }
    Direction::new(2.0 * nv * n.0 - v.0)
}

/// Lobe exponents shared by every texel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BrdfConfig {
    exponents: Vec<f64>,
    factors: Vec<f64>,
}

impl BrdfConfig {
    pub fn new(exponents: Vec<f64>) -> Result<Self> {
        if exponents.is_empty() {
            return Err(Error::Config("at least one Blinn-Phong lobe is required".into()));
        }
        if exponents.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "exponents must be strictly increasing: {exponents:?}"
            )));
        }
        let factors = exponents
            .iter()
            .map(|&p| normalization_factor(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(BrdfConfig { exponents, factors })
    }

    pub fn exponents(&self) -> &[f64] {
        &self.exponents
    }

    pub fn factors(&self) -> &[f64] {
        &self.factors
    }

    pub fn lobe_count(&self) -> usize {
        self.exponents.len()
    }

    /// Parameters per texel: 3 diffuse channels plus one weight per lobe.
    pub fn params_per_texel(&self) -> usize {
        3 + self.exponents.len()
    }
}

impl Default for BrdfConfig {
    fn default() -> Self {
        BrdfConfig::new(vec![1.0, 8.0, 64.0]).expect("default exponents are valid")
    }
}

impl TryFrom<Vec<f64>> for BrdfConfig {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        BrdfConfig::new(v)
    }
}

impl From<BrdfConfig> for Vec<f64> {
    fn from(c: BrdfConfig) -> Vec<f64> {
        c.exponents
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReflectanceTexel {
    pub diffuse: Rgb,
    pub weights: Vec<f64>,
}

impl ReflectanceTexel {
    pub fn new(diffuse: Rgb, weights: Vec<f64>) -> Self {
        ReflectanceTexel { diffuse, weights }
    }

    pub fn zero(lobes: usize) -> Self {
        ReflectanceTexel {
            diffuse: [0.0; 3],
            weights: vec![0.0; lobes],
        }
    }

    /// Flattened `[c_r, c_g, c_b, w_1, ..., w_k]`.
    pub fn to_params(&self) -> Vec<f64> {
        let mut p = self.diffuse.to_vec();
        p.extend_from_slice(&self.weights);
        p
    }

    pub fn from_params(p: &[f64]) -> Self {
        ReflectanceTexel {
            diffuse: [p[0], p[1], p[2]],
            weights: p[3..].to_vec(),
        }
    }

    fn check_lobes(&self, cfg: &BrdfConfig) {
        assert_eq!(
            self.weights.len(),
            cfg.lobe_count(),
            "texel weight count does not match the lobe configuration"
        );
    }
}

/// Pointwise BRDF value; undefined at grazing incidence.
pub fn eval_brdf(
    t: &ReflectanceTexel,
    cfg: &BrdfConfig,
    l: &Direction,
    v: &Direction,
    n: &Direction,
) -> Result<Rgb> {
    t.check_lobes(cfg);
    let ln = clamped_cos(l, n);
    if ln <= GRAZING_EPSILON {
        return Err(Error::Grazing(ln));
    }
    let h = half_vector(l, v)?;
    let hn = clamped_cos(&h, n);
    let spec: f64 = lobe_terms(cfg, hn).zip(&t.weights).map(|(s, w)| w * s).sum::<f64>() / ln;
    Ok(t.diffuse.map(|c| c / PI + spec))
}

/// `f_i <h,n>^p_i` for every lobe.
fn lobe_terms(cfg: &BrdfConfig, hn: f64) -> impl Iterator<Item = f64> + '_ {
    cfg.exponents
        .iter()
        .zip(&cfg.factors)
        .map(move |(&p, &f)| if hn > 0.0 { f * hn.powf(p) } else { 0.0 })
}

/// Coefficients of the shading equation, which is linear in the texel:
/// `s_ch = E_ch * (c_ch * diffuse + sum_i w_i * lobes[i])`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadingBasis {
    pub diffuse: f64,
    pub lobes: Vec<f64>,
}

impl ShadingBasis {
    pub fn new(cfg: &BrdfConfig, l: &Direction, v: &Direction, n: &Direction) -> Self {
        let ln = clamped_cos(l, n);
        let hn = match half_vector(l, v) {
            Ok(h) => clamped_cos(&h, n),
            Err(_) => 0.0,
        };
        ShadingBasis {
            diffuse: ln / PI,
            lobes: lobe_terms(cfg, hn).collect(),
        }
    }

    pub fn shade(&self, t: &ReflectanceTexel, irradiance: &Rgb) -> Rgb {
        let spec: f64 = self.lobes.iter().zip(&t.weights).map(|(s, w)| s * w).sum();
        [0, 1, 2].map(|ch| irradiance[ch] * (t.diffuse[ch] * self.diffuse + spec))
    }
}

/// Shading under a directional light of irradiance `e`. Never divides, so
/// it is defined for every configuration of unit directions.
pub fn shade_directional(
    t: &ReflectanceTexel,
    cfg: &BrdfConfig,
    e: &Rgb,
    l: &Direction,
    v: &Direction,
    n: &Direction,
) -> Rgb {
    t.check_lobes(cfg);
    ShadingBasis::new(cfg, l, v, n).shade(t, e)
}

fn check_nonnegative(img: &Image) -> Result<()> {
    match img.data().iter().find(|v| !(**v >= 0.0)) {
        Some(v) => Err(Error::Domain(format!("pixel value {v} is negative or NaN"))),
        None => Ok(()),
    }
}

#[inline]
pub fn display_to_linear_value(x: f64) -> f64 {
    x.powf(DISPLAY_GAMMA)
}

#[inline]
pub fn linear_to_display_value(x: f64) -> f64 {
    x.powf(1.0 / DISPLAY_GAMMA)
}

pub fn display_to_linear(img: &Image) -> Result<Image> {
    check_nonnegative(img)?;
    Ok(img.map(|v| display_to_linear_value(v as f64) as f32))
}

pub fn linear_to_display(img: &Image) -> Result<Image> {
    check_nonnegative(img)?;
    Ok(img.map(|v| linear_to_display_value(v as f64) as f32))
}

/// Removes the room-light contribution from a flash image; both inputs are
/// display-space, the result is linear and clamped at zero.
pub fn olat_difference(flash: &Image, roomlit: &Image) -> Result<Image> {
    flash.ensure_same_shape(roomlit, "flash vs room-lit image")?;
    check_nonnegative(flash)?;
    check_nonnegative(roomlit)?;
    let data = flash
        .data()
        .iter()
        .zip(roomlit.data())
        .map(|(&f, &r)| {
            (display_to_linear_value(f as f64) - display_to_linear_value(r as f64)).max(0.0) as f32
        })
        .collect();
    Image::from_vec(flash.width(), flash.height(), flash.channels(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn d(x: f64, y: f64, z: f64) -> Direction {
        Direction::from_xyz(x, y, z).unwrap()
    }

    #[test]
    fn normalization_factor_values() {
        assert!((normalization_factor(1.0).unwrap() - 0.18467).abs() < 1e-4);
        assert!((normalization_factor(8.0).unwrap() - 0.41072).abs() < 1e-4);
        assert!((normalization_factor(64.0).unwrap() - 2.62606).abs() < 1e-4);
        assert!(normalization_factor(0.0).is_err());
        assert!(normalization_factor(-3.0).is_err());
    }

    #[test]
    fn half_and_reflect_vectors() {
        let z = Direction::z();
        assert_relative_eq!(*half_vector(&z, &z).unwrap(), *z, epsilon = 1e-12);
        let h = half_vector(&d(1.0, 0.0, 0.0), &d(0.0, 1.0, 0.0)).unwrap();
        assert_relative_eq!(h.x, FRAC_1_SQRT_2, epsilon = 1e-12);
        assert_relative_eq!(h.y, FRAC_1_SQRT_2, epsilon = 1e-12);
        assert!(half_vector(&z, &d(0.0, 0.0, -1.0)).is_err());

        assert_relative_eq!(*reflect_vector(&z, &z).unwrap(), *z, epsilon = 1e-12);
        let r = reflect_vector(&z, &d(1.0, 0.0, 1.0)).unwrap();
        assert_relative_eq!(*r, Vector3::new(-FRAC_1_SQRT_2, 0.0, FRAC_1_SQRT_2), epsilon = 1e-12);
        assert!(matches!(
            reflect_vector(&z, &d(0.0, 0.0, -1.0)),
            Err(Error::BackFacing(_))
        ));
    }

    #[test]
    fn brdf_examples() {
        let cfg = BrdfConfig::default();
        let z = Direction::z();
        let lambert = ReflectanceTexel::new([PI; 3], vec![0.0; 3]);
        let l = d(0.3, -0.2, 0.9);
        let v = d(-0.1, 0.4, 0.8);
        let out = eval_brdf(&lambert, &cfg, &l, &v, &z).unwrap();
        for c in out {
            assert_relative_eq!(c, 1.0, epsilon = 1e-12);
        }
        let spec = ReflectanceTexel::new([0.0; 3], vec![1.0; 3]);
        let out = eval_brdf(&spec, &cfg, &z, &z, &z).unwrap();
        for c in out {
            assert!((c - 3.22145).abs() < 1e-4);
        }
        let grazing = eval_brdf(&spec, &cfg, &d(1.0, 0.0, 0.0), &z, &z);
        assert!(matches!(grazing, Err(Error::Grazing(_))));
    }

    #[test]
    fn directional_shading_examples() {
        let cfg = BrdfConfig::default();
        let z = Direction::z();
        let lambert = ReflectanceTexel::new([PI; 3], vec![0.0; 3]);
        assert_eq!(shade_directional(&lambert, &cfg, &[1.0; 3], &z, &z, &z), [1.0; 3]);
        let mid = ReflectanceTexel::new([0.0; 3], vec![0.0, 1.0, 0.0]);
        for c in shade_directional(&mid, &cfg, &[1.0; 3], &z, &z, &z) {
            assert!((c - 0.41072).abs() < 1e-4);
        }
        // light below the horizon with the half vector also below
        let full = ReflectanceTexel::new([0.5; 3], vec![1.0; 3]);
        let below = d(0.2, 0.0, -1.0);
        let view = d(0.0, 0.3, -1.0);
        assert_eq!(shade_directional(&full, &cfg, &[1.0; 3], &below, &view, &z), [0.0; 3]);
        // antiparallel light and view: half vector undefined, diffuse only
        let s = shade_directional(&full, &cfg, &[1.0; 3], &z, &d(0.0, 0.0, -1.0), &z);
        assert_relative_eq!(s[0], 0.5 / PI, epsilon = 1e-12);
    }

    #[test]
    fn gamma_maps() {
        let img = Image::from_vec(4, 1, 1, vec![0.0, 1.0, 0.5, 0.73]).unwrap();
        let lin = display_to_linear(&img).unwrap();
        assert_eq!(lin.data()[0], 0.0);
        assert_eq!(lin.data()[1], 1.0);
        assert!((lin.data()[2] as f64 - 0.43528).abs() < 1e-5);
        let back = linear_to_display(&lin).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let neg = Image::from_vec(1, 1, 1, vec![-0.1]).unwrap();
        assert!(display_to_linear(&neg).is_err());
        assert!(linear_to_display(&neg).is_err());
    }

    #[test]
    fn olat_difference_examples() {
        let flash = Image::from_vec(3, 1, 1, vec![0.4, 1.0, 0.8]).unwrap();
        let room = Image::from_vec(3, 1, 1, vec![0.4, 0.0, 0.5]).unwrap();
        let diff = olat_difference(&flash, &room).unwrap();
        assert_eq!(diff.data()[0], 0.0);
        assert_eq!(diff.data()[1], 1.0);
        assert!((diff.data()[2] as f64 - 0.32989).abs() < 1e-4);
        // darker flash than room light clamps at zero
        let clamped = olat_difference(&room, &flash).unwrap();
        assert!(clamped.data().iter().all(|v| *v >= 0.0));
        let other = Image::new(2, 1, 1);
        assert!(matches!(
            olat_difference(&flash, &other),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn config_invariants() {
        assert!(BrdfConfig::new(vec![]).is_err());
        assert!(BrdfConfig::new(vec![8.0, 1.0]).is_err());
        assert!(BrdfConfig::new(vec![1.0, 1.0]).is_err());
        assert!(BrdfConfig::new(vec![-1.0, 2.0]).is_err());
        let cfg: BrdfConfig = serde_json::from_str("[1.0, 8.0, 64.0]").unwrap();
        assert_eq!(cfg, BrdfConfig::default());
        assert_eq!(cfg.params_per_texel(), 6);
    }
}
