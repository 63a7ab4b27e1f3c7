//! Real spherical harmonics, environment projection, and zonal convolution.
//!
//! Basis convention: real, orthonormal, no Condon-Shortley phase, flat index
//! `l(l+1)+m`. With this convention `Y_1,-1 ~ y`, `Y_1,0 ~ z`, `Y_1,1 ~ x`.
//!
//! Shading under an environment follows the Funk-Hecke theorem: a kernel
//! that is circularly symmetric about an axis convolves the lighting by
//! scaling each band `l` with `sqrt(4pi/(2l+1))` times its zonal coefficient.
//! The Lambertian kernel is `max(0, cos)` about the normal. The Blinn-Phong
//! lobe `<h,n>^p` is reparameterized about the mirror direction `r` as
//! `f(p) cos^p(theta/2)`, which is exact in the plane of incidence.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use crate::brdf::{clamped_cos, normalization_factor, reflect_vector, BrdfConfig, Direction, ReflectanceTexel, Rgb};
use crate::error::{Error, Result};
use crate::raster::Image;

pub const DEFAULT_ORDER: usize = 8;

/// Nodes used for every zonal projection.
pub const QUADRATURE_NODES: usize = 256;

/// Number of coefficients per channel for order `order`.
#[inline]
pub const fn coeff_count(order: usize) -> usize {
    (order + 1) * (order + 1)
}

#[inline]
pub const fn sh_index(l: usize, m: isize) -> usize {
    ((l * (l + 1)) as isize + m) as usize
}

fn normalization_table(order: usize) -> Vec<f64> {
    // K_lm for m >= 0 at position l(l+1)/2 + m
    let mut out = Vec::with_capacity((order + 1) * (order + 2) / 2);
    for l in 0..=order {
        for m in 0..=l {
            let mut ratio = 1.0f64;
            for k in (l - m + 1)..=(l + m) {
                ratio /= k as f64;
            }
            out.push(((2 * l + 1) as f64 / (4.0 * PI) * ratio).sqrt());
        }
    }
    out
}

fn cached_normalization(order: usize) -> Arc<Vec<f64>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Vec<f64>>>>> = OnceLock::new();
    let mut guard = CACHE.get_or_init(Default::default).lock().expect("poisoned");
    guard
        .entry(order)
        .or_insert_with(|| Arc::new(normalization_table(order)))
        .clone()
}

/// Writes `Y_lm(d)` for every `l <= order` into `out`.
pub fn eval_basis_into(d: &Direction, order: usize, out: &mut [f64]) {
    assert!(out.len() >= coeff_count(order));
    let norm = cached_normalization(order);
    let (x, y, z) = (d.x, d.y, d.z);
    // (x + iy)^m, built incrementally
    let (mut re, mut im) = (1.0f64, 0.0f64);
    // P~_m^m = (2m-1)!!, the associated Legendre polynomial with the
    // (1-z^2)^(m/2) factor folded into (x+iy)^m
    let mut pmm = 1.0f64;
    for m in 0..=order {
        if m > 0 {
            let nre = re * x - im * y;
            im = re * y + im * x;
            re = nre;
            pmm *= (2 * m - 1) as f64;
        }
        let mut p_prev = 0.0f64;
        let mut p_cur = pmm;
        for l in m..=order {
            if l == m + 1 {
                p_prev = p_cur;
                p_cur = z * (2 * m + 1) as f64 * pmm;
            } else if l > m + 1 {
                let next = ((2 * l - 1) as f64 * z * p_cur - (l + m - 1) as f64 * p_prev) / (l - m) as f64;
                p_prev = p_cur;
                p_cur = next;
            }
            let k = norm[l * (l + 1) / 2 + m];
            if m == 0 {
                out[sh_index(l, 0)] = k * p_cur;
            } else {
                let s = std::f64::consts::SQRT_2 * k * p_cur;
                out[sh_index(l, m as isize)] = s * re;
                out[sh_index(l, -(m as isize))] = s * im;
            }
        }
    }
}

pub fn sh_eval_basis(d: &Direction, order: usize) -> Vec<f64> {
    let mut out = vec![0.0; coeff_count(order)];
    eval_basis_into(d, order, &mut out);
    out
}

/// Legendre polynomials `P_0(t) .. P_order(t)`.
pub fn legendre(order: usize, t: f64) -> Vec<f64> {
    let mut p = vec![0.0; order + 1];
    p[0] = 1.0;
    if order >= 1 {
        p[1] = t;
    }
    for l in 2..=order {
        p[l] = ((2 * l - 1) as f64 * t * p[l - 1] - (l - 1) as f64 * p[l - 2]) / l as f64;
    }
    p
}

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0f64, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = x;
        nodes[n - 1 - i] = -x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn cached_gauss_legendre() -> &'static (Vec<f64>, Vec<f64>) {
    static GL: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    GL.get_or_init(|| gauss_legendre(QUADRATURE_NODES))
}

/// Per-band Lambertian convolution coefficients `A_l`.
pub fn lambert_zonal(order: usize) -> Vec<f64> {
    // A_l = 2pi * int_0^1 t P_l(t) dt, nodes mapped from [-1,1] to [0,1]
    let (nodes, weights) = cached_gauss_legendre();
    let mut out = vec![0.0; order + 1];
    for (&x, &w) in nodes.iter().zip(weights) {
        let t = 0.5 * (x + 1.0);
        for (acc, p) in out.iter_mut().zip(legendre(order, t)) {
            *acc += 0.5 * w * t * p;
        }
    }
    out.iter_mut().for_each(|a| *a *= 2.0 * PI);
    out
}

/// Per-band coefficients `B_l` of the reparameterized lobe of exponent `p`.
pub fn phong_zonal(p: f64, order: usize) -> Result<Vec<f64>> {
    let f = normalization_factor(p)?;
    // B_l = 2pi int_{-1}^{1} f ((1+t)/2)^(p/2) P_l(t) dt. With u = cos(theta/2),
    // t = 2u^2 - 1 and dt = 4u du, the integrand becomes 4 f u^(p+1) P_l(2u^2-1)
    // on [0, 1], a polynomial for integer p.
    let (nodes, weights) = cached_gauss_legendre();
    let mut out = vec![0.0; order + 1];
    for (&x, &w) in nodes.iter().zip(weights) {
        let u = 0.5 * (x + 1.0);
        let t = 2.0 * u * u - 1.0;
        let kernel = 4.0 * f * u.powf(p + 1.0);
        for (acc, pl) in out.iter_mut().zip(legendre(order, t)) {
            *acc += 0.5 * w * kernel * pl;
        }
    }
    out.iter_mut().for_each(|b| *b *= 2.0 * PI);
    Ok(out)
}

/// Zonal convolution coefficients for a lobe configuration at a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ZonalTable {
    order: usize,
    lambert: Vec<f64>,
    phong: Vec<Vec<f64>>,
}

impl ZonalTable {
    pub fn new(cfg: &BrdfConfig, order: usize) -> Self {
        let phong = cfg
            .exponents()
            .iter()
            .map(|&p| phong_zonal(p, order).expect("config exponents are positive"))
            .collect();
        ZonalTable {
            order,
            lambert: lambert_zonal(order),
            phong,
        }
    }

    /// Shared table for `(cfg, order)`, built on first use.
    pub fn cached(cfg: &BrdfConfig, order: usize) -> Arc<ZonalTable> {
        type Key = (Vec<u64>, usize);
        static CACHE: OnceLock<Mutex<HashMap<Key, Arc<ZonalTable>>>> = OnceLock::new();
        let key = (cfg.exponents().iter().map(|p| p.to_bits()).collect(), order);
        let mut guard = CACHE.get_or_init(Default::default).lock().expect("poisoned");
        guard
            .entry(key)
            .or_insert_with(|| Arc::new(ZonalTable::new(cfg, order)))
            .clone()
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn lambert(&self) -> &[f64] {
        &self.lambert
    }

    /// `B_l` for lobe `i`.
    pub fn phong(&self, i: usize) -> &[f64] {
        &self.phong[i]
    }

    pub fn lobe_count(&self) -> usize {
        self.phong.len()
    }
}

/// SH lighting coefficients for three color channels, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ShVector {
    order: usize,
    coeffs: Vec<f64>,
}

impl ShVector {
    pub const CHANNELS: usize = 3;

    pub fn zeros(order: usize) -> Self {
        ShVector {
            order,
            coeffs: vec![0.0; 3 * coeff_count(order)],
        }
    }

    pub fn from_coeffs(order: usize, coeffs: Vec<f64>) -> Result<Self> {
        let expected = 3 * coeff_count(order);
        if coeffs.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                got: coeffs.len(),
            });
        }
        Ok(ShVector { order, coeffs })
    }

    /// Uniform environment of the given per-channel radiance.
    pub fn constant(order: usize, radiance: Rgb) -> Self {
        let mut sh = ShVector::zeros(order);
        for ch in 0..3 {
            sh.channel_mut(ch)[0] = radiance[ch] * 2.0 * PI.sqrt();
        }
        sh
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn channel(&self, ch: usize) -> &[f64] {
        let n = coeff_count(self.order);
        &self.coeffs[ch * n..(ch + 1) * n]
    }

    pub fn channel_mut(&mut self, ch: usize) -> &mut [f64] {
        let n = coeff_count(self.order);
        &mut self.coeffs[ch * n..(ch + 1) * n]
    }

    /// Keeps bands `l <= order`.
    pub fn truncate(&self, order: usize) -> ShVector {
        let order = order.min(self.order);
        let n = coeff_count(order);
        let coeffs = (0..3).flat_map(|ch| self.channel(ch)[..n].to_vec()).collect();
        ShVector { order, coeffs }
    }

    pub fn scaled(&self, s: f64) -> ShVector {
        ShVector {
            order: self.order,
            coeffs: self.coeffs.iter().map(|c| c * s).collect(),
        }
    }

    /// Text form: a header line `order channels`, then one line per channel
    /// with coefficients in index order.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.order, Self::CHANNELS);
        for ch in 0..3 {
            let line: Vec<String> = self.channel(ch).iter().map(|c| format!("{c:e}")).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        let mut next = |what: &str| {
            tokens
                .next()
                .ok_or_else(|| Error::Format(format!("SH text truncated before {what}")))
        };
        let order: usize = next("order")?
            .parse()
            .map_err(|_| Error::Format("bad SH order".into()))?;
        let channels: usize = next("channels")?
            .parse()
            .map_err(|_| Error::Format("bad SH channel count".into()))?;
        if channels != Self::CHANNELS {
            return Err(Error::Format(format!("expected 3 SH channels, got {channels}")));
        }
        let n = 3 * coeff_count(order);
        let mut coeffs = Vec::with_capacity(n);
        for k in 0..n {
            let v: f64 = next("coefficients")?
                .parse()
                .map_err(|_| Error::Format(format!("bad SH coefficient #{k}")))?;
            coeffs.push(v);
        }
        ShVector::from_coeffs(order, coeffs)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ShVector::from_text(&text)
    }
}

/// Equirectangular HDR panorama.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvMap {
    pixels: Image,
}

impl EnvMap {
    pub fn new(pixels: Image) -> Result<Self> {
        if pixels.channels() != 3 {
            return Err(Error::DimensionMismatch(format!(
                "environment map needs 3 channels, got {}",
                pixels.channels()
            )));
        }
        if pixels.width() != 2 * pixels.height() || pixels.height() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "environment map must be 2H x H, got {}x{}",
                pixels.width(),
                pixels.height()
            )));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::Domain(format!("negative or NaN radiance {v}")));
        }
        Ok(EnvMap { pixels })
    }

    /// Samples `f(direction)` at every pixel center.
    pub fn from_fn(height: usize, f: impl Fn(&Direction) -> Rgb) -> Result<Self> {
        let width = 2 * height;
        let mut img = Image::new(width, height, 3);
        for r in 0..height {
            for c in 0..width {
                let rgb = f(&Self::pixel_direction(width, height, r, c));
                for ch in 0..3 {
                    img.set(c, r, ch, rgb[ch] as f32);
                }
            }
        }
        EnvMap::new(img)
    }

    pub fn constant(height: usize, radiance: Rgb) -> Self {
        EnvMap::from_fn(height, |_| radiance).expect("constant map is valid")
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn pixels(&self) -> &Image {
        &self.pixels
    }

    pub fn pixel_direction(width: usize, height: usize, row: usize, col: usize) -> Direction {
        let theta = (row as f64 + 0.5) * PI / height as f64;
        let phi = (col as f64 + 0.5) * 2.0 * PI / width as f64;
        Direction::from_spherical(theta, phi)
    }

    pub fn direction(&self, row: usize, col: usize) -> Direction {
        Self::pixel_direction(self.width(), self.height(), row, col)
    }

    /// Solid angle `sin(theta) dtheta dphi` of a pixel in `row`.
    pub fn solid_angle(&self, row: usize) -> f64 {
        let theta = (row as f64 + 0.5) * PI / self.height() as f64;
        theta.sin() * (PI / self.height() as f64) * (2.0 * PI / self.width() as f64)
    }

    pub fn radiance(&self, row: usize, col: usize) -> Rgb {
        let p = self.pixels.pixel(row * self.width() + col);
        [p[0] as f64, p[1] as f64, p[2] as f64]
    }

    pub fn read_pfm(path: impl AsRef<Path>) -> Result<Self> {
        EnvMap::new(Image::read_pfm(path)?)
    }

    pub fn write_pfm(&self, path: impl AsRef<Path>) -> Result<()> {
        self.pixels.write_pfm(path)
    }
}

/// Projects a panorama onto SH bands `l <= order` by pixel quadrature.
pub fn project_envmap(env: &EnvMap, order: usize) -> ShVector {
    let n = coeff_count(order);
    let mut sh = ShVector::zeros(order);
    let mut basis = vec![0.0; n];
    for r in 0..env.height() {
        let dw = env.solid_angle(r);
        for c in 0..env.width() {
            let e = env.radiance(r, c);
            if e == [0.0; 3] {
                continue;
            }
            eval_basis_into(&env.direction(r, c), order, &mut basis);
            for ch in 0..3 {
                let w = e[ch] * dw;
                for (acc, y) in sh.channel_mut(ch).iter_mut().zip(&basis) {
                    *acc += w * y;
                }
            }
        }
    }
    sh
}

/// Per-point convolution weights: shading is `sum_lm K_lm * weight_lm`.
///
/// `diffuse[lm] = A_l Y_lm(n) / pi` multiplies the diffuse color and
/// `lobes[i][lm] = B^i_l Y_lm(r)` multiplies lobe weight `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvShadingBasis {
    pub diffuse: Vec<f64>,
    pub lobes: Vec<Vec<f64>>,
}

impl EnvShadingBasis {
    pub fn new(zt: &ZonalTable, n: &Direction, v: &Direction) -> Result<Self> {
        let r = reflect_vector(n, v)?;
        let order = zt.order();
        let yn = sh_eval_basis(n, order);
        let yr = sh_eval_basis(&r, order);
        let mut diffuse = vec![0.0; coeff_count(order)];
        for l in 0..=order {
            for m in -(l as isize)..=(l as isize) {
                let k = sh_index(l, m);
                diffuse[k] = zt.lambert()[l] * yn[k] / PI;
            }
        }
        let lobes = (0..zt.lobe_count())
            .map(|i| {
                let b = zt.phong(i);
                let mut out = vec![0.0; coeff_count(order)];
                for l in 0..=order {
                    for m in -(l as isize)..=(l as isize) {
                        let k = sh_index(l, m);
                        out[k] = b[l] * yr[k];
                    }
                }
                out
            })
            .collect();
        Ok(EnvShadingBasis { diffuse, lobes })
    }

    /// Returns `(irradiance term, per-lobe terms)` for one channel of lighting.
    pub fn channel_terms(&self, light: &[f64], lobe_terms: &mut [f64]) -> f64 {
        for (out, lobe) in lobe_terms.iter_mut().zip(&self.lobes) {
            *out = dot(lobe, light);
        }
        dot(&self.diffuse, light)
    }

    pub fn shade(&self, t: &ReflectanceTexel, light: &ShVector) -> Rgb {
        let mut lobe_terms = vec![0.0; self.lobes.len()];
        [0, 1, 2].map(|ch| {
            let e = self.channel_terms(light.channel(ch), &mut lobe_terms);
            t.diffuse[ch] * e + t.weights.iter().zip(&lobe_terms).map(|(w, s)| w * s).sum::<f64>()
        })
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Frequency-space shading of a texel under SH lighting.
pub fn shade_env(
    t: &ReflectanceTexel,
    cfg: &BrdfConfig,
    light: &ShVector,
    zt: &ZonalTable,
    n: &Direction,
    v: &Direction,
) -> Result<Rgb> {
    if light.order() != zt.order() {
        return Err(Error::OrderMismatch {
            light: light.order(),
            table: zt.order(),
        });
    }
    if t.weights.len() != cfg.lobe_count() || zt.lobe_count() != cfg.lobe_count() {
        return Err(Error::DimensionMismatch(format!(
            "texel has {} weights, config {} lobes, zonal table {} lobes",
            t.weights.len(),
            cfg.lobe_count(),
            zt.lobe_count()
        )));
    }
    Ok(EnvShadingBasis::new(zt, n, v)?.shade(t, light))
}

/// Diffuse shading by direct pixel quadrature over the upper hemisphere.
/// Independent of the SH path; used as a brute-force reference.
pub fn diffuse_by_quadrature(env: &EnvMap, albedo: &Rgb, n: &Direction) -> Rgb {
    let mut acc = [0.0f64; 3];
    for r in 0..env.height() {
        let dw = env.solid_angle(r);
        for c in 0..env.width() {
            let cos = clamped_cos(&env.direction(r, c), n);
            if cos > 0.0 {
                let e = env.radiance(r, c);
                for ch in 0..3 {
                    acc[ch] += e[ch] * cos * dw;
                }
            }
        }
    }
    [0, 1, 2].map(|ch| albedo[ch] / PI * acc[ch])
}
