//! Estimate reflectance from an OLAT capture and relight it under a light
//! the capture never used, writing preview PNGs.
//!
//!     cargo run --release --example relight -- [output dir]

use std::f64::consts::PI;

use mfr::fit::{render_maps_point, GeometryBuffers};
use mfr::olat::{self, EstimationSettings, ProxyGeometry, Solver};
use mfr::{BrdfConfig, Direction};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out: std::path::PathBuf = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("relight"));
    std::fs::create_dir_all(&out)?;
    let cfg = BrdfConfig::default();
    let res = 48;
    let rig = olat::make_rig(9, 11, res, ProxyGeometry::Hemisphere, 0)?;
    let truth = olat::synthetic_maps(&cfg, res, res, 0, true);
    let frames = olat::render_all(&truth, &rig)?;
    let settings = EstimationSettings {
        solver: Solver::Nnls,
        ..Default::default()
    };
    let est = olat::estimate_maps(&frames, &rig, &cfg, &settings)?;
    let geometry = GeometryBuffers::from_rig(&rig, 0)?;

    for k in 0..6 {
        let phi = 2.0 * PI * k as f64 / 6.0;
        let light = Direction::from_spherical(50f64.to_radians(), phi);
        let estimated = render_maps_point(&est.maps, &light, &[1.0; 3], &geometry)?;
        let reference = render_maps_point(&truth, &light, &[1.0; 3], &geometry)?;
        let num: f64 = estimated.data().iter().zip(reference.data()).map(|(a, b)| (a - b).abs() as f64).sum();
        let den: f64 = reference.data().iter().map(|b| b.abs() as f64).sum();
        let path = out.join(format!("frame_{k:02}.png"));
        estimated.write_png_preview(&path)?;
        println!("azimuth {:>5.1}°: relative L1 vs ground truth {:.2e} -> {}", phi.to_degrees(), num / den, path.display());
    }
    Ok(())
}
