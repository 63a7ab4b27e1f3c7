//! Evaluate the lobe mixture BRDF and sweep a light across the normal.
//!
//!     cargo run --example brdf_shading

use std::f64::consts::PI;

use mfr::brdf::{eval_brdf, normalization_factor, shade_directional};
use mfr::{BrdfConfig, Direction, ReflectanceTexel};

fn main() -> mfr::Result<()> {
    let cfg = BrdfConfig::default();
    for &p in cfg.exponents() {
        println!("p = {p:>4}: normalization factor {:.5}", normalization_factor(p)?);
    }

    let skin = ReflectanceTexel::new([0.62, 0.43, 0.34], vec![0.05, 0.12, 0.08]);
    let n = Direction::z();
    let v = Direction::from_spherical(20f64.to_radians(), 0.0);
    println!("\n light angle   brdf (R)   shaded RGB");
    for deg in (-80..=80).step_by(20) {
        let theta = (deg as f64).to_radians();
        let l = Direction::from_spherical(theta.abs(), if deg < 0 { PI } else { 0.0 });
        let s = shade_directional(&skin, &cfg, &[1.0; 3], &l, &v, &n);
        let f = eval_brdf(&skin, &cfg, &l, &v, &n)?;
        println!("{deg:>8}°   {:>9.4}   [{:.4}, {:.4}, {:.4}]", f[0], s[0], s[1], s[2]);
    }
    Ok(())
}
