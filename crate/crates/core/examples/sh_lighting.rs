//! Project an environment to spherical harmonics and shade with it, then
//! compare the frequency-space path with a point light as the order grows.
//!
//!     cargo run --release --example sh_lighting

use mfr::fit::{render_maps_env, render_maps_point, GeometryBuffers};
use mfr::lighting::synthetic_environment;
use mfr::olat::{make_rig, synthetic_maps, ProxyGeometry};
use mfr::sh::{diffuse_by_quadrature, project_envmap, shade_env};
use mfr::{BrdfConfig, Direction, EnvMap, ReflectanceTexel, ZonalTable};

fn main() -> mfr::Result<()> {
    let cfg = BrdfConfig::default();
    let env = synthetic_environment(128, 7);
    let albedo = [0.6, 0.45, 0.35];
    let n = Direction::from_spherical(0.6, 1.0);
    let reference = diffuse_by_quadrature(&env, &albedo, &n);
    println!("diffuse shading vs direct quadrature");
    for order in [1, 2, 4, 8] {
        let zt = ZonalTable::new(&cfg, order);
        let s = shade_env(&ReflectanceTexel::new(albedo, vec![0.0; 3]), &cfg, &project_envmap(&env, order), &zt, &n, &n)?;
        println!("  L = {order:>2}: {:.5} (reference {:.5})", s[0], reference[0]);
    }

    // Unit-irradiance cap around +z standing in for a point light.
    let cap_cos = 0.08f64.cos();
    let cap = EnvMap::from_fn(512, |d| if d.as_vector().z >= cap_cos { [1.0; 3] } else { [0.0; 3] })?;
    let mut irradiance = 0.0;
    for row in 0..cap.height() {
        for col in 0..cap.width() {
            irradiance += cap.radiance(row, col)[0] * cap.direction(row, col).as_vector().z.max(0.0) * cap.solid_angle(row);
        }
    }
    let cap = EnvMap::new(cap.pixels().map(|v| v / irradiance as f32))?;

    let res = 32;
    let rig = make_rig(1, 1, res, ProxyGeometry::Hemisphere, 0)?;
    let geometry = GeometryBuffers::from_rig(&rig, 0)?;
    let maps = synthetic_maps(&cfg, res, res, 3, true);
    let point = render_maps_point(&maps, &Direction::z(), &[1.0; 3], &geometry)?;
    let total: f64 = point.data().iter().map(|v| *v as f64).sum();
    println!("\nSH render vs point-light render (relative L1 gap)");
    for order in [2, 4, 8, 12, 16] {
        let img = render_maps_env(&maps, &project_envmap(&cap, order), &geometry)?;
        let gap: f64 = img.data().iter().zip(point.data()).map(|(a, b)| (a - b).abs() as f64).sum();
        println!("  L = {order:>2}: {:.4}", gap / total);
    }
    Ok(())
}
