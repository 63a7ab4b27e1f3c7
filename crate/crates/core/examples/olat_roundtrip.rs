//! Render a synthetic OLAT capture and recover the reflectance maps from it.
//!
//!     cargo run --release --example olat_roundtrip -- [resolution] [solver]

use std::time::Instant;

use mfr::olat::{self, EstimationSettings, ProxyGeometry};
use mfr::BrdfConfig;

fn main() -> mfr::Result<()> {
    let mut args = std::env::args().skip(1);
    let res: usize = args.next().map(|s| s.parse().expect("resolution")).unwrap_or(64);
    let solver = args.next().unwrap_or_else(|| "adam".into()).parse()?;

    let cfg = BrdfConfig::default();
    let rig = olat::make_rig(9, 11, res, ProxyGeometry::Hemisphere, 0)?;
    let truth = olat::synthetic_maps(&cfg, res, res, 0, true);
    let frames = olat::render_all(&truth, &rig)?;

    let settings = EstimationSettings {
        solver,
        ..Default::default()
    };
    let start = Instant::now();
    let est = olat::estimate_maps(&frames, &rig, &cfg, &settings)?;
    let errors = olat::relative_errors(&est.maps, &truth, &est.maps.valid);
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    println!(
        "{solver:?}: {} texels estimated in {:.1}s, median relative error {:.3e}, worst {:.3e}",
        errors.len(),
        start.elapsed().as_secs_f64(),
        olat::median(&errors),
        worst
    );
    Ok(())
}
