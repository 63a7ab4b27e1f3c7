//! Build a morphable reflectance model from synthetic maps, check it, and
//! draw new samples from it.
//!
//!     cargo run --release --example build_reflectance_model

use mfr::model::{build_model, MorphableReflectanceModel};
use mfr::olat::synthetic_maps;
use mfr::BrdfConfig;

fn main() -> mfr::Result<()> {
    let cfg = BrdfConfig::default();
    let samples: Vec<_> = (0..12).map(|s| synthetic_maps(&cfg, 32, 32, s, true)).collect();
    let model = build_model(&samples, 8)?;
    println!(
        "{} texels, {} lobes, {} components, orthonormality error {:.2e}",
        model.texel_count(),
        model.lobe_count(),
        model.component_count(),
        model.orthonormality_error()
    );
    let sigmas: Vec<String> = model.sigmas().iter().map(|s| format!("{s:.3}")).collect();
    println!("sigmas: {}", sigmas.join(" "));

    // A held-out sample is only approximated by the span.
    let held_out = synthetic_maps(&cfg, 32, 32, 99, true);
    let beta = model.project_coeffs(&held_out)?;
    let rec = model.reconstruct_vector(&beta)?;
    let truth = held_out.to_vector();
    let err: f64 = rec.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        / truth.iter().map(|b| b * b).sum::<f64>().sqrt();
    println!("held-out relative reconstruction error {err:.3e}");

    let path = std::env::temp_dir().join("example.mfrm");
    model.save(&path)?;
    let loaded = MorphableReflectanceModel::load(&path)?;
    println!("saved to {} and reloaded identically: {}", path.display(), loaded == model);

    for seed in 0..3 {
        let drawn = model.sample(seed, 1.0)?;
        let mean_weight: f64 = drawn.weight_vector().iter().sum::<f64>() / drawn.weight_vector().len() as f64;
        println!("sample {seed}: mean lobe weight {mean_weight:.4}");
    }
    Ok(())
}
