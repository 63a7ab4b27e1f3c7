//! Fit model coefficients to rendered images, then finetune the model on a
//! population it cannot represent and compare held-out fits.
//!
//!     cargo run --release --example fit_and_finetune

use mfr::fit::{self, finetune_model, FinetuneConfig, FitSettings, FitTarget, GeometryBuffers, LossWeights};
use mfr::lighting::{build_lighting_pca, synthetic_environment};
use mfr::model::build_model;
use mfr::olat::{make_rig, synthetic_maps, ProxyGeometry};
use mfr::{BrdfConfig, ReflectanceMaps};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RES: usize = 16;

/// Smooth maps plus a diffuse ripple that the starting model never saw.
fn with_ripple(mut maps: ReflectanceMaps, amount: f64) -> ReflectanceMaps {
    for i in 0..maps.texel_count() {
        let (x, y) = ((i % RES) as f64 / RES as f64, (i / RES) as f64 / RES as f64);
        let ripple = amount * (0.5 + 0.5 * (15.7 * x).sin() * (9.4 * y).cos());
        let mut t = maps.texel(i);
        t.diffuse = t.diffuse.map(|c| c + ripple);
        maps.set_texel(i, &t);
    }
    maps
}

fn main() -> mfr::Result<()> {
    let cfg = BrdfConfig::default();
    let base: Vec<_> = (0..10).map(|s| synthetic_maps(&cfg, RES, RES, s, false)).collect();
    let model = build_model(&base, 6)?;
    let envs: Vec<_> = (0..3).map(|s| synthetic_environment(16, 50 + s)).collect();
    let light = build_lighting_pca(&envs, 4, 6, 4)?;
    let rig = make_rig(4, 1, RES, ProxyGeometry::Hemisphere, 8)?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut targets = Vec::new();
    for k in 0..20 {
        let maps = with_ripple(synthetic_maps(&cfg, RES, RES, 100 + k, false), rng.random_range(0.1..0.2));
        let gamma: Vec<f64> = light.sigmas_f64().iter().map(|s| rng.random_range(-1.0..1.0) * s).collect();
        let geometry = GeometryBuffers::from_rig(&rig, k as usize % 4)?;
        targets.push(FitTarget {
            image: fit::render_maps_env(&maps, &light.normalized(&gamma)?, &geometry)?,
            skin: geometry.coverage.clone(),
            geometry,
        });
    }
    let (train, held_out) = targets.split_at(14);

    let held_out_l1 = |m: &mfr::model::MorphableReflectanceModel| -> mfr::Result<f64> {
        let mut total = 0.0;
        for t in held_out {
            total += fit::fit_image(t, m, &light, &FitSettings::default())?.losses.l1;
        }
        Ok(total / held_out.len() as f64)
    };
    println!("held-out L1 before finetuning: {:.4e}", held_out_l1(&model)?);

    let cfg = FinetuneConfig {
        weights: LossWeights { upd: 1e-3, ..LossWeights::default() },
        epochs: 4,
        fit_iterations: 300,
        model_step: 1e-4,
        ..FinetuneConfig::default()
    };
    let out = finetune_model(train, &model, &light, &cfg)?;
    for h in &out.history {
        println!(
            "epoch {}: train L1 {:.4e}, drift {:.3}, orthonormality {:.1e}",
            h.epoch, h.mean_l1, h.upd, h.orthonormality_error
        );
    }
    println!("held-out L1 after finetuning:  {:.4e}", held_out_l1(&out.model)?);
    Ok(())
}
