//! Build the lighting model from rotated synthetic environments and decode
//! a few random lightings.
//!
//!     cargo run --release --example lighting_pca

use mfr::fit::loss_light;
use mfr::lighting::{band0, build_lighting_pca, synthetic_environment};
use mfr::EnvMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mfr::Result<()> {
    let envs: Vec<EnvMap> = (0..6).map(|s| synthetic_environment(64, s)).collect();
    let model = build_lighting_pca(&envs, 8, 20, 8)?;
    println!(
        "order {}, {} components, orthonormality error {:.2e}",
        model.order(),
        model.component_count(),
        model.orthonormality_error()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..4 {
        let gamma: Vec<f64> = model.sigmas_f64().iter().map(|s| rng.random_range(-2.0..2.0) * s).collect();
        let z = [1.2, 1.0, 0.9];
        let sh = model.decode(&gamma, &z)?;
        let dc = band0(&sh);
        println!(
            "lighting {i}: band 0 = [{:.3}, {:.3}, {:.3}], color spread {:.4}",
            dc[0],
            dc[1],
            dc[2],
            loss_light(&sh)
        );
    }
    Ok(())
}
