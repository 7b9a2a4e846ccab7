//! Conditional toy diffusion on a two-mode 2-D mixture: each condition
//! should pull samples towards its own mode.

use nxgpt::diffusion::{fit_two_mode_mixture, two_mode_condition, BackboneRecipe, TWO_MODE_CENTERS};
use nxgpt::error::Result;
use nxgpt::util::derived_rng;

fn main() -> Result<()> {
    let quick = std::env::args().any(|a| a == "--quick");
    let steps = if quick { 300 } else { 1200 };
    let (_, d) = fit_two_mode_mixture(21, BackboneRecipe { steps, batch: 64, lr: 3e-3 })?;
    let mut rng = derived_rng(21, "example.sample");
    for mode in 0..2 {
        let samples = d.sample(&two_mode_condition(mode, 500)?, &mut rng)?.to_vec2::<f32>()?;
        let near = samples
            .iter()
            .filter(|p| {
                let dist = |c: [f32; 2]| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
                dist(TWO_MODE_CENTERS[mode]) < dist(TWO_MODE_CENTERS[1 - mode])
            })
            .count();
        let mean: Vec<f32> = (0..2).map(|j| samples.iter().map(|p| p[j]).sum::<f32>() / 500.0).collect();
        println!("condition {mode}: {near}/500 samples nearest mode {:?}, sample mean {:?}", TWO_MODE_CENTERS[mode], mean);
    }
    Ok(())
}
