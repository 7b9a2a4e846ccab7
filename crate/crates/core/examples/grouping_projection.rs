//! Raw image -> patch features -> grouped concept tokens. Prints the shape
//! after each grouping stage and checks that every hard assignment is one-hot.

use candle_core::DType;
use nxgpt::config::{Modality, ModelConfig};
use nxgpt::data::synth::{render, Attributes};
use nxgpt::error::Result;
use nxgpt::grouping::Mode;
use nxgpt::model::NxModel;
use nxgpt::params::Ctx;
use nxgpt::util::derived_rng;

fn main() -> Result<()> {
    let cfg = ModelConfig::desk();
    let model = NxModel::new(&cfg, DType::F32)?;
    let mut rng = derived_rng(3, "example.grouping");
    let attrs = Attributes::sample(Modality::Image, &mut rng)?;
    let sample = render(&attrs, &attrs.mode_center(), &cfg.encoder);
    println!("input: {} ({:?})", attrs.caption(), sample.shape());

    let block = model.encoders.encode(&sample, &model.store)?;
    println!("patch features: {:?}", block.features.dims());
    let x = block.features.unsqueeze(0)?;
    let out = model.grouping.project(&Ctx::eval(), &x, Mode::Train, &mut rng)?;
    for s in &out.stages {
        let hard = s.hard.to_vec3::<f32>()?;
        let one_hot = (0..hard[0][0].len()).all(|n| {
            let col: Vec<f32> = hard[0].iter().map(|row| row[n]).collect();
            col.iter().filter(|&&v| v == 1.0).count() == 1 && col.iter().all(|&v| v == 0.0 || v == 1.0)
        });
        println!(
            "stage {}: {} inputs -> {} concepts, hard assignment one-hot per column: {one_hot}",
            s.index,
            s.inputs_hat.dims()[1],
            s.concepts_hat.dims()[1]
        );
    }
    println!("concept tokens for the llm: {:?}", out.concepts.dims());
    Ok(())
}
