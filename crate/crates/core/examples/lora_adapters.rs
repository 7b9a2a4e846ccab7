//! Stage masks and the adapter contract: zero-initialised adapters leave the
//! LLM output unchanged, and only masked parameters may move in a stage.

use candle_core::DType;
use nxgpt::config::ModelConfig;
use nxgpt::error::Result;
use nxgpt::llm::{trainable_mask, MixedInput};
use nxgpt::model::NxModel;
use nxgpt::params::Ctx;
use nxgpt::tokenizer::tokenize;

fn main() -> Result<()> {
    let model = NxModel::new(&ModelConfig::desk(), DType::F32)?;
    let input = MixedInput::from_tokens(tokenize("draw a big red dot, top left")?);
    let with = model.llm.forward(&Ctx::eval(), std::slice::from_ref(&input), true)?.logits;
    let without = model.llm.forward(&Ctx::eval(), &[input], false)?.logits;
    let diff = (with - without)?.abs()?.max_all()?.to_scalar::<f32>()?;
    println!("max |logits with adapters - without| at init: {diff}");
    for stage in 1..=3 {
        let mask = trainable_mask(&model.store, stage)?;
        let count: usize = mask.iter().filter_map(|n| model.store.get(n)).map(|e| e.param.shape().iter().product::<usize>()).sum();
        let mut modules: Vec<String> = mask.iter().map(|n| nxgpt::params::module_of(n)).collect();
        modules.dedup();
        println!("stage {stage}: {} tensors, {count} parameters, modules {modules:?}", mask.len());
    }
    Ok(())
}
