//! Trainable versus frozen parameters, for the full-size component table
//! and for the instantiated desk model.

use candle_core::DType;
use nxgpt::budget::{param_budget, paper_scale_entries};
use nxgpt::config::ModelConfig;
use nxgpt::error::Result;
use nxgpt::model::NxModel;

fn main() -> Result<()> {
    let full = param_budget(paper_scale_entries())?;
    println!("full-size system\n{}", full.render_table());
    let desk = NxModel::new(&ModelConfig::desk(), DType::F32)?.budget()?;
    println!("desk model\n{}", desk.render_table());
    Ok(())
}
