//! Staged training: recipes, optimizer, losses, pretraining, the stage
//! runner, evaluation and gradient checks.

pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod optim;
pub mod pretrain;
pub mod recipe;
pub mod runner;

pub use losses::LossBreakdown;
pub use recipe::{PretrainRecipe, StageRecipe};
pub use runner::{check_prerequisites, run_stage, StageReport, StepMetrics};
