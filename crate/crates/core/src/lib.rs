//! Desk-scale any-to-any multimodal LLM stack.

pub mod blob;
pub mod chat;
pub mod cli;
pub mod checkpoint;
pub mod budget;
pub mod conditioner;
pub mod data;
pub mod config;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod grouping;
pub mod llm;
pub mod model;
pub mod nn;
pub mod outproj;
pub mod params;
pub mod routing;
pub mod tokenizer;
pub mod train;
pub mod util;

pub use error::{Error, Result};
