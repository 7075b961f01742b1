pub mod cli;
pub mod counter;
pub mod data;
pub mod embedding;
pub mod metrics;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod prototype;
pub mod seeding;
pub mod selector;

pub use error::{Error, Result};
