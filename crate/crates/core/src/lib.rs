//! Black-box change detection for LLM inference endpoints.
//!
//! Border inputs are prompts whose first output token is tied between two or
//! more tokens at temperature zero. Comparing the empirical first-token
//! distribution on those prompts before and after a suspected update detects
//! changes that are invisible on ordinary prompts.

pub mod budget;
pub mod client;
pub mod engine;
pub mod prompts;
pub mod simulator;
pub mod source;
pub mod stats;
pub mod theory;
