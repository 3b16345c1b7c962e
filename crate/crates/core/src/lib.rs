//! Desk-scale simulator of an invoke-and-reason agent for grounded lesion
//! diagnosis: synthetic scenes, simulated detector tools, a factorized
//! tool-using policy, a composite grounding reward, GRPO training and the
//! grounding/diagnosis evaluation protocol.

pub mod cli;
pub mod config;
pub mod env;
pub mod eval;
pub mod geometry;
pub mod grpo;
pub mod label;
pub mod policy;
pub mod reward;
pub mod seed;
pub mod toolsim;

pub use label::Category;
