//! Graph-level instruction-following navigation: procedural worlds, an
//! episode runtime with a global-planner expert, the agent's topological map,
//! a small dual-phase fusion transformer planner, evaluation metrics, and the
//! SAP/MLM pretraining, DAgger fine-tuning and GRPO reinforcement stages.

pub mod error;
pub mod geom;
pub mod metrics;
pub mod policy;
pub mod seeding;
pub mod simenv;
pub mod topomap;
pub mod trainer;
pub mod vocab;
pub mod world;

pub use error::{NavError, Result};
