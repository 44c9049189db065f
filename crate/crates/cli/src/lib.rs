//! The `workbench` command line tool and the round orchestrator behind
//! `workbench run`.

pub mod cli;
pub mod config;
pub mod pipeline;
pub mod report;
pub mod supervisor;

pub use config::PipelineConfig;
pub use pipeline::{Pipeline, RoundOutcome, RunStatus};
