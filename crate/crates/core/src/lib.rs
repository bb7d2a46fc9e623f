//! M3: memory-related multi-task planning.
//!
//! Stages, bottom-up: a symbolic household [`world`], task-agnostic
//! exploration into a knowledge graph ([`explorer`]), task sampling and
//! constraints ([`taskgen`]), a small reverse-mode autodiff core
//! ([`learncore`]), the action predictive model ([`apm`]), the effect
//! extractor and feature memory ([`effectmem`]), SVD-based candidate
//! generation ([`decomposer`]), the fusion planner ([`planner`]), and the
//! experiment [`harness`].

pub mod apm;
pub mod decomposer;
pub mod effectmem;
pub mod error;
pub mod explorer;
pub mod harness;
pub mod io;
pub mod learncore;
pub mod planner;
pub mod taskgen;
pub mod world;

pub use error::{Error, Result};
