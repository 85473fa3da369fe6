//! Context-aware dynamics model laboratory.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod envs;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod planner;
pub mod plot;
pub mod rng;
pub mod trainer;
