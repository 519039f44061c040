//! Guarded, retrying execution of generated-code workflows.
//!
//! A workflow is a DAG of nodes. Each node pairs a stochastic generator with
//! a deterministic guard; the engine keeps the guard-satisfaction state
//! separate from the environment that accumulates artifacts and feedback.

pub mod analysis;
pub mod campaign;
pub mod executor;
pub mod generator;
pub mod guards;
pub mod repository;
pub mod state;
pub mod workflow;
