//! Experiment harness for the task-up-sampling meta-learning engine:
//! configuration, training/evaluation orchestration with resumable
//! checkpoints, results files, sweeps, plot-data emission, and built-in
//! oracle verification. The `atu` binary is a thin command-line wrapper
//! over this library.

pub mod checkpoint;
pub mod config;
pub mod plotdata;
pub mod results;
pub mod runner;
pub mod taskio;
pub mod verify;
