//! Experiment harness for the `bilevel-fw` solvers: JSON run configs,
//! seeded parallel runs and their CSV, JSON and SVG artifacts.

pub mod config;
pub mod output;
pub mod runner;
