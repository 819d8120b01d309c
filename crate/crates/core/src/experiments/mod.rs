//! Config-driven experiments: plant, offline collection, supervisor and
//! analysis wired together, with CSV, JSON and SVG outputs.

pub mod config;
pub mod output;
pub mod remark;
pub mod runner;

pub use config::{load_config, parse_config, ExperimentConfig, Plant, Resolved};
pub use output::{emit_outputs, read_csv, write_csv, OutputFiles, Summary};
pub use remark::{parse_remark, run_remark, RemarkConfig, RemarkReport};
pub use runner::{config_bounds, run_batch, run_experiment, run_experiment_with, RunResult, StepRecord, TrajectoryLog};

pub const FLIGHT_TOML: &str = include_str!("../../fixtures/flight.toml");
pub const ENGINE_TOML: &str = include_str!("../../fixtures/engine.toml");
pub const REMARK1_TOML: &str = include_str!("../../fixtures/remark1.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fixture {
    Flight,
    Engine,
    Remark1,
}

impl Fixture {
    pub fn name(self) -> &'static str {
        match self {
            Fixture::Flight => "flight",
            Fixture::Engine => "engine",
            Fixture::Remark1 => "remark1",
        }
    }

    pub fn source(self) -> &'static str {
        match self {
            Fixture::Flight => FLIGHT_TOML,
            Fixture::Engine => ENGINE_TOML,
            Fixture::Remark1 => REMARK1_TOML,
        }
    }
}

pub fn flight_config() -> ExperimentConfig {
    parse_config(FLIGHT_TOML).expect("bundled flight fixture parses")
}

pub fn engine_config() -> ExperimentConfig {
    parse_config(ENGINE_TOML).expect("bundled engine fixture parses")
}

pub fn remark1_config() -> RemarkConfig {
    parse_remark(REMARK1_TOML).expect("bundled remark fixture parses")
}
