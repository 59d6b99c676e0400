//! Configuration, training driver, benchmarks, oracle suites and reports.
//!
//! Everything here is plumbing over the library modules. The CLI binary is a
//! thin wrapper that maps [`HarnessError`] kinds to exit codes.

use crate::envsim::EnvError;
use crate::optim::OptimError;
use crate::placement::PlacementError;
use crate::policy::PolicyError;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

mod bench;
mod config;
mod oracle_suite;
mod plot;
mod train;

pub use bench::{bench, bench_table_csv, simulate_placement, standard_plans, BenchRow};
pub use config::{
    apply_override, ActorSection, Algo, AlgorithmSection, ClusterSection, ComponentPlacement,
    CostSection, EnvSection, EvalSection, RolloutMode, RolloutSection, RunConfig,
};
pub use oracle_suite::{run_suite, OracleCheck, Suite, Tolerances};
pub use plot::{bars_svg, curve_svg};
pub use train::{evaluate, train, TrainOutcome};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Placement(
                PlacementError::InvalidPlan(_)
                | PlacementError::UnknownPreset(_)
                | PlacementError::MemoryOverflow { .. },
            ) => 2,
            _ => 1,
        }
    }
}

/// What is needed to rerun a command bit-exactly on the virtual backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub crate_version: String,
    pub config: Option<RunConfig>,
}

impl Manifest {
    pub fn new(command: &str, cfg: Option<&RunConfig>) -> Self {
        Self {
            command: command.to_string(),
            config_sha256: cfg.map(RunConfig::hash).unwrap_or_default(),
            seed: cfg.map_or(0, |c| c.seed),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.cloned(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        std::fs::create_dir_all(dir)?;
        let f = std::fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(f, self).map_err(std::io::Error::from)?;
        Ok(())
    }
}
