//! Scenario files for the `drbsde` command: parsing, assembly of lattice and
//! simulation problems, and runners that emit checks and CSV artifacts.

pub mod assemble;
pub mod error;
pub mod runner;
pub mod scenario;

pub use error::CliError;
pub use runner::{run_scenario, Check, RunReport};
pub use scenario::{parse_scenario, Scenario};
