//! Scenario scripts for the cryptocubic simulation: parse, run, report.

mod run;
mod script;

pub use run::{config_of, run, run_with, Options, RunOutcome};
pub use script::{parse_scenario, Command, Line, ScenarioScript, SyntaxError};
