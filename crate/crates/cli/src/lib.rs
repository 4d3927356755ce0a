//! Scenario files, run orchestration and output tables for `ricci-lab`.

pub mod conventions;
pub mod run;
pub mod scenario;
pub mod sweep;
pub mod tables;
pub mod verify;
