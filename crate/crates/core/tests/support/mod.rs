//! Checks shared by the unit-level suites and the acceptance run.
#![allow(dead_code)]

pub mod grad;
pub mod oracle;
