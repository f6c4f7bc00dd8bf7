//! Independent oracles shared by the core tests and the acceptance harness.

#![allow(dead_code)]

pub mod ccpe_oracle;
pub mod metrics_oracle;
pub mod snsm_oracle;
