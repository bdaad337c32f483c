//! Desk-scale laboratory for studying test-time data poisoning against
//! test-time-adaptation (TTA) victims.
//!
//! The crate is organized around a grey-box threat model: the adversary
//! knows the victim's architecture and initial weights, distills a
//! surrogate from the victim's posterior feedback on its own queries, and
//! synthesizes in-distribution poisons with PGD under an L-infinity budget.
//! A protocol harness schedules mixed adversary/benign test streams,
//! audits every query, and reports attack success rates on benign data.

pub mod assignment;
pub mod datagen;
pub mod error;
pub mod nn;
pub mod poison;
pub mod protocol;
pub mod surrogate;
pub mod tensor;
pub mod tta;
pub mod util;

pub use error::{Error, Result};
