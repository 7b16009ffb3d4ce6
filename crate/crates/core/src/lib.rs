//! Auditing toolkit for measuring how faithfully reasoning models treat
//! their own thinking drafts: counterfactual step insertions inside the
//! draft, conclusion edits between draft and answer, judged behavior
//! classification, and grouped faithfulness-rate reports.

pub mod decomposition;
pub mod error;
pub mod gateway;
pub mod interventions;
pub mod judge;
mod jsonx;
pub mod metrics;
pub mod model;
pub mod runner;
pub mod template;

pub use error::{Error, Result};
