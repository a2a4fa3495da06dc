//! Synthetic corpus, training runs, check suites, ablations and cost benchmarks.

pub mod ablate;
pub mod bench;
pub mod check;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod featurize;
pub mod oracle;
pub mod runcfg;
pub mod scene;
pub mod training;

pub use error::{HarnessError, Result};
pub use runcfg::RunConfig;
