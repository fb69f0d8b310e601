//! Command implementations behind the `gcpa` binary: training, inference,
//! evaluation, plotting and the component ablation sweep.

pub mod ablate;
pub mod config;
pub mod eval;
pub mod infer;
pub mod plot;
pub mod status;
pub mod train;

pub use config::RunConfig;
pub use status::{CliError, CliResult, Status};
