//! Run configuration, dataset splits, method dispatch, sweeps and slice
//! rendering behind the `mutomo` command.

pub mod config;
pub mod data;
pub mod methods;
pub mod model;
pub mod render;
pub mod sweep;

pub use config::RunConfig;
