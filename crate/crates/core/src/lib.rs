//! Reachability-guided multi-agent navigation: epigraph and pairwise safety
//! value functions trained from their HJB residuals, a grid reference
//! solver, and a decentralized receding-horizon simulator.

pub mod config;
pub mod dynamics;
pub mod epigraph;
pub mod error;
pub mod grid;
pub mod heatmap;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod policy;
pub mod safety;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
