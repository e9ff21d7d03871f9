//! Proxy-dataset sampling for cell-based architecture search.
//!
//! The crate covers the whole experiment loop at desk scale: reduce a
//! labeled dataset to a proxy ([`sampling`], [`scorers`]), search a
//! NAS-Bench-201 style cell on the proxy ([`search`], built on the small
//! autodiff engine in [`nn`]), retrain the derived cell on the full data
//! ([`eval`]) and summarize many runs ([`analysis`]). [`pipeline`] wires the
//! stages together with reproducibility manifests.

pub mod analysis;
pub mod data;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod sampling;
pub mod scorers;
pub mod search;
