//! Quantized CNN execution over a simulated two-level scratchpad hierarchy.
//!
//! The engine consumes a [`netir::NetworkManifest`] plus a raw weight blob,
//! groups pointwise+depthwise pairs into fused nodes, picks an L1 tiling per
//! node and executes everything tile by tile while accounting every byte that
//! moves between L2 and L1.
//!
//! - [`netir`]: manifest types, validation, shape propagation
//! - [`kernels`]: bit-exact int8 reference kernels, including the fused PW+DW kernel
//! - [`memsim`]: memory configuration, traffic ledger, L1 arena
//! - [`tiler`]: footprint model, traffic prediction and the tiling planner
//! - [`runtime`]: fusion pass, tiled executor, golden path
//! - [`cli`]: command-line front end
//! - [`verify`]: cross-checks of golden, fused and tiled execution
//! - [`fixtures`]: seeded network generators used by tests and the CLI

pub mod cli;
pub mod error;
pub mod fixtures;
pub mod kernels;
pub mod memsim;
pub mod netir;
pub mod par;
pub mod runtime;
pub mod tiler;
pub mod verify;

pub use error::{Error, Result};
pub use par::Exec;
