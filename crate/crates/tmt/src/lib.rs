//! Geodesic integral-moment transforms of symmetric tensor fields on
//! simple two-dimensional Riemannian manifolds.
//!
//! The crate provides:
//! - symmetric tensor storage and algebra ([`symtensor`]),
//! - analytic metrics on the unit disk, geodesic tracing and simplicity
//!   diagnostics ([`geometry`]),
//! - the moment transforms `I^q`, the inner derivative `d`, the divergence
//!   `delta` and the along-ray primitive construction ([`transforms`]),
//! - solenoidal-potential decomposition and its iterated form
//!   ([`decomposition`]),
//! - semi-geodesic tube charts and the triangular ODE cascade
//!   ([`tube_cascade`]),
//! - discretized forward operators and regularized moment-cascade
//!   reconstruction ([`reconstruct`]),
//! - experiment configuration, orchestration and CSV serialization
//!   ([`cli_io`]).

pub mod cli_io;
pub mod decomposition;
pub mod error;
pub mod expr;
pub mod fields;
pub mod geometry;
pub mod grid;
pub mod reconstruct;
pub mod sparse;
pub mod symtensor;
pub mod transforms;
pub mod tube_cascade;

pub use error::TmtError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, TmtError>;
