//! Latent-attention inference engine with group-wise KV condensation.
//!
//! The crate provides:
//! - a dense multi-head latent attention path ([`mla`]),
//! - the condensed path that pools each full group of cached latents into a
//!   single representative entry ([`lca`]),
//! - the same condensation grafted onto plain grouped-query attention ([`gqa`]),
//! - verification instruments: error-bound checking, pooling optimality,
//!   deviation statistics, and an arithmetic/cache cost model ([`analysis`]),
//! - deterministic data generation ([`gen`]) and binary snapshot formats ([`io`]).

pub mod analysis;
pub mod error;
pub mod gen;
pub mod gqa;
pub mod io;
pub mod lca;
pub mod mla;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Matrix, Precision, RopeConfig};
