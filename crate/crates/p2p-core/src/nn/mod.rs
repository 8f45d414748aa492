//! Double-precision tape autodiff and the layers built on it.
//!
//! Parameters live in a [`ParamStore`]; each forward pass records onto a
//! [`Tape`] whose `backward` accumulates parameter gradients. Everything is
//! f64 and single-threaded per tape; parallelism happens across samples with
//! a fixed reduction order, so training is bit-reproducible.

pub mod adamw;
pub mod kernels;
pub mod layers;
pub mod params;
pub mod pe;
pub mod tape;

pub use adamw::AdamW;
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
