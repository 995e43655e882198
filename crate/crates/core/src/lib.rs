//! Multi-attribute, multi-grained adapters for a small transformer.
//!
//! Every sample is seen through several attributes (user, item, category, ...)
//! and, per attribute, through a coarse view (one module shared by the whole
//! dataset) and a fine view (one module per domain of that attribute). The
//! selected low-rank modules are averaged and added onto the frozen backbone
//! weights. Coarse modules are LoRA pairs, fine modules are Kronecker pairs.
//!
//! The crate is `no_std` and only needs `alloc`; file formats, logging and the
//! command line live in the `m2a` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adapters;
pub mod data;
mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod params;
pub mod training;

pub use error::{Error, Result};
