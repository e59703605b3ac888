#![no_std]
//! Scoped temporal memory: canonical facts routed into balanced, time-ordered
//! trees whose summaries are refreshed lazily along dirty paths.
//!
//! The crate is `no_std` (it needs `alloc`). Model-dependent steps are behind
//! the port traits in [`backends`]; deterministic mocks live in
//! [`backends::mock`].

extern crate alloc;

pub mod backends;
pub mod error;
pub mod fixtures;
pub mod index;
pub mod ingest;
pub mod lifecycle;
pub mod memtree;
pub mod retrieval;
pub mod router;
pub mod store;
pub mod substrate;
#[cfg(test)]
mod testutil;

pub use error::{ChunkError, Error, Result};
pub use store::{Store, StoreConfig};
