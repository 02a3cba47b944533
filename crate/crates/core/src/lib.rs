//! Desk-scale, deterministic simulator of synchronous data-parallel training.
//!
//! The crate trains a small feed-forward network across K simulated workers
//! and one parameter server, under three synchronization protocols with
//! bit-exact communication accounting:
//!
//! * **plump** - the standard baseline: full updates pushed, full model
//!   pulled, `n` payload words each way per round;
//! * **quant** - pushes 8-bit stochastically quantized updates in buckets of
//!   512 (unbiased decode), pulls the full model;
//! * **slim** - pushes and pulls only a communication set: the top
//!   significance core (`|w| + c|g|`, key-cached on the wire at `beta * n`
//!   words) plus a per-worker random explorer (key-value pairs at
//!   `2 * (alpha - beta) * n` words), with a full push every q-th round to
//!   refresh the magnitudes the next core selection uses.
//!
//! Everything is a pure function of the experiment seed: runs are bitwise
//! reproducible regardless of worker thread count.

pub mod codec;
pub mod data;
pub mod error;
pub mod model;
pub mod seeds;
pub mod selection;
pub mod sim;

pub use error::{Error, Result};
