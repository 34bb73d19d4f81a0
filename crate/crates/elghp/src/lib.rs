//! Gradient hexa pattern face-descriptor engine.
//!
//! The crate is organized around five building blocks:
//!
//! - [`imageio`] — PGM loading and the canonical 64x64 bilinear resize.
//! - [`descriptor`] — directional derivatives, 9-bit pairwise codes, and the
//!   concatenated 512-bin histogram feature vector.
//! - [`matcher`] — L1 distance, 1NN classification, and the random-split
//!   recognition-accuracy harness.
//! - [`pipeline`] — worker threads split between feature extraction and
//!   classification, linked by per-extractor queues.
//! - [`netproto`] — the TCP verification/registration protocol; verification
//!   ships feature vectors, never images.
//!
//! The `elghp` binary (see [`cli`]) exposes all of it as subcommands.

pub mod cli;
pub mod descriptor;
pub mod imageio;
pub mod matcher;
pub mod netproto;
pub mod pipeline;
