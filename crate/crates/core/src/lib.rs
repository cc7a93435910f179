//! Multi-stage, speaker-identity-aware dual-path speech separation.
//!
//! The crate covers the whole pipeline: toy/real corpus access and mixture
//! synthesis ([`mixgen`]), evaluation machinery ([`metrics`]), the
//! `TasTas(I, x1, ..., xn)` model family ([`model`]) built on a small
//! reverse-mode autodiff tape ([`graph`]), and the staged trainer
//! ([`trainer`]) that trains the speaker-identity network, freezes it, then
//! trains and freezes each separation stage in turn.

pub mod audio;
pub mod metrics;
pub mod mixgen;
pub mod graph;
pub mod model;
pub mod report;
pub mod trainer;
