//! Fairness-aware binary classification under federated differential privacy.
//!
//! This crate implements a two-step plug-in classifier that controls
//! demographic disparity while every site's released statistics satisfy an
//! (epsilon, delta) differential-privacy constraint:
//!
//! * **S1** — each site privatises its empirical class probabilities and
//!   kernel-density regression estimates (Gaussian mechanism for scalars,
//!   truncated Gaussian-process noise for functions); the central server
//!   aggregates them by weighted sums ([`federation`]).
//! * **S2** — the adjusted decision threshold is searched privately, either
//!   through noisy dyadic count trees evaluated on a fixed grid (federated
//!   path) or by vertically perturbing the exact empirical disparity curve
//!   (single-server path) ([`threshold`]).
//!
//! The final classifier shifts each group's decision threshold by
//! `tau * (2a - 1) / (2 * pi_a)` ([`classifier`]). A synthetic-data generator,
//! CSV ingestion, the end-to-end pipeline ([`datagen`]) and a reproducible
//! experiment harness ([`experiment`]) round out the crate.
//!
//! All randomness flows through [`core::RngStream`], a seeded lineage scheme
//! that gives every (site, mechanism, replicate) its own independent stream,
//! so reruns with the same master seed are bit-identical.

pub mod classifier;
pub mod core;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod kde;
pub mod threshold;

pub use crate::core::{
    FederationConfig, LabeledRecord, NoiseMode, PrivacyBudget, RngStream, SiteDataset,
};
pub use crate::error::{Error, Flag, Result};

pub mod privacy;
