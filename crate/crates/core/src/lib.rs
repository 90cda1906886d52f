// SPDX-License-Identifier: MIT OR Apache-2.0

//! Locate latent planning sites in autoregressive transformers.
//!
//! The crate trains linear probes that decode future tokens from hidden
//! states and runs causal interventions (activation patching, head and
//! path patching, steering vectors) on rhyming-couplet prompts, with
//! Wilson and pair-clustered bootstrap intervals on every rate.
//!
//! Modules follow the experimental pipeline: [`phonology`] decides rhymes,
//! [`corpus`] builds datasets and prompt pairs, [`backend`] runs models with
//! hook sites, [`probing`], [`interventions`] and [`circuits`] implement the
//! experiments, [`stats`] quantifies uncertainty and [`runner`] ties them to
//! config files, run records and reports.

pub mod backend;
pub mod circuits;
pub mod corpus;
pub mod error;
pub mod interventions;
pub mod phonology;
pub mod probing;
pub mod runner;
pub mod stats;

pub use error::{Error, Result};
