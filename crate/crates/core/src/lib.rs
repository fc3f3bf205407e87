//! Cyclical weight transfer training under differential privacy.
//!
//! A model is passed from site to site; each site trains on its own data with
//! DP-SGD (per-example clipping plus Gaussian noise) and keeps its own Rényi-DP
//! ledger. A site stops participating once its `(ε, δ)` budget would be
//! exceeded. The crate is `no_std` and only needs `alloc`; file formats, CSV
//! ingestion and the experiment runner live in the `cyclic-dp` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod accountant;
pub mod data;
pub mod dp;
pub mod error;
pub mod federation;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod rng;

pub use accountant::{OrderGrid, PrivacyBudget, RdpLedger};
pub use data::{SiteDataSpec, SiteDataset};
pub use dp::{DpSgdConfig, SamplingMode};
pub use error::{Error, Result};
pub use federation::{Mode, RunRecord, TrainingPlan};
pub use matrix::Matrix;
pub use nn::{Activation, ArchitectureSpec, Batch, ModelParams};
pub use rng::NoiseSource;
