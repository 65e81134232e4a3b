//! Distance learning over projective-measurement snapshots.
//!
//! The crate covers the whole pipeline: snapshot ensembles on disk,
//! physics samplers with exact oracles, a residual-MLP discriminator,
//! importance-sampling estimation of Csiszár f-divergences, HDBSCAN on the
//! resulting distance matrix, susceptibility and finite-size scaling
//! analysis, and maximum-entropy surrogates.
//!
//! Module map:
//!
//! | module | contents |
//! |--------|----------|
//! | [`snapshot`] | data model, study directory format, dataset splits |
//! | [`samplers`] | 2D Ising (Wolff, enumeration) and TFIM (ED, Born sampling) |
//! | [`nn`] | discriminator network, training, temperature calibration |
//! | [`divergence`] | f-divergence generators, estimators, distance matrices |
//! | [`reweighting`] | Ferrenberg-Swendsen partition ratios and ratio provider |
//! | [`clustering`] | HDBSCAN over a precomputed distance matrix |
//! | [`criticality`] | susceptibilities, Fisher information, FSS collapse, bootstrap |
//! | [`maxent`] | maximum-entropy surrogates with 1- and 2-body marginals |
//! | [`pipeline`] | declarative study runs with stage caching, reports |

pub mod clustering;
pub mod criticality;
pub mod divergence;
pub mod error;
mod fsio;
pub mod maxent;
pub mod nn;
pub mod pipeline;
pub mod reweighting;
pub mod rng;
pub mod samplers;
pub mod snapshot;

pub use error::{Error, Result};
