//! Snapshot generators for the built-in physics models and their exact
//! enumeration oracles.
//!
//! Configurations of `n` two-valued sites are indexed by integers: bit `k`
//! of the index is set when site `k` is `-1`, so index 0 is the all-up state.

pub mod ising;
pub mod tfim;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub use ising::{enumerate_gibbs, ising_energy, wolff_sample, ExactGibbsTable, Ising2DSpec, WolffConfig, WolffRun};
pub use tfim::{born_sample, exact_hellinger_tfim, tfim_ground_state, TfimSpec, WaveFunctionTable};

/// Spin values of configuration `index` on `n` sites.
pub fn decode_config(index: usize, n: usize) -> Vec<i8> {
    (0..n).map(|k| if index >> k & 1 == 1 { -1 } else { 1 }).collect()
}

/// Inverse of [`decode_config`]; `None` if a value is not ±1.
pub fn encode_config(spins: &[i8]) -> Option<usize> {
    let mut idx = 0usize;
    for (k, &s) in spins.iter().enumerate() {
        match s {
            1 => {}
            -1 => idx |= 1 << k,
            _ => return None,
        }
    }
    Some(idx)
}

/// Draws `n` i.i.d. indices from a (not necessarily normalized) table.
pub fn sample_table(weights: &[f64], n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let dist = WeightedIndex::new(weights.iter().map(|&w| w.max(0.0)))
        .map_err(|e| Error::Invalid(format!("cannot sample from table: {e}")))?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}
