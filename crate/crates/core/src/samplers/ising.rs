//! Classical ferromagnetic Ising model on a periodic L×L square lattice.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::decode_config;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::snapshot::{ParameterPoint, Snapshot, SnapshotEnsemble};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ising2DSpec {
    pub l: usize,
    pub j: f64,
    pub t: f64,
}

impl Ising2DSpec {
    pub fn new(l: usize, j: f64, t: f64) -> Result<Self> {
        let spec = Ising2DSpec { l, j, t };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.l < 2 {
            return Err(Error::Invalid(format!("lattice size {} < 2", self.l)));
        }
        if !(self.j > 0.0) {
            return Err(Error::Invalid(format!("coupling J = {} must be positive", self.j)));
        }
        if !(self.t > 0.0) {
            return Err(Error::Invalid(format!("temperature T = {} must be positive", self.t)));
        }
        Ok(())
    }

    pub fn sites(&self) -> usize {
        self.l * self.l
    }

    pub fn beta(&self) -> f64 {
        1.0 / self.t
    }
}

/// Bond sum over each site's right and down neighbours (2L² bonds).
fn bond_sum(spins: &[i8], l: usize) -> i64 {
    let mut acc = 0i64;
    for r in 0..l {
        let row = r * l;
        let down = ((r + 1) % l) * l;
        for c in 0..l {
            let s = spins[row + c] as i64;
            acc += s * spins[row + (c + 1) % l] as i64;
            acc += s * spins[down + c] as i64;
        }
    }
    acc
}

/// `-J Σ_<ij> s_i s_j` with periodic boundaries.
pub fn ising_energy(spins: &[i8], spec: &Ising2DSpec) -> Result<f64> {
    if spins.len() != spec.sites() {
        return Err(Error::LengthMismatch {
            context: "Ising configuration".into(),
            expected: spec.sites(),
            found: spins.len(),
        });
    }
    if let Some(&v) = spins.iter().find(|&&s| s != 1 && s != -1) {
        return Err(Error::Invalid(format!("Ising spin value {v} is not ±1")));
    }
    Ok(-spec.j * bond_sum(spins, spec.l) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WolffConfig {
    pub equilibration_updates: usize,
    pub thinning_updates: usize,
    pub seed: u64,
}

impl Default for WolffConfig {
    fn default() -> Self {
        WolffConfig {
            equilibration_updates: 1000,
            thinning_updates: 10,
            seed: 0,
        }
    }
}

/// Output of a Wolff run: the snapshots, their energies and the mean
/// flipped-cluster size (a cheap diagnostic of decorrelation per update).
#[derive(Clone, Debug)]
pub struct WolffRun {
    pub ensemble: SnapshotEnsemble,
    pub energies: Vec<f64>,
    pub mean_cluster_size: f64,
}

struct WolffChain {
    l: usize,
    spins: Vec<i8>,
    stack: Vec<usize>,
    p_add: f64,
    rng: crate::rng::Rng,
}

impl WolffChain {
    fn update(&mut self) -> usize {
        let l = self.l;
        let n = l * l;
        let seed = self.rng.random_range(0..n);
        let s0 = self.spins[seed];
        self.spins[seed] = -s0;
        self.stack.clear();
        self.stack.push(seed);
        let mut size = 1;
        while let Some(site) = self.stack.pop() {
            let (r, c) = (site / l, site % l);
            let nbrs = [
                r * l + (c + 1) % l,
                r * l + (c + l - 1) % l,
                ((r + 1) % l) * l + c,
                ((r + l - 1) % l) * l + c,
            ];
            for nb in nbrs {
                if self.spins[nb] == s0 && self.rng.random::<f64>() < self.p_add {
                    self.spins[nb] = -s0;
                    self.stack.push(nb);
                    size += 1;
                }
            }
        }
        size
    }
}

/// Wolff cluster Monte Carlo. After `equilibration_updates` cluster flips,
/// records one snapshot every `thinning_updates` flips.
pub fn wolff_sample(spec: &Ising2DSpec, cfg: &WolffConfig, n_samples: usize, point: ParameterPoint) -> Result<WolffRun> {
    spec.validate()?;
    if n_samples == 0 {
        return Err(Error::Invalid("n_samples must be at least 1".into()));
    }
    if cfg.thinning_updates == 0 {
        return Err(Error::Invalid("thinning_updates must be at least 1".into()));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let spins = (0..spec.sites())
        .map(|_| if rng.random::<bool>() { 1 } else { -1 })
        .collect();
    let mut chain = WolffChain {
        l: spec.l,
        spins,
        stack: Vec::with_capacity(spec.sites()),
        p_add: 1.0 - (-2.0 * spec.j / spec.t).exp(),
        rng,
    };
    for _ in 0..cfg.equilibration_updates {
        chain.update();
    }
    let mut snaps = Vec::with_capacity(n_samples);
    let mut energies = Vec::with_capacity(n_samples);
    let mut flipped = 0usize;
    for _ in 0..n_samples {
        for _ in 0..cfg.thinning_updates {
            flipped += chain.update();
        }
        energies.push(-spec.j * bond_sum(&chain.spins, spec.l) as f64);
        snaps.push(Snapshot(chain.spins.clone()));
    }
    Ok(WolffRun {
        ensemble: SnapshotEnsemble::new(point, "z", snaps)?,
        energies,
        mean_cluster_size: flipped as f64 / (n_samples * cfg.thinning_updates) as f64,
    })
}

/// Exact Gibbs distribution over all 2^(L²) configurations.
#[derive(Clone, Debug)]
pub struct ExactGibbsTable {
    pub probabilities: Vec<f64>,
    pub energies: Vec<f64>,
    pub t: f64,
    pub l: usize,
}

impl ExactGibbsTable {
    pub fn mean_energy(&self) -> f64 {
        self.probabilities.iter().zip(&self.energies).map(|(p, e)| p * e).sum()
    }

    pub fn energy_variance(&self) -> f64 {
        let mean = self.mean_energy();
        self.probabilities
            .iter()
            .zip(&self.energies)
            .map(|(p, e)| p * (e - mean) * (e - mean))
            .sum()
    }

    /// `C_V = Var[H] / T²`.
    pub fn heat_capacity(&self) -> f64 {
        self.energy_variance() / (self.t * self.t)
    }

    /// `ln Z` at this temperature.
    pub fn log_partition(&self) -> f64 {
        let beta = 1.0 / self.t;
        let m = self.energies.iter().map(|e| -beta * e).fold(f64::NEG_INFINITY, f64::max);
        m + self.energies.iter().map(|e| (-beta * e - m).exp()).sum::<f64>().ln()
    }

    pub fn configuration(&self, index: usize) -> Vec<i8> {
        decode_config(index, self.l * self.l)
    }
}

/// Enumerates the Gibbs table; limited to L ≤ 4.
pub fn enumerate_gibbs(spec: &Ising2DSpec) -> Result<ExactGibbsTable> {
    spec.validate()?;
    if spec.l > 4 {
        return Err(Error::Invalid(format!(
            "exact enumeration supports L <= 4, got L = {}",
            spec.l
        )));
    }
    let n = spec.sites();
    let energies: Vec<f64> = (0..1usize << n)
        .map(|idx| -spec.j * bond_sum(&decode_config(idx, n), spec.l) as f64)
        .collect();
    let beta = spec.beta();
    let max_arg = energies.iter().map(|e| -beta * e).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = energies.iter().map(|e| (-beta * e - max_arg).exp()).collect();
    let z: f64 = weights.iter().sum();
    Ok(ExactGibbsTable {
        probabilities: weights.into_iter().map(|w| w / z).collect(),
        energies,
        t: spec.t,
        l: spec.l,
    })
}
