//! Single-histogram (Ferrenberg–Swendsen) reweighting for Gibbs ensembles.
//!
//! `Z(β')/Z(β) = ⟨exp(−(β' − β) H)⟩_β`, so the density ratio between two
//! temperatures is available from energies alone:
//! `p_{T'}(x)/p_T(x) = (Z_T/Z_{T'}) exp(−(β' − β) H(x))`.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::divergence::RatioProvider;
use crate::error::{Error, Result};
use crate::samplers::{ising_energy, Ising2DSpec};
use crate::snapshot::{Snapshot, SnapshotEnsemble};

/// Exponent spread above which a warning is logged.
pub const SPREAD_WARN: f64 = 30.0;
/// Exponent spread above which reweighting is refused.
pub const SPREAD_MAX: f64 = 50.0;

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyTaggedEnsemble {
    pub ensemble: SnapshotEnsemble,
    pub energies: Vec<f64>,
    pub t: f64,
}

impl EnergyTaggedEnsemble {
    pub fn new(ensemble: SnapshotEnsemble, energies: Vec<f64>, t: f64) -> Result<Self> {
        if energies.len() != ensemble.count() {
            return Err(Error::LengthMismatch {
                context: format!("energies of point {}", ensemble.point.id),
                expected: ensemble.count(),
                found: energies.len(),
            });
        }
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::Invalid(format!("temperature {t} must be positive")));
        }
        if energies.iter().any(|e| !e.is_finite()) {
            return Err(Error::Numerical("non-finite energy tag".into()));
        }
        Ok(EnergyTaggedEnsemble { ensemble, energies, t })
    }

    /// Tags each snapshot with its Ising energy.
    pub fn from_ising(ensemble: SnapshotEnsemble, spec: &Ising2DSpec) -> Result<Self> {
        let energies = ensemble
            .snapshots
            .iter()
            .map(|s| ising_energy(s.values(), spec))
            .collect::<Result<Vec<_>>>()?;
        Self::new(ensemble, energies, spec.t)
    }

    /// Checks the tags against recomputed energies (tolerance `1e-10`).
    pub fn verify_energies(&self, spec: &Ising2DSpec) -> Result<()> {
        for (k, (s, &e)) in self.ensemble.snapshots.iter().zip(&self.energies).enumerate() {
            let h = ising_energy(s.values(), spec)?;
            if (h - e).abs() > 1e-10 {
                return Err(Error::Invalid(format!(
                    "point {} snapshot {k}: tagged energy {e} but H(x) = {h}",
                    self.ensemble.point.id
                )));
            }
        }
        Ok(())
    }

    pub fn beta(&self) -> f64 {
        1.0 / self.t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionRatio {
    /// `ln(Z_target / Z_source)`.
    pub log_ratio: f64,
    /// Standard error of `log_ratio` (delta method).
    pub log_stderr: f64,
    /// `max − min` of the exponents `−Δβ H`.
    pub spread: f64,
}

impl PartitionRatio {
    pub fn ratio(&self) -> f64 {
        self.log_ratio.exp()
    }
}

/// `ln ⟨exp(−(β_target − β) H)⟩` over the ensemble, via log-sum-exp.
pub fn partition_ratio(ens: &EnergyTaggedEnsemble, t_target: f64) -> Result<PartitionRatio> {
    if !(t_target > 0.0) || !t_target.is_finite() {
        return Err(Error::Invalid(format!("target temperature {t_target} must be positive")));
    }
    let db = 1.0 / t_target - ens.beta();
    let args: Vec<f64> = ens.energies.iter().map(|h| -db * h).collect();
    let max = args.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = args.iter().copied().fold(f64::INFINITY, f64::min);
    let spread = max - min;
    if spread > SPREAD_MAX {
        return Err(Error::Numerical(format!(
            "reweighting T = {} → {t_target}: exponent spread {spread:.1} exceeds {SPREAD_MAX}",
            ens.t
        )));
    }
    if spread > SPREAD_WARN {
        log::warn!(
            "reweighting T = {} → {t_target}: exponent spread {spread:.1}; variance may be large",
            ens.t
        );
    }
    let n = args.len() as f64;
    let w: Vec<f64> = args.iter().map(|a| (a - max).exp()).collect();
    let mean = w.iter().sum::<f64>() / n;
    let var = if args.len() > 1 {
        w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(PartitionRatio {
        log_ratio: max + mean.ln(),
        log_stderr: (var / n).sqrt() / mean,
        spread,
    })
}

/// `ln Z_b − ln Z_a` as the mean of the forward estimate from `a` and the
/// negated backward estimate from `b`.
fn symmetric_log_ratio(a: &EnergyTaggedEnsemble, b: &EnergyTaggedEnsemble) -> Result<f64> {
    let fwd = partition_ratio(a, b.t)?.log_ratio;
    let bwd = partition_ratio(b, a.t)?.log_ratio;
    Ok(0.5 * (fwd - bwd))
}

/// Ratio provider with scores `s_k(x) = −β_k H(x) − ln Z_k`.
///
/// `ln Z_k` is known up to a common constant, chained through adjacent
/// temperatures, so `s_j − s_i = ln(Z_i/Z_j) − (β_j − β_i) H(x)`.
#[derive(Clone, Debug)]
pub struct ReweightingProvider {
    l: usize,
    j: f64,
    /// point id → (β, ln Z relative to the first temperature)
    points: BTreeMap<usize, (f64, f64)>,
}

impl ReweightingProvider {
    /// Chains partition ratios over temperatures sorted ascending; only
    /// neighbouring temperatures are reweighted against each other.
    pub fn adjacent(ensembles: &[EnergyTaggedEnsemble], l: usize, j: f64) -> Result<Self> {
        if ensembles.is_empty() {
            return Err(Error::EmptyEnsemble("reweighting ensembles".into()));
        }
        let mut sorted: Vec<&EnergyTaggedEnsemble> = ensembles.iter().collect();
        sorted.sort_by(|a, b| a.t.total_cmp(&b.t));
        let mut points = BTreeMap::new();
        let mut log_z = 0.0;
        for (k, e) in sorted.iter().enumerate() {
            if k > 0 {
                log_z += symmetric_log_ratio(sorted[k - 1], e)?;
            }
            if points.insert(e.ensemble.point.id, (e.beta(), log_z)).is_some() {
                return Err(Error::DuplicateId(e.ensemble.point.id));
            }
        }
        Ok(ReweightingProvider { l, j, points })
    }

    /// Provider for one pair of temperatures.
    pub fn pair(a: &EnergyTaggedEnsemble, b: &EnergyTaggedEnsemble, l: usize, j: f64) -> Result<Self> {
        Self::adjacent(&[a.clone(), b.clone()], l, j)
    }

    /// `ln Z` of each point relative to the lowest temperature.
    pub fn log_partitions(&self) -> BTreeMap<usize, f64> {
        self.points.iter().map(|(&id, &(_, lz))| (id, lz)).collect()
    }
}

impl RatioProvider for ReweightingProvider {
    fn describe(&self) -> String {
        format!("reweight(L={}, J={})", self.l, self.j)
    }

    fn log_scores(&self, snapshots: &[Snapshot], _basis: &str, points: &[usize]) -> Result<Array2<f64>> {
        let spec = Ising2DSpec::new(self.l, self.j, 1.0)?;
        let coeffs: Vec<(f64, f64)> = points
            .iter()
            .map(|p| {
                self.points
                    .get(p)
                    .copied()
                    .ok_or_else(|| Error::Invalid(format!("point {p} has no reweighting temperature")))
            })
            .collect::<Result<_>>()?;
        let mut out = Array2::zeros((snapshots.len(), points.len()));
        for (r, s) in snapshots.iter().enumerate() {
            let h = ising_energy(s.values(), &spec)?;
            for (c, &(beta, log_z)) in coeffs.iter().enumerate() {
                out[[r, c]] = -beta * h - log_z;
            }
        }
        Ok(out)
    }
}

/// `C_V = Var[H] / T²` with the unbiased sample variance.
pub fn heat_capacity(ens: &EnergyTaggedEnsemble) -> Result<f64> {
    heat_capacity_from_energies(&ens.energies, ens.t)
}

pub fn heat_capacity_from_energies(energies: &[f64], t: f64) -> Result<f64> {
    if energies.len() < 2 {
        return Err(Error::Invalid("heat capacity needs at least two energies".into()));
    }
    let n = energies.len() as f64;
    let mean = energies.iter().sum::<f64>() / n;
    let var = energies.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(var / (t * t))
}

/// Fisher information along temperature, `I(T) = C_V / T²`.
pub fn fisher_information_temperature(ens: &EnergyTaggedEnsemble) -> Result<f64> {
    Ok(heat_capacity(ens)? / (ens.t * ens.t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::{estimate_pairwise, exact_fdiv, FDivergenceKind};
    use crate::rng::rng_from_seed;
    use crate::samplers::{enumerate_gibbs, sample_table, ExactGibbsTable};
    use crate::snapshot::ParameterPoint;

    fn exact_sample(table: &ExactGibbsTable, id: usize, n: usize, seed: u64) -> EnergyTaggedEnsemble {
        let idx = sample_table(&table.probabilities, n, &mut rng_from_seed(seed)).unwrap();
        let snaps = idx.iter().map(|&i| Snapshot(table.configuration(i))).collect();
        let energies = idx.iter().map(|&i| table.energies[i]).collect();
        let pt = ParameterPoint::new(id, [("T".to_string(), table.t)]);
        EnergyTaggedEnsemble::new(SnapshotEnsemble::new(pt, "z", snaps).unwrap(), energies, table.t).unwrap()
    }

    fn table(t: f64) -> ExactGibbsTable {
        enumerate_gibbs(&Ising2DSpec::new(3, 1.0, t).unwrap()).unwrap()
    }

    #[test]
    fn identity_ratio_is_exact() {
        let e = exact_sample(&table(3.0), 1, 500, 1);
        let r = partition_ratio(&e, 3.0).unwrap();
        assert_eq!(r.log_ratio, 0.0);
        assert_eq!(r.ratio(), 1.0);
    }

    #[test]
    fn ratio_matches_enumeration() {
        let (a, b) = (table(3.0), table(3.2));
        let e = exact_sample(&a, 1, 100_000, 2);
        let r = partition_ratio(&e, 3.2).unwrap();
        let exact = b.log_partition() - a.log_partition();
        assert!((r.log_ratio - exact).abs() < 3.0 * r.log_stderr, "{} vs {exact} ± {}", r.log_ratio, r.log_stderr);
        e.verify_energies(&Ising2DSpec::new(3, 1.0, 3.0).unwrap()).unwrap();
    }

    #[test]
    fn halves_agree() {
        let e = exact_sample(&table(2.5), 1, 40_000, 3);
        let half = |lo: usize, hi: usize| {
            let idx: Vec<usize> = (lo..hi).collect();
            EnergyTaggedEnsemble::new(e.ensemble.subset(&idx), e.energies[lo..hi].to_vec(), e.t).unwrap()
        };
        let (a, b) = (half(0, 20_000), half(20_000, 40_000));
        let (ra, rb) = (partition_ratio(&a, 2.7).unwrap(), partition_ratio(&b, 2.7).unwrap());
        let se = (ra.log_stderr.powi(2) + rb.log_stderr.powi(2)).sqrt();
        assert!((ra.log_ratio - rb.log_ratio).abs() < 3.0 * se);
    }

    #[test]
    fn ratios_chain() {
        let (t1, t2) = (table(2.4), table(2.6));
        let e1 = exact_sample(&t1, 1, 50_000, 4);
        let e2 = exact_sample(&t2, 2, 50_000, 5);
        let r12 = partition_ratio(&e1, 2.6).unwrap();
        let r23 = partition_ratio(&e2, 2.8).unwrap();
        let r13 = partition_ratio(&e1, 2.8).unwrap();
        let se = (r12.log_stderr.powi(2) + r23.log_stderr.powi(2) + r13.log_stderr.powi(2)).sqrt();
        assert!((r12.log_ratio + r23.log_ratio - r13.log_ratio).abs() < 3.0 * se);
    }

    #[test]
    fn wide_spread_is_refused() {
        let spec = Ising2DSpec::new(16, 1.0, 2.0).unwrap();
        let up = Snapshot(vec![1; 256]);
        let mut checker = vec![1i8; 256];
        for (k, v) in checker.iter_mut().enumerate() {
            if (k / 16 + k % 16) % 2 == 1 {
                *v = -1;
            }
        }
        let pt = ParameterPoint::new(1, [("T".to_string(), 2.0)]);
        let ens = SnapshotEnsemble::new(pt, "z", vec![up, Snapshot(checker)]).unwrap();
        let e = EnergyTaggedEnsemble::from_ising(ens, &spec).unwrap();
        assert_eq!(e.energies, vec![-512.0, 512.0]);
        // Δβ · ΔH = (1/2 − 1/2.5) · 1024 ≈ 102
        assert!(partition_ratio(&e, 2.5).is_err());
        assert!(partition_ratio(&e, 2.01).is_ok());
    }

    #[test]
    fn provider_hellinger_matches_enumeration() {
        let (a, b) = (table(2.2), table(2.3));
        let ea = exact_sample(&a, 1, 50_000, 6);
        let eb = exact_sample(&b, 2, 50_000, 7);
        let prov = ReweightingProvider::pair(&ea, &eb, 3, 1.0).unwrap();
        let est = estimate_pairwise(FDivergenceKind::Hellinger2, &prov, &ea.ensemble, &eb.ensemble).unwrap();
        let exact = exact_fdiv(FDivergenceKind::Hellinger2, &a.probabilities, &b.probabilities).unwrap();
        assert!((est.value - exact).abs() < 3.0 * est.stderr, "{} vs {exact} ± {}", est.value, est.stderr);
    }

    #[test]
    fn provider_is_antisymmetric_and_trivial_at_equal_temperature() {
        let ea = exact_sample(&table(2.2), 1, 2000, 8);
        let eb = exact_sample(&table(2.3), 2, 2000, 9);
        let prov = ReweightingProvider::pair(&ea, &eb, 3, 1.0).unwrap();
        for s in ea.ensemble.snapshots.iter().take(50) {
            assert_eq!(prov.log_ratio(s, "z", 1, 2).unwrap(), -prov.log_ratio(s, "z", 2, 1).unwrap());
        }
        let same = ReweightingProvider::pair(&ea, &{
            let mut c = ea.clone();
            c.ensemble.point.id = 2;
            c
        }, 3, 1.0)
        .unwrap();
        for s in ea.ensemble.snapshots.iter().take(50) {
            assert_eq!(same.log_ratio(s, "z", 1, 2).unwrap(), 0.0);
        }
        let mut c = ea.clone();
        c.ensemble.point.id = 2;
        let est = estimate_pairwise(FDivergenceKind::Hellinger2, &same, &ea.ensemble, &c.ensemble).unwrap();
        assert!(est.value.abs() < 1e-12);
    }

    #[test]
    fn heat_capacity_examples() {
        let pt = ParameterPoint::new(1, [("T".to_string(), 2.0)]);
        let ens = SnapshotEnsemble::new(pt, "z", vec![Snapshot(vec![1; 9]); 5]).unwrap();
        let e = EnergyTaggedEnsemble::new(ens, vec![-18.0; 5], 2.0).unwrap();
        assert_eq!(heat_capacity(&e).unwrap(), 0.0);

        let t = table(3.0);
        let n = 100_000;
        let e = exact_sample(&t, 1, n, 10);
        let cv = heat_capacity(&e).unwrap();
        let mean = t.mean_energy();
        let var = t.energy_variance();
        let mu4: f64 = t.probabilities.iter().zip(&t.energies).map(|(p, h)| p * (h - mean).powi(4)).sum();
        let se = ((mu4 - var * var) / n as f64).sqrt() / 9.0;
        assert!((cv - t.heat_capacity()).abs() < 3.0 * se, "{cv} vs {} ± {se}", t.heat_capacity());
        assert!((fisher_information_temperature(&e).unwrap() - cv / 9.0).abs() < 1e-15);
    }
}
