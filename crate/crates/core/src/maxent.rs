//! Maximum-entropy surrogates matching one- and two-body marginals.
//!
//! The surrogate is `q(x) ∝ exp(−Σ_k λ_k f_k(x))` over indicator features
//! `δ_{x_i,a}` and `δ_{x_i,a} δ_{x_j,b}` (`i < j`). The multipliers minimize
//! the convex dual `ln Z(λ) + Σ_k λ_k c_k`, whose gradient is the marginal
//! mismatch `c_k − E_q[f_k]`. The whole configuration space is enumerated.
//!
//! Features with target exactly zero are enforced by removing every state
//! that carries them; the remaining multipliers stay finite.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::rng::rng_from_seed;
use crate::samplers::sample_table;
use crate::snapshot::{Alphabet, ParameterPoint, Snapshot, SnapshotEnsemble};

pub const MAX_STATES: usize = 100_000;
const ARMIJO: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteConfigSpace {
    pub n_sites: usize,
    pub alphabet: Alphabet,
}

impl DiscreteConfigSpace {
    pub fn new(n_sites: usize, alphabet: Alphabet) -> Result<Self> {
        let s = DiscreteConfigSpace { n_sites, alphabet };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.alphabet.len();
        if self.n_sites < 2 || a < 2 {
            return Err(Error::Invalid("space needs at least 2 sites and 2 letters".into()));
        }
        let mut letters = self.alphabet.letters().to_vec();
        letters.sort_unstable();
        letters.dedup();
        if letters.len() != a {
            return Err(Error::Invalid(format!("alphabet {:?} has repeated letters", self.alphabet.0)));
        }
        match a.checked_pow(self.n_sites as u32) {
            Some(n) if n <= MAX_STATES => Ok(()),
            _ => Err(Error::Invalid(format!(
                "{a}^{} states exceed the enumeration limit {MAX_STATES}",
                self.n_sites
            ))),
        }
    }

    pub fn states(&self) -> usize {
        self.alphabet.len().pow(self.n_sites as u32)
    }

    /// Letter indices of state `index`; site `k` is digit `k` in base `A`.
    pub fn digits(&self, mut index: usize) -> Vec<usize> {
        let a = self.alphabet.len();
        (0..self.n_sites)
            .map(|_| {
                let d = index % a;
                index /= a;
                d
            })
            .collect()
    }

    pub fn configuration(&self, index: usize) -> Vec<i8> {
        self.digits(index).into_iter().map(|d| self.alphabet.0[d]).collect()
    }

    pub fn index_of(&self, config: &[i8]) -> Option<usize> {
        if config.len() != self.n_sites {
            return None;
        }
        let a = self.alphabet.len();
        let mut idx = 0;
        for &v in config.iter().rev() {
            idx = idx * a + self.alphabet.index_of(v)?;
        }
        Some(idx)
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        (0..self.n_sites)
            .flat_map(|i| (i + 1..self.n_sites).map(move |j| (i, j)))
            .collect()
    }

    /// One-body features first (`i·A + a`), then pair blocks of `A²`.
    pub fn n_features(&self) -> usize {
        let a = self.alphabet.len();
        let n = self.n_sites;
        n * a + n * (n - 1) / 2 * a * a
    }

    fn active_features(&self, index: usize) -> Vec<usize> {
        let a = self.alphabet.len();
        let d = self.digits(index);
        let n = self.n_sites;
        let mut out: Vec<usize> = (0..n).map(|i| i * a + d[i]).collect();
        let mut block = n * a;
        for i in 0..n {
            for j in i + 1..n {
                out.push(block + d[i] * a + d[j]);
                block += a * a;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginalConstraints {
    pub space: DiscreteConfigSpace,
    /// `one_body[i][a] = P(x_i = a)` by letter index.
    pub one_body: Vec<Vec<f64>>,
    /// Per pair `(i, j)` with `i < j` in [`DiscreteConfigSpace::pairs`]
    /// order, row-major `A × A` table of `P(x_i = a, x_j = b)`.
    pub two_body: Vec<Vec<f64>>,
}

impl MarginalConstraints {
    /// Targets in feature order.
    pub fn targets(&self) -> Vec<f64> {
        self.one_body.iter().chain(&self.two_body).flatten().copied().collect()
    }

    fn from_targets(space: &DiscreteConfigSpace, c: &[f64]) -> Self {
        let a = space.alphabet.len();
        let n = space.n_sites;
        MarginalConstraints {
            space: space.clone(),
            one_body: c[..n * a].chunks(a).map(<[f64]>::to_vec).collect(),
            two_body: c[n * a..].chunks(a * a).map(<[f64]>::to_vec).collect(),
        }
    }

    /// Per-site sums equal one and pair tables reduce to the one-body rows.
    pub fn check_consistency(&self, tol: f64) -> Result<()> {
        let a = self.space.alphabet.len();
        let targets = self.targets();
        if targets.len() != self.space.n_features() {
            return Err(Error::LengthMismatch {
                context: "marginal constraints".into(),
                expected: self.space.n_features(),
                found: targets.len(),
            });
        }
        if targets.iter().any(|&c| !(-tol..=1.0 + tol).contains(&c)) {
            return Err(Error::Invalid("marginal outside [0, 1]".into()));
        }
        for (i, row) in self.one_body.iter().enumerate() {
            if (row.iter().sum::<f64>() - 1.0).abs() > tol {
                return Err(Error::Invalid(format!("site {i} marginals do not sum to 1")));
            }
        }
        for (t, (i, j)) in self.space.pairs().into_iter().enumerate() {
            let tab = &self.two_body[t];
            for x in 0..a {
                let row: f64 = (0..a).map(|y| tab[x * a + y]).sum();
                let col: f64 = (0..a).map(|y| tab[y * a + x]).sum();
                if (row - self.one_body[i][x]).abs() > tol || (col - self.one_body[j][x]).abs() > tol {
                    return Err(Error::Invalid(format!("pair ({i}, {j}) is inconsistent with its one-body marginals")));
                }
            }
        }
        Ok(())
    }
}

/// Feature expectations under an explicit table.
pub fn table_marginals(space: &DiscreteConfigSpace, p: &[f64]) -> Result<MarginalConstraints> {
    space.validate()?;
    if p.len() != space.states() {
        return Err(Error::LengthMismatch {
            context: "probability table".into(),
            expected: space.states(),
            found: p.len(),
        });
    }
    let mut c = vec![0.0; space.n_features()];
    for (x, &px) in p.iter().enumerate() {
        if px != 0.0 {
            for k in space.active_features(x) {
                c[k] += px;
            }
        }
    }
    Ok(MarginalConstraints::from_targets(space, &c))
}

/// Plug-in frequencies of the indicator features.
pub fn empirical_marginals(ensemble: &SnapshotEnsemble, space: &DiscreteConfigSpace) -> Result<MarginalConstraints> {
    table_marginals(space, &empirical_table(ensemble, space)?)
}

/// Empirical distribution of an ensemble over the enumerated space.
pub fn empirical_table(ensemble: &SnapshotEnsemble, space: &DiscreteConfigSpace) -> Result<Vec<f64>> {
    space.validate()?;
    let mut p = vec![0.0; space.states()];
    let w = 1.0 / ensemble.count() as f64;
    for (line, s) in ensemble.snapshots.iter().enumerate() {
        let idx = space.index_of(s.values()).ok_or_else(|| match s.values().iter().find(|&&v| space.alphabet.index_of(v).is_none()) {
            Some(&v) => Error::AlphabetViolation {
                file: format!("point {}", ensemble.point.id),
                line: line + 1,
                value: v as i64,
                alphabet: space.alphabet.0.clone(),
            },
            None => Error::LengthMismatch {
                context: format!("point {} snapshot {}", ensemble.point.id, line + 1),
                expected: space.n_sites,
                found: s.len(),
            },
        })?;
        p[idx] += w;
    }
    Ok(p)
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaxEntConfig {
    /// Maximum marginal mismatch at convergence.
    pub tol: f64,
    pub max_iterations: usize,
}

impl Default for MaxEntConfig {
    fn default() -> Self {
        MaxEntConfig {
            tol: 1e-6,
            max_iterations: 50_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxEntModel {
    pub space: DiscreteConfigSpace,
    /// Multipliers in feature order; zero for features pinned to zero.
    pub lambda: Vec<f64>,
    /// Features whose target is zero; states carrying them have `q = 0`.
    pub zero_features: Vec<usize>,
    pub log_z: f64,
    pub q: Vec<f64>,
    /// Final maximum marginal mismatch.
    pub mismatch: f64,
    pub iterations: usize,
}

impl MaxEntModel {
    pub fn entropy(&self) -> f64 {
        entropy(&self.q)
    }

    pub fn marginals(&self) -> Result<MarginalConstraints> {
        table_marginals(&self.space, &self.q)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fsio::write_json(path, self)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let m: MaxEntModel = fsio::read_json(path)?;
        m.space.validate()?;
        if m.q.len() != m.space.states() || m.lambda.len() != m.space.n_features() {
            return Err(Error::Invalid(format!("{}: model tables do not match the space", path.display())));
        }
        Ok(m)
    }
}

/// Fit diagnostics beside the model.
#[derive(Clone, Debug, PartialEq)]
pub struct MaxEntTrace {
    /// Dual objective after each accepted step, starting at `λ = 0`.
    pub dual: Vec<f64>,
}

struct Problem {
    features: Vec<Vec<usize>>,
    allowed: Vec<usize>,
    targets: Vec<f64>,
}

impl Problem {
    /// Dual value, `q` over allowed states, and `ln Z`.
    fn evaluate(&self, lambda: &[f64]) -> (f64, Vec<f64>, f64) {
        let energies: Vec<f64> = self
            .allowed
            .iter()
            .map(|&x| self.features[x].iter().map(|&k| lambda[k]).sum::<f64>())
            .collect();
        let emin = energies.iter().copied().fold(f64::INFINITY, f64::min);
        let mut q: Vec<f64> = energies.iter().map(|e| (emin - e).exp()).collect();
        let z: f64 = q.iter().sum();
        q.iter_mut().for_each(|v| *v /= z);
        let log_z = z.ln() - emin;
        let dual = log_z + lambda.iter().zip(&self.targets).map(|(l, c)| l * c).sum::<f64>();
        (dual, q, log_z)
    }

    fn gradient(&self, q: &[f64]) -> Vec<f64> {
        let mut g = self.targets.clone();
        for (&x, &qx) in self.allowed.iter().zip(q) {
            for &k in &self.features[x] {
                g[k] -= qx;
            }
        }
        g
    }
}

/// Fits the maximum-entropy distribution matching `constraints`.
pub fn fit_maxent(constraints: &MarginalConstraints, cfg: &MaxEntConfig) -> Result<MaxEntModel> {
    fit_maxent_traced(constraints, cfg).map(|(m, _)| m)
}

/// [`fit_maxent`] also returning the dual objective history.
pub fn fit_maxent_traced(constraints: &MarginalConstraints, cfg: &MaxEntConfig) -> Result<(MaxEntModel, MaxEntTrace)> {
    let space = &constraints.space;
    space.validate()?;
    constraints.check_consistency(1e-9)?;
    if !(cfg.tol > 0.0) {
        return Err(Error::Invalid("tolerance must be positive".into()));
    }
    let targets: Vec<f64> = constraints.targets().iter().map(|c| c.max(0.0)).collect();
    let zero_features: Vec<usize> = (0..targets.len()).filter(|&k| targets[k] == 0.0).collect();
    let features: Vec<Vec<usize>> = (0..space.states()).map(|x| space.active_features(x)).collect();
    let allowed: Vec<usize> = (0..space.states())
        .filter(|&x| features[x].iter().all(|&k| targets[k] > 0.0))
        .collect();
    if allowed.is_empty() {
        return Err(Error::Invalid("constraints exclude every configuration".into()));
    }
    let problem = Problem {
        features,
        allowed,
        targets,
    };

    let nf = space.n_features();
    let mut lambda = vec![0.0; nf];
    let (mut dual, mut q, mut log_z) = problem.evaluate(&lambda);
    let mut grad = problem.gradient(&q);
    let max_abs = |g: &[f64]| g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut history = vec![dual];
    let mut step = 1.0;
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut iterations = 0;
    while max_abs(&grad) > cfg.tol {
        if iterations >= cfg.max_iterations {
            return Err(Error::NoConvergence(format!(
                "maxent fit stopped after {iterations} iterations with marginal mismatch {:.3e}",
                max_abs(&grad)
            )));
        }
        iterations += 1;
        // Barzilai–Borwein trial step, then Armijo backtracking
        if let Some((pl, pg)) = &prev {
            let s: Vec<f64> = lambda.iter().zip(pl).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = grad.iter().zip(pg).map(|(a, b)| a - b).collect();
            let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
            let ss: f64 = s.iter().map(|a| a * a).sum();
            if sy > 0.0 {
                step = (ss / sy).clamp(1e-6, 1e6);
            }
        }
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        let accepted = loop {
            let trial: Vec<f64> = lambda.iter().zip(&grad).map(|(l, g)| l - step * g).collect();
            let (d, tq, tz) = problem.evaluate(&trial);
            if d.is_finite() && d <= dual - ARMIJO * step * g2 {
                break Some((trial, d, tq, tz));
            }
            step *= 0.5;
            if step < 1e-14 {
                break None;
            }
        };
        let Some((trial, d, tq, tz)) = accepted else {
            return Err(Error::NoConvergence(format!(
                "line search stalled with marginal mismatch {:.3e}",
                max_abs(&grad)
            )));
        };
        prev = Some((std::mem::replace(&mut lambda, trial), grad));
        (dual, q, log_z) = (d, tq, tz);
        grad = problem.gradient(&q);
        history.push(dual);
    }
    let mut full_q = vec![0.0; space.states()];
    for (&x, &v) in problem.allowed.iter().zip(&q) {
        full_q[x] = v;
    }
    let model = MaxEntModel {
        space: space.clone(),
        lambda,
        zero_features,
        log_z,
        q: full_q,
        mismatch: max_abs(&grad),
        iterations,
    };
    Ok((model, MaxEntTrace { dual: history }))
}

/// Exact i.i.d. draws from the model table.
pub fn maxent_sample(
    model: &MaxEntModel,
    n: usize,
    seed: u64,
    point: ParameterPoint,
    basis: &str,
) -> Result<SnapshotEnsemble> {
    let mut rng = rng_from_seed(seed);
    let idx = sample_table(&model.q, n, &mut rng)?;
    let snaps = idx.into_iter().map(|i| Snapshot(model.space.configuration(i))).collect();
    SnapshotEnsemble::new(point, basis, snaps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::{exact_fdiv, FDivergenceKind};
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    fn tj_space() -> DiscreteConfigSpace {
        DiscreteConfigSpace::new(7, Alphabet(vec![-1, 1, 2])).unwrap()
    }

    fn tv(p: &[f64], q: &[f64]) -> f64 {
        0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    fn tight() -> MaxEntConfig {
        MaxEntConfig {
            tol: 1e-8,
            ..Default::default()
        }
    }

    fn normalize(mut w: Vec<f64>) -> Vec<f64> {
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        w
    }

    /// `p ∝ exp(Σ h_i(x_i) + Σ J_ij(x_i, x_j))` with random tables.
    fn pairwise_gibbs(space: &DiscreteConfigSpace, scale: f64, seed: u64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        let theta: Vec<f64> = (0..space.n_features()).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        normalize(
            (0..space.states())
                .map(|x| space.active_features(x).iter().map(|&k| theta[k]).sum::<f64>().exp())
                .collect(),
        )
    }

    #[test]
    fn state_codec_round_trip() {
        let s = tj_space();
        assert_eq!(s.states(), 2187);
        assert_eq!(s.n_features(), 7 * 3 + 21 * 9);
        for x in [0, 1, 100, 2186] {
            assert_eq!(s.index_of(&s.configuration(x)), Some(x));
        }
        assert!(DiscreteConfigSpace::new(20, Alphabet(vec![0, 1, 2])).is_err());
    }

    #[test]
    fn deterministic_ensemble_has_indicator_marginals() {
        let s = tj_space();
        let snaps = vec![Snapshot(vec![2, -1, 1, 1, 2, -1, -1]); 5];
        let e = SnapshotEnsemble::new(ParameterPoint::new(0, []), "z", snaps).unwrap();
        let c = empirical_marginals(&e, &s).unwrap();
        assert!(c.targets().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(c.one_body[0], vec![0.0, 0.0, 1.0]);
        c.check_consistency(0.0).unwrap();
        let bad = SnapshotEnsemble::new(ParameterPoint::new(0, []), "z", vec![Snapshot(vec![3, 1, 1, 1, 1, 1, 1])]).unwrap();
        assert!(matches!(empirical_marginals(&bad, &s), Err(Error::AlphabetViolation { .. })));
    }

    #[test]
    fn uniform_letters_give_third_marginals() {
        let s = DiscreteConfigSpace::new(2, Alphabet(vec![-1, 1, 2])).unwrap();
        let mut rng = rng_from_seed(3);
        let n = 10_000;
        let snaps = (0..n)
            .map(|_| Snapshot((0..2).map(|_| s.alphabet.0[rng.random_range(0..3)]).collect()))
            .collect();
        let e = SnapshotEnsemble::new(ParameterPoint::new(0, []), "z", snaps).unwrap();
        let c = empirical_marginals(&e, &s).unwrap();
        let sigma = (1.0 / 3.0 * 2.0 / 3.0 / n as f64).sqrt();
        for row in &c.one_body {
            for &v in row {
                assert!((v - 1.0 / 3.0).abs() < 4.0 * sigma);
            }
        }
        c.check_consistency(1e-12).unwrap();
    }

    #[test]
    fn product_distribution_is_recovered() {
        let s = tj_space();
        let mut rng = rng_from_seed(4);
        let sites: Vec<Vec<f64>> = (0..7).map(|_| normalize((0..3).map(|_| rng.random_range(0.1..1.0)).collect())).collect();
        let p: Vec<f64> = (0..s.states()).map(|x| s.digits(x).iter().enumerate().map(|(i, &d)| sites[i][d]).product()).collect();
        let m = fit_maxent(&table_marginals(&s, &p).unwrap(), &tight()).unwrap();
        assert!(tv(&p, &m.q) < 1e-6, "{}", tv(&p, &m.q));
        assert!(m.mismatch <= 1e-6);
        assert!((m.q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pairwise_gibbs_is_recovered_and_dual_descends() {
        let s = tj_space();
        let p = pairwise_gibbs(&s, 0.5, 5);
        let (m, trace) = fit_maxent_traced(&table_marginals(&s, &p).unwrap(), &tight()).unwrap();
        assert!(tv(&p, &m.q) < 1e-6, "{}", tv(&p, &m.q));
        assert!(trace.dual.windows(2).all(|w| w[1] <= w[0]));
        assert!((m.entropy() - entropy(&p)).abs() < 1e-6);
        assert!(exact_fdiv(FDivergenceKind::Hellinger2, &p, &m.q).unwrap() < 1e-10);
        let fitted = m.marginals().unwrap().targets();
        let target = table_marginals(&s, &p).unwrap().targets();
        assert!(fitted.iter().zip(&target).all(|(a, b)| (a - b).abs() <= 1e-6));
    }

    #[test]
    fn entropy_exceeds_non_gibbs_source() {
        let s = tj_space();
        // three-body structure is invisible to pair marginals
        let p = normalize(
            (0..s.states())
                .map(|x| {
                    let d = s.digits(x);
                    if (d[0] + d[1] + d[2]).is_multiple_of(3) { 5.0 } else { 1.0 }
                })
                .collect(),
        );
        let m = fit_maxent(&table_marginals(&s, &p).unwrap(), &MaxEntConfig::default()).unwrap();
        assert!(m.entropy() > entropy(&p) + 1e-3);
    }

    #[test]
    fn empirical_sources_with_empty_cells() {
        let s = tj_space();
        let source = pairwise_gibbs(&s, 1.0, 6);
        let mut rng = rng_from_seed(7);
        let idx = sample_table(&source, 300, &mut rng).unwrap();
        let mut p = vec![0.0; s.states()];
        for i in idx {
            p[i] += 1.0 / 300.0;
        }
        let c = table_marginals(&s, &p).unwrap();
        let m = fit_maxent(&c, &MaxEntConfig::default()).unwrap();
        assert!(!m.zero_features.is_empty());
        assert!(m.mismatch <= 1e-6);
        assert!(m.entropy() >= entropy(&p));
    }

    #[test]
    fn samples_follow_the_model() {
        let s = DiscreteConfigSpace::new(3, Alphabet(vec![-1, 1, 2])).unwrap();
        let p = pairwise_gibbs(&s, 0.8, 8);
        let m = fit_maxent(&table_marginals(&s, &p).unwrap(), &MaxEntConfig::default()).unwrap();
        let n = 100_000;
        let e = maxent_sample(&m, n, 9, ParameterPoint::new(0, []), "z").unwrap();
        let emp = empirical_marginals(&e, &s).unwrap().targets();
        let model = m.marginals().unwrap().targets();
        for (a, b) in emp.iter().zip(&model) {
            let sigma = (b * (1.0 - b) / n as f64).sqrt().max(1e-9);
            assert!((a - b).abs() < 4.0 * sigma, "{a} vs {b}");
        }
        let mut point = m.clone();
        point.q = vec![0.0; s.states()];
        point.q[5] = 1.0;
        let e = maxent_sample(&point, 50, 1, ParameterPoint::new(0, []), "z").unwrap();
        assert!(e.snapshots.iter().all(|x| x.values() == s.configuration(5).as_slice()));
    }

    #[test]
    fn model_json_round_trip() {
        let s = DiscreteConfigSpace::new(3, Alphabet(vec![0, 1])).unwrap();
        let p = pairwise_gibbs(&s, 0.3, 10);
        let m = fit_maxent(&table_marginals(&s, &p).unwrap(), &MaxEntConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.write_json(&path).unwrap();
        assert_eq!(MaxEntModel::read_json(&path).unwrap(), m);
    }

    #[test]
    fn inconsistent_constraints_are_rejected() {
        let s = DiscreteConfigSpace::new(2, Alphabet(vec![0, 1])).unwrap();
        let mut c = table_marginals(&s, &[0.25; 4]).unwrap();
        c.one_body[0] = vec![0.9, 0.1];
        assert!(fit_maxent(&c, &MaxEntConfig::default()).is_err());
    }
}
