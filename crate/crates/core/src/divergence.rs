//! Csiszár f-divergences and their estimation from snapshots.
//!
//! `D_f(q‖p) = Σ_x p(x) f(q(x)/p(x))`. Estimation uses an importance
//! sampling average over the pooled snapshots of both points, driven by a
//! [`RatioProvider`] that supplies log-density scores.
//!
//! Direction convention: [`estimate_pairwise`]`(i, j)` estimates `D_f(q‖p)`
//! with `p` the distribution of point `i` and `q` that of point `j`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::snapshot::{Snapshot, SnapshotEnsemble};

/// Bound on `|log R|` applied before the generator is evaluated.
pub const LOG_RATIO_CLIP: f64 = 30.0;
/// Fraction of clipped samples at which an estimate is flagged.
pub const CLIP_FLAG_FRACTION: f64 = 0.01;
const NORMALIZATION_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FDivergenceKind {
    /// `f(t) = (√t − 1)²`
    Hellinger2,
    /// `f(t) = t ln t`
    Kl,
    /// `f(t) = |t − 1| / 2`
    Tv,
    /// `f(t) = (t − 1)² / (t + 1)`
    Lecam,
    /// `f(t) = (t ln t − (t + 1) ln((t + 1)/2)) / 2`
    Js,
}

impl FDivergenceKind {
    pub const ALL: [FDivergenceKind; 5] = [Self::Hellinger2, Self::Kl, Self::Tv, Self::Lecam, Self::Js];

    pub fn name(self) -> &'static str {
        match self {
            Self::Hellinger2 => "hellinger2",
            Self::Kl => "kl",
            Self::Tv => "tv",
            Self::Lecam => "lecam",
            Self::Js => "js",
        }
    }

    /// `f''(1)`; `None` for total variation, whose generator has a kink at 1.
    pub fn second_derivative_at_one(self) -> Option<f64> {
        match self {
            Self::Hellinger2 => Some(0.5),
            Self::Kl | Self::Lecam => Some(1.0),
            Self::Js => Some(0.25),
            Self::Tv => None,
        }
    }

    /// Whether the square root of the divergence is a metric.
    pub fn metric_sqrt(self) -> bool {
        matches!(self, Self::Hellinger2 | Self::Lecam | Self::Js)
    }

    pub fn is_symmetric(self) -> bool {
        self != Self::Kl
    }

    /// Upper bound of the divergence, if finite.
    pub fn max_value(self) -> Option<f64> {
        match self {
            Self::Hellinger2 | Self::Lecam => Some(2.0),
            Self::Tv => Some(1.0),
            Self::Js => Some(std::f64::consts::LN_2),
            Self::Kl => None,
        }
    }

    /// Generator at `t ∈ [0, ∞)`; `t = 0` is the right limit.
    pub fn f(self, t: f64) -> f64 {
        match self {
            Self::Hellinger2 => (t.sqrt() - 1.0).powi(2),
            Self::Kl => xlogx(t),
            Self::Tv => 0.5 * (t - 1.0).abs(),
            Self::Lecam => (t - 1.0).powi(2) / (t + 1.0),
            Self::Js => 0.5 * (xlogx(t) - (t + 1.0) * ((t + 1.0) / 2.0).ln()),
        }
    }

    /// Perspective `f*(s) = s f(1/s)` at `s ∈ [0, ∞)`; `f*(0) = lim f(t)/t`.
    pub fn f_star(self, s: f64) -> f64 {
        match self {
            Self::Hellinger2 => (1.0 - s.sqrt()).powi(2),
            Self::Kl => {
                if s == 0.0 {
                    f64::INFINITY
                } else {
                    -s.ln()
                }
            }
            // the remaining generators are self-conjugate
            Self::Tv | Self::Lecam | Self::Js => self.f(s),
        }
    }
}

impl fmt::Display for FDivergenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FDivergenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hellinger2" | "hellinger" | "h2" => Ok(Self::Hellinger2),
            "kl" => Ok(Self::Kl),
            "tv" => Ok(Self::Tv),
            "lecam" => Ok(Self::Lecam),
            "js" | "jensenshannon" | "jensen-shannon" => Ok(Self::Js),
            other => Err(Error::Invalid(format!("unknown divergence kind `{other}`"))),
        }
    }
}

fn xlogx(t: f64) -> f64 {
    if t == 0.0 {
        0.0
    } else {
        t * t.ln()
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Generator value with domain checking.
pub fn f_eval(kind: FDivergenceKind, t: f64) -> Result<f64> {
    if !(t >= 0.0) || t.is_infinite() {
        return Err(Error::Domain(format!("{kind}: generator argument {t} outside [0, ∞)")));
    }
    Ok(kind.f(t))
}

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    if let Some(v) = p.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("{name} contains invalid probability {v}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::Domain(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

/// `Σ_x p(x) f(q(x)/p(x))` on explicit tables.
///
/// Terms with `p(x) = 0` contribute `q(x) f*(0)`, which is infinite for KL.
pub fn exact_fdiv(kind: FDivergenceKind, p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            context: "probability tables".into(),
            expected: p.len(),
            found: q.len(),
        });
    }
    check_distribution("p", p)?;
    check_distribution("q", q)?;
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        acc += match (pi > 0.0, qi > 0.0) {
            (true, _) => pi * kind.f(qi / pi),
            (false, true) => qi * kind.f_star(0.0),
            (false, false) => 0.0,
        };
    }
    Ok(acc)
}

/// Source of log-density scores.
///
/// For point `k`, basis `α` and snapshot `x`, the score `s_k(x, α)` must equal
/// `log q_k(x, α) + c(x, α)` for a function `c` shared by all points, where
/// `q_k(x, α) = q_k(x | α) π_α^(k)` is the joint density of snapshot and basis
/// label. Log ratios are differences of scores, which makes them exactly
/// antisymmetric.
pub trait RatioProvider: Sync {
    /// Short description recorded in matrix metadata.
    fn describe(&self) -> String;

    /// Scores for each snapshot (rows) and each requested point id (columns).
    fn log_scores(&self, snapshots: &[Snapshot], basis: &str, points: &[usize]) -> Result<Array2<f64>>;

    /// `log q_j(x, α) / q_i(x, α)`, the density ratio with class priors removed.
    fn log_ratio(&self, x: &Snapshot, basis: &str, i: usize, j: usize) -> Result<f64> {
        let s = self.log_scores(std::slice::from_ref(x), basis, &[i, j])?;
        Ok(s[[0, 1]] - s[[0, 0]])
    }
}

/// Provider backed by explicit probability tables.
pub struct ExactTableProvider {
    tables: HashMap<(usize, String), Vec<f64>>,
    basis_fractions: HashMap<(usize, String), f64>,
    index: Box<dyn Fn(&[i8]) -> Option<usize> + Send + Sync>,
}

impl ExactTableProvider {
    /// Tables indexed with [`crate::samplers::encode_config`].
    pub fn new() -> Self {
        Self::with_index(crate::samplers::encode_config)
    }

    pub fn with_index(index: impl Fn(&[i8]) -> Option<usize> + Send + Sync + 'static) -> Self {
        ExactTableProvider {
            tables: HashMap::new(),
            basis_fractions: HashMap::new(),
            index: Box::new(index),
        }
    }

    /// Registers the conditional table `q_k(· | α)` and the basis fraction `π_α^(k)`.
    pub fn insert(&mut self, point: usize, basis: &str, table: Vec<f64>, basis_fraction: f64) -> Result<()> {
        check_distribution(&format!("table for point {point}, basis {basis}"), &table)?;
        if !(basis_fraction > 0.0 && basis_fraction <= 1.0) {
            return Err(Error::Invalid(format!("basis fraction {basis_fraction} outside (0, 1]")));
        }
        self.tables.insert((point, basis.to_string()), table);
        self.basis_fractions.insert((point, basis.to_string()), basis_fraction);
        Ok(())
    }
}

impl Default for ExactTableProvider {
    fn default() -> Self {
        Self::new()
    }
}

impl RatioProvider for ExactTableProvider {
    fn describe(&self) -> String {
        "exact".into()
    }

    fn log_scores(&self, snapshots: &[Snapshot], basis: &str, points: &[usize]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((snapshots.len(), points.len()));
        for (c, &k) in points.iter().enumerate() {
            let key = (k, basis.to_string());
            let table = self
                .tables
                .get(&key)
                .ok_or_else(|| Error::Invalid(format!("no table for point {k}, basis {basis}")))?;
            let log_frac = self.basis_fractions[&key].ln();
            for (r, x) in snapshots.iter().enumerate() {
                let idx = (self.index)(x.values())
                    .filter(|&i| i < table.len())
                    .ok_or_else(|| Error::Invalid(format!("snapshot {:?} has no table index", x.values())))?;
                out[[r, c]] = table[idx].ln() + log_frac;
            }
        }
        Ok(out)
    }
}

/// Importance-sampling summand `w f((π_p/π_q)(π_α^p/π_α^q) R)` for one sample.
///
/// `log_r` is the (already clipped) log posterior ratio `log R`,
/// `log_prior_ratio = ln(π_p/π_q)`, `log_basis_ratio = ln(π_α^p/π_α^q)`,
/// and `w = 1/(π_p (1 + R))`.
pub fn importance_summand(
    kind: FDivergenceKind,
    log_r: f64,
    log_prior_ratio: f64,
    log_basis_ratio: f64,
    pi_p: f64,
) -> f64 {
    let log_t = log_r + log_prior_ratio + log_basis_ratio;
    let log_w = -pi_p.ln() - softplus(log_r);
    if log_t <= 0.0 {
        kind.f(log_t.exp()) * log_w.exp()
    } else {
        // w f(t) = (w t) f*(1/t), which stays finite as t grows
        (log_w + log_t).exp() * kind.f_star((-log_t).exp())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEstimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: usize,
    pub clipped_fraction: f64,
    /// Set when at least 1% of the log ratios were clipped.
    pub clip_flagged: bool,
}

/// Log ratios `log q(x, α)/p(x, α)` for the pooled samples of one basis.
struct BasisBlock {
    n_p: usize,
    n_q: usize,
    log_rho: Vec<f64>,
}

fn estimate_blocks(kind: FDivergenceKind, blocks: &[BasisBlock]) -> Result<PairEstimate> {
    let n_p: usize = blocks.iter().map(|b| b.n_p).sum();
    let n_q: usize = blocks.iter().map(|b| b.n_q).sum();
    if n_p == 0 || n_q == 0 {
        return Err(Error::EmptyEnsemble("validation set for divergence estimate".into()));
    }
    let total = (n_p + n_q) as f64;
    let pi_p = n_p as f64 / total;
    let a = (n_p as f64).ln() - (n_q as f64).ln();
    let mut summands = Vec::with_capacity(n_p + n_q);
    let mut clipped = 0usize;
    for b in blocks {
        let basis_ratio = (b.n_p as f64 / n_p as f64) / (b.n_q as f64 / n_q as f64);
        let lb = basis_ratio.ln();
        for &lr in &b.log_rho {
            if lr.is_nan() {
                return Err(Error::Numerical("provider returned a NaN log ratio".into()));
            }
            // R = ρ π_q/π_p; then (π_p/π_q)(π_α^p/π_α^q) R = ρ π_α^p/π_α^q
            let raw = lr - a;
            let log_r = raw.clamp(-LOG_RATIO_CLIP, LOG_RATIO_CLIP);
            if log_r != raw {
                clipped += 1;
            }
            summands.push(importance_summand(kind, log_r, a, lb, pi_p));
        }
    }
    let n = summands.len() as f64;
    let mean = summands.iter().sum::<f64>() / n;
    let var = if summands.len() > 1 {
        summands.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let clipped_fraction = clipped as f64 / n;
    Ok(PairEstimate {
        value: mean,
        stderr: (var / n).sqrt(),
        samples: summands.len(),
        clipped_fraction,
        clip_flagged: clipped_fraction >= CLIP_FLAG_FRACTION,
    })
}

fn block_from_scores(sp: &Array2<f64>, sq: &Array2<f64>, ci: usize, cj: usize) -> BasisBlock {
    let log_rho = sp
        .rows()
        .into_iter()
        .chain(sq.rows())
        .map(|r| r[cj] - r[ci])
        .collect();
    BasisBlock {
        n_p: sp.nrows(),
        n_q: sq.nrows(),
        log_rho,
    }
}

/// Single-basis estimate of `D_f(q_j ‖ p_i)` on the held-out snapshots of
/// both points.
pub fn estimate_pairwise(
    kind: FDivergenceKind,
    provider: &dyn RatioProvider,
    held_out_i: &SnapshotEnsemble,
    held_out_j: &SnapshotEnsemble,
) -> Result<PairEstimate> {
    if held_out_i.basis != held_out_j.basis {
        return Err(Error::Invalid(format!(
            "single-basis estimate across bases `{}` and `{}`",
            held_out_i.basis, held_out_j.basis
        )));
    }
    estimate_pairwise_multibasis(kind, provider, std::slice::from_ref(held_out_i), std::slice::from_ref(held_out_j))
}

fn by_basis<'a>(ens: &'a [SnapshotEnsemble], which: &str) -> Result<BTreeMap<&'a str, &'a SnapshotEnsemble>> {
    let mut out = BTreeMap::new();
    let mut id = None;
    for e in ens {
        if *id.get_or_insert(e.point.id) != e.point.id {
            return Err(Error::Invalid(format!("{which} ensembles mix point ids")));
        }
        if out.insert(e.basis.as_str(), e).is_some() {
            return Err(Error::Invalid(format!("{which} has basis `{}` twice", e.basis)));
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyEnsemble(format!("{which} validation set")));
    }
    Ok(out)
}

fn check_same_bases(i: usize, bi: &BTreeSet<&str>, j: usize, bj: &BTreeSet<&str>) -> Result<()> {
    if let Some(b) = bi.symmetric_difference(bj).next() {
        return Err(Error::Invalid(format!(
            "basis `{b}` is measured for only one of points {i} and {j}; conditional ratio undefined"
        )));
    }
    Ok(())
}

/// Multi-basis estimate of `D_f(q_j ‖ p_i) = Σ_α π_α^(p) D_f(q(·|α) ‖ p(·|α))`.
///
/// Basis fractions are the empirical ones of the supplied ensembles.
pub fn estimate_pairwise_multibasis(
    kind: FDivergenceKind,
    provider: &dyn RatioProvider,
    held_out_i: &[SnapshotEnsemble],
    held_out_j: &[SnapshotEnsemble],
) -> Result<PairEstimate> {
    let pi = by_basis(held_out_i, "point i")?;
    let pj = by_basis(held_out_j, "point j")?;
    let (i, j) = (held_out_i[0].point.id, held_out_j[0].point.id);
    check_same_bases(i, &pi.keys().copied().collect(), j, &pj.keys().copied().collect())?;
    let mut blocks = Vec::with_capacity(pi.len());
    for (basis, ei) in &pi {
        let ej = pj[basis];
        let sp = provider.log_scores(&ei.snapshots, basis, &[i, j])?;
        let sq = provider.log_scores(&ej.snapshots, basis, &[i, j])?;
        blocks.push(block_from_scores(&sp, &sq, 0, 1));
    }
    estimate_blocks(kind, &blocks)
}

/// Naive Hellinger² from empirical histograms, `2(1 − Σ_x √(n_i(x) n_j(x) / (N_i N_j)))`.
pub fn naive_overlap_hellinger(a: &SnapshotEnsemble, b: &SnapshotEnsemble) -> Result<f64> {
    if a.sites() != b.sites() {
        return Err(Error::LengthMismatch {
            context: "naive overlap".into(),
            expected: a.sites(),
            found: b.sites(),
        });
    }
    fn hist(e: &SnapshotEnsemble) -> HashMap<&[i8], usize> {
        let mut h: HashMap<&[i8], usize> = HashMap::new();
        for s in &e.snapshots {
            *h.entry(s.values()).or_default() += 1;
        }
        h
    }
    let (ha, hb) = (hist(a), hist(b));
    let (na, nb) = (a.count() as f64, b.count() as f64);
    let mut keys: Vec<&[i8]> = ha.keys().filter(|k| hb.contains_key(*k)).copied().collect();
    keys.sort_unstable();
    let overlap: f64 = keys
        .iter()
        .map(|k| ((ha[k] as f64 / na) * (hb[k] as f64 / nb)).sqrt())
        .sum();
    Ok((2.0 * (1.0 - overlap)).max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub kind: FDivergenceKind,
    pub point_ids: Vec<usize>,
    pub values: Vec<Vec<f64>>,
    pub stderrs: Vec<Vec<f64>>,
    /// Entries that needed attention: clamped negatives, values above the
    /// divergence bound, clipped log ratios.
    pub flags: Vec<String>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.point_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_ids.is_empty()
    }

    pub fn to_array(&self) -> Array2<f64> {
        let n = self.len();
        Array2::from_shape_fn((n, n), |(a, b)| self.values[a][b])
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fsio::write_json(path, self)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let m: Self = fsio::read_json(path)?;
        m.validate()?;
        Ok(m)
    }

    /// Values only, with a header row and column of point ids.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id");
        for id in &self.point_ids {
            s.push_str(&format!(",{id}"));
        }
        s.push('\n');
        for (id, row) in self.point_ids.iter().zip(&self.values) {
            s.push_str(&id.to_string());
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let square = |m: &Vec<Vec<f64>>| m.len() == n && m.iter().all(|r| r.len() == n);
        if !square(&self.values) || !square(&self.stderrs) {
            return Err(Error::Invalid(format!("distance matrix is not {n}×{n}")));
        }
        for a in 0..n {
            if self.values[a][a] != 0.0 {
                return Err(Error::Invalid(format!("nonzero diagonal at {a}")));
            }
            for b in 0..n {
                let v = self.values[a][b];
                if !v.is_finite() || v < 0.0 || v != self.values[b][a] {
                    return Err(Error::Invalid(format!("entry ({a}, {b}) = {v} breaks symmetry or sign")));
                }
            }
        }
        Ok(())
    }
}

/// Directed estimates keyed by `(i, j)` point ids.
pub type DirectedEstimates = BTreeMap<(usize, usize), PairEstimate>;

/// Symmetrizes directed estimates into a matrix.
///
/// Each unordered pair needs at least one direction; when both are present
/// the values are averaged. Negative entries are clamped to zero and values
/// above the divergence bound are kept but flagged.
pub fn assemble_matrix(
    kind: FDivergenceKind,
    point_ids: &[usize],
    estimates: &DirectedEstimates,
    metadata: BTreeMap<String, serde_json::Value>,
) -> Result<DistanceMatrix> {
    let n = point_ids.len();
    let mut values = vec![vec![0.0; n]; n];
    let mut stderrs = vec![vec![0.0; n]; n];
    let mut flags = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let (i, j) = (point_ids[a], point_ids[b]);
            let dirs: Vec<&PairEstimate> = [estimates.get(&(i, j)), estimates.get(&(j, i))]
                .into_iter()
                .flatten()
                .collect();
            if dirs.is_empty() {
                return Err(Error::Invalid(format!("missing estimate for pair ({i}, {j})")));
            }
            let k = dirs.len() as f64;
            let mut v = dirs.iter().map(|e| e.value).sum::<f64>() / k;
            let se = dirs.iter().map(|e| e.stderr).sum::<f64>() / k;
            if !v.is_finite() {
                return Err(Error::Numerical(format!("non-finite estimate for pair ({i}, {j})")));
            }
            if dirs.iter().any(|e| e.clip_flagged) {
                flags.push(format!("({i}, {j}): log ratios clipped"));
            }
            if v < 0.0 {
                if v < -3.0 * se {
                    flags.push(format!("({i}, {j}): negative estimate {v:.4} beyond 3 stderr, clamped"));
                }
                v = 0.0;
            }
            if let Some(max) = kind.max_value() {
                if v > max {
                    let within = v <= max + 3.0 * se;
                    flags.push(format!(
                        "({i}, {j}): {v:.4} exceeds bound {max:.4} ({} 3 stderr)",
                        if within { "within" } else { "beyond" }
                    ));
                }
            }
            values[a][b] = v;
            values[b][a] = v;
            stderrs[a][b] = se;
            stderrs[b][a] = se;
        }
    }
    Ok(DistanceMatrix {
        kind,
        point_ids: point_ids.to_vec(),
        values,
        stderrs,
        flags,
        metadata,
    })
}

/// Estimates every directed pair over the supplied held-out ensembles and
/// assembles the symmetric matrix.
///
/// Scores are computed once per ensemble; pairs run in parallel and are
/// merged by pair index, so the result does not depend on scheduling.
pub fn estimate_matrix(
    kind: FDivergenceKind,
    provider: &dyn RatioProvider,
    held_out: &[SnapshotEnsemble],
    mut metadata: BTreeMap<String, serde_json::Value>,
) -> Result<DistanceMatrix> {
    let mut grouped: BTreeMap<usize, BTreeMap<&str, &SnapshotEnsemble>> = BTreeMap::new();
    for e in held_out {
        if e.count() == 0 {
            return Err(Error::EmptyEnsemble(format!("point {} basis {}", e.point.id, e.basis)));
        }
        if grouped.entry(e.point.id).or_default().insert(e.basis.as_str(), e).is_some() {
            return Err(Error::Invalid(format!("point {} has basis `{}` twice", e.point.id, e.basis)));
        }
    }
    let ids: Vec<usize> = grouped.keys().copied().collect();
    if ids.len() < 2 {
        return Err(Error::Invalid("need at least two points".into()));
    }
    let mut scores: BTreeMap<(usize, &str), Array2<f64>> = BTreeMap::new();
    for (&id, bases) in &grouped {
        for (&basis, e) in bases {
            scores.insert((id, basis), provider.log_scores(&e.snapshots, basis, &ids)?);
        }
    }
    let pairs: Vec<(usize, usize)> = (0..ids.len())
        .flat_map(|a| (0..ids.len()).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    let results: Vec<Result<PairEstimate>> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let (i, j) = (ids[a], ids[b]);
            let bi: BTreeSet<&str> = grouped[&i].keys().copied().collect();
            let bj: BTreeSet<&str> = grouped[&j].keys().copied().collect();
            check_same_bases(i, &bi, j, &bj)?;
            let blocks: Vec<BasisBlock> = bi
                .iter()
                .map(|&basis| block_from_scores(&scores[&(i, basis)], &scores[&(j, basis)], a, b))
                .collect();
            estimate_blocks(kind, &blocks)
        })
        .collect();
    let mut directed = DirectedEstimates::new();
    for (&(a, b), r) in pairs.iter().zip(results) {
        directed.insert((ids[a], ids[b]), r?);
    }
    metadata.insert("provider".into(), provider.describe().into());
    metadata.insert(
        "held_out_counts".into(),
        serde_json::to_value(
            held_out
                .iter()
                .map(|e| (format!("{}/{}", e.point.id, e.basis), e.count()))
                .collect::<BTreeMap<_, _>>(),
        )
        .expect("plain map serializes"),
    );
    assemble_matrix(kind, &ids, &directed, metadata)
}

/// Exact matrix of divergences from explicit tables, for oracle comparisons.
pub fn exact_matrix(kind: FDivergenceKind, point_ids: &[usize], tables: &[Vec<f64>]) -> Result<DistanceMatrix> {
    if point_ids.len() != tables.len() {
        return Err(Error::LengthMismatch {
            context: "exact matrix tables".into(),
            expected: point_ids.len(),
            found: tables.len(),
        });
    }
    let mut directed = DirectedEstimates::new();
    for (a, &i) in point_ids.iter().enumerate() {
        for (b, &j) in point_ids.iter().enumerate() {
            if a != b {
                let v = exact_fdiv(kind, &tables[a], &tables[b])?;
                directed.insert(
                    (i, j),
                    PairEstimate {
                        value: v,
                        stderr: 0.0,
                        samples: 0,
                        clipped_fraction: 0.0,
                        clip_flagged: false,
                    },
                );
            }
        }
    }
    let mut meta = BTreeMap::new();
    meta.insert("provider".into(), "exact-enumeration".into());
    assemble_matrix(kind, point_ids, &directed, meta)
}
