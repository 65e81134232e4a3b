//! Snapshot data model and the study-directory format.
//!
//! A study directory holds `manifest.json` plus one plain-text file per
//! (point, basis) under `snapshots/`, one snapshot per line as
//! space-separated integers. Basis fractions are computed from the counts
//! at write time and recorded next to each ensemble entry.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::rng::{derive_seed_str, rng_from_seed};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SNAPSHOT_DIR: &str = "snapshots";

/// Free-form study metadata (seeds, generator name, model description).
pub type Metadata = BTreeMap<String, serde_json::Value>;

/// One point of the phase diagram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterPoint {
    pub id: usize,
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_coords: Option<Vec<i64>>,
}

impl ParameterPoint {
    pub fn new(id: usize, params: impl IntoIterator<Item = (String, f64)>) -> Self {
        ParameterPoint {
            id,
            params: params.into_iter().collect(),
            grid_coords: None,
        }
    }

    pub fn param(&self, name: &str) -> Option<f64> {
        self.params.get(name).copied()
    }
}

/// One projective measurement outcome.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Snapshot(pub Vec<i8>);

impl Snapshot {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[i8] {
        &self.0
    }
}

impl From<Vec<i8>> for Snapshot {
    fn from(v: Vec<i8>) -> Self {
        Snapshot(v)
    }
}

/// Allowed site values, e.g. `{-1, +1}` for spins.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alphabet(pub Vec<i8>);

impl Alphabet {
    pub fn spin() -> Self {
        Alphabet(vec![-1, 1])
    }

    pub fn contains(&self, v: i64) -> bool {
        self.0.iter().any(|&a| a as i64 == v)
    }

    pub fn letters(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Position of `v` in the alphabet.
    pub fn index_of(&self, v: i8) -> Option<usize> {
        self.0.iter().position(|&a| a == v)
    }
}

/// Snapshots measured at one point in one basis.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotEnsemble {
    pub point: ParameterPoint,
    pub basis: String,
    pub snapshots: Vec<Snapshot>,
}

impl SnapshotEnsemble {
    pub fn new(point: ParameterPoint, basis: impl Into<String>, snapshots: Vec<Snapshot>) -> Result<Self> {
        let basis = basis.into();
        let Some(first) = snapshots.first() else {
            return Err(Error::EmptyEnsemble(format!("point {} basis {}", point.id, basis)));
        };
        let sites = first.len();
        if let Some(bad) = snapshots.iter().find(|s| s.len() != sites) {
            return Err(Error::LengthMismatch {
                context: format!("point {} basis {}", point.id, basis),
                expected: sites,
                found: bad.len(),
            });
        }
        Ok(SnapshotEnsemble { point, basis, snapshots })
    }

    pub fn count(&self) -> usize {
        self.snapshots.len()
    }

    pub fn sites(&self) -> usize {
        self.snapshots.first().map_or(0, Snapshot::len)
    }

    /// Copy holding only the snapshots at `indices`.
    pub fn subset(&self, indices: &[usize]) -> SnapshotEnsemble {
        SnapshotEnsemble {
            point: self.point.clone(),
            basis: self.basis.clone(),
            snapshots: indices.iter().map(|&i| self.snapshots[i].clone()).collect(),
        }
    }
}

/// What the caller declares about an ensemble file before writing the manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleDescriptor {
    pub point_id: usize,
    pub basis: String,
    pub file: String,
    pub count: usize,
    pub sites: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleEntry {
    pub point_id: usize,
    pub basis: String,
    pub file: String,
    pub count: usize,
    /// Fraction of this point's snapshots measured in `basis`.
    pub basis_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_file: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub sites: usize,
    pub alphabet: Alphabet,
    pub points: Vec<ParameterPoint>,
    pub ensembles: Vec<EnsembleEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: Metadata,
}

impl Manifest {
    pub fn total_declared(&self) -> usize {
        self.ensembles.iter().map(|e| e.count).sum()
    }

    pub fn point(&self, id: usize) -> Option<&ParameterPoint> {
        self.points.iter().find(|p| p.id == id)
    }
}

fn validate_points(points: &[ParameterPoint]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for p in points {
        if !seen.insert(p.id) {
            return Err(Error::DuplicateId(p.id));
        }
    }
    if let (Some(&lo), Some(&hi)) = (seen.first(), seen.last()) {
        if hi - lo + 1 != seen.len() {
            return Err(Error::Invalid(format!(
                "point ids must be contiguous, found {} ids spanning {lo}..={hi}",
                seen.len()
            )));
        }
    }
    if let Some(first) = points.first() {
        let names: Vec<&String> = first.params.keys().collect();
        for p in &points[1..] {
            if p.params.keys().collect::<Vec<_>>() != names {
                return Err(Error::Invalid(format!(
                    "point {} parameter names differ from point {}",
                    p.id, first.id
                )));
            }
        }
    }
    Ok(())
}

fn basis_fractions(entries: &[(usize, String, usize)]) -> Vec<f64> {
    let mut totals: BTreeMap<usize, usize> = BTreeMap::new();
    for (id, _, c) in entries {
        *totals.entry(*id).or_default() += c;
    }
    entries
        .iter()
        .map(|(id, _, c)| *c as f64 / totals[id] as f64)
        .collect()
}

/// Builds and writes the manifest for a study. Returns the written manifest.
pub fn write_manifest(
    points: &[ParameterPoint],
    ensembles: &[EnsembleDescriptor],
    alphabet: &Alphabet,
    metadata: &Metadata,
    path: &Path,
) -> Result<Manifest> {
    let manifest = build_manifest(points, ensembles, alphabet, metadata)?;
    fsio::write_json(path, &manifest)?;
    Ok(manifest)
}

fn build_manifest(
    points: &[ParameterPoint],
    ensembles: &[EnsembleDescriptor],
    alphabet: &Alphabet,
    metadata: &Metadata,
) -> Result<Manifest> {
    validate_points(points)?;
    let sites = ensembles.first().map_or(0, |e| e.sites);
    let mut keys = BTreeSet::new();
    for e in ensembles {
        if e.sites != sites {
            return Err(Error::LengthMismatch {
                context: format!("site count of ensemble (point {}, basis {})", e.point_id, e.basis),
                expected: sites,
                found: e.sites,
            });
        }
        if !points.iter().any(|p| p.id == e.point_id) {
            return Err(Error::Invalid(format!("ensemble references unknown point {}", e.point_id)));
        }
        if !keys.insert((e.point_id, e.basis.clone())) {
            return Err(Error::Invalid(format!(
                "duplicate ensemble (point {}, basis {})",
                e.point_id, e.basis
            )));
        }
    }
    let triples: Vec<_> = ensembles.iter().map(|e| (e.point_id, e.basis.clone(), e.count)).collect();
    let fractions = basis_fractions(&triples);
    let mut points = points.to_vec();
    points.sort_by_key(|p| p.id);
    Ok(Manifest {
        sites,
        alphabet: alphabet.clone(),
        points,
        ensembles: ensembles
            .iter()
            .zip(fractions)
            .map(|(e, f)| EnsembleEntry {
                point_id: e.point_id,
                basis: e.basis.clone(),
                file: e.file.clone(),
                count: e.count,
                basis_fraction: f,
                energy_file: None,
            })
            .collect(),
        metadata: metadata.clone(),
    })
}

pub fn snapshot_file_name(point_id: usize, basis: &str) -> String {
    format!("{SNAPSHOT_DIR}/point{point_id}_{basis}.txt")
}

pub fn energy_file_name(point_id: usize, basis: &str) -> String {
    format!("{SNAPSHOT_DIR}/point{point_id}_{basis}.energy.csv")
}

fn format_snapshots(snaps: &[Snapshot]) -> String {
    let mut out = String::with_capacity(snaps.len() * (snaps.first().map_or(0, Snapshot::len) * 3 + 1));
    for s in snaps {
        let mut first = true;
        for v in s.values() {
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

/// Writes snapshot files plus manifest for `ensembles` into `dir`.
/// Optional per-ensemble energies (same order) are written as sidecar CSVs.
pub fn write_study(
    dir: &Path,
    ensembles: &[SnapshotEnsemble],
    energies: Option<&[Vec<f64>]>,
    alphabet: &Alphabet,
    metadata: &Metadata,
) -> Result<Manifest> {
    let mut points: Vec<ParameterPoint> = Vec::new();
    let mut descriptors = Vec::with_capacity(ensembles.len());
    for ens in ensembles {
        if ens.count() == 0 {
            return Err(Error::EmptyEnsemble(format!("point {} basis {}", ens.point.id, ens.basis)));
        }
        match points.iter().find(|p| p.id == ens.point.id) {
            Some(p) if *p != ens.point => {
                return Err(Error::DuplicateId(ens.point.id));
            }
            Some(_) => {}
            None => points.push(ens.point.clone()),
        }
        for (line, s) in ens.snapshots.iter().enumerate() {
            if let Some(&v) = s.values().iter().find(|&&v| !alphabet.contains(v as i64)) {
                return Err(Error::AlphabetViolation {
                    file: snapshot_file_name(ens.point.id, &ens.basis),
                    line: line + 1,
                    value: v as i64,
                    alphabet: alphabet.0.clone(),
                });
            }
        }
        descriptors.push(EnsembleDescriptor {
            point_id: ens.point.id,
            basis: ens.basis.clone(),
            file: snapshot_file_name(ens.point.id, &ens.basis),
            count: ens.count(),
            sites: ens.sites(),
        });
    }
    let mut manifest = build_manifest(&points, &descriptors, alphabet, metadata)?;
    for (i, ens) in ensembles.iter().enumerate() {
        let file = dir.join(&descriptors[i].file);
        fsio::write_atomic(&file, format_snapshots(&ens.snapshots).as_bytes())?;
        if let Some(all) = energies {
            let e = &all[i];
            if e.len() != ens.count() {
                return Err(Error::LengthMismatch {
                    context: format!("energies of point {}", ens.point.id),
                    expected: ens.count(),
                    found: e.len(),
                });
            }
            let mut csv = String::from("energy\n");
            for v in e {
                let _ = writeln!(csv, "{v:?}");
            }
            let name = energy_file_name(ens.point.id, &ens.basis);
            fsio::write_atomic(&dir.join(&name), csv.as_bytes())?;
            manifest.ensembles[i].energy_file = Some(name);
        }
    }
    fsio::write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Reads `manifest.json` from a study directory (or the manifest path itself).
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let manifest: Manifest = fsio::read_json(&manifest_path(path))?;
    validate_points(&manifest.points)?;
    Ok(manifest)
}

fn parse_snapshot_file(text: &str, file: &str, sites: usize, alphabet: &Alphabet) -> Result<Vec<Snapshot>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut values = Vec::with_capacity(sites);
        for tok in line.split_ascii_whitespace() {
            let v: i64 = tok.parse().map_err(|_| {
                Error::Invalid(format!("{file}:{line_no}: cannot parse `{tok}` as an integer"))
            })?;
            if !alphabet.contains(v) {
                return Err(Error::AlphabetViolation {
                    file: file.to_string(),
                    line: line_no,
                    value: v,
                    alphabet: alphabet.0.clone(),
                });
            }
            values.push(v as i8);
        }
        if values.len() != sites {
            return Err(Error::LengthMismatch {
                context: format!("{file}:{line_no}"),
                expected: sites,
                found: values.len(),
            });
        }
        out.push(Snapshot(values));
    }
    Ok(out)
}

/// Loads and validates every ensemble of a study, ordered by (point id, basis).
pub fn read_ensembles(path: &Path) -> Result<Vec<SnapshotEnsemble>> {
    let mpath = manifest_path(path);
    let dir = mpath.parent().unwrap_or(Path::new(".")).to_path_buf();
    let manifest = read_manifest(&mpath)?;
    let mut entries: Vec<&EnsembleEntry> = manifest.ensembles.iter().collect();
    entries.sort_by(|a, b| (a.point_id, &a.basis).cmp(&(b.point_id, &b.basis)));
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let file = dir.join(&e.file);
        if !file.exists() {
            return Err(Error::io(
                &file,
                std::io::Error::new(std::io::ErrorKind::NotFound, "snapshot file missing"),
            ));
        }
        let text = fsio::read_to_string(&file)?;
        let snaps = parse_snapshot_file(&text, &e.file, manifest.sites, &manifest.alphabet)?;
        if snaps.is_empty() {
            return Err(Error::EmptyEnsemble(e.file.clone()));
        }
        if snaps.len() != e.count {
            return Err(Error::LengthMismatch {
                context: format!("declared count of {}", e.file),
                expected: e.count,
                found: snaps.len(),
            });
        }
        let point = manifest
            .point(e.point_id)
            .cloned()
            .ok_or_else(|| Error::Invalid(format!("ensemble references unknown point {}", e.point_id)))?;
        out.push(SnapshotEnsemble {
            point,
            basis: e.basis.clone(),
            snapshots: snaps,
        });
    }
    Ok(out)
}

/// Reads the energy sidecar of one ensemble, if the manifest declares it.
pub fn read_energies(dir: &Path, point_id: usize, basis: &str) -> Result<Option<Vec<f64>>> {
    let manifest = read_manifest(dir)?;
    let Some(entry) = manifest
        .ensembles
        .iter()
        .find(|e| e.point_id == point_id && e.basis == basis)
    else {
        return Err(Error::Invalid(format!("no ensemble (point {point_id}, basis {basis})")));
    };
    let Some(name) = &entry.energy_file else {
        return Ok(None);
    };
    let text = fsio::read_to_string(&dir.join(name))?;
    let mut out = Vec::with_capacity(entry.count);
    for (n, line) in text.lines().enumerate().skip(1) {
        let v: f64 = line
            .trim()
            .parse()
            .map_err(|_| Error::Invalid(format!("{name}:{}: bad energy `{line}`", n + 1)))?;
        out.push(v);
    }
    Ok(Some(out))
}

/// Fractions of each ensemble assigned to the four subsets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub calib_train: f64,
    pub calib_val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.70,
            val: 0.15,
            calib_train: 0.10,
            calib_val: 0.05,
        }
    }
}

impl SplitFractions {
    fn as_array(&self) -> [f64; 4] {
        [self.train, self.val, self.calib_train, self.calib_val]
    }
}

/// Disjoint index sets into one ensemble.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_proper_train: Vec<usize>,
    pub train_proper_val: Vec<usize>,
    pub calib_train: Vec<usize>,
    pub calib_val: Vec<usize>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn sizes(&self) -> [usize; 4] {
        [
            self.train_proper_train.len(),
            self.train_proper_val.len(),
            self.calib_train.len(),
            self.calib_val.len(),
        ]
    }

    /// Indices held out from gradient updates and from calibration; divergences
    /// are evaluated on these.
    pub fn evaluation(&self) -> Vec<usize> {
        let mut v = self.train_proper_val.clone();
        v.extend_from_slice(&self.calib_val);
        v
    }
}

/// Seeded partition of `0..n` by `fractions`; the remainder (if the fractions
/// sum to less than one) is left unused.
pub fn split_indices(n: usize, fractions: &SplitFractions, seed: u64) -> Result<DatasetSplit> {
    let f = fractions.as_array();
    if f.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::Invalid(format!("split fractions must be positive, got {f:?}")));
    }
    let total: f64 = f.iter().sum();
    if total > 1.0 + 1e-12 {
        return Err(Error::Invalid(format!("split fractions sum to {total} > 1")));
    }
    let mut bounds = [0usize; 5];
    let mut acc = 0.0;
    for k in 0..4 {
        acc += f[k];
        bounds[k + 1] = ((n as f64) * acc.min(1.0)).round() as usize;
    }
    let sizes: Vec<usize> = (0..4).map(|k| bounds[k + 1] - bounds[k]).collect();
    if sizes.contains(&0) {
        return Err(Error::Invalid(format!(
            "{n} snapshots cannot fill four non-empty subsets with fractions {f:?} (sizes {sizes:?})"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    let take = |k: usize| {
        let mut v = idx[bounds[k]..bounds[k + 1]].to_vec();
        v.sort_unstable();
        v
    };
    Ok(DatasetSplit {
        train_proper_train: take(0),
        train_proper_val: take(1),
        calib_train: take(2),
        calib_val: take(3),
        seed,
    })
}

/// One split per ensemble; each ensemble draws from a stream derived from
/// `seed`, its point id and basis.
pub fn split_dataset(ensembles: &[SnapshotEnsemble], fractions: &SplitFractions, seed: u64) -> Result<Vec<DatasetSplit>> {
    ensembles
        .iter()
        .map(|e| {
            let s = derive_seed_str(seed, &format!("split/{}/{}", e.point.id, e.basis));
            split_indices(e.count(), fractions, s)
                .map_err(|err| Error::Invalid(format!("point {} basis {}: {err}", e.point.id, e.basis)))
        })
        .collect()
}
