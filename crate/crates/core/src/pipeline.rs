//! Declarative study runs.
//!
//! A study is described by one JSON document with the sections `model`,
//! `sampler`, `discriminator`, `divergence`, `clustering` and `criticality`
//! plus a root `seed`. Stages run per system size in dependency order:
//!
//! ```text
//! sample ─▶ train ─▶ estimate ─┬▶ cluster
//!                              └▶ susceptibility ─▶ fss ─▶ report
//! ```
//!
//! Every stage has a fingerprint: the SHA-256 of its config section and of
//! the content hashes of its input artifacts. A stage whose stamp carries the
//! same fingerprint and whose outputs still hash to the recorded values is
//! skipped. Stamps live in `stamps/` and also record the config hash and root
//! seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::clustering::{cluster, ClusterResult, HdbscanParams};
use crate::criticality::{
    bootstrap_exponents, susceptibility_from_matrix, BootstrapConfig, CollapseConfig, CollapseForm, FssFit, RangePair,
    SusceptibilityCurve,
};
use crate::divergence::{
    estimate_matrix, exact_matrix, naive_overlap_hellinger, DistanceMatrix, ExactTableProvider, FDivergenceKind,
};
use crate::error::{Error, Result};
use crate::fsio;
use crate::nn::{fit_discriminator, ConvConfig, FitOptions, TrainConfig, TrainedDiscriminator};
use crate::reweighting::{EnergyTaggedEnsemble, ReweightingProvider};
use crate::rng::{derive_seed_str, RNG_ALGORITHM};
use crate::samplers::{born_sample, enumerate_gibbs, tfim_ground_state, wolff_sample, Ising2DSpec, TfimSpec, WolffConfig};
use crate::snapshot::{
    read_energies, read_ensembles, split_dataset, write_study, Alphabet, DatasetSplit, Metadata, ParameterPoint,
    SnapshotEnsemble, SplitFractions,
};

pub const CONFIG_FILE: &str = "config.json";
pub const FSS_FILE: &str = "fss.json";
pub const REPORT_DIR: &str = "report";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub start: f64,
    pub stop: f64,
    pub points: usize,
}

impl GridConfig {
    /// Evenly spaced values including both ends.
    pub fn values(&self) -> Vec<f64> {
        linspace(self.start, self.stop, self.points)
    }
}

pub fn linspace(start: f64, stop: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![start],
        _ => (0..n)
            .map(|i| start + (stop - start) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Open transverse-field Ising chain; the grid is `h_z/J`.
    Tfim,
    /// Periodic square-lattice Ising model; the grid is `T/J`.
    Ising,
}

impl ModelKind {
    pub fn parameter(self) -> &'static str {
        match self {
            ModelKind::Tfim => "hz_over_J",
            ModelKind::Ising => "T",
        }
    }

    pub fn dimension(self) -> usize {
        match self {
            ModelKind::Tfim => 1,
            ModelKind::Ising => 2,
        }
    }

    pub fn basis(self) -> &'static str {
        match self {
            ModelKind::Tfim => "x",
            ModelKind::Ising => "z",
        }
    }
}

fn unit() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub sizes: Vec<usize>,
    #[serde(default = "unit")]
    pub j: f64,
    pub grid: GridConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub samples_per_point: usize,
    /// Wolff settings; unused for the TFIM.
    pub equilibration_updates: usize,
    pub thinning_updates: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            samples_per_point: 2000,
            equilibration_updates: 1000,
            thinning_updates: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub depth: usize,
    pub width: usize,
    pub leaky_slope: f64,
    pub conv: Option<ConvConfig>,
    /// `train.seed` is replaced by a seed derived from the root seed.
    pub train: TrainConfig,
    pub splits: SplitFractions,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        let f = FitOptions::default();
        DiscriminatorConfig {
            depth: f.depth,
            width: f.width,
            leaky_slope: f.leaky_slope,
            conv: f.conv,
            train: f.train,
            splits: SplitFractions::default(),
        }
    }
}

impl DiscriminatorConfig {
    pub fn fit_options(&self, seed: u64) -> FitOptions {
        FitOptions {
            depth: self.depth,
            width: self.width,
            leaky_slope: self.leaky_slope,
            conv: self.conv.clone(),
            train: TrainConfig {
                seed,
                ..self.train.clone()
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Discriminator,
    /// Explicit tables: TFIM ground states, or Ising enumeration for L ≤ 4.
    Exact,
    /// Ferrenberg–Swendsen reweighting; Ising only.
    Reweighting,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DivergenceConfig {
    pub kind: FDivergenceKind,
    pub provider: ProviderKind,
    /// Also write the histogram-overlap Hellinger matrix.
    pub naive_overlap: bool,
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        DivergenceConfig {
            kind: FDivergenceKind::Hellinger2,
            provider: ProviderKind::Discriminator,
            naive_overlap: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusteringConfig {
    pub enabled: bool,
    pub min_samples: usize,
    pub min_cluster_size: usize,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        let p = HdbscanParams::default();
        ClusteringConfig {
            enabled: true,
            min_samples: p.min_samples,
            min_cluster_size: p.min_cluster_size,
        }
    }
}

impl ClusteringConfig {
    pub fn params(&self) -> HdbscanParams {
        HdbscanParams {
            min_samples: self.min_samples,
            min_cluster_size: self.min_cluster_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticalityConfig {
    /// Finite-size scaling; needs at least three sizes.
    pub fss: bool,
    pub form: CollapseForm,
    pub resamples: usize,
    /// Empty selects ranges automatically.
    pub ranges: Vec<RangePair>,
    pub collapse: CollapseConfig,
}

impl Default for CriticalityConfig {
    fn default() -> Self {
        CriticalityConfig {
            fss: true,
            form: CollapseForm::Powerlaw,
            resamples: 100,
            ranges: Vec::new(),
            collapse: CollapseConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub discriminator: DiscriminatorConfig,
    #[serde(default)]
    pub divergence: DivergenceConfig,
    #[serde(default)]
    pub clustering: ClusteringConfig,
    #[serde(default)]
    pub criticality: CriticalityConfig,
}

fn config_error(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl StudyConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: StudyConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_error(&path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_error(".", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.sizes.is_empty() {
            return Err(config_error("model.sizes", "at least one size is required"));
        }
        let mut sorted = m.sizes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != m.sizes.len() {
            return Err(config_error("model.sizes", "sizes must be distinct"));
        }
        for (i, &l) in m.sizes.iter().enumerate() {
            let ok = match m.kind {
                ModelKind::Tfim => (2..=crate::samplers::tfim::MAX_SITES).contains(&l),
                ModelKind::Ising => l >= 2,
            };
            if !ok {
                return Err(config_error(&format!("model.sizes[{i}]"), format!("size {l} is out of range")));
            }
        }
        if !(m.j > 0.0) {
            return Err(config_error("model.j", "coupling must be positive"));
        }
        if m.grid.points < 2 {
            return Err(config_error("model.grid.points", "need at least two grid points"));
        }
        if !(m.grid.stop > m.grid.start) || !m.grid.start.is_finite() || !m.grid.stop.is_finite() {
            return Err(config_error("model.grid", "need finite start < stop"));
        }
        let lower_ok = match m.kind {
            ModelKind::Tfim => m.grid.start >= 0.0,
            ModelKind::Ising => m.grid.start > 0.0,
        };
        if !lower_ok {
            return Err(config_error("model.grid.start", "grid leaves the physical parameter range"));
        }
        if self.sampler.samples_per_point < 10 {
            return Err(config_error("sampler.samples_per_point", "need at least 10 snapshots per point"));
        }
        if m.kind == ModelKind::Ising && self.sampler.thinning_updates == 0 {
            return Err(config_error("sampler.thinning_updates", "must be at least 1"));
        }
        if self.discriminator.conv.is_some() && m.kind != ModelKind::Ising {
            return Err(config_error("discriminator.conv", "convolutions need a square lattice"));
        }
        match (self.divergence.provider, m.kind) {
            (ProviderKind::Reweighting, ModelKind::Tfim) => {
                return Err(config_error("divergence.provider", "reweighting needs Gibbs ensembles with energies"))
            }
            (ProviderKind::Exact, ModelKind::Ising) if m.sizes.iter().any(|&l| l > 4) => {
                return Err(config_error("divergence.provider", "exact Ising tables are limited to L <= 4"))
            }
            _ => {}
        }
        if self.clustering.enabled && m.grid.points < 2 * self.clustering.min_cluster_size {
            return Err(config_error(
                "clustering.min_cluster_size",
                "grid has too few points for two clusters of this size",
            ));
        }
        Ok(())
    }

    /// SHA-256 of the normalized configuration.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn grid(&self) -> Vec<f64> {
        self.model.grid.values()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash of a file, or of every file below a directory.
pub fn hash_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        let mut h = Sha256::new();
        for rel in files {
            let bytes = fs::read(path.join(&rel)).map_err(|e| Error::io(path.join(&rel), e))?;
            h.update(rel.as_bytes());
            h.update([0]);
            h.update(Sha256::digest(&bytes));
        }
        Ok(hex::encode(h.finalize()))
    } else {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("below root").to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// Relative artifact locations inside a study directory.
pub mod layout {
    pub fn samples(l: usize) -> String {
        format!("samples/L{l}")
    }
    pub fn model(l: usize) -> String {
        format!("models/L{l}.json")
    }
    pub fn matrix(l: usize) -> String {
        format!("matrices/L{l}.json")
    }
    pub fn matrix_csv(l: usize) -> String {
        format!("matrices/L{l}.csv")
    }
    pub fn exact_matrix(l: usize) -> String {
        format!("matrices/L{l}_exact.json")
    }
    pub fn naive_matrix(l: usize) -> String {
        format!("matrices/L{l}_naive.json")
    }
    pub fn clusters(l: usize) -> String {
        format!("clusters/L{l}.json")
    }
    pub fn clusters_csv(l: usize) -> String {
        format!("clusters/L{l}.csv")
    }
    pub fn chi(l: usize) -> String {
        format!("chi/L{l}.json")
    }
    pub fn chi_csv(l: usize) -> String {
        format!("chi/L{l}.csv")
    }
    pub fn exact_chi(l: usize) -> String {
        format!("chi/L{l}_exact.json")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStamp {
    pub stage: String,
    pub fingerprint: String,
    pub config_hash: String,
    pub seed: u64,
    pub rng: String,
    /// Output path → content hash.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

struct Runner<'a> {
    dir: &'a Path,
    config_hash: String,
    seed: u64,
    summary: RunSummary,
}

impl Runner<'_> {
    fn stamp_path(&self, stage: &str) -> PathBuf {
        self.dir.join("stamps").join(format!("{stage}.json"))
    }

    fn cached(&self, stage: &str, fingerprint: &str, outputs: &[String]) -> Option<BTreeMap<String, String>> {
        let stamp: StageStamp = fsio::read_json(&self.stamp_path(stage)).ok()?;
        if stamp.fingerprint != fingerprint || stamp.outputs.len() != outputs.len() {
            return None;
        }
        for o in outputs {
            let recorded = stamp.outputs.get(o)?;
            if hash_path(&self.dir.join(o)).ok()? != *recorded {
                return None;
            }
        }
        Some(stamp.outputs)
    }

    /// Runs `body` unless an up-to-date stamp exists; returns output hashes.
    fn stage(
        &mut self,
        stage: &str,
        inputs: Value,
        outputs: Vec<String>,
        body: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<BTreeMap<String, String>> {
        let fingerprint = sha256_hex(json!({ "stage": stage, "inputs": inputs }).to_string().as_bytes());
        if let Some(hashes) = self.cached(stage, &fingerprint, &outputs) {
            log::info!("stage {stage}: up to date");
            self.summary.skipped.push(stage.to_string());
            return Ok(hashes);
        }
        log::info!("stage {stage}: running");
        body(self.dir).map_err(|e| match e {
            Error::Stage { .. } => e,
            other => Error::Stage {
                stage: stage.to_string(),
                message: other.to_string(),
            },
        })?;
        let mut hashes = BTreeMap::new();
        for o in &outputs {
            let h = hash_path(&self.dir.join(o)).map_err(|e| Error::Stage {
                stage: stage.to_string(),
                message: format!("declared output {o} missing: {e}"),
            })?;
            hashes.insert(o.clone(), h);
        }
        let stamp = StageStamp {
            stage: stage.to_string(),
            fingerprint,
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            rng: RNG_ALGORITHM.into(),
            outputs: hashes.clone(),
        };
        fsio::write_json(&self.stamp_path(stage), &stamp)?;
        self.summary.executed.push(stage.to_string());
        Ok(hashes)
    }
}

fn point_for(kind: ModelKind, id: usize, value: f64) -> ParameterPoint {
    ParameterPoint::new(id, [(kind.parameter().to_string(), value)])
}

/// Snapshots (and Ising energies) for every grid point of one size.
pub fn sample_size(cfg: &StudyConfig, l: usize) -> Result<(Vec<SnapshotEnsemble>, Option<Vec<Vec<f64>>>)> {
    let grid = cfg.grid();
    let n = cfg.sampler.samples_per_point;
    let kind = cfg.model.kind;
    let j = cfg.model.j;
    let jobs: Vec<(usize, f64)> = grid.iter().copied().enumerate().collect();
    match kind {
        ModelKind::Tfim => {
            let ens = jobs
                .par_iter()
                .map(|&(id, g)| {
                    let psi = tfim_ground_state(&TfimSpec::new(l, j, g * j)?)?;
                    let seed = derive_seed_str(cfg.seed, &format!("sample/L{l}/{id}"));
                    born_sample(&psi, point_for(kind, id, g), n, seed)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((ens, None))
        }
        ModelKind::Ising => {
            let runs = jobs
                .par_iter()
                .map(|&(id, t)| {
                    let spec = Ising2DSpec::new(l, j, t)?;
                    let wolff = WolffConfig {
                        equilibration_updates: cfg.sampler.equilibration_updates,
                        thinning_updates: cfg.sampler.thinning_updates,
                        seed: derive_seed_str(cfg.seed, &format!("sample/L{l}/{id}")),
                    };
                    wolff_sample(&spec, &wolff, n, point_for(kind, id, t))
                })
                .collect::<Result<Vec<_>>>()?;
            let energies = runs.iter().map(|r| r.energies.clone()).collect();
            Ok((runs.into_iter().map(|r| r.ensemble).collect(), Some(energies)))
        }
    }
}

/// Exact per-point probability tables, when available.
pub fn exact_tables(cfg: &StudyConfig, l: usize) -> Result<Option<Vec<Vec<f64>>>> {
    model_tables(cfg.model.kind, l, cfg.model.j, &cfg.grid())
}

/// Exact tables for `values` of the model parameter: TFIM ground states, or
/// Ising enumeration for `l <= 4`. `None` when no table is available.
pub fn model_tables(kind: ModelKind, l: usize, j: f64, values: &[f64]) -> Result<Option<Vec<Vec<f64>>>> {
    match kind {
        ModelKind::Tfim => values
            .par_iter()
            .map(|&g| Ok(tfim_ground_state(&TfimSpec::new(l, j, g * j)?)?.probabilities()))
            .collect::<Result<Vec<_>>>()
            .map(Some),
        ModelKind::Ising if l <= 4 => values
            .iter()
            .map(|&t| Ok(enumerate_gibbs(&Ising2DSpec::new(l, j, t)?)?.probabilities))
            .collect::<Result<Vec<_>>>()
            .map(Some),
        ModelKind::Ising => Ok(None),
    }
}

/// Ratio provider over exact tables, one per ensemble in order.
pub fn exact_provider(ensembles: &[SnapshotEnsemble], tables: &[Vec<f64>]) -> Result<ExactTableProvider> {
    let mut provider = ExactTableProvider::new();
    for (e, t) in ensembles.iter().zip(tables) {
        provider.insert(e.point.id, &e.basis, t.clone(), 1.0)?;
    }
    Ok(provider)
}

/// Reweighting provider from the energy sidecars of a sample directory.
pub fn reweighting_provider(samples: &Path, ensembles: &[SnapshotEnsemble], l: usize, j: f64) -> Result<ReweightingProvider> {
    let tagged = ensembles
        .iter()
        .map(|e| {
            let energies = read_energies(samples, e.point.id, &e.basis)?
                .ok_or_else(|| Error::Invalid(format!("point {} has no energies", e.point.id)))?;
            let t = e.point.param("T").ok_or_else(|| Error::Invalid("ensemble has no temperature".into()))?;
            EnergyTaggedEnsemble::new(e.clone(), energies, t)
        })
        .collect::<Result<Vec<_>>>()?;
    ReweightingProvider::adjacent(&tagged, l, j)
}

/// The train/calibration/evaluation split used for one size.
pub fn study_split(cfg: &StudyConfig, l: usize, ensembles: &[SnapshotEnsemble]) -> Result<Vec<DatasetSplit>> {
    split_dataset(ensembles, &cfg.discriminator.splits, derive_seed_str(cfg.seed, &format!("split/L{l}")))
}

/// Held-out ensembles on which divergences are evaluated.
pub fn evaluation_ensembles(ensembles: &[SnapshotEnsemble], splits: &[DatasetSplit]) -> Vec<SnapshotEnsemble> {
    ensembles
        .iter()
        .zip(splits)
        .map(|(e, s)| e.subset(&s.evaluation()))
        .collect()
}

fn matrix_metadata(cfg: &StudyConfig, l: usize, config_hash: &str) -> Metadata {
    let mut m = Metadata::new();
    m.insert("parameter".into(), cfg.model.kind.parameter().into());
    m.insert("grid".into(), json!(cfg.grid()));
    m.insert("L".into(), json!(l));
    m.insert("d".into(), json!(cfg.model.kind.dimension()));
    m.insert("config_hash".into(), config_hash.into());
    m.insert("seed".into(), json!(cfg.seed));
    m.insert("rng".into(), RNG_ALGORITHM.into());
    m
}

/// Runs (or resumes) a study in `dir`.
pub fn run_study(cfg: &StudyConfig, dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    fsio::write_json(&dir.join(CONFIG_FILE), cfg)?;
    let config_hash = cfg.hash();
    let mut runner = Runner {
        dir,
        config_hash: config_hash.clone(),
        seed: cfg.seed,
        summary: RunSummary::default(),
    };
    let kind = cfg.model.kind;
    let mut chi_hashes = BTreeMap::new();
    for &l in &cfg.model.sizes {
        let sample = runner.stage(
            &format!("sample-L{l}"),
            json!({ "model": { "kind": kind, "j": cfg.model.j, "grid": cfg.model.grid }, "sampler": cfg.sampler, "seed": cfg.seed, "L": l }),
            vec![layout::samples(l)],
            |dir| {
                let (ens, energies) = sample_size(cfg, l)?;
                let out = dir.join(layout::samples(l));
                if out.exists() {
                    fs::remove_dir_all(&out).map_err(|e| Error::io(&out, e))?;
                }
                let mut meta = matrix_metadata(cfg, l, &config_hash);
                meta.insert("model".into(), json!(kind));
                write_study(&out, &ens, energies.as_deref(), &Alphabet::spin(), &meta)?;
                Ok(())
            },
        )?;

        let model_hash = if cfg.divergence.provider == ProviderKind::Discriminator {
            let h = runner.stage(
                &format!("train-L{l}"),
                json!({ "discriminator": cfg.discriminator, "samples": sample, "seed": cfg.seed }),
                vec![layout::model(l)],
                |dir| {
                    let ens = read_ensembles(&dir.join(layout::samples(l)))?;
                    let splits = study_split(cfg, l, &ens)?;
                    let opts = cfg.discriminator.fit_options(derive_seed_str(cfg.seed, &format!("train/L{l}")));
                    let mut model = fit_discriminator(&ens, &splits, &opts, None)?;
                    model.metadata.insert("config_hash".into(), config_hash.clone().into());
                    model.metadata.insert("L".into(), json!(l));
                    model.save(&dir.join(layout::model(l)))
                },
            )?;
            Some(h)
        } else {
            None
        };

        let has_exact = match kind {
            ModelKind::Tfim => true,
            ModelKind::Ising => l <= 4,
        };
        let mut outputs = vec![layout::matrix(l), layout::matrix_csv(l)];
        if has_exact {
            outputs.push(layout::exact_matrix(l));
        }
        if cfg.divergence.naive_overlap {
            outputs.push(layout::naive_matrix(l));
        }
        let matrices = runner.stage(
            &format!("estimate-L{l}"),
            json!({ "divergence": cfg.divergence, "splits": cfg.discriminator.splits, "samples": sample, "model": model_hash, "seed": cfg.seed }),
            outputs,
            |dir| estimate_stage(cfg, l, dir, &config_hash, has_exact),
        )?;

        if cfg.clustering.enabled {
            let matrix_hash = &matrices[&layout::matrix(l)];
            runner.stage(
                &format!("cluster-L{l}"),
                json!({ "clustering": cfg.clustering, "matrix": matrix_hash }),
                vec![layout::clusters(l), layout::clusters_csv(l)],
                |dir| {
                    let m = DistanceMatrix::read_json(&dir.join(layout::matrix(l)))?;
                    let r = cluster(&m, &cfg.clustering.params())?;
                    r.write_json(&dir.join(layout::clusters(l)))?;
                    r.write_csv(&dir.join(layout::clusters_csv(l)))
                },
            )?;
        }

        let mut chi_outputs = vec![layout::chi(l), layout::chi_csv(l)];
        if has_exact {
            chi_outputs.push(layout::exact_chi(l));
        }
        let chi = runner.stage(
            &format!("susceptibility-L{l}"),
            json!({ "matrices": matrices, "d": kind.dimension() }),
            chi_outputs,
            |dir| {
                let grid = cfg.grid();
                let d = kind.dimension();
                let m = DistanceMatrix::read_json(&dir.join(layout::matrix(l)))?;
                let c = susceptibility_from_matrix(&m, &grid, l, d)?;
                c.write_json(&dir.join(layout::chi(l)))?;
                c.write_csv(&dir.join(layout::chi_csv(l)))?;
                if has_exact {
                    let m = DistanceMatrix::read_json(&dir.join(layout::exact_matrix(l)))?;
                    susceptibility_from_matrix(&m, &grid, l, d)?.write_json(&dir.join(layout::exact_chi(l)))?;
                }
                Ok(())
            },
        )?;
        chi_hashes.insert(l, chi[&layout::chi(l)].clone());
    }

    if cfg.criticality.fss && cfg.model.sizes.len() >= 3 {
        runner.stage(
            "fss",
            json!({ "criticality": cfg.criticality, "chi": chi_hashes, "seed": cfg.seed }),
            vec![FSS_FILE.to_string()],
            |dir| {
                let curves = cfg
                    .model
                    .sizes
                    .iter()
                    .map(|&l| SusceptibilityCurve::read_json(&dir.join(layout::chi(l))))
                    .collect::<Result<Vec<_>>>()?;
                let bcfg = BootstrapConfig {
                    collapse: cfg.criticality.collapse.clone(),
                    resamples: cfg.criticality.resamples,
                    ranges: cfg.criticality.ranges.clone(),
                    seed: derive_seed_str(cfg.seed, "fss"),
                };
                bootstrap_exponents(&curves, cfg.criticality.form, &bcfg)?.write_json(&dir.join(FSS_FILE))
            },
        )?;
    } else if cfg.criticality.fss {
        log::info!("finite-size scaling skipped: needs at least three sizes");
    }

    report(dir).map_err(|e| Error::Stage {
        stage: "report".into(),
        message: e.to_string(),
    })?;
    runner.summary.executed.push("report".into());
    Ok(runner.summary)
}

fn estimate_stage(cfg: &StudyConfig, l: usize, dir: &Path, config_hash: &str, has_exact: bool) -> Result<()> {
    let samples = dir.join(layout::samples(l));
    let ens = read_ensembles(&samples)?;
    let splits = study_split(cfg, l, &ens)?;
    let held_out = evaluation_ensembles(&ens, &splits);
    let kind = cfg.divergence.kind;
    let meta = matrix_metadata(cfg, l, config_hash);
    let tables = if has_exact { exact_tables(cfg, l)? } else { None };
    let m = match cfg.divergence.provider {
        ProviderKind::Discriminator => {
            let model = TrainedDiscriminator::load(&dir.join(layout::model(l)))?;
            estimate_matrix(kind, &model, &held_out, meta.clone())?
        }
        ProviderKind::Exact => {
            let tables = tables.as_ref().ok_or_else(|| Error::Invalid("no exact tables for this model".into()))?;
            estimate_matrix(kind, &exact_provider(&ens, tables)?, &held_out, meta.clone())?
        }
        ProviderKind::Reweighting => {
            let provider = reweighting_provider(&samples, &ens, l, cfg.model.j)?;
            estimate_matrix(kind, &provider, &held_out, meta.clone())?
        }
    };
    m.write_json(&dir.join(layout::matrix(l)))?;
    m.write_csv(&dir.join(layout::matrix_csv(l)))?;
    if let Some(tables) = &tables {
        let ids: Vec<usize> = ens.iter().map(|e| e.point.id).collect();
        let mut exact = exact_matrix(kind, &ids, tables)?;
        exact.metadata.extend(meta.clone());
        exact.write_json(&dir.join(layout::exact_matrix(l)))?;
    }
    if cfg.divergence.naive_overlap {
        let mut naive = naive_overlap_matrix(&held_out)?;
        naive.metadata.extend(meta);
        naive.write_json(&dir.join(layout::naive_matrix(l)))?;
    }
    Ok(())
}

/// Histogram-overlap Hellinger matrix over ensembles sorted by point id.
pub fn naive_overlap_matrix(ensembles: &[SnapshotEnsemble]) -> Result<DistanceMatrix> {
    let n = ensembles.len();
    let mut values = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in a + 1..n {
            let v = naive_overlap_hellinger(&ensembles[a], &ensembles[b])?;
            values[a][b] = v;
            values[b][a] = v;
        }
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("provider".into(), "naive-overlap".into());
    Ok(DistanceMatrix {
        kind: FDivergenceKind::Hellinger2,
        point_ids: ensembles.iter().map(|e| e.point.id).collect(),
        values,
        stderrs: vec![vec![0.0; n]; n],
        flags: Vec::new(),
        metadata,
    })
}

/// What [`report`] found and wrote.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub text: String,
    /// Analysis artifacts that were absent.
    pub absent: Vec<String>,
    pub written: Vec<PathBuf>,
}

fn sizes_with(dir: &Path, sub: &str) -> Vec<usize> {
    let mut out: Vec<usize> = fs::read_dir(dir.join(sub))
        .into_iter()
        .flatten()
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().to_string();
            name.strip_prefix('L')?.strip_suffix(".json")?.parse().ok()
        })
        .collect();
    out.sort_unstable();
    out
}

fn grid_of(m: &DistanceMatrix) -> Option<(String, Vec<f64>)> {
    let name = m.metadata.get("parameter")?.as_str()?.to_string();
    let grid: Vec<f64> = serde_json::from_value(m.metadata.get("grid")?.clone()).ok()?;
    (grid.len() == m.len()).then_some((name, grid))
}

fn fmt_range(name: &str, lo: f64, hi: f64) -> String {
    if lo == hi {
        format!("{name} = {lo:.3}")
    } else {
        format!("{name} ∈ [{lo:.3}, {hi:.3}]")
    }
}

/// Contiguous runs of equal labels along the grid.
pub fn label_windows(labels: &[i64], grid: &[f64]) -> Vec<(i64, f64, f64)> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| grid[a].total_cmp(&grid[b]));
    let mut out: Vec<(i64, f64, f64)> = Vec::new();
    for i in order {
        match out.last_mut() {
            Some(last) if last.0 == labels[i] => last.2 = grid[i],
            _ => out.push((labels[i], grid[i], grid[i])),
        }
    }
    out
}

/// Summarizes whatever a study directory holds and writes plot-ready CSVs
/// into `report/`.
pub fn report(dir: &Path) -> Result<Report> {
    let matrix_sizes = sizes_with(dir, "matrices");
    let cluster_sizes = sizes_with(dir, "clusters");
    let chi_sizes = sizes_with(dir, "chi");
    let has_fss = dir.join(FSS_FILE).exists();
    if matrix_sizes.is_empty() {
        let mut missing = vec!["matrices/L<size>.json".to_string()];
        if cluster_sizes.is_empty() {
            missing.push("clusters/L<size>.json".into());
        }
        if chi_sizes.is_empty() {
            missing.push("chi/L<size>.json".into());
        }
        if !has_fss {
            missing.push(FSS_FILE.into());
        }
        return Err(Error::MissingArtifacts(missing));
    }
    let out = dir.join(REPORT_DIR);
    let mut written = Vec::new();
    let mut absent = Vec::new();
    let mut text = format!("study: {}\n", dir.display());
    let put = |path: PathBuf, bytes: &[u8], written: &mut Vec<PathBuf>| -> Result<()> {
        fsio::write_atomic(&path, bytes)?;
        written.push(path);
        Ok(())
    };

    text.push_str("\n== distance matrices ==\n");
    let mut grids: BTreeMap<usize, (String, Vec<f64>)> = BTreeMap::new();
    for &l in &matrix_sizes {
        let m = DistanceMatrix::read_json(&dir.join(layout::matrix(l)))?;
        put(out.join(format!("matrix_L{l}.csv")), m.to_csv().as_bytes(), &mut written)?;
        let provider = m.metadata.get("provider").and_then(Value::as_str).unwrap_or("unknown");
        text.push_str(&format!(
            "L={l}: {} points, {} divergence, provider {provider}, {} flags\n",
            m.len(),
            m.kind,
            m.flags.len()
        ));
        let exact_path = dir.join(layout::exact_matrix(l));
        if exact_path.exists() {
            let e = DistanceMatrix::read_json(&exact_path)?;
            if e.len() == m.len() {
                let n = m.len();
                let mae = (0..n)
                    .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                    .map(|(i, j)| (m.values[i][j] - e.values[i][j]).abs())
                    .sum::<f64>()
                    / (n * (n - 1)) as f64;
                text.push_str(&format!("  mean absolute error against exact matrix: {mae:.4}\n"));
                put(out.join(format!("matrix_L{l}_exact.csv")), e.to_csv().as_bytes(), &mut written)?;
            }
        }
        if let Some(g) = grid_of(&m) {
            grids.insert(l, g);
        }
    }

    text.push_str("\n== clusters ==\n");
    if cluster_sizes.is_empty() {
        text.push_str("absent\n");
        absent.push("clusters".into());
    }
    for &l in &cluster_sizes {
        let c = ClusterResult::read_json(&dir.join(layout::clusters(l)))?;
        put(out.join(format!("clusters_L{l}.csv")), c.to_csv().as_bytes(), &mut written)?;
        text.push_str(&format!(
            "L={l}: {} clusters, {} unassigned{}\n",
            c.n_clusters,
            c.labels.iter().filter(|&&x| x < 0).count(),
            if c.degenerate { " (degenerate input)" } else { "" }
        ));
        if let Some((name, grid)) = grids.get(&l) {
            let by_id: Vec<f64> = c.point_ids.iter().map(|&id| grid.get(id).copied().unwrap_or(f64::NAN)).collect();
            for (label, lo, hi) in label_windows(&c.labels, &by_id) {
                let what = if label < 0 { "unassigned".to_string() } else { format!("cluster {label}") };
                text.push_str(&format!("  {what}: {}\n", fmt_range(name, lo, hi)));
            }
        }
    }

    text.push_str("\n== susceptibility ==\n");
    if chi_sizes.is_empty() {
        text.push_str("absent\n");
        absent.push("susceptibility".into());
    }
    for &l in &chi_sizes {
        let c = SusceptibilityCurve::read_json(&dir.join(layout::chi(l)))?;
        put(out.join(format!("chi_L{l}.csv")), c.to_csv().as_bytes(), &mut written)?;
        if let Some((eta, chi)) = c.peak() {
            text.push_str(&format!("L={l}: peak χ = {chi:.4} at {eta:.4}"));
        }
        let exact = dir.join(layout::exact_chi(l));
        if exact.exists() {
            let e = SusceptibilityCurve::read_json(&exact)?;
            put(out.join(format!("chi_L{l}_exact.csv")), e.to_csv().as_bytes(), &mut written)?;
            if let Some((eta, chi)) = e.peak() {
                text.push_str(&format!(" (exact: {chi:.4} at {eta:.4})"));
            }
        }
        text.push('\n');
    }

    text.push_str("\n== finite-size scaling ==\n");
    if has_fss {
        let f = FssFit::read_json(&dir.join(FSS_FILE))?;
        put(out.join("fss.json"), (serde_json::to_string_pretty(&f).expect("fit serializes") + "\n").as_bytes(), &mut written)?;
        let iv = |i: crate::criticality::Interval| format!("{:.4} [{:.4}, {:.4}]", i.estimate, i.lo, i.hi);
        text.push_str(&format!("form: {:?}\n", f.form));
        text.push_str(&format!("eta_c = {}\nnu = {}\n", iv(f.eta_c), iv(f.nu)));
        match f.form {
            CollapseForm::Powerlaw => text.push_str(&format!("alpha_F = {}\n", iv(f.alpha_f))),
            CollapseForm::Log => text.push_str(&format!("a = {}\n", iv(f.a))),
        }
        if let Some(r) = f.residual {
            text.push_str(&format!("collapse residual at estimate: {r:.3e}\n"));
        }
    } else {
        text.push_str("absent\n");
        absent.push("fss".into());
    }
    put(out.join("summary.txt"), text.as_bytes(), &mut written)?;
    Ok(Report { text, absent, written })
}
