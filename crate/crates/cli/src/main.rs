use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use distlearn::clustering::{cluster, HdbscanParams};
use distlearn::criticality::{
    auto_ranges, bootstrap_exponents, susceptibility_from_matrix, BootstrapConfig, CollapseConfig, CollapseForm,
    SusceptibilityCurve,
};
use distlearn::divergence::{estimate_matrix, DistanceMatrix, FDivergenceKind};
use distlearn::maxent::{empirical_marginals, fit_maxent, maxent_sample, DiscreteConfigSpace, MaxEntConfig, MaxEntModel};
use distlearn::nn::{fit_discriminator, ConvConfig, FitOptions, TrainConfig, TrainedDiscriminator};
use distlearn::pipeline::{
    self, evaluation_ensembles, linspace, model_tables, naive_overlap_matrix, ModelKind, StudyConfig,
};
use distlearn::reweighting::heat_capacity_from_energies;
use distlearn::rng::derive_seed_str;
use distlearn::samplers::{born_sample, tfim_ground_state, wolff_sample, Ising2DSpec, TfimSpec, WolffConfig};
use distlearn::snapshot::{
    read_energies, read_ensembles, read_manifest, split_dataset, write_study, Alphabet, Manifest, Metadata,
    ParameterPoint, SplitFractions,
};
use distlearn::{Error, Result};

const WORKERS_ENV: &str = "DISTLEARN_WORKERS";
const CACHE_ENV: &str = "DISTLEARN_CACHE_DIR";

#[derive(Parser)]
#[command(name = "distlearn", version, about = "Phase diagrams from snapshots via learned f-divergences")]
struct Cli {
    /// Worker threads; overrides DISTLEARN_WORKERS.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Wolff Monte Carlo snapshots of the periodic 2D Ising model.
    SampleIsing(SampleIsingArgs),
    /// Born-rule snapshots of the TFIM ground state in the x basis.
    SampleTfim(SampleTfimArgs),
    /// Train and calibrate a discriminator on a sample directory.
    Train(TrainArgs),
    /// Pairwise f-divergence matrix over held-out snapshots.
    Estimate(EstimateArgs),
    /// HDBSCAN over a distance matrix.
    Cluster(ClusterArgs),
    /// f-divergence susceptibility from neighbouring matrix entries.
    Susceptibility(SusceptibilityArgs),
    /// Finite-size scaling collapse with bootstrap intervals.
    Fss(FssArgs),
    /// Partition-function ratios and heat capacities by reweighting.
    Reweight(ReweightArgs),
    /// Maximum-entropy model matching 1- and 2-body marginals of one point.
    MaxentFit(MaxentFitArgs),
    /// Draw snapshots from a maximum-entropy model.
    MaxentSample(MaxentSampleArgs),
    /// Histogram-overlap Hellinger matrix (baseline).
    NaiveOverlap(NaiveOverlapArgs),
    /// Run a whole study from a JSON config.
    Run(RunArgs),
    /// Summarize a study directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    start: f64,
    #[arg(long)]
    stop: f64,
    #[arg(long)]
    points: usize,
}

#[derive(Args)]
struct SampleIsingArgs {
    #[arg(long = "L")]
    l: usize,
    #[arg(long, default_value_t = 1.0)]
    j: f64,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, default_value_t = 1000)]
    equilibration: usize,
    #[arg(long, default_value_t = 10)]
    thinning: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleTfimArgs {
    #[arg(long = "L")]
    l: usize,
    #[arg(long, default_value_t = 1.0)]
    j: f64,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    samples: PathBuf,
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    /// Convolutional front end as `KERNELS,SIZE`.
    #[arg(long, value_parser = parse_conv)]
    conv: Option<ConvConfig>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Provider {
    Nn,
    Exact,
    Reweight,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    samples: PathBuf,
    #[arg(long, default_value = "hellinger2")]
    kind: FDivergenceKind,
    #[arg(long, value_enum, default_value = "nn")]
    provider: Provider,
    /// Trained discriminator; required for `--provider nn`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Split seed when no model is given.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long, default_value_t = 5)]
    min_samples: usize,
    #[arg(long, default_value_t = 5)]
    min_cluster_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SusceptibilityArgs {
    #[arg(long)]
    matrix: PathBuf,
    /// Linear size; defaults to the matrix metadata.
    #[arg(long = "L")]
    l: Option<usize>,
    /// Spatial dimension; defaults to the matrix metadata.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FssArgs {
    /// Susceptibility curves, one per size.
    #[arg(long, required = true, num_args = 1..)]
    chi: Vec<PathBuf>,
    #[arg(long, default_value = "powerlaw")]
    form: CollapseForm,
    /// `auto` or a JSON file with a list of range pairs.
    #[arg(long, default_value = "auto")]
    ranges: String,
    #[arg(long, default_value_t = 100)]
    resamples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Pairs {
    Adjacent,
}

#[derive(Args)]
struct ReweightArgs {
    #[arg(long)]
    samples: PathBuf,
    #[arg(long, value_enum, default_value = "adjacent")]
    pairs: Pairs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MaxentFitArgs {
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    point: usize,
    #[arg(long)]
    basis: Option<String>,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MaxentSampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "z")]
    basis: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct NaiveOverlapArgs {
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Study directory; defaults to `$DISTLEARN_CACHE_DIR/study-<hash>`.
    #[arg(long)]
    dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    dir: PathBuf,
}

fn parse_conv(s: &str) -> std::result::Result<ConvConfig, String> {
    let (k, size) = s.split_once(',').ok_or("expected KERNELS,SIZE")?;
    Ok(ConvConfig {
        kernels: k.trim().parse().map_err(|e| format!("kernels: {e}"))?,
        kernel_size: size.trim().parse().map_err(|e| format!("size: {e}"))?,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let workers = match cli.workers {
        Some(n) => Some(n),
        None => match std::env::var(WORKERS_ENV) {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(n) => Some(n),
                Err(_) => {
                    eprintln!("error: {WORKERS_ENV} must be a positive integer, got `{v}`");
                    return ExitCode::from(2);
                }
            },
            Err(_) => None,
        },
    };
    if let Some(n) = workers.filter(|&n| n > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("worker pool already initialized: {e}");
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::SampleIsing(a) => sample_ising(a),
        Command::SampleTfim(a) => sample_tfim(a),
        Command::Train(a) => train(a),
        Command::Estimate(a) => estimate(a),
        Command::Cluster(a) => {
            let m = DistanceMatrix::read_json(&a.matrix)?;
            let params = HdbscanParams {
                min_samples: a.min_samples,
                min_cluster_size: a.min_cluster_size,
            };
            let r = cluster(&m, &params)?;
            r.write_json(&a.out)?;
            r.write_csv(&a.out.with_extension("csv"))?;
            println!("{} clusters, noise fraction {:.3}", r.n_clusters, r.noise_fraction());
            Ok(())
        }
        Command::Susceptibility(a) => susceptibility(a),
        Command::Fss(a) => fss(a),
        Command::Reweight(a) => reweight(a),
        Command::MaxentFit(a) => maxent_fit(a),
        Command::MaxentSample(a) => {
            let model = MaxEntModel::read_json(&a.model)?;
            let point = ParameterPoint::new(0, []);
            let ens = maxent_sample(&model, a.samples, a.seed, point, &a.basis)?;
            let mut meta = Metadata::new();
            meta.insert("source".into(), "maxent".into());
            meta.insert("seed".into(), json!(a.seed));
            write_study(&a.out, &[ens], None, &model.space.alphabet, &meta)?;
            Ok(())
        }
        Command::NaiveOverlap(a) => {
            let manifest = read_manifest(&a.samples)?;
            let ens = read_ensembles(&a.samples)?;
            let mut m = naive_overlap_matrix(&ens)?;
            m.metadata.extend(manifest.metadata);
            m.write_json(&a.out)?;
            m.write_csv(&a.out.with_extension("csv"))
        }
        Command::Run(a) => {
            let cfg = StudyConfig::load(&a.config)?;
            let dir = match a.dir {
                Some(d) => d,
                None => {
                    let base = std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
                    base.join(format!("study-{}", &cfg.hash()[..12]))
                }
            };
            let summary = pipeline::run_study(&cfg, &dir)?;
            println!("study directory: {}", dir.display());
            println!("executed: {}", summary.executed.join(", "));
            if !summary.skipped.is_empty() {
                println!("up to date: {}", summary.skipped.join(", "));
            }
            Ok(())
        }
        Command::Report(a) => {
            let r = pipeline::report(&a.dir)?;
            print!("{}", r.text);
            Ok(())
        }
    }
}

fn sample_metadata(kind: ModelKind, l: usize, j: f64, grid: &[f64], seed: u64) -> Metadata {
    let mut meta = Metadata::new();
    meta.insert("model".into(), json!(kind));
    meta.insert("parameter".into(), kind.parameter().into());
    meta.insert("grid".into(), json!(grid));
    meta.insert("L".into(), json!(l));
    meta.insert("d".into(), json!(kind.dimension()));
    meta.insert("j".into(), json!(j));
    meta.insert("seed".into(), json!(seed));
    meta
}

fn sample_ising(a: SampleIsingArgs) -> Result<()> {
    let grid = linspace(a.grid.start, a.grid.stop, a.grid.points);
    let mut ens = Vec::new();
    let mut energies = Vec::new();
    for (id, &t) in grid.iter().enumerate() {
        let spec = Ising2DSpec::new(a.l, a.j, t)?;
        let cfg = WolffConfig {
            equilibration_updates: a.equilibration,
            thinning_updates: a.thinning,
            seed: derive_seed_str(a.seed, &format!("sample/L{}/{id}", a.l)),
        };
        let run = wolff_sample(&spec, &cfg, a.samples, ParameterPoint::new(id, [("T".to_string(), t)]))?;
        log::info!("T = {t:.4}: mean cluster size {:.1}", run.mean_cluster_size);
        ens.push(run.ensemble);
        energies.push(run.energies);
    }
    let meta = sample_metadata(ModelKind::Ising, a.l, a.j, &grid, a.seed);
    write_study(&a.out, &ens, Some(&energies), &Alphabet::spin(), &meta)?;
    Ok(())
}

fn sample_tfim(a: SampleTfimArgs) -> Result<()> {
    let grid = linspace(a.grid.start, a.grid.stop, a.grid.points);
    let mut ens = Vec::new();
    for (id, &g) in grid.iter().enumerate() {
        let psi = tfim_ground_state(&TfimSpec::new(a.l, a.j, g * a.j)?)?;
        let seed = derive_seed_str(a.seed, &format!("sample/L{}/{id}", a.l));
        ens.push(born_sample(&psi, ParameterPoint::new(id, [("hz_over_J".to_string(), g)]), a.samples, seed)?);
    }
    let meta = sample_metadata(ModelKind::Tfim, a.l, a.j, &grid, a.seed);
    write_study(&a.out, &ens, None, &Alphabet::spin(), &meta)?;
    Ok(())
}

fn split_seed(seed: u64) -> u64 {
    derive_seed_str(seed, "split")
}

fn train(a: TrainArgs) -> Result<()> {
    let ens = read_ensembles(&a.samples)?;
    let splits = split_dataset(&ens, &SplitFractions::default(), split_seed(a.seed))?;
    let opts = FitOptions {
        depth: a.depth,
        width: a.width,
        leaky_slope: FitOptions::default().leaky_slope,
        conv: a.conv,
        train: TrainConfig {
            learning_rate: a.lr,
            batch_size: a.batch,
            max_epochs: a.epochs,
            patience: a.patience,
            seed: a.seed,
        },
    };
    let mut model = fit_discriminator(&ens, &splits, &opts, None)?;
    model.metadata.insert("split_seed".into(), json!(a.seed));
    model.metadata.insert("samples".into(), a.samples.display().to_string().into());
    model.save(&a.out)?;
    println!("trained to epoch {}, T_cal = {:.4}", model.best_epoch, model.temperature);
    Ok(())
}

fn meta_usize(manifest: &Manifest, key: &str) -> Option<usize> {
    manifest.metadata.get(key).and_then(Value::as_u64).map(|v| v as usize)
}

fn sample_model(manifest: &Manifest) -> Result<(ModelKind, usize, f64)> {
    let kind: ModelKind = manifest
        .metadata
        .get("model")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .ok_or_else(|| Error::Invalid("sample metadata does not name a model".into()))?;
    let l = meta_usize(manifest, "L").ok_or_else(|| Error::Invalid("sample metadata has no L".into()))?;
    let j = manifest.metadata.get("j").and_then(Value::as_f64).unwrap_or(1.0);
    Ok((kind, l, j))
}

fn estimate(a: EstimateArgs) -> Result<()> {
    let manifest = read_manifest(&a.samples)?;
    let ens = read_ensembles(&a.samples)?;
    let model = match (a.provider, &a.model) {
        (Provider::Nn, None) => return Err(Error::Invalid("--provider nn needs --model".into())),
        (_, Some(p)) => Some(TrainedDiscriminator::load(p)?),
        _ => None,
    };
    let seed = model
        .as_ref()
        .and_then(|m| m.metadata.get("split_seed").and_then(Value::as_u64))
        .unwrap_or(a.seed);
    let splits = split_dataset(&ens, &SplitFractions::default(), split_seed(seed))?;
    let held_out = evaluation_ensembles(&ens, &splits);
    let meta = manifest.metadata.clone();
    let m = match a.provider {
        Provider::Nn => estimate_matrix(a.kind, model.as_ref().expect("checked above"), &held_out, meta)?,
        Provider::Exact => {
            let (kind, l, j) = sample_model(&manifest)?;
            let values: Vec<f64> = ens
                .iter()
                .map(|e| e.point.param(kind.parameter()).ok_or_else(|| Error::Invalid("point lacks the model parameter".into())))
                .collect::<Result<_>>()?;
            let tables = model_tables(kind, l, j, &values)?
                .ok_or_else(|| Error::Invalid("no exact tables for this model size".into()))?;
            estimate_matrix(a.kind, &pipeline::exact_provider(&ens, &tables)?, &held_out, meta)?
        }
        Provider::Reweight => {
            let (_, l, j) = sample_model(&manifest)?;
            let provider = pipeline::reweighting_provider(&a.samples, &ens, l, j)?;
            estimate_matrix(a.kind, &provider, &held_out, meta)?
        }
    };
    m.write_json(&a.out)?;
    m.write_csv(&a.out.with_extension("csv"))?;
    if !m.flags.is_empty() {
        log::warn!("{} entries flagged for clipping", m.flags.len());
    }
    Ok(())
}

fn susceptibility(a: SusceptibilityArgs) -> Result<()> {
    let m = DistanceMatrix::read_json(&a.matrix)?;
    let grid: Vec<f64> = m
        .metadata
        .get("grid")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .ok_or_else(|| Error::Invalid("matrix metadata has no grid".into()))?;
    let from_meta = |k: &str| m.metadata.get(k).and_then(Value::as_u64).map(|v| v as usize);
    let l = a.l.or_else(|| from_meta("L")).ok_or_else(|| Error::Invalid("pass --L".into()))?;
    let d = a.d.or_else(|| from_meta("d")).ok_or_else(|| Error::Invalid("pass --d".into()))?;
    let c = susceptibility_from_matrix(&m, &grid, l, d)?;
    c.write_json(&a.out)?;
    c.write_csv(&a.out.with_extension("csv"))?;
    if let Some((eta, chi)) = c.peak() {
        println!("peak χ = {chi:.4} at {eta:.4}");
    }
    Ok(())
}

fn fss(a: FssArgs) -> Result<()> {
    let curves = a
        .chi
        .iter()
        .map(|p| SusceptibilityCurve::read_json(p))
        .collect::<Result<Vec<_>>>()?;
    let ranges = if a.ranges == "auto" {
        auto_ranges(&curves)
    } else {
        let text = std::fs::read_to_string(&a.ranges).map_err(|e| Error::Io {
            path: PathBuf::from(&a.ranges),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config {
            path: a.ranges.clone(),
            message: e.to_string(),
        })?
    };
    let cfg = BootstrapConfig {
        collapse: CollapseConfig {
            seed: a.seed,
            ..CollapseConfig::default()
        },
        resamples: a.resamples,
        ranges,
        seed: a.seed,
    };
    let fit = bootstrap_exponents(&curves, a.form, &cfg)?;
    fit.write_json(&a.out)?;
    println!(
        "eta_c = {:.4} [{:.4}, {:.4}], nu = {:.4} [{:.4}, {:.4}]",
        fit.eta_c.estimate, fit.eta_c.lo, fit.eta_c.hi, fit.nu.estimate, fit.nu.lo, fit.nu.hi
    );
    Ok(())
}

fn reweight(a: ReweightArgs) -> Result<()> {
    let Pairs::Adjacent = a.pairs;
    let manifest = read_manifest(&a.samples)?;
    let (_, l, j) = sample_model(&manifest)?;
    let ens = read_ensembles(&a.samples)?;
    let provider = pipeline::reweighting_provider(&a.samples, &ens, l, j)?;
    let log_z = provider.log_partitions();
    let mut rows = Vec::new();
    for e in &ens {
        let t = e.point.param("T").unwrap_or(f64::NAN);
        let energies = read_energies(&a.samples, e.point.id, &e.basis)?.unwrap_or_default();
        rows.push(json!({
            "point_id": e.point.id,
            "T": t,
            "log_z": log_z.get(&e.point.id),
            "heat_capacity": heat_capacity_from_energies(&energies, t).ok(),
        }));
    }
    let doc = json!({ "L": l, "j": j, "pairs": "adjacent", "points": rows });
    write_text(&a.out, &(serde_json::to_string_pretty(&doc).expect("json") + "\n"))
}

fn maxent_fit(a: MaxentFitArgs) -> Result<()> {
    let manifest = read_manifest(&a.samples)?;
    let ens = read_ensembles(&a.samples)?;
    let target = ens
        .iter()
        .find(|e| e.point.id == a.point && a.basis.as_ref().is_none_or(|b| *b == e.basis))
        .ok_or_else(|| Error::Invalid(format!("no ensemble for point {}", a.point)))?;
    let space = DiscreteConfigSpace::new(target.sites(), manifest.alphabet.clone())?;
    let constraints = empirical_marginals(target, &space)?;
    let cfg = MaxEntConfig {
        tol: a.tol,
        ..MaxEntConfig::default()
    };
    let model = fit_maxent(&constraints, &cfg)?;
    model.write_json(&a.out)?;
    println!(
        "fitted in {} iterations, marginal mismatch {:.2e}, entropy {:.4}",
        model.iterations,
        model.mismatch,
        model.entropy()
    );
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
