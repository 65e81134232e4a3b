use std::path::Path;
use std::process::{Command, Output};

fn distlearn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distlearn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY: &str = r#"{
    "seed": 11,
    "model": { "kind": "tfim", "sizes": [4], "grid": { "start": 0.2, "stop": 1.8, "points": 12 } },
    "sampler": { "samples_per_point": 200 },
    "divergence": { "provider": "exact" },
    "clustering": { "min_samples": 3, "min_cluster_size": 3 }
}"#;

#[test]
fn unknown_config_key_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, TINY.replace("\"sampler\"", "\"sampler\": {}, \"samplr\"")).unwrap();
    let out = distlearn(&["run", "--config", p(&cfg), "--dir", p(&dir.path().join("s"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("samplr"));
}

#[test]
fn run_then_rerun_is_cached() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("study.json");
    std::fs::write(&cfg, TINY).unwrap();
    let study = dir.path().join("study");
    let first = distlearn(&["run", "--config", p(&cfg), "--dir", p(&study)]);
    ok(&first);
    let matrix = std::fs::read(study.join("matrices/L4.json")).unwrap();
    let second = distlearn(&["run", "--config", p(&cfg), "--dir", p(&study)]);
    ok(&second);
    assert!(String::from_utf8_lossy(&second.stdout).contains("up to date: sample-L4"));
    assert_eq!(std::fs::read(study.join("matrices/L4.json")).unwrap(), matrix);
    let report = distlearn(&["report", "--dir", p(&study)]);
    ok(&report);
    assert!(String::from_utf8_lossy(&report.stdout).contains("L=4"));
}

#[test]
fn cache_dir_env_sets_default_study_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("study.json");
    std::fs::write(&cfg, TINY).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_distlearn"))
        .args(["--workers", "1", "run", "--config", p(&cfg)])
        .env("DISTLEARN_CACHE_DIR", dir.path())
        .output()
        .unwrap();
    ok(&out);
    let studies: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("study-"))
        .collect();
    assert_eq!(studies.len(), 1);
}

#[test]
fn report_on_empty_directory_lists_missing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = distlearn(&["report", "--dir", p(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("matrices") && err.contains("fss.json"), "{err}");
}

#[test]
fn stepwise_tfim_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let samples = d.join("samples");
    ok(&distlearn(&[
        "sample-tfim", "--L", "4", "--start", "0.2", "--stop", "1.8", "--points", "10", "--samples", "300", "--seed",
        "5", "--out", p(&samples),
    ]));
    ok(&distlearn(&[
        "train", "--samples", p(&samples), "--depth", "1", "--width", "16", "--epochs", "3", "--seed", "5", "--out",
        p(&d.join("model.json")),
    ]));
    ok(&distlearn(&[
        "estimate", "--samples", p(&samples), "--provider", "nn", "--model", p(&d.join("model.json")), "--out",
        p(&d.join("nn.json")),
    ]));
    ok(&distlearn(&[
        "estimate", "--samples", p(&samples), "--provider", "exact", "--kind", "kl", "--out", p(&d.join("exact.json")),
    ]));
    ok(&distlearn(&[
        "cluster", "--matrix", p(&d.join("nn.json")), "--min-samples", "2", "--min-cluster-size", "2", "--out",
        p(&d.join("clusters.json")),
    ]));
    assert!(d.join("clusters.csv").exists());
    ok(&distlearn(&["susceptibility", "--matrix", p(&d.join("exact.json")), "--out", p(&d.join("chi.json"))]));
    assert!(d.join("chi.csv").exists());
    ok(&distlearn(&["naive-overlap", "--samples", p(&samples), "--out", p(&d.join("naive.json"))]));
    let bad = distlearn(&["estimate", "--samples", p(&samples), "--provider", "reweight", "--out", p(&d.join("x.json"))]);
    assert_eq!(bad.status.code(), Some(3));
}

#[test]
fn stepwise_ising_and_maxent_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let samples = d.join("ising");
    ok(&distlearn(&[
        "sample-ising", "--L", "3", "--start", "2.0", "--stop", "3.0", "--points", "4", "--samples", "400",
        "--equilibration", "50", "--thinning", "2", "--out", p(&samples),
    ]));
    ok(&distlearn(&["reweight", "--samples", p(&samples), "--pairs", "adjacent", "--out", p(&d.join("z.json"))]));
    let z: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("z.json")).unwrap()).unwrap();
    assert_eq!(z["points"].as_array().unwrap().len(), 4);
    ok(&distlearn(&["estimate", "--samples", p(&samples), "--provider", "reweight", "--out", p(&d.join("rw.json"))]));
    ok(&distlearn(&["estimate", "--samples", p(&samples), "--provider", "exact", "--out", p(&d.join("ex.json"))]));
    ok(&distlearn(&[
        "maxent-fit", "--samples", p(&samples), "--point", "1", "--out", p(&d.join("maxent.json")),
    ]));
    ok(&distlearn(&[
        "maxent-sample", "--model", p(&d.join("maxent.json")), "--samples", "50", "--out", p(&d.join("surrogate")),
    ]));
    assert!(d.join("surrogate/manifest.json").exists());
}

#[test]
fn invalid_arguments_are_config_errors() {
    let out = distlearn(&["estimate", "--samples", "x", "--provider", "magic", "--out", "y"]);
    assert_eq!(out.status.code(), Some(2));
}
