use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::DVector;
use serde_json::Value;
use spweight::{implied_weights, synthetic_geometry, write_dataset, CoordFrame, Schema, SpatialDataset, SpatialStructure};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spweight"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn planar() -> Schema {
    Schema { frame: CoordFrame::Planar, ..Schema::default() }
}

/// Synthetic planar dataset with an outcome, written to `dir/data.csv`.
fn dataset(dir: &Path, n: usize) -> (PathBuf, SpatialDataset) {
    let g = synthetic_geometry(n, 8, 300_000.0, 5).unwrap();
    let ds = &g.dataset;
    let y = DVector::from_fn(ds.n(), |i, _| {
        ds.x()[(i, 1)] - 0.5 * ds.x()[(i, 2)] + ds.coords()[i][0] / 1e5 + if ds.z()[i] { 0.8 } else { 0.0 }
    });
    let ds = ds.with_outcome(y).unwrap();
    let path = dir.join("data.csv");
    write_dataset(&ds, fs::File::create(&path).unwrap(), &planar()).unwrap();
    (path, ds)
}

fn read_weights(path: &Path) -> Vec<(bool, f64, f64)> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).unwrap();
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            (&r[1] == "1", r[2].parse().unwrap(), r[3].parse().unwrap())
        })
        .collect()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_same_tree(a: &Path, b: &Path) {
    let mut names: Vec<_> = fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for name in names {
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?} differs");
    }
}

#[test]
fn weights_sum_to_one_per_group_and_rerun_is_identical() {
    let tmp = TempDir::new().unwrap();
    let (data, _) = dataset(tmp.path(), 80);
    let d = data.to_str().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["weights", "--dataset", d, "--frame", "planar", "--structures", "icar:k=4", "-o", a.to_str().unwrap()]);
    ok(&["weights", "--dataset", d, "--frame", "planar", "--structures", "icar:k=4", "-o", b.to_str().unwrap()]);
    assert_same_tree(&a, &b);
    let w = read_weights(&a.join("weights.csv"));
    let t: f64 = w.iter().filter(|r| r.0).map(|r| r.1).sum();
    let c: f64 = w.iter().filter(|r| !r.0).map(|r| r.1).sum();
    assert!((t - 1.0).abs() < 1e-10 && (c - 1.0).abs() < 1e-10);
    assert!(w.iter().all(|r| r.2 == if r.0 { r.1 } else { -r.1 }));
    let fit = json(&a.join("fit.json"));
    assert_eq!(fit["beta"][0]["name"], "intercept");
    assert!(fit["balance"].as_array().unwrap().len() >= 2);
}

#[test]
fn outputs_are_not_overwritten_without_force() {
    let tmp = TempDir::new().unwrap();
    let (data, _) = dataset(tmp.path(), 60);
    let out = tmp.path().join("o");
    let args = ["weights", "--dataset", data.to_str().unwrap(), "--frame", "planar", "--structures", "re", "-o", out.to_str().unwrap()];
    ok(&args);
    let second = run(&args);
    assert_eq!(second.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&second.stderr).contains("--force"));
    let mut forced = args.to_vec();
    forced.push("--force");
    ok(&forced);
}

#[test]
fn custom_structure_matches_library_weights() {
    let tmp = TempDir::new().unwrap();
    let (data, ds) = dataset(tmp.path(), 50);
    let st = SpatialStructure::build_gp_matern(&ds, 1.5, 40_000.0, 1.0, 3.0).unwrap();
    let s_path = tmp.path().join("S.csv");
    let text: String = (0..ds.n())
        .map(|i| (0..ds.n()).map(|j| format!("{:?}", st.s()[(i, j)])).collect::<Vec<_>>().join(",") + "\n")
        .collect();
    fs::write(&s_path, text).unwrap();
    let out = tmp.path().join("o");
    let spec = format!("custom:{}", s_path.display());
    ok(&["weights", "--dataset", data.to_str().unwrap(), "--frame", "planar", "--structures", &spec, "--rho2", "3", "-o", out.to_str().unwrap()]);
    let expect = implied_weights(&ds, &SpatialStructure::custom(st.s(), 1.0, 3.0).unwrap()).unwrap();
    let got = read_weights(&out.join("weights.csv"));
    for (i, r) in got.iter().enumerate() {
        assert!((r.1 - expect.w[i]).abs() < 1e-10, "unit {i}");
    }
    let direct = implied_weights(&ds, &st).unwrap();
    assert!((&direct.w - &expect.w).amax() < 1e-8);
}

#[test]
fn structure_export_has_header_and_spectrum() {
    let tmp = TempDir::new().unwrap();
    let (data, ds) = dataset(tmp.path(), 40);
    let out = tmp.path().join("o");
    ok(&["weights", "--dataset", data.to_str().unwrap(), "--frame", "planar", "--structures", "gp:kappa=1.5:phi=30000", "--export-structure", "4", "-o", out.to_str().unwrap()]);
    let meta = json(&out.join("structure.json"));
    assert_eq!(meta["kind"], "gp");
    assert_eq!(meta["hyperparameters"]["kappa"], 1.5);
    assert!(meta["header"]["config_hash"].as_str().unwrap().len() == 64);
    let eig = fs::read_to_string(out.join("eigenvalues.csv")).unwrap();
    assert_eq!(eig.lines().filter(|l| !l.starts_with('#')).count(), ds.n() + 1);
    let vecs = fs::read_to_string(out.join("eigenvectors.csv")).unwrap();
    assert!(vecs.lines().find(|l| !l.starts_with('#')).unwrap() == "id,v1,v2,v3,v4");
}

#[test]
fn estimate_with_nine_eigenvectors_per_structure() {
    let tmp = TempDir::new().unwrap();
    let (data, _) = dataset(tmp.path(), 400);
    let d = data.to_str().unwrap();
    let run_to = |dir: &str, threads: &str| {
        let out = tmp.path().join(dir);
        ok(&[
            "estimate", "--dataset", d, "--frame", "planar", "--structures", "icar,gp:phi=40000", "--eigvecs", "9,9",
            "--bootstrap", "20", "--seed", "3", "--threads", threads, "-o", out.to_str().unwrap(),
        ]);
        out
    };
    let a = run_to("a", "1");
    let b = run_to("b", "4");
    assert_same_tree(&a, &b);
    let est = json(&a.join("estimate.json"));
    assert_eq!(est["hidden_covariates"], 18);
    assert_eq!(est["header"]["seed"], 3);
    assert!(est["tau"].as_f64().unwrap().is_finite());
    assert!(est["risk_ratio"].as_f64().unwrap() > 0.0);
    let ci = &est["ci"];
    assert!(ci["lower"].as_f64().unwrap() <= ci["upper"].as_f64().unwrap());
    assert!(est["bootstrap"]["dropped"].as_u64().unwrap() <= 20);
    let w = read_weights(&a.join("weights.csv"));
    assert!(w.iter().filter(|r| !r.0).all(|r| r.1 >= 0.0));
}

#[test]
fn auto_model_three_adds_quadratic_terms() {
    let tmp = TempDir::new().unwrap();
    let (data, _) = dataset(tmp.path(), 300);
    let out = tmp.path().join("o");
    let o = run(&[
        "estimate", "--dataset", data.to_str().unwrap(), "--frame", "planar", "--structures", "re", "--eigvecs", "2",
        "--delta", "auto:3", "-o", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let est = json(&out.join("estimate.json"));
    assert_eq!(est["basis"], "quad");
    let higher: Vec<&Value> = est["deltas"].as_array().unwrap().iter().filter(|d| d["group"] == "higher").collect();
    assert_eq!(higher.len(), 3);
    assert!(higher.iter().all(|d| d["delta"] == 0.5));
    assert_eq!(run(&["estimate", "--dataset", data.to_str().unwrap(), "--structures", "re", "--eigvecs", "2", "--delta", "auto:2"]).status.code(), Some(2));
}

#[test]
fn diagnose_reports_are_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (data, _) = dataset(tmp.path(), 60);
    for report in ["balance", "localization", "maxbias", "moran"] {
        let dirs: Vec<PathBuf> = ["a", "b"].iter().map(|s| tmp.path().join(format!("{report}-{s}"))).collect();
        for (dir, threads) in dirs.iter().zip(["1", "3"]) {
            ok(&[
                "diagnose", "--dataset", data.to_str().unwrap(), "--frame", "planar", "--structures", "icar,gp", "--report",
                report, "--threads", threads, "-o", dir.to_str().unwrap(),
            ]);
        }
        assert_same_tree(&dirs[0], &dirs[1]);
    }
    let grid = json(&tmp.path().join("maxbias-a/maxbias.json"));
    assert_eq!(grid["points"].as_array().unwrap().len(), 20);
    let bal = fs::read_to_string(tmp.path().join("balance-a/balance.csv")).unwrap();
    assert!(bal.contains("gp2_v1"));
}

#[test]
fn diagnose_accepts_exported_weights() {
    let tmp = TempDir::new().unwrap();
    let (data, _) = dataset(tmp.path(), 60);
    let d = data.to_str().unwrap();
    let w = tmp.path().join("w");
    ok(&["weights", "--dataset", d, "--frame", "planar", "--structures", "re", "-o", w.to_str().unwrap()]);
    let r = tmp.path().join("r");
    let wf = w.join("weights.csv");
    ok(&["diagnose", "--dataset", d, "--frame", "planar", "--structures", "re", "--report", "balance", "--weights", wf.to_str().unwrap(), "-o", r.to_str().unwrap()]);
    let rows = json(&r.join("balance.json"))["rows"].as_array().unwrap().clone();
    // GLS weights balance the covariates exactly
    for row in rows.iter().filter(|r| r["name"].as_str().unwrap().starts_with('x')) {
        assert!(row["imbalance"].as_f64().unwrap().abs() < 1e-10);
    }
}

#[test]
fn simulate_single_replicate_smoke_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["simulate", "--reps", "1", "--seed", "2", "-o", a.to_str().unwrap()]);
    ok(&["simulate", "--reps", "1", "--seed", "2", "--threads", "4", "-o", b.to_str().unwrap()]);
    assert_same_tree(&a, &b);
    let table = fs::read_to_string(a.join("table.csv")).unwrap();
    let body: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body.len(), 10);
    assert!(body[0].starts_with("confounder,model,ols_bias"));
    let rep = json(&a.join("replicates.json"));
    assert_eq!(rep["config"]["replications"], 1);
    assert_eq!(rep["header"]["seed"], 2);
}

#[test]
fn config_file_with_flag_overrides() {
    let tmp = TempDir::new().unwrap();
    let (data, _) = dataset(tmp.path(), 60);
    let cfg = tmp.path().join("run.json");
    fs::write(&cfg, r#"{"dataset": "data.csv", "schema": {"frame": "planar"}, "structures": ["re"]}"#).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["weights", "--config", cfg.to_str().unwrap(), "-o", a.to_str().unwrap()]);
    ok(&["weights", "--config", cfg.to_str().unwrap(), "--structures", "icar", "-o", b.to_str().unwrap()]);
    let (sa, sb) = (json(&a.join("summary.json")), json(&b.join("summary.json")));
    assert_eq!(sa["structure"]["kind"], "re");
    assert_eq!(sb["structure"]["kind"], "icar");
    assert_ne!(sa["header"]["config_hash"], sb["header"]["config_hash"]);
    let _ = data;
    fs::write(&cfg, r#"{"structures": ["re"], "no_such_key": 1}"#).unwrap();
    assert_eq!(run(&["weights", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn exit_codes_follow_error_classes() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "id,lat,lon,cluster,z\na,0,0,c,2\nb,1,1,c,0\n").unwrap();
    let o = run(&["weights", "--dataset", bad.to_str().unwrap(), "--structures", "re"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-binary"));

    let missing = run(&["weights", "--dataset", "/nonexistent.csv", "--structures", "re"]);
    assert_eq!(missing.status.code(), Some(2));

    // treatment identical to a covariate
    let collinear = tmp.path().join("col.csv");
    let mut text = String::from("id,lat,lon,cluster,z,x_t\n");
    for i in 0..12 {
        let z = (i % 3 == 0) as u8;
        text += &format!("u{i},{},{},c{},{z},{z}\n", i as f64 * 100.0, (i * i) as f64 * 10.0, i % 4);
    }
    fs::write(&collinear, text).unwrap();
    let o = run(&["weights", "--dataset", collinear.to_str().unwrap(), "--frame", "planar", "--structures", "re"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));

    // treated covariate values lie outside the control range
    let apart = tmp.path().join("apart.csv");
    let mut text = String::from("id,lat,lon,cluster,z,x_a\n");
    for i in 0..30 {
        let z = (i % 3 == 0) as u8;
        let x = 10.0 * z as f64 + ((i * 7) % 5) as f64 * 0.1;
        text += &format!("u{i},{},{},c{},{z},{x}\n", i as f64 * 100.0, ((i * i) % 17) as f64 * 50.0, i % 4);
    }
    fs::write(&apart, text).unwrap();
    let o = run(&[
        "estimate", "--dataset", apart.to_str().unwrap(), "--frame", "planar", "--structures", "re", "--eigvecs", "1",
        "-o", tmp.path().join("inf").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("inflation"));

    let (data, _) = dataset(tmp.path(), 60);
    assert_eq!(run(&["estimate", "--dataset", data.to_str().unwrap(), "--frame", "planar", "--structures", "re", "--eigvecs", "2", "--bootstrap", "5"]).status.code(), Some(2));
}

#[test]
fn selftest_passes() {
    let o = run(&["selftest"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().all(|l| !l.starts_with("FAIL")));
    assert!(text.contains("checks passed"));
}
