mod common;

use std::fs;
use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};

use common::{bundled, run};

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "fpca {args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn write_toy(dir: &Path) -> String {
    // Exactly rank one: row i is (i + 1) * (1, 2, 3, 4).
    let mut s = String::from("row,col,value\n");
    for i in 0..5 {
        for j in 0..4 {
            s.push_str(&format!("{i},{j},{}\n", (i + 1) as f64 * (j + 1) as f64));
        }
    }
    let path = dir.join("toy.csv");
    fs::write(&path, s).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn fit_exact_rank_one_toy() {
    let dir = tempfile::tempdir().unwrap();
    let toy = write_toy(dir.path());
    let out = dir.path().join("fit");
    ok(&["fit", "--input", &toy, "--family", "gaussian", "--variant", "simple", "--k", "1", "--seed", "7", "--out", out.to_str().unwrap()]);
    let fit = json(&out.join("fit.json"));
    assert!(fit["deviance"].as_f64().unwrap() < 1e-12);
    assert_eq!(fit["seed"], 7);
    assert_eq!(fit["k"], 1);
    assert_eq!(fit["starts"].as_array().unwrap().len(), 5);

    let alpha = csv_rows(&out.join("alpha.csv"));
    assert_eq!(alpha[0], ["row", "alpha_1"]);
    assert_eq!(alpha.len(), 6);
    let gamma = csv_rows(&out.join("gamma.csv"));
    assert_eq!(gamma[0], ["col", "gamma"]);
    assert!(gamma[1..].iter().all(|r| r[1].parse::<f64>().unwrap() == 0.0));
}

#[test]
fn manifest_records_inputs_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let toy = write_toy(dir.path());
    let out = dir.path().join("fit");
    let man = dir.path().join("man");
    ok(&["fit", "--input", &toy, "--family", "gaussian", "--k", "1", "--variant", "simple", "--out", out.to_str().unwrap(), "--manifest", man.to_str().unwrap()]);
    assert!(!out.join("manifest.json").exists());
    let m = json(&man.join("manifest.json"));
    assert_eq!(m["subcommand"], "fit");
    assert_eq!(m["seed"], 0);
    let digest: String = Sha256::digest(fs::read(&toy).unwrap()).iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(m["inputs"][0]["sha256"], Value::String(digest));
    assert_eq!(m["flags"]["k"], 1);
    assert!(m["duration_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn seed_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let toy = write_toy(dir.path());
    let out = dir.path().join("fit");
    let o = common::fpca_bin()
        .args(["fit", "--input", &toy, "--family", "gaussian", "--k", "1", "--variant", "simple", "--out", out.to_str().unwrap()])
        .env("FPCA_SEED", "99")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(json(&out.join("fit.json"))["seed"], 99);
}

#[test]
fn select_bic_on_bundled_example() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sel");
    let data = bundled("sim_k2.csv");
    ok(&["select", "--input", data.to_str().unwrap(), "--family", "gaussian", "--variant", "covariance", "--rule", "bic", "--k-max", "4", "--out", out.to_str().unwrap()]);
    let sel = json(&out.join("selection.json"));
    assert_eq!(sel["chosen_k"], 2);
    assert_eq!(sel["gic"]["k_ref"], 6);
    let table = csv_rows(&out.join("selection.csv"));
    assert_eq!(table[0], ["k", "loglik", "df", "gic", "chosen"]);
    assert_eq!(table.len(), 5);
    assert_eq!(table[2][4], "1");
}

#[test]
fn aic_prints_warning() {
    let dir = tempfile::tempdir().unwrap();
    let toy = write_toy(dir.path());
    let o = run(&["select", "--input", &toy, "--family", "gaussian", "--rule", "aic", "--k-max", "1", "--out", dir.path().join("s").to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("prefer BIC"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let toy = write_toy(dir.path());
    let out = dir.path().join("x");
    let out = out.to_str().unwrap();

    let unknown = run(&["fit", "--input", &toy, "--family", "gaussian", "--k", "1", "--variant", "simple", "--bogus"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert_eq!(run(&["transmogrify"]).status.code(), Some(1));
    assert_eq!(run(&["fit", "--input", &toy, "--family", "gaussian", "--k", "0", "--variant", "simple", "--out", out]).status.code(), Some(2));

    let missing = run(&["fit", "--input", "/nonexistent/file.csv", "--family", "gaussian", "--k", "1", "--variant", "simple", "--out", out]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&missing.stderr).is_empty());

    // Negative counts are outside the Poisson support.
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "row,col,value\n0,0,1\n0,1,-2\n1,0,3\n1,1,4\n").unwrap();
    let o = run(&["fit", "--input", bad.to_str().unwrap(), "--family", "poisson", "--k", "1", "--variant", "simple", "--out", out]);
    assert_eq!(o.status.code(), Some(2));

    // Rank 3 on a 5 x 4 grid leaves rows with too few cells for the covariance variant.
    let o = run(&["fit", "--input", &toy, "--family", "gaussian", "--k", "3", "--variant", "covariance", "--out", out]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn dense_input_with_missing_cells() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dense.csv");
    fs::write(&path, "1,2,3,4\n2,NA,6,8\n3,6,9,.\n4,8,12,16\n-1,-2,NA,-4\n").unwrap();
    let out = dir.path().join("fit");
    // Only NA is the default token; '.' must be declared.
    let o = run(&["fit", "--input", path.to_str().unwrap(), "--format", "dense", "--family", "gaussian", "--k", "1", "--variant", "simple", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    fs::write(&path, "1,2,3,4\n2,NA,6,8\n3,6,9,NA\n4,8,12,16\n-1,-2,NA,-4\n").unwrap();
    ok(&["fit", "--input", path.to_str().unwrap(), "--format", "dense", "--family", "gaussian", "--k", "1", "--variant", "simple", "--out", out.to_str().unwrap()]);
    let fit = json(&out.join("fit.json"));
    assert_eq!(fit["n_obs"], 17);
    assert!(fit["deviance"].as_f64().unwrap() < 1e-12);

    let pred = dir.path().join("pred");
    ok(&["predict", "--fit", out.to_str().unwrap(), "--cells", "all", "--out", pred.to_str().unwrap()]);
    let rows = csv_rows(&pred.join("predictions.csv"));
    assert_eq!(rows[0], ["row", "col", "value"]);
    assert_eq!(rows.len(), 21);
    let hidden = rows.iter().find(|r| r[0] == "1" && r[1] == "1").unwrap();
    assert!((hidden[2].parse::<f64>().unwrap() - 4.0).abs() < 1e-6);
}

#[test]
fn predict_observed_cells_and_difference() {
    let dir = tempfile::tempdir().unwrap();
    let data = bundled("sim_k2.csv");
    let data = data.to_str().unwrap();
    let fit = dir.path().join("fit");
    ok(&["fit", "--input", data, "--family", "gaussian", "--variant", "covariance", "--k", "2", "--out", fit.to_str().unwrap()]);
    let pred = dir.path().join("pred");
    ok(&["predict", "--fit", fit.to_str().unwrap(), "--cells", "observed", "--input", data, "--difference", "--out", pred.to_str().unwrap()]);
    let preds = csv_rows(&pred.join("predictions.csv"));
    let diffs = csv_rows(&pred.join("difference.csv"));
    assert_eq!(preds.len(), 804);
    assert_eq!(diffs.len(), 804);
    let values: Vec<f64> = csv_rows(Path::new(data))[1..].iter().map(|r| r[2].parse().unwrap()).collect();
    for ((p, d), x) in preds[1..].iter().zip(&diffs[1..]).zip(&values) {
        let mu: f64 = p[2].parse().unwrap();
        let diff: f64 = d[2].parse().unwrap();
        assert!((diff - (x - mu).abs()).abs() < 1e-12);
    }

    let cells = dir.path().join("cells.csv");
    fs::write(&cells, "row,col\n0,0\n29,29\n").unwrap();
    let sel = dir.path().join("sel");
    ok(&["predict", "--fit", fit.to_str().unwrap(), "--cells", cells.to_str().unwrap(), "--out", sel.to_str().unwrap()]);
    assert_eq!(csv_rows(&sel.join("predictions.csv")).len(), 3);

    fs::write(&cells, "row,col\n30,0\n").unwrap();
    let o = run(&["predict", "--fit", fit.to_str().unwrap(), "--cells", cells.to_str().unwrap(), "--out", sel.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn decompose_writes_components() {
    let dir = tempfile::tempdir().unwrap();
    let data = bundled("sim_k2.csv");
    let data = data.to_str().unwrap();
    let fit = dir.path().join("fit");
    ok(&["fit", "--input", data, "--family", "gaussian", "--variant", "covariance", "--k", "2", "--out", fit.to_str().unwrap()]);
    let dec = dir.path().join("dec");
    ok(&["decompose", "--fit", fit.to_str().unwrap(), "--input", data, "--out", dec.to_str().unwrap()]);
    let pcs = csv_rows(&dec.join("pcs.csv"));
    assert_eq!(pcs[0], ["row", "pc_1", "pc_2"]);
    assert_eq!(pcs.len(), 31);
    let loadings = csv_rows(&dec.join("loadings.csv"));
    let norm: f64 = loadings[1..].iter().map(|r| r[1].parse::<f64>().unwrap().powi(2)).sum();
    assert!((norm - 1.0).abs() < 1e-10);
    let explained = csv_rows(&dec.join("explained.csv"));
    assert_eq!(explained[0], ["m", "d", "deviance", "cumulative", "increment"]);
    let cumulative: f64 = explained.last().unwrap()[3].parse().unwrap();
    assert!(cumulative > 0.99, "explained {cumulative}");
}

#[test]
fn multiple_inputs_get_their_own_directories() {
    let dir = tempfile::tempdir().unwrap();
    let toy = write_toy(dir.path());
    let other = dir.path().join("other.csv");
    fs::copy(&toy, &other).unwrap();
    let out = dir.path().join("out");
    ok(&["fit", "--input", &toy, "--input", other.to_str().unwrap(), "--family", "gaussian", "--k", "1", "--variant", "simple", "--out", out.to_str().unwrap()]);
    assert!(out.join("toy").join("fit.json").exists());
    assert!(out.join("other").join("fit.json").exists());
    assert_eq!(fs::read(out.join("toy/fit.json")).unwrap(), fs::read(out.join("other/fit.json")).unwrap());
}

#[test]
fn simulate_prints_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let stdout = ok(&["simulate", "--n", "15", "--p", "12", "--k-true", "1", "--replications", "3", "--rules", "bic", "--seed", "4", "--out", out.to_str().unwrap()]);
    assert!(stdout.contains("bic: 100.0% correct"), "{stdout}");
    let rows = csv_rows(&out.join("simreport.csv"));
    assert_eq!(
        rows[0],
        ["tau", "n", "p", "k_true", "rule", "percent_correct", "mean_rmsep_hidden", "mean_rmsep_cv_test", "replications", "failures"]
    );
    let report = json(&out.join("simreport.json"));
    assert_eq!(report["replications"].as_array().unwrap().len(), 3);
}

/// Three channels of a synthetic 40 x 40 image, each a rank-3 pattern plus
/// small noise, analysed on a window with a hole: BIC finds rank 3 in every
/// channel, and the numbers match the stored golden results.
#[test]
fn image_window_golden() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("img");
    let channels = ["red", "green", "blue"];
    let paths: Vec<String> = channels.iter().map(|c| bundled(&format!("image_{c}.csv")).to_str().unwrap().to_string()).collect();
    let mut args = vec!["select"];
    for p in &paths {
        args.extend(["--input", p.as_str()]);
    }
    args.extend([
        "--format", "dense", "--outer", "4,4,36,36", "--inner", "14,14,26,26", "--family", "gaussian",
        "--variant", "simple", "--rule", "bic", "--k-max", "6", "--out", out.to_str().unwrap(),
    ]);
    ok(&args);
    let golden: Value = serde_json::from_str(include_str!("golden/image_window.json")).unwrap();
    for c in channels {
        let sel = json(&out.join(format!("image_{c}")).join("selection.json"));
        assert_eq!(sel["chosen_k"], 3, "channel {c}");
        assert_eq!(sel["n_obs"], 32 * 32 - 12 * 12);
        let want = &golden[c];
        for (got, exp) in sel["gic"]["table"].as_array().unwrap().iter().zip(want.as_array().unwrap()) {
            let (g, e) = (got["loglik"].as_f64().unwrap(), exp.as_f64().unwrap());
            assert!((g - e).abs() <= 1e-8 * e.abs().max(1.0), "channel {c}: loglik {g} vs golden {e}");
        }
    }
}
