use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn tro(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tro"))
        .args(args)
        .current_dir(cwd)
        .env("TRO_OPT_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: &str = r#"
seed = 3
[dataset]
generator = "dg_ring"
n_per_group = 40
[method]
name = "tro"
iterations = 200
[topology]
mode = "physical"
"#;

#[test]
fn gen_data_is_deterministic_and_sized() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", "[dataset]\ngenerator = \"dg_ring\"\n");
    let c = cfg.to_str().unwrap();
    ok(&tro(&["gen-data", "--config", c, "--out", "a"], tmp.path()));
    ok(&tro(&["gen-data", "--config", c, "--out", "b"], tmp.path()));
    let (ma, mb) = (
        json(&tmp.path().join("a/manifest.json")),
        json(&tmp.path().join("b/manifest.json")),
    );
    assert_eq!(ma["content_hash"], mb["content_hash"]);
    assert_eq!(ma["config"]["dataset"]["groups"], 15);

    let csv = std::fs::read_to_string(tmp.path().join("a/data.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 15 * 100);
    for g in 0..15 {
        let name = format!("{g},");
        assert_eq!(rows.iter().filter(|r| r.starts_with(&name)).count(), 100);
    }
}

#[test]
fn invalid_generator_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", "[dataset]\ngenerator = \"moons\"\n");
    let out = tro(
        &["gen-data", "--config", cfg.to_str().unwrap(), "--out", "o"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("dg_ring") && err.contains("grid") && err.contains("csv"),
        "{err}"
    );
}

#[test]
fn physical_topology_on_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", SMALL);
    let c = cfg.to_str().unwrap();
    ok(&tro(&["gen-data", "--config", c, "--out", "data"], tmp.path()));
    ok(&tro(
        &["topology", "--config", c, "--data", "data", "--out", "topo"],
        tmp.path(),
    ));
    let dot = std::fs::read_to_string(tmp.path().join("topo/topology.dot")).unwrap();
    assert_eq!(dot.lines().filter(|l| l.contains(" -- ")).count(), 14);
    let prior = json(&tmp.path().join("topo/prior.json"));
    let sum: f64 = prior["prior"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .sum();
    assert!((sum - 1.0).abs() < 1e-9);
    assert_eq!(prior["seed"], 3);
    assert_eq!(prior["config"]["topology"]["mode"], "physical");
}

#[test]
fn data_topology_on_duplicated_groups() {
    let tmp = tempfile::tempdir().unwrap();
    let mut csv = String::from("g,a,b,y\n");
    let points = [[0.0, 0.1], [0.3, -0.2], [1.0, 0.4], [-0.5, 0.9], [0.2, 0.2]];
    for g in ["p", "q"] {
        for (i, [a, b]) in points.iter().enumerate() {
            csv.push_str(&format!("{g},{a},{b},{}\n", i % 2));
        }
    }
    for (i, [a, b]) in points.iter().enumerate() {
        csv.push_str(&format!("r,{},{},{}\n", a + 5.0, b - 3.0, i % 2));
    }
    write(tmp.path(), "d.csv", &csv);
    let cfg = write(
        tmp.path(),
        "c.toml",
        r#"
[dataset]
generator = "csv"
path = "d.csv"
task = "classification"
schema = { feature_columns = ["a", "b"], label_column = "y", group_column = "g" }
[topology]
mode = "data"
knn_k = 1
"#,
    );
    ok(&tro(
        &["topology", "--config", cfg.to_str().unwrap(), "--out", "t"],
        tmp.path(),
    ));
    let topo = json(&tmp.path().join("t/topology.json"));
    let d = &topo["distance_matrix"];
    assert!(d[0][1].as_f64().unwrap() < 1e-9, "{d}");
    assert!(d[0][2].as_f64().unwrap() > 0.1, "{d}");
}

#[test]
fn train_prior_handling_and_rerun_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", SMALL);
    let c = cfg.to_str().unwrap();
    ok(&tro(&["gen-data", "--config", c, "--out", "data"], tmp.path()));
    ok(&tro(
        &["topology", "--config", c, "--data", "data", "--out", "topo"],
        tmp.path(),
    ));

    let missing = tro(&["train", "--config", c, "--data", "data", "--out", "x"], tmp.path());
    assert_eq!(missing.status.code(), Some(2));

    let erm = write(
        tmp.path(),
        "erm.toml",
        &SMALL.replace("name = \"tro\"", "name = \"erm\""),
    );
    let out = tro(
        &[
            "train",
            "--config",
            erm.to_str().unwrap(),
            "--data",
            "data",
            "--prior",
            "topo/prior.json",
            "--out",
            "e",
        ],
        tmp.path(),
    );
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("ignores the prior"));

    let args = ["train", "--config", c, "--data", "data", "--prior", "topo/prior.json"];
    ok(&tro(&[&args[..], &["--out", "r1"]].concat(), tmp.path()));
    ok(&tro(&[&args[..], &["--out", "r2"]].concat(), tmp.path()));
    ok(&tro(
        &["train", "--config", "r1/manifest.json", "--out", "r3"],
        tmp.path(),
    ));
    for f in ["history.csv", "report.json", "checkpoint.json", "manifest.json"] {
        let a = std::fs::read(tmp.path().join("r1").join(f)).unwrap();
        assert_eq!(a, std::fs::read(tmp.path().join("r2").join(f)).unwrap(), "{f}");
        assert_eq!(a, std::fs::read(tmp.path().join("r3").join(f)).unwrap(), "{f}");
    }
    let report = json(&tmp.path().join("r1/report.json"));
    assert_eq!(report["meta"]["seed"], 3);
    assert_eq!(report["per_group"].as_object().unwrap().len(), 9);

    ok(&tro(
        &[
            "eval",
            "--config",
            c,
            "--data",
            "data",
            "--checkpoint",
            "r1/checkpoint.json",
            "--out",
            "ev",
        ],
        tmp.path(),
    ));
    assert_eq!(json(&tmp.path().join("ev/report.json")), report);
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", SMALL);
    let c = cfg.to_str().unwrap();
    ok(&tro(
        &["gen-data", "--config", c, "--seed", "11", "--out", "a"],
        tmp.path(),
    ));
    let m = json(&tmp.path().join("a/manifest.json"));
    assert_eq!(m["seed"], 11);
    assert_eq!(m["config"]["dataset"]["seed"], 11);
}

#[test]
fn one_point_sweep_matches_train() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!("{SMALL}\n[eval]\nval_fraction = 0.0\n[sweep]\nlambda = [0.01]\neta_q = [0.01]\n");
    let cfg = write(tmp.path(), "c.toml", &text);
    let c = cfg.to_str().unwrap();
    ok(&tro(&["gen-data", "--config", c, "--out", "data"], tmp.path()));
    ok(&tro(
        &["topology", "--config", c, "--data", "data", "--out", "topo"],
        tmp.path(),
    ));
    let common = ["--config", c, "--data", "data", "--prior", "topo/prior.json"];
    ok(&tro(&[&["train"][..], &common, &["--out", "t"]].concat(), tmp.path()));
    ok(&tro(&[&["sweep"][..], &common, &["--out", "s"]].concat(), tmp.path()));
    for f in ["history.csv", "report.json"] {
        assert_eq!(
            std::fs::read(tmp.path().join("t").join(f)).unwrap(),
            std::fs::read(tmp.path().join("s/cells/cell_000/seed_3").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn sweep_summary_and_validation_selection() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!("{SMALL}\n[sweep]\nlambda = [0.001, 1.0, 100.0]\neta_q = [0.01, 0.1]\nseeds = [0, 1]\n");
    let cfg = write(tmp.path(), "c.toml", &text);
    ok(&tro(
        &["sweep", "--config", cfg.to_str().unwrap(), "--jobs", "3", "--out", "s"],
        tmp.path(),
    ));
    let summary = std::fs::read_to_string(tmp.path().join("s/summary.csv")).unwrap();
    let rows: Vec<Vec<&str>> = summary.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3 * 2 * 2);

    // best cell from the validation column alone
    let mut means = [(0.0, 0); 6];
    for r in &rows {
        let cell: usize = r[0].parse().unwrap();
        means[cell].0 += r[4].parse::<f64>().unwrap();
        means[cell].1 += 1;
    }
    let mut best = 0;
    for (i, (s, n)) in means.iter().enumerate() {
        if s / *n as f64 > means[best].0 / means[best].1 as f64 {
            best = i;
        }
    }
    let sel = json(&tmp.path().join("s/selection.json"));
    assert_eq!(sel["best"]["cell"], best);

    // parallelism does not change results
    ok(&tro(
        &["sweep", "--config", cfg.to_str().unwrap(), "--jobs", "1", "--out", "s1"],
        tmp.path(),
    ));
    assert_eq!(
        summary,
        std::fs::read_to_string(tmp.path().join("s1/summary.csv")).unwrap()
    );
}

#[test]
fn empty_sweep_grid_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", &format!("{SMALL}\n[sweep]\nlambda = []\n"));
    let out = tro(&["sweep", "--config", cfg.to_str().unwrap(), "--out", "s"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn writes_stay_inside_out_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", SMALL);
    let c = cfg.to_str().unwrap();
    ok(&tro(&["gen-data", "--config", c, "--out", "o/data"], tmp.path()));
    ok(&tro(
        &["topology", "--config", c, "--data", "o/data", "--out", "o/topo"],
        tmp.path(),
    ));
    ok(&tro(
        &[
            "train",
            "--config",
            c,
            "--data",
            "o/data",
            "--prior",
            "o/topo/prior.json",
            "--out",
            "o/train",
        ],
        tmp.path(),
    ));
    let top: Vec<String> = std::fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    let mut top = top;
    top.sort();
    assert_eq!(top, vec!["c.toml", "o"]);
}

#[test]
fn bad_log_level_and_unreadable_data() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tro"))
        .args(["gen-data", "--out", "o"])
        .current_dir(tmp.path())
        .env("TRO_OPT_LOG", "loud")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = tro(&["train", "--data", "nowhere", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
}
