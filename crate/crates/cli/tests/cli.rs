use std::path::PathBuf;
use std::process::{Command, Output};

fn data(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(rel)
}

fn dnut(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dnut"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn feeder() -> String {
    data("ieee_european_lv").display().to_string()
}

fn fig1() -> String {
    data("scenarios/fig1.json").display().to_string()
}

#[test]
fn validate_intact_feeder() {
    let o = dnut(&["validate", "--network", &feeder()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("55 prosumers"));
}

#[test]
fn missing_files_exit_one_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = dnut(&["validate", "--network", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Lines.csv"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(dnut(&["validate", "--bogus"]).status.code(), Some(2));
    assert_eq!(dnut(&["case3", "--network", &feeder()]).status.code(), Some(2));
    assert_eq!(
        dnut(&["validate", "--network", &feeder(), "--scenario", &fig1()]).status.code(),
        Some(2)
    );
    let o = dnut(&["case3", "--scenario", &fig1(), "--seed", "1", "--ppr", "1.5"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert_eq!(
        dnut(&["dnut", "--scenario", &fig1(), "--energy", "lots"]).status.code(),
        Some(2)
    );
}

#[test]
fn fig1_matrix_csv() {
    let o = dnut(&["dnut", "--scenario", &fig1(), "--energy", "0.25kWh"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[0], ["supplier\\consumer", "P1", "P2", "P3", "P4"]);
    let value = |s: usize, d: usize| rows[s + 1][d + 1].parse::<f64>().unwrap();
    for k in 0..4 {
        assert_eq!(value(k, k), 0.0);
    }
    assert!(value(0, 2) > 0.0);
    assert!(value(3, 2) < 0.0);
}

#[test]
fn decomposed_matrix_json() {
    let o = dnut(&["dnut", "--scenario", &fig1(), "--decompose"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let get = |key: &str, s: usize, d: usize| doc[key][s][d].as_f64().unwrap();
    for s in 0..4 {
        for d in 0..4 {
            let sum = get("current", s, d) + get("voltage", s, d) + get("loss", s, d);
            assert!((sum - get("values", s, d)).abs() <= 1e-9 * get("values", s, d).abs().max(1.0));
        }
    }
    assert_eq!(doc["reference_energy"].as_f64(), Some(4e-4));
}

#[test]
fn powerflow_and_sensitivity_outputs() {
    let o = dnut(&["powerflow", "--scenario", &fig1()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(doc["buses"].as_array().unwrap().len(), 5);
    assert!(doc["loss_power"].as_f64().unwrap() > 0.0);

    let dir = tempfile::tempdir().unwrap();
    let o = dnut(&["sensitivity", "--scenario", &fig1(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let vsf = std::fs::read_to_string(dir.path().join("vsf.csv")).unwrap();
    let header: Vec<&str> = vsf.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 1 + 12);
    assert_eq!(vsf.lines().count(), 1 + 15);
    let csf = std::fs::read_to_string(dir.path().join("csf.csv")).unwrap();
    assert_eq!(csf.lines().count(), 1 + 12);
}

#[test]
fn market_replay_logs_trades() {
    let dir = tempfile::tempdir().unwrap();
    let orders = dir.path().join("orders.jsonl");
    std::fs::write(
        &orders,
        concat!(
            "# supplier first, then a crossing bid\n",
            "{\"owner\":\"P1\",\"side\":\"supply\",\"price\":40.0,\"quantity\":0.0001}\n",
            "\n",
            "{\"owner\":\"P3\",\"side\":\"demand\",\"price\":80.0,\"quantity\":0.0001}\n",
        ),
    )
    .unwrap();
    let o = dnut(&["market-replay", "--scenario", &fig1(), "--orders", orders.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let trades: Vec<serde_json::Value> = stdout(&o)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(trades.len(), 1);
    let t = &trades[0];
    assert_eq!(t["supplier_name"], "P1");
    assert_eq!(t["consumer_name"], "P3");
    let dnut_value = t["dnut"].as_f64().unwrap();
    assert!(80.0 >= 40.0 + dnut_value);
    let split = t["nominated_energy"].as_f64().unwrap() + t["excessive_energy"].as_f64().unwrap();
    assert_eq!(split, t["energy"].as_f64().unwrap());
}

#[test]
fn case3_files_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let run = |tag: &str, threads: &str| {
        let o = dnut(&[
            "case3", "--network", &feeder(), "--ppr-grid", "0:1:0.5", "--runs", "3", "--seed", "42",
            "--out-dir", out, "--tag", tag, "--threads", threads,
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    };
    run("a", "1");
    run("b", "2");
    for suffix in [".csv", "_runs.csv", ".json"] {
        let a = std::fs::read(dir.path().join(format!("case3_a{suffix}"))).unwrap();
        let b = std::fs::read(dir.path().join(format!("case3_b{suffix}"))).unwrap();
        assert_eq!(a, b, "case3{suffix} differs");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("case3_a_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 42);
    assert_eq!(manifest["grid"].as_array().unwrap().len(), 3);
    let inputs = manifest["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 4);
    assert!(inputs.iter().all(|i| i["sha256"].as_str().unwrap().len() == 64));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sim.toml");
    std::fs::write(&config, "ppr = 0.5\npar = 0.2\nmonte_carlo_runs = 2\n\n[constants]\nc_loss = 100.0\n").unwrap();
    let o = dnut(&[
        "--config", config.to_str().unwrap(),
        "case2", "--scenario", &fig1(), "--seed", "3", "--par", "0.4", "--scale-grid", "1",
        "--out-dir", dir.path().to_str().unwrap(), "--tag", "t",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("case2_t_manifest.json")).unwrap()).unwrap();
    let c = &manifest["config"];
    assert_eq!(c["ppr"], 0.5);
    assert_eq!(c["par"], 0.4);
    assert_eq!(c["monte_carlo_runs"], 2);
    assert_eq!(c["sr"], 0.1);
    assert_eq!(c["constants"]["c_loss"], 100.0);
    assert_eq!(c["constants"]["c_i_linear"], 3.588e-6);
    let rows = std::fs::read_to_string(dir.path().join("case2_t.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 3);
}

#[test]
fn case1_tracks_named_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let o = dnut(&[
        "case1", "--network", &feeder(), "--seed", "42", "--sr-grid", "0.1,0.9",
        "--out-dir", dir.path().to_str().unwrap(), "--tag", "t",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = std::fs::read_to_string(dir.path().join("case1_t.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 6);
    assert!(rows.lines().nth(1).unwrap().contains("LOAD1,LOAD19"));

    let o = dnut(&["case1", "--network", &feeder(), "--seed", "1", "--consumer", "NOPE"]);
    assert_eq!(o.status.code(), Some(2));
}
