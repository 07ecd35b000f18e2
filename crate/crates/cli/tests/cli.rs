use std::process::{Command, Output};

fn sme_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sme-lab")).args(args).env_remove("SME_LAB_THREADS").output().expect("spawn sme-lab")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL_SIM: &[&str] =
    &["simulate", "--optimizer", "rmsprop", "--regime", "balistic", "--order", "1", "--tau", "0.125", "--horizon", "1", "--paths", "16"];

#[test]
fn simulate_csv_has_manifest_and_columns() {
    let o = sme_lab(SMALL_SIM);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let mut lines = text.lines();
    let first = lines.next().unwrap();
    assert!(first.starts_with("# manifest=") && first.len() == "# manifest=".len() + 64);
    assert_eq!(lines.next().unwrap(), "t,E[f1],se_f1,E[f2],se_f2");
    assert_eq!(lines.count(), 9);
}

#[test]
fn simulate_json_matches_csv() {
    let csv = stdout(&sme_lab(SMALL_SIM));
    let mut args = SMALL_SIM.to_vec();
    args.extend(["--format", "json"]);
    let o = sme_lab(&args);
    assert!(o.status.success());
    let rows: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let rows = rows.as_array().unwrap();
    let data: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), data.len());
    for (row, line) in rows.iter().zip(data) {
        let fields: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(row["t"].as_f64().unwrap(), fields[0]);
        assert_eq!(row["E[f1]"].as_f64().unwrap(), fields[1]);
        assert_eq!(row["se_f2"].as_f64().unwrap(), fields[4]);
    }
}

#[test]
fn output_bytes_do_not_depend_on_thread_count() {
    let mut args = vec!["--threads", "1"];
    args.extend(SMALL_SIM);
    args.extend(["--source", "continuous"]);
    let one = sme_lab(&args);
    args[1] = "3";
    let three = sme_lab(&args);
    assert!(one.status.success() && three.status.success());
    assert_eq!(one.stdout, three.stdout);
}

#[test]
fn out_writes_manifest_listing_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("means.csv");
    let mut args = SMALL_SIM.to_vec();
    let out_str = out.to_str().unwrap();
    args.extend(["--out", out_str]);
    let o = sme_lab(&args);
    assert!(o.status.success());
    let manifest_path = dir.path().join("means.csv.manifest.json");
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(manifest_path).unwrap()).unwrap();
    assert_eq!(manifest["outputs"][0].as_str().unwrap(), out_str);
    assert_eq!(manifest["command"], "simulate");
    assert!(manifest["inputs"]["config"].as_str().unwrap().contains("optimizer"));
    assert!(manifest["stages"].as_array().unwrap().len() >= 2);
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().next().unwrap(), format!("# manifest={}", manifest["manifest"].as_str().unwrap()));
    let again = sme_lab(&args);
    assert!(again.status.success());
    assert_eq!(std::fs::read_to_string(&out).unwrap(), csv);
}

#[test]
fn synthetic_sweep_prints_slope_two() {
    let o = sme_lab(&["sweep", "--tau-list", "0.125,0.0625,0.03125", "--synthetic-order", "2"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let slopes: Vec<&str> = text.lines().filter(|l| l.starts_with("slope=")).collect();
    assert_eq!(slopes.len(), 2);
    for line in slopes {
        assert!(line.starts_with("slope=2.000 stderr="), "{line}");
    }
}

#[test]
fn synthetic_sweep_json_report() {
    let o = sme_lab(&["sweep", "--tau-list", "0.125,0.0625,0.03125", "--synthetic-order", "1", "--format", "json"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let json_end = text.rfind('}').unwrap() + 1;
    let v: serde_json::Value = serde_json::from_str(&text[..json_end]).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 6);
    assert!((v["slope"]["f1"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn weak_error_live_run_reports_rows() {
    let o = sme_lab(&["weak-error", "--order", "2", "--tau", "0.25", "--horizon", "1", "--paths", "40", "--format", "json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r["max_error"].as_f64().unwrap().is_finite()));
}

#[test]
fn adam_without_start_time_is_a_config_error() {
    let o = sme_lab(&["weak-error", "--optimizer", "adam", "--order", "2", "--tau", "0.125", "--paths", "4"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("t_start"));
}

#[test]
fn missing_config_file_exits_two() {
    let o = sme_lab(&["simulate", "--config", "/definitely/not/here.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}

#[test]
fn bad_config_line_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, "[problem]\nd = 6\nfrobnicate = 1\n").unwrap();
    let o = sme_lab(&["simulate", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn non_finite_state_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("blowup.cfg");
    std::fs::write(&path, "[optimizer]\nepsilon = 1e-320\nphi_threshold = 1e-320\n[simulation]\nu0 = 1e-320\n").unwrap();
    let o = sme_lab(&["simulate", "--config", path.to_str().unwrap(), "--tau", "0.125", "--paths", "4"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn unknown_subcommand_prints_usage() {
    let o = sme_lab(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn toy_reports_statistics() {
    let o = sme_lab(&["toy", "--xi", "uniform", "--n", "200", "--replicas", "100"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    for key in ["corr_b_omega", "ks_b1", "ks_w1", "covariation_mean", "manifest"] {
        assert!(!v[key].is_null(), "missing {key}");
    }
}

#[test]
fn moments_prints_fitted_slopes() {
    let o = sme_lab(&["moments", "--order", "2", "--tau-list", "0.25,0.125,0.0625", "--samples", "2000"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("0.")).count(), 3);
    assert!(text.lines().last().unwrap().starts_with("first_slope="));
}

#[test]
fn gen_problem_writes_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.bin");
    let o = sme_lab(&["gen-problem", "--d", "3", "--size", "50", "--seed", "9", "--out", path.to_str().unwrap()]);
    assert!(o.status.success());
    let file = sme_core::problem::DatasetFile::load(&path).unwrap();
    assert_eq!((file.d, file.seed, file.size()), (3, 9, 50));
    assert!(file.matches_seed());
}
