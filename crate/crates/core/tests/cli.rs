use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bmc-lab"));
    cmd.env_remove("BMC_LAB_OUT");
    cmd
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

const HEADER: &str = "experiment,a,sigma,n,R,seed,statistic,value,target_exact,target_asymptotic,tolerance,pass";

#[test]
fn oracle_reports_second_moment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "oracle.toml", "[kernel]\na = 0.5\nsigma = 1.0\n[oracle]\nn = 2\nx = 0.0\n");
    let out_dir = dir.path().join("out");
    let out = bin().args(["oracle", "--config"]).arg(&cfg).arg("--out").arg(&out_dir).output().unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("oracle.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(HEADER));
    let row = csv.lines().find(|l| l.contains(",identity:second_moment,")).unwrap();
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(fields.len(), 12);
    assert!(fields[0].starts_with("oracle:"));
    assert!(fields[0].ends_with(&format!(":v{}", env!("CARGO_PKG_VERSION"))));
    assert_eq!(fields[7].parse::<f64>().unwrap(), 6.0);
    assert!(!csv.contains('\r'));
}

#[test]
fn positional_config_and_env_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "sweep.toml",
        "[kernel]\na = 0.5\n[regimes]\na = [0.3, \"critical\", 0.9]\ncurve_gaps = [0.01]\n",
    );
    let env_dir = dir.path().join("from-env");
    let out = bin().arg("regimes").arg(&cfg).env("BMC_LAB_OUT", &env_dir).output().unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(env_dir.join("regimes.csv")).unwrap();
    for label in ["regime=sub", "regime=critical", "regime=super"] {
        assert!(csv.contains(label), "{label}");
    }
    assert!(csv.lines().skip(1).all(|l| !l.ends_with(",false")));
}

#[test]
fn seed_override_changes_rows_but_not_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "sim.toml",
        "[kernel]\na = 0.4\n[simulation]\ndepth = 5\nreplicates = 200\nseed = 1\n",
    );
    let run = |seed: &str, sub: &str| {
        let out_dir = dir.path().join(sub);
        let out = bin().args(["simulate", "--config"]).arg(&cfg).args(["--seed", seed, "--out"]).arg(&out_dir).output().unwrap();
        assert_eq!(code(&out), 0);
        std::fs::read_to_string(out_dir.join("simulate.csv")).unwrap()
    };
    let a = run("5", "a");
    let b = run("6", "b");
    let c = run("5", "c");
    assert_eq!(a, c);
    assert_ne!(a, b);
    assert!(a.lines().nth(1).unwrap().split(',').nth(5) == Some("5"));
}

#[test]
fn variance_emits_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "var.toml",
        "[kernel]\na = 0.5\n[sequence]\nentries = [\"identity\"]\ntail = \"constant\"\n",
    );
    let out_dir = dir.path().join("out");
    let out = bin().args(["variance", "--config"]).arg(&cfg).arg("--out").arg(&out_dir).output().unwrap();
    assert_eq!(code(&out), 0);
    let csv = std::fs::read_to_string(out_dir.join("variance.csv")).unwrap();
    let value = |stat: &str| -> f64 {
        let row = csv.lines().find(|l| l.split(',').nth(6) == Some(stat)).unwrap();
        row.split(',').nth(7).unwrap().parse().unwrap()
    };
    assert!((value("identity:sigma_generation") - 2.0).abs() < 1e-10);
    assert!((value("identity:sigma_tree") - 6.0).abs() < 1e-10);
    assert!((value("sequence:sigma") - 12.0).abs() < 1e-10);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("variance.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");

    let bad = write(dir.path(), "bad.toml", "[kernel\na = 0.5\n");
    let out = bin().args(["clt", "--config"]).arg(&bad).arg("--out").arg(&out_dir).output().unwrap();
    assert_eq!(code(&out), 2);

    let missing = dir.path().join("missing.toml");
    let out = bin().args(["clt", "--config"]).arg(&missing).output().unwrap();
    assert_eq!(code(&out), 2);

    let out = bin().args(["clt", "--no-such-flag"]).output().unwrap();
    assert_eq!(code(&out), 2);

    let conflict = write(dir.path(), "conflict.toml", "[kernel]\na = 0.5\nregime = \"critical\"\n");
    let out = bin().args(["oracle", "--config"]).arg(&conflict).arg("--out").arg(&out_dir).output().unwrap();
    assert_eq!(code(&out), 3);

    let superc = write(dir.path(), "super.toml", "[kernel]\na = 0.9\n");
    let out = bin().args(["clt", "--config"]).arg(&superc).arg("--out").arg(&out_dir).output().unwrap();
    assert_eq!(code(&out), 3);

    let slow = write(
        dir.path(),
        "slow.toml",
        "[kernel]\na = 0.5\n[simulation]\ndepth = 12\nreplicates = 100000\nbudget_seconds = 0.0\n",
    );
    let out = bin().args(["simulate", "--config"]).arg(&slow).arg("--out").arg(&out_dir).output().unwrap();
    assert_eq!(code(&out), 4);
    let marker = std::fs::read_to_string(out_dir.join("simulate.partial")).unwrap();
    assert!(marker.contains("of 100000"));
}

#[test]
fn supercritical_track_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "super.toml",
        "[kernel]\na = 0.8\n[simulation]\ndepth = 8\nreplicates = 64\ninitial = 1.0\n[supercritical]\nn1 = 4\n",
    );
    let out_dir = dir.path().join("out");
    let out = bin().args(["supercritical", "--config"]).arg(&cfg).arg("--out").arg(&out_dir).output().unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let tracks = std::fs::read_to_string(out_dir.join("supercritical_tracks.csv")).unwrap();
    assert_eq!(tracks.lines().next(), Some("replicate,n,M_n,ratio,residual"));
    assert_eq!(tracks.lines().count(), 1 + 64 * 9);
    let first = tracks.lines().nth(1).unwrap();
    assert!(first.starts_with("0,0,1,"));
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let config = bmc_lab::experiment::ExperimentConfig::load(&path)
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            let kernel = config.kernel().unwrap();
            config.observables(&kernel).unwrap();
            seen += 1;
        }
    }
    assert!(seen >= 6);
}
