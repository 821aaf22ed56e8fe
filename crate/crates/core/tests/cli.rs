use std::path::Path;
use std::process::{Command, Output};

use rsmfc_core::runner::{parse_config, run, ExperimentConfig, RunOptions, Suite};

fn rsmfc(args: &[&str], dir: &Path, seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rsmfc"));
    cmd.args(args).current_dir(dir).env_remove("RSMFC_SEED");
    if let Some(s) = seed_env {
        cmd.env("RSMFC_SEED", s);
    }
    cmd.output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const QUICK: &str = "[simulation]\nn_paths = 300\nn_steps = 50\nsuites = [\"riccati\", \"simulate\", \"cost\", \"smp\"]\n";

fn header(dir: &Path, file: &str) -> String {
    let text = std::fs::read_to_string(dir.join(file)).unwrap();
    text.split("\r\n").next().unwrap().to_string()
}

#[test]
fn csv_headers_are_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "quick.toml", QUICK);
    let out = rsmfc(&["run", &cfg, "--out", "o"], tmp.path(), None);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let o = tmp.path().join("o");
    assert_eq!(header(&o, "beta.csv"), "t,beta,alpha,gamma,P_bar");
    assert_eq!(
        header(&o, "paths.csv"),
        "t,mean,q05,q50,q95,path_0,path_1,path_2,path_3,path_4,path_5,path_6,path_7,path_8,path_9"
    );
    assert_eq!(
        header(&o, "cost.csv"),
        "theta,psi_theta,mean_psi_T,var_psi_T,std_error"
    );
    assert_eq!(header(&o, "smp.csv"), "node,t,u,lhs_max");
    for svg in ["beta.svg", "state_paths.svg"] {
        let text = std::fs::read_to_string(o.join(svg)).unwrap();
        assert!(text.starts_with("<svg") && text.contains("width=\"800\" height=\"500\""));
    }
    // every value row has the header's width and parses back
    let beta = std::fs::read_to_string(o.join("beta.csv")).unwrap();
    let rows: Vec<&str> = beta.split("\r\n").filter(|l| !l.is_empty()).collect();
    assert_eq!(rows.len(), 52);
    for row in &rows[1..] {
        let cells: Vec<f64> = row.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cells.len(), 5);
    }
    assert_eq!(rows[51].split(',').nth(1), Some("1.0000000000000000e0"));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(o.join("manifest.json")).unwrap()).unwrap();
    let files: Vec<&str> = manifest["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["path"].as_str().unwrap())
        .collect();
    assert_eq!(
        files,
        [
            "beta.csv",
            "beta.svg",
            "cost.csv",
            "paths.csv",
            "smp.csv",
            "state_paths.svg"
        ]
    );
    assert_eq!(manifest["version"], "v0.1.0");
    assert!(manifest["config"]["defaults_applied"]
        .as_array()
        .unwrap()
        .iter()
        .any(|k| k == "model.theta"));
}

#[test]
fn seed_precedence_flag_env_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "s.toml",
        "[simulation]\nn_paths = 100\nn_steps = 20\nseed = 5\nsuites = [\"simulate\"]\n",
    );
    let seed_of = |dir: &str, args: &[&str], env: Option<&str>| {
        let mut full = vec!["run", cfg.as_str(), "--out", dir];
        full.extend_from_slice(args);
        let out = rsmfc(&full, tmp.path(), env);
        assert_eq!(out.status.code(), Some(0));
        let m: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(tmp.path().join(dir).join("manifest.json")).unwrap(),
        )
        .unwrap();
        m["config"]["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of("file", &[], None), 5);
    assert_eq!(seed_of("env", &[], Some("7")), 7);
    assert_eq!(seed_of("flag", &["--seed", "9"], Some("7")), 9);
    let a = std::fs::read(tmp.path().join("env/paths.csv")).unwrap();
    let b = std::fs::read(tmp.path().join("flag/paths.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();

    assert_eq!(rsmfc(&[], d, None).status.code(), Some(2));
    assert_eq!(rsmfc(&["run"], d, None).status.code(), Some(2));
    assert_eq!(
        rsmfc(&["run", "missing.toml"], d, None).status.code(),
        Some(2)
    );
    assert_eq!(
        rsmfc(&["check", "everything"], d, None).status.code(),
        Some(2)
    );

    let bad = write(d, "bad.toml", "[model]\ntheta = \"high\"\n");
    let out = rsmfc(&["run", &bad], d, None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.theta"));

    let cfg = write(d, "q.toml", QUICK);
    let out = rsmfc(&["run", &cfg, "--out", "x"], d, Some("not-a-number"));
    assert_eq!(out.status.code(), Some(2));

    // a gain that explodes inside the horizon fails the verification suites
    let blow = write(
        d,
        "blow.toml",
        "[model]\nt_end = 5.0\ngamma_choice = \"one\"\nvariant = \"paper_printed\"\n[simulation]\nn_steps = 500\nsuites = [\"riccati\"]\n",
    );
    let out = rsmfc(&["run", &blow, "--out", "blow"], d, None);
    assert_eq!(out.status.code(), Some(1));
    let beta = std::fs::read_to_string(d.join("blow/beta.csv")).unwrap();
    assert!(beta.contains("NaN"));
    assert!(std::fs::read_to_string(d.join("blow/beta.svg"))
        .unwrap()
        .contains("stroke=\"red\""));

    // the reproduction's explosion is its expected outcome
    let out = rsmfc(&["check", "paper-repro"], d, None);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
}

#[test]
fn check_without_out_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = rsmfc(&["check", "riccati"], tmp.path(), None);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("riccati"));
    assert_eq!(std::fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn unwritable_output_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let cfg = ExperimentConfig {
        suites: vec![Suite::Riccati],
        ..ExperimentConfig::default()
    };
    let opts = RunOptions {
        out: Some(blocker.join("sub")),
        ..RunOptions::default()
    };
    let err = run(&cfg, &opts).unwrap_err();
    assert!(err.to_string().starts_with("I/O error"), "{err}");
}

#[test]
fn paper_repro_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        suites: vec![Suite::PaperRepro],
        repro_paths: 50,
        repro_dt: 1e-3,
        ..ExperimentConfig::default()
    };
    let opts = RunOptions {
        out: Some(tmp.path().to_path_buf()),
        ..RunOptions::default()
    };
    let manifest = run(&cfg, &opts).unwrap();
    assert!(manifest.passed);
    let d = tmp.path().join("paper_repro");
    // the explosion plot is cut at the last defined node and marked there
    let svg = std::fs::read_to_string(d.join("long_beta.svg")).unwrap();
    assert!(svg.contains("stroke=\"red\""));
    let short = std::fs::read_to_string(d.join("short_state_paths.svg")).unwrap();
    assert!(!short.contains("stroke=\"red\""));
    let beta: Vec<String> = std::fs::read_to_string(d.join("long_beta.csv"))
        .unwrap()
        .split("\r\n")
        .map(String::from)
        .collect();
    assert_eq!(beta[0], "t,time_to_go,beta,gamma");
    // nodes with t < T - tau* are undefined
    let first_defined = beta[1..]
        .iter()
        .position(|r| !r.contains("NaN"))
        .map(|j| {
            beta[j + 1]
                .split(',')
                .next()
                .unwrap()
                .parse::<f64>()
                .unwrap()
        })
        .unwrap();
    assert!(
        first_defined > 4.0 && first_defined - 4.0 <= 1e-3 + 1e-9,
        "{first_defined}"
    );
    let cost = std::fs::read_to_string(d.join("cost.csv")).unwrap();
    assert!(cost.lines().nth(2).unwrap().starts_with("long,"));
    assert!(cost.lines().nth(2).unwrap().ends_with(",0"));
}

#[test]
fn empty_config_takes_defaults() {
    let cfg = parse_config("").unwrap();
    assert_eq!(cfg.model.sigma, 1e-2);
    assert_eq!(cfg.model.theta, 1e-5);
    assert_eq!(cfg.suites.len(), 6);
    assert!(parse_config("[simulation]\nn_steps = 0\n").is_err());
    assert!(parse_config("[simulation]\nbogus = 1\n")
        .unwrap_err()
        .0
        .contains("simulation.bogus"));
}
