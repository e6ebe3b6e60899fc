use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const MODEL: &str = "[model]\nd = 1\nalpha = 1.0\nkappa1 = 1.0\nkappa2 = 1.0\nsymbol = { name = \"constant\" }\n";

fn axisjump(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_axisjump"))
        .args(args)
        .current_dir(cwd)
        .env_remove("AXISJUMP_OUTPUT")
        .output()
        .expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn reference_ondiag_run_passes_and_writes_ledger() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference/01_ondiag_upper_d1.toml");
    let out = tmp.path().join("out");
    let o = axisjump(&["run", cfg.to_str().unwrap(), "--output", out.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("PASS ondiag_upper"));
    let ledger = fs::read_to_string(out.join("ledger.jsonl")).unwrap();
    assert_eq!(ledger.lines().count(), 1);
    let rec: serde_json::Value = serde_json::from_str(ledger.lines().next().unwrap()).unwrap();
    assert_eq!(rec["report"]["check_name"], "ondiag_upper");
    assert!(out.join("resolved_config.toml").exists());
}

#[test]
fn invalid_alpha_exits_2_with_constraint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, format!("experiment = \"simulate\"\n{}", MODEL.replace("alpha = 1.0", "alpha = 2.5"))).unwrap();
    let o = axisjump(&["run", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let err = text(&o.stderr);
    assert!(err.contains("0 < alpha < 2"), "{err}");
    assert!(err.contains("line"), "{err}");
    assert!(!tmp.path().join("axisjump-out").exists());
}

#[test]
fn unknown_key_exits_2_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, format!("experiment = \"check:holder\"\n{MODEL}[parameters]\nrhoo = 8\n")).unwrap();
    let o = axisjump(&["run", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("rhoo"));
}

#[test]
fn failing_check_exits_1_naming_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("strict.toml");
    fs::write(
        &cfg,
        format!("experiment = \"check:ondiag_upper\"\n{MODEL}[parameters]\nrho = 4\nrho_alt = 2\nslope_tol = 0.0001\n"),
    )
    .unwrap();
    let o = axisjump(&["run", cfg.to_str().unwrap(), "--output", "o"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("check failed: ondiag_upper"), "{}", text(&o.stderr));
}

#[test]
fn output_root_comes_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("sim.toml");
    fs::write(&cfg, format!("experiment = \"simulate\"\nseed = 1\n{MODEL}[parameters]\npaths = 3\n")).unwrap();
    let root = tmp.path().join("root");
    let o = Command::new(env!("CARGO_BIN_EXE_axisjump"))
        .args(["run", cfg.to_str().unwrap(), "--seed", "9"])
        .current_dir(tmp.path())
        .env("AXISJUMP_OUTPUT", &root)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let resolved = fs::read_to_string(root.join("sim").join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("seed = 9"), "{resolved}");
}

#[test]
fn empty_suite_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    fs::create_dir(tmp.path().join("empty")).unwrap();
    let o = axisjump(&["suite", "empty"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn suite_summary_has_one_row_per_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("configs");
    fs::create_dir(&dir).unwrap();
    for (i, paths) in [3, 5, 7].iter().enumerate() {
        fs::write(
            dir.join(format!("sim{i}.toml")),
            format!("experiment = \"simulate\"\nseed = {i}\n{MODEL}[parameters]\npaths = {paths}\n"),
        )
        .unwrap();
    }
    fs::write(dir.join("notes.txt"), "not a config").unwrap();
    let o = axisjump(&["suite", "configs", "--output", "out", "--workers", "2"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let summary = fs::read_to_string(tmp.path().join("out/summary.tsv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 3);
    assert!(summary.lines().skip(1).all(|l| l.contains("\tPASS\t")));
}

#[test]
fn suite_with_invalid_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("configs");
    fs::create_dir(&dir).unwrap();
    fs::write(dir.join("a.toml"), format!("experiment = \"simulate\"\n{MODEL}[parameters]\npaths = 2\n")).unwrap();
    fs::write(dir.join("b.toml"), "experiment = \"simulate\"\n").unwrap();
    let o = axisjump(&["suite", "configs", "--output", "out"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let summary = fs::read_to_string(tmp.path().join("out/summary.tsv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(summary.contains("ERROR"));
}
