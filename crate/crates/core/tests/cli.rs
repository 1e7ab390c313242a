use std::path::Path;
use std::process::Command;

use serde_json::Value;
use singular_lq::cli::*;

const BIN: &str = env!("CARGO_BIN_EXE_singular-lq");

fn coth1() -> f64 {
    1.0 / 1f64.tanh()
}

fn run_bin(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn catalog_text(name: &str) -> &'static str {
    catalog().iter().find(|(n, _)| *n == name).unwrap().1
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("scenario.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn catalog_parses_and_names_match() {
    let configs = catalog_configs().unwrap();
    assert_eq!(configs.len(), catalog().len());
    for (cfg, (name, _)) in configs.iter().zip(catalog()) {
        assert_eq!(&cfg.name, name);
    }
}

#[test]
fn liquidation_matches_the_closed_form() {
    let cfg = ScenarioConfig::resolve("constrained-liquidation").unwrap();
    let r = run(&cfg).unwrap();
    let c0 = r.riccati.c0.0;
    assert!((c0 - coth1()).abs() <= 0.05, "c0 = {c0}");
    let j = r.cost.j_eta.unwrap().0;
    assert!((j - c0 * cfg.x0 * cfg.x0).abs() <= 1e-12 * c0);
    assert!(r.failed_exact().is_empty(), "{:?}", r.failed_exact());
}

#[test]
fn refinement_error_shrinks() {
    let cfg = ScenarioConfig::resolve("constrained-liquidation").unwrap();
    let t = refinement_table(&cfg, &[8, 16, 32, 64]);
    let err = t.reals("c0_error");
    assert!(err.windows(2).all(|w| w[1] < w[0]), "{err:?}");
}

#[test]
fn every_catalog_scenario_passes_its_exact_checks() {
    for cfg in catalog_configs().unwrap() {
        let r = run(&cfg).unwrap();
        assert!(
            r.failed_exact().is_empty(),
            "{}: {:?}",
            cfg.name,
            r.failed_exact()
        );
    }
}

#[test]
fn negative_cost_is_rejected_with_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = catalog_text("constrained-liquidation").replace(
        "kappa = { kind = \"constant\", value = 1.0 }",
        "kappa = { kind = \"constant\", value = -1.0 }",
    );
    let path = write_config(dir.path(), &text);
    let out = run_bin(&[
        "run",
        &path,
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("kappa") && err.contains("node 0"), "{err}");
    let e = ScenarioConfig::parse(&text)
        .and_then(|c| run(&c))
        .unwrap_err();
    assert_eq!(exit_code(&e), 2, "{e}");
}

#[test]
fn unknown_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{}\nbogus = 1\n", catalog_text("penalized-liquidation"));
    let path = write_config(dir.path(), &text);
    let out = run_bin(&["run", &path]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn missing_config_is_an_input_error() {
    let out = run_bin(&["run", "no-such-scenario"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn reports_are_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = run_bin(&["run", "mixed-penalty-ternary", "--out", d.to_str().unwrap()]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for f in [
        "report.json",
        "processes.csv",
        "trajectories.csv",
        "truncation.csv",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn outputs_have_the_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_bin(&[
        "run",
        "constrained-liquidation",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let first = |f: &str| {
        std::fs::read_to_string(dir.path().join(f))
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string()
    };
    assert_eq!(first("processes.csv"), PROCESSES_HEADER);
    assert_eq!(first("trajectories.csv"), TRAJECTORIES_HEADER);
    assert!(dir.path().join("refinement.csv").exists());
    let json: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    for key in [
        "scenario",
        "lattice",
        "validation",
        "riccati",
        "signal",
        "cost",
        "oracle",
        "studies",
        "checks",
        "skipped",
    ] {
        assert!(json.get(key).is_some(), "{key}");
    }
    assert_eq!(json["scenario"]["coefficients"]["eta"]["value"], "+inf");
    let c0 = json["riccati"]["c0"].as_f64().unwrap();
    assert!((c0 - coth1()).abs() <= 0.05);
}

#[test]
fn sweep_prints_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_bin(&[
        "sweep",
        "penalized-liquidation",
        "--axis",
        "n",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("n,c0,j_n"));
    assert_eq!(text.lines().count(), 5);
    assert!(dir.path().join("n_sweep.csv").exists());
}

#[test]
fn catalog_flag_lists_names() {
    let out = run_bin(&["--catalog"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for (name, _) in catalog() {
        assert!(text.contains(name));
    }
}

#[test]
fn real_formatting() {
    assert_eq!(fmt_real(f64::INFINITY), "+inf");
    assert_eq!(fmt_real(f64::NEG_INFINITY), "-inf");
    assert_eq!(fmt_real(f64::NAN), "nan");
    let x = 0.1 + 0.2;
    assert_eq!(fmt_real(x).parse::<f64>().unwrap(), x);
}
