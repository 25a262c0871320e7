use std::path::PathBuf;
use std::process::Command as Process;

use adaptive_lqr::{Error, RegimeEnsemble};
use adaptive_lqr_cli::{
    compare_policies, execute, replay, run, write_report, Command, ExperimentSpec, Format, Params,
    PolicyChoice,
};
use serde_json::Value;

fn ensemble(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../ensembles")
        .join(format!("{name}.json"))
}

fn spec(command: Command, name: &str, overrides: &[(&str, &str)]) -> ExperimentSpec {
    ExperimentSpec {
        command,
        ensemble_path: ensemble(name),
        overrides: overrides
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
        output: None,
        format: Format::Json,
        threads: None,
    }
}

fn f64_at(v: &Value, ptr: &str) -> f64 {
    v.pointer(ptr)
        .and_then(Value::as_f64)
        .unwrap_or_else(|| panic!("no number at {ptr}"))
}

fn bin() -> Process {
    Process::new(env!("CARGO_BIN_EXE_adaptive-lqr"))
}

#[test]
fn check_ce_on_exact_fleet() {
    let r = run(&spec(Command::CheckCe, "ce", &[("trials", "500")])).unwrap();
    let res = r.results();
    assert_eq!(res["certificate"]["classification"], "exact_ce");
    assert!((f64_at(res, "/certificate/F/0/0") - 1.0).abs() < 1e-10);
    assert_eq!(res["variance_scan"]["holds"], true);
}

#[test]
fn riccati_scalar_integrator_regime() {
    let r = run(&spec(Command::Riccati, "single", &[])).unwrap();
    let reg = &r.results()["regimes"][0];
    assert!((f64_at(reg, "/K/0/0") - 1.0).abs() < 1e-10);
    assert!((f64_at(reg, "/spectral_abscissa") + 1.0).abs() < 1e-10);
    assert_eq!(r.table.rows, vec![vec!["1", "0", "0", "1"]]);
}

#[test]
fn entropy_identity_report() {
    let r = run(&spec(Command::EntropyIdentity, "pm_one", &[("T", "2")])).unwrap();
    let res = r.results();
    let (h0, ht, quad) = (
        f64_at(res, "/H0"),
        f64_at(res, "/E_HT"),
        f64_at(res, "/E_quad"),
    );
    assert!((h0 - 2f64.ln()).abs() < 1e-15);
    let bound = 3.0 * f64_at(res, "/gap_stderr") + 10.0 * 1e-3;
    assert!((h0 - ht - quad).abs() <= bound, "{h0} {ht} {quad}");
    assert_eq!(res["holds"], true);
    assert_eq!(res["run"]["paths"], 10_000);
}

#[test]
fn report_echoes_inputs() {
    let r = run(&spec(
        Command::Simulate,
        "pm_one",
        &[("paths", "8"), ("T", "0.5"), ("seed", "3")],
    ))
    .unwrap();
    let j = &r.json;
    assert_eq!(j["command"], "simulate");
    assert_eq!(j["config"]["seed"], 3);
    assert_eq!(j["config"]["tol"], 1e-8);
    assert!(j["wall_time_secs"].as_f64().unwrap() >= 0.0);
    assert!(j["build"]["git"].as_str().is_some_and(|s| !s.is_empty()));
    let e: RegimeEnsemble = serde_json::from_value(j["ensemble"].clone()).unwrap();
    assert_eq!(
        e,
        RegimeEnsemble::from_json_file(ensemble("pm_one")).unwrap()
    );
    assert_eq!(
        j["csv_columns"],
        serde_json::json!(["path_id", "theta", "cost", "H_final", "terminal_msq"])
    );
    assert_eq!(r.table.rows.len(), 8);
    assert!(j["results"]["per_path"].is_null());
}

#[test]
fn csv_headers_match_reported_columns() {
    let cases = [
        (Command::Riccati, "mixed_dimension", vec![]),
        (Command::FilterDemo, "pm_one", vec![("T", "0.1")]),
        (
            Command::Simulate,
            "pm_one",
            vec![("T", "0.1"), ("paths", "3")],
        ),
        (Command::CheckCe, "doubled_g", vec![("trials", "50")]),
        (
            Command::ResidualScan,
            "mixed_dimension",
            vec![("trials", "50")],
        ),
        (
            Command::EntropyIdentity,
            "pm_one",
            vec![("T", "0.1"), ("paths", "3")],
        ),
        (
            Command::StabilizeReport,
            "ce",
            vec![("T", "1"), ("paths", "3")],
        ),
        (
            Command::ScalarIntegrator,
            "scalar_integrator",
            vec![("T", "1"), ("c_steps", "3")],
        ),
        (Command::Compare, "ce", vec![("T", "1"), ("paths", "3")]),
    ];
    for (cmd, name, ov) in cases {
        let r = run(&spec(cmd, name, &ov)).unwrap();
        let cols: Vec<String> = serde_json::from_value(r.json["csv_columns"].clone()).unwrap();
        assert_eq!(cols, r.table.header, "{cmd:?}");
        assert!(!r.table.rows.is_empty(), "{cmd:?}");
        assert!(
            r.table.rows.iter().all(|row| row.len() == cols.len()),
            "{cmd:?}"
        );
    }
}

#[test]
fn replay_reproduces_results() {
    for (cmd, name, ov) in [
        (
            Command::Simulate,
            "mixed_dimension",
            vec![("paths", "40"), ("T", "2"), ("policy", "bellman_v_ce")],
        ),
        (
            Command::StabilizeReport,
            "ce",
            vec![("paths", "30"), ("dt", "5e-3")],
        ),
        (
            Command::ResidualScan,
            "ce",
            vec![
                ("trials", "100"),
                ("value", "scaled_entropy"),
                ("lambda", "0.7"),
            ],
        ),
    ] {
        let r = run(&spec(cmd, name, &ov)).unwrap();
        let text = serde_json::to_string(&r.json).unwrap();
        let parsed: Value = serde_json::from_str(&text).unwrap();
        let again = replay(&parsed, Some(2)).unwrap();
        assert!(again.identical, "{cmd:?}");
    }
}

#[test]
fn replay_detects_tampering() {
    let r = run(&spec(
        Command::Simulate,
        "pm_one",
        &[("paths", "5"), ("T", "0.5")],
    ))
    .unwrap();
    let mut j = r.json.clone();
    j["config"]["seed"] = 99.into();
    assert!(!replay(&j, None).unwrap().identical);
}

#[test]
fn stabilize_report_resolves_horizon() {
    let r = run(&spec(
        Command::StabilizeReport,
        "ce",
        &[("paths", "20"), ("dt", "1e-2")],
    ))
    .unwrap();
    // mu = 1/3 for F = 1 on this fleet
    assert!((f64_at(&r.json, "/config/T") - 30.0).abs() < 1e-9);
    assert_eq!(r.results()["F_source"], "certificate");
    assert_eq!(r.table.rows.len(), 10);
}

#[test]
fn scalar_integrator_cost_is_half() {
    let r = run(&spec(Command::ScalarIntegrator, "scalar_integrator", &[])).unwrap();
    let res = r.results();
    assert!((f64_at(res, "/cost") - 0.5).abs() < 1e-6);
    assert_eq!(res["scan"]["all_regimes_nulled"], false);
}

#[test]
fn compare_exact_ce_fleet() {
    let e = RegimeEnsemble::from_json_file(ensemble("ce")).unwrap();
    let mut p = Params::defaults(Command::Compare);
    p.paths = 4000;
    p.horizon = Some(12.0);
    p.dt = 2e-3;
    p.seed = 1;
    let cmp = compare_policies(&e, &p, None).unwrap();
    assert!(cmp.checks_pass);
    let ce = cmp
        .rows
        .iter()
        .find(|r| r.policy == PolicyChoice::Ce)
        .unwrap();
    let zero = cmp
        .rows
        .iter()
        .find(|r| r.policy == PolicyChoice::Zero)
        .unwrap();
    let slack = 3.0 * ce.modified_cost_stderr + 0.02 * cmp.v_ce;
    assert!(
        (ce.modified_cost_mean - cmp.v_ce).abs() <= slack,
        "{} vs {}",
        ce.modified_cost_mean,
        cmp.v_ce
    );
    assert_eq!(ce.below_v_ce, Some(true));
    assert!(zero.cost_mean >= cmp.u_ce);
    assert_eq!(cmp.rows[0].policy, PolicyChoice::Ce);
}

#[test]
fn compare_single_regime_ce_equals_lq() {
    // G = 2, B'K = 1, so F = 1/2 and -F G x = -x exactly
    let e = RegimeEnsemble::from_json_file(ensemble("single")).unwrap();
    let mut p = Params::defaults(Command::Compare);
    p.paths = 50;
    p.horizon = Some(3.0);
    p.policies = vec![PolicyChoice::Ce, PolicyChoice::Lq];
    let cmp = compare_policies(&e, &p, None).unwrap();
    assert_eq!(cmp.rows[0].path_costs, cmp.rows[1].path_costs);
}

#[test]
fn compare_supersolution_fleet() {
    let e = RegimeEnsemble::from_json_file(ensemble("doubled_g")).unwrap();
    let mut p = Params::defaults(Command::Compare);
    p.paths = 1000;
    p.dt = 2e-3;
    p.horizon = Some(12.0);
    p.policies = vec![PolicyChoice::Ce, PolicyChoice::Lq];
    let cmp = compare_policies(&e, &p, None).unwrap();
    assert_eq!(
        serde_json::to_value(cmp.certificate.classification).unwrap(),
        "supersolution"
    );
    let ce = cmp
        .rows
        .iter()
        .find(|r| r.policy == PolicyChoice::Ce)
        .unwrap();
    assert_eq!(ce.below_v_ce, Some(true));
    assert!(cmp.checks_pass);
}

#[test]
fn compare_needs_two_policies() {
    let e = RegimeEnsemble::from_json_file(ensemble("ce")).unwrap();
    let mut p = Params::defaults(Command::Compare);
    p.policies = vec![PolicyChoice::Zero];
    assert!(matches!(
        compare_policies(&e, &p, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn ce_without_certificate_needs_f() {
    let e = RegimeEnsemble::from_json_file(ensemble("double_integrator")).unwrap();
    let mut p = Params::defaults(Command::Simulate);
    p.policy = PolicyChoice::Ce;
    p.paths = 2;
    p.horizon = Some(0.1);
    assert!(matches!(
        execute(Command::Simulate, &e, p.clone(), None),
        Err(Error::Config(_))
    ));
    p.f = Some(vec![vec![2.0]]);
    assert!(execute(Command::Simulate, &e, p, None).is_ok());
}

#[test]
fn csv_output_writes_json_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("paths.csv");
    let r = run(&spec(
        Command::Simulate,
        "pm_one",
        &[("paths", "4"), ("T", "0.2")],
    ))
    .unwrap();
    write_report(&r, Some(&out), Format::Csv).unwrap();
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("path_id,theta,cost,H_final,terminal_msq\n"));
    assert_eq!(csv.lines().count(), 5);
    let side: Value =
        serde_json::from_reader(std::fs::File::open(dir.path().join("paths.report.json")).unwrap())
            .unwrap();
    assert_eq!(side["results"], r.json["results"]);
}

#[test]
fn thread_count_does_not_change_results() {
    let mut s = spec(
        Command::Simulate,
        "mixed_dimension",
        &[("paths", "30"), ("T", "1"), ("policy", "lq")],
    );
    let one = run(&s).unwrap();
    s.threads = Some(3);
    assert_eq!(run(&s).unwrap().results(), one.results());
    s.threads = Some(0);
    assert!(matches!(run(&s), Err(Error::Config(_))));
}

#[test]
fn binary_exit_codes() {
    let ok = bin()
        .args(["riccati"])
        .arg(ensemble("ce"))
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(v["command"], "riccati");

    let unknown = bin()
        .args(["simulate"])
        .arg(ensemble("ce"))
        .args(["--set", "bogus=1"])
        .output()
        .unwrap();
    assert_eq!(unknown.status.code(), Some(1));

    let missing = bin()
        .args(["simulate", "no/such/file.json"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));

    let bad_cli = bin().args(["simulate"]).output().unwrap();
    assert_eq!(bad_cli.status.code(), Some(1));

    // regime 2 is open-loop unstable: e^20 exceeds the blow-up norm
    let blowup = bin()
        .args(["simulate"])
        .arg(ensemble("ce"))
        .args(["--set", "T=20", "--set", "dt=0.01", "--set", "paths=20"])
        .output()
        .unwrap();
    assert_eq!(
        blowup.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&blowup.stderr)
    );

    let threads = bin()
        .args(["riccati"])
        .arg(ensemble("ce"))
        .env("ADAPTIVE_LQR_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(1));
}

#[test]
fn invalid_ensemble_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let mut v: Value =
        serde_json::from_reader(std::fs::File::open(ensemble("ce")).unwrap()).unwrap();
    v["prior"] = serde_json::json!([0.7, 0.7]);
    std::fs::write(&path, v.to_string()).unwrap();
    let out = bin().arg("check-ce").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid"));
}

#[test]
fn binary_replay_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    let st = bin()
        .arg("residual-scan")
        .arg(ensemble("mixed_dimension"))
        .args(["--set", "trials=200", "--set", "value=u_ce", "-o"])
        .arg(&report)
        .status()
        .unwrap();
    assert!(st.success());
    let again = bin()
        .arg("replay")
        .arg(&report)
        .arg("-o")
        .arg(dir.path().join("r2.json"))
        .output()
        .unwrap();
    assert_eq!(
        again.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&again.stderr)
    );
}
