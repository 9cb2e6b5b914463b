use std::path::PathBuf;
use std::process::{Command, Output};

use oplq::fixtures::desk1;
use oplq_cli::{recompute, run, Command as Cmd, ProblemSpec, Recomputed, ResultDoc};

fn spec_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("specs").join(name)
}

fn load(name: &str) -> ProblemSpec {
    ProblemSpec::parse(&std::fs::read_to_string(spec_path(name)).unwrap()).unwrap()
}

fn oplq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oplq")).args(args).output().unwrap()
}

fn oplq_spec(cmd: &str, name: &str, extra: &[&str]) -> Output {
    let p = spec_path(name);
    let mut args = vec![cmd, "--spec", p.to_str().unwrap()];
    args.extend_from_slice(extra);
    oplq(&args)
}

fn temp_file(name: &str, body: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("oplq-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn desk1_spec_matches_fixture() {
    let spec = load("desk1.json");
    let inst = spec.instance().unwrap();
    let want = desk1();
    assert_eq!(inst.problem().unwrap(), want.problem().unwrap());
    assert_eq!(inst.x, want.x);
}

#[test]
fn solve_desk1() {
    let out = oplq_spec("solve", "desk1.json", &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let doc = ResultDoc::from_json(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(doc.schema_version, 1);
    let s = doc.solution.unwrap();
    assert!(s.residuals.stationarity_residual_norm <= 1e-8);
    assert!(s.cross_validation.quadform_control_rel_diff <= 1e-6);
    assert!(s.continuation.iter().all(|st| !st.accepted || st.ratio < 1.0));
    assert!(doc.assumptions.unwrap().passed);
}

#[test]
fn json_round_trip_reproduces_residuals() {
    for (cmd, name) in [(Cmd::Solve, "desk1.json"), (Cmd::Fredholm, "desk1.json"), (Cmd::Mv, "desk_mv.json")] {
        let spec = load(name);
        let doc = run(cmd, &spec, None, false).unwrap().doc;
        let text = doc.to_json();
        let back = ResultDoc::from_json(&text).unwrap();
        assert_eq!(back.to_json(), text);
        match recompute(&spec, &back).unwrap() {
            Recomputed::Solution(r) => assert_eq!(r, back.solution.unwrap().residuals),
            Recomputed::MeanVariance(t) => assert_eq!(t, back.mean_variance.unwrap().transform),
            Recomputed::Nothing => panic!("nothing to recompute for {name}"),
        }
    }
}

#[test]
fn output_is_deterministic() {
    for cmd in ["solve", "validate", "fredholm"] {
        let a = oplq_spec(cmd, "desk1.json", &["--seed", "11"]);
        let b = oplq_spec(cmd, "desk1.json", &["--seed", "11"]);
        assert_eq!(a.status.code(), Some(0));
        assert_eq!(a.stdout, b.stdout);
    }
}

#[test]
fn strict_check_with_zero_r() {
    let out = oplq_spec("check", "desk1_r_zero.json", &["--strict"]);
    assert_eq!(out.status.code(), Some(2));
    let doc = ResultDoc::from_json(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(doc.status, "assumptions_failed");
    assert!(doc.assumptions.unwrap().failures.iter().any(|f| f.starts_with("(H3) R >= delta I")));
    // without --strict the report is produced and the exit code is 0
    assert_eq!(oplq_spec("check", "desk1_r_zero.json", &[]).status.code(), Some(0));
}

#[test]
fn mv_no_drift() {
    let out = oplq_spec("mv", "no_drift_mv.json", &[]);
    assert_eq!(out.status.code(), Some(0));
    let doc = ResultDoc::from_json(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    let mv = doc.mean_variance.unwrap();
    assert!(mv.portfolio.levels.iter().flatten().flatten().all(|v| v.abs() <= 1e-12));
    assert!((mv.transform.value + 1.6).abs() <= 1e-12);
}

#[test]
fn csv_table() {
    let out = oplq_spec("solve", "desk1.json", &["--format", "csv"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(rd.headers().unwrap().iter().collect::<Vec<_>>(), ["level", "node", "u0", "x0", "y0", "z0"]);
    assert_eq!(rd.records().count(), 1 + 2 + 4);
    assert_eq!(oplq_spec("check", "desk1.json", &["--format", "csv"]).status.code(), Some(1));
}

#[test]
fn expanded_spec_gives_identical_results() {
    let out = oplq_spec("solve", "desk1.json", &["--expand"]);
    assert_eq!(out.status.code(), Some(0));
    let expanded = String::from_utf8(out.stdout).unwrap();
    assert!(!expanded.contains("constant"));
    let p = temp_file("expanded.json", &expanded);
    let a = oplq_spec("solve", "desk1.json", &[]);
    let b = oplq(&["solve", "--spec", p.to_str().unwrap()]);
    assert_eq!(a.stdout, b.stdout);
    // expansion is idempotent
    let again = oplq(&["solve", "--spec", p.to_str().unwrap(), "--expand"]);
    assert_eq!(again.stdout, expanded.as_bytes());
}

#[test]
fn schema_errors_name_the_field() {
    let mut spec: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(spec_path("desk1.json")).unwrap()).unwrap();
    spec["coefficients"]["b"]["base"] = serde_json::json!({ "constant": [[1.0, 2.0]] });
    let p = temp_file("bad_shape.json", &spec.to_string());
    let out = oplq(&["solve", "--spec", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("coefficients.b.base"));

    spec["coefficients"]["b"]["base"] = serde_json::json!({ "per_level": [1.0, 1.0] });
    let p = temp_file("bad_levels.json", &spec.to_string());
    let err = String::from_utf8(oplq(&["solve", "--spec", p.to_str().unwrap()]).stderr).unwrap();
    assert!(err.contains("coefficients.b.base.per_level"), "{err}");

    let p = temp_file("bad_version.json", &std::fs::read_to_string(spec_path("desk1.json")).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 9"));
    let err = String::from_utf8(oplq(&["solve", "--spec", p.to_str().unwrap()]).stderr).unwrap();
    assert!(err.contains("schema_version"));
}

#[test]
fn node_budget_from_env() {
    let p = spec_path("desk1.json");
    let out = Command::new(env!("CARGO_BIN_EXE_oplq"))
        .args(["solve", "--spec", p.to_str().unwrap()])
        .env("OPLQ_NODE_BUDGET", "10")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("budget"));
}

#[test]
fn validate_fails_on_loose_tolerance() {
    let mut spec = load("desk1.json");
    assert_eq!(run(Cmd::Validate, &spec, None, false).unwrap().exit_code, 0);
    spec.solver.tol = 1e-3;
    let o = run(Cmd::Validate, &spec, None, false).unwrap();
    assert_eq!(o.exit_code, 1);
    assert_eq!(o.doc.status, "validation_failed");
    let failed: Vec<_> = o.doc.validation.unwrap().into_iter().filter(|c| !c.pass).map(|c| c.name).collect();
    assert!(failed.contains(&"continuation vs direct control".to_string()), "{failed:?}");
}

#[test]
fn market_validation_passes() {
    let out = oplq_spec("validate", "desk_mv.json", &[]);
    assert_eq!(out.status.code(), Some(0));
}
