use std::path::{Path, PathBuf};

use cascade_passivity::cli::files::{read_json, write_json, NetworkFile, StateFile};
use cascade_passivity::cli::{
    execute, EXIT_CERTIFICATION, EXIT_INFEASIBLE, EXIT_MALFORMED, EXIT_OK,
};
use cascade_passivity::fixtures::{example_network, example_network_prefix};
use cascade_passivity::model::{CascadeNetwork, Subsystem};

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run(args: &[&str]) -> Run {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("cascade-passivity").chain(args.iter().copied());
    let code = execute(argv, &mut out, &mut err);
    Run {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn shipped_network_files_match_fixtures() {
    let net = read_json::<NetworkFile>(s(&data("example4.json")))
        .unwrap()
        .to_network()
        .unwrap();
    assert_eq!(net, example_network());
    let net = read_json::<NetworkFile>(s(&data("example3.json")))
        .unwrap()
        .to_network()
        .unwrap();
    assert_eq!(net, example_network_prefix(3));
}

#[test]
fn design_check_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("s.json");
    let r = run(&[
        "design",
        "--net",
        s(&data("example4.json")),
        "--out",
        s(&state),
    ]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let routes: Vec<&str> = r
        .stdout
        .lines()
        .skip(1)
        .take(4)
        .map(|l| l.split_whitespace().nth(1).unwrap())
        .collect();
    assert_eq!(
        routes,
        ["Synthesized", "Synthesized", "Verified", "Synthesized"]
    );

    let first = run(&[
        "check",
        "--state",
        s(&state),
        "--net",
        s(&data("example4.json")),
    ]);
    assert_eq!(first.code, EXIT_OK, "{}", first.stderr);
    assert!(first.stdout.contains("verdict: PASS"));

    // load, save again: the document and the certificate are bit-stable
    let file: StateFile = read_json(s(&state)).unwrap();
    let copy = dir.path().join("copy.json");
    write_json(s(&copy), &StateFile::from_state(&file.to_state().unwrap())).unwrap();
    assert_eq!(
        std::fs::read(&state).unwrap(),
        std::fs::read(&copy).unwrap()
    );
    let second = run(&["check", "--state", s(&copy)]);
    assert_eq!(first.stdout, second.stdout);
}

#[test]
fn fingerprint_mismatch_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("s.json");
    assert_eq!(
        run(&[
            "design",
            "--net",
            s(&data("example3.json")),
            "--out",
            s(&state)
        ])
        .code,
        EXIT_OK
    );

    let r = run(&[
        "check",
        "--state",
        s(&state),
        "--net",
        s(&data("example4.json")),
    ]);
    assert_eq!(r.code, EXIT_MALFORMED);
    assert!(r.stderr.contains("fingerprint"));

    let out = dir.path().join("s2.json");
    let r = run(&[
        "add",
        "--state",
        s(&state),
        "--sub",
        s(&data("example4_add.json")),
        "--out",
        s(&out),
        "--net",
        s(&data("example4.json")),
    ]);
    assert_eq!(r.code, EXIT_MALFORMED);
    assert!(!out.exists());

    // editing the embedded network without updating the fingerprint
    let mut file: StateFile = read_json(s(&state)).unwrap();
    file.network.subsystems[2].a[0][0] = -2.0;
    write_json(s(&state), &file).unwrap();
    let r = run(&["check", "--state", s(&state)]);
    assert_eq!(r.code, EXIT_MALFORMED);
}

#[test]
fn corrupted_storage_fails_certification() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("s.json");
    assert_eq!(
        run(&[
            "design",
            "--net",
            s(&data("example4.json")),
            "--out",
            s(&state)
        ])
        .code,
        EXIT_OK
    );
    let mut file: StateFile = read_json(s(&state)).unwrap();
    file.records[2].q[0][0] += 0.25;
    write_json(s(&state), &file).unwrap();
    let r = run(&["check", "--state", s(&state)]);
    assert_eq!(r.code, EXIT_CERTIFICATION);
    assert!(r.stdout.contains("EqualityResidual"));
}

#[test]
fn non_cascade_coupling_is_malformed() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let mut file = NetworkFile::from_network(&example_network());
    file.couplings
        .push(cascade_passivity::cli::files::CouplingJson {
            i: 1,
            j: 3,
            h: vec![vec![1.0]],
        });
    write_json(s(&path), &file).unwrap();
    let r = run(&["validate", "--net", s(&path)]);
    assert_eq!(r.code, EXIT_MALFORMED);
    assert!(r.stdout.contains("NonCascadeCoupling"), "{}", r.stdout);
    let r = run(&[
        "design",
        "--net",
        s(&path),
        "--out",
        s(&dir.path().join("s.json")),
    ]);
    assert_eq!(r.code, EXIT_MALFORMED);
}

#[test]
fn validate_accepts_example_network() {
    let r = run(&["validate", "--net", s(&data("example4.json"))]);
    assert_eq!(r.code, EXIT_OK);
    assert!(r.stdout.starts_with("ok"));
}

#[test]
fn uncontrollable_unstable_member_is_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.json");
    let net = CascadeNetwork::new(vec![
        Subsystem::scalar(-1.0, 1.0, 1.0, 1.0, 1.0),
        Subsystem::scalar(1.0, 1.0, 1.0, 0.0, 1.0),
    ]);
    write_json(s(&path), &NetworkFile::from_network(&net)).unwrap();
    let r = run(&[
        "design",
        "--net",
        s(&path),
        "--out",
        s(&dir.path().join("s.json")),
    ]);
    assert_eq!(r.code, EXIT_INFEASIBLE);
    assert!(r.stderr.contains("subsystem 2"), "{}", r.stderr);
}

#[test]
fn add_then_simulate_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let (s3, s4) = (dir.path().join("s3.json"), dir.path().join("s4.json"));
    assert_eq!(
        run(&[
            "design",
            "--net",
            s(&data("example3.json")),
            "--out",
            s(&s3)
        ])
        .code,
        EXIT_OK
    );
    let r = run(&[
        "add",
        "--state",
        s(&s3),
        "--sub",
        s(&data("example4_add.json")),
        "--out",
        s(&s4),
    ]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);

    let csv = dir.path().join("trial.csv");
    let r = run(&[
        "simulate",
        "--state",
        s(&s4),
        "--seed",
        "4",
        "--T",
        "2",
        "--dt",
        "1e-3",
        "--csv",
        s(&csv),
    ]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    assert!(r.stdout.contains("dissipation margin"));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("t,x1,x2,x3,x4,x5,x6,y1,y2,y3,y4,w1,w2,w3,w4,V\n"));
    assert_eq!(text.lines().count(), 2002);

    let r = run(&["report", "--state", s(&s4)]);
    assert_eq!(r.code, EXIT_OK);
    assert!(r.stdout.contains("Verified") && r.stdout.contains("gain norms"));
}

#[test]
fn usage_errors_are_malformed_input() {
    assert_eq!(run(&["design"]).code, EXIT_MALFORMED);
    assert_eq!(run(&["frobnicate"]).code, EXIT_MALFORMED);
    assert_eq!(
        run(&["check", "--state", "/nonexistent/state.json"]).code,
        EXIT_MALFORMED
    );
    assert_eq!(run(&["--help"]).code, EXIT_OK);
}
