use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qiral_core::gauge::{load_vector, random_gauge, random_vector};
use qiral_core::lowering::Layout;
use qiral_core::oracle::rel_diff;
use qiral_core::pipeline::{run, Session};
use qiral_core::vm::RunParams;

fn qiralc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qiralc")).args(args).output().expect("spawn qiralc")
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
        .display()
        .to_string()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit status")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn counter(o: &Output, key: &str) -> u64 {
    stderr(o)
        .lines()
        .find_map(|l| l.strip_prefix(key).map(|v| v.trim().parse().unwrap()))
        .unwrap_or_else(|| panic!("no `{key}` in {}", stderr(o)))
}

fn path(dir: &tempfile::TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

#[test]
fn bundled_program_checks() {
    let o = qiralc(&["check"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn misshapen_goal_is_one_shape_error() {
    let o = qiralc(&["check", &fixture("misshapen_goal.qir")]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert_eq!(err.matches("shape mismatch").count(), 1, "{err}");
}

#[test]
fn unknown_algorithm_exits_1() {
    for cmd in ["check", "run", "build"] {
        let o = qiralc(&[cmd, "--algorithms", "CGNR,NOPE", "--lattice", "2,2,2,2"]);
        assert_eq!(code(&o), 1, "{cmd}: {}", stderr(&o));
        assert!(stderr(&o).contains("unknown algorithm `NOPE`"));
    }
}

#[test]
fn bad_flags_exit_1() {
    assert_eq!(code(&qiralc(&["run", "--algorithms", "CGNR", "--lattice", "3,4,4,4"])), 1);
    assert_eq!(code(&qiralc(&["run", "--lattice", "2,2,2,2"])), 1);
    assert_eq!(code(&qiralc(&["--help"])), 0);
}

#[test]
fn run_converges_to_a_true_solution() {
    let dir = tempfile::tempdir().unwrap();
    let (x_path, csv) = (path(&dir, "x.qvec"), path(&dir, "trace.csv"));
    let o = qiralc(&[
        "run",
        "--algorithms",
        "CGNR",
        "--lattice",
        "2,2,2,2",
        "--seed",
        "42",
        "--out",
        x_path.to_str().unwrap(),
        "--report",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("iteration,residual"));
    let rows: Vec<(usize, f64)> = lines
        .map(|l| {
            let (i, r) = l.split_once(',').unwrap();
            (i.parse().unwrap(), r.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len() as u64, counter(&o, "iterations"));
    assert!(rows.windows(2).all(|w| w[1].0 == w[0].0 + 1));
    // The residual is printed with 17 significant digits.
    let digits = text.lines().nth(1).unwrap().split(',').nth(1).unwrap();
    assert_eq!(digits.split('e').next().unwrap().replace(['.', '-'], "").len(), 17);

    // Matrix-free check of the final residual with the same inputs.
    let x = load_vector(&x_path).unwrap();
    let s = Session::standard();
    let g = random_gauge([2; 4], 42).unwrap();
    let b = random_vector(192, 43);
    let apply = s.compile_stmt("x = Dirac * b", Layout::Nested).unwrap();
    let dx = run(&apply, &g, &x, &RunParams::default(), 1).unwrap().x;
    assert!(rel_diff(&dx, &b) < 1e-7);
}

#[test]
fn schur_needs_fewer_dirac_applications() {
    let dir = tempfile::tempdir().unwrap();
    let x = path(&dir, "x.qvec");
    let csv = path(&dir, "t.csv");
    let mut counts = Vec::new();
    for algs in ["CGNR", "SCHUR,CGNR"] {
        let o = qiralc(&[
            "run",
            "--algorithms",
            algs,
            "--lattice",
            "4,4,4,4",
            "--out",
            x.to_str().unwrap(),
            "--report",
            csv.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        counts.push(counter(&o, "dirac_applications"));
    }
    assert!(counts[1] < counts[0], "{counts:?}");
}

#[test]
fn forced_non_convergence_exits_2_with_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let x = path(&dir, "x.qvec");
    let o = qiralc(&[
        "run",
        "--algorithms",
        "CGNR",
        "--lattice",
        "2,2,2,2",
        "--epsilon",
        "1e-30",
        "--max-iter",
        "5",
        "--out",
        x.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(out.lines().count(), 6, "{out}");
    assert_eq!(load_vector(&x).unwrap().len(), 192);
}

#[test]
fn build_writes_c_with_private_clauses() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = qiralc(&["build", "--algorithms", "CGNR", "--out-dir", out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let src = std::fs::read_to_string(dir.path().join("cgnr.c")).unwrap();
    assert!(src.contains("#pragma omp parallel for") && src.contains("private(nb, acc, link)"));
    assert!(dir.path().join("qiral_runtime.h").exists());
    assert!(dir.path().join("qiral_runtime.c").exists());

    let o = qiralc(&["build", "--algorithms", "SCHUR,CGNR", "--out-dir", out]);
    assert_eq!(code(&o), 0);
    let src = std::fs::read_to_string(dir.path().join("schur_cgnr.c")).unwrap();
    assert!(src.contains("qr_stencil_build(&st0, g, QR_ODD, QR_EVEN") || src.contains("QR_EVEN, QR_ODD"));
    assert!(src.contains("n_half"));
}

#[test]
fn build_can_emit_ir_and_use_bindings() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = qiralc(&["build", "--algorithms", "CGNR", "--emit", "ir", "--out-dir", out, "--name", "p"]);
    assert_eq!(code(&o), 0);
    let ir = std::fs::read_to_string(dir.path().join("p.ir")).unwrap();
    assert!(ir.contains("neighbor-gather") && !dir.path().join("p.c").exists());

    let o = qiralc(&["build", "--algorithms", "SCHUR,CGNR", "--out-dir", out, "--name", "q", &fixture("bind_dgemm.qir")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(std::fs::read_to_string(dir.path().join("q.c")).unwrap().contains("dgemm(&st"));
}

#[test]
fn rewrite_trace_is_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let trace = path(&dir, "rw.jsonl");
    let o = qiralc(&[
        "build",
        "--algorithms",
        "CGNR",
        "--emit",
        "ir",
        "--out-dir",
        dir.path().to_str().unwrap(),
        "--trace-rewrites",
        trace.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(trace).unwrap();
    assert!(text.lines().count() > 10);
    assert!(text.lines().all(|l| l.starts_with('{') && l.ends_with('}')));
}

#[test]
fn dump_ir_goes_to_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let o = qiralc(&[
        "build",
        "--algorithms",
        "CGNR",
        "--dump-ir",
        "--loop-layout",
        "linear",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("layout linear"));
}

#[test]
fn oracle_agrees_on_the_small_lattice() {
    let o = qiralc(&["oracle", "--algorithms", "CGNR", "--lattice", "2,2,2,2", "--seed", "42"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = qiralc(&["oracle", "--kappa", "0"]);
    assert_eq!(code(&o), 0);
    let report = String::from_utf8(o.stdout).unwrap();
    assert!(report.contains("solve_rel_error 0e0"), "{report}");
}

#[test]
fn corrupted_rule_breaches_the_oracle() {
    let o = qiralc(&["oracle", &fixture("corrupt_rule.qir")]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(String::from_utf8(o.stdout).unwrap().contains("unsound corrupt_gamma5"));
}
