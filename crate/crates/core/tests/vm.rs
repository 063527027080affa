use std::collections::HashMap;

use qiral_core::gauge::{random_gauge, random_vector};
use qiral_core::lowering::Layout;
use qiral_core::oracle::{dense_solve, rel_diff, Oracle};
use qiral_core::parser::parse_term;
use qiral_core::pipeline::{norm2, run, Session};
use qiral_core::vm::{execute, parallel_execute, ExecOptions, RunParams, VmError};

const DIMS: [usize; 4] = [2, 2, 2, 2];

fn params(b: &[qiral_core::Complex]) -> RunParams {
    RunParams {
        epsilon: 1e-20 * norm2(b),
        ..RunParams::default()
    }
}

#[test]
fn dirac_application_matches_dense() {
    let s = Session::standard();
    let g = random_gauge(DIMS, 4).unwrap();
    let ir = s.compile_stmt("x = Dirac * b", Layout::Nested).unwrap();
    let o = Oracle::for_program(&s.program, &g, &[("kappa", 0.15), ("mu", 0.1)]);
    let d = o.denote_matrix(&parse_term("Dirac").unwrap()).unwrap();
    for seed in 0..3 {
        let b = random_vector(192, seed);
        let out = run(&ir, &g, &b, &RunParams::default(), 1).unwrap();
        assert!(rel_diff(&out.x, &d.matvec(&b).unwrap()) < 1e-13);
        assert!(out.trace.is_empty());
    }
}

#[test]
fn solvers_agree_with_dense_solve() {
    let s = Session::standard();
    let g = random_gauge(DIMS, 9).unwrap();
    let b = random_vector(192, 1);
    let o = Oracle::for_program(&s.program, &g, &[("kappa", 0.15), ("mu", 0.1)]);
    let d = o.denote_matrix(&parse_term("Dirac").unwrap()).unwrap();
    let exact = dense_solve(&d, &b).unwrap();
    for alg in [&["CGNR"][..], &["CGNE"], &["BiCGSTAB"], &["SCHUR", "CGNR"]] {
        let ir = s.compile(alg, Layout::Nested).unwrap();
        let out = run(&ir, &g, &b, &params(&b), 1).unwrap();
        let err = rel_diff(&out.x, &exact);
        assert!(err < 1e-8, "{alg:?}: {err}");
    }
}

#[test]
fn schur_uses_fewer_gathers() {
    let s = Session::standard();
    let g = random_gauge(DIMS, 9).unwrap();
    let b = random_vector(192, 2);
    let full = run(&s.compile(&["CGNR"], Layout::Nested).unwrap(), &g, &b, &params(&b), 1).unwrap();
    let schur = run(&s.compile(&["SCHUR", "CGNR"], Layout::Nested).unwrap(), &g, &b, &params(&b), 1).unwrap();
    assert!(schur.dirac_applications < full.dirac_applications);
    assert!(rel_diff(&schur.x, &full.x) < 1e-6);
}

#[test]
fn thread_count_does_not_change_bits() {
    let s = Session::standard();
    let g = random_gauge(DIMS, 3).unwrap();
    let b = random_vector(192, 3);
    let ir = s.compile(&["CGNR"], Layout::Nested).unwrap();
    let one = run(&ir, &g, &b, &params(&b), 1).unwrap();
    for t in [2, 4] {
        let other = run(&ir, &g, &b, &params(&b), t).unwrap();
        assert_eq!(one, other);
    }
    let inputs = HashMap::from([("b".to_string(), b.clone())]);
    let racy = parallel_execute(
        &ir,
        &g,
        &inputs,
        &params(&b),
        ExecOptions {
            threads: 2,
            privatize: false,
        },
    );
    assert!(racy.map_or(true, |r| r.x != one.x));
}

#[test]
fn copy_program_has_empty_trace() {
    let s = Session::standard();
    let g = random_gauge(DIMS, 3).unwrap();
    let ir = s.compile_stmt("x = b", Layout::Nested).unwrap();
    let b = random_vector(192, 5);
    let out = execute(&ir, &g, &HashMap::from([("b".into(), b.clone())]), &RunParams::default()).unwrap();
    assert_eq!(out.x, b);
    assert!(out.trace.is_empty());
}

#[test]
fn iteration_limit_returns_partial_result() {
    let s = Session::standard();
    let g = random_gauge(DIMS, 3).unwrap();
    let b = random_vector(192, 5);
    let ir = s.compile(&["CGNR"], Layout::Nested).unwrap();
    let p = RunParams {
        epsilon: 1e-30,
        max_iter: 5,
        ..RunParams::default()
    };
    match run(&ir, &g, &b, &p, 1) {
        Err(VmError::MaxIterExceeded { x, trace }) => {
            assert_eq!(trace.len(), 5);
            assert_eq!(x.len(), 192);
        }
        other => panic!("{other:?}"),
    }
}
