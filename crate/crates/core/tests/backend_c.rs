use qiral_core::backend_c::*;
use qiral_core::gauge::{random_gauge, random_vector};
use qiral_core::lowering::{Kernel, Layout, LoopIr, Node};
use qiral_core::pipeline::{norm2, Session};
use qiral_core::vm::RunParams;

fn cc() -> bool {
    let ok = compiler_available("cc");
    if !ok {
        eprintln!("no OpenMP-capable C compiler; skipping");
    }
    ok
}

fn params(b: &[qiral_core::Complex]) -> RunParams {
    RunParams {
        epsilon: 1e-16 * norm2(b),
        ..RunParams::default()
    }
}

fn named(name: &str) -> EmitParams {
    EmitParams { name: name.into() }
}

fn empty_ir() -> LoopIr {
    LoopIr {
        layout: Layout::Nested,
        vectors: vec![],
        scalars: vec![],
        params: vec![],
        inputs: vec![],
        output: "x".into(),
        stencils: vec![],
        body: vec![],
    }
}

#[test]
fn emission_is_deterministic() {
    let s = Session::standard();
    let ir = s.compile(&["CGNR"], Layout::Nested).unwrap();
    let a = emit(&ir, &[], &named("cgnr")).unwrap();
    let b = emit(&s.compile(&["CGNR"], Layout::Nested).unwrap(), &[], &named("cgnr")).unwrap();
    assert_eq!(a, b);
    assert!(a.contains("int qiral_solve("));
    assert!(a.contains("#include \"qiral_runtime.h\""));
    assert!(a.contains("while (creal("));
    assert!(a.contains("#pragma omp parallel for schedule(static, QR_REDUCE_BLOCK) private(nb, acc, link)"));
}

#[test]
fn empty_program_compiles() {
    let src = emit(&empty_ir(), &[], &named("empty")).unwrap();
    if !cc() {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    compile(&src, dir.path(), &BuildOptions::default()).unwrap();
}

#[test]
fn unknown_routine_is_unbound() {
    let mut ir = empty_ir();
    ir.body.push(Node::KernelCall {
        routine: "zgemv".into(),
        args: vec![],
    });
    assert!(matches!(emit(&ir, &[], &named("t")), Err(BackendError::UnboundKernel(r)) if r == "zgemv"));
    let bound = LibraryBinding::new("y = M * v", "zgemv", &["M", "v", "y"]).unwrap();
    assert!(emit(&ir, &[bound], &named("t")).is_ok());
}

#[test]
fn malformed_bindings_are_rejected() {
    assert!(LibraryBinding::new("C = A * B", "dgemm", &["A", "B"]).is_err());
    assert!(LibraryBinding::new("C = A + B", "dgemm", &["A", "B", "C"]).is_err());
    assert!(LibraryBinding::new("C = A * A", "dgemm", &["A", "A", "C"]).is_err());
    assert!(LibraryBinding::new("C = A * B", "dg-emm", &["A", "B", "C"]).is_err());
}

fn local_product() -> LoopIr {
    let s = Session::standard();
    let ir = s.compile_stmt("x = (I_L (x) I_C (x) gamma5) * b", Layout::Nested).unwrap();
    let has_matmul = ir.body.iter().any(|n| match n {
        Node::ParallelFor { body, .. } => body.iter().any(|k| matches!(k, Kernel::ColorSpinMatmul { .. })),
        _ => false,
    });
    assert!(has_matmul, "{ir}");
    ir
}

#[test]
fn dgemm_binding_replaces_the_matmul() {
    let ir = local_product();
    let generic = emit(&ir, &[], &named("g5")).unwrap();
    let bound = emit(&ir, &[LibraryBinding::dgemm()], &named("g5")).unwrap();
    assert!(!generic.contains("dgemm("));
    assert!(bound.contains("dgemm(&st0, v_b, v_tmp0);"), "{bound}");
    if !cc() {
        return;
    }
    let g = random_gauge([2, 2, 2, 2], 1).unwrap();
    let b = random_vector(192, 2);
    for src in [&generic, &bound] {
        let r = build_and_diff(&ir, src, &g, &b, &RunParams::default(), &BuildOptions::default()).unwrap();
        assert!(r.max_rel_diff <= 1e-12, "{r}");
    }
}

#[test]
fn copy_program_matches_exactly() {
    if !cc() {
        return;
    }
    let s = Session::standard();
    let ir = s.compile_stmt("x = b", Layout::Nested).unwrap();
    let src = emit(&ir, &[], &named("copy")).unwrap();
    let g = random_gauge([2, 2, 2, 2], 1).unwrap();
    let b = random_vector(192, 3);
    let r = build_and_diff(&ir, &src, &g, &b, &RunParams::default(), &BuildOptions::default()).unwrap();
    assert_eq!(r.max_rel_diff, 0.0);
    assert_eq!(r.c_iterations, 0);
}

#[test]
fn solvers_match_the_interpreter() {
    if !cc() {
        return;
    }
    let s = Session::standard();
    let g = random_gauge([2, 2, 2, 2], 7).unwrap();
    let b = random_vector(192, 8);
    for (alg, layout) in [
        (&["CGNR"][..], Layout::Nested),
        (&["CGNR"][..], Layout::Linear),
        (&["BiCGSTAB"][..], Layout::Nested),
        (&["SCHUR", "CGNR"][..], Layout::Linear),
    ] {
        let ir = s.compile(alg, layout).unwrap();
        let src = emit(&ir, &[], &named("solver")).unwrap();
        let r = build_and_diff(&ir, &src, &g, &b, &params(&b), &BuildOptions::default()).unwrap();
        assert!(r.max_rel_diff <= 1e-10, "{alg:?} {layout:?}: {r}");
        assert!(r.c_iterations > 0);
    }
}

#[test]
fn corrupted_runtime_is_caught() {
    if !cc() {
        return;
    }
    let s = Session::standard();
    let ir = s.compile(&["CGNR"], Layout::Nested).unwrap();
    let src = emit(&ir, &[], &named("cgnr")).unwrap();
    let g = random_gauge([2, 2, 2, 2], 7).unwrap();
    let b = random_vector(192, 8);
    let marker = "acc[a * 4 + s] += z;";
    assert!(RUNTIME_C.contains(marker));
    let opts = BuildOptions {
        runtime_c: RUNTIME_C.replace(marker, "acc[a * 4 + s] += 1.001 * z;"),
        ..BuildOptions::default()
    };
    let r = build_and_diff(&ir, &src, &g, &b, &params(&b), &opts);
    assert!(matches!(r, Err(BackendError::RuntimeMismatch(_))), "{r:?}");
}

#[test]
fn syntax_errors_surface_as_compile_failures() {
    if !cc() {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let r = compile("int main(void) { return }", dir.path(), &BuildOptions::default());
    assert!(matches!(r, Err(BackendError::CompileFailed(msg)) if msg.contains("error")));
}

#[test]
fn bindings_can_be_declared_in_source() {
    let unit = qiral_core::parser::parse("bind C = A * B => dgemm(A, B, C) ;").unwrap();
    let b = LibraryBinding::from_decl(&unit.bindings[0]).unwrap();
    assert_eq!(b, LibraryBinding::dgemm());
    let unit = qiral_core::parser::parse("bind C = A * B => dgemm(A, C) ;").unwrap();
    assert!(LibraryBinding::from_decl(&unit.bindings[0]).is_err());
}

#[test]
fn bound_schur_solver_matches_the_interpreter() {
    if !cc() {
        return;
    }
    let s = Session::standard();
    let ir = s.compile(&["SCHUR", "CGNR"], Layout::Nested).unwrap();
    let src = emit(&ir, &[LibraryBinding::dgemm()], &named("schur")).unwrap();
    assert!(src.contains("dgemm(&st"));
    let g = random_gauge([2, 2, 2, 2], 5).unwrap();
    let b = random_vector(192, 6);
    let r = build_and_diff(&ir, &src, &g, &b, &params(&b), &BuildOptions::default()).unwrap();
    assert!(r.max_rel_diff <= 1e-12, "{r}");
}
