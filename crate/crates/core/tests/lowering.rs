use qiral_core::lowering::*;
use qiral_core::pipeline::Session;
use qiral_core::stencil::Dom;
use qiral_core::{Stmt, Term};

fn loops(nodes: &[Node]) -> Vec<&Node> {
    let mut out = Vec::new();
    for n in nodes {
        match n {
            Node::SeqWhile { body, .. } => out.extend(loops(body)),
            Node::ParallelFor { .. } => out.push(n),
            _ => {}
        }
    }
    out
}

#[test]
fn x_and_r_updates_share_a_loop() {
    let s = Session::standard();
    let ir = s.compile(&["CGNR"], Layout::Nested).unwrap();
    let fused = loops(&ir.body).into_iter().any(|n| match n {
        Node::ParallelFor { body, .. } => {
            let w: Vec<_> = body.iter().filter_map(Kernel::writes).collect();
            w.contains(&"x") && w.contains(&"r_1")
        }
        _ => false,
    });
    assert!(fused);
}

#[test]
fn gather_never_fuses_with_its_producer() {
    let s = Session::standard();
    let ir = s.compile(&["CGNR"], Layout::Nested).unwrap();
    for n in loops(&ir.body) {
        if let Node::ParallelFor { body, .. } = n {
            let writes: Vec<_> = body.iter().filter_map(Kernel::writes).collect();
            for k in body {
                if let Kernel::NeighborGather { input, .. } = k {
                    assert!(!writes.contains(&input.as_str()), "{input}");
                }
            }
        }
    }
}

#[test]
fn fusion_is_idempotent() {
    let s = Session::standard();
    for alg in [&["CGNR"][..], &["SCHUR", "CGNR"], &["BiCGSTAB"]] {
        let once = fuse_and_promote(&lower(&s.plan(alg).unwrap(), Layout::Nested).unwrap());
        assert_eq!(fuse_and_promote(&once), once);
    }
}

#[test]
fn gather_loops_get_private_temporaries() {
    let s = Session::standard();
    let ir = s.compile(&["CGNR"], Layout::Nested).unwrap();
    for n in loops(&ir.body) {
        if let Node::ParallelFor { body, private, .. } = n {
            let gathers = body.iter().any(|k| matches!(k, Kernel::NeighborGather { .. }));
            assert_eq!(gathers, !private.is_empty());
        }
    }
}

#[test]
fn in_place_gather_is_a_race() {
    let s = Session::standard();
    let mut ir = s.compile_stmt("x = Dirac * b", Layout::Nested).unwrap();
    for n in &mut ir.body {
        if let Node::ParallelFor { body, .. } = n {
            for k in body.iter_mut() {
                if let Kernel::NeighborGather { out, input, .. } = k {
                    *out = input.clone();
                }
            }
        }
    }
    assert!(matches!(privatize(&ir), Err(LowerError::RaceDetected { .. })));
}

#[test]
fn inverse_is_not_lowered() {
    let s = Session::standard();
    let plan = s.plan(&["CGNR"]).unwrap();
    let mut bad = plan.clone();
    bad.stmts.push(Stmt::assign("x", Term::mul(Term::inverse(Term::sym("Dirac")), Term::sym("b"))));
    assert!(matches!(lower(&bad, Layout::Nested), Err(LowerError::UnloweredConstruct(_))));
}

#[test]
fn schur_vectors_live_on_half_lattices() {
    let s = Session::standard();
    let ir = s.compile(&["SCHUR", "CGNR"], Layout::Linear).unwrap();
    assert_eq!(ir.layout, Layout::Linear);
    assert_eq!(ir.dom("x"), Dom::Full);
    assert_eq!(ir.dom("r_9"), Dom::Odd);
    assert!(ir.to_string().contains("neighbor-gather"));
}
