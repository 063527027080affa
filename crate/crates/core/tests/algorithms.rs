use qiral_core::algorithms::{AlgorithmError, Planner};
use qiral_core::prelude::standard_unit;
use qiral_core::rewrite::RuleSet;
use qiral_core::shape::{typecheck_program, TypedProgram};
use qiral_core::Stmt;

fn setup() -> (TypedProgram, RuleSet) {
    let p = typecheck_program(&standard_unit()).unwrap();
    let rs = RuleSet::from_program(&p).unwrap();
    (p, rs)
}

#[test]
fn cgnr_plan_has_six_setup_statements_and_a_loop() {
    let (p, rs) = setup();
    let plan = Planner::new(&p, &rs).plan(&["CGNR"]).unwrap();
    assert_eq!(plan.stmts.len(), 7);
    assert!(matches!(plan.stmts[6], Stmt::While { ref body, .. } if body.len() == 10));
    assert!(!plan.contains_inverse());
}

#[test]
fn schur_alone_leaves_an_inverse() {
    let (p, rs) = setup();
    let err = Planner::new(&p, &rs).plan(&["SCHUR"]).unwrap_err();
    assert!(matches!(err, AlgorithmError::ResidualInverse(_)), "{err}");
}

#[test]
fn schur_then_cgnr_is_inverse_free() {
    let (p, rs) = setup();
    let plan = Planner::new(&p, &rs).plan(&["SCHUR", "CGNR"]).unwrap();
    eprintln!("{}", plan.to_text());
    let loops = plan.stmts.iter().filter(|s| matches!(s, Stmt::While { .. })).count();
    assert_eq!(loops, 1);
}
