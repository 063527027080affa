use qiral_core::gamma;
use qiral_core::gauge::random_gauge;
use qiral_core::oracle::{check_rule_soundness, DenseMatrix, Oracle, SoundnessError};
use qiral_core::parser::parse_term;
use qiral_core::prelude::{library, parse_all, standard_unit};
use qiral_core::rewrite::{Rule, RuleSet};
use qiral_core::shape::{typecheck_program, TypedProgram};
use qiral_core::Complex;

fn program() -> TypedProgram {
    typecheck_program(&standard_unit()).unwrap()
}

fn dirac(p: &TypedProgram, kappa: f64, mu: f64) -> DenseMatrix {
    let g = random_gauge([2, 2, 2, 2], 7).unwrap();
    Oracle::for_program(p, &g, &[("kappa", kappa), ("mu", mu)])
        .denote_matrix(&parse_term("Dirac").unwrap())
        .unwrap()
}

#[test]
fn zero_hopping_is_the_identity() {
    let p = program();
    let d = dirac(&p, 0.0, 0.3);
    assert_eq!(d, DenseMatrix::identity(192));
}

#[test]
fn gamma5_hermiticity() {
    let p = program();
    let plus = dirac(&p, 0.15, 0.1);
    let minus = dirac(&p, 0.15, -0.1);
    let g5 = DenseMatrix::identity(48).kron(&DenseMatrix::from_mat4(&gamma::gamma5())).unwrap();
    let rhs = g5.mul(&minus).unwrap().mul(&g5).unwrap();
    let diff = plus.dagger().zip(&rhs, |a, b| a - b).unwrap();
    assert!(diff.frobenius() / plus.frobenius() < 1e-12);
}

#[test]
fn even_block_is_twisted_identity() {
    let p = program();
    let g = random_gauge([2, 2, 2, 2], 3).unwrap();
    let o = Oracle::for_program(&p, &g, &[("kappa", 0.15), ("mu", 0.1)]);
    let block = o
        .denote_matrix(&parse_term("proj(even, L) (x) I_C (x) I_S * Dirac * (proj(even, L) (x) I_C (x) I_S)^t").unwrap())
        .unwrap();
    let expect = o
        .denote_matrix(&parse_term("I_{even(L) (x) C (x) S} + 2 * i * kappa * mu . (I_{even(L) (x) C} (x) gamma5)").unwrap())
        .unwrap();
    let diff = block.zip(&expect, |a, b| a - b).unwrap();
    assert!(diff.frobenius() < 1e-13, "{}", diff.frobenius());
}

#[test]
fn shipped_equations_are_sound() {
    let p = program();
    let g = random_gauge([2, 2, 2, 2], 11).unwrap();
    let rs = RuleSet::from_program(&p).unwrap();
    for (k, rule) in rs.rules.iter().filter(|r| !r.is_def).enumerate() {
        check_rule_soundness(rule, 20, &p.env, &g, k as u64).unwrap_or_else(|e| panic!("{e}"));
    }
}

#[test]
fn commuted_kronecker_is_refuted() {
    let mut srcs = library();
    srcs.push(("bad.qir", "equation tensor_swap [A, B : matrix] A (x) B = B (x) A ;"));
    let p = typecheck_program(&parse_all(&srcs).unwrap()).unwrap();
    let eq = p.unit.equations.iter().find(|e| e.name == "tensor_swap").unwrap();
    let rule = Rule::from_equation(eq).unwrap();
    let g = random_gauge([2, 2, 2, 2], 1).unwrap();
    let err = check_rule_soundness(&rule, 20, &p.env, &g, 0).unwrap_err();
    assert!(matches!(err, SoundnessError::Counterexample(_)), "{err}");
}

#[test]
fn inner_product_conjugates_left() {
    let p = program();
    let g = random_gauge([2, 2, 2, 2], 1).unwrap();
    let mut o = Oracle::for_program(&p, &g, &[]);
    o.vectors.insert("b".into(), vec![Complex::new(0.0, 1.0); 192]);
    o.vectors.insert("x".into(), vec![Complex::new(1.0, 0.0); 192]);
    let v = o.denote(&parse_term("<b | x>").unwrap()).unwrap();
    assert_eq!(v, qiral_core::oracle::Value::Scalar(Complex::new(0.0, -192.0)));
}
