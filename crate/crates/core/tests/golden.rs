//! Parser/printer round trips over the fixture corpus and random terms.
//!
//! Each `fixtures/NAME.qir` has a canonical rendering in `fixtures/NAME.golden`.
//! Set `QIRAL_BLESS=1` to regenerate the golden files after an intended
//! printer change.

use std::path::{Path, PathBuf};

use proptest::prelude::*;
use qiral_core::parser::{parse, parse_term};
use qiral_core::printer::{pretty_print, term_to_string};
use qiral_core::*;

fn fixtures() -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "qir"))
        .collect();
    v.sort();
    v
}

fn parse_file(p: &Path) -> SourceUnit {
    let src = std::fs::read_to_string(p).unwrap();
    parse(&src).unwrap_or_else(|es| panic!("{}: {es:?}", p.display()))
}

#[test]
fn corpus_is_large_enough() {
    assert!(fixtures().len() >= 30);
}

#[test]
fn fixtures_match_their_golden_text() {
    let bless = std::env::var_os("QIRAL_BLESS").is_some();
    for p in fixtures() {
        let text = pretty_print(&parse_file(&p));
        let golden = p.with_extension("golden");
        if bless {
            std::fs::write(&golden, &text).unwrap();
            continue;
        }
        let want = std::fs::read_to_string(&golden).unwrap_or_else(|_| panic!("missing {}", golden.display()));
        assert_eq!(text, want, "{}", p.display());
    }
}

#[test]
fn printing_then_parsing_is_the_identity() {
    for p in fixtures() {
        let unit = parse_file(&p);
        let text = pretty_print(&unit);
        let again = parse(&text).unwrap_or_else(|es| panic!("{}: {es:?}\n{text}", p.display()));
        assert_eq!(again, unit, "{}", p.display());
        assert_eq!(pretty_print(&again), text);
    }
}

fn set_name() -> impl Strategy<Value = SetExpr> {
    prop_oneof![Just("L"), Just("C"), Just("S"), Just("X")].prop_map(SetExpr::named)
}

fn set_expr() -> impl Strategy<Value = SetExpr> {
    let atom = prop_oneof![
        3 => set_name(),
        1 => (any::<bool>(), Just(SetExpr::named("L"))).prop_map(|(even, s)| {
            SetExpr::Parity(if even { Parity::Even } else { Parity::Odd }, Box::new(s))
        }),
    ];
    prop_oneof![
        2 => atom.clone(),
        1 => prop::collection::vec(atom, 2..4).prop_map(SetExpr::Product),
    ]
}

fn dir() -> impl Strategy<Value = DirRef> {
    prop_oneof![
        (0u8..4).prop_map(|a| DirRef::Axis(Axis::ALL[a as usize])),
        Just(DirRef::Var("d".into())),
    ]
}

fn signed() -> impl Strategy<Value = SignedDir> {
    (any::<bool>(), dir()).prop_map(|(neg, dir)| SignedDir { neg, dir })
}

fn literal() -> impl Strategy<Value = Complex> {
    let v = prop_oneof![Just(0.0), Just(1.0), Just(-2.5), Just(0.125), -1e6..1e6f64];
    (v.clone(), prop_oneof![Just(0.0), v]).prop_map(|(re, im)| Complex::new(re, im))
}

fn leaf() -> impl Strategy<Value = Term> {
    prop_oneof![
        literal().prop_map(Term::Lit),
        prop_oneof![Just("a"), Just("kappa"), Just("A"), Just("M"), Just("b")].prop_map(Term::sym),
        Just(Term::ImagUnit),
        Just(Term::Zero),
        Just(Term::Gamma5),
        set_expr().prop_map(Term::Identity),
        dir().prop_map(Term::Gamma),
        (set_name(), signed()).prop_map(|(s, d)| Term::Shift(s, d)),
        signed().prop_map(|d| Term::Link(d, "s".into())),
        (any::<bool>(), set_name()).prop_map(|(e, s)| Term::Projection(if e { Parity::Even } else { Parity::Odd }, s)),
    ]
}

fn term() -> impl Strategy<Value = Term> {
    leaf().prop_recursive(5, 48, 3, |t| {
        let boxed = |f: fn(Box<Term>, Box<Term>) -> Term| move |(a, b): (Term, Term)| f(Box::new(a), Box::new(b));
        prop_oneof![
            (t.clone(), t.clone()).prop_map(boxed(Term::Add)),
            (t.clone(), t.clone()).prop_map(boxed(Term::Sub)),
            (t.clone(), t.clone()).prop_map(boxed(Term::Mul)),
            (t.clone(), t.clone()).prop_map(boxed(Term::ScalarMul)),
            (t.clone(), t.clone()).prop_map(boxed(Term::Div)),
            (t.clone(), t.clone()).prop_map(boxed(Term::Tensor)),
            (t.clone(), t.clone()).prop_map(boxed(Term::Inner)),
            t.clone().prop_map(|a| Term::Transpose(Box::new(a))),
            t.clone().prop_map(|a| Term::Dagger(Box::new(a))),
            t.clone().prop_map(|a| Term::Inverse(Box::new(a))),
            t.clone().prop_map(|a| Term::Neg(Box::new(a))),
            (t.clone(), set_expr()).prop_map(|(a, s)| Term::SubVector(Box::new(a), s)),
            (set_expr(), t.clone()).prop_map(|(domain, body)| Term::DirectSum {
                binder: "s".into(),
                domain,
                body: Box::new(body),
            }),
            (set_name(), t.clone()).prop_map(|(domain, body)| Term::IndexedSum {
                binder: "d".into(),
                domain,
                body: Box::new(body),
            }),
            prop::collection::vec(t, 1..3).prop_map(|args| Term::Call("conform".into(), args)),
        ]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn random_terms_round_trip(t in term()) {
        let text = term_to_string(&t);
        let back = parse_term(&text).map_err(|e| TestCaseError::fail(format!("{text}: {e}")))?;
        prop_assert_eq!(back, t, "{}", text);
    }
}
