//! Canonical text form of terms and source units. `parse` inverts it.

use std::fmt::Write;

use crate::ir::*;

pub fn set_to_string(s: &SetExpr) -> String {
    match s {
        SetExpr::Named(n) => n.clone(),
        SetExpr::Parity(p, inner) => format!("{}({})", p.keyword(), set_to_string(inner)),
        SetExpr::Product(fs) => fs
            .iter()
            .map(|f| match f {
                SetExpr::Product(_) => format!("({})", set_to_string(f)),
                other => set_to_string(other),
            })
            .collect::<Vec<_>>()
            .join(" (x) "),
    }
}

fn dir_to_string(d: &DirRef) -> String {
    match d {
        DirRef::Axis(a) => a.name().to_string(),
        DirRef::Var(v) => v.clone(),
    }
}

fn signed_to_string(d: &SignedDir) -> String {
    format!("{}{}", if d.neg { "-" } else { "" }, dir_to_string(&d.dir))
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn level(t: &Term) -> u8 {
    match t {
        Term::Add(..) | Term::Sub(..) => 1,
        Term::Mul(..) | Term::Tensor(..) | Term::ScalarMul(..) | Term::Div(..) => 2,
        Term::Neg(_) => 3,
        Term::Inverse(_) | Term::Transpose(_) | Term::SubVector(..) => 4,
        Term::Lit(c) if c.im != 0.0 || c.re.is_sign_negative() => 5,
        _ => 5,
    }
}

fn at(t: &Term, min: u8) -> String {
    let s = term_to_string(t);
    if level(t) < min {
        format!("({s})")
    } else {
        s
    }
}

pub fn term_to_string(t: &Term) -> String {
    let bin = |a: &Term, op: &str, b: &Term, lv: u8| format!("{} {op} {}", at(a, lv), at(b, lv + 1));
    match t {
        Term::Lit(c) => {
            if c.im == 0.0 && !c.re.is_sign_negative() {
                num(c.re)
            } else {
                format!("lit({}, {})", num(c.re), num(c.im))
            }
        }
        Term::Sym(s) => s.clone(),
        Term::ImagUnit => "i".into(),
        Term::Zero => "0".into(),
        Term::Identity(SetExpr::Named(n)) => format!("I_{n}"),
        Term::Identity(s) => format!("I_{{{}}}", set_to_string(s)),
        Term::Gamma(d) => format!("gamma[{}]", dir_to_string(d)),
        Term::Gamma5 => "gamma5".into(),
        Term::Shift(s, d) => format!("shift({}, {})", set_to_string(s), signed_to_string(d)),
        Term::Link(d, s) => format!("U({})[{s}]", signed_to_string(d)),
        Term::Projection(p, s) => format!("proj({}, {})", p.keyword(), set_to_string(s)),
        Term::Add(a, b) => bin(a, "+", b, 1),
        Term::Sub(a, b) => bin(a, "-", b, 1),
        Term::Mul(a, b) => bin(a, "*", b, 2),
        Term::Tensor(a, b) => bin(a, "(x)", b, 2),
        Term::ScalarMul(a, b) => bin(a, ".", b, 2),
        Term::Div(a, b) => bin(a, "/", b, 2),
        Term::DirectSum { binder, domain, body } => {
            format!("(dsum {binder} in {} : {})", set_to_string(domain), at(body, 2))
        }
        Term::IndexedSum { binder, domain, body } => {
            format!("(sum {binder} in {} : {})", set_to_string(domain), at(body, 2))
        }
        Term::Transpose(a) => format!("{}^t", at(a, 4)),
        Term::Inverse(a) => format!("{}^-1", at(a, 4)),
        Term::SubVector(a, s) => format!("{}[{}]", at(a, 4), set_to_string(s)),
        Term::Dagger(a) => format!("dagger({})", term_to_string(a)),
        Term::Neg(a) => format!("-{}", at(a, 3)),
        Term::Inner(a, b) => format!("<{} | {}>", term_to_string(a), term_to_string(b)),
        Term::Call(name, args) => format!(
            "{name}({})",
            args.iter().map(term_to_string).collect::<Vec<_>>().join(", ")
        ),
    }
}

fn type_to_string(t: &TypeExpr) -> String {
    match t {
        TypeExpr::Real => "R".into(),
        TypeExpr::Complex => "complex".into(),
        TypeExpr::Vector(None) => "V".into(),
        TypeExpr::Matrix(None) => "M".into(),
        TypeExpr::Vector(Some(s)) => format!("vector({})", set_to_string(s)),
        TypeExpr::Matrix(Some((r, c))) => format!("matrix({} -> {})", set_to_string(r), set_to_string(c)),
    }
}

fn typed_names(ts: &[TypedName]) -> String {
    ts.iter()
        .map(|t| format!("{} : {}", t.name, type_to_string(&t.ty)))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn stmt_to_string(s: &Stmt, indent: usize, out: &mut String) {
    let pad = "  ".repeat(indent);
    match s {
        Stmt::Assign { lhs, rhs, .. } => {
            let _ = writeln!(out, "{pad}{lhs} = {} ;", term_to_string(rhs));
        }
        Stmt::While { cond, body, .. } => {
            let op = match cond.op {
                CmpOp::Gt => ">",
                CmpOp::Lt => "<",
            };
            let _ = writeln!(
                out,
                "{pad}while ({} {op} {}) {{",
                term_to_string(&cond.lhs),
                term_to_string(&cond.rhs)
            );
            for b in body {
                stmt_to_string(b, indent + 1, out);
            }
            let _ = writeln!(out, "{pad}}}");
        }
    }
}

pub fn stmts_to_string(stmts: &[Stmt]) -> String {
    let mut out = String::new();
    for s in stmts {
        stmt_to_string(s, 0, &mut out);
    }
    out
}

pub fn template_to_string(t: &AlgorithmTemplate) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "algorithm {} {{", t.name);
    if !t.inputs.is_empty() {
        let _ = writeln!(out, "  input {} ;", typed_names(&t.inputs));
    }
    if !t.outputs.is_empty() {
        let _ = writeln!(out, "  output {} ;", typed_names(&t.outputs));
    }
    out.push_str("  match ");
    stmt_to_string(&t.pattern, 0, &mut out);
    for r in &t.requires {
        let _ = writeln!(out, "  require {} ;", term_to_string(r));
    }
    if !t.vars.is_empty() {
        let _ = writeln!(out, "  var {} ;", typed_names(&t.vars));
    }
    out.push_str("  body {\n");
    for s in &t.body {
        stmt_to_string(s, 2, &mut out);
    }
    out.push_str("  }\n}\n");
    out
}

/// Canonical text of a whole unit.
pub fn pretty_print(u: &SourceUnit) -> String {
    let mut out = String::new();
    for d in &u.indexsets {
        let kind = match &d.kind {
            IndexKindDecl::Lattice => "lattice".to_string(),
            IndexKindDecl::Atomic(n) => format!("atomic {n}"),
            IndexKindDecl::Directions => "directions".to_string(),
            IndexKindDecl::Product(fs) => set_to_string(&SetExpr::Product(fs.clone())),
        };
        let _ = writeln!(out, "indexset {} = {kind} ;", d.name);
    }
    for d in &u.decls {
        let line = match &d.ty {
            TypeExpr::Real => format!("scalar {} : real ;", d.name),
            TypeExpr::Complex => format!("scalar {} : complex ;", d.name),
            TypeExpr::Vector(Some(s)) => format!("vector {} : {} ;", d.name, set_to_string(s)),
            TypeExpr::Matrix(Some((r, c))) => {
                format!("matrix {} : {} -> {} ;", d.name, set_to_string(r), set_to_string(c))
            }
            // generic declarations have no surface syntax outside templates
            other => format!("# {} : {}", d.name, type_to_string(other)),
        };
        let _ = writeln!(out, "{line}");
    }
    for d in &u.defs {
        let _ = writeln!(out, "def {} = {} ;", d.name, term_to_string(&d.body));
    }
    for e in &u.equations {
        let vars = if e.vars.is_empty() {
            String::new()
        } else {
            format!(
                " [{}]",
                e.vars
                    .iter()
                    .map(|(n, s)| format!("{n} : {}", s.keyword()))
                    .collect::<Vec<_>>()
                    .join("; ")
            )
        };
        let conds = if e.conds.is_empty() {
            String::new()
        } else {
            format!(
                " if {}",
                e.conds.iter().map(term_to_string).collect::<Vec<_>>().join(", ")
            )
        };
        let _ = writeln!(
            out,
            "equation {}{vars} {} = {}{conds} ;",
            e.name,
            term_to_string(&e.lhs),
            term_to_string(&e.rhs)
        );
    }
    for t in &u.templates {
        out.push_str(&template_to_string(t));
    }
    for b in &u.bindings {
        if let Stmt::Assign { lhs, rhs, .. } = &b.pattern {
            let _ = writeln!(
                out,
                "bind {lhs} = {} => {}({}) ;",
                term_to_string(rhs),
                b.callee,
                b.args.join(", ")
            );
        }
    }
    if !u.goal.is_empty() {
        out.push_str("goal {\n");
        for s in &u.goal {
            stmt_to_string(s, 1, &mut out);
        }
        out.push_str("}\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::{parse, parse_term};

    #[test]
    fn tensor_of_identity_and_gamma5() {
        let t = Term::tensor(Term::identity(SetExpr::named("C")), Term::Gamma5);
        assert_eq!(term_to_string(&t), "I_C (x) gamma5");
    }

    #[test]
    fn right_nested_operators_get_parentheses() {
        let t = Term::sub(Term::sym("a"), Term::add(Term::sym("b"), Term::sym("c")));
        assert_eq!(term_to_string(&t), "a - (b + c)");
        assert_eq!(parse_term(&term_to_string(&t)).unwrap(), t);
    }

    #[test]
    fn negative_and_complex_literals_round_trip() {
        for t in [
            Term::real(-2.5),
            Term::Lit(Complex::new(0.0, 1.0)),
            Term::neg(Term::real(2.0)),
            Term::inverse(Term::mul(Term::sym("A"), Term::sym("B"))),
        ] {
            assert_eq!(parse_term(&term_to_string(&t)).unwrap(), t);
        }
    }

    #[test]
    fn template_match_line() {
        let src = "algorithm CGNR { input A : M, b : V ; output x : V ; match x = A^-1 * b ; body { x = b ; } }";
        let u = parse(src).unwrap();
        let text = pretty_print(&u);
        assert!(text.contains("match x = A^-1 * b ;"));
        assert_eq!(parse(&text).unwrap(), u);
    }
}
