//! Term IR shared by every stage of the pipeline.
//!
//! Matrices and vectors are never addressed element-wise: they are built
//! from predefined atoms (identity, shifts, projectors, gamma matrices,
//! gauge links) combined with algebraic operators, tensor products and
//! indexed direct sums.

use std::fmt;

use num_complex::Complex64;

pub type Complex = Complex64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Parity {
    Even,
    Odd,
}

impl Parity {
    pub fn flip(self) -> Parity {
        match self {
            Parity::Even => Parity::Odd,
            Parity::Odd => Parity::Even,
        }
    }

    pub fn of_bool(odd: bool) -> Parity {
        if odd {
            Parity::Odd
        } else {
            Parity::Even
        }
    }

    pub fn keyword(self) -> &'static str {
        match self {
            Parity::Even => "even",
            Parity::Odd => "odd",
        }
    }
}

/// Index-set expression as it appears inside a term. Names resolve through
/// the declarations of the source unit.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SetExpr {
    Named(String),
    Parity(Parity, Box<SetExpr>),
    /// Flattened product with at least two factors.
    Product(Vec<SetExpr>),
}

impl SetExpr {
    pub fn named(name: &str) -> SetExpr {
        SetExpr::Named(name.to_string())
    }

    /// Builds a product, flattening nested products and collapsing
    /// singletons.
    pub fn product(factors: Vec<SetExpr>) -> SetExpr {
        let mut flat = Vec::new();
        for f in factors {
            match f {
                SetExpr::Product(inner) => flat.extend(inner),
                other => flat.push(other),
            }
        }
        if flat.len() == 1 {
            flat.pop().unwrap()
        } else {
            SetExpr::Product(flat)
        }
    }

    pub fn factors(&self) -> Vec<SetExpr> {
        match self {
            SetExpr::Product(fs) => fs.clone(),
            other => vec![other.clone()],
        }
    }
}

/// The four lattice axes, x fastest in the site linearization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Axis(pub u8);

impl Axis {
    pub const ALL: [Axis; 4] = [Axis(0), Axis(1), Axis(2), Axis(3)];

    pub fn name(self) -> &'static str {
        ["dx", "dy", "dz", "dt"][self.0 as usize]
    }

    pub fn from_name(name: &str) -> Option<Axis> {
        match name {
            "dx" => Some(Axis(0)),
            "dy" => Some(Axis(1)),
            "dz" => Some(Axis(2)),
            "dt" => Some(Axis(3)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DirRef {
    Axis(Axis),
    Var(String),
}

/// A lattice direction with orientation.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SignedDir {
    pub neg: bool,
    pub dir: DirRef,
}

impl SignedDir {
    pub fn pos(dir: DirRef) -> SignedDir {
        SignedDir { neg: false, dir }
    }

    pub fn axis(axis: u8, neg: bool) -> SignedDir {
        SignedDir {
            neg,
            dir: DirRef::Axis(Axis(axis)),
        }
    }

    pub fn var(name: &str) -> SignedDir {
        SignedDir::pos(DirRef::Var(name.to_string()))
    }

    pub fn negate(&self) -> SignedDir {
        SignedDir {
            neg: !self.neg,
            dir: self.dir.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Term {
    /// Complex literal.
    Lit(Complex),
    /// Named symbol: scalar parameter, vector, matrix or definition.
    Sym(String),
    ImagUnit,
    /// Shape-polymorphic zero (scalar, vector or matrix).
    Zero,
    Identity(SetExpr),
    Gamma(DirRef),
    Gamma5,
    Shift(SetExpr, SignedDir),
    /// Gauge link `U(d)[s]`, `s` being a site binder.
    Link(SignedDir, String),
    Projection(Parity, SetExpr),
    Add(Box<Term>, Box<Term>),
    Sub(Box<Term>, Box<Term>),
    Mul(Box<Term>, Box<Term>),
    /// Scalar times anything; the left operand is always scalar.
    ScalarMul(Box<Term>, Box<Term>),
    Div(Box<Term>, Box<Term>),
    Tensor(Box<Term>, Box<Term>),
    DirectSum {
        binder: String,
        domain: SetExpr,
        body: Box<Term>,
    },
    IndexedSum {
        binder: String,
        domain: SetExpr,
        body: Box<Term>,
    },
    Transpose(Box<Term>),
    Dagger(Box<Term>),
    Inverse(Box<Term>),
    Neg(Box<Term>),
    SubVector(Box<Term>, SetExpr),
    Inner(Box<Term>, Box<Term>),
    /// Predicate or guard application, e.g. `isInvertible(M)`.
    Call(String, Vec<Term>),
}

macro_rules! binary_ctor {
    ($fn:ident, $variant:ident) => {
        pub fn $fn(a: Term, b: Term) -> Term {
            Term::$variant(Box::new(a), Box::new(b))
        }
    };
}

macro_rules! unary_ctor {
    ($fn:ident, $variant:ident) => {
        pub fn $fn(a: Term) -> Term {
            Term::$variant(Box::new(a))
        }
    };
}

impl Term {
    binary_ctor!(add, Add);
    binary_ctor!(sub, Sub);
    binary_ctor!(mul, Mul);
    binary_ctor!(smul, ScalarMul);
    binary_ctor!(div, Div);
    binary_ctor!(tensor, Tensor);
    binary_ctor!(inner, Inner);
    unary_ctor!(transpose, Transpose);
    unary_ctor!(dagger, Dagger);
    unary_ctor!(inverse, Inverse);
    unary_ctor!(neg, Neg);

    pub fn sym(name: &str) -> Term {
        Term::Sym(name.to_string())
    }

    pub fn real(v: f64) -> Term {
        Term::Lit(Complex::new(v, 0.0))
    }

    pub fn identity(set: SetExpr) -> Term {
        Term::Identity(set)
    }

    pub fn dsum(binder: &str, domain: SetExpr, body: Term) -> Term {
        Term::DirectSum {
            binder: binder.to_string(),
            domain,
            body: Box::new(body),
        }
    }

    pub fn isum(binder: &str, domain: SetExpr, body: Term) -> Term {
        Term::IndexedSum {
            binder: binder.to_string(),
            domain,
            body: Box::new(body),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Term::Zero => true,
            Term::Lit(c) => *c == Complex::new(0.0, 0.0),
            _ => false,
        }
    }

    /// Direct children in evaluation order.
    pub fn children(&self) -> Vec<&Term> {
        match self {
            Term::Add(a, b)
            | Term::Sub(a, b)
            | Term::Mul(a, b)
            | Term::ScalarMul(a, b)
            | Term::Div(a, b)
            | Term::Tensor(a, b)
            | Term::Inner(a, b) => vec![a, b],
            Term::Transpose(a)
            | Term::Dagger(a)
            | Term::Inverse(a)
            | Term::Neg(a)
            | Term::SubVector(a, _) => vec![a],
            Term::DirectSum { body, .. } | Term::IndexedSum { body, .. } => vec![body],
            Term::Call(_, args) => args.iter().collect(),
            _ => Vec::new(),
        }
    }

    /// Rebuilds this node with new children (same arity as `children`).
    pub fn with_children(&self, mut kids: Vec<Term>) -> Term {
        let mut next = || Box::new(kids.remove(0));
        match self {
            Term::Add(..) => Term::Add(next(), next()),
            Term::Sub(..) => Term::Sub(next(), next()),
            Term::Mul(..) => Term::Mul(next(), next()),
            Term::ScalarMul(..) => Term::ScalarMul(next(), next()),
            Term::Div(..) => Term::Div(next(), next()),
            Term::Tensor(..) => Term::Tensor(next(), next()),
            Term::Inner(..) => Term::Inner(next(), next()),
            Term::Transpose(_) => Term::Transpose(next()),
            Term::Dagger(_) => Term::Dagger(next()),
            Term::Inverse(_) => Term::Inverse(next()),
            Term::Neg(_) => Term::Neg(next()),
            Term::SubVector(_, s) => Term::SubVector(next(), s.clone()),
            Term::DirectSum { binder, domain, .. } => Term::DirectSum {
                binder: binder.clone(),
                domain: domain.clone(),
                body: next(),
            },
            Term::IndexedSum { binder, domain, .. } => Term::IndexedSum {
                binder: binder.clone(),
                domain: domain.clone(),
                body: next(),
            },
            Term::Call(name, _) => Term::Call(name.clone(), kids),
            leaf => leaf.clone(),
        }
    }

    /// Bottom-up rewrite of every node.
    pub fn map_bottom_up(&self, f: &mut dyn FnMut(Term) -> Term) -> Term {
        let kids: Vec<Term> = self
            .children()
            .into_iter()
            .map(|c| c.map_bottom_up(f))
            .collect();
        let rebuilt = if kids.is_empty() {
            self.clone()
        } else {
            self.with_children(kids)
        };
        f(rebuilt)
    }

    pub fn any(&self, pred: &dyn Fn(&Term) -> bool) -> bool {
        pred(self) || self.children().into_iter().any(|c| c.any(pred))
    }

    pub fn contains_inverse(&self) -> bool {
        self.any(&|t| matches!(t, Term::Inverse(_)))
    }

    /// Symbols referenced by this term (not binders, not index sets).
    pub fn symbols(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_symbols(&mut out);
        out
    }

    fn collect_symbols(&self, out: &mut Vec<String>) {
        if let Term::Sym(s) = self {
            if !out.contains(s) {
                out.push(s.clone());
            }
        }
        for c in self.children() {
            c.collect_symbols(out);
        }
    }

    /// Replaces free occurrences of symbol `name` with `value`.
    pub fn subst_sym(&self, name: &str, value: &Term) -> Term {
        self.map_bottom_up(&mut |t| match t {
            Term::Sym(ref s) if s == name => value.clone(),
            other => other,
        })
    }

    /// Substitutes a direction binder by a concrete signed direction.
    pub fn subst_dir(&self, var: &str, value: &SignedDir) -> Term {
        let fix = |d: &SignedDir| -> SignedDir {
            match &d.dir {
                DirRef::Var(v) if v == var => {
                    if d.neg {
                        value.negate()
                    } else {
                        value.clone()
                    }
                }
                _ => d.clone(),
            }
        };
        self.map_bottom_up(&mut |t| match t {
            Term::Shift(set, d) => Term::Shift(set, fix(&d)),
            Term::Link(d, s) => Term::Link(fix(&d), s),
            Term::Gamma(DirRef::Var(ref v)) if v == var => Term::Gamma(value.dir.clone()),
            other => other,
        })
    }

    /// Number of nodes, used by trace output and fuel heuristics.
    pub fn size(&self) -> usize {
        1 + self.children().iter().map(|c| c.size()).sum::<usize>()
    }
}

/// Source position (1-based). Positions never participate in equality so
/// that re-parsed pretty-printed units compare equal.
#[derive(Clone, Copy, Debug, Default)]
pub struct Span {
    pub line: usize,
    pub col: usize,
}

impl PartialEq for Span {
    fn eq(&self, _other: &Span) -> bool {
        true
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmpOp {
    Gt,
    Lt,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cond {
    pub lhs: Term,
    pub op: CmpOp,
    pub rhs: Term,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Stmt {
    Assign { lhs: String, rhs: Term, span: Span },
    While { cond: Cond, body: Vec<Stmt>, span: Span },
}

impl Stmt {
    pub fn assign(lhs: &str, rhs: Term) -> Stmt {
        Stmt::Assign {
            lhs: lhs.to_string(),
            rhs,
            span: Span::default(),
        }
    }

    pub fn span(&self) -> Span {
        match self {
            Stmt::Assign { span, .. } | Stmt::While { span, .. } => *span,
        }
    }

    pub fn contains_inverse(&self) -> bool {
        match self {
            Stmt::Assign { rhs, .. } => rhs.contains_inverse(),
            Stmt::While { cond, body, .. } => {
                cond.lhs.contains_inverse()
                    || cond.rhs.contains_inverse()
                    || body.iter().any(Stmt::contains_inverse)
            }
        }
    }

    /// Applies `f` to every term of the statement.
    pub fn map_terms(&self, f: &mut dyn FnMut(&Term) -> Term) -> Stmt {
        match self {
            Stmt::Assign { lhs, rhs, span } => Stmt::Assign {
                lhs: lhs.clone(),
                rhs: f(rhs),
                span: *span,
            },
            Stmt::While { cond, body, span } => Stmt::While {
                cond: Cond {
                    lhs: f(&cond.lhs),
                    op: cond.op,
                    rhs: f(&cond.rhs),
                },
                body: body.iter().map(|s| s.map_terms(f)).collect(),
                span: *span,
            },
        }
    }

    /// Renames assigned and referenced symbols.
    pub fn rename(&self, map: &dyn Fn(&str) -> Option<String>) -> Stmt {
        let renamed = self.map_terms(&mut |t| {
            t.map_bottom_up(&mut |n| match n {
                Term::Sym(s) => Term::Sym(map(&s).unwrap_or(s)),
                other => other,
            })
        });
        match renamed {
            Stmt::Assign { lhs, rhs, span } => Stmt::Assign {
                lhs: map(&lhs).unwrap_or(lhs),
                rhs,
                span,
            },
            Stmt::While { cond, body, span } => Stmt::While {
                cond,
                body: body.iter().map(|s| s.rename(map)).collect(),
                span,
            },
        }
    }
}

/// Type annotation in declarations and template signatures. `None` shapes
/// are generic and unified during checking.
#[derive(Clone, Debug, PartialEq)]
pub enum TypeExpr {
    Real,
    Complex,
    Vector(Option<SetExpr>),
    Matrix(Option<(SetExpr, SetExpr)>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum IndexKindDecl {
    Lattice,
    Atomic(usize),
    Directions,
    Product(Vec<SetExpr>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexSetDecl {
    pub name: String,
    pub kind: IndexKindDecl,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decl {
    pub name: String,
    pub ty: TypeExpr,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Def {
    pub name: String,
    pub body: Term,
    pub span: Span,
}

/// Sort of a rule variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sort {
    Matrix,
    Vector,
    Scalar,
    Term,
    Set,
    Dir,
}

impl Sort {
    pub fn keyword(self) -> &'static str {
        match self {
            Sort::Matrix => "matrix",
            Sort::Vector => "vector",
            Sort::Scalar => "scalar",
            Sort::Term => "term",
            Sort::Set => "set",
            Sort::Dir => "dir",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Equation {
    pub name: String,
    pub vars: Vec<(String, Sort)>,
    pub lhs: Term,
    pub rhs: Term,
    pub conds: Vec<Term>,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TypedName {
    pub name: String,
    pub ty: TypeExpr,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlgorithmTemplate {
    pub name: String,
    pub inputs: Vec<TypedName>,
    pub outputs: Vec<TypedName>,
    /// The `match` clause: an assignment pattern.
    pub pattern: Stmt,
    pub requires: Vec<Term>,
    pub vars: Vec<TypedName>,
    pub body: Vec<Stmt>,
    pub span: Span,
}

impl AlgorithmTemplate {
    pub fn pattern_vars(&self) -> Vec<String> {
        self.inputs
            .iter()
            .chain(self.outputs.iter())
            .map(|t| t.name.clone())
            .collect()
    }
}

/// `bind C = A * B => dgemm(A, B, C) ;`
#[derive(Clone, Debug, PartialEq)]
pub struct BindingDecl {
    pub pattern: Stmt,
    pub callee: String,
    pub args: Vec<String>,
    pub span: Span,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SourceUnit {
    pub indexsets: Vec<IndexSetDecl>,
    pub decls: Vec<Decl>,
    pub defs: Vec<Def>,
    pub equations: Vec<Equation>,
    pub templates: Vec<AlgorithmTemplate>,
    pub bindings: Vec<BindingDecl>,
    pub goal: Vec<Stmt>,
}

impl SourceUnit {
    /// Concatenates units; later units may add to but not redefine names
    /// (duplicates are reported by the checker).
    pub fn merge(units: impl IntoIterator<Item = SourceUnit>) -> SourceUnit {
        let mut out = SourceUnit::default();
        for u in units {
            out.indexsets.extend(u.indexsets);
            out.decls.extend(u.decls);
            out.defs.extend(u.defs);
            out.equations.extend(u.equations);
            out.templates.extend(u.templates);
            out.bindings.extend(u.bindings);
            out.goal.extend(u.goal);
        }
        out
    }

    pub fn template(&self, name: &str) -> Option<&AlgorithmTemplate> {
        self.templates.iter().find(|t| t.name == name)
    }

    pub fn def(&self, name: &str) -> Option<&Def> {
        self.defs.iter().find(|d| d.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_flattening_is_associative() {
        let a = SetExpr::named("A");
        let b = SetExpr::named("B");
        let c = SetExpr::named("C");
        let left = SetExpr::product(vec![SetExpr::product(vec![a.clone(), b.clone()]), c.clone()]);
        let right = SetExpr::product(vec![a, SetExpr::product(vec![b, c])]);
        assert_eq!(left, right);
        assert_eq!(left.factors().len(), 3);
    }

    #[test]
    fn direction_substitution_respects_sign() {
        let t = Term::Shift(SetExpr::named("L"), SignedDir::var("d").negate());
        let out = t.subst_dir("d", &SignedDir::axis(2, true));
        assert_eq!(out, Term::Shift(SetExpr::named("L"), SignedDir::axis(2, false)));
    }
}
