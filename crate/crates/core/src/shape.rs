//! Index-set resolution, shape inference and the program type checker.

use std::collections::{HashMap, HashSet};
use std::fmt;

use thiserror::Error;

use crate::ir::*;

/// One factor of a flattened index set.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SetAtom {
    Lattice { name: String, parity: Option<Parity> },
    Atomic { name: String, extent: usize },
    Directions { name: String },
    /// Unification variable used for generic template signatures.
    Generic(String),
}

/// A resolved index set: the flattened product of its factors.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IndexSet(pub Vec<SetAtom>);

impl IndexSet {
    pub fn atom(a: SetAtom) -> IndexSet {
        IndexSet(vec![a])
    }

    pub fn product(parts: &[&IndexSet]) -> IndexSet {
        IndexSet(parts.iter().flat_map(|p| p.0.iter().cloned()).collect())
    }

    /// Number of elements; `dims` supplies the lattice extents.
    pub fn cardinality(&self, dims: [usize; 4]) -> usize {
        self.0
            .iter()
            .map(|a| match a {
                SetAtom::Lattice { parity: None, .. } => dims.iter().product(),
                SetAtom::Lattice { parity: Some(_), .. } => dims.iter().product::<usize>() / 2,
                SetAtom::Atomic { extent, .. } => *extent,
                SetAtom::Directions { .. } => 4,
                SetAtom::Generic(_) => 1,
            })
            .product()
    }

    /// The lattice factor, if any, and its position.
    pub fn lattice_factor(&self) -> Option<(usize, &SetAtom)> {
        self.0
            .iter()
            .enumerate()
            .find(|(_, a)| matches!(a, SetAtom::Lattice { .. }))
    }

    pub fn is_generic(&self) -> bool {
        self.0.iter().any(|a| matches!(a, SetAtom::Generic(_)))
    }

    pub fn to_expr(&self) -> SetExpr {
        let parts = self
            .0
            .iter()
            .map(|a| match a {
                SetAtom::Lattice { name, parity: Some(p) } => {
                    SetExpr::Parity(*p, Box::new(SetExpr::Named(name.clone())))
                }
                SetAtom::Lattice { name, .. }
                | SetAtom::Atomic { name, .. }
                | SetAtom::Directions { name } => SetExpr::Named(name.clone()),
                SetAtom::Generic(g) => SetExpr::Named(g.clone()),
            })
            .collect();
        SetExpr::product(parts)
    }
}

impl fmt::Display for IndexSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|a| match a {
                SetAtom::Lattice { name, parity: Some(p) } => format!("{}({})", p.keyword(), name),
                SetAtom::Lattice { name, .. }
                | SetAtom::Atomic { name, .. }
                | SetAtom::Directions { name } => name.clone(),
                SetAtom::Generic(g) => format!("'{g}"),
            })
            .collect();
        write!(f, "{}", parts.join(" (x) "))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Scalar,
    Vector(IndexSet),
    Matrix(IndexSet, IndexSet),
    /// Polymorphic zero; compatible with every shape.
    Zero,
    Pred,
}

impl Shape {
    pub fn is_scalar(&self) -> bool {
        matches!(self, Shape::Scalar)
    }

    pub fn is_matrix(&self) -> bool {
        matches!(self, Shape::Matrix(..))
    }

    pub fn is_vector(&self) -> bool {
        matches!(self, Shape::Vector(..))
    }

    /// Row/column counts of a concrete matrix shape.
    pub fn dims(&self, lattice: [usize; 4]) -> Option<(usize, usize)> {
        match self {
            Shape::Matrix(r, c) => Some((r.cardinality(lattice), c.cardinality(lattice))),
            Shape::Vector(v) => Some((v.cardinality(lattice), 1)),
            Shape::Scalar => Some((1, 1)),
            _ => None,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Scalar => write!(f, "scalar"),
            Shape::Vector(v) => write!(f, "vector({v})"),
            Shape::Matrix(r, c) => write!(f, "matrix({r} -> {c})"),
            Shape::Zero => write!(f, "zero"),
            Shape::Pred => write!(f, "predicate"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ShapeError {
    #[error("shape mismatch in {context}: {left} vs {right}")]
    ShapeMismatch {
        context: String,
        left: String,
        right: String,
    },
    #[error("unbound symbol `{0}`")]
    UnboundSymbol(String),
    #[error("unknown index set `{0}`")]
    UnknownIndexSet(String),
    #[error("duplicate name `{0}`")]
    DuplicateName(String),
    #[error("{0}")]
    Invalid(String),
}

fn mismatch(context: &str, left: impl fmt::Display, right: impl fmt::Display) -> ShapeError {
    ShapeError::ShapeMismatch {
        context: context.to_string(),
        left: left.to_string(),
        right: right.to_string(),
    }
}

/// Shapes of named things visible to the checker.
#[derive(Clone, Debug, Default)]
pub struct TypeEnv {
    pub sets: HashMap<String, IndexKindDecl>,
    pub symbols: HashMap<String, Shape>,
    /// Scalars declared `real`; used by conjugation and invertibility rules.
    pub real_scalars: HashSet<String>,
}

impl TypeEnv {
    pub fn resolve_set(&self, e: &SetExpr) -> Result<IndexSet, ShapeError> {
        self.resolve_set_with(e, &HashSet::new())
    }

    fn resolve_set_with(&self, e: &SetExpr, generics: &HashSet<String>) -> Result<IndexSet, ShapeError> {
        match e {
            SetExpr::Named(n) if generics.contains(n) => Ok(IndexSet::atom(SetAtom::Generic(n.clone()))),
            SetExpr::Named(n) => match self.sets.get(n) {
                Some(IndexKindDecl::Lattice) => Ok(IndexSet::atom(SetAtom::Lattice {
                    name: n.clone(),
                    parity: None,
                })),
                Some(IndexKindDecl::Atomic(k)) => Ok(IndexSet::atom(SetAtom::Atomic {
                    name: n.clone(),
                    extent: *k,
                })),
                Some(IndexKindDecl::Directions) => {
                    Ok(IndexSet::atom(SetAtom::Directions { name: n.clone() }))
                }
                Some(IndexKindDecl::Product(fs)) => {
                    let parts = fs
                        .iter()
                        .map(|f| self.resolve_set_with(f, generics))
                        .collect::<Result<Vec<_>, _>>()?;
                    Ok(IndexSet(parts.into_iter().flat_map(|p| p.0).collect()))
                }
                None => Err(ShapeError::UnknownIndexSet(n.clone())),
            },
            SetExpr::Parity(p, inner) => {
                let base = self.resolve_set_with(inner, generics)?;
                match base.0.as_slice() {
                    [SetAtom::Lattice { name, parity: None }] => Ok(IndexSet::atom(SetAtom::Lattice {
                        name: name.clone(),
                        parity: Some(*p),
                    })),
                    [SetAtom::Generic(g)] => Ok(IndexSet::atom(SetAtom::Generic(format!(
                        "{}({g})",
                        p.keyword()
                    )))),
                    _ => Err(ShapeError::Invalid(format!(
                        "parity subset of non-lattice set {base}"
                    ))),
                }
            }
            SetExpr::Product(fs) => {
                let parts = fs
                    .iter()
                    .map(|f| self.resolve_set_with(f, generics))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(IndexSet(parts.into_iter().flat_map(|p| p.0).collect()))
            }
        }
    }

    pub fn named_set(&self, name: &str) -> Result<IndexSet, ShapeError> {
        self.resolve_set(&SetExpr::named(name))
    }

    /// Shape of a declared type; generic parts are instantiated with fresh
    /// variables named after `owner`.
    pub fn shape_of_type(&self, ty: &TypeExpr, owner: &str) -> Result<Shape, ShapeError> {
        Ok(match ty {
            TypeExpr::Real | TypeExpr::Complex => Shape::Scalar,
            TypeExpr::Vector(Some(s)) => Shape::Vector(self.resolve_set(s)?),
            TypeExpr::Vector(None) => Shape::Vector(IndexSet::atom(SetAtom::Generic(format!("{owner}")))),
            TypeExpr::Matrix(Some((r, c))) => Shape::Matrix(self.resolve_set(r)?, self.resolve_set(c)?),
            TypeExpr::Matrix(None) => Shape::Matrix(
                IndexSet::atom(SetAtom::Generic(format!("{owner}.rows"))),
                IndexSet::atom(SetAtom::Generic(format!("{owner}.cols"))),
            ),
        })
    }
}

/// Shape inference with index-set unification and elaboration of
/// scalar products into `ScalarMul`.
pub struct Checker<'a> {
    pub env: &'a TypeEnv,
    subst: HashMap<String, IndexSet>,
    locals: HashMap<String, Shape>,
    set_generics: HashSet<String>,
    site_binders: Vec<(String, IndexSet)>,
    dir_binders: Vec<String>,
    /// Accept free direction variables and site binders; used when
    /// inspecting subterms cut out of a binder body.
    lenient: bool,
}

impl<'a> Checker<'a> {
    pub fn new(env: &'a TypeEnv) -> Checker<'a> {
        Checker {
            env,
            subst: HashMap::new(),
            locals: HashMap::new(),
            set_generics: HashSet::new(),
            site_binders: Vec::new(),
            dir_binders: Vec::new(),
            lenient: false,
        }
    }

    pub fn lenient(env: &'a TypeEnv) -> Checker<'a> {
        let mut ck = Checker::new(env);
        ck.lenient = true;
        ck
    }

    pub fn bind_local(&mut self, name: &str, shape: Shape) {
        self.locals.insert(name.to_string(), shape);
    }

    pub fn add_set_generic(&mut self, name: &str) {
        self.set_generics.insert(name.to_string());
    }

    pub fn add_dir_binder(&mut self, name: &str) {
        self.dir_binders.push(name.to_string());
    }

    fn resolve_set(&self, e: &SetExpr) -> Result<IndexSet, ShapeError> {
        self.env.resolve_set_with(e, &self.set_generics)
    }

    /// Applies the current substitution to a set.
    pub fn zonk_set(&self, s: &IndexSet) -> IndexSet {
        let mut out = Vec::new();
        for a in &s.0 {
            match a {
                SetAtom::Generic(g) => match self.subst.get(g) {
                    Some(bound) => out.extend(self.zonk_set(bound).0),
                    None => out.push(a.clone()),
                },
                other => out.push(other.clone()),
            }
        }
        IndexSet(out)
    }

    pub fn zonk(&self, s: &Shape) -> Shape {
        match s {
            Shape::Vector(v) => Shape::Vector(self.zonk_set(v)),
            Shape::Matrix(r, c) => Shape::Matrix(self.zonk_set(r), self.zonk_set(c)),
            other => other.clone(),
        }
    }

    fn bind(&mut self, g: &str, s: &IndexSet) -> bool {
        if s.0.iter().any(|a| matches!(a, SetAtom::Generic(x) if x == g)) {
            return s.0.len() == 1;
        }
        self.subst.insert(g.to_string(), s.clone());
        true
    }

    pub fn unify_sets(&mut self, a: &IndexSet, b: &IndexSet) -> bool {
        let a = self.zonk_set(a);
        let b = self.zonk_set(b);
        if a == b {
            return true;
        }
        if let [SetAtom::Generic(g)] = a.0.as_slice() {
            return self.bind(g, &b);
        }
        if let [SetAtom::Generic(g)] = b.0.as_slice() {
            return self.bind(g, &a);
        }
        if a.0.len() == 1 && b.0.len() == 1 {
            return false;
        }
        if a.0.len() == b.0.len() {
            return a
                .0
                .iter()
                .zip(b.0.iter())
                .all(|(x, y)| self.unify_sets(&IndexSet::atom(x.clone()), &IndexSet::atom(y.clone())));
        }
        // one generic factor absorbs the unmatched middle of the other side
        for (short, long) in [(&a, &b), (&b, &a)] {
            let gens: Vec<usize> = short
                .0
                .iter()
                .enumerate()
                .filter(|(_, x)| matches!(x, SetAtom::Generic(_)))
                .map(|(i, _)| i)
                .collect();
            if gens.len() == 1 && long.0.len() > short.0.len() {
                let i = gens[0];
                let tail = short.0.len() - i - 1;
                let mid_end = long.0.len() - tail;
                if short.0[..i] == long.0[..i] && short.0[i + 1..] == long.0[mid_end..] {
                    if let SetAtom::Generic(g) = &short.0[i] {
                        let mid = IndexSet(long.0[i..mid_end].to_vec());
                        return self.bind(g, &mid);
                    }
                }
            }
        }
        false
    }

    pub fn unify(&mut self, a: &Shape, b: &Shape, context: &str) -> Result<Shape, ShapeError> {
        let ok = match (a, b) {
            (Shape::Zero, other) | (other, Shape::Zero) => return Ok(self.zonk(other)),
            (Shape::Scalar, Shape::Scalar) | (Shape::Pred, Shape::Pred) => true,
            (Shape::Vector(x), Shape::Vector(y)) => self.unify_sets(x, y),
            (Shape::Matrix(r1, c1), Shape::Matrix(r2, c2)) => {
                self.unify_sets(r1, r2) && self.unify_sets(c1, c2)
            }
            _ => false,
        };
        if ok {
            Ok(self.zonk(a))
        } else {
            Err(mismatch(context, self.zonk(a), self.zonk(b)))
        }
    }

    fn lookup(&self, name: &str) -> Result<Shape, ShapeError> {
        if let Some(s) = self.locals.get(name) {
            return Ok(s.clone());
        }
        self.env
            .symbols
            .get(name)
            .cloned()
            .ok_or_else(|| ShapeError::UnboundSymbol(name.to_string()))
    }

    fn check_dir(&self, d: &DirRef) -> Result<(), ShapeError> {
        match d {
            DirRef::Axis(_) => Ok(()),
            DirRef::Var(v) if self.lenient || self.dir_binders.contains(v) => Ok(()),
            DirRef::Var(v) => Err(ShapeError::UnboundSymbol(v.clone())),
        }
    }

    fn lattice_of(&self, e: &SetExpr, what: &str) -> Result<IndexSet, ShapeError> {
        let s = self.resolve_set(e)?;
        match s.0.as_slice() {
            [SetAtom::Lattice { parity: None, .. }] | [SetAtom::Generic(_)] => Ok(s),
            _ => Err(ShapeError::Invalid(format!("{what} requires a lattice, got {s}"))),
        }
    }

    /// Infers the shape of `t`.
    pub fn infer(&mut self, t: &Term) -> Result<Shape, ShapeError> {
        self.elaborate(t).map(|(_, s)| s)
    }

    /// Infers the shape of `t` and returns it with scalar products made
    /// explicit as `ScalarMul`.
    pub fn elaborate(&mut self, t: &Term) -> Result<(Term, Shape), ShapeError> {
        let shape = match t {
            Term::Lit(_) | Term::ImagUnit => Shape::Scalar,
            Term::Zero => Shape::Zero,
            Term::Sym(n) => self.lookup(n)?,
            Term::Identity(e) => {
                let s = self.resolve_set(e)?;
                Shape::Matrix(s.clone(), s)
            }
            Term::Gamma(d) => {
                self.check_dir(d)?;
                let s = self.env.named_set("S")?;
                Shape::Matrix(s.clone(), s)
            }
            Term::Gamma5 => {
                let s = self.env.named_set("S")?;
                Shape::Matrix(s.clone(), s)
            }
            Term::Shift(e, d) => {
                self.check_dir(&d.dir)?;
                let l = self.lattice_of(e, "shift")?;
                Shape::Matrix(l.clone(), l)
            }
            Term::Link(d, site) => {
                self.check_dir(&d.dir)?;
                if !self.lenient && !self.site_binders.iter().any(|(b, _)| b == site) {
                    return Err(ShapeError::UnboundSymbol(site.clone()));
                }
                let c = self.env.named_set("C")?;
                Shape::Matrix(c.clone(), c)
            }
            Term::Projection(p, e) => {
                let l = self.lattice_of(e, "projection")?;
                let rows = match &l.0[0] {
                    SetAtom::Lattice { name, .. } => IndexSet::atom(SetAtom::Lattice {
                        name: name.clone(),
                        parity: Some(*p),
                    }),
                    SetAtom::Generic(g) => IndexSet::atom(SetAtom::Generic(format!("{}({g})", p.keyword()))),
                    _ => l.clone(),
                };
                Shape::Matrix(rows, l)
            }
            Term::Add(a, b) | Term::Sub(a, b) => {
                let (ea, sa) = self.elaborate(a)?;
                let (eb, sb) = self.elaborate(b)?;
                let s = self.unify(&sa, &sb, if matches!(t, Term::Add(..)) { "+" } else { "-" })?;
                let rebuilt = t.with_children(vec![ea, eb]);
                return Ok((rebuilt, s));
            }
            Term::Mul(a, b) => {
                let (ea, sa) = self.elaborate(a)?;
                let (eb, sb) = self.elaborate(b)?;
                return match (&sa, &sb) {
                    (Shape::Scalar, Shape::Scalar) => Ok((Term::mul(ea, eb), Shape::Scalar)),
                    (Shape::Scalar, other) => Ok((Term::smul(ea, eb), other.clone())),
                    (other, Shape::Scalar) => Ok((Term::smul(eb, ea), other.clone())),
                    (Shape::Zero, other) | (other, Shape::Zero) => {
                        let s = match other {
                            Shape::Matrix(..) | Shape::Vector(_) => Shape::Zero,
                            _ => Shape::Zero,
                        };
                        Ok((Term::mul(ea, eb), s))
                    }
                    (Shape::Matrix(r, c), Shape::Matrix(r2, c2)) => {
                        if !self.unify_sets(c, r2) {
                            return Err(mismatch("*", self.zonk(&sa), self.zonk(&sb)));
                        }
                        let s = Shape::Matrix(self.zonk_set(r), self.zonk_set(c2));
                        Ok((Term::mul(ea, eb), s))
                    }
                    (Shape::Matrix(r, c), Shape::Vector(v)) => {
                        if !self.unify_sets(c, v) {
                            return Err(mismatch("*", self.zonk(&sa), self.zonk(&sb)));
                        }
                        Ok((Term::mul(ea, eb), Shape::Vector(self.zonk_set(r))))
                    }
                    _ => Err(mismatch("*", &sa, &sb)),
                };
            }
            Term::ScalarMul(a, b) => {
                let (ea, sa) = self.elaborate(a)?;
                let (eb, sb) = self.elaborate(b)?;
                if !matches!(sa, Shape::Scalar | Shape::Zero) {
                    return Err(mismatch(".", &sa, "scalar"));
                }
                return Ok((Term::smul(ea, eb), sb));
            }
            Term::Div(a, b) => {
                let (ea, sa) = self.elaborate(a)?;
                let (eb, sb) = self.elaborate(b)?;
                if !matches!(sb, Shape::Scalar) {
                    return Err(mismatch("/", &sb, "scalar"));
                }
                return Ok((Term::div(ea, eb), sa));
            }
            Term::Tensor(a, b) => {
                let (ea, sa) = self.elaborate(a)?;
                let (eb, sb) = self.elaborate(b)?;
                let s = match (&sa, &sb) {
                    (Shape::Matrix(r1, c1), Shape::Matrix(r2, c2)) => {
                        Shape::Matrix(IndexSet::product(&[r1, r2]), IndexSet::product(&[c1, c2]))
                    }
                    (Shape::Vector(v1), Shape::Vector(v2)) => Shape::Vector(IndexSet::product(&[v1, v2])),
                    (Shape::Zero, _) | (_, Shape::Zero) => Shape::Zero,
                    _ => return Err(mismatch("(x)", &sa, &sb)),
                };
                return Ok((Term::tensor(ea, eb), s));
            }
            Term::DirectSum { binder, domain, body } => {
                let dom = self.resolve_set(domain)?;
                self.site_binders.push((binder.clone(), dom.clone()));
                let r = self.elaborate(body);
                self.site_binders.pop();
                let (eb, sb) = r?;
                let s = match &sb {
                    Shape::Matrix(r, c) => {
                        Shape::Matrix(IndexSet::product(&[&dom, r]), IndexSet::product(&[&dom, c]))
                    }
                    Shape::Scalar => Shape::Matrix(dom.clone(), dom.clone()),
                    Shape::Zero => Shape::Zero,
                    other => return Err(mismatch("dsum body", other, "matrix")),
                };
                return Ok((
                    Term::DirectSum {
                        binder: binder.clone(),
                        domain: domain.clone(),
                        body: Box::new(eb),
                    },
                    s,
                ));
            }
            Term::IndexedSum { binder, domain, body } => {
                let dom = self.resolve_set(domain)?;
                if !matches!(dom.0.as_slice(), [SetAtom::Directions { .. }] | [SetAtom::Generic(_)]) {
                    return Err(ShapeError::Invalid(format!(
                        "indexed sums range over a direction set, got {dom}"
                    )));
                }
                self.dir_binders.push(binder.clone());
                let r = self.elaborate(body);
                self.dir_binders.pop();
                let (eb, sb) = r?;
                return Ok((
                    Term::IndexedSum {
                        binder: binder.clone(),
                        domain: domain.clone(),
                        body: Box::new(eb),
                    },
                    sb,
                ));
            }
            Term::Transpose(a) | Term::Dagger(a) => {
                let (ea, sa) = self.elaborate(a)?;
                let s = match sa {
                    Shape::Matrix(r, c) => Shape::Matrix(c, r),
                    Shape::Scalar => Shape::Scalar,
                    Shape::Zero => Shape::Zero,
                    other => return Err(mismatch("transpose", other, "matrix")),
                };
                return Ok((t.with_children(vec![ea]), s));
            }
            Term::Inverse(a) => {
                let (ea, sa) = self.elaborate(a)?;
                let s = match &sa {
                    Shape::Matrix(r, c) => {
                        if !self.unify_sets(r, c) {
                            return Err(mismatch("inverse of non-square", r, c));
                        }
                        self.zonk(&sa)
                    }
                    Shape::Scalar => Shape::Scalar,
                    other => return Err(mismatch("inverse", other, "matrix")),
                };
                return Ok((Term::inverse(ea), s));
            }
            Term::Neg(a) => {
                let (ea, sa) = self.elaborate(a)?;
                return Ok((Term::neg(ea), sa));
            }
            Term::SubVector(v, e) => {
                let (ev, sv) = self.elaborate(v)?;
                if !matches!(sv, Shape::Vector(_) | Shape::Zero) {
                    return Err(mismatch("subvector", sv, "vector"));
                }
                let s = self.resolve_set(e)?;
                return Ok((Term::SubVector(Box::new(ev), e.clone()), Shape::Vector(s)));
            }
            Term::Inner(a, b) => {
                let (ea, sa) = self.elaborate(a)?;
                let (eb, sb) = self.elaborate(b)?;
                match (&sa, &sb) {
                    (Shape::Vector(_) | Shape::Zero, Shape::Vector(_) | Shape::Zero) => {
                        self.unify(&sa, &sb, "<|>")?;
                    }
                    _ => return Err(mismatch("<|>", &sa, &sb)),
                }
                return Ok((Term::inner(ea, eb), Shape::Scalar));
            }
            Term::Call(name, args) => {
                let mut out = Vec::new();
                for a in args {
                    out.push(self.elaborate(a)?);
                }
                if name == "isInvertible" {
                    match out.as_slice() {
                        [(_, Shape::Matrix(r, c))] => {
                            let (r, c) = (r.clone(), c.clone());
                            if !self.unify_sets(&r, &c) {
                                return Err(mismatch("isInvertible", r, c));
                            }
                        }
                        _ => {
                            return Err(ShapeError::Invalid(
                                "isInvertible takes one square matrix".into(),
                            ))
                        }
                    }
                }
                return Ok((
                    Term::Call(name.clone(), out.into_iter().map(|(e, _)| e).collect()),
                    Shape::Pred,
                ));
            }
        };
        Ok((t.clone(), shape))
    }
}

/// Infers the shape of a term under `env`.
pub fn infer_shape(t: &Term, env: &TypeEnv) -> Result<Shape, ShapeError> {
    let mut ck = Checker::new(env);
    let s = ck.infer(t)?;
    Ok(ck.zonk(&s))
}

/// Elaborates `t` (explicit scalar products) without reporting its shape.
pub fn elaborate_term(t: &Term, env: &TypeEnv) -> Result<Term, ShapeError> {
    Checker::new(env).elaborate(t).map(|(t, _)| t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub span: Span,
    pub context: String,
    pub error: ShapeError,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: in {}: {}", self.span, self.context, self.error)
    }
}

/// A checked program: the elaborated unit plus its type environment.
#[derive(Clone, Debug)]
pub struct TypedProgram {
    pub unit: SourceUnit,
    pub env: TypeEnv,
}

fn dup_check<'a>(
    names: impl Iterator<Item = (&'a str, Span)>,
    kind: &str,
    diags: &mut Vec<Diagnostic>,
) {
    let mut seen = HashSet::new();
    for (n, span) in names {
        if !seen.insert(n.to_string()) {
            diags.push(Diagnostic {
                span,
                context: kind.to_string(),
                error: ShapeError::DuplicateName(n.to_string()),
            });
        }
    }
}

fn check_stmts(
    ck: &mut Checker,
    stmts: &[Stmt],
    context: &str,
    diags: &mut Vec<Diagnostic>,
) -> Vec<Stmt> {
    let mut out = Vec::new();
    for s in stmts {
        match s {
            Stmt::Assign { lhs, rhs, span } => {
                let res = (|| {
                    let ls = ck.lookup(lhs)?;
                    let (erhs, rs) = ck.elaborate(rhs)?;
                    ck.unify(&ls, &rs, &format!("assignment to {lhs}"))?;
                    Ok::<_, ShapeError>(erhs)
                })();
                match res {
                    Ok(erhs) => out.push(Stmt::Assign {
                        lhs: lhs.clone(),
                        rhs: erhs,
                        span: *span,
                    }),
                    Err(error) => {
                        diags.push(Diagnostic {
                            span: *span,
                            context: context.to_string(),
                            error,
                        });
                        out.push(s.clone());
                    }
                }
            }
            Stmt::While { cond, body, span } => {
                let mut side = |t: &Term| match ck.elaborate(t) {
                    Ok((e, Shape::Scalar)) => e,
                    Ok((_, other)) => {
                        diags.push(Diagnostic {
                            span: *span,
                            context: context.to_string(),
                            error: mismatch("while condition", other, "scalar"),
                        });
                        t.clone()
                    }
                    Err(error) => {
                        diags.push(Diagnostic {
                            span: *span,
                            context: context.to_string(),
                            error,
                        });
                        t.clone()
                    }
                };
                let lhs = side(&cond.lhs);
                let rhs = side(&cond.rhs);
                let body = check_stmts(ck, body, context, diags);
                out.push(Stmt::While {
                    cond: Cond { lhs, op: cond.op, rhs },
                    body,
                    span: *span,
                });
            }
        }
    }
    out
}

/// Builds the environment from the declarations of `unit`.
pub fn build_env(unit: &SourceUnit, diags: &mut Vec<Diagnostic>) -> TypeEnv {
    let mut env = TypeEnv::default();
    dup_check(
        unit.indexsets.iter().map(|d| (d.name.as_str(), d.span)),
        "index set declarations",
        diags,
    );
    for d in &unit.indexsets {
        env.sets.insert(d.name.clone(), d.kind.clone());
    }
    dup_check(
        unit.decls.iter().map(|d| (d.name.as_str(), d.span)),
        "declarations",
        diags,
    );
    // A definition may carry a matching declaration, but only one body.
    dup_check(
        unit.defs.iter().map(|d| (d.name.as_str(), d.span)),
        "definitions",
        diags,
    );
    dup_check(
        unit.templates.iter().map(|t| (t.name.as_str(), t.span)),
        "algorithms",
        diags,
    );
    dup_check(
        unit.equations.iter().map(|e| (e.name.as_str(), e.span)),
        "equations",
        diags,
    );
    for d in &unit.decls {
        match env.shape_of_type(&d.ty, &d.name) {
            Ok(s) => {
                if d.ty == TypeExpr::Real {
                    env.real_scalars.insert(d.name.clone());
                }
                env.symbols.insert(d.name.clone(), s);
            }
            Err(error) => diags.push(Diagnostic {
                span: d.span,
                context: format!("declaration of {}", d.name),
                error,
            }),
        }
    }
    env
}

/// Type-checks every definition, equation, template and the goal,
/// accumulating all diagnostics.
pub fn typecheck_program(unit: &SourceUnit) -> Result<TypedProgram, Vec<Diagnostic>> {
    let mut diags = Vec::new();
    let mut env = build_env(unit, &mut diags);
    let mut out = unit.clone();

    for (i, d) in unit.defs.iter().enumerate() {
        let mut ck = Checker::new(&env);
        match ck.elaborate(&d.body) {
            Ok((body, shape)) => {
                let shape = ck.zonk(&shape);
                if let Some(declared) = env.symbols.get(&d.name).cloned() {
                    if let Err(error) = ck.unify(&declared, &shape, &format!("definition of {}", d.name)) {
                        diags.push(Diagnostic {
                            span: d.span,
                            context: format!("definition of {}", d.name),
                            error,
                        });
                    }
                } else {
                    env.symbols.insert(d.name.clone(), shape);
                }
                out.defs[i].body = body;
            }
            Err(error) => diags.push(Diagnostic {
                span: d.span,
                context: format!("definition of {}", d.name),
                error,
            }),
        }
    }

    for (i, eq) in unit.equations.iter().enumerate() {
        match check_equation(eq, &env) {
            Ok((lhs, rhs)) => {
                out.equations[i].lhs = lhs;
                out.equations[i].rhs = rhs;
            }
            Err(error) => diags.push(Diagnostic {
                span: eq.span,
                context: format!("equation {}", eq.name),
                error,
            }),
        }
    }

    for (i, tpl) in unit.templates.iter().enumerate() {
        let ctx = format!("algorithm {}", tpl.name);
        let mut ck = Checker::new(&env);
        for tn in tpl.inputs.iter().chain(&tpl.outputs).chain(&tpl.vars) {
            match env.shape_of_type(&tn.ty, &format!("{}.{}", tpl.name, tn.name)) {
                Ok(s) => ck.bind_local(&tn.name, s),
                Err(error) => diags.push(Diagnostic {
                    span: tpl.span,
                    context: ctx.clone(),
                    error,
                }),
            }
        }
        let pattern = check_stmts(&mut ck, std::slice::from_ref(&tpl.pattern), &ctx, &mut diags);
        let mut reqs = Vec::new();
        for r in &tpl.requires {
            match ck.elaborate(r) {
                Ok((e, Shape::Pred)) => reqs.push(e),
                Ok((_, other)) => diags.push(Diagnostic {
                    span: tpl.span,
                    context: ctx.clone(),
                    error: mismatch("require", other, "predicate"),
                }),
                Err(error) => diags.push(Diagnostic {
                    span: tpl.span,
                    context: ctx.clone(),
                    error,
                }),
            }
        }
        let body = check_stmts(&mut ck, &tpl.body, &ctx, &mut diags);
        let has_matrix_var = tpl.inputs.iter().any(|t| matches!(t.ty, TypeExpr::Matrix(_)));
        if !has_matrix_var {
            diags.push(Diagnostic {
                span: tpl.span,
                context: ctx.clone(),
                error: ShapeError::Invalid("match pattern binds no matrix variable".into()),
            });
        }
        if let Some(p) = pattern.into_iter().next() {
            out.templates[i].pattern = p;
        }
        if reqs.len() == tpl.requires.len() {
            out.templates[i].requires = reqs;
        }
        out.templates[i].body = body;
    }

    let mut ck = Checker::new(&env);
    out.goal = check_stmts(&mut ck, &unit.goal, "goal", &mut diags);

    if diags.is_empty() {
        Ok(TypedProgram { unit: out, env })
    } else {
        Err(diags)
    }
}

/// Checks that both sides of an equation have unifiable shapes under
/// generic bindings of its variables. Returns the elaborated sides.
pub fn check_equation(eq: &Equation, env: &TypeEnv) -> Result<(Term, Term), ShapeError> {
    let mut ck = Checker::new(env);
    for (v, sort) in &eq.vars {
        match sort {
            Sort::Matrix => ck.bind_local(
                v,
                Shape::Matrix(
                    IndexSet::atom(SetAtom::Generic(format!("{v}.rows"))),
                    IndexSet::atom(SetAtom::Generic(format!("{v}.cols"))),
                ),
            ),
            Sort::Vector => ck.bind_local(v, Shape::Vector(IndexSet::atom(SetAtom::Generic(v.clone())))),
            Sort::Scalar => ck.bind_local(v, Shape::Scalar),
            Sort::Term => ck.bind_local(v, Shape::Zero),
            Sort::Set => ck.add_set_generic(v),
            Sort::Dir => ck.add_dir_binder(v),
        }
    }
    // Site binders appearing free (e.g. `U(d)[s]` in a rule) are bound
    // implicitly over the lattice.
    if let Some((name, _)) = env.sets.iter().find(|(_, k)| matches!(k, IndexKindDecl::Lattice)) {
        let lat = IndexSet::atom(SetAtom::Lattice {
            name: name.clone(),
            parity: None,
        });
        for s in free_site_vars(&eq.lhs).into_iter().chain(free_site_vars(&eq.rhs)) {
            ck.site_binders.push((s, lat.clone()));
        }
    }
    let (l, ls) = ck.elaborate(&eq.lhs)?;
    let (r, rs) = ck.elaborate(&eq.rhs)?;
    ck.unify(&ls, &rs, &format!("equation {}", eq.name))?;
    Ok((l, r))
}

fn free_site_vars(t: &Term) -> Vec<String> {
    fn go(t: &Term, bound: &mut Vec<String>, out: &mut Vec<String>) {
        match t {
            Term::Link(_, s) if !bound.contains(s) && !out.contains(s) => out.push(s.clone()),
            Term::DirectSum { binder, body, .. } => {
                bound.push(binder.clone());
                go(body, bound, out);
                bound.pop();
            }
            other => {
                for c in other.children() {
                    go(c, bound, out);
                }
            }
        }
    }
    let mut out = Vec::new();
    go(t, &mut Vec::new(), &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lqcd_env() -> TypeEnv {
        let mut env = TypeEnv::default();
        env.sets.insert("L".into(), IndexKindDecl::Lattice);
        env.sets.insert("C".into(), IndexKindDecl::Atomic(3));
        env.sets.insert("S".into(), IndexKindDecl::Atomic(4));
        env.sets.insert("D".into(), IndexKindDecl::Directions);
        env
    }

    fn lcs() -> SetExpr {
        SetExpr::product(vec![SetExpr::named("L"), SetExpr::named("C"), SetExpr::named("S")])
    }

    #[test]
    fn identity_over_full_site_space() {
        let env = lqcd_env();
        let s = infer_shape(&Term::identity(lcs()), &env).unwrap();
        assert_eq!(s.dims([2, 2, 2, 2]), Some((192, 192)));
    }

    #[test]
    fn color_tensor_gamma5_is_12() {
        let env = lqcd_env();
        let t = Term::tensor(Term::identity(SetExpr::named("C")), Term::Gamma5);
        let s = infer_shape(&t, &env).unwrap();
        assert_eq!(s.dims([2, 2, 2, 2]), Some((12, 12)));
        match s {
            Shape::Matrix(r, _) => assert_eq!(r.to_string(), "C (x) S"),
            _ => panic!(),
        }
    }

    #[test]
    fn mismatched_product_is_rejected() {
        let env = lqcd_env();
        let t = Term::mul(Term::identity(SetExpr::named("C")), Term::identity(SetExpr::named("S")));
        assert!(matches!(infer_shape(&t, &env), Err(ShapeError::ShapeMismatch { .. })));
    }

    #[test]
    fn unbound_symbol_is_reported() {
        let env = lqcd_env();
        assert_eq!(
            infer_shape(&Term::sym("q"), &env),
            Err(ShapeError::UnboundSymbol("q".into()))
        );
    }

    #[test]
    fn direct_sum_of_links_spans_lattice_and_color() {
        let env = lqcd_env();
        let t = Term::dsum("s", SetExpr::named("L"), Term::Link(SignedDir::axis(0, false), "s".into()));
        let s = infer_shape(&t, &env).unwrap();
        assert_eq!(s.dims([2, 2, 2, 2]), Some((48, 48)));
    }

    #[test]
    fn cardinality_of_nested_products_matches() {
        let env = lqcd_env();
        let a = env
            .resolve_set(&SetExpr::Product(vec![
                SetExpr::product(vec![SetExpr::named("L"), SetExpr::named("C")]),
                SetExpr::named("S"),
            ]))
            .unwrap();
        let b = env.resolve_set(&lcs()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cardinality([4, 2, 2, 2]), 32 * 12);
    }

    #[test]
    fn generic_sets_unify_with_a_middle_run() {
        let env = lqcd_env();
        let mut ck = Checker::new(&env);
        let lcs = env.resolve_set(&lcs()).unwrap();
        let pattern = IndexSet(vec![SetAtom::Generic("g".into()), lcs.0[2].clone()]);
        assert!(ck.unify_sets(&pattern, &lcs));
        assert_eq!(ck.zonk_set(&IndexSet::atom(SetAtom::Generic("g".into()))).0.len(), 2);
    }
}
