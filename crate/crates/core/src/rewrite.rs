//! Guarded term rewriting. Matching is modulo associativity of `*` and
//! `(x)` and modulo associativity-commutativity of `+`; normalization is
//! leftmost-innermost with a step budget.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use thiserror::Error;

use crate::ir::*;
use crate::printer::term_to_string;
use crate::shape::{Checker, Shape, TypeEnv, TypedProgram};

pub const DEFAULT_FUEL: usize = 100_000;

/// Guards understood by the engine.
pub const GUARDS: &[&str] = &[
    "conform",
    "lattice_projector",
    "parity_vanishes",
    "real",
    "identity_like",
    "identity_gamma5",
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewriteError {
    #[error("rewriting did not terminate within {0} steps")]
    FuelExhausted(usize),
    #[error("rule {rule}: {msg}")]
    BadRule { rule: String, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Innermost,
    Outermost,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rule {
    pub name: String,
    pub vars: HashMap<String, Sort>,
    pub lhs: Term,
    pub rhs: Term,
    pub conds: Vec<Term>,
    /// Definition unfolding; its normal form is cached.
    pub is_def: bool,
}

impl Rule {
    pub fn from_equation(eq: &Equation) -> Result<Rule, RewriteError> {
        let bad = |msg: String| RewriteError::BadRule {
            rule: eq.name.clone(),
            msg,
        };
        let vars: HashMap<String, Sort> = eq.vars.iter().cloned().collect();
        let mut lhs_vars = HashSet::new();
        pattern_vars(&eq.lhs, &vars, &mut lhs_vars);
        let mut rhs_vars = HashSet::new();
        pattern_vars(&eq.rhs, &vars, &mut rhs_vars);
        for c in &eq.conds {
            pattern_vars(c, &vars, &mut rhs_vars);
            match c {
                Term::Call(g, _) if GUARDS.contains(&g.as_str()) => {}
                other => return Err(bad(format!("unknown guard `{}`", term_to_string(other)))),
            }
        }
        if let Some(v) = rhs_vars.difference(&lhs_vars).next() {
            return Err(bad(format!("variable `{v}` does not occur on the left-hand side")));
        }
        Ok(Rule {
            name: eq.name.clone(),
            vars,
            lhs: eq.lhs.clone(),
            rhs: eq.rhs.clone(),
            conds: eq.conds.clone(),
            is_def: false,
        })
    }

    pub fn from_def(d: &Def) -> Rule {
        Rule {
            name: d.name.clone(),
            vars: HashMap::new(),
            lhs: Term::Sym(d.name.clone()),
            rhs: d.body.clone(),
            conds: Vec::new(),
            is_def: true,
        }
    }
}

fn pattern_vars(t: &Term, vars: &HashMap<String, Sort>, out: &mut HashSet<String>) {
    let set = |s: &SetExpr, out: &mut HashSet<String>| {
        fn go(s: &SetExpr, vars: &HashMap<String, Sort>, out: &mut HashSet<String>) {
            match s {
                SetExpr::Named(n) if vars.contains_key(n) => {
                    out.insert(n.clone());
                }
                SetExpr::Named(_) => {}
                SetExpr::Parity(_, i) => go(i, vars, out),
                SetExpr::Product(fs) => fs.iter().for_each(|f| go(f, vars, out)),
            }
        }
        go(s, vars, out)
    };
    let dir = |d: &DirRef, out: &mut HashSet<String>| {
        if let DirRef::Var(v) = d {
            if vars.get(v) == Some(&Sort::Dir) {
                out.insert(v.clone());
            }
        }
    };
    match t {
        Term::Sym(s) if vars.contains_key(s) => {
            out.insert(s.clone());
        }
        Term::Identity(s) | Term::Projection(_, s) => set(s, out),
        Term::Shift(s, d) => {
            set(s, out);
            dir(&d.dir, out);
        }
        Term::Gamma(d) => dir(d, out),
        Term::Link(d, _) => dir(&d.dir, out),
        Term::SubVector(_, s) | Term::DirectSum { domain: s, .. } | Term::IndexedSum { domain: s, .. } => {
            set(s, out)
        }
        _ => {}
    }
    if let Term::DirectSum { binder, .. } | Term::IndexedSum { binder, .. } = t {
        // binders are renamed, never free variables
        let mut inner = HashSet::new();
        for c in t.children() {
            pattern_vars(c, vars, &mut inner);
        }
        inner.remove(binder);
        out.extend(inner);
        return;
    }
    for c in t.children() {
        pattern_vars(c, vars, out);
    }
}

/// An ordered rule list with its strategy and step budget.
#[derive(Clone, Debug)]
pub struct RuleSet {
    pub rules: Vec<Rule>,
    pub strategy: Strategy,
    pub fuel: usize,
}

impl RuleSet {
    pub fn new(rules: Vec<Rule>) -> RuleSet {
        RuleSet {
            rules,
            strategy: Strategy::Innermost,
            fuel: DEFAULT_FUEL,
        }
    }

    /// Definitions first, then equations in source order.
    pub fn from_program(p: &TypedProgram) -> Result<RuleSet, RewriteError> {
        let mut rules: Vec<Rule> = p.unit.defs.iter().map(Rule::from_def).collect();
        for eq in &p.unit.equations {
            rules.push(Rule::from_equation(eq)?);
        }
        Ok(RuleSet::new(rules))
    }

    pub fn rule(&self, name: &str) -> Option<&Rule> {
        self.rules.iter().find(|r| r.name == name)
    }

    /// Normalizes `t`. Runs on a large stack since deep rewrite chains
    /// recurse.
    pub fn normalize(&self, t: &Term, env: &TypeEnv) -> Result<Term, RewriteError> {
        self.run(t, env, None)
    }

    /// Like `normalize`, emitting one JSON object per rewrite step.
    pub fn normalize_traced(
        &self,
        t: &Term,
        env: &TypeEnv,
        trace: &mut (dyn Write + Send),
    ) -> Result<Term, RewriteError> {
        self.run(t, env, Some(trace))
    }

    fn run(&self, t: &Term, env: &TypeEnv, trace: Option<&mut (dyn Write + Send)>) -> Result<Term, RewriteError> {
        std::thread::scope(|scope| {
            std::thread::Builder::new()
                .stack_size(512 << 20)
                .spawn_scoped(scope, move || {
                    let mut rw = Rewriter {
                        set: self,
                        env,
                        steps: 0,
                        trace,
                        def_cache: HashMap::new(),
                    };
                    match self.strategy {
                        Strategy::Innermost => rw.norm(t),
                        Strategy::Outermost => rw.outer(t.clone()),
                    }
                })
                .expect("spawn rewrite thread")
                .join()
                .unwrap_or_else(|e| std::panic::resume_unwind(e))
        })
    }
}

/// Variable bindings produced by matching.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Subst {
    pub terms: HashMap<String, Term>,
    pub sets: HashMap<String, SetExpr>,
    pub dirs: HashMap<String, SignedDir>,
    /// Pattern binder or site name to subject binder name.
    pub binders: HashMap<String, String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Add,
    Mul,
    Tensor,
}

fn op_of(t: &Term) -> Option<Op> {
    match t {
        Term::Add(..) => Some(Op::Add),
        Term::Mul(..) => Some(Op::Mul),
        Term::Tensor(..) => Some(Op::Tensor),
        _ => None,
    }
}

/// Operands of an associative chain, left to right.
pub fn flatten(t: &Term, op: Op) -> Vec<&Term> {
    fn go<'t>(t: &'t Term, op: Op, out: &mut Vec<&'t Term>) {
        match t {
            Term::Add(a, b) | Term::Mul(a, b) | Term::Tensor(a, b) if op_of(t) == Some(op) => {
                go(a, op, out);
                go(b, op, out);
            }
            _ => out.push(t),
        }
    }
    let mut out = Vec::new();
    go(t, op, &mut out);
    out
}

/// Left-associated chain; `parts` must be non-empty.
pub fn rebuild(op: Op, parts: Vec<Term>) -> Term {
    let mut it = parts.into_iter();
    let first = it.next().expect("empty chain");
    it.fold(first, |acc, t| match op {
        Op::Add => Term::add(acc, t),
        Op::Mul => Term::mul(acc, t),
        Op::Tensor => Term::tensor(acc, t),
    })
}

/// Re-associates the chain rooted at `t` to the left.
fn canon(t: Term) -> Term {
    match op_of(&t) {
        Some(op) => {
            let parts: Vec<Term> = flatten(&t, op).into_iter().cloned().collect();
            rebuild(op, parts)
        }
        None => t,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Scalar,
    Vector,
    Matrix,
    Unknown,
}

fn kind(t: &Term, env: &TypeEnv) -> Kind {
    use Kind::*;
    match t {
        Term::Lit(_) | Term::ImagUnit | Term::Inner(..) | Term::Div(..) => Scalar,
        Term::Identity(_)
        | Term::Gamma(_)
        | Term::Gamma5
        | Term::Shift(..)
        | Term::Link(..)
        | Term::Projection(..)
        | Term::DirectSum { .. }
        | Term::Inverse(_) => Matrix,
        Term::Sym(s) => match env.symbols.get(s) {
            Some(Shape::Scalar) => Scalar,
            Some(Shape::Vector(_)) => Vector,
            Some(Shape::Matrix(..)) => Matrix,
            _ => Unknown,
        },
        Term::Add(a, b) | Term::Sub(a, b) => match kind(a, env) {
            Unknown => kind(b, env),
            k => k,
        },
        Term::Mul(a, b) => match (kind(a, env), kind(b, env)) {
            (Scalar, k) | (k, Scalar) => k,
            (Matrix, Vector) => Vector,
            (Matrix, Matrix) => Matrix,
            _ => Unknown,
        },
        Term::ScalarMul(_, b) => kind(b, env),
        Term::Tensor(a, _) => match kind(a, env) {
            Scalar => Unknown,
            k => k,
        },
        Term::Transpose(a) | Term::Dagger(a) | Term::Neg(a) => kind(a, env),
        Term::IndexedSum { body, .. } => kind(body, env),
        Term::SubVector(..) => Vector,
        Term::Zero | Term::Call(..) => Unknown,
    }
}

fn sort_ok(sort: Sort, t: &Term, env: &TypeEnv) -> bool {
    let k = kind(t, env);
    match sort {
        Sort::Matrix => matches!(k, Kind::Matrix | Kind::Unknown),
        Sort::Vector => matches!(k, Kind::Vector | Kind::Unknown),
        Sort::Scalar => matches!(k, Kind::Scalar | Kind::Unknown) && !matches!(t, Term::Call(..)),
        Sort::Term => true,
        Sort::Set | Sort::Dir => false,
    }
}

type Cont<'k> = &'k mut dyn FnMut(&Subst) -> bool;

/// Pattern matcher for one rule.
pub struct Matcher<'a> {
    pub vars: &'a HashMap<String, Sort>,
    pub env: &'a TypeEnv,
}

impl<'a> Matcher<'a> {
    fn term_var(&self, p: &Term) -> Option<(&'a str, Sort)> {
        match p {
            Term::Sym(v) => self
                .vars
                .get_key_value(v.as_str())
                .filter(|(_, s)| !matches!(s, Sort::Set | Sort::Dir))
                .map(|(k, s)| (k.as_str(), *s)),
            _ => None,
        }
    }

    fn bind_term(&self, v: &str, sort: Sort, value: Term, su: &Subst, k: Cont) -> bool {
        if let Some(b) = su.terms.get(v) {
            return *b == value && k(su);
        }
        if !sort_ok(sort, &value, self.env) {
            return false;
        }
        let mut su2 = su.clone();
        su2.terms.insert(v.to_string(), value);
        k(&su2)
    }

    /// Calls `k` for every match of `p` against `s`; stops when `k` does.
    pub fn matches(&self, p: &Term, s: &Term, su: &Subst, k: Cont) -> bool {
        if let Some((v, sort)) = self.term_var(p) {
            return self.bind_term(v, sort, s.clone(), su, k);
        }
        if let Some(op) = op_of(p) {
            if op_of(s) != Some(op) {
                return false;
            }
            let ps = flatten(p, op);
            let ss = flatten(s, op);
            return match op {
                Op::Add => self.match_ac(&ps, &ss, false, su, &mut |su1, _| k(su1)),
                _ => self.match_list(op, &ps, &ss, su, k),
            };
        }
        match (p, s) {
            (Term::Zero, s) => s.is_zero() && k(su),
            (Term::Lit(a), Term::Lit(b)) => a == b && k(su),
            (Term::Sym(a), Term::Sym(b)) => a == b && k(su),
            (Term::ImagUnit, Term::ImagUnit) | (Term::Gamma5, Term::Gamma5) => k(su),
            (Term::Identity(a), Term::Identity(b)) => self.match_set(a, b, su, k),
            (Term::Projection(pa, a), Term::Projection(pb, b)) => pa == pb && self.match_set(a, b, su, k),
            (Term::Gamma(a), Term::Gamma(b)) => {
                match self.match_dir(&SignedDir::pos(a.clone()), &SignedDir::pos(b.clone()), su) {
                    Some(su1) => k(&su1),
                    None => false,
                }
            }
            (Term::Shift(a, da), Term::Shift(b, db)) => match self.match_dir(da, db, su) {
                Some(su1) => self.match_set(a, b, &su1, k),
                None => false,
            },
            (Term::Link(da, sa), Term::Link(db, sb)) => {
                let Some(mut su1) = self.match_dir(da, db, su) else {
                    return false;
                };
                match su1.binders.get(sa) {
                    Some(x) if x != sb => return false,
                    Some(_) => {}
                    None => {
                        su1.binders.insert(sa.clone(), sb.clone());
                    }
                }
                k(&su1)
            }
            (
                Term::DirectSum {
                    binder: pb,
                    domain: pd,
                    body: pbody,
                },
                Term::DirectSum {
                    binder: sb,
                    domain: sd,
                    body: sbody,
                },
            )
            | (
                Term::IndexedSum {
                    binder: pb,
                    domain: pd,
                    body: pbody,
                },
                Term::IndexedSum {
                    binder: sb,
                    domain: sd,
                    body: sbody,
                },
            ) => {
                if std::mem::discriminant(p) != std::mem::discriminant(s) {
                    return false;
                }
                self.match_set(pd, sd, su, &mut |su1| {
                    let mut su2 = su1.clone();
                    if su2.binders.get(pb).is_some_and(|x| x != sb) {
                        return false;
                    }
                    su2.binders.insert(pb.clone(), sb.clone());
                    self.matches(pbody, sbody, &su2, k)
                })
            }
            (Term::SubVector(pa, ps), Term::SubVector(sa, ss)) => {
                self.match_set(ps, ss, su, &mut |su1| self.matches(pa, sa, su1, k))
            }
            (Term::Call(a, pargs), Term::Call(b, sargs)) => {
                a == b && pargs.len() == sargs.len() && self.match_seq(&pargs.iter().collect::<Vec<_>>(), &sargs.iter().collect::<Vec<_>>(), su, k)
            }
            _ => {
                if std::mem::discriminant(p) != std::mem::discriminant(s) {
                    return false;
                }
                let pk = p.children();
                let sk = s.children();
                pk.len() == sk.len() && !pk.is_empty() && self.match_seq(&pk, &sk, su, k)
            }
        }
    }

    fn match_seq(&self, ps: &[&Term], ss: &[&Term], su: &Subst, k: Cont) -> bool {
        match ps.split_first() {
            None => k(su),
            Some((p, rest)) => self.matches(p, ss[0], su, &mut |su1| self.match_seq(rest, &ss[1..], su1, k)),
        }
    }

    /// Associative list matching; a variable absorbs a non-empty run.
    fn match_list(&self, op: Op, ps: &[&Term], ss: &[&Term], su: &Subst, k: Cont) -> bool {
        let Some((p, rest)) = ps.split_first() else {
            return ss.is_empty() && k(su);
        };
        if ss.len() < ps.len() {
            return false;
        }
        if let Some((v, sort)) = self.term_var(p) {
            if let Some(bound) = su.terms.get(v) {
                let flat = flatten(bound, op);
                let n = flat.len();
                return n <= ss.len()
                    && flat.iter().zip(ss).all(|(a, b)| *a == *b)
                    && self.match_list(op, rest, &ss[n..], su, k);
            }
            for len in 1..=ss.len() - rest.len() {
                let value = rebuild(op, ss[..len].iter().map(|t| (*t).clone()).collect());
                if self.bind_term(v, sort, value, su, &mut |su1| self.match_list(op, rest, &ss[len..], su1, k)) {
                    return true;
                }
            }
            return false;
        }
        self.matches(p, ss[0], su, &mut |su1| self.match_list(op, rest, &ss[1..], su1, k))
    }

    /// Associative-commutative matching for sums. Non-variable summands are
    /// matched first; the remaining summands go to the free variables in
    /// order, the last one taking everything left. With `allow_rest` the
    /// unmatched summands are handed to `k` instead.
    fn match_ac(
        &self,
        ps: &[&Term],
        ss: &[&Term],
        allow_rest: bool,
        su: &Subst,
        k: &mut dyn FnMut(&Subst, &[usize]) -> bool,
    ) -> bool {
        let (free, fixed): (Vec<&Term>, Vec<&Term>) = ps
            .iter()
            .partition(|p| self.term_var(p).is_some_and(|(v, _)| !su.terms.contains_key(v)));
        let mut used = vec![false; ss.len()];
        self.ac_fixed(&fixed, &free, ss, &mut used, allow_rest, su, k)
    }

    #[allow(clippy::too_many_arguments)]
    fn ac_fixed(
        &self,
        fixed: &[&Term],
        free: &[&Term],
        ss: &[&Term],
        used: &mut Vec<bool>,
        allow_rest: bool,
        su: &Subst,
        k: &mut dyn FnMut(&Subst, &[usize]) -> bool,
    ) -> bool {
        if let Some((p, rest)) = fixed.split_first() {
            for j in 0..ss.len() {
                if used[j] {
                    continue;
                }
                used[j] = true;
                let mut used2 = used.clone();
                let hit = self.matches(p, ss[j], su, &mut |su1| {
                    self.ac_fixed(rest, free, ss, &mut used2, allow_rest, su1, k)
                });
                used[j] = false;
                if hit {
                    return true;
                }
            }
            return false;
        }
        let remaining: Vec<usize> = (0..ss.len()).filter(|j| !used[*j]).collect();
        if free.is_empty() {
            return (remaining.is_empty() || allow_rest) && k(su, &remaining);
        }
        if remaining.len() < free.len() {
            return false;
        }
        let mut su1 = su.clone();
        for (i, p) in free.iter().enumerate() {
            let (v, sort) = self.term_var(p).unwrap();
            let value = if i + 1 == free.len() {
                rebuild(Op::Add, remaining[i..].iter().map(|j| ss[*j].clone()).collect())
            } else {
                ss[remaining[i]].clone()
            };
            let mut next = None;
            if !self.bind_term(v, sort, value, &su1, &mut |su2| {
                next = Some(su2.clone());
                true
            }) {
                return false;
            }
            su1 = next.unwrap();
        }
        k(&su1, &[])
    }

    fn set_var(&self, s: &SetExpr) -> Option<&'a str> {
        match s {
            SetExpr::Named(n) => self
                .vars
                .get_key_value(n.as_str())
                .filter(|(_, s)| **s == Sort::Set)
                .map(|(k, _)| k.as_str()),
            _ => None,
        }
    }

    fn match_set(&self, p: &SetExpr, s: &SetExpr, su: &Subst, k: Cont) -> bool {
        if let Some(v) = self.set_var(p) {
            return self.bind_set(v, s.clone(), su, k);
        }
        match (p, s) {
            (SetExpr::Named(a), SetExpr::Named(b)) => a == b && k(su),
            (SetExpr::Parity(pa, a), SetExpr::Parity(pb, b)) => pa == pb && self.match_set(a, b, su, k),
            (SetExpr::Product(ps), _) => {
                let ss = s.factors();
                let ps: Vec<&SetExpr> = ps.iter().collect();
                let ss: Vec<&SetExpr> = ss.iter().collect();
                self.match_set_list(&ps, &ss, su, k)
            }
            _ => false,
        }
    }

    fn bind_set(&self, v: &str, value: SetExpr, su: &Subst, k: Cont) -> bool {
        if let Some(b) = su.sets.get(v) {
            return *b == value && k(su);
        }
        let mut su2 = su.clone();
        su2.sets.insert(v.to_string(), value);
        k(&su2)
    }

    fn match_set_list(&self, ps: &[&SetExpr], ss: &[&SetExpr], su: &Subst, k: Cont) -> bool {
        let Some((p, rest)) = ps.split_first() else {
            return ss.is_empty() && k(su);
        };
        if ss.len() < ps.len() {
            return false;
        }
        if let Some(v) = self.set_var(p) {
            for len in 1..=ss.len() - rest.len() {
                let value = SetExpr::product(ss[..len].iter().map(|s| (*s).clone()).collect());
                if self.bind_set(v, value, su, &mut |su1| self.match_set_list(rest, &ss[len..], su1, k)) {
                    return true;
                }
            }
            return false;
        }
        self.match_set(p, ss[0], su, &mut |su1| self.match_set_list(rest, &ss[1..], su1, k))
    }

    fn match_dir(&self, p: &SignedDir, s: &SignedDir, su: &Subst) -> Option<Subst> {
        let DirRef::Var(v) = &p.dir else {
            return (p == s).then(|| su.clone());
        };
        if let Some(b) = su.binders.get(v) {
            let ok = s.neg == p.neg && s.dir == DirRef::Var(b.clone());
            return ok.then(|| su.clone());
        }
        if self.vars.get(v) != Some(&Sort::Dir) {
            return (p == s).then(|| su.clone());
        }
        let want = if p.neg { s.negate() } else { s.clone() };
        match su.dirs.get(v) {
            Some(b) => (*b == want).then(|| su.clone()),
            None => {
                let mut su2 = su.clone();
                su2.dirs.insert(v.clone(), want);
                Some(su2)
            }
        }
    }
}

/// Instantiates a rule side under `su`, leaving assoc chains as built.
pub fn instantiate(t: &Term, su: &Subst) -> Term {
    inst_node(t, su, t.children().into_iter().map(|c| instantiate(c, su)).collect())
}

fn inst_set(s: &SetExpr, su: &Subst) -> SetExpr {
    match s {
        SetExpr::Named(n) => su.sets.get(n).cloned().unwrap_or_else(|| s.clone()),
        SetExpr::Parity(p, i) => SetExpr::Parity(*p, Box::new(inst_set(i, su))),
        SetExpr::Product(fs) => SetExpr::product(fs.iter().map(|f| inst_set(f, su)).collect()),
    }
}

fn inst_dir(d: &SignedDir, su: &Subst) -> SignedDir {
    match &d.dir {
        DirRef::Var(v) => {
            if let Some(b) = su.binders.get(v) {
                SignedDir {
                    neg: d.neg,
                    dir: DirRef::Var(b.clone()),
                }
            } else if let Some(b) = su.dirs.get(v) {
                if d.neg {
                    b.negate()
                } else {
                    b.clone()
                }
            } else {
                d.clone()
            }
        }
        DirRef::Axis(_) => d.clone(),
    }
}

fn inst_binder(b: &str, su: &Subst) -> String {
    su.binders.get(b).cloned().unwrap_or_else(|| b.to_string())
}

/// Rebuilds pattern node `t` under `su` with already-instantiated children.
fn inst_node(t: &Term, su: &Subst, kids: Vec<Term>) -> Term {
    match t {
        Term::Sym(v) => su.terms.get(v).cloned().unwrap_or_else(|| t.clone()),
        Term::Identity(s) => Term::Identity(inst_set(s, su)),
        Term::Projection(p, s) => Term::Projection(*p, inst_set(s, su)),
        Term::Gamma(d) => Term::Gamma(inst_dir(&SignedDir::pos(d.clone()), su).dir),
        Term::Shift(s, d) => Term::Shift(inst_set(s, su), inst_dir(d, su)),
        Term::Link(d, site) => Term::Link(inst_dir(d, su), inst_binder(site, su)),
        Term::DirectSum { binder, domain, .. } => Term::DirectSum {
            binder: inst_binder(binder, su),
            domain: inst_set(domain, su),
            body: Box::new(kids.into_iter().next().unwrap()),
        },
        Term::IndexedSum { binder, domain, .. } => Term::IndexedSum {
            binder: inst_binder(binder, su),
            domain: inst_set(domain, su),
            body: Box::new(kids.into_iter().next().unwrap()),
        },
        Term::SubVector(_, s) => Term::SubVector(Box::new(kids.into_iter().next().unwrap()), inst_set(s, su)),
        _ if kids.is_empty() => t.clone(),
        _ => t.with_children(kids),
    }
}

/// Where a root match sits inside the subject.
enum Site {
    Whole,
    Window { op: Op, prefix: Vec<Term>, suffix: Vec<Term> },
    Rest(Vec<Term>),
}

impl Site {
    fn plug(self, r: Term) -> Term {
        match self {
            Site::Whole => r,
            Site::Window { op, prefix, suffix } => {
                let mut parts = prefix;
                parts.push(r);
                parts.extend(suffix);
                canon(rebuild(op, parts))
            }
            Site::Rest(rest) => {
                let mut parts = vec![r];
                parts.extend(rest);
                canon(rebuild(Op::Add, parts))
            }
        }
    }
}

struct Rewriter<'a, 'w> {
    set: &'a RuleSet,
    env: &'a TypeEnv,
    steps: usize,
    trace: Option<&'w mut (dyn Write + Send)>,
    def_cache: HashMap<String, Term>,
}

impl Rewriter<'_, '_> {
    fn spend(&mut self) -> Result<(), RewriteError> {
        self.steps += 1;
        if self.steps > self.set.fuel {
            return Err(RewriteError::FuelExhausted(self.set.fuel));
        }
        Ok(())
    }

    fn tick(&mut self, rule: &Rule, before: &Term, after: &Term) {
        if let Some(w) = self.trace.as_mut() {
            let line = serde_json::json!({
                "step": self.steps,
                "rule": rule.name,
                "before": term_to_string(before),
                "after": term_to_string(after),
            });
            let _ = writeln!(w, "{line}");
        }
    }

    /// First match of `rule` at the root of `t` whose guards hold.
    fn find(&self, rule: &Rule, t: &Term) -> Option<(Subst, Site)> {
        let m = Matcher {
            vars: &rule.vars,
            env: self.env,
        };
        let mut found: Option<Subst> = None;
        let mut accept = |su: &Subst| {
            if rule.conds.iter().all(|c| guard_holds(&instantiate(c, su), self.env)) {
                found = Some(su.clone());
                true
            } else {
                false
            }
        };
        let root = Subst::default();
        match (op_of(&rule.lhs), op_of(t)) {
            (Some(Op::Add), Some(Op::Add)) => {
                let ps = flatten(&rule.lhs, Op::Add);
                let ss = flatten(t, Op::Add);
                let mut rest = Vec::new();
                m.match_ac(&ps, &ss, true, &root, &mut |su, r| {
                    if accept(su) {
                        rest = r.iter().map(|j| ss[*j].clone()).collect();
                        true
                    } else {
                        false
                    }
                });
                let site = if rest.is_empty() { Site::Whole } else { Site::Rest(rest) };
                found.map(|su| (su, site))
            }
            (Some(op), Some(op2)) if op == op2 => {
                let ps = flatten(&rule.lhs, op);
                let ss = flatten(t, op);
                let n = ss.len();
                for i in 0..n {
                    for j in i + ps.len()..=n {
                        if m.match_list(op, &ps, &ss[i..j], &root, &mut accept) {
                            let site = if i == 0 && j == n {
                                Site::Whole
                            } else {
                                Site::Window {
                                    op,
                                    prefix: ss[..i].iter().map(|t| (*t).clone()).collect(),
                                    suffix: ss[j..].iter().map(|t| (*t).clone()).collect(),
                                }
                            };
                            return found.map(|su| (su, site));
                        }
                    }
                }
                None
            }
            _ => {
                m.matches(&rule.lhs, t, &root, &mut accept);
                found.map(|su| (su, Site::Whole))
            }
        }
    }

    /// Leftmost-innermost normal form.
    fn norm(&mut self, t: &Term) -> Result<Term, RewriteError> {
        let kids = t
            .children()
            .into_iter()
            .map(|c| self.norm(c))
            .collect::<Result<Vec<_>, _>>()?;
        let node = if kids.is_empty() { t.clone() } else { t.with_children(kids) };
        self.root(canon(node))
    }

    /// Rewrites at the root until no rule applies; children are normal.
    fn root(&mut self, mut t: Term) -> Result<Term, RewriteError> {
        'outer: loop {
            for rule in &self.set.rules {
                let Some((su, site)) = self.find(rule, &t) else {
                    continue;
                };
                self.spend()?;
                let r = if rule.is_def {
                    match self.def_cache.get(&rule.name) {
                        Some(r) => r.clone(),
                        None => {
                            let r = self.build(&rule.rhs, &su)?;
                            self.def_cache.insert(rule.name.clone(), r.clone());
                            r
                        }
                    }
                } else {
                    self.build(&rule.rhs, &su)?
                };
                let next = site.plug(r);
                if next == t {
                    continue;
                }
                self.tick(rule, &t, &next);
                t = next;
                continue 'outer;
            }
            return Ok(t);
        }
    }

    /// Instantiates a right-hand side, normalizing only the nodes it
    /// introduces; bound subterms are already normal.
    fn build(&mut self, p: &Term, su: &Subst) -> Result<Term, RewriteError> {
        if let Term::Sym(v) = p {
            if let Some(b) = su.terms.get(v) {
                return Ok(b.clone());
            }
        }
        let kids = p
            .children()
            .into_iter()
            .map(|c| self.build(c, su))
            .collect::<Result<Vec<_>, _>>()?;
        let node = inst_node(p, su, kids);
        self.root(canon(node))
    }

    fn step_root(&mut self, t: &Term) -> Result<Option<Term>, RewriteError> {
        for rule in &self.set.rules {
            if let Some((su, site)) = self.find(rule, t) {
                let next = site.plug(canon(instantiate(&rule.rhs, &su)));
                if next != *t {
                    self.spend()?;
                    self.tick(rule, t, &next);
                    return Ok(Some(next));
                }
            }
        }
        Ok(None)
    }

    fn outer(&mut self, t: Term) -> Result<Term, RewriteError> {
        let mut t = canon(t);
        loop {
            if let Some(n) = self.step_root(&t)? {
                t = canon(n);
                continue;
            }
            let kids = t
                .children()
                .into_iter()
                .map(|c| self.outer(c.clone()))
                .collect::<Result<Vec<_>, _>>()?;
            if kids.is_empty() {
                return Ok(t);
            }
            let n = canon(t.with_children(kids));
            if n == t {
                return Ok(t);
            }
            t = n;
        }
    }
}

/// Evaluates an instantiated guard.
pub fn guard_holds(g: &Term, env: &TypeEnv) -> bool {
    let Term::Call(name, args) = g else {
        return false;
    };
    match (name.as_str(), args.as_slice()) {
        ("conform", [a, b]) => conform(a, b, env),
        ("lattice_projector", [p]) => is_lattice_projector(p),
        ("parity_vanishes", [a]) => parity_vanishes(a),
        ("real", [a]) => is_real(a, env),
        ("identity_like", [a]) => is_identity_like(a),
        ("identity_gamma5", [a]) => is_identity_gamma5(a),
        _ => false,
    }
}

/// `cols(a) == rows(b)` for concrete matrices.
pub fn conform(a: &Term, b: &Term, env: &TypeEnv) -> bool {
    let mut ck = Checker::lenient(env);
    let (Ok(sa), Ok(sb)) = (ck.infer(a), ck.infer(b)) else {
        return false;
    };
    match (ck.zonk(&sa), ck.zonk(&sb)) {
        (Shape::Matrix(_, c), Shape::Matrix(r, _)) => c == r && !c.is_generic(),
        _ => false,
    }
}

fn is_projection(t: &Term) -> bool {
    match t {
        Term::Projection(..) => true,
        Term::Transpose(p) => matches!(**p, Term::Projection(..)),
        _ => false,
    }
}

/// A parity projector or its transpose, optionally tensored with
/// identities on the inner factors.
pub fn is_lattice_projector(t: &Term) -> bool {
    let parts = flatten(t, Op::Tensor);
    is_projection(parts[0]) && parts[1..].iter().all(|p| matches!(p, Term::Identity(_)))
}

pub fn is_identity_like(t: &Term) -> bool {
    flatten(t, Op::Tensor).iter().all(|p| matches!(p, Term::Identity(_)))
}

pub fn is_identity_gamma5(t: &Term) -> bool {
    let parts = flatten(t, Op::Tensor);
    let (last, init) = parts.split_last().unwrap();
    matches!(last, Term::Gamma5) && init.iter().all(|p| matches!(p, Term::Identity(_)))
}

pub fn is_real(t: &Term, env: &TypeEnv) -> bool {
    match t {
        Term::Lit(c) => c.im == 0.0,
        Term::Zero => true,
        Term::Sym(s) => env.real_scalars.contains(s),
        Term::Add(a, b) | Term::Sub(a, b) | Term::Mul(a, b) | Term::Div(a, b) | Term::ScalarMul(a, b) => {
            is_real(a, env) && is_real(b, env)
        }
        Term::Neg(a) | Term::Dagger(a) => is_real(a, env),
        _ => false,
    }
}

/// Lattice-domain parity of a matrix side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dom {
    Full,
    Fixed(Parity),
}

/// How a matrix acts on site parity: its row and column domains and
/// whether it maps each site to the opposite parity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParitySig {
    pub lattice: bool,
    pub rows: Dom,
    pub cols: Dom,
    /// `None` when the matrix mixes parity-preserving and flipping parts.
    pub flip: Option<bool>,
}

impl ParitySig {
    const NEUTRAL: ParitySig = ParitySig {
        lattice: false,
        rows: Dom::Full,
        cols: Dom::Full,
        flip: Some(false),
    };

    fn transpose(self) -> ParitySig {
        ParitySig {
            rows: self.cols,
            cols: self.rows,
            ..self
        }
    }
}

fn set_parity(s: &SetExpr) -> Option<Dom> {
    match s {
        SetExpr::Parity(p, _) => Some(Dom::Fixed(*p)),
        SetExpr::Product(fs) => fs.iter().find_map(set_parity),
        SetExpr::Named(_) => None,
    }
}

/// Structural parity signature; `None` when nothing is known.
pub fn parity_sig(t: &Term) -> Option<ParitySig> {
    let lattice_diag = |dom: Dom| ParitySig {
        lattice: true,
        rows: dom,
        cols: dom,
        flip: Some(false),
    };
    match t {
        Term::Projection(p, _) => Some(ParitySig {
            lattice: true,
            rows: Dom::Fixed(*p),
            cols: Dom::Full,
            flip: Some(false),
        }),
        Term::Shift(..) => Some(ParitySig {
            lattice: true,
            rows: Dom::Full,
            cols: Dom::Full,
            flip: Some(true),
        }),
        // Identities over atomic sets carry no lattice information; an
        // identity over a lattice set is diagonal on sites.
        Term::Identity(s) => match set_parity(s) {
            Some(d) => Some(lattice_diag(d)),
            None => Some(ParitySig::NEUTRAL),
        },
        Term::Gamma(_) | Term::Gamma5 | Term::Link(..) => Some(ParitySig::NEUTRAL),
        Term::DirectSum { domain, .. } => Some(lattice_diag(set_parity(domain).unwrap_or(Dom::Full))),
        Term::Transpose(a) | Term::Dagger(a) => parity_sig(a).map(ParitySig::transpose),
        Term::ScalarMul(_, a) | Term::Neg(a) | Term::IndexedSum { body: a, .. } => parity_sig(a),
        Term::Tensor(a, b) => {
            let (a, b) = (parity_sig(a)?, parity_sig(b)?);
            if a.lattice && b.lattice {
                return None;
            }
            let lat = if a.lattice { a } else { b };
            Some(ParitySig {
                lattice: a.lattice || b.lattice,
                rows: lat.rows,
                cols: lat.cols,
                flip: Some(a.flip? ^ b.flip?),
            })
        }
        Term::Mul(a, b) => {
            let (a, b) = (parity_sig(a)?, parity_sig(b)?);
            Some(ParitySig {
                lattice: a.lattice || b.lattice,
                rows: if a.lattice { a.rows } else { b.rows },
                cols: if b.lattice { b.cols } else { a.cols },
                flip: match (a.flip, b.flip) {
                    (Some(x), Some(y)) => Some(x ^ y),
                    _ => None,
                },
            })
        }
        Term::Add(a, b) | Term::Sub(a, b) => {
            let (a, b) = (parity_sig(a)?, parity_sig(b)?);
            let dom = |x: Dom, y: Dom| if x == y { x } else { Dom::Full };
            Some(ParitySig {
                lattice: a.lattice || b.lattice,
                rows: dom(a.rows, b.rows),
                cols: dom(a.cols, b.cols),
                flip: if a.flip == b.flip { a.flip } else { None },
            })
        }
        _ => None,
    }
}

/// True when the parity signature proves the matrix is zero: it maps
/// columns of one parity onto rows that cannot receive them. Sound on
/// lattices with even extents only.
pub fn parity_vanishes(t: &Term) -> bool {
    match parity_sig(t) {
        Some(ParitySig {
            lattice: true,
            rows: Dom::Fixed(r),
            cols: Dom::Fixed(c),
            flip: Some(f),
        }) => (r != c) != f,
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::{parse, parse_term};
    use crate::shape::typecheck_program;

    const SETS: &str = "indexset L = lattice ; indexset C = atomic 3 ; indexset S = atomic 4 ; indexset D = directions ;";

    fn program(extra: &str) -> TypedProgram {
        typecheck_program(&parse(&format!("{SETS}\n{extra}")).unwrap()).unwrap()
    }

    fn norm(p: &TypedProgram, src: &str) -> Term {
        let rs = RuleSet::from_program(p).unwrap();
        let t = crate::shape::elaborate_term(&parse_term(src).unwrap(), &p.env).unwrap();
        rs.normalize(&t, &p.env).unwrap()
    }

    #[test]
    fn identity_is_removed_from_products() {
        let p = program(
            "matrix A : L -> L ; equation il [X : set; A : term] I_X * A = A ;",
        );
        assert_eq!(norm(&p, "I_L * A"), Term::sym("A"));
    }

    #[test]
    fn associative_window_match() {
        let p = program(
            "matrix A, B : L -> L ; equation sh [X : set; d : dir] shift(X, d) * shift(X, -d) = I_X ;",
        );
        let t = norm(&p, "A * shift(L, dx) * shift(L, -dx) * B");
        assert_eq!(t, parse_term("A * I_L * B").unwrap());
    }

    #[test]
    fn commutative_sum_match() {
        let p = program("matrix A : L -> L ; equation z [A : term] A + 0 = A ;");
        assert_eq!(norm(&p, "0 + A"), Term::sym("A"));
    }

    #[test]
    fn commutativity_exhausts_fuel() {
        let p = program("matrix A, B : L -> L ; equation comm [A, B : matrix] A + B = B + A ;");
        let mut rs = RuleSet::from_program(&p).unwrap();
        rs.fuel = 50;
        let t = parse_term("A + B").unwrap();
        assert_eq!(rs.normalize(&t, &p.env), Err(RewriteError::FuelExhausted(50)));
    }

    #[test]
    fn rhs_variables_must_occur_on_lhs() {
        let u = parse(&format!("{SETS} equation bad [A, B : matrix] A = B ;")).unwrap();
        assert!(Rule::from_equation(&u.equations[0]).is_err());
    }

    #[test]
    fn trace_lines_are_json() {
        let p = program("matrix A : L -> L ; equation z [A : term] A + 0 = A ;");
        let rs = RuleSet::from_program(&p).unwrap();
        let mut buf: Vec<u8> = Vec::new();
        rs.normalize_traced(&parse_term("A + 0 + 0").unwrap(), &p.env, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        for l in text.lines() {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            assert_eq!(v["rule"], "z");
        }
    }

    #[test]
    fn parity_of_projected_hopping() {
        let t = parse_term("proj(even, L) * shift(L, dx) * proj(even, L)^t").unwrap();
        assert!(parity_vanishes(&t));
        let t = parse_term("proj(even, L) * shift(L, dx) * proj(odd, L)^t").unwrap();
        assert!(!parity_vanishes(&t));
        let t = parse_term("proj(even, L) * proj(even, L)^t").unwrap();
        assert!(!parity_vanishes(&t));
    }
}
