//! Algorithm templates: matching a goal statement, proving requirements,
//! instantiating bodies with fresh locals, and composing several
//! templates into a plan free of matrix inverses.

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use crate::ir::*;
use crate::printer::{stmt_to_string, term_to_string};
use crate::rewrite::{flatten, is_identity_gamma5, is_identity_like, is_real, Matcher, Op, RewriteError, RuleSet, Subst};
use crate::shape::{infer_shape, IndexSet, SetAtom, Shape, TypeEnv, TypedProgram};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlgorithmError {
    #[error("unknown algorithm `{0}`")]
    UnknownAlgorithm(String),
    #[error("{algorithm}: no statement matches `{pattern}`")]
    NoMatch { algorithm: String, pattern: String },
    #[error("{algorithm}: cannot prove `{requirement}`")]
    RequirementUnprovable { algorithm: String, requirement: String },
    #[error("{algorithm}: no binding for input `{input}`")]
    UnboundInput { algorithm: String, input: String },
    #[error("plan leaves a matrix inverse in `{0}`")]
    ResidualInverse(String),
    #[error(transparent)]
    Rewrite(#[from] RewriteError),
}

/// A program under construction: statements plus the locals introduced by
/// template instantiation.
#[derive(Clone, Debug)]
pub struct Plan {
    pub stmts: Vec<Stmt>,
    pub locals: Vec<(String, TypeExpr)>,
    /// Names of the templates applied so far.
    pub applied: Vec<String>,
    /// Environment extended with the locals, for rewriting.
    pub env: TypeEnv,
}

impl Plan {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.stmts {
            stmt_to_string(s, 0, &mut out);
        }
        out
    }

    pub fn contains_inverse(&self) -> bool {
        self.stmts.iter().any(Stmt::contains_inverse)
    }

    fn names(&self) -> HashSet<String> {
        let mut out: HashSet<String> = self.env.symbols.keys().cloned().collect();
        out.extend(self.locals.iter().map(|(n, _)| n.clone()));
        out
    }
}

fn sort_of(ty: &TypeExpr) -> Sort {
    match ty {
        TypeExpr::Matrix(_) => Sort::Matrix,
        TypeExpr::Vector(_) => Sort::Vector,
        TypeExpr::Real | TypeExpr::Complex => Sort::Scalar,
    }
}

fn local_shape(name: &str, ty: &TypeExpr) -> Shape {
    let g = |suffix: &str| IndexSet::atom(SetAtom::Generic(format!("{name}{suffix}")));
    match ty {
        TypeExpr::Matrix(_) => Shape::Matrix(g(".rows"), g(".cols")),
        TypeExpr::Vector(_) => Shape::Vector(g("")),
        TypeExpr::Real | TypeExpr::Complex => Shape::Scalar,
    }
}

/// Parity projectors over the lattice factor of `rows`, tensored with
/// identities on the remaining factors.
pub fn parity_projectors(rows: &IndexSet) -> Option<(Term, Term)> {
    let (pos, SetAtom::Lattice { name, parity: None }) = rows.lattice_factor()? else {
        return None;
    };
    if pos != 0 {
        return None;
    }
    let make = |p: Parity| {
        let mut t = Term::Projection(p, SetExpr::named(name));
        for a in &rows.0[1..] {
            t = Term::tensor(t, Term::identity(IndexSet::atom(a.clone()).to_expr()));
        }
        t
    };
    Some((make(Parity::Even), make(Parity::Odd)))
}

/// Instantiates templates against a typed program.
pub struct Planner<'a> {
    pub program: &'a TypedProgram,
    pub rules: &'a RuleSet,
    fresh: usize,
    /// Receives one JSON line per rewrite step while normalizing.
    trace: Option<Box<dyn std::io::Write + Send + 'a>>,
}

impl<'a> Planner<'a> {
    pub fn new(program: &'a TypedProgram, rules: &'a RuleSet) -> Planner<'a> {
        Planner {
            program,
            rules,
            fresh: 0,
            trace: None,
        }
    }

    pub fn with_trace(mut self, sink: Box<dyn std::io::Write + Send + 'a>) -> Planner<'a> {
        self.trace = Some(sink);
        self
    }

    /// The goal as an unrefined plan.
    pub fn initial(&self) -> Plan {
        Plan {
            stmts: self.program.unit.goal.clone(),
            locals: Vec::new(),
            applied: Vec::new(),
            env: self.program.env.clone(),
        }
    }

    fn template(&self, name: &str) -> Result<&'a AlgorithmTemplate, AlgorithmError> {
        self.program
            .unit
            .template(name)
            .ok_or_else(|| AlgorithmError::UnknownAlgorithm(name.to_string()))
    }

    /// Applies the templates left to right, then checks that no inverse
    /// remains.
    pub fn plan(&mut self, steps: &[&str]) -> Result<Plan, AlgorithmError> {
        let mut plan = self.initial();
        for s in steps {
            self.apply(&mut plan, s)?;
        }
        for s in &plan.stmts {
            if s.contains_inverse() {
                let mut text = String::new();
                stmt_to_string(&find_inverse_stmt(s), 0, &mut text);
                return Err(AlgorithmError::ResidualInverse(text.trim().to_string()));
            }
        }
        Ok(plan)
    }

    /// Replaces the first statement matching the template's pattern by its
    /// instantiated body, then inlines matrix locals and normalizes.
    pub fn apply(&mut self, plan: &mut Plan, name: &str) -> Result<(), AlgorithmError> {
        let tpl = self.template(name)?;
        let vars: HashMap<String, Sort> = tpl
            .inputs
            .iter()
            .chain(&tpl.outputs)
            .map(|t| (t.name.clone(), sort_of(&t.ty)))
            .collect();
        let Stmt::Assign {
            lhs: plhs, rhs: prhs, ..
        } = &tpl.pattern
        else {
            unreachable!("match clauses are assignments");
        };

        let mut hit = None;
        let mut path = Vec::new();
        find_match(&plan.stmts, &mut path, &mut |s| {
            let Stmt::Assign { lhs, rhs, .. } = s else {
                return false;
            };
            let m = Matcher {
                vars: &vars,
                env: &plan.env,
            };
            let mut seed = Subst::default();
            seed.terms.insert(plhs.clone(), Term::Sym(lhs.clone()));
            let mut found = None;
            m.matches(prhs, rhs, &seed, &mut |su| {
                found = Some(su.clone());
                true
            });
            match found {
                Some(su) => {
                    hit = Some(su);
                    true
                }
                None => false,
            }
        });
        let Some(mut su) = hit else {
            return Err(AlgorithmError::NoMatch {
                algorithm: tpl.name.clone(),
                pattern: stmt_to_string_trim(&tpl.pattern),
            });
        };

        // Inputs not fixed by the match come from the planner (parity
        // projectors) or from global declarations of the same name.
        let defaults = self.default_bindings(&su, plan);
        for tn in &tpl.inputs {
            if su.terms.contains_key(&tn.name) {
                continue;
            }
            if let Some(t) = defaults.get(&tn.name) {
                su.terms.insert(tn.name.clone(), t.clone());
            } else if plan.env.symbols.contains_key(&tn.name) {
                su.terms.insert(tn.name.clone(), Term::Sym(tn.name.clone()));
            } else {
                return Err(AlgorithmError::UnboundInput {
                    algorithm: tpl.name.clone(),
                    input: tn.name.clone(),
                });
            }
        }

        for req in &tpl.requires {
            let inst = subst_terms(req, &su.terms);
            if !self.prove(&inst, &plan.env)? {
                return Err(AlgorithmError::RequirementUnprovable {
                    algorithm: tpl.name.clone(),
                    requirement: term_to_string(req),
                });
            }
        }

        // Fresh names for the template's locals.
        let mut taken = plan.names();
        let mut renames: HashMap<String, String> = HashMap::new();
        for tn in &tpl.vars {
            let fresh = loop {
                self.fresh += 1;
                let cand = format!("{}_{}", tn.name, self.fresh);
                if !taken.contains(&cand) {
                    break cand;
                }
            };
            taken.insert(fresh.clone());
            plan.env.symbols.insert(fresh.clone(), local_shape(&fresh, &tn.ty));
            if tn.ty == TypeExpr::Real {
                plan.env.real_scalars.insert(fresh.clone());
            }
            plan.locals.push((fresh.clone(), tn.ty.clone()));
            su.terms.insert(tn.name.clone(), Term::Sym(fresh.clone()));
            renames.insert(tn.name.clone(), fresh);
        }
        for tn in &tpl.outputs {
            if let Some(Term::Sym(target)) = su.terms.get(&tn.name) {
                renames.insert(tn.name.clone(), target.clone());
            }
        }

        let body: Vec<Stmt> = tpl
            .body
            .iter()
            .map(|s| s.rename(&|n| renames.get(n).cloned()).map_terms(&mut |t| subst_terms(t, &su.terms)))
            .collect();
        splice(&mut plan.stmts, &path, body);

        let matrix_locals: HashSet<String> = tpl
            .vars
            .iter()
            .filter(|t| matches!(t.ty, TypeExpr::Matrix(_)))
            .filter_map(|t| renames.get(&t.name).cloned())
            .collect();
        inline_matrices(&mut plan.stmts, &matrix_locals);
        plan.locals.retain(|(n, _)| !matrix_locals.contains(n));
        for s in &mut plan.stmts {
            *s = self.normalize_stmt(s, &plan.env)?;
        }
        plan.applied.push(tpl.name.clone());
        Ok(())
    }

    fn default_bindings(&self, su: &Subst, plan: &Plan) -> HashMap<String, Term> {
        let mut out = HashMap::new();
        let rows = su.terms.values().find_map(|t| match infer_shape(t, &plan.env) {
            Ok(Shape::Matrix(r, c)) if r == c && !r.is_generic() => Some(r),
            _ => None,
        });
        if let Some((p1, p2)) = rows.as_ref().and_then(parity_projectors) {
            out.insert("P1".to_string(), p1);
            out.insert("P2".to_string(), p2);
        }
        out
    }

    fn normalize_stmt(&mut self, s: &Stmt, env: &TypeEnv) -> Result<Stmt, RewriteError> {
        let mut err = None;
        let rules = self.rules;
        let trace = &mut self.trace;
        let out = s.map_terms(&mut |t| {
            let r = match trace.as_deref_mut() {
                Some(w) => rules.normalize_traced(t, env, w),
                None => rules.normalize(t, env),
            };
            r.unwrap_or_else(|e| {
                err.get_or_insert(e);
                t.clone()
            })
        });
        match err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }

    /// Tries to discharge a `require` clause.
    pub fn prove(&self, req: &Term, env: &TypeEnv) -> Result<bool, AlgorithmError> {
        match req {
            Term::Call(name, args) if name == "isInvertible" && args.len() == 1 => {
                let m = self.rules.normalize(&args[0], env)?;
                Ok(provably_invertible(&m, env))
            }
            _ => Ok(false),
        }
    }
}

fn stmt_to_string_trim(s: &Stmt) -> String {
    let mut out = String::new();
    stmt_to_string(s, 0, &mut out);
    out.trim().to_string()
}

fn find_inverse_stmt(s: &Stmt) -> Stmt {
    match s {
        Stmt::While { body, .. } => body
            .iter()
            .find(|b| b.contains_inverse())
            .map(find_inverse_stmt)
            .unwrap_or_else(|| s.clone()),
        _ => s.clone(),
    }
}

/// Depth-first search for the first statement accepted by `pred`,
/// recording its position as a path of indices.
fn find_match(stmts: &[Stmt], path: &mut Vec<usize>, pred: &mut dyn FnMut(&Stmt) -> bool) -> bool {
    for (i, s) in stmts.iter().enumerate() {
        path.push(i);
        if pred(s) {
            return true;
        }
        if let Stmt::While { body, .. } = s {
            if find_match(body, path, pred) {
                return true;
            }
        }
        path.pop();
    }
    false
}

fn splice(stmts: &mut Vec<Stmt>, path: &[usize], body: Vec<Stmt>) {
    match path {
        [i] => {
            stmts.splice(*i..=*i, body);
        }
        [i, rest @ ..] => {
            if let Stmt::While { body: inner, .. } = &mut stmts[*i] {
                splice(inner, rest, body);
            }
        }
        [] => {}
    }
}

fn subst_terms(t: &Term, map: &HashMap<String, Term>) -> Term {
    t.map_bottom_up(&mut |n| match n {
        Term::Sym(ref s) => map.get(s).cloned().unwrap_or(n),
        other => other,
    })
}

/// Forward-substitutes top-level assignments to the given matrix locals.
fn inline_matrices(stmts: &mut Vec<Stmt>, locals: &HashSet<String>) {
    let mut defs: HashMap<String, Term> = HashMap::new();
    let mut out = Vec::new();
    for s in stmts.drain(..) {
        let s = s.map_terms(&mut |t| subst_terms(t, &defs));
        match s {
            Stmt::Assign { ref lhs, ref rhs, .. } if locals.contains(lhs) => {
                defs.insert(lhs.clone(), rhs.clone());
            }
            other => out.push(other),
        }
    }
    *stmts = out;
}

/// Nonzero scalars we can certify without knowing parameter values.
fn provably_nonzero(a: &Term) -> bool {
    match a {
        Term::Lit(c) => c.norm() > 0.0,
        Term::ImagUnit => true,
        Term::Mul(x, y) | Term::Div(x, y) | Term::ScalarMul(x, y) => provably_nonzero(x) && provably_nonzero(y),
        Term::Neg(x) => provably_nonzero(x),
        _ => false,
    }
}

/// Number of imaginary-unit factors in a product of otherwise real
/// factors; `None` if some factor is not known to be real.
fn imaginary_order(a: &Term, env: &TypeEnv) -> Option<usize> {
    match a {
        Term::ImagUnit => Some(1),
        Term::Mul(x, y) | Term::ScalarMul(x, y) => Some(imaginary_order(x, env)? + imaginary_order(y, env)?),
        Term::Neg(x) => imaginary_order(x, env),
        t if is_real(t, env) => Some(0),
        _ => None,
    }
}

/// Structural invertibility certificate for a normalized matrix term.
pub fn provably_invertible(m: &Term, env: &TypeEnv) -> bool {
    if is_identity_like(m) {
        return true;
    }
    match m {
        Term::Gamma(_) | Term::Gamma5 | Term::Shift(..) | Term::Link(..) => true,
        Term::ScalarMul(a, x) => provably_nonzero(a) && provably_invertible(x, env),
        Term::DirectSum { body, .. } | Term::Inverse(body) | Term::Dagger(body) | Term::Transpose(body) => {
            provably_invertible(body, env)
        }
        Term::Neg(x) => provably_invertible(x, env),
        Term::Tensor(..) => flatten(m, Op::Tensor).iter().all(|f| provably_invertible(f, env)),
        Term::Mul(..) => flatten(m, Op::Mul).iter().all(|f| provably_invertible(f, env)),
        Term::Add(..) => {
            // alpha I + beta (I (x) gamma5) with alpha real nonzero and beta
            // imaginary: eigenvalues alpha +- beta never vanish.
            let parts = flatten(m, Op::Add);
            let [p, q] = parts.as_slice() else {
                return false;
            };
            let split = |t: &Term| match t {
                Term::ScalarMul(a, x) => ((**a).clone(), (**x).clone()),
                other => (Term::real(1.0), other.clone()),
            };
            for (u, v) in [(p, q), (q, p)] {
                let (alpha, a) = split(u);
                let (beta, b) = split(v);
                if is_identity_like(&a)
                    && is_identity_gamma5(&b)
                    && is_real(&alpha, env)
                    && provably_nonzero(&alpha)
                    && imaginary_order(&beta, env).is_some_and(|k| k % 2 == 1)
                {
                    return true;
                }
            }
            false
        }
        _ => false,
    }
}
