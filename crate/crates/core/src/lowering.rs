//! Lowering of an instantiated plan to LoopIR: explicit site loops over
//! lattice vectors, kernel calls, reductions and scalar updates.

use std::collections::{BTreeSet, HashMap};
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::algorithms::Plan;
use crate::ir::*;
use crate::printer::term_to_string;
use crate::shape::{Shape, TypeEnv};
use crate::stencil::{Dom, HopBuilder, HopError, LinOp, Stencil};

/// Complex components per lattice site (colour x spin).
pub const BLOCK: usize = 12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LowerError {
    #[error("cannot lower {0}")]
    UnloweredConstruct(String),
    #[error("race on `{var}` in loop {index}: written and read at other sites")]
    RaceDetected { var: String, index: usize },
}

/// Memory order of vector components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Layout {
    /// `[site][colour][spin]`.
    #[default]
    Nested,
    /// `[colour*4+spin][site]`.
    Linear,
}

impl Layout {
    pub fn parse(s: &str) -> Option<Layout> {
        match s {
            "nested" => Some(Layout::Nested),
            "linear" => Some(Layout::Linear),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Layout::Nested => "nested",
            Layout::Linear => "linear",
        }
    }

    /// Storage index of component `k` at site index `i` of `n` sites.
    pub fn index(self, i: usize, k: usize, n: usize) -> usize {
        match self {
            Layout::Nested => i * BLOCK + k,
            Layout::Linear => k * n + i,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VecDecl {
    pub name: String,
    pub dom: Dom,
    pub block: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Kernel {
    /// `out = sum c_k v_k` per site; spinor add, subtract and scalar-mul.
    LinComb { out: String, terms: Vec<(Term, String)> },
    /// Site-local colour-spin matrix product.
    ColorSpinMatmul { out: String, input: String, stencil: usize },
    /// Neighbour gather through links with spin matrices.
    NeighborGather { out: String, input: String, stencil: usize },
    /// `target += <a|b>` restricted to the site (local-reduce-dot).
    LocalReduceDot { target: String, a: String, b: String },
}

impl Kernel {
    pub fn name(&self) -> &'static str {
        match self {
            Kernel::LinComb { terms, .. } => match terms.as_slice() {
                [_] => "scalar-mul",
                [_, (c, _)] if matches!(c, Term::Lit(x) if x.re < 0.0) => "spinor-sub",
                _ => "spinor-add",
            },
            Kernel::ColorSpinMatmul { .. } => "colorspin-matmul",
            Kernel::NeighborGather { .. } => "neighbor-gather",
            Kernel::LocalReduceDot { .. } => "local-reduce-dot",
        }
    }

    pub fn writes(&self) -> Option<&str> {
        match self {
            Kernel::LinComb { out, .. }
            | Kernel::ColorSpinMatmul { out, .. }
            | Kernel::NeighborGather { out, .. } => Some(out),
            Kernel::LocalReduceDot { .. } => None,
        }
    }

    /// Vectors read, with a flag telling whether the read may touch a
    /// different site than the one being written.
    fn reads(&self, ir: &LoopIr) -> Vec<(String, bool)> {
        match self {
            Kernel::LinComb { terms, .. } => terms.iter().map(|(_, v)| (v.clone(), false)).collect(),
            Kernel::ColorSpinMatmul { input, stencil, .. } => {
                let s = &ir.stencils[*stencil];
                vec![(input.clone(), s.to != s.from)]
            }
            Kernel::NeighborGather { input, .. } => vec![(input.clone(), true)],
            Kernel::LocalReduceDot { a, b, .. } => vec![(a.clone(), false), (b.clone(), false)],
        }
    }

    fn scalars(&self) -> Vec<String> {
        match self {
            Kernel::LinComb { terms, .. } => terms.iter().flat_map(|(c, _)| c.symbols()).collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    ParallelFor {
        dom: Dom,
        body: Vec<Kernel>,
        /// Scalars reduced across sites (targets of `LocalReduceDot`).
        reductions: Vec<String>,
        /// Per-iteration temporaries.
        private: Vec<String>,
    },
    /// `target = sum over dom of <a|b>`, before promotion into a loop.
    Reduction { dom: Dom, target: String, a: String, b: String },
    ScalarAssign { target: String, expr: Term },
    SeqWhile { cond: Cond, body: Vec<Node> },
    /// Out-of-line call into a bound library routine.
    KernelCall { routine: String, args: Vec<String> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopIr {
    pub layout: Layout,
    pub vectors: Vec<VecDecl>,
    pub scalars: Vec<String>,
    /// Externally supplied scalars (`kappa`, `mu`, `epsilon`, ...).
    pub params: Vec<String>,
    pub inputs: Vec<String>,
    pub output: String,
    pub stencils: Vec<Stencil>,
    pub body: Vec<Node>,
}

impl LoopIr {
    pub fn decl(&self, name: &str) -> Option<&VecDecl> {
        self.vectors.iter().find(|d| d.name == name)
    }

    pub fn dom(&self, name: &str) -> Dom {
        self.decl(name).map_or(Dom::Full, |d| d.dom)
    }
}

struct Lowerer<'a> {
    env: &'a TypeEnv,
    doms: HashMap<String, Dom>,
    scalars: BTreeSet<String>,
    stencils: Vec<Stencil>,
    temps: usize,
    vectors: Vec<VecDecl>,
}

type LinComb = Vec<(Term, String)>;

fn unlowered(e: HopError) -> LowerError {
    match e {
        HopError::Split => LowerError::UnloweredConstruct("operator product".into()),
        HopError::Unsupported(s) => LowerError::UnloweredConstruct(s),
    }
}

fn scale(c: &Term, lc: LinComb) -> LinComb {
    lc.into_iter().map(|(k, v)| (crate::stencil::mul_coef(c, &k), v)).collect()
}

impl<'a> Lowerer<'a> {
    fn is_vector(&self, name: &str) -> bool {
        self.doms.contains_key(name) || self.env.symbols.get(name).is_some_and(Shape::is_vector)
    }

    fn declare(&mut self, name: &str, dom: Dom) {
        self.doms.insert(name.to_string(), dom);
        if !self.vectors.iter().any(|d| d.name == name) {
            self.vectors.push(VecDecl {
                name: name.to_string(),
                dom,
                block: BLOCK,
            });
        }
    }

    fn temp(&mut self, dom: Dom) -> String {
        let name = format!("tmp{}", self.temps);
        self.temps += 1;
        self.declare(&name, dom);
        name
    }

    fn is_vector_expr(&self, t: &Term) -> bool {
        match t {
            Term::Sym(s) => self.is_vector(s),
            Term::Mul(_, b) | Term::ScalarMul(_, b) => self.is_vector_expr(b),
            Term::Add(a, b) | Term::Sub(a, b) => self.is_vector_expr(a) || self.is_vector_expr(b),
            Term::Neg(a) => self.is_vector_expr(a),
            _ => false,
        }
    }

    /// Domain of a vector expression, when it can be told.
    fn dom_of(&self, t: &Term) -> Option<Dom> {
        match t {
            Term::Sym(s) => self.doms.get(s).copied(),
            Term::Mul(m, _) => HopBuilder::new(self.env).linop(m).ok().map(|l| l.to()),
            Term::ScalarMul(_, a) | Term::Neg(a) => self.dom_of(a),
            Term::Add(a, b) | Term::Sub(a, b) => self.dom_of(a).or_else(|| self.dom_of(b)),
            _ => None,
        }
    }

    /// Assigns domains to every vector assigned in the program.
    fn infer_domains(&mut self, stmts: &[Stmt]) {
        for _ in 0..3 {
            walk(stmts, &mut |s| {
                if let Stmt::Assign { lhs, rhs, .. } = s {
                    if self.is_vector(lhs) || self.is_vector_expr(rhs) {
                        if let Some(d) = self.dom_of(rhs) {
                            self.doms.entry(lhs.clone()).or_insert(d);
                        }
                    }
                }
            });
        }
    }

    /// Lowers scalar expressions, turning inner products into reductions.
    fn scalar(&mut self, t: &Term, out: &mut Vec<Node>) -> Result<Term, LowerError> {
        Ok(match t {
            Term::Inner(a, b) => {
                let a = self.materialize(a, out)?;
                let b = self.materialize(b, out)?;
                let target = format!("dot{}", self.temps);
                self.temps += 1;
                self.scalars.insert(target.clone());
                out.push(Node::Reduction {
                    dom: self.doms[&a],
                    target: target.clone(),
                    a,
                    b,
                });
                Term::Sym(target)
            }
            Term::Lit(_) | Term::ImagUnit | Term::Zero => t.clone(),
            Term::Sym(s) if !self.is_vector(s) => t.clone(),
            Term::Add(..) | Term::Sub(..) | Term::Mul(..) | Term::ScalarMul(..) | Term::Div(..) | Term::Neg(..) | Term::Dagger(..) => {
                let kids = t
                    .children()
                    .into_iter()
                    .map(|k| self.scalar(k, out))
                    .collect::<Result<Vec<_>, _>>()?;
                t.with_children(kids)
            }
            other => return Err(LowerError::UnloweredConstruct(term_to_string(other))),
        })
    }

    /// A named vector holding the value of `t`.
    fn materialize(&mut self, t: &Term, out: &mut Vec<Node>) -> Result<String, LowerError> {
        let lc = self.vector(t, out)?;
        if let [(c, v)] = lc.as_slice() {
            if matches!(c, Term::Lit(x) if *x == Complex::new(1.0, 0.0)) {
                return Ok(v.clone());
            }
        }
        let dom = self
            .dom_of(t)
            .or_else(|| lc.first().map(|(_, v)| self.doms[v]))
            .unwrap_or(Dom::Full);
        let tmp = self.temp(dom);
        out.push(Node::ParallelFor {
            dom,
            body: vec![Kernel::LinComb {
                out: tmp.clone(),
                terms: lc,
            }],
            reductions: Vec::new(),
            private: Vec::new(),
        });
        Ok(tmp)
    }

    fn vector(&mut self, t: &Term, out: &mut Vec<Node>) -> Result<LinComb, LowerError> {
        Ok(match t {
            Term::Zero => Vec::new(),
            Term::Sym(s) if self.is_vector(s) => vec![(Term::real(1.0), s.clone())],
            Term::Add(a, b) => {
                let mut x = self.vector(a, out)?;
                x.extend(self.vector(b, out)?);
                x
            }
            Term::Sub(a, b) => {
                let mut x = self.vector(a, out)?;
                let y = self.vector(b, out)?;
                x.extend(scale(&Term::real(-1.0), y));
                x
            }
            Term::Neg(a) => {
                let x = self.vector(a, out)?;
                scale(&Term::real(-1.0), x)
            }
            Term::ScalarMul(c, a) => {
                let c = self.scalar(c, out)?;
                let x = self.vector(a, out)?;
                scale(&c, x)
            }
            Term::Mul(m, v) if self.is_vector_expr(v) => {
                let src = self.materialize(v, out)?;
                let op = HopBuilder::new(self.env).linop(m).map_err(unlowered)?;
                self.apply(&op, &src, out)?
            }
            other => return Err(LowerError::UnloweredConstruct(term_to_string(other))),
        })
    }

    fn apply(&mut self, op: &LinOp, src: &str, out: &mut Vec<Node>) -> Result<LinComb, LowerError> {
        Ok(match op {
            LinOp::Hops(s) => {
                if self.doms.get(src).is_some_and(|d| *d != s.from) {
                    return Err(LowerError::UnloweredConstruct(format!(
                        "operator on {} applied to `{src}` on {}",
                        s.from, self.doms[src]
                    )));
                }
                let idx = match self.stencils.iter().position(|x| x == s) {
                    Some(i) => i,
                    None => {
                        self.stencils.push(s.clone());
                        self.stencils.len() - 1
                    }
                };
                let dst = self.temp(s.to);
                let kernel = if s.is_local() {
                    Kernel::ColorSpinMatmul {
                        out: dst.clone(),
                        input: src.to_string(),
                        stencil: idx,
                    }
                } else {
                    Kernel::NeighborGather {
                        out: dst.clone(),
                        input: src.to_string(),
                        stencil: idx,
                    }
                };
                out.push(Node::ParallelFor {
                    dom: s.to,
                    body: vec![kernel],
                    reductions: Vec::new(),
                    private: Vec::new(),
                });
                vec![(Term::real(1.0), dst)]
            }
            LinOp::Compose(a, b) => {
                let mid = self.apply(b, src, out)?;
                let mid = self.named(mid, b.to(), out);
                self.apply(a, &mid, out)?
            }
            LinOp::Sum(xs) => {
                let mut acc = Vec::new();
                for x in xs {
                    acc.extend(self.apply(x, src, out)?);
                }
                acc
            }
            LinOp::Scale(c, a) => {
                let x = self.apply(a, src, out)?;
                scale(c, x)
            }
        })
    }

    fn named(&mut self, lc: LinComb, dom: Dom, out: &mut Vec<Node>) -> String {
        if let [(Term::Lit(c), v)] = lc.as_slice() {
            if *c == Complex::new(1.0, 0.0) {
                return v.clone();
            }
        }
        let tmp = self.temp(dom);
        out.push(Node::ParallelFor {
            dom,
            body: vec![Kernel::LinComb {
                out: tmp.clone(),
                terms: lc,
            }],
            reductions: Vec::new(),
            private: Vec::new(),
        });
        tmp
    }

    fn stmts(&mut self, stmts: &[Stmt], out: &mut Vec<Node>) -> Result<(), LowerError> {
        for s in stmts {
            match s {
                Stmt::Assign { lhs, rhs, .. } if self.is_vector(lhs) || self.is_vector_expr(rhs) => {
                    let dom = self.doms.get(lhs).copied().unwrap_or(Dom::Full);
                    self.declare(lhs, dom);
                    let lc = self.vector(rhs, out)?;
                    if let Some((_, v)) = lc.iter().find(|(_, v)| self.doms[v] != dom) {
                        return Err(LowerError::UnloweredConstruct(format!(
                            "`{lhs}` on {dom} assigned from `{v}` on {}",
                            self.doms[v]
                        )));
                    }
                    out.push(Node::ParallelFor {
                        dom,
                        body: vec![Kernel::LinComb {
                            out: lhs.clone(),
                            terms: lc,
                        }],
                        reductions: Vec::new(),
                        private: Vec::new(),
                    });
                }
                Stmt::Assign { lhs, rhs, .. } => {
                    let expr = self.scalar(rhs, out)?;
                    self.scalars.insert(lhs.clone());
                    out.push(Node::ScalarAssign {
                        target: lhs.clone(),
                        expr,
                    });
                }
                Stmt::While { cond, body, .. } => {
                    let mut pre = Vec::new();
                    let lhs = self.scalar(&cond.lhs, &mut pre)?;
                    let rhs = self.scalar(&cond.rhs, &mut pre)?;
                    if !pre.is_empty() {
                        return Err(LowerError::UnloweredConstruct(
                            "inner product in a loop condition".into(),
                        ));
                    }
                    let mut inner = Vec::new();
                    self.stmts(body, &mut inner)?;
                    out.push(Node::SeqWhile {
                        cond: Cond {
                            lhs,
                            op: cond.op,
                            rhs,
                        },
                        body: inner,
                    });
                }
            }
        }
        Ok(())
    }
}

fn walk(stmts: &[Stmt], f: &mut dyn FnMut(&Stmt)) {
    for s in stmts {
        f(s);
        if let Stmt::While { body, .. } = s {
            walk(body, f);
        }
    }
}

/// Lowers statements over the environment's vectors and scalars. `output`
/// names the result vector; every vector read before being written is an
/// input.
pub fn lower_stmts(stmts: &[Stmt], env: &TypeEnv, output: &str, layout: Layout) -> Result<LoopIr, LowerError> {
    let mut lw = Lowerer {
        env,
        doms: HashMap::new(),
        scalars: BTreeSet::new(),
        stencils: Vec::new(),
        temps: 0,
        vectors: Vec::new(),
    };
    let mut globals: Vec<&String> = env.symbols.iter().filter(|(_, s)| s.is_vector()).map(|(n, _)| n).collect();
    globals.sort();
    for g in &globals {
        if let Some(Shape::Vector(set)) = env.symbols.get(*g) {
            let dom = match set.lattice_factor() {
                Some((_, crate::shape::SetAtom::Lattice { parity, .. })) => Dom::of(*parity),
                _ => Dom::Full,
            };
            if !set.is_generic() {
                lw.doms.insert((*g).clone(), dom);
            }
        }
    }
    lw.infer_domains(stmts);

    let mut assigned = BTreeSet::new();
    let mut inputs = BTreeSet::new();
    walk(stmts, &mut |s| {
        if let Stmt::Assign { lhs, rhs, .. } = s {
            for v in rhs.symbols() {
                if !assigned.contains(&v) && lw.is_vector(&v) {
                    inputs.insert(v);
                }
            }
            assigned.insert(lhs.clone());
        }
    });
    for i in &inputs {
        let d = lw.doms.get(i).copied().unwrap_or(Dom::Full);
        lw.declare(i, d);
    }
    lw.declare(output, lw.doms.get(output).copied().unwrap_or(Dom::Full));

    let mut body = Vec::new();
    lw.stmts(stmts, &mut body)?;

    let mut params: BTreeSet<String> = BTreeSet::new();
    let mut collect = |t: &Term| {
        for s in t.symbols() {
            if !lw.is_vector(&s) && !lw.scalars.contains(&s) {
                params.insert(s);
            }
        }
    };
    visit_terms(&body, &lw.stencils, &mut collect);
    let mut vectors = lw.vectors;
    vectors.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(LoopIr {
        layout,
        vectors,
        scalars: lw.scalars.into_iter().collect(),
        params: params.into_iter().collect(),
        inputs: inputs.into_iter().collect(),
        output: output.to_string(),
        stencils: lw.stencils,
        body,
    })
}

fn visit_terms(nodes: &[Node], stencils: &[Stencil], f: &mut dyn FnMut(&Term)) {
    for s in stencils {
        for g in &s.groups {
            for (c, _) in &g.spin {
                f(c);
            }
        }
    }
    fn go(nodes: &[Node], f: &mut dyn FnMut(&Term)) {
        for n in nodes {
            match n {
                Node::ParallelFor { body, .. } => {
                    for k in body {
                        if let Kernel::LinComb { terms, .. } = k {
                            for (c, _) in terms {
                                f(c);
                            }
                        }
                    }
                }
                Node::ScalarAssign { expr, .. } => f(expr),
                Node::SeqWhile { cond, body } => {
                    f(&cond.lhs);
                    f(&cond.rhs);
                    go(body, f);
                }
                Node::Reduction { .. } | Node::KernelCall { .. } => {}
            }
        }
    }
    go(nodes, f);
}

/// Lowers an inverse-free plan; the goal vector `x` is the output.
pub fn lower(plan: &Plan, layout: Layout) -> Result<LoopIr, LowerError> {
    if plan.contains_inverse() {
        return Err(LowerError::UnloweredConstruct("matrix inverse".into()));
    }
    lower_stmts(&plan.stmts, &plan.env, "x", layout)
}

fn loop_reads(ir: &LoopIr, body: &[Kernel], dom: Dom) -> Vec<(String, bool)> {
    body.iter()
        .flat_map(|k| k.reads(ir))
        .map(|(v, far)| {
            let far = far || ir.dom(&v) != dom;
            (v, far)
        })
        .collect()
}

fn loop_writes(body: &[Kernel]) -> Vec<String> {
    body.iter().filter_map(|k| k.writes().map(str::to_string)).collect()
}

fn loop_scalars(body: &[Kernel]) -> Vec<String> {
    body.iter().flat_map(Kernel::scalars).collect()
}

/// Whether loop `b` may run in the same site loop as `a`.
fn fusable(ir: &LoopIr, a: &[Kernel], a_red: &[String], b: &[Kernel], dom: Dom) -> bool {
    let (wa, wb) = (loop_writes(a), loop_writes(b));
    let far = |body: &[Kernel]| -> Vec<String> {
        loop_reads(ir, body, dom).into_iter().filter(|(_, f)| *f).map(|(v, _)| v).collect()
    };
    let (fa, fb) = (far(a), far(b));
    fb.iter().all(|v| !wa.contains(v))
        && fa.iter().all(|v| !wb.contains(v))
        && fb.iter().all(|v| !wb.contains(v))
        && loop_scalars(b).iter().all(|s| !a_red.contains(s))
}

fn as_loop(n: &Node) -> Option<(Dom, Vec<Kernel>, Vec<String>)> {
    match n {
        Node::ParallelFor { dom, body, reductions, .. } => Some((*dom, body.clone(), reductions.clone())),
        Node::Reduction { dom, target, a, b } => Some((
            *dom,
            vec![Kernel::LocalReduceDot {
                target: target.clone(),
                a: a.clone(),
                b: b.clone(),
            }],
            vec![target.clone()],
        )),
        _ => None,
    }
}

fn fuse_list(ir: &LoopIr, nodes: &[Node]) -> Vec<Node> {
    let mut out: Vec<Node> = Vec::new();
    let mut rest: Vec<Node> = nodes.to_vec();
    while !rest.is_empty() {
        let first = rest.remove(0);
        let Some((dom, mut body, mut reds)) = as_loop(&first) else {
            out.push(match first {
                Node::SeqWhile { cond, body } => Node::SeqWhile {
                    cond,
                    body: fuse_list(ir, &body),
                },
                other => other,
            });
            continue;
        };
        let private = match &first {
            Node::ParallelFor { private, .. } => private.clone(),
            _ => Vec::new(),
        };
        // Pull later loops forward past independent scalar updates.
        let mut skipped: Vec<(String, Vec<String>)> = Vec::new();
        let mut j = 0;
        while j < rest.len() {
            match &rest[j] {
                Node::ScalarAssign { target, expr } => {
                    skipped.push((target.clone(), expr.symbols()));
                    j += 1;
                }
                n => {
                    let Some((d2, b2, r2)) = as_loop(n) else { break };
                    let reads_skipped = loop_scalars(&b2).iter().any(|s| skipped.iter().any(|(t, _)| t == s));
                    let feeds_skipped = r2.iter().any(|r| skipped.iter().any(|(_, deps)| deps.contains(r)));
                    if d2 != dom || reads_skipped || feeds_skipped || !fusable(ir, &body, &reds, &b2, dom) {
                        break;
                    }
                    body.extend(b2);
                    reds.extend(r2);
                    rest.remove(j);
                }
            }
        }
        out.push(Node::ParallelFor {
            dom,
            body,
            reductions: reds,
            private,
        });
    }
    out
}

/// Merges adjacent site loops over the same domain when no neighbour
/// gather crosses them, and moves reductions into the loops that produce
/// their operands. Idempotent.
pub fn fuse_and_promote(ir: &LoopIr) -> LoopIr {
    let mut cur = ir.clone();
    loop {
        let next = fuse_list(&cur, &cur.body);
        if next == cur.body {
            return cur;
        }
        cur.body = next;
    }
}

/// Temporaries every gather iteration needs for itself.
pub const GATHER_PRIVATES: [&str; 3] = ["nb", "acc", "link"];

/// Marks per-iteration temporaries private and rejects loops that read a
/// vector at other sites while writing it.
pub fn privatize(ir: &LoopIr) -> Result<LoopIr, LowerError> {
    fn go(ir: &LoopIr, nodes: &[Node], counter: &mut usize) -> Result<Vec<Node>, LowerError> {
        let mut out = Vec::new();
        for n in nodes {
            out.push(match n {
                Node::ParallelFor { dom, body, reductions, .. } => {
                    let idx = *counter;
                    *counter += 1;
                    let writes = loop_writes(body);
                    for (v, far) in loop_reads(ir, body, *dom) {
                        if far && writes.contains(&v) {
                            return Err(LowerError::RaceDetected { var: v, index: idx });
                        }
                    }
                    let stencil = body
                        .iter()
                        .any(|k| matches!(k, Kernel::NeighborGather { .. } | Kernel::ColorSpinMatmul { .. }));
                    Node::ParallelFor {
                        dom: *dom,
                        body: body.clone(),
                        reductions: reductions.clone(),
                        private: if stencil {
                            GATHER_PRIVATES.iter().map(|s| s.to_string()).collect()
                        } else {
                            Vec::new()
                        },
                    }
                }
                Node::SeqWhile { cond, body } => Node::SeqWhile {
                    cond: cond.clone(),
                    body: go(ir, body, counter)?,
                },
                other => other.clone(),
            });
        }
        Ok(out)
    }
    let mut out = ir.clone();
    out.body = go(ir, &ir.body, &mut 0)?;
    Ok(out)
}

/// Runs the three passes in order.
pub fn lower_full(plan: &Plan, layout: Layout) -> Result<LoopIr, LowerError> {
    privatize(&fuse_and_promote(&lower(plan, layout)?))
}

fn off_str(o: &[i32; 4]) -> String {
    let parts: Vec<String> = o
        .iter()
        .zip(["x", "y", "z", "t"])
        .filter(|(v, _)| **v != 0)
        .map(|(v, a)| format!("{v:+}{a}"))
        .collect();
    if parts.is_empty() {
        "0".into()
    } else {
        parts.join("")
    }
}

impl fmt::Display for LoopIr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "layout {}", self.layout.name())?;
        for d in &self.vectors {
            writeln!(f, "vector {} : {} x {}", d.name, d.dom, d.block)?;
        }
        if !self.scalars.is_empty() {
            writeln!(f, "scalar {}", self.scalars.join(", "))?;
        }
        if !self.params.is_empty() {
            writeln!(f, "param {}", self.params.join(", "))?;
        }
        writeln!(f, "input {}", self.inputs.join(", "))?;
        writeln!(f, "output {}", self.output)?;
        for (i, s) in self.stencils.iter().enumerate() {
            writeln!(f, "stencil {i} : {} <- {}", s.to, s.from)?;
            for g in &s.groups {
                let mut line = format!("  hop {}", off_str(&g.offset));
                if let Some(p) = g.mask {
                    let _ = write!(line, " if {}", p.keyword());
                }
                for l in &g.links {
                    let _ = write!(
                        line,
                        " U({}{})[{}]{}",
                        if l.neg { "-" } else { "+" },
                        ["x", "y", "z", "t"][l.axis as usize],
                        off_str(&l.at),
                        if l.dagger { "^dagger" } else { "" }
                    );
                }
                let _ = write!(line, " spin terms {}", g.spin.len());
                writeln!(f, "{line}")?;
            }
        }
        fn nodes(f: &mut fmt::Formatter<'_>, ns: &[Node], depth: usize) -> fmt::Result {
            let pad = "  ".repeat(depth);
            for n in ns {
                match n {
                    Node::ParallelFor { dom, body, reductions, private } => {
                        let mut head = format!("{pad}parallel for site in {dom}");
                        if !private.is_empty() {
                            let _ = write!(head, " private({})", private.join(", "));
                        }
                        if !reductions.is_empty() {
                            let _ = write!(head, " reduce(+: {})", reductions.join(", "));
                        }
                        writeln!(f, "{head} {{")?;
                        for k in body {
                            let args = match k {
                                Kernel::LinComb { out, terms } => format!(
                                    "{out} = {}",
                                    if terms.is_empty() {
                                        "0".to_string()
                                    } else {
                                        terms
                                            .iter()
                                            .map(|(c, v)| format!("({}) {v}", term_to_string(c)))
                                            .collect::<Vec<_>>()
                                            .join(" + ")
                                    }
                                ),
                                Kernel::ColorSpinMatmul { out, input, stencil }
                                | Kernel::NeighborGather { out, input, stencil } => {
                                    format!("{out} = stencil{stencil}({input})")
                                }
                                Kernel::LocalReduceDot { target, a, b } => format!("{target} += <{a}|{b}>"),
                            };
                            writeln!(f, "{pad}  {} {args}", k.name())?;
                        }
                        writeln!(f, "{pad}}}")?;
                    }
                    Node::Reduction { dom, target, a, b } => {
                        writeln!(f, "{pad}reduce {target} = <{a}|{b}> over {dom}")?
                    }
                    Node::ScalarAssign { target, expr } => {
                        writeln!(f, "{pad}{target} := {}", term_to_string(expr))?
                    }
                    Node::SeqWhile { cond, body } => {
                        writeln!(
                            f,
                            "{pad}while {} {} {} {{",
                            term_to_string(&cond.lhs),
                            match cond.op {
                                CmpOp::Gt => ">",
                                CmpOp::Lt => "<",
                            },
                            term_to_string(&cond.rhs)
                        )?;
                        nodes(f, body, depth + 1)?;
                        writeln!(f, "{pad}}}")?;
                    }
                    Node::KernelCall { routine, args } => writeln!(f, "{pad}call {routine}({})", args.join(", "))?,
                }
            }
            Ok(())
        }
        nodes(f, &self.body, 0)
    }
}
