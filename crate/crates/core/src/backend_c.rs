//! C/OpenMP code generation from LoopIR, library-call matching, and a
//! harness that compiles the result and compares it with the interpreter.
//!
//! The emitted loops mirror the interpreter operation for operation:
//! complex products use the same formulas, division goes through the
//! runtime's `qr_div`, and reductions accumulate fixed 64-site blocks that
//! are then added in block order. With floating-point contraction off the
//! compiled program reproduces the interpreter's bits on the same inputs.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

use thiserror::Error;

use crate::gauge::{save_vector, GaugeConfig, GaugeError};
use crate::ir::*;
use crate::lowering::{Kernel, Layout, LoopIr, Node, GATHER_PRIVATES};
use crate::parser::parse_stmt;
use crate::printer::{stmt_to_string, term_to_string};
use crate::stencil::{Dom, Stencil};
use crate::vm::{parallel_execute, ExecOptions, RunParams, VmError};

pub const RUNTIME_H: &str = include_str!("../runtime/qiral_runtime.h");
pub const RUNTIME_C: &str = include_str!("../runtime/qiral_runtime.c");

/// Routines the shipped runtime defines with the binding calling convention.
const RUNTIME_ROUTINES: [&str; 1] = ["dgemm"];

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("kernel `{0}` has no runtime function and no library binding")]
    UnboundKernel(String),
    #[error("binding `{pattern}`: {reason}")]
    BadBinding { pattern: String, reason: String },
    #[error("cannot emit {0}")]
    Unsupported(String),
    #[error("C compilation failed:\n{0}")]
    CompileFailed(String),
    #[error("compiled program failed: {0}")]
    RunFailed(String),
    #[error("compiled result differs from the interpreter: {0}")]
    RuntimeMismatch(DiffReport),
    #[error(transparent)]
    Vm(#[from] VmError),
    #[error(transparent)]
    Gauge(#[from] GaugeError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// A rule mapping a statement pattern to an external routine, such as
/// `C = A * B` to `dgemm(A, B, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LibraryBinding {
    /// Result variable of the pattern.
    pub result: String,
    /// Operator variable (the matrix).
    pub operator: String,
    /// Operand variable (the vector).
    pub operand: String,
    pub callee: String,
    /// Pattern variables in call order.
    pub signature: Vec<String>,
}

impl LibraryBinding {
    /// Parses and checks a binding. The only supported pattern form is a
    /// matrix applied to a vector; the signature must name each of its
    /// three variables exactly once.
    pub fn new(pattern: &str, callee: &str, signature: &[&str]) -> Result<LibraryBinding, BackendError> {
        let src = pattern.trim().trim_end_matches(';');
        let stmt = parse_stmt(&format!("{src} ;")).map_err(|e| BackendError::BadBinding {
            pattern: pattern.to_string(),
            reason: e.to_string(),
        })?;
        let sig: Vec<String> = signature.iter().map(|s| s.to_string()).collect();
        LibraryBinding::checked(&stmt, callee, &sig, pattern)
    }

    /// A `bind ... => callee(...)` declaration from source.
    pub fn from_decl(d: &BindingDecl) -> Result<LibraryBinding, BackendError> {
        let mut text = String::new();
        stmt_to_string(&d.pattern, 0, &mut text);
        LibraryBinding::checked(&d.pattern, &d.callee, &d.args, text.trim())
    }

    fn checked(stmt: &Stmt, callee: &str, signature: &[String], label: &str) -> Result<LibraryBinding, BackendError> {
        let bad = |reason: &str| BackendError::BadBinding {
            pattern: label.to_string(),
            reason: reason.to_string(),
        };
        let Stmt::Assign { lhs, rhs, .. } = stmt else {
            return Err(bad("expected an assignment"));
        };
        let Term::Mul(a, b) = rhs else {
            return Err(bad("right side must be a product `A * B`"));
        };
        let (Term::Sym(a), Term::Sym(b)) = (&**a, &**b) else {
            return Err(bad("product operands must be variables"));
        };
        let vars: BTreeSet<&str> = [lhs.as_str(), a.as_str(), b.as_str()].into();
        if vars.len() != 3 {
            return Err(bad("pattern variables must be distinct"));
        }
        let sig: BTreeSet<&str> = signature.iter().map(String::as_str).collect();
        if sig != vars || signature.len() != 3 {
            return Err(bad("signature must list every pattern variable once"));
        }
        if callee.is_empty() || !callee.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(bad("callee is not a C identifier"));
        }
        Ok(LibraryBinding {
            result: lhs.clone(),
            operator: a.clone(),
            operand: b.clone(),
            callee: callee.to_string(),
            signature: signature.to_vec(),
        })
    }

    /// `(C = A * B) -> dgemm(A, B, C)`, served by the shipped runtime.
    pub fn dgemm() -> LibraryBinding {
        LibraryBinding::new("C = A * B", "dgemm", &["A", "B", "C"]).expect("well-formed binding")
    }

    /// The call replacing a colour-spin matmul kernel, if this binding
    /// covers it.
    fn call(&self, k: &Kernel) -> Option<String> {
        let Kernel::ColorSpinMatmul { out, input, stencil } = k else {
            return None;
        };
        let args: Vec<String> = self
            .signature
            .iter()
            .map(|r| {
                if *r == self.operator {
                    format!("&st{stencil}")
                } else if *r == self.operand {
                    vec_name(input)
                } else {
                    vec_name(out)
                }
            })
            .collect();
        Some(format!("{}({})", self.callee, args.join(", ")))
    }
}

/// Emission settings that are not part of the IR.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct EmitParams {
    /// Program name recorded in the output.
    pub name: String,
}

fn ident(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

fn vec_name(s: &str) -> String {
    format!("v_{}", ident(s))
}

fn scalar_name(s: &str) -> String {
    format!("s_{}", ident(s))
}

fn float(x: f64) -> String {
    if x.is_nan() {
        "NAN".into()
    } else if x.is_infinite() {
        if x > 0.0 { "INFINITY" } else { "-INFINITY" }.into()
    } else {
        format!("{x:?}")
    }
}

fn complex(c: Complex) -> String {
    format!("qr_c({}, {})", float(c.re), float(c.im))
}

fn c_dom(d: Dom) -> &'static str {
    match d {
        Dom::Full => "QR_FULL",
        Dom::Even => "QR_EVEN",
        Dom::Odd => "QR_ODD",
    }
}

fn n_dom(d: Dom) -> &'static str {
    if d == Dom::Full {
        "n_full"
    } else {
        "n_half"
    }
}

/// A scalar term as a C expression of type `qr_cplx`.
pub fn scalar_expr(t: &Term) -> Result<String, BackendError> {
    Ok(match t {
        Term::Lit(c) => complex(*c),
        Term::ImagUnit => "qr_c(0.0, 1.0)".into(),
        Term::Zero => "qr_c(0.0, 0.0)".into(),
        Term::Sym(s) => scalar_name(s),
        Term::Add(a, b) => format!("({} + {})", scalar_expr(a)?, scalar_expr(b)?),
        Term::Sub(a, b) => format!("({} - {})", scalar_expr(a)?, scalar_expr(b)?),
        Term::Mul(a, b) | Term::ScalarMul(a, b) => format!("({} * {})", scalar_expr(a)?, scalar_expr(b)?),
        Term::Div(a, b) => format!("qr_div({}, {})", scalar_expr(a)?, scalar_expr(b)?),
        Term::Neg(a) => format!("(-{})", scalar_expr(a)?),
        Term::Dagger(a) => format!("conj({})", scalar_expr(a)?),
        other => return Err(BackendError::Unsupported(format!("scalar `{}`", term_to_string(other)))),
    })
}

struct Emitter<'a> {
    ir: &'a LoopIr,
    bindings: &'a [LibraryBinding],
    out: String,
    depth: usize,
    loops: usize,
    /// Callees used, for prototypes.
    callees: BTreeSet<String>,
}

impl Emitter<'_> {
    fn line(&mut self, s: &str) {
        for _ in 0..self.depth {
            self.out.push_str("    ");
        }
        self.out.push_str(s);
        self.out.push('\n');
    }

    fn open(&mut self, s: &str) {
        self.line(s);
        self.depth += 1;
    }

    fn close(&mut self, s: &str) {
        self.depth -= 1;
        self.line(s);
    }

    fn check_finite(&mut self, var: &str, what: &str) {
        self.open(&format!("if (!qr_finite({var})) {{"));
        self.line(&format!("fprintf(stderr, \"qiral: non-finite value in `{what}`\\n\");"));
        self.line("status = QR_FAILED;");
        self.line("goto done;");
        self.close("}");
    }

    fn binding_for(&self, k: &Kernel) -> Option<(String, String)> {
        self.bindings.iter().find_map(|b| b.call(k).map(|c| (b.callee.clone(), c)))
    }

    fn nodes(&mut self, nodes: &[Node]) -> Result<(), BackendError> {
        for n in nodes {
            self.node(n)?;
        }
        Ok(())
    }

    fn node(&mut self, n: &Node) -> Result<(), BackendError> {
        match n {
            Node::ParallelFor { dom, body, private, .. } => {
                let mut segment: Vec<&Kernel> = Vec::new();
                for k in body {
                    if let Some((callee, call)) = self.binding_for(k) {
                        self.parallel(*dom, &segment, private)?;
                        segment.clear();
                        self.callees.insert(callee);
                        self.line(&format!("/* {} via library binding */", k.name()));
                        self.line(&format!("{call};"));
                    } else {
                        segment.push(k);
                    }
                }
                self.parallel(*dom, &segment, private)?;
            }
            Node::Reduction { dom, target, a, b } => {
                let k = Kernel::LocalReduceDot {
                    target: target.clone(),
                    a: a.clone(),
                    b: b.clone(),
                };
                self.parallel(*dom, &[&k], &[])?;
            }
            Node::ScalarAssign { target, expr } => {
                let v = scalar_name(target);
                self.line(&format!("{v} = {};", scalar_expr(expr)?));
                self.check_finite(&v, target);
            }
            Node::SeqWhile { cond, body } => {
                let it = format!("it{}", self.loops);
                self.loops += 1;
                let op = match cond.op {
                    CmpOp::Gt => ">",
                    CmpOp::Lt => "<",
                };
                let lhs = scalar_expr(&cond.lhs)?;
                let rhs = scalar_expr(&cond.rhs)?;
                self.open("{");
                self.line(&format!("long {it} = 0;"));
                self.open(&format!("while (creal({lhs}) {op} creal({rhs})) {{"));
                self.open(&format!("if ({it} >= p->max_iter) {{"));
                self.line("status = QR_MAX_ITER;");
                self.line("break;");
                self.close("}");
                self.nodes(body)?;
                self.line(&format!("{it}++;"));
                self.line(&format!("double res = cabs({lhs});"));
                self.open("if (!isfinite(res)) {");
                self.line("fprintf(stderr, \"qiral: non-finite residual\\n\");");
                self.line("status = QR_FAILED;");
                self.line("goto done;");
                self.close("}");
                self.line(&format!("qr_trace_push(tr, {it}, res);"));
                self.close("}");
                self.close("}");
            }
            Node::KernelCall { routine, args } => {
                let known = RUNTIME_ROUTINES.contains(&routine.as_str()) || self.bindings.iter().any(|b| &b.callee == routine);
                if !known {
                    return Err(BackendError::UnboundKernel(routine.clone()));
                }
                let args: Vec<String> = args.iter().map(|a| self.argument(a)).collect();
                self.callees.insert(routine.clone());
                self.line(&format!("{}({});", ident(routine), args.join(", ")));
            }
        }
        Ok(())
    }

    fn argument(&self, a: &str) -> String {
        if self.ir.decl(a).is_some() || self.ir.inputs.iter().any(|i| i == a) {
            vec_name(a)
        } else if a.strip_prefix("st").is_some_and(|n| n.parse::<usize>().is_ok_and(|n| n < self.ir.stencils.len())) {
            format!("&{a}")
        } else {
            scalar_name(a)
        }
    }

    /// One OpenMP loop over `dom` running `kernels` per site.
    fn parallel(&mut self, dom: Dom, kernels: &[&Kernel], private: &[String]) -> Result<(), BackendError> {
        if kernels.is_empty() {
            return Ok(());
        }
        let names: Vec<&str> = kernels.iter().map(|k| k.name()).collect();
        self.line(&format!("/* {dom}: {} */", names.join(", ")));
        self.open("{");
        self.line(&format!("const size_t n = {};", n_dom(dom)));
        let mut dots = Vec::new();
        for (ki, k) in kernels.iter().enumerate() {
            match k {
                Kernel::LinComb { terms, .. } => {
                    for (ti, (c, _)) in terms.iter().enumerate() {
                        self.line(&format!("const qr_cplx c{ki}_{ti} = {};", scalar_expr(c)?));
                    }
                }
                Kernel::LocalReduceDot { target, .. } => dots.push(ident(target)),
                _ => {}
            }
        }
        if !dots.is_empty() {
            self.line("const size_t nblocks = (n + QR_REDUCE_BLOCK - 1) / QR_REDUCE_BLOCK;");
            for d in &dots {
                self.line(&format!("double *re_{d} = calloc(nblocks + 1, sizeof(double));"));
                self.line(&format!("double *im_{d} = calloc(nblocks + 1, sizeof(double));"));
            }
        }
        let clause = if private.is_empty() {
            String::new()
        } else {
            let p: Vec<String> = private.iter().map(|s| ident(s)).collect();
            format!(" private({})", p.join(", "))
        };
        self.line(&format!("#pragma omp parallel for schedule(static, QR_REDUCE_BLOCK){clause}"));
        self.open("for (long i = 0; i < (long)n; i++) {");
        let mut gathers = 0;
        for (ki, k) in kernels.iter().enumerate() {
            match k {
                Kernel::LinComb { out, terms } => {
                    self.open("for (int k = 0; k < QR_BLOCK; k++) {");
                    self.line("qr_cplx z = 0;");
                    for (ti, (_, v)) in terms.iter().enumerate() {
                        self.line(&format!("z += c{ki}_{ti} * {}[IX(i, k, n)];", vec_name(v)));
                    }
                    self.line(&format!("{}[IX(i, k, n)] = z;", vec_name(out)));
                    self.close("}");
                }
                Kernel::ColorSpinMatmul { out, input, stencil } | Kernel::NeighborGather { out, input, stencil } => {
                    if matches!(k, Kernel::NeighborGather { .. }) {
                        gathers += 1;
                    }
                    self.line(&format!("qr_stencil_site(&st{stencil}, (size_t)i, {}, acc, nb, link);", vec_name(input)));
                    self.line(&format!("qr_store_site({}, (size_t)i, n, LAYOUT, acc);", vec_name(out)));
                }
                Kernel::LocalReduceDot { target, a, b } => {
                    let d = ident(target);
                    self.open("for (int k = 0; k < QR_BLOCK; k++) {");
                    self.line(&format!("qr_cplx z = conj({}[IX(i, k, n)]) * {}[IX(i, k, n)];", vec_name(a), vec_name(b)));
                    self.line(&format!("re_{d}[i / QR_REDUCE_BLOCK] += creal(z);"));
                    self.line(&format!("im_{d}[i / QR_REDUCE_BLOCK] += cimag(z);"));
                    self.close("}");
                }
            }
        }
        self.close("}");
        if gathers > 0 {
            self.line(&format!("p->gathers += {gathers} * (unsigned long long)n;"));
        }
        for (k, d) in dots.iter().enumerate() {
            let target = kernels
                .iter()
                .filter_map(|k| match k {
                    Kernel::LocalReduceDot { target, .. } => Some(target.as_str()),
                    _ => None,
                })
                .nth(k)
                .expect("one target per dot");
            self.open("{");
            self.line("double re = 0.0, im = 0.0;");
            self.open("for (size_t b = 0; b < nblocks; b++) {");
            self.line(&format!("re += re_{d}[b];"));
            self.line(&format!("im += im_{d}[b];"));
            self.close("}");
            self.line(&format!("free(re_{d});"));
            self.line(&format!("free(im_{d});"));
            self.line(&format!("{} = qr_c(re, im);", scalar_name(target)));
            self.close("}");
            self.check_finite(&scalar_name(target), target);
        }
        self.close("}");
        Ok(())
    }

    fn stencil_tables(&mut self, idx: usize, st: &Stencil) {
        self.line(&format!("/* stencil {idx}: {} <- {}, {} groups */", st.to, st.from, st.groups.len()));
        for (g, grp) in st.groups.iter().enumerate() {
            if grp.links.is_empty() {
                continue;
            }
            let links: Vec<String> = grp
                .links
                .iter()
                .map(|l| {
                    format!(
                        "{{{}, {}, {}, {{{}, {}, {}, {}}}}}",
                        l.axis, l.neg as u8, l.dagger as u8, l.at[0], l.at[1], l.at[2], l.at[3]
                    )
                })
                .collect();
            self.line(&format!("static const qr_link st{idx}_links{g}[] = {{{}}};", links.join(", ")));
        }
        self.open(&format!("static const qr_group st{idx}_groups[] = {{"));
        for (g, grp) in st.groups.iter().enumerate() {
            let o = grp.offset;
            let links = if grp.links.is_empty() {
                "NULL".to_string()
            } else {
                format!("st{idx}_links{g}")
            };
            let mask = match grp.mask {
                None => -1,
                Some(Parity::Even) => 0,
                Some(Parity::Odd) => 1,
            };
            self.line(&format!(
                "{{{{{}, {}, {}, {}}}, {}, {links}, {mask}}},",
                o[0],
                o[1],
                o[2],
                o[3],
                grp.links.len()
            ));
        }
        self.close("};");
    }

    /// Spin matrices from the run parameters, then the neighbour tables.
    fn stencil_setup(&mut self, idx: usize, st: &Stencil) -> Result<(), BackendError> {
        let groups = st.groups.len();
        self.open("{");
        self.line(&format!("qr_cplx sp[{}];", groups.max(1) * 16));
        self.line(&format!("for (int k = 0; k < {}; k++) sp[k] = 0;", groups * 16));
        for (g, grp) in st.groups.iter().enumerate() {
            let coefs: Vec<String> = grp.spin.iter().map(|(c, _)| scalar_expr(c)).collect::<Result<_, _>>()?;
            for r in 0..4 {
                for c in 0..4 {
                    let mut e = String::new();
                    for ((_, m), k) in grp.spin.iter().zip(&coefs) {
                        let v = m[r][c];
                        if v != Complex::new(0.0, 0.0) {
                            let _ = write!(e, " + {k} * {}", complex(v));
                        }
                    }
                    if !e.is_empty() {
                        self.line(&format!("sp[{}] = qr_c(0.0, 0.0){e};", g * 16 + r * 4 + c));
                    }
                }
            }
        }
        self.line(&format!(
            "qr_stencil_build(&st{idx}, g, {}, {}, LAYOUT, st{idx}_groups, {groups}, sp);",
            c_dom(st.to),
            c_dom(st.from)
        ));
        self.close("}");
        Ok(())
    }
}

/// Generates the C translation unit: stencil tables, `qiral_solve`, and a
/// `main` that hands control to the runtime's skeleton.
pub fn emit(ir: &LoopIr, bindings: &[LibraryBinding], params: &EmitParams) -> Result<String, BackendError> {
    let mut e = Emitter {
        ir,
        bindings,
        out: String::new(),
        depth: 0,
        loops: 0,
        callees: BTreeSet::new(),
    };

    let mut vectors: Vec<(String, Dom)> = ir.vectors.iter().map(|d| (d.name.clone(), d.dom)).collect();
    for i in &ir.inputs {
        if ir.decl(i).is_none() {
            vectors.push((i.clone(), Dom::Full));
        }
    }
    let mut scalars: Vec<String> = vec!["kappa".into(), "mu".into(), "epsilon".into()];
    for s in ir.params.iter().chain(&ir.scalars) {
        if !scalars.contains(s) {
            scalars.push(s.clone());
        }
    }
    let mut private: Vec<String> = GATHER_PRIVATES.iter().map(|s| s.to_string()).collect();
    collect_privates(&ir.body, &mut private);

    // The body is generated first so that callee prototypes are known.
    e.depth = 1;
    e.nodes(&ir.body)?;
    let body = std::mem::take(&mut e.out);

    e.depth = 0;
    let name = if params.name.is_empty() { "program" } else { &params.name };
    e.line(&format!("/* {}: generated by qiralc ({} layout) */", name.replace("*/", "* /"), ir.layout.name()));
    e.line("#include \"qiral_runtime.h\"");
    e.line("");
    e.line("#include <math.h>");
    e.line("#include <stdio.h>");
    e.line("#include <stdlib.h>");
    e.line("");
    let layout = match ir.layout {
        Layout::Nested => "QR_NESTED",
        Layout::Linear => "QR_LINEAR",
    };
    e.line(&format!("#define LAYOUT {layout}"));
    e.line("#define IX(i, k, n) QR_IX(LAYOUT, i, k, n)");
    e.line("");
    for c in e.callees.clone() {
        if !RUNTIME_ROUTINES.contains(&c.as_str()) {
            e.line(&format!("void {}(const qr_stencil *A, const qr_cplx *B, qr_cplx *C);", ident(&c)));
        }
    }
    for (k, st) in ir.stencils.iter().enumerate() {
        e.stencil_tables(k, st);
        e.line("");
    }

    e.line("int qiral_solve(const qr_gauge *g, qr_params *p, qr_cplx *const *in, qr_cplx *out, qr_trace *tr)");
    e.open("{");
    e.line("int status = QR_OK;");
    e.line("const size_t n_full = g->lat.volume, n_half = g->lat.volume / 2;");
    e.line("(void)n_full;");
    e.line("(void)n_half;");
    e.line("(void)in;");
    e.line("(void)tr;");
    for s in &scalars {
        let init = match s.as_str() {
            "kappa" => "qr_c(p->kappa, 0.0)",
            "mu" => "qr_c(p->mu, 0.0)",
            "epsilon" => "qr_c(p->epsilon, 0.0)",
            _ => "0",
        };
        let v = scalar_name(s);
        e.line(&format!("qr_cplx {v} = {init};"));
        e.line(&format!("(void){v};"));
    }
    for p in &private {
        let p = ident(p);
        e.line(&format!("qr_cplx {p}[QR_BLOCK];"));
        e.line(&format!("(void){p};"));
    }
    for (v, d) in &vectors {
        e.line(&format!("qr_cplx *{} = qr_alloc({} * QR_BLOCK);", vec_name(v), n_dom(*d)));
    }
    for (k, i) in ir.inputs.iter().enumerate() {
        e.line(&format!("qr_import({}, in[{k}], {}, LAYOUT);", vec_name(i), n_dom(ir.dom(i))));
    }
    for k in 0..ir.stencils.len() {
        e.line(&format!("qr_stencil st{k};"));
    }
    for (k, st) in ir.stencils.iter().enumerate() {
        e.stencil_setup(k, st)?;
    }
    e.out.push_str(&body);
    e.line("goto done;");
    e.close("done:");
    e.depth = 1;
    let has_output = vectors.iter().any(|(v, _)| *v == ir.output);
    if has_output {
        let (x, n) = (vec_name(&ir.output), n_dom(ir.dom(&ir.output)));
        e.open(&format!("for (size_t k = 0; status != QR_FAILED && k < {n} * QR_BLOCK; k++) {{"));
        e.open(&format!("if (!qr_finite({x}[k])) {{"));
        e.line(&format!("fprintf(stderr, \"qiral: non-finite value in `{}`\\n\");", ir.output));
        e.line("status = QR_FAILED;");
        e.close("}");
        e.close("}");
        e.line(&format!("qr_export(out, {x}, {n}, LAYOUT);"));
    } else {
        e.line("(void)out;");
    }
    for k in 0..ir.stencils.len() {
        e.line(&format!("qr_stencil_free(&st{k});"));
    }
    for (v, _) in &vectors {
        e.line(&format!("free({});", vec_name(v)));
    }
    e.line("return status;");
    e.depth = 0;
    e.line("}");
    e.line("");

    let quoted: Vec<String> = ir.inputs.iter().map(|i| format!("\"{}\"", i.escape_default())).collect();
    let doms: Vec<&str> = ir.inputs.iter().map(|i| c_dom(ir.dom(i))).collect();
    let (quoted, doms) = if ir.inputs.is_empty() {
        (vec!["NULL".to_string()], vec!["QR_FULL"])
    } else {
        (quoted, doms)
    };
    e.line(&format!("static const char *const qiral_inputs[] = {{{}}};", quoted.join(", ")));
    e.line(&format!("static const int qiral_input_dom[] = {{{}}};", doms.join(", ")));
    e.line(&format!(
        "static const qr_program qiral_program = {{\"{}\", {}, qiral_inputs, qiral_input_dom, {}, qiral_solve}};",
        name.escape_default(),
        ir.inputs.len(),
        c_dom(ir.dom(&ir.output))
    ));
    e.line("");
    e.line("int main(int argc, char **argv)");
    e.open("{");
    e.line("return qr_main(argc, argv, &qiral_program);");
    e.close("}");
    Ok(e.out)
}

fn collect_privates(nodes: &[Node], out: &mut Vec<String>) {
    for n in nodes {
        match n {
            Node::ParallelFor { private, .. } => {
                for p in private {
                    if !out.contains(p) {
                        out.push(p.clone());
                    }
                }
            }
            Node::SeqWhile { body, .. } => collect_privates(body, out),
            _ => {}
        }
    }
}

/// Files written next to a generated program.
pub fn write_sources(dir: &Path, name: &str, source: &str) -> Result<PathBuf, BackendError> {
    std::fs::create_dir_all(dir)?;
    let main = dir.join(format!("{name}.c"));
    std::fs::write(&main, source)?;
    std::fs::write(dir.join("qiral_runtime.h"), RUNTIME_H)?;
    std::fs::write(dir.join("qiral_runtime.c"), RUNTIME_C)?;
    Ok(main)
}

#[derive(Clone, Debug)]
pub struct BuildOptions {
    pub compiler: String,
    /// Runtime implementation to link; tests substitute a broken one.
    pub runtime_c: String,
    /// `OMP_NUM_THREADS` for the run.
    pub threads: usize,
    /// Largest accepted difference relative to the largest VM entry.
    pub tolerance: f64,
}

impl Default for BuildOptions {
    fn default() -> BuildOptions {
        BuildOptions {
            compiler: "cc".into(),
            runtime_c: RUNTIME_C.into(),
            threads: 2,
            tolerance: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffReport {
    /// `max_i |x_c[i] - x_vm[i]| / max_i |x_vm[i]|`.
    pub max_rel_diff: f64,
    pub c_iterations: usize,
    pub vm_iterations: usize,
    pub c_trace: Vec<(usize, f64)>,
}

impl std::fmt::Display for DiffReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "max relative difference {:e}, iterations {} (C) vs {} (VM)",
            self.max_rel_diff, self.c_iterations, self.vm_iterations
        )
    }
}

/// True when `compiler` runs and accepts OpenMP.
pub fn compiler_available(compiler: &str) -> bool {
    let Ok(dir) = tempfile::tempdir() else { return false };
    let src = dir.path().join("probe.c");
    if std::fs::write(&src, "#include <omp.h>\nint main(void) { return omp_get_max_threads() > 0 ? 0 : 1; }\n").is_err() {
        return false;
    }
    Command::new(compiler)
        .args(["-fopenmp", "-o"])
        .arg(dir.path().join("probe"))
        .arg(&src)
        .output()
        .is_ok_and(|o| o.status.success())
}

/// Compiles `source` with the runtime into an executable inside `dir`.
pub fn compile(source: &str, dir: &Path, opts: &BuildOptions) -> Result<PathBuf, BackendError> {
    let main = write_sources(dir, "qiral_program", source)?;
    let runtime = dir.join("qiral_runtime.c");
    std::fs::write(&runtime, &opts.runtime_c)?;
    let exe = dir.join("qiral_program");
    let out = Command::new(&opts.compiler)
        .args(["-std=gnu99", "-O2", "-ffp-contract=off", "-fopenmp", "-Wall", "-I"])
        .arg(dir)
        .arg("-o")
        .arg(&exe)
        .arg(&main)
        .arg(&runtime)
        .arg("-lm")
        .output()
        .map_err(|e| BackendError::CompileFailed(format!("cannot run {}: {e}", opts.compiler)))?;
    if !out.status.success() {
        return Err(BackendError::CompileFailed(String::from_utf8_lossy(&out.stderr).into_owned()));
    }
    Ok(exe)
}

fn read_trace(path: &Path) -> Result<Vec<(usize, f64)>, BackendError> {
    let text = std::fs::read_to_string(path)?;
    let bad = || BackendError::RunFailed(format!("malformed report {}", path.display()));
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let (i, r) = line.split_once(',').ok_or_else(bad)?;
        rows.push((i.parse().map_err(|_| bad())?, r.parse().map_err(|_| bad())?));
    }
    Ok(rows)
}

/// Compiles `source`, runs it on `gauge` and `b`, runs the interpreter on
/// `ir` with the same inputs and compares the solutions.
pub fn build_and_diff(
    ir: &LoopIr,
    source: &str,
    gauge: &GaugeConfig,
    b: &[Complex],
    params: &RunParams,
    opts: &BuildOptions,
) -> Result<DiffReport, BackendError> {
    let inputs: HashMap<String, Vec<Complex>> = ir.inputs.iter().map(|i| (i.clone(), b.to_vec())).collect();
    let (vm_x, vm_trace) = match parallel_execute(ir, gauge, &inputs, params, ExecOptions::default()) {
        Ok(e) => (e.x, e.trace),
        Err(VmError::MaxIterExceeded { x, trace }) => (x, trace),
        Err(e) => return Err(e.into()),
    };

    let dir = tempfile::tempdir()?;
    let exe = compile(source, dir.path(), opts)?;
    let gauge_path = dir.path().join("gauge.qg");
    let b_path = dir.path().join("b.qvec");
    let x_path = dir.path().join("x.qvec");
    let report = dir.path().join("trace.csv");
    gauge.save(&gauge_path)?;
    save_vector(&b_path, b)?;
    let mut cmd = Command::new(&exe);
    cmd.arg(&gauge_path)
        .arg(&x_path)
        .arg(format!("{:?}", params.kappa))
        .arg(format!("{:?}", params.mu))
        .arg(format!("{:?}", params.epsilon))
        .arg(params.max_iter.to_string());
    for _ in &ir.inputs {
        cmd.arg(&b_path);
    }
    let out = cmd
        .arg("--report")
        .arg(&report)
        .env("OMP_NUM_THREADS", opts.threads.max(1).to_string())
        .output()?;
    if !matches!(out.status.code(), Some(0) | Some(2)) {
        return Err(BackendError::RunFailed(String::from_utf8_lossy(&out.stderr).into_owned()));
    }
    let c_x = crate::gauge::load_vector(&x_path)?;
    let c_trace = read_trace(&report)?;

    let scale = vm_x.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let diff = if c_x.len() != vm_x.len() {
        f64::INFINITY
    } else {
        let d = c_x.iter().zip(&vm_x).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        if scale > 0.0 {
            d / scale
        } else {
            d
        }
    };
    let report = DiffReport {
        max_rel_diff: diff,
        c_iterations: c_trace.len(),
        vm_iterations: vm_trace.len(),
        c_trace,
    };
    if diff.is_nan() || diff > opts.tolerance || report.c_iterations != report.vm_iterations {
        return Err(BackendError::RuntimeMismatch(report));
    }
    Ok(report)
}
