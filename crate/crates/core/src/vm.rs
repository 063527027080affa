//! Reference interpreter for LoopIR.
//!
//! Site loops run kernel by kernel, each split over threads by site. The
//! legality conditions enforced by fusion (no loop reads at other sites a
//! vector it writes) make this equal to the per-site order. Reductions
//! sum fixed-size blocks of sites and then the blocks in order, so the
//! result does not depend on the thread count.

use std::collections::HashMap;

use thiserror::Error;

use crate::gamma::Mat4;
use crate::gauge::{su3_dagger, su3_mul, GaugeConfig, Su3};
use crate::ir::*;
use crate::lattice::Lattice;
use crate::lowering::{Kernel, LoopIr, Node, BLOCK};
use crate::printer::term_to_string;
use crate::stencil::{Dom, Stencil};

/// Sites per partial sum in reductions.
pub const REDUCE_BLOCK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct RunParams {
    pub kappa: f64,
    pub mu: f64,
    /// Absolute threshold bound to `epsilon`.
    pub epsilon: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for RunParams {
    fn default() -> RunParams {
        RunParams {
            kappa: 0.15,
            mu: 0.1,
            epsilon: 1e-16,
            max_iter: 10_000,
            seed: 42,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExecOptions {
    pub threads: usize,
    /// When false, stencil temporaries are shared by all threads, as in a
    /// loop compiled without privatization. Used to show the race.
    pub privatize: bool,
}

impl Default for ExecOptions {
    fn default() -> ExecOptions {
        ExecOptions {
            threads: 1,
            privatize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Execution {
    pub x: Vec<Complex>,
    /// `(iteration, residual)` per loop iteration; the residual is the
    /// left side of the loop condition.
    pub trace: Vec<(usize, f64)>,
    /// Site applications of neighbour-gather kernels.
    pub dirac_applications: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VmError {
    #[error("no convergence within the iteration limit")]
    MaxIterExceeded { x: Vec<Complex>, trace: Vec<(usize, f64)> },
    #[error("non-finite value in `{0}`")]
    NonFiniteValue(String),
    #[error("missing input `{0}`")]
    MissingInput(String),
    #[error("bad input: {0}")]
    BadInput(String),
}

/// Evaluates a scalar term.
pub fn eval_scalar(t: &Term, env: &HashMap<String, Complex>) -> Result<Complex, VmError> {
    let ev = |x: &Term| eval_scalar(x, env);
    Ok(match t {
        Term::Lit(c) => *c,
        Term::ImagUnit => Complex::new(0.0, 1.0),
        Term::Zero => Complex::new(0.0, 0.0),
        Term::Sym(s) => *env.get(s).ok_or_else(|| VmError::MissingInput(s.clone()))?,
        Term::Add(a, b) => ev(a)? + ev(b)?,
        Term::Sub(a, b) => ev(a)? - ev(b)?,
        Term::Mul(a, b) | Term::ScalarMul(a, b) => ev(a)? * ev(b)?,
        Term::Div(a, b) => ev(a)? / ev(b)?,
        Term::Neg(a) => -ev(a)?,
        Term::Dagger(a) => ev(a)?.conj(),
        other => return Err(VmError::BadInput(format!("not a scalar: {}", term_to_string(other)))),
    })
}

/// A stencil group with its input site and colour matrix per output site.
struct Compiled {
    spin: Vec<Mat4>,
    /// `[group][out] -> input index`
    input: Vec<Vec<Option<usize>>>,
    /// `[group][out] -> colour matrix`; empty when the group has no links.
    color: Vec<Vec<Su3>>,
}

fn sites_of(lat: &Lattice, d: Dom) -> Vec<usize> {
    match d.parity() {
        None => (0..lat.volume()).collect(),
        Some(p) => lat.sites(p).to_vec(),
    }
}

fn offset_site(lat: &Lattice, s: usize, off: &[i32; 4]) -> usize {
    let mut c = lat.coords(s);
    for a in 0..4 {
        let n = lat.dims[a] as i64;
        c[a] = (c[a] as i64 + off[a] as i64).rem_euclid(n) as usize;
    }
    lat.index(c)
}

fn compile(st: &Stencil, gauge: &GaugeConfig, scalars: &HashMap<String, Complex>) -> Result<Compiled, VmError> {
    let lat = &gauge.lattice;
    let outs = sites_of(lat, st.to);
    let mut c = Compiled {
        spin: Vec::new(),
        input: Vec::new(),
        color: Vec::new(),
    };
    for g in &st.groups {
        let mut m = [[Complex::new(0.0, 0.0); 4]; 4];
        for (coef, mat) in &g.spin {
            let k = eval_scalar(coef, scalars)?;
            for i in 0..4 {
                for j in 0..4 {
                    m[i][j] += k * mat[i][j];
                }
            }
        }
        c.spin.push(m);
        let mut inputs = Vec::with_capacity(outs.len());
        let mut colors = Vec::new();
        for &s in &outs {
            let ok = g.mask.is_none_or(|p| lat.parity(s) == p);
            let n = offset_site(lat, s, &g.offset);
            let idx = match st.from.parity() {
                _ if !ok => None,
                None => Some(n),
                Some(p) if lat.parity(n) == p => Some(lat.half_index(n)),
                Some(_) => None,
            };
            inputs.push(idx);
            if !g.links.is_empty() {
                let mut u: Option<Su3> = None;
                for l in &g.links {
                    let at = offset_site(lat, s, &l.at);
                    let mut m = gauge.signed_link(at, l.axis as usize, l.neg);
                    if l.dagger {
                        m = su3_dagger(&m);
                    }
                    u = Some(match u {
                        None => m,
                        Some(prev) => su3_mul(&prev, &m),
                    });
                }
                colors.push(u.unwrap());
            }
        }
        c.input.push(inputs);
        c.color.push(colors);
    }
    Ok(c)
}

/// Contribution of group `g` at output index `i`, added into `acc`.
#[inline]
fn accumulate(c: &Compiled, g: usize, i: usize, v: &[Complex], acc: &mut [Complex; BLOCK]) {
    let Some(j) = c.input[g][i] else { return };
    let src = &v[j * BLOCK..(j + 1) * BLOCK];
    let mut nb = [Complex::new(0.0, 0.0); BLOCK];
    if c.color[g].is_empty() {
        nb.copy_from_slice(src);
    } else {
        let u = &c.color[g][i];
        for a in 0..3 {
            for s in 0..4 {
                let mut z = Complex::new(0.0, 0.0);
                for b in 0..3 {
                    z += u[a * 3 + b] * src[b * 4 + s];
                }
                nb[a * 4 + s] = z;
            }
        }
    }
    let m = &c.spin[g];
    for a in 0..3 {
        for s in 0..4 {
            let mut z = Complex::new(0.0, 0.0);
            for t in 0..4 {
                z += m[s][t] * nb[a * 4 + t];
            }
            acc[a * 4 + s] += z;
        }
    }
}

fn chunks(n: usize, threads: usize) -> Vec<(usize, usize)> {
    let t = threads.max(1).min(n.max(1));
    let per = n.div_ceil(t);
    (0..t).map(|k| (k * per, ((k + 1) * per).min(n))).filter(|(a, b)| a < b).collect()
}

struct Machine<'a> {
    ir: &'a LoopIr,
    gauge: &'a GaugeConfig,
    opts: ExecOptions,
    vecs: HashMap<String, Vec<Complex>>,
    scalars: HashMap<String, Complex>,
    compiled: Vec<Compiled>,
    gathers: u64,
    max_iter: usize,
    trace: Vec<(usize, f64)>,
    exhausted: bool,
}

impl Machine<'_> {
    fn sites(&self, d: Dom) -> usize {
        d.sites(self.gauge.lattice.volume())
    }

    fn take(&mut self, name: &str) -> Vec<Complex> {
        std::mem::take(self.vecs.get_mut(name).expect("declared vector"))
    }

    fn stencil(&mut self, out: &str, input: &str, idx: usize, gather: bool) {
        let n = self.sites(self.ir.stencils[idx].to);
        if gather {
            self.gathers += n as u64;
        }
        let mut dst = self.take(out);
        let src = &self.vecs[input];
        let c = &self.compiled[idx];
        let groups = c.spin.len();
        if !self.opts.privatize && self.opts.threads > 1 {
            // Shared accumulator: the threads' sites of one round all land
            // in the same buffer before any of them stores it.
            let parts = chunks(n, self.opts.threads);
            let rounds = parts.iter().map(|(a, b)| b - a).max().unwrap_or(0);
            for k in 0..rounds {
                let mut acc = [Complex::new(0.0, 0.0); BLOCK];
                let active: Vec<usize> = parts.iter().filter(|(a, b)| a + k < *b).map(|(a, _)| a + k).collect();
                for g in 0..groups {
                    for &i in &active {
                        accumulate(c, g, i, src, &mut acc);
                    }
                }
                for &i in &active {
                    dst[i * BLOCK..(i + 1) * BLOCK].copy_from_slice(&acc);
                }
            }
        } else {
            let parts = chunks(n, self.opts.threads);
            let mut rest: &mut [Complex] = &mut dst;
            let mut slices = Vec::new();
            for (a, b) in &parts {
                let (head, tail) = rest.split_at_mut((b - a) * BLOCK);
                slices.push((*a, head));
                rest = tail;
            }
            std::thread::scope(|sc| {
                for (start, chunk) in slices {
                    sc.spawn(move || {
                        for (k, out) in chunk.chunks_mut(BLOCK).enumerate() {
                            let mut acc = [Complex::new(0.0, 0.0); BLOCK];
                            for g in 0..groups {
                                accumulate(c, g, start + k, src, &mut acc);
                            }
                            out.copy_from_slice(&acc);
                        }
                    });
                }
            });
        }
        self.vecs.insert(out.to_string(), dst);
    }

    fn lincomb(&mut self, out: &str, terms: &[(Term, String)], dom: Dom) -> Result<(), VmError> {
        let n = self.sites(dom);
        let coefs: Vec<Complex> = terms
            .iter()
            .map(|(c, _)| eval_scalar(c, &self.scalars))
            .collect::<Result<_, _>>()?;
        let mut dst = self.take(out);
        if dst.len() != n * BLOCK {
            dst = vec![Complex::new(0.0, 0.0); n * BLOCK];
        }
        let srcs: Vec<Option<&Vec<Complex>>> = terms
            .iter()
            .map(|(_, v)| if v == out { None } else { Some(&self.vecs[v]) })
            .collect();
        let parts = chunks(n * BLOCK, self.opts.threads);
        let mut rest: &mut [Complex] = &mut dst;
        let mut slices = Vec::new();
        for (a, b) in &parts {
            let (head, tail) = rest.split_at_mut(b - a);
            slices.push((*a, head));
            rest = tail;
        }
        let (coefs, srcs) = (&coefs, &srcs);
        std::thread::scope(|sc| {
            for (start, chunk) in slices {
                sc.spawn(move || {
                    for (k, d) in chunk.iter_mut().enumerate() {
                        let mut z = Complex::new(0.0, 0.0);
                        for (c, s) in coefs.iter().zip(srcs) {
                            z += c * match s {
                                Some(v) => v[start + k],
                                None => *d,
                            };
                        }
                        *d = z;
                    }
                });
            }
        });
        self.vecs.insert(out.to_string(), dst);
        Ok(())
    }

    fn dot(&self, a: &str, b: &str) -> Complex {
        let (x, y) = (&self.vecs[a], &self.vecs[b]);
        let blocks = x.len().div_ceil(REDUCE_BLOCK * BLOCK);
        let mut partial = vec![Complex::new(0.0, 0.0); blocks];
        let parts = chunks(blocks, self.opts.threads);
        let mut rest: &mut [Complex] = &mut partial;
        let mut slices = Vec::new();
        for (lo, hi) in &parts {
            let (head, tail) = rest.split_at_mut(hi - lo);
            slices.push((*lo, head));
            rest = tail;
        }
        std::thread::scope(|sc| {
            for (start, chunk) in slices {
                sc.spawn(move || {
                    for (k, p) in chunk.iter_mut().enumerate() {
                        let lo = (start + k) * REDUCE_BLOCK * BLOCK;
                        let hi = (lo + REDUCE_BLOCK * BLOCK).min(x.len());
                        *p = x[lo..hi].iter().zip(&y[lo..hi]).map(|(u, v)| u.conj() * v).sum();
                    }
                });
            }
        });
        partial.iter().sum()
    }

    fn set_scalar(&mut self, name: &str, v: Complex) -> Result<(), VmError> {
        if !v.re.is_finite() || !v.im.is_finite() {
            return Err(VmError::NonFiniteValue(name.to_string()));
        }
        self.scalars.insert(name.to_string(), v);
        Ok(())
    }

    fn run(&mut self, nodes: &[Node]) -> Result<(), VmError> {
        for n in nodes {
            match n {
                Node::ParallelFor { dom, body, .. } => {
                    for k in body {
                        match k {
                            Kernel::LinComb { out, terms } => self.lincomb(out, terms, *dom)?,
                            Kernel::ColorSpinMatmul { out, input, stencil } => {
                                self.stencil(out, input, *stencil, false)
                            }
                            Kernel::NeighborGather { out, input, stencil } => self.stencil(out, input, *stencil, true),
                            Kernel::LocalReduceDot { target, a, b } => {
                                let v = self.dot(a, b);
                                self.set_scalar(target, v)?;
                            }
                        }
                    }
                }
                Node::Reduction { target, a, b, .. } => {
                    let v = self.dot(a, b);
                    self.set_scalar(target, v)?;
                }
                Node::ScalarAssign { target, expr } => {
                    let v = eval_scalar(expr, &self.scalars)?;
                    self.set_scalar(target, v)?;
                }
                Node::SeqWhile { cond, body } => {
                    let mut it = 0;
                    loop {
                        let l = eval_scalar(&cond.lhs, &self.scalars)?.re;
                        let r = eval_scalar(&cond.rhs, &self.scalars)?.re;
                        let go = match cond.op {
                            CmpOp::Gt => l > r,
                            CmpOp::Lt => l < r,
                        };
                        if !go {
                            break;
                        }
                        if it >= self.max_iter {
                            self.exhausted = true;
                            break;
                        }
                        self.run(body)?;
                        it += 1;
                        let res = eval_scalar(&cond.lhs, &self.scalars)?.norm();
                        if !res.is_finite() {
                            return Err(VmError::NonFiniteValue(term_to_string(&cond.lhs)));
                        }
                        self.trace.push((it, res));
                    }
                }
                Node::KernelCall { routine, .. } => {
                    return Err(VmError::BadInput(format!("library routine {routine} has no interpreter")));
                }
            }
        }
        Ok(())
    }
}

/// Single-threaded execution.
pub fn execute(
    ir: &LoopIr,
    gauge: &GaugeConfig,
    inputs: &HashMap<String, Vec<Complex>>,
    params: &RunParams,
) -> Result<Execution, VmError> {
    parallel_execute(ir, gauge, inputs, params, ExecOptions::default())
}

/// Executes with `opts.threads` worker threads. Inputs and the result use
/// the site-major component order whatever the LoopIR layout.
pub fn parallel_execute(
    ir: &LoopIr,
    gauge: &GaugeConfig,
    inputs: &HashMap<String, Vec<Complex>>,
    params: &RunParams,
    opts: ExecOptions,
) -> Result<Execution, VmError> {
    let volume = gauge.lattice.volume();
    let mut scalars = HashMap::new();
    for (k, v) in [("kappa", params.kappa), ("mu", params.mu), ("epsilon", params.epsilon)] {
        scalars.insert(k.to_string(), Complex::new(v, 0.0));
    }
    for p in &ir.params {
        if !scalars.contains_key(p) {
            return Err(VmError::MissingInput(p.clone()));
        }
    }
    let mut vecs = HashMap::new();
    for d in &ir.vectors {
        vecs.insert(d.name.clone(), vec![Complex::new(0.0, 0.0); d.dom.sites(volume) * d.block]);
    }
    for i in &ir.inputs {
        let v = inputs.get(i).ok_or_else(|| VmError::MissingInput(i.clone()))?;
        let want = ir.dom(i).sites(volume) * BLOCK;
        if v.len() != want {
            return Err(VmError::BadInput(format!("`{i}` has {} entries, expected {want}", v.len())));
        }
        vecs.insert(i.clone(), v.clone());
    }
    let compiled = ir
        .stencils
        .iter()
        .map(|s| compile(s, gauge, &scalars))
        .collect::<Result<Vec<_>, _>>()?;
    let mut m = Machine {
        ir,
        gauge,
        opts,
        vecs,
        scalars,
        compiled,
        gathers: 0,
        max_iter: params.max_iter,
        trace: Vec::new(),
        exhausted: false,
    };
    m.run(&ir.body)?;
    let x = m.vecs.remove(&ir.output).unwrap_or_default();
    if x.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(VmError::NonFiniteValue(ir.output.clone()));
    }
    if m.exhausted {
        return Err(VmError::MaxIterExceeded { x, trace: m.trace });
    }
    Ok(Execution {
        x,
        trace: m.trace,
        dirac_applications: m.gathers,
    })
}
