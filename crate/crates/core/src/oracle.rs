//! Dense-matrix semantics of terms at small lattice sizes, a direct
//! solver, and randomized soundness checks for rewrite rules.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::gamma;
use crate::gauge::GaugeConfig;
use crate::ir::*;
use crate::printer::term_to_string;
use crate::rewrite::{guard_holds, instantiate, is_lattice_projector, Rule, Subst};
use crate::shape::{infer_shape, Checker, IndexSet, SetAtom, Shape, TypeEnv, TypedProgram};

/// Largest row or column count `denote` will materialize.
pub const SIZE_GUARD: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("dense size {0} exceeds the guard of {SIZE_GUARD}")]
    SizeGuardExceeded(usize),
    #[error("unbound atom `{0}`")]
    UnboundAtom(String),
    #[error("cannot denote {0}")]
    Unsupported(String),
    #[error("dimension mismatch in {0}")]
    Dimension(String),
    #[error("matrix is singular")]
    Singular,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex>,
}

const ZERO: Complex = Complex::new(0.0, 0.0);
const ONE: Complex = Complex::new(1.0, 0.0);

fn guard(n: usize) -> Result<(), OracleError> {
    if n > SIZE_GUARD {
        Err(OracleError::SizeGuardExceeded(n))
    } else {
        Ok(())
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix {
            rows,
            cols,
            data: vec![ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = ONE;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<Complex>]) -> DenseMatrix {
        let cols = rows.first().map_or(0, Vec::len);
        DenseMatrix {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn from_mat4(m: &gamma::Mat4) -> DenseMatrix {
        DenseMatrix::from_rows(&m.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    pub fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
        DenseMatrix {
            rows,
            cols,
            data: (0..rows * cols)
                .map(|_| Complex::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
                .collect(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> Complex {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: Complex) {
        self.data[i * self.cols + j] = v;
    }

    /// Product skipping zero entries of the left factor, which keeps
    /// permutation and block-diagonal products cheap.
    pub fn mul(&self, b: &DenseMatrix) -> Result<DenseMatrix, OracleError> {
        if self.cols != b.rows {
            return Err(OracleError::Dimension(format!(
                "product {}x{} * {}x{}",
                self.rows, self.cols, b.rows, b.cols
            )));
        }
        let mut c = DenseMatrix::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == ZERO {
                    continue;
                }
                let brow = &b.data[k * b.cols..(k + 1) * b.cols];
                let crow = &mut c.data[i * b.cols..(i + 1) * b.cols];
                for (x, y) in crow.iter_mut().zip(brow) {
                    *x += a * y;
                }
            }
        }
        Ok(c)
    }

    pub fn matvec(&self, v: &[Complex]) -> Result<Vec<Complex>, OracleError> {
        if self.cols != v.len() {
            return Err(OracleError::Dimension(format!(
                "matrix {}x{} times vector of {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|i| {
                self.data[i * self.cols..(i + 1) * self.cols]
                    .iter()
                    .zip(v)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect())
    }

    pub fn kron(&self, b: &DenseMatrix) -> Result<DenseMatrix, OracleError> {
        let (r, c) = (self.rows * b.rows, self.cols * b.cols);
        guard(r.max(c))?;
        let mut out = DenseMatrix::zeros(r, c);
        for i in 0..self.rows {
            for j in 0..self.cols {
                let a = self.get(i, j);
                if a == ZERO {
                    continue;
                }
                for k in 0..b.rows {
                    for l in 0..b.cols {
                        out.set(i * b.rows + k, j * b.cols + l, a * b.get(k, l));
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn zip(&self, b: &DenseMatrix, f: impl Fn(Complex, Complex) -> Complex) -> Result<DenseMatrix, OracleError> {
        if (self.rows, self.cols) != (b.rows, b.cols) {
            return Err(OracleError::Dimension(format!(
                "sum {}x{} + {}x{}",
                self.rows, self.cols, b.rows, b.cols
            )));
        }
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect(),
        })
    }

    pub fn scale(&self, s: Complex) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| s * x).collect(),
        }
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn dagger(&self) -> DenseMatrix {
        let mut t = self.transpose();
        t.data.iter_mut().for_each(|x| *x = x.conj());
        t
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn inverse(&self) -> Result<DenseMatrix, OracleError> {
        if self.rows != self.cols {
            return Err(OracleError::Dimension("inverse of a non-square matrix".into()));
        }
        let n = self.rows;
        let mut out = DenseMatrix::zeros(n, n);
        let lu = Lu::factor(self)?;
        for j in 0..n {
            let mut e = vec![ZERO; n];
            e[j] = ONE;
            let x = lu.solve(&e);
            for i in 0..n {
                out.set(i, j, x[i]);
            }
        }
        Ok(out)
    }
}

/// LU factorization with partial pivoting.
struct Lu {
    n: usize,
    a: Vec<Complex>,
    perm: Vec<usize>,
}

impl Lu {
    fn factor(m: &DenseMatrix) -> Result<Lu, OracleError> {
        let n = m.rows;
        let mut a = m.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = m.data.iter().map(|x| x.norm()).fold(0.0, f64::max);
        if scale == 0.0 {
            return Err(OracleError::Singular);
        }
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| a[i * n + k].norm().total_cmp(&a[j * n + k].norm()))
                .unwrap();
            if a[p * n + k].norm() <= 1e-12 * scale {
                return Err(OracleError::Singular);
            }
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let piv = a[k * n + k];
            for i in k + 1..n {
                let f = a[i * n + k] / piv;
                a[i * n + k] = f;
                if f == ZERO {
                    continue;
                }
                for j in k + 1..n {
                    let v = a[k * n + j];
                    a[i * n + j] -= f * v;
                }
            }
        }
        Ok(Lu { n, a, perm })
    }

    fn solve(&self, b: &[Complex]) -> Vec<Complex> {
        let n = self.n;
        let mut y: Vec<Complex> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                let v = y[j];
                y[i] -= self.a[i * n + j] * v;
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                let v = y[j];
                y[i] -= self.a[i * n + j] * v;
            }
            y[i] /= self.a[i * n + i];
        }
        y
    }
}

/// Solves `m x = b` by partially pivoted elimination.
pub fn dense_solve(m: &DenseMatrix, b: &[Complex]) -> Result<Vec<Complex>, OracleError> {
    if m.rows != m.cols || m.rows != b.len() {
        return Err(OracleError::Dimension("dense_solve needs a square system".into()));
    }
    Ok(Lu::factor(m)?.solve(b))
}

pub fn norm(v: &[Complex]) -> f64 {
    v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// `‖a − b‖ / ‖b‖` (absolute when `b` is zero).
pub fn rel_diff(a: &[Complex], b: &[Complex]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
    let n = norm(b);
    if n == 0.0 {
        d
    } else {
        d / n
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Scalar(Complex),
    Vector(Vec<Complex>),
    Matrix(DenseMatrix),
    Zero,
}

impl Value {
    pub fn into_matrix(self) -> Result<DenseMatrix, OracleError> {
        match self {
            Value::Matrix(m) => Ok(m),
            other => Err(OracleError::Unsupported(format!("expected a matrix, got {}", other.kind()))),
        }
    }

    pub fn into_vector(self) -> Result<Vec<Complex>, OracleError> {
        match self {
            Value::Vector(v) => Ok(v),
            other => Err(OracleError::Unsupported(format!("expected a vector, got {}", other.kind()))),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Value::Scalar(_) => "scalar",
            Value::Vector(_) => "vector",
            Value::Matrix(_) => "matrix",
            Value::Zero => "zero",
        }
    }
}

#[derive(Clone, Default)]
struct Ctx {
    sites: HashMap<String, usize>,
    dirs: HashMap<String, SignedDir>,
}

/// Bindings for every atom a term may mention.
#[derive(Clone)]
pub struct Oracle<'a> {
    pub env: &'a TypeEnv,
    pub gauge: &'a GaugeConfig,
    pub scalars: HashMap<String, Complex>,
    pub vectors: HashMap<String, Vec<Complex>>,
    pub matrices: HashMap<String, DenseMatrix>,
    pub defs: HashMap<String, Term>,
}

impl<'a> Oracle<'a> {
    pub fn new(env: &'a TypeEnv, gauge: &'a GaugeConfig) -> Oracle<'a> {
        Oracle {
            env,
            gauge,
            scalars: HashMap::new(),
            vectors: HashMap::new(),
            matrices: HashMap::new(),
            defs: HashMap::new(),
        }
    }

    /// Oracle knowing the program's definitions and the parameters.
    pub fn for_program(p: &'a TypedProgram, gauge: &'a GaugeConfig, params: &[(&str, f64)]) -> Oracle<'a> {
        let mut o = Oracle::new(&p.env, gauge);
        o.defs = p.unit.defs.iter().map(|d| (d.name.clone(), d.body.clone())).collect();
        for (k, v) in params {
            o.scalars.insert(k.to_string(), Complex::new(*v, 0.0));
        }
        o
    }

    pub fn denote(&self, t: &Term) -> Result<Value, OracleError> {
        self.eval(t, &Ctx::default())
    }

    pub fn denote_matrix(&self, t: &Term) -> Result<DenseMatrix, OracleError> {
        self.denote(t)?.into_matrix()
    }

    fn volume(&self) -> usize {
        self.gauge.lattice.volume()
    }

    fn set_size(&self, s: &SetExpr) -> Result<usize, OracleError> {
        let set = self
            .env
            .resolve_set(s)
            .map_err(|e| OracleError::Unsupported(e.to_string()))?;
        if set.is_generic() {
            return Err(OracleError::UnboundAtom(set.to_string()));
        }
        let n = set.cardinality(self.gauge.dims());
        guard(n)?;
        Ok(n)
    }

    /// Site list of a lattice domain, or `0..n` for an atomic one.
    fn domain(&self, s: &SetExpr) -> Result<(Vec<usize>, bool), OracleError> {
        let set = self
            .env
            .resolve_set(s)
            .map_err(|e| OracleError::Unsupported(e.to_string()))?;
        match set.0.as_slice() {
            [SetAtom::Lattice { parity: None, .. }] => Ok(((0..self.volume()).collect(), true)),
            [SetAtom::Lattice { parity: Some(p), .. }] => Ok((self.gauge.lattice.sites(*p).to_vec(), true)),
            _ => Ok(((0..self.set_size(s)?).collect(), false)),
        }
    }

    fn dir(&self, d: &SignedDir, ctx: &Ctx) -> Result<(usize, bool), OracleError> {
        match &d.dir {
            DirRef::Axis(a) => Ok((a.0 as usize, d.neg)),
            DirRef::Var(v) => match ctx.dirs.get(v) {
                Some(b) => self.dir(&if d.neg { b.negate() } else { b.clone() }, ctx),
                None => Err(OracleError::UnboundAtom(v.clone())),
            },
        }
    }

    fn eval(&self, t: &Term, ctx: &Ctx) -> Result<Value, OracleError> {
        use Value::*;
        Ok(match t {
            Term::Lit(c) => Scalar(*c),
            Term::ImagUnit => Scalar(Complex::new(0.0, 1.0)),
            Term::Zero => Zero,
            Term::Sym(s) => {
                if let Some(v) = self.scalars.get(s) {
                    Scalar(*v)
                } else if let Some(v) = self.vectors.get(s) {
                    Vector(v.clone())
                } else if let Some(m) = self.matrices.get(s) {
                    Matrix(m.clone())
                } else if let Some(d) = self.defs.get(s) {
                    self.eval(d, ctx)?
                } else {
                    return Err(OracleError::UnboundAtom(s.clone()));
                }
            }
            Term::Identity(s) => Matrix(DenseMatrix::identity(self.set_size(s)?)),
            Term::Gamma(d) => {
                let (axis, _) = self.dir(&SignedDir::pos(d.clone()), ctx)?;
                Matrix(DenseMatrix::from_mat4(&gamma::gamma(axis)))
            }
            Term::Gamma5 => Matrix(DenseMatrix::from_mat4(&gamma::gamma5())),
            Term::Shift(_, d) => {
                let (axis, neg) = self.dir(d, ctx)?;
                let n = self.volume();
                let mut m = DenseMatrix::zeros(n, n);
                for s in 0..n {
                    m.set(s, self.gauge.lattice.neighbor(s, axis, !neg), ONE);
                }
                Matrix(m)
            }
            Term::Link(d, site) => {
                let (axis, neg) = self.dir(d, ctx)?;
                let s = *ctx.sites.get(site).ok_or_else(|| OracleError::UnboundAtom(site.clone()))?;
                let u = self.gauge.signed_link(s, axis, neg);
                Matrix(DenseMatrix::from_rows(&u.chunks(3).map(|r| r.to_vec()).collect::<Vec<_>>()))
            }
            Term::Projection(p, _) => {
                let sites = self.gauge.lattice.sites(*p);
                let mut m = DenseMatrix::zeros(sites.len(), self.volume());
                for (k, s) in sites.iter().enumerate() {
                    m.set(k, *s, ONE);
                }
                Matrix(m)
            }
            Term::Add(a, b) | Term::Sub(a, b) => {
                let sign = if matches!(t, Term::Add(..)) { ONE } else { -ONE };
                let (x, y) = (self.eval(a, ctx)?, self.eval(b, ctx)?);
                match (x, y) {
                    (x, Zero) => x,
                    (Zero, y) => neg_value(y, sign),
                    (Scalar(x), Scalar(y)) => Scalar(x + sign * y),
                    (Vector(x), Vector(y)) => {
                        if x.len() != y.len() {
                            return Err(OracleError::Dimension("vector sum".into()));
                        }
                        Vector(x.iter().zip(&y).map(|(p, q)| p + sign * q).collect())
                    }
                    (Matrix(x), Matrix(y)) => Matrix(x.zip(&y, |p, q| p + sign * q)?),
                    (x, y) => return Err(mixed("sum", &x, &y)),
                }
            }
            Term::Mul(a, b) | Term::ScalarMul(a, b) => {
                let (x, y) = (self.eval(a, ctx)?, self.eval(b, ctx)?);
                match (x, y) {
                    (Zero, _) | (_, Zero) => Zero,
                    (Scalar(s), other) | (other, Scalar(s)) => scale_value(other, s),
                    (Matrix(x), Matrix(y)) => Matrix(x.mul(&y)?),
                    (Matrix(x), Vector(v)) => Vector(x.matvec(&v)?),
                    (x, y) => return Err(mixed("product", &x, &y)),
                }
            }
            Term::Div(a, b) => match (self.eval(a, ctx)?, self.eval(b, ctx)?) {
                (Scalar(x), Scalar(y)) => Scalar(x / y),
                (Zero, Scalar(_)) => Scalar(ZERO),
                (x, y) => return Err(mixed("quotient", &x, &y)),
            },
            Term::Tensor(a, b) => match (self.eval(a, ctx)?, self.eval(b, ctx)?) {
                (Zero, _) | (_, Zero) => Zero,
                (Matrix(x), Matrix(y)) => Matrix(x.kron(&y)?),
                (Vector(x), Vector(y)) => {
                    guard(x.len() * y.len())?;
                    Vector(x.iter().flat_map(|p| y.iter().map(move |q| p * q)).collect())
                }
                (Scalar(s), other) | (other, Scalar(s)) => scale_value(other, s),
                (x, y) => return Err(mixed("Kronecker product", &x, &y)),
            },
            Term::DirectSum { binder, domain, body } => {
                let (sites, _) = self.domain(domain)?;
                let mut blocks = Vec::with_capacity(sites.len());
                let mut inner = ctx.clone();
                for s in sites {
                    inner.sites.insert(binder.clone(), s);
                    blocks.push(match self.eval(body, &inner)? {
                        Matrix(m) => m,
                        Scalar(c) => DenseMatrix::from_rows(&[vec![c]]),
                        Zero => return Ok(Zero),
                        other => return Err(OracleError::Unsupported(format!("dsum of a {}", other.kind()))),
                    });
                }
                let rows: usize = blocks.iter().map(|b| b.rows).sum();
                let cols: usize = blocks.iter().map(|b| b.cols).sum();
                guard(rows.max(cols))?;
                let mut m = DenseMatrix::zeros(rows, cols);
                let (mut r0, mut c0) = (0, 0);
                for b in &blocks {
                    for i in 0..b.rows {
                        for j in 0..b.cols {
                            m.set(r0 + i, c0 + j, b.get(i, j));
                        }
                    }
                    r0 += b.rows;
                    c0 += b.cols;
                }
                Matrix(m)
            }
            Term::IndexedSum { binder, domain, body } => {
                let n = self.set_size(domain)?;
                let mut acc = Zero;
                let mut inner = ctx.clone();
                for a in 0..n.min(4) {
                    inner.dirs.insert(binder.clone(), SignedDir::axis(a as u8, false));
                    let v = self.eval(body, &inner)?;
                    acc = add_values(acc, v)?;
                }
                acc
            }
            Term::Transpose(a) => match self.eval(a, ctx)? {
                Matrix(m) => Matrix(m.transpose()),
                other => other,
            },
            Term::Dagger(a) => match self.eval(a, ctx)? {
                Matrix(m) => Matrix(m.dagger()),
                Scalar(c) => Scalar(c.conj()),
                Zero => Zero,
                other => return Err(OracleError::Unsupported(format!("dagger of a {}", other.kind()))),
            },
            Term::Inverse(a) => match self.eval(a, ctx)? {
                Matrix(m) => Matrix(m.inverse()?),
                Scalar(c) => Scalar(ONE / c),
                _ => return Err(OracleError::Singular),
            },
            Term::Neg(a) => neg_value(self.eval(a, ctx)?, -ONE),
            Term::Inner(a, b) => match (self.eval(a, ctx)?, self.eval(b, ctx)?) {
                (Vector(x), Vector(y)) => Scalar(x.iter().zip(&y).map(|(p, q)| p.conj() * q).sum()),
                (Zero, _) | (_, Zero) => Scalar(ZERO),
                (x, y) => return Err(mixed("inner product", &x, &y)),
            },
            Term::SubVector(..) | Term::Call(..) => {
                return Err(OracleError::Unsupported(term_to_string(t)));
            }
        })
    }
}

fn mixed(what: &str, x: &Value, y: &Value) -> OracleError {
    OracleError::Dimension(format!("{what} of {} and {}", x.kind(), y.kind()))
}

fn scale_value(v: Value, s: Complex) -> Value {
    match v {
        Value::Scalar(x) => Value::Scalar(s * x),
        Value::Vector(x) => Value::Vector(x.iter().map(|p| s * p).collect()),
        Value::Matrix(m) => Value::Matrix(m.scale(s)),
        Value::Zero => Value::Zero,
    }
}

fn neg_value(v: Value, sign: Complex) -> Value {
    scale_value(v, sign)
}

fn add_values(a: Value, b: Value) -> Result<Value, OracleError> {
    Ok(match (a, b) {
        (Value::Zero, y) => y,
        (x, Value::Zero) => x,
        (Value::Scalar(x), Value::Scalar(y)) => Value::Scalar(x + y),
        (Value::Vector(x), Value::Vector(y)) => Value::Vector(x.iter().zip(&y).map(|(p, q)| p + q).collect()),
        (Value::Matrix(x), Value::Matrix(y)) => Value::Matrix(x.zip(&y, |p, q| p + q)?),
        (x, y) => return Err(mixed("sum", &x, &y)),
    })
}

/// Relative Frobenius distance between two denotations.
pub fn value_distance(a: &Value, b: &Value) -> Option<f64> {
    let flat = |v: &Value| -> Option<Vec<Complex>> {
        match v {
            Value::Scalar(c) => Some(vec![*c]),
            Value::Vector(x) => Some(x.clone()),
            Value::Matrix(m) => Some(m.data.clone()),
            Value::Zero => None,
        }
    };
    let shape = |v: &Value| match v {
        Value::Matrix(m) => Some((m.rows, m.cols)),
        Value::Vector(x) => Some((x.len(), 1)),
        Value::Scalar(_) => Some((1, 1)),
        Value::Zero => None,
    };
    match (flat(a), flat(b)) {
        (Some(x), Some(y)) => {
            if shape(a) != shape(b) {
                return None;
            }
            let scale = norm(&x).max(norm(&y));
            let d = x.iter().zip(&y).map(|(p, q)| (p - q).norm_sqr()).sum::<f64>().sqrt();
            Some(if scale == 0.0 { 0.0 } else { d / scale })
        }
        (None, Some(y)) => Some(if norm(&y) == 0.0 { 0.0 } else { 1.0 }),
        (Some(x), None) => Some(if norm(&x) == 0.0 { 0.0 } else { 1.0 }),
        (None, None) => Some(0.0),
    }
}

/// A failed soundness trial.
#[derive(Clone, Debug, PartialEq)]
pub struct Counterexample {
    pub rule: String,
    pub lhs: String,
    pub rhs: String,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum SoundnessError {
    #[error("rule {} fails: {} vs {} differ by {:.3e}", .0.rule, .0.lhs, .0.rhs, .0.error)]
    Counterexample(Counterexample),
    #[error("rule {rule}: only {found} of {wanted} random instantiations were well-typed")]
    NotInstantiable { rule: String, found: usize, wanted: usize },
}

const TRIAL_ENTRIES: usize = 1 << 18;

const SET_MENU: &[&str] = &["L", "C", "S", "D", "C (x) S", "L (x) C", "L (x) C (x) S"];

/// Lattice-level structural atoms for parity and projector laws.
fn structural_atom(rng: &mut ChaCha8Rng) -> Term {
    let axis = rng.random_range(0..4u8);
    let neg = rng.random_bool(0.5);
    let parity = if rng.random_bool(0.5) { Parity::Even } else { Parity::Odd };
    let l = SetExpr::named("L");
    let widen = |t: Term, rng: &mut ChaCha8Rng| match rng.random_range(0..3) {
        0 => t,
        1 => Term::tensor(t, Term::identity(SetExpr::named("C"))),
        _ => Term::tensor(
            Term::tensor(t, Term::identity(SetExpr::named("C"))),
            Term::identity(SetExpr::named("S")),
        ),
    };
    match rng.random_range(0..6) {
        0 => widen(Term::Projection(parity, l), rng),
        1 => widen(Term::transpose(Term::Projection(parity, l)), rng),
        2 => Term::Shift(l, SignedDir::axis(axis, neg)),
        3 => Term::dsum("s", l, Term::Link(SignedDir::axis(axis, neg), "s".into())),
        4 => Term::identity(SetExpr::Parity(parity, Box::new(l))),
        _ => Term::identity(l),
    }
}

/// Draws a matrix meant to satisfy the named guard.
fn guided(guard: &str, rng: &mut ChaCha8Rng) -> Option<Term> {
    let c = || Term::identity(SetExpr::named("C"));
    Some(match guard {
        "lattice_projector" => loop {
            let t = structural_atom(rng);
            if is_lattice_projector(&t) {
                break t;
            }
        },
        "identity_like" => match rng.random_range(0..3) {
            0 => Term::identity(SetExpr::named("S")),
            1 => Term::tensor(c(), Term::identity(SetExpr::named("S"))),
            _ => Term::tensor(Term::identity(SetExpr::named("L")), Term::tensor(c(), Term::identity(SetExpr::named("S")))),
        },
        "identity_gamma5" => match rng.random_range(0..3) {
            0 => Term::Gamma5,
            1 => Term::tensor(c(), Term::Gamma5),
            _ => Term::tensor(Term::identity(SetExpr::named("L")), Term::tensor(c(), Term::Gamma5)),
        },
        "parity_vanishes" => {
            let mut t = structural_atom(rng);
            for _ in 0..rng.random_range(1..4) {
                t = Term::mul(t, structural_atom(rng));
            }
            t
        }
        _ => return None,
    })
}

fn spin_atom(rng: &mut ChaCha8Rng) -> Term {
    let c = SetExpr::named("C");
    let s = SetExpr::named("S");
    match rng.random_range(0..6) {
        0 => Term::Gamma5,
        1 => Term::Gamma(DirRef::Axis(Axis(rng.random_range(0..4u8)))),
        2 => Term::identity(s),
        3 => Term::tensor(Term::identity(c), Term::Gamma5),
        4 => Term::tensor(Term::identity(c), Term::identity(s)),
        _ => Term::tensor(
            Term::tensor(Term::identity(SetExpr::named("L")), Term::identity(c)),
            Term::Gamma5,
        ),
    }
}

/// Random instantiation state. Dense symbols start with generic shapes
/// that the type checker pins down before any data is drawn.
struct Sampler {
    rng: ChaCha8Rng,
    pending: Vec<(String, Shape)>,
}

impl Sampler {
    fn set(&mut self) -> SetExpr {
        let src = SET_MENU[self.rng.random_range(0..SET_MENU.len())];
        match crate::parser::parse_term(&format!("I_{{{src}}}")) {
            Ok(Term::Identity(s)) => s,
            _ => unreachable!("menu sets parse"),
        }
    }

    fn fresh(&mut self, shape: impl FnOnce(&str) -> Shape) -> Term {
        let name = format!("M{}", self.pending.len());
        let s = shape(&name);
        self.pending.push((name.clone(), s));
        Term::Sym(name)
    }

    fn matrix(&mut self) -> Term {
        match self.rng.random_range(0..4) {
            0 => {
                let mut t = structural_atom(&mut self.rng);
                for _ in 0..self.rng.random_range(0..3) {
                    t = Term::mul(t, structural_atom(&mut self.rng));
                }
                t
            }
            1 => spin_atom(&mut self.rng),
            _ => self.fresh(|n| {
                Shape::Matrix(
                    IndexSet::atom(SetAtom::Generic(format!("{n}.rows"))),
                    IndexSet::atom(SetAtom::Generic(format!("{n}.cols"))),
                )
            }),
        }
    }

    fn vector(&mut self) -> Term {
        self.fresh(|n| Shape::Vector(IndexSet::atom(SetAtom::Generic(n.to_string()))))
    }

    fn scalar(&mut self) -> Term {
        let re: f64 = self.rng.sample(StandardNormal);
        let im: f64 = if self.rng.random_bool(0.5) { 0.0 } else { self.rng.sample(StandardNormal) };
        Term::Lit(Complex::new(re, im))
    }
}

/// Replaces leftover generic factors with random concrete sets, the same
/// set for every occurrence of one generic.
fn concretize(
    s: &IndexSet,
    picks: &mut HashMap<String, IndexSet>,
    sampler: &mut Sampler,
    env: &TypeEnv,
) -> IndexSet {
    let mut out = Vec::new();
    for a in &s.0 {
        match a {
            SetAtom::Generic(g) => {
                let set = match picks.get(g) {
                    Some(x) => x.clone(),
                    None => {
                        let x = env.resolve_set(&sampler.set()).expect("menu sets resolve");
                        picks.insert(g.clone(), x.clone());
                        x
                    }
                };
                out.extend(set.0);
            }
            other => out.push(other.clone()),
        }
    }
    IndexSet(out)
}

/// Checks `lhs = rhs` on `trials` random well-typed instantiations whose
/// guards hold. Matrix variables are dense Gaussian matrices or lattice
/// constructions; the shapes of dense ones are inferred from the rule.
pub fn check_rule_soundness(
    rule: &Rule,
    trials: usize,
    env: &TypeEnv,
    gauge: &GaugeConfig,
    seed: u64,
) -> Result<(), SoundnessError> {
    let dims = gauge.dims();
    let mut sampler = Sampler {
        rng: ChaCha8Rng::seed_from_u64(seed),
        pending: Vec::new(),
    };
    let mut vars: Vec<(&String, &Sort)> = rule.vars.iter().collect();
    vars.sort_by(|a, b| a.0.cmp(b.0));
    // Guards on a single variable steer how that variable is drawn.
    let hints: HashMap<String, &str> = rule
        .conds
        .iter()
        .filter_map(|c| match c {
            Term::Call(g, args) => match args.as_slice() {
                [Term::Sym(v)] => Some((v.clone(), g.as_str())),
                _ => None,
            },
            _ => None,
        })
        .collect();
    let mut passed = 0;
    for _ in 0..500 * trials.max(1) {
        if passed == trials {
            break;
        }
        sampler.pending.clear();
        let mut su = Subst::default();
        for (v, sort) in &vars {
            let v = (*v).clone();
            match sort {
                Sort::Set => {
                    let s = sampler.set();
                    su.sets.insert(v, s);
                }
                Sort::Dir => {
                    let a = sampler.rng.random_range(0..4u8);
                    let neg = sampler.rng.random_bool(0.5);
                    su.dirs.insert(v, SignedDir::axis(a, neg));
                }
                Sort::Scalar => {
                    let t = sampler.scalar();
                    su.terms.insert(v, t);
                }
                Sort::Matrix => {
                    let hint = hints.get(&v).and_then(|g| guided(g, &mut sampler.rng));
                    let t = match hint {
                        Some(t) if sampler.rng.random_bool(0.9) => t,
                        _ => sampler.matrix(),
                    };
                    su.terms.insert(v, t);
                }
                Sort::Vector => {
                    let t = sampler.vector();
                    su.terms.insert(v, t);
                }
                Sort::Term => {
                    let t = if sampler.rng.random_bool(0.5) { sampler.matrix() } else { sampler.vector() };
                    su.terms.insert(v, t);
                }
            }
        }
        let lhs = instantiate(&rule.lhs, &su);
        let rhs = instantiate(&rule.rhs, &su);

        // Pin down the dense shapes, then draw their entries.
        let mut ck = Checker::new(env);
        for (n, s) in &sampler.pending {
            ck.bind_local(n, s.clone());
        }
        let (Ok(ls), Ok(rs)) = (ck.infer(&lhs), ck.infer(&rhs)) else {
            continue;
        };
        if ck.unify(&ls, &rs, &rule.name).is_err() {
            continue;
        }
        let mut local_env = env.clone();
        let mut oracle_vectors = HashMap::new();
        let mut oracle_matrices = HashMap::new();
        let mut picks = HashMap::new();
        let pending = std::mem::take(&mut sampler.pending);
        let mut too_big = false;
        for (n, s) in &pending {
            let shape = match ck.zonk(s) {
                Shape::Matrix(r, c) => Shape::Matrix(
                    concretize(&r, &mut picks, &mut sampler, env),
                    concretize(&c, &mut picks, &mut sampler, env),
                ),
                Shape::Vector(r) => Shape::Vector(concretize(&r, &mut picks, &mut sampler, env)),
                other => other,
            };
            match &shape {
                Shape::Matrix(r, c) => {
                    let (nr, nc) = (r.cardinality(dims), c.cardinality(dims));
                    too_big |= nr * nc > SIZE_GUARD * 8;
                    if !too_big {
                        oracle_matrices.insert(n.clone(), DenseMatrix::random(nr, nc, &mut sampler.rng));
                    }
                }
                Shape::Vector(r) => {
                    let v = DenseMatrix::random(r.cardinality(dims), 1, &mut sampler.rng).data;
                    oracle_vectors.insert(n.clone(), v);
                }
                _ => {}
            }
            local_env.symbols.insert(n.clone(), shape);
        }
        if too_big {
            continue;
        }
        if !rule.conds.iter().all(|c| guard_holds(&instantiate(c, &su), &local_env)) {
            continue;
        }
        let (Ok(ls), Ok(rs)) = (infer_shape(&lhs, &local_env), infer_shape(&rhs, &local_env)) else {
            continue;
        };
        let concrete = |s: &Shape| match s {
            Shape::Matrix(r, c) => !r.is_generic() && !c.is_generic(),
            Shape::Vector(v) => !v.is_generic(),
            _ => true,
        };
        if !concrete(&ls) || !concrete(&rs) {
            continue;
        }
        // Keep trials cheap: a few hundred thousand entries at most.
        if ls.dims(dims).is_some_and(|(r, c)| r * c > TRIAL_ENTRIES) {
            continue;
        }
        let mut oracle = Oracle::new(&local_env, gauge);
        oracle.vectors = oracle_vectors;
        oracle.matrices = oracle_matrices;
        let (Ok(lv), Ok(rv)) = (oracle.denote(&lhs), oracle.denote(&rhs)) else {
            continue;
        };
        let err = value_distance(&lv, &rv).unwrap_or(f64::INFINITY);
        if err > 1e-12 || err.is_nan() {
            return Err(SoundnessError::Counterexample(Counterexample {
                rule: rule.name.clone(),
                lhs: term_to_string(&lhs),
                rhs: term_to_string(&rhs),
                error: err,
            }));
        }
        passed += 1;
    }
    if passed < trials {
        return Err(SoundnessError::NotInstantiable {
            rule: rule.name.clone(),
            found: passed,
            wanted: trials,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_identity_and_singular() {
        let b = vec![Complex::new(1.0, 2.0), Complex::new(-3.0, 0.5)];
        assert_eq!(dense_solve(&DenseMatrix::identity(2), &b).unwrap(), b);
        assert_eq!(dense_solve(&DenseMatrix::zeros(2, 2), &b), Err(OracleError::Singular));
    }

    #[test]
    fn random_system_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = DenseMatrix::random(40, 40, &mut rng);
        let b = DenseMatrix::random(40, 1, &mut rng).data;
        let x = dense_solve(&m, &b).unwrap();
        assert!(rel_diff(&m.matvec(&x).unwrap(), &b) < 1e-10);
    }

    #[test]
    fn kron_follows_block_formula() {
        let a = DenseMatrix::from_rows(&[vec![ONE, 2.0 * ONE], vec![ZERO, ONE]]);
        let k = a.kron(&DenseMatrix::identity(2)).unwrap();
        assert_eq!(k.get(0, 2), 2.0 * ONE);
        assert_eq!(k.get(1, 3), 2.0 * ONE);
        assert_eq!(k.get(2, 0), ZERO);
    }
}
