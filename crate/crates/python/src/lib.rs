//! Python module `qiral`: sessions, planning, lowering, the interpreter,
//! C emission and the dense oracle.

use std::collections::HashMap;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use qiral_core::backend_c::{emit, EmitParams, LibraryBinding};
use qiral_core::gauge::{random_gauge, random_vector as core_random_vector, GaugeConfig};
use qiral_core::lowering::{Layout, LoopIr as CoreLoopIr};
use qiral_core::oracle::{check_rule_soundness, Oracle};
use qiral_core::parser::parse_term;
use qiral_core::pipeline::{norm2, run as core_run, Session as CoreSession};
use qiral_core::prelude::{library, parse_all, SOLVE};
use qiral_core::printer::term_to_string;
use qiral_core::rewrite::Rule;
use qiral_core::vm::{RunParams, VmError};
use qiral_core::Complex;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn layout(name: &str) -> PyResult<Layout> {
    Layout::parse(name).ok_or_else(|| value_err(format!("unknown layout `{name}`")))
}

/// A type-checked program with its rewrite rules.
#[pyclass(frozen)]
struct Session {
    inner: CoreSession,
}

#[pymethods]
impl Session {
    /// The bundled library and goal, plus optional extra source texts.
    #[new]
    #[pyo3(signature = (extra = Vec::new()))]
    fn new(extra: Vec<String>) -> PyResult<Session> {
        let mut sources: Vec<(String, String)> = library().into_iter().map(|(n, t)| (n.into(), t.into())).collect();
        sources.push(("solve.qir".into(), SOLVE.into()));
        for (k, t) in extra.into_iter().enumerate() {
            sources.push((format!("<extra {k}>"), t));
        }
        let refs: Vec<(&str, &str)> = sources.iter().map(|(n, t)| (n.as_str(), t.as_str())).collect();
        let unit = parse_all(&refs).map_err(|es| {
            value_err(
                es.iter()
                    .map(|(f, e)| format!("{f}:{}:{}: {}", e.line, e.col, e.msg))
                    .collect::<Vec<_>>()
                    .join("\n"),
            )
        })?;
        Ok(Session {
            inner: CoreSession::new(&unit).map_err(value_err)?,
        })
    }

    /// Names of the algorithm templates.
    fn algorithms(&self) -> Vec<String> {
        self.inner.program.unit.templates.iter().map(|t| t.name.clone()).collect()
    }

    /// Names of the rewrite equations.
    fn equations(&self) -> Vec<String> {
        self.inner.program.unit.equations.iter().map(|e| e.name.clone()).collect()
    }

    /// The instantiated program as text.
    fn plan(&self, algorithms: Vec<String>) -> PyResult<String> {
        let names: Vec<&str> = algorithms.iter().map(String::as_str).collect();
        Ok(self.inner.plan(&names).map_err(value_err)?.to_text())
    }

    #[pyo3(signature = (algorithms, layout = "nested"))]
    fn compile(&self, algorithms: Vec<String>, layout: &str) -> PyResult<LoopIr> {
        let names: Vec<&str> = algorithms.iter().map(String::as_str).collect();
        let ir = self.inner.compile(&names, self::layout(layout)?).map_err(value_err)?;
        Ok(LoopIr { inner: ir })
    }

    /// Lowers a single statement such as `x = Dirac * b`.
    #[pyo3(signature = (stmt, layout = "nested"))]
    fn compile_stmt(&self, stmt: &str, layout: &str) -> PyResult<LoopIr> {
        let ir = self.inner.compile_stmt(stmt, self::layout(layout)?).map_err(value_err)?;
        Ok(LoopIr { inner: ir })
    }

    /// Normal form of a term under the session's rules.
    fn normalize(&self, term: &str) -> PyResult<String> {
        let t = parse_term(term).map_err(value_err)?;
        let env = &self.inner.program.env;
        let t = qiral_core::shape::elaborate_term(&t, env).map_err(value_err)?;
        Ok(term_to_string(&self.inner.rules.normalize(&t, env).map_err(runtime_err)?))
    }

    /// Names of equations refuted by random dense instances.
    #[pyo3(signature = (trials = 20, seed = 0))]
    fn unsound_equations(&self, trials: usize, seed: u64) -> PyResult<Vec<String>> {
        let gauge = random_gauge([2; 4], seed).map_err(value_err)?;
        let mut out = Vec::new();
        for (i, eq) in self.inner.program.unit.equations.iter().enumerate() {
            let rule = Rule::from_equation(eq).map_err(value_err)?;
            if check_rule_soundness(&rule, trials, &self.inner.program.env, &gauge, seed.wrapping_add(i as u64)).is_err() {
                out.push(eq.name.clone());
            }
        }
        Ok(out)
    }

    /// Dense matrix of a term, as a list of rows.
    #[pyo3(signature = (term, gauge, kappa = 0.15, mu = 0.1))]
    fn dense(&self, term: &str, gauge: &Gauge, kappa: f64, mu: f64) -> PyResult<Vec<Vec<Complex>>> {
        let t = parse_term(term).map_err(value_err)?;
        let o = Oracle::for_program(&self.inner.program, &gauge.inner, &[("kappa", kappa), ("mu", mu)]);
        let m = o.denote_matrix(&t).map_err(value_err)?;
        Ok((0..m.rows).map(|r| (0..m.cols).map(|c| m.get(r, c)).collect()).collect())
    }
}

/// Lowered loop program.
#[pyclass(frozen)]
struct LoopIr {
    inner: CoreLoopIr,
}

#[pymethods]
impl LoopIr {
    fn __str__(&self) -> String {
        self.inner.to_string()
    }

    #[getter]
    fn layout(&self) -> &'static str {
        self.inner.layout.name()
    }

    #[getter]
    fn vectors(&self) -> Vec<(String, String)> {
        self.inner.vectors.iter().map(|d| (d.name.clone(), d.dom.to_string())).collect()
    }

    /// C source; `dgemm=True` binds site-local matmuls to `dgemm`.
    #[pyo3(signature = (name = "program", dgemm = false))]
    fn emit_c(&self, name: &str, dgemm: bool) -> PyResult<String> {
        let bindings = if dgemm { vec![LibraryBinding::dgemm()] } else { vec![] };
        emit(&self.inner, &bindings, &EmitParams { name: name.into() }).map_err(value_err)
    }
}

/// SU(3) gauge configuration.
#[pyclass(frozen)]
struct Gauge {
    inner: GaugeConfig,
}

#[pymethods]
impl Gauge {
    #[staticmethod]
    fn random(dims: [usize; 4], seed: u64) -> PyResult<Gauge> {
        Ok(Gauge {
            inner: random_gauge(dims, seed).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Gauge> {
        Ok(Gauge {
            inner: GaugeConfig::load(path.as_ref()).map_err(value_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref()).map_err(value_err)
    }

    #[getter]
    fn dims(&self) -> [usize; 4] {
        self.inner.dims()
    }

    /// Number of complex entries in a full-lattice vector.
    #[getter]
    fn vector_len(&self) -> usize {
        self.inner.lattice.volume() * 12
    }
}

#[pyfunction]
fn random_vector(n: usize, seed: u64) -> Vec<Complex> {
    core_random_vector(n, seed)
}

/// Runs a compiled program on the interpreter. `epsilon` is relative to
/// `<b|b>`. Returns a dict with `x`, `trace`, `dirac_applications` and
/// `converged`.
#[pyfunction]
#[pyo3(signature = (ir, gauge, b, kappa = 0.15, mu = 0.1, epsilon = 1e-16, max_iter = 10_000, threads = 1))]
#[allow(clippy::too_many_arguments)]
fn run<'py>(
    py: Python<'py>,
    ir: &LoopIr,
    gauge: &Gauge,
    b: Vec<Complex>,
    kappa: f64,
    mu: f64,
    epsilon: f64,
    max_iter: usize,
    threads: usize,
) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    let params = RunParams {
        kappa,
        mu,
        epsilon: epsilon * norm2(&b),
        max_iter,
        ..RunParams::default()
    };
    let (x, trace, count, converged) = match core_run(&ir.inner, &gauge.inner, &b, &params, threads.max(1)) {
        Ok(e) => (e.x, e.trace, e.dirac_applications, true),
        Err(VmError::MaxIterExceeded { x, trace }) => (x, trace, 0, false),
        Err(e) => return Err(runtime_err(e)),
    };
    let mut out: HashMap<&str, Py<PyAny>> = HashMap::new();
    out.insert("x", x.into_pyobject(py)?.into_any().unbind());
    out.insert("trace", trace.into_pyobject(py)?.into_any().unbind());
    out.insert("dirac_applications", count.into_pyobject(py)?.into_any().unbind());
    out.insert("converged", converged.into_pyobject(py)?.to_owned().into_any().unbind());
    out.into_pyobject(py)
}

/// Parses a term and prints it back in canonical syntax.
#[pyfunction]
fn pretty(term: &str) -> PyResult<String> {
    Ok(term_to_string(&parse_term(term).map_err(value_err)?))
}

#[pymodule(name = "qiral")]
fn qiral(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Session>()?;
    m.add_class::<LoopIr>()?;
    m.add_class::<Gauge>()?;
    m.add_function(wrap_pyfunction!(random_vector, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(pretty, m)?)?;
    Ok(())
}
