//! `qiralc`: check, run, build and cross-check QIRAL programs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use qiral_core::algorithms::AlgorithmError;
use qiral_core::backend_c::{emit, write_sources, EmitParams, LibraryBinding};
use qiral_core::gauge::{random_gauge, random_vector, save_vector, load_vector, GaugeConfig};
use qiral_core::lowering::{lower_full, Layout, LoopIr};
use qiral_core::oracle::{check_rule_soundness, dense_solve, rel_diff, Oracle, SoundnessError};
use qiral_core::pipeline::{norm2, run, PipelineError, Session};
use qiral_core::prelude::{library, parse_all, SOLVE};
use qiral_core::printer::term_to_string;
use qiral_core::rewrite::Rule;
use qiral_core::vm::{Execution, RunParams, VmError};
use qiral_core::{Complex, SourceUnit, Stmt, Term};

#[derive(Parser)]
#[command(name = "qiralc", version, about = "Compiler and verification driver for QIRAL lattice programs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse and type check the sources.
    Check(Config),
    /// Plan, lower and execute on the interpreter.
    Run(RunArgs),
    /// Plan, lower and emit C (or LoopIR) files.
    Build(BuildArgs),
    /// Compare the interpreter against dense linear algebra.
    Oracle(Config),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum LayoutArg {
    Nested,
    Linear,
}

impl From<LayoutArg> for Layout {
    fn from(l: LayoutArg) -> Layout {
        match l {
            LayoutArg::Nested => Layout::Nested,
            LayoutArg::Linear => Layout::Linear,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EmitTarget {
    C,
    Ir,
}

#[derive(Args, Debug, Clone)]
struct Config {
    /// Program sources, read after the library. The bundled goal is used
    /// when none of them has a goal block.
    inputs: Vec<PathBuf>,
    /// Library files replacing the bundled declarations, equations and
    /// algorithm templates.
    #[arg(long)]
    prelude: Vec<PathBuf>,
    /// Algorithm templates to apply, in order (e.g. SCHUR,CGNR).
    #[arg(long, value_delimiter = ',')]
    algorithms: Vec<String>,
    /// Lattice extents; each must be even. Defaults to 4,4,4,4 (2,2,2,2 for oracle).
    #[arg(long, value_parser = parse_dims)]
    lattice: Option<[usize; 4]>,
    #[arg(long, default_value_t = 0.15)]
    kappa: f64,
    #[arg(long, default_value_t = 0.1)]
    mu: f64,
    /// Stop when the loop residual drops below epsilon * <b|b>.
    #[arg(long, default_value_t = 1e-16)]
    epsilon: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
    /// Seed for the gauge field; the right-hand side uses seed + 1.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = LayoutArg::Nested)]
    loop_layout: LayoutArg,
    /// Write the CSV trace (or oracle report) here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Write every rewrite step as a JSON line to this file.
    #[arg(long)]
    trace_rewrites: Option<PathBuf>,
    /// Print the lowered LoopIR to stderr.
    #[arg(long)]
    dump_ir: bool,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    #[command(flatten)]
    cfg: Config,
    /// Gauge configuration file (QGAUGE1); random when absent.
    #[arg(long)]
    gauge: Option<PathBuf>,
    /// Right-hand side vector file (QVEC1); random when absent.
    #[arg(long)]
    rhs: Option<PathBuf>,
    /// Where to write the solution vector.
    #[arg(long, default_value = "x.qvec")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct BuildArgs {
    #[command(flatten)]
    cfg: Config,
    #[arg(long, value_enum, default_value_t = EmitTarget::C)]
    emit: EmitTarget,
    /// Output directory for `<name>.c` and the runtime.
    #[arg(long, default_value = "build")]
    out_dir: PathBuf,
    /// Base name of the generated file; derived from the algorithms by default.
    #[arg(long)]
    name: Option<String>,
}

fn parse_dims(s: &str) -> Result<[usize; 4], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(format!("expected four comma-separated extents, got `{s}`"));
    }
    let mut dims = [0; 4];
    for (d, p) in dims.iter_mut().zip(&parts) {
        *d = p.parse().map_err(|_| format!("bad extent `{p}`"))?;
        if *d == 0 || *d % 2 == 1 {
            return Err(format!("extent {d} is not a positive even number"));
        }
    }
    Ok(dims)
}

/// Failure classes, each with its exit status.
enum Failure {
    /// Parse, type or configuration errors.
    Check(String),
    MaxIter,
    Pipeline(String),
    Tolerance(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::MaxIter => 2,
            Failure::Pipeline(_) => 3,
            Failure::Tolerance(_) => 4,
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Failure {
        match e {
            PipelineError::Check(ds) => Failure::Check(ds.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\n")),
            PipelineError::Algorithm(a @ AlgorithmError::UnknownAlgorithm(_)) => Failure::Check(a.to_string()),
            other => Failure::Pipeline(other.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Pipeline(format!("{}: {e}", path.display()))
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Check(format!("{}: {e}", path.display())))
}

fn load_unit(cfg: &Config) -> Result<SourceUnit, Failure> {
    let mut sources: Vec<(String, String)> = if cfg.prelude.is_empty() {
        library().into_iter().map(|(n, t)| (n.to_string(), t.to_string())).collect()
    } else {
        cfg.prelude.iter().map(|p| Ok((p.display().to_string(), read(p)?))).collect::<Result<_, Failure>>()?
    };
    for p in &cfg.inputs {
        sources.push((p.display().to_string(), read(p)?));
    }
    let refs: Vec<(&str, &str)> = sources.iter().map(|(n, t)| (n.as_str(), t.as_str())).collect();
    let mut unit = parse_all(&refs).map_err(|errs| {
        Failure::Check(
            errs.iter()
                .map(|(file, e)| format!("{file}:{}:{}: {}", e.line, e.col, e.msg))
                .collect::<Vec<_>>()
                .join("\n"),
        )
    })?;
    if unit.goal.is_empty() {
        let goal = parse_all(&[("solve.qir", SOLVE)]).map_err(|_| Failure::Pipeline("bundled goal".into()))?;
        unit = SourceUnit::merge([unit, goal]);
    }
    Ok(unit)
}

fn algorithms(cfg: &Config) -> Vec<&str> {
    cfg.algorithms.iter().map(String::as_str).collect()
}

fn require_algorithms(cfg: &Config) -> Result<(), Failure> {
    if cfg.algorithms.is_empty() {
        return Err(Failure::Check("--algorithms must name at least one template".into()));
    }
    Ok(())
}

fn compile(session: &Session, cfg: &Config) -> Result<LoopIr, Failure> {
    let algs = algorithms(cfg);
    let plan = match &cfg.trace_rewrites {
        Some(path) => {
            let f = File::create(path).map_err(|e| io_failure(path, e))?;
            session.plan_traced(&algs, Box::new(BufWriter::new(f)))?
        }
        None => session.plan(&algs)?,
    };
    let ir = lower_full(&plan, cfg.loop_layout.into()).map_err(|e| Failure::Pipeline(e.to_string()))?;
    if cfg.dump_ir {
        eprint!("{ir}");
    }
    Ok(ir)
}

fn cmd_check(cfg: &Config) -> Result<(), Failure> {
    let session = Session::new(&load_unit(cfg)?)?;
    for a in &cfg.algorithms {
        if session.program.unit.template(a).is_none() {
            return Err(Failure::Check(AlgorithmError::UnknownAlgorithm(a.clone()).to_string()));
        }
    }
    let u = &session.program.unit;
    eprintln!(
        "ok: {} declarations, {} definitions, {} equations, {} algorithms",
        u.decls.len(),
        u.defs.len(),
        u.equations.len(),
        u.templates.len()
    );
    Ok(())
}

fn gauge_for(cfg: &Config, file: Option<&Path>, default_dims: [usize; 4]) -> Result<GaugeConfig, Failure> {
    match file {
        Some(p) => GaugeConfig::load(p).map_err(|e| io_failure(p, e)),
        None => random_gauge(cfg.lattice.unwrap_or(default_dims), cfg.seed).map_err(|e| Failure::Check(e.to_string())),
    }
}

fn write_trace(cfg: &Config, trace: &[(usize, f64)]) -> Result<(), Failure> {
    let mut text = String::from("iteration,residual\n");
    for (i, r) in trace {
        text.push_str(&format!("{i},{r:.16e}\n"));
    }
    emit_text(cfg.report.as_deref(), &text)
}

fn emit_text(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| io_failure(p, e)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::Pipeline(e.to_string())),
    }
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let cfg = &args.cfg;
    require_algorithms(cfg)?;
    let session = Session::new(&load_unit(cfg)?)?;
    let ir = compile(&session, cfg)?;
    let gauge = gauge_for(cfg, args.gauge.as_deref(), [4; 4])?;
    let n = ir.dom("b").sites(gauge.lattice.volume()) * 12;
    let b = match &args.rhs {
        Some(p) => load_vector(p).map_err(|e| io_failure(p, e))?,
        None => random_vector(n, cfg.seed.wrapping_add(1)),
    };
    let params = RunParams {
        kappa: cfg.kappa,
        mu: cfg.mu,
        epsilon: cfg.epsilon * norm2(&b),
        max_iter: cfg.max_iter,
        seed: cfg.seed,
    };
    let (exec, converged) = match run(&ir, &gauge, &b, &params, cfg.threads.max(1)) {
        Ok(e) => (e, true),
        Err(VmError::MaxIterExceeded { x, trace }) => (
            Execution {
                x,
                trace,
                dirac_applications: 0,
            },
            false,
        ),
        Err(e) => return Err(Failure::Pipeline(e.to_string())),
    };
    write_trace(cfg, &exec.trace)?;
    save_vector(&args.out, &exec.x).map_err(|e| io_failure(&args.out, e))?;
    eprintln!("iterations {}", exec.trace.len());
    if converged {
        eprintln!("dirac_applications {}", exec.dirac_applications);
        Ok(())
    } else {
        eprintln!("no convergence within {} iterations", cfg.max_iter);
        Err(Failure::MaxIter)
    }
}

fn cmd_build(args: &BuildArgs) -> Result<(), Failure> {
    let cfg = &args.cfg;
    require_algorithms(cfg)?;
    let session = Session::new(&load_unit(cfg)?)?;
    let ir = compile(&session, cfg)?;
    let name = args
        .name
        .clone()
        .unwrap_or_else(|| cfg.algorithms.iter().map(|a| a.to_lowercase()).collect::<Vec<_>>().join("_"));
    std::fs::create_dir_all(&args.out_dir).map_err(|e| io_failure(&args.out_dir, e))?;
    let path = match args.emit {
        EmitTarget::Ir => {
            let p = args.out_dir.join(format!("{name}.ir"));
            std::fs::write(&p, ir.to_string()).map_err(|e| io_failure(&p, e))?;
            p
        }
        EmitTarget::C => {
            let bindings = session
                .program
                .unit
                .bindings
                .iter()
                .map(LibraryBinding::from_decl)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Failure::Check(e.to_string()))?;
            let src = emit(&ir, &bindings, &EmitParams { name: name.clone() }).map_err(|e| Failure::Pipeline(e.to_string()))?;
            write_sources(&args.out_dir, &name, &src).map_err(|e| Failure::Pipeline(e.to_string()))?
        }
    };
    eprintln!("wrote {}", path.display());
    Ok(())
}

/// `(M, b)` for a goal statement `x = M^-1 * b`.
fn goal_system(unit: &SourceUnit) -> Option<(Term, String)> {
    unit.goal.iter().find_map(|s| match s {
        Stmt::Assign { rhs: Term::Mul(inv, b), .. } => match (&**inv, &**b) {
            (Term::Inverse(m), Term::Sym(b)) => Some(((**m).clone(), b.clone())),
            _ => None,
        },
        _ => None,
    })
}

fn cmd_oracle(cfg: &Config) -> Result<(), Failure> {
    let session = Session::new(&load_unit(cfg)?)?;
    let algs: Vec<&str> = if cfg.algorithms.is_empty() { vec!["CGNR"] } else { algorithms(cfg) };
    let (m, b_name) = goal_system(&session.program.unit)
        .ok_or_else(|| Failure::Pipeline("the goal has no statement of the form `x = M^-1 * b`".into()))?;
    let gauge = gauge_for(cfg, None, [2; 4])?;
    let oracle = Oracle::for_program(&session.program, &gauge, &[("kappa", cfg.kappa), ("mu", cfg.mu)]);
    let dense = oracle.denote_matrix(&m).map_err(|e| Failure::Pipeline(e.to_string()))?;
    let b = random_vector(dense.rows, cfg.seed.wrapping_add(1));
    let exact = dense_solve(&dense, &b).map_err(|e| Failure::Pipeline(e.to_string()))?;

    let mut cfg_run = cfg.clone();
    cfg_run.algorithms = algs.iter().map(|s| s.to_string()).collect();
    let ir = compile(&session, &cfg_run)?;
    let params = RunParams {
        kappa: cfg.kappa,
        mu: cfg.mu,
        epsilon: cfg.epsilon * norm2(&b),
        max_iter: cfg.max_iter,
        seed: cfg.seed,
    };
    let solved: Vec<Complex> = match run(&ir, &gauge, &b, &params, cfg.threads.max(1)) {
        Ok(e) => e.x,
        Err(VmError::MaxIterExceeded { x, .. }) => x,
        Err(e) => return Err(Failure::Pipeline(e.to_string())),
    };
    let solve_err = rel_diff(&solved, &exact);

    let apply = session.compile_stmt(&format!("x = {} * {b_name}", term_to_string(&m)), cfg.loop_layout.into())?;
    let mut apply_err: f64 = 0.0;
    for k in 0..20u64 {
        let v = random_vector(dense.rows, cfg.seed.wrapping_add(100 + k));
        let want = dense.matvec(&v).map_err(|e| Failure::Pipeline(e.to_string()))?;
        let got = run(&apply, &gauge, &v, &params, cfg.threads.max(1)).map_err(|e| Failure::Pipeline(e.to_string()))?;
        apply_err = apply_err.max(rel_diff(&got.x, &want));
    }

    let mut unsound = Vec::new();
    for (i, eq) in session.program.unit.equations.iter().enumerate() {
        let rule = Rule::from_equation(eq).map_err(|e| Failure::Pipeline(e.to_string()))?;
        match check_rule_soundness(&rule, 20, &session.program.env, &gauge, i as u64) {
            Ok(()) => {}
            Err(SoundnessError::Counterexample(c)) => unsound.push(format!("{} (error {:e})", eq.name, c.error)),
            Err(e) => unsound.push(e.to_string()),
        }
    }

    let mut report = format!(
        "lattice {:?}\nalgorithms {}\nsolve_rel_error {solve_err:e}\napply_rel_error {apply_err:e}\nunsound_rules {}\n",
        gauge.dims(),
        algs.join(","),
        unsound.len()
    );
    for u in &unsound {
        report.push_str(&format!("unsound {u}\n"));
    }
    emit_text(cfg.report.as_deref(), &report)?;
    let ok = solve_err <= 1e-6 && apply_err <= 1e-12 && unsound.is_empty();
    if ok {
        Ok(())
    } else {
        Err(Failure::Tolerance(format!(
            "tolerance breached: solve {solve_err:e} (limit 1e-6), apply {apply_err:e} (limit 1e-12), {} unsound rules",
            unsound.len()
        )))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.cmd {
        Cmd::Check(c) => cmd_check(c),
        Cmd::Run(r) => cmd_run(r),
        Cmd::Build(b) => cmd_build(b),
        Cmd::Oracle(c) => cmd_oracle(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Check(m) | Failure::Pipeline(m) | Failure::Tolerance(m) => eprintln!("error: {m}"),
                Failure::MaxIter => {}
            }
            ExitCode::from(f.code())
        }
    }
}
