//! End-to-end helpers: standard library, planning, lowering, running.

use std::collections::HashMap;

use thiserror::Error;

use crate::algorithms::{AlgorithmError, Plan, Planner};
use crate::gauge::GaugeConfig;
use crate::ir::*;
use crate::lowering::{lower_full, lower_stmts, fuse_and_promote, privatize, Layout, LoopIr, LowerError};
use crate::parser::parse_stmt;
use crate::prelude::standard_unit;
use crate::rewrite::{RewriteError, RuleSet};
use crate::shape::{typecheck_program, Diagnostic, TypedProgram};
use crate::vm::{parallel_execute, ExecOptions, Execution, RunParams, VmError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("type errors: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    Check(Vec<Diagnostic>),
    #[error(transparent)]
    Algorithm(#[from] AlgorithmError),
    #[error(transparent)]
    Rewrite(#[from] RewriteError),
    #[error(transparent)]
    Lower(#[from] LowerError),
    #[error(transparent)]
    Vm(#[from] VmError),
    #[error("{0}")]
    Other(String),
}

/// A checked program with its rewrite rules.
pub struct Session {
    pub program: TypedProgram,
    pub rules: RuleSet,
}

impl Session {
    pub fn new(unit: &SourceUnit) -> Result<Session, PipelineError> {
        let program = typecheck_program(unit).map_err(PipelineError::Check)?;
        let rules = RuleSet::from_program(&program)?;
        Ok(Session { program, rules })
    }

    /// The shipped library plus the standard goal.
    pub fn standard() -> Session {
        Session::new(&standard_unit()).expect("shipped library checks")
    }

    pub fn plan(&self, algorithms: &[&str]) -> Result<Plan, PipelineError> {
        Ok(Planner::new(&self.program, &self.rules).plan(algorithms)?)
    }

    /// Like `plan`, writing one JSON line per rewrite step to `sink`.
    pub fn plan_traced(&self, algorithms: &[&str], sink: Box<dyn std::io::Write + Send + '_>) -> Result<Plan, PipelineError> {
        Ok(Planner::new(&self.program, &self.rules).with_trace(sink).plan(algorithms)?)
    }

    pub fn compile(&self, algorithms: &[&str], layout: Layout) -> Result<LoopIr, PipelineError> {
        Ok(lower_full(&self.plan(algorithms)?, layout)?)
    }

    /// Lowers one statement such as `x = Dirac * b` after rewriting it to
    /// normal form.
    pub fn compile_stmt(&self, src: &str, layout: Layout) -> Result<LoopIr, PipelineError> {
        let src = src.trim().trim_end_matches(';');
        let stmt = parse_stmt(&format!("{src} ;")).map_err(|e| PipelineError::Other(e.to_string()))?;
        let Stmt::Assign { lhs, rhs, .. } = &stmt else {
            return Err(PipelineError::Other("expected an assignment".into()));
        };
        let rhs = crate::shape::elaborate_term(rhs, &self.program.env)
            .map_err(|e| PipelineError::Other(e.to_string()))?;
        let rhs = self.rules.normalize(&rhs, &self.program.env)?;
        let ir = lower_stmts(&[Stmt::assign(lhs, rhs)], &self.program.env, lhs, layout)?;
        Ok(privatize(&fuse_and_promote(&ir))?)
    }
}

/// Runs a compiled solver on `b`.
pub fn run(
    ir: &LoopIr,
    gauge: &GaugeConfig,
    b: &[Complex],
    params: &RunParams,
    threads: usize,
) -> Result<Execution, VmError> {
    let mut inputs = HashMap::new();
    inputs.insert("b".to_string(), b.to_vec());
    parallel_execute(
        ir,
        gauge,
        &inputs,
        params,
        ExecOptions {
            threads,
            privatize: true,
        },
    )
}

pub fn norm2(v: &[Complex]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}
