//! Bundled sources: lattice declarations, the rewrite corpus, the solver
//! templates and the default goal.

use crate::ir::SourceUnit;
use crate::parser::{parse, ParseError};

pub const LQCD: &str = include_str!("../prelude/lqcd.qir");
pub const EQUATIONS: &str = include_str!("../prelude/equations.qir");
pub const ALGORITHMS: &str = include_str!("../prelude/algorithms.qir");
pub const SOLVE: &str = include_str!("../prelude/solve.qir");

/// `(file name, text)` of every bundled library file, goal excluded.
pub fn library() -> Vec<(&'static str, &'static str)> {
    vec![
        ("lqcd.qir", LQCD),
        ("equations.qir", EQUATIONS),
        ("algorithms.qir", ALGORITHMS),
    ]
}

/// Parses named sources and merges them into one unit.
pub fn parse_all(sources: &[(&str, &str)]) -> Result<SourceUnit, Vec<(String, ParseError)>> {
    let mut units = Vec::new();
    let mut errors = Vec::new();
    for (name, text) in sources {
        match parse(text) {
            Ok(u) => units.push(u),
            Err(es) => errors.extend(es.into_iter().map(|e| (name.to_string(), e))),
        }
    }
    if errors.is_empty() {
        Ok(SourceUnit::merge(units))
    } else {
        Err(errors)
    }
}

/// The bundled library plus the default goal.
pub fn standard_unit() -> SourceUnit {
    let mut sources = library();
    sources.push(("solve.qir", SOLVE));
    parse_all(&sources).expect("bundled sources parse")
}
