//! QIRAL-dialect compiler: parsing, type checking, rewriting, algorithm
//! instantiation, loop lowering, a reference interpreter, a C/OpenMP
//! backend and a dense-matrix oracle for cross-checking all of them.

pub mod algorithms;
pub mod backend_c;
pub mod gamma;
pub mod gauge;
pub mod ir;
pub mod lattice;
pub mod lowering;
pub mod oracle;
pub mod parser;
pub mod pipeline;
pub mod prelude;
pub mod printer;
pub mod rewrite;
pub mod shape;
pub mod stencil;
pub mod vm;

pub use ir::*;
