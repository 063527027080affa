//! Parser for the plain-text `.qir` dialect.
//!
//! ```text
//! indexset L = lattice ;
//! scalar kappa, mu : real ;
//! vector b, x : L (x) C (x) S ;
//! def Dirac = I_{L (x) C (x) S} + kappa * (sum d in D : ...) ;
//! equation shift_inverse [X : set; d : dir] shift(X, d) * shift(X, -d) = I_X ;
//! algorithm CGNR { input A : M, b : V ; output x : V ; match x = A^-1 * b ; body { ... } }
//! bind C = A * B => dgemm(A, B, C) ;
//! goal { x = Dirac^-1 * b ; }
//! ```

use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

use crate::ir::*;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{line}:{col}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(String),
    Float(String),
    Sym(&'static str),
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) | Tok::Int(s) | Tok::Float(s) => write!(f, "`{s}`"),
            Tok::Sym(s) => write!(f, "`{s}`"),
            Tok::Eof => write!(f, "end of input"),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    span: Span,
}

const SYMBOLS: &[&str] = &[
    "(x)", "^-1", "^t", "=>", "->", "(", ")", "{", "}", "[", "]", "<", ">", "|", ",", ";", ":", "=",
    "+", "-", "*", "/", ".",
];

fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == '#' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        let span = Span { line, col };
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let s: String = chars[start..i].iter().collect();
            col += i - start;
            out.push(Token { tok: Tok::Ident(s), span });
            continue;
        }
        if c.is_ascii_digit() {
            let start = i;
            let mut float = false;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
                float = true;
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '-' || chars[j] == '+') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    float = true;
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let s: String = chars[start..i].iter().collect();
            col += i - start;
            out.push(Token {
                tok: if float { Tok::Float(s) } else { Tok::Int(s) },
                span,
            });
            continue;
        }
        let rest: String = chars[i..chars.len().min(i + 3)].iter().collect();
        match SYMBOLS.iter().find(|s| rest.starts_with(**s)) {
            Some(s) => {
                i += s.len();
                col += s.len();
                out.push(Token { tok: Tok::Sym(s), span });
            }
            None => {
                return Err(ParseError {
                    line,
                    col,
                    msg: format!("unexpected character `{c}`"),
                })
            }
        }
    }
    out.push(Token {
        tok: Tok::Eof,
        span: Span { line, col },
    });
    Ok(out)
}

const KEYWORDS: &[&str] = &[
    "indexset", "scalar", "vector", "matrix", "def", "equation", "algorithm", "bind", "goal", "input",
    "output", "match", "require", "var", "body", "while", "sum", "dsum", "in", "if", "i", "gamma",
    "gamma5", "shift", "U", "proj", "dagger", "lit", "even", "odd", "lattice", "atomic", "directions",
];

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

type PResult<T> = Result<T, ParseError>;

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn span(&self) -> Span {
        self.toks[self.pos].span
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].tok.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn err<T>(&self, msg: impl Into<String>) -> PResult<T> {
        let s = self.span();
        Err(ParseError {
            line: s.line,
            col: s.col,
            msg: msg.into(),
        })
    }

    fn is_sym(&self, s: &str) -> bool {
        matches!(self.peek(), Tok::Sym(x) if *x == s)
    }

    fn is_kw(&self, s: &str) -> bool {
        matches!(self.peek(), Tok::Ident(x) if x == s)
    }

    fn eat_sym(&mut self, s: &str) -> bool {
        if self.is_sym(s) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn eat_kw(&mut self, s: &str) -> bool {
        if self.is_kw(s) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, s: &str) -> PResult<()> {
        if self.eat_sym(s) {
            Ok(())
        } else {
            let found = self.peek().clone();
            self.err(format!("expected `{s}`, found {found}"))
        }
    }

    fn expect_kw(&mut self, s: &str) -> PResult<()> {
        if self.eat_kw(s) {
            Ok(())
        } else {
            let found = self.peek().clone();
            self.err(format!("expected `{s}`, found {found}"))
        }
    }

    fn name(&mut self) -> PResult<String> {
        match self.peek().clone() {
            Tok::Ident(s) if !KEYWORDS.contains(&s.as_str()) => {
                self.bump();
                Ok(s)
            }
            other => self.err(format!("expected a name, found {other}")),
        }
    }

    fn names(&mut self) -> PResult<Vec<String>> {
        let mut out = vec![self.name()?];
        while self.eat_sym(",") {
            out.push(self.name()?);
        }
        Ok(out)
    }

    // ---- index sets -------------------------------------------------

    fn set_expr(&mut self) -> PResult<SetExpr> {
        let mut parts = vec![self.set_atom()?];
        while self.eat_sym("(x)") {
            parts.push(self.set_atom()?);
        }
        Ok(SetExpr::product(parts))
    }

    fn set_atom(&mut self) -> PResult<SetExpr> {
        if self.eat_sym("(") {
            let inner = self.set_expr()?;
            self.expect_sym(")")?;
            return Ok(inner);
        }
        for (kw, p) in [("even", Parity::Even), ("odd", Parity::Odd)] {
            if self.eat_kw(kw) {
                self.expect_sym("(")?;
                let inner = self.set_expr()?;
                self.expect_sym(")")?;
                return Ok(SetExpr::Parity(p, Box::new(inner)));
            }
        }
        Ok(SetExpr::Named(self.name()?))
    }

    // ---- directions -------------------------------------------------

    fn signed_dir(&mut self) -> PResult<SignedDir> {
        let neg = self.eat_sym("-");
        Ok(SignedDir { neg, dir: self.dir_ref()? })
    }

    fn dir_ref(&mut self) -> PResult<DirRef> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                if let Some(a) = Axis::from_name(&s) {
                    self.bump();
                    Ok(DirRef::Axis(a))
                } else {
                    Ok(DirRef::Var(self.name()?))
                }
            }
            other => self.err(format!("expected a direction, found {other}")),
        }
    }

    // ---- expressions ------------------------------------------------

    fn expr(&mut self) -> PResult<Term> {
        let mut lhs = self.mul_expr()?;
        loop {
            if self.eat_sym("+") {
                lhs = Term::add(lhs, self.mul_expr()?);
            } else if self.eat_sym("-") {
                lhs = Term::sub(lhs, self.mul_expr()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn mul_expr(&mut self) -> PResult<Term> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat_sym("*") {
                lhs = Term::mul(lhs, self.unary()?);
            } else if self.eat_sym("(x)") {
                lhs = Term::tensor(lhs, self.unary()?);
            } else if self.eat_sym(".") {
                lhs = Term::smul(lhs, self.unary()?);
            } else if self.eat_sym("/") {
                lhs = Term::div(lhs, self.unary()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> PResult<Term> {
        if self.eat_sym("-") {
            return Ok(Term::neg(self.unary()?));
        }
        for kw in ["sum", "dsum"] {
            if self.is_kw(kw) {
                self.bump();
                let binder = self.name()?;
                self.expect_kw("in")?;
                let domain = self.set_expr()?;
                self.expect_sym(":")?;
                let body = self.mul_expr()?;
                return Ok(if kw == "sum" {
                    Term::isum(&binder, domain, body)
                } else {
                    Term::dsum(&binder, domain, body)
                });
            }
        }
        self.postfix()
    }

    fn postfix(&mut self) -> PResult<Term> {
        let mut t = self.primary()?;
        loop {
            if self.eat_sym("^-1") {
                t = Term::inverse(t);
            } else if self.eat_sym("^t") {
                t = Term::transpose(t);
            } else if self.is_sym("[") {
                self.bump();
                let s = self.set_expr()?;
                self.expect_sym("]")?;
                t = Term::SubVector(Box::new(t), s);
            } else {
                return Ok(t);
            }
        }
    }

    fn number(&mut self) -> PResult<f64> {
        let neg = self.eat_sym("-");
        let v = match self.bump() {
            Tok::Int(s) | Tok::Float(s) => s.parse::<f64>().map_err(|e| ParseError {
                line: 0,
                col: 0,
                msg: e.to_string(),
            })?,
            other => return self.err(format!("expected a number, found {other}")),
        };
        Ok(if neg { -v } else { v })
    }

    fn primary(&mut self) -> PResult<Term> {
        let tok = self.peek().clone();
        match tok {
            Tok::Int(s) if s == "0" => {
                self.bump();
                Ok(Term::Zero)
            }
            Tok::Int(_) | Tok::Float(_) => Ok(Term::real(self.number()?)),
            Tok::Sym("(") => {
                self.bump();
                let e = self.expr()?;
                self.expect_sym(")")?;
                Ok(e)
            }
            Tok::Sym("<") => {
                self.bump();
                let a = self.expr()?;
                self.expect_sym("|")?;
                let b = self.expr()?;
                self.expect_sym(">")?;
                Ok(Term::inner(a, b))
            }
            Tok::Ident(id) => self.ident_primary(&id),
            other => self.err(format!("expected an expression, found {other}")),
        }
    }

    fn ident_primary(&mut self, id: &str) -> PResult<Term> {
        match id {
            "i" => {
                self.bump();
                Ok(Term::ImagUnit)
            }
            "gamma5" => {
                self.bump();
                Ok(Term::Gamma5)
            }
            "gamma" => {
                self.bump();
                self.expect_sym("[")?;
                let d = self.dir_ref()?;
                self.expect_sym("]")?;
                Ok(Term::Gamma(d))
            }
            "shift" => {
                self.bump();
                self.expect_sym("(")?;
                let set = self.set_expr()?;
                self.expect_sym(",")?;
                let d = self.signed_dir()?;
                self.expect_sym(")")?;
                Ok(Term::Shift(set, d))
            }
            "U" => {
                self.bump();
                self.expect_sym("(")?;
                let d = self.signed_dir()?;
                self.expect_sym(")")?;
                self.expect_sym("[")?;
                let site = self.name()?;
                self.expect_sym("]")?;
                Ok(Term::Link(d, site))
            }
            "proj" => {
                self.bump();
                self.expect_sym("(")?;
                let p = if self.eat_kw("even") {
                    Parity::Even
                } else if self.eat_kw("odd") {
                    Parity::Odd
                } else {
                    return self.err("expected `even` or `odd`");
                };
                self.expect_sym(",")?;
                let set = self.set_expr()?;
                self.expect_sym(")")?;
                Ok(Term::Projection(p, set))
            }
            "dagger" => {
                self.bump();
                self.expect_sym("(")?;
                let e = self.expr()?;
                self.expect_sym(")")?;
                Ok(Term::dagger(e))
            }
            "lit" => {
                self.bump();
                self.expect_sym("(")?;
                let re = self.number()?;
                self.expect_sym(",")?;
                let im = self.number()?;
                self.expect_sym(")")?;
                Ok(Term::Lit(Complex::new(re, im)))
            }
            "I_" => {
                self.bump();
                self.expect_sym("{")?;
                let s = self.set_expr()?;
                self.expect_sym("}")?;
                Ok(Term::Identity(s))
            }
            _ if id.starts_with("I_") => {
                self.bump();
                Ok(Term::Identity(SetExpr::Named(id[2..].to_string())))
            }
            _ => {
                let name = self.name()?;
                if self.is_sym("(") {
                    self.bump();
                    let mut args = Vec::new();
                    if !self.is_sym(")") {
                        args.push(self.expr()?);
                        while self.eat_sym(",") {
                            args.push(self.expr()?);
                        }
                    }
                    self.expect_sym(")")?;
                    Ok(Term::Call(name, args))
                } else {
                    Ok(Term::Sym(name))
                }
            }
        }
    }

    // ---- statements -------------------------------------------------

    fn stmt(&mut self) -> PResult<Stmt> {
        let span = self.span();
        if self.eat_kw("while") {
            self.expect_sym("(")?;
            let lhs = self.expr()?;
            let op = if self.eat_sym(">") {
                CmpOp::Gt
            } else if self.eat_sym("<") {
                CmpOp::Lt
            } else {
                return self.err("expected `>` or `<` in while condition");
            };
            let rhs = self.expr()?;
            self.expect_sym(")")?;
            let body = self.block()?;
            return Ok(Stmt::While {
                cond: Cond { lhs, op, rhs },
                body,
                span,
            });
        }
        let lhs = self.name()?;
        self.expect_sym("=")?;
        let rhs = self.expr()?;
        self.expect_sym(";")?;
        Ok(Stmt::Assign { lhs, rhs, span })
    }

    fn block(&mut self) -> PResult<Vec<Stmt>> {
        self.expect_sym("{")?;
        let mut out = Vec::new();
        while !self.is_sym("}") {
            if matches!(self.peek(), Tok::Eof) {
                return self.err("unterminated block");
            }
            out.push(self.stmt()?);
        }
        self.bump();
        Ok(out)
    }

    // ---- declarations -----------------------------------------------

    fn type_expr(&mut self) -> PResult<TypeExpr> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.bump();
                match s.as_str() {
                    "M" => Ok(TypeExpr::Matrix(None)),
                    "V" => Ok(TypeExpr::Vector(None)),
                    "R" | "real" => Ok(TypeExpr::Real),
                    "complex" => Ok(TypeExpr::Complex),
                    "vector" => {
                        self.expect_sym("(")?;
                        let s = self.set_expr()?;
                        self.expect_sym(")")?;
                        Ok(TypeExpr::Vector(Some(s)))
                    }
                    "matrix" => {
                        self.expect_sym("(")?;
                        let r = self.set_expr()?;
                        self.expect_sym("->")?;
                        let c = self.set_expr()?;
                        self.expect_sym(")")?;
                        Ok(TypeExpr::Matrix(Some((r, c))))
                    }
                    other => self.err(format!("unknown type `{other}`")),
                }
            }
            other => self.err(format!("expected a type, found {other}")),
        }
    }

    fn typed_names(&mut self) -> PResult<Vec<TypedName>> {
        let mut out = Vec::new();
        loop {
            let names = self.names()?;
            self.expect_sym(":")?;
            let ty = self.type_expr()?;
            out.extend(names.into_iter().map(|name| TypedName { name, ty: ty.clone() }));
            if !self.eat_sym(",") {
                return Ok(out);
            }
        }
    }

    fn sort(&mut self) -> PResult<Sort> {
        let s = match self.peek() {
            Tok::Ident(s) => s.clone(),
            other => return self.err(format!("expected a sort, found {other}")),
        };
        self.bump();
        Ok(match s.as_str() {
            "matrix" => Sort::Matrix,
            "vector" => Sort::Vector,
            "scalar" => Sort::Scalar,
            "term" => Sort::Term,
            "set" => Sort::Set,
            "dir" => Sort::Dir,
            other => return self.err(format!("unknown sort `{other}`")),
        })
    }

    fn item(&mut self, unit: &mut SourceUnit) -> PResult<()> {
        let span = self.span();
        let kw = match self.peek() {
            Tok::Ident(s) => s.clone(),
            other => return self.err(format!("expected a declaration, found {other}")),
        };
        self.bump();
        match kw.as_str() {
            "indexset" => {
                let name = self.name()?;
                self.expect_sym("=")?;
                let kind = if self.eat_kw("lattice") {
                    IndexKindDecl::Lattice
                } else if self.eat_kw("atomic") {
                    let n = self.number()?;
                    if n < 1.0 || n.fract() != 0.0 {
                        return self.err("atomic extent must be a positive integer");
                    }
                    IndexKindDecl::Atomic(n as usize)
                } else if self.eat_kw("directions") {
                    IndexKindDecl::Directions
                } else {
                    IndexKindDecl::Product(self.set_expr()?.factors())
                };
                self.expect_sym(";")?;
                unit.indexsets.push(IndexSetDecl { name, kind, span });
            }
            "scalar" | "vector" | "matrix" => {
                let names = self.names()?;
                self.expect_sym(":")?;
                let ty = match kw.as_str() {
                    "scalar" => {
                        if self.eat_kw("real") || self.eat_kw("R") {
                            TypeExpr::Real
                        } else if self.eat_kw("complex") {
                            TypeExpr::Complex
                        } else {
                            return self.err("expected `real` or `complex`");
                        }
                    }
                    "vector" => TypeExpr::Vector(Some(self.set_expr()?)),
                    _ => {
                        let r = self.set_expr()?;
                        self.expect_sym("->")?;
                        TypeExpr::Matrix(Some((r, self.set_expr()?)))
                    }
                };
                self.expect_sym(";")?;
                for name in names {
                    unit.decls.push(Decl { name, ty: ty.clone(), span });
                }
            }
            "def" => {
                let name = self.name()?;
                self.expect_sym("=")?;
                let body = self.expr()?;
                self.expect_sym(";")?;
                unit.defs.push(Def { name, body, span });
            }
            "equation" => {
                let name = self.name()?;
                let mut vars = Vec::new();
                if self.eat_sym("[") {
                    loop {
                        let names = self.names()?;
                        self.expect_sym(":")?;
                        let sort = self.sort()?;
                        vars.extend(names.into_iter().map(|n| (n, sort)));
                        if !self.eat_sym(";") {
                            break;
                        }
                    }
                    self.expect_sym("]")?;
                }
                let lhs = self.expr()?;
                self.expect_sym("=")?;
                let rhs = self.expr()?;
                let mut conds = Vec::new();
                if self.eat_kw("if") {
                    conds.push(self.expr()?);
                    while self.eat_sym(",") {
                        conds.push(self.expr()?);
                    }
                }
                self.expect_sym(";")?;
                unit.equations.push(Equation {
                    name,
                    vars,
                    lhs,
                    rhs,
                    conds,
                    span,
                });
            }
            "algorithm" => {
                let tpl = self.algorithm(span)?;
                unit.templates.push(tpl);
            }
            "bind" => {
                let pattern = self.bind_pattern()?;
                self.expect_sym("=>")?;
                let callee = self.name()?;
                self.expect_sym("(")?;
                let args = if self.is_sym(")") { Vec::new() } else { self.names()? };
                self.expect_sym(")")?;
                self.expect_sym(";")?;
                unit.bindings.push(BindingDecl {
                    pattern,
                    callee,
                    args,
                    span,
                });
            }
            "goal" => {
                let stmts = self.block()?;
                unit.goal.extend(stmts);
            }
            other => return self.err(format!("unknown declaration `{other}`")),
        }
        Ok(())
    }

    fn bind_pattern(&mut self) -> PResult<Stmt> {
        let span = self.span();
        let lhs = self.name()?;
        self.expect_sym("=")?;
        let rhs = self.expr()?;
        Ok(Stmt::Assign { lhs, rhs, span })
    }

    fn algorithm(&mut self, span: Span) -> PResult<AlgorithmTemplate> {
        let name = self.name()?;
        self.expect_sym("{")?;
        let mut tpl = AlgorithmTemplate {
            name,
            inputs: Vec::new(),
            outputs: Vec::new(),
            pattern: Stmt::assign("_", Term::Zero),
            requires: Vec::new(),
            vars: Vec::new(),
            body: Vec::new(),
            span,
        };
        let mut matches = 0;
        while !self.eat_sym("}") {
            if self.eat_kw("input") {
                tpl.inputs.extend(self.typed_names()?);
                self.expect_sym(";")?;
            } else if self.eat_kw("output") {
                tpl.outputs.extend(self.typed_names()?);
                self.expect_sym(";")?;
            } else if self.eat_kw("var") {
                tpl.vars.extend(self.typed_names()?);
                self.expect_sym(";")?;
            } else if self.eat_kw("match") {
                tpl.pattern = self.stmt()?;
                matches += 1;
            } else if self.eat_kw("require") {
                tpl.requires.push(self.expr()?);
                self.expect_sym(";")?;
            } else if self.eat_kw("body") {
                tpl.body = self.block()?;
            } else {
                let found = self.peek().clone();
                return self.err(format!("unexpected {found} in algorithm {}", tpl.name));
            }
        }
        if matches != 1 {
            return Err(ParseError {
                line: span.line,
                col: span.col,
                msg: format!("algorithm {} needs exactly one match clause", tpl.name),
            });
        }
        Ok(tpl)
    }

    /// Skips to just past the next top-level `;` or `}`.
    fn recover(&mut self) {
        let mut depth = 0i32;
        loop {
            match self.bump() {
                Tok::Eof => return,
                Tok::Sym("{") => depth += 1,
                Tok::Sym("}") => {
                    depth -= 1;
                    if depth <= 0 {
                        return;
                    }
                }
                Tok::Sym(";") if depth == 0 => return,
                _ => {}
            }
        }
    }
}

fn duplicates(unit: &SourceUnit) -> Vec<ParseError> {
    let mut errs = Vec::new();
    let mut check = |kind: &str, items: Vec<(&str, Span)>| {
        let mut seen = HashSet::new();
        for (n, s) in items {
            if !seen.insert(n.to_string()) {
                errs.push(ParseError {
                    line: s.line,
                    col: s.col,
                    msg: format!("duplicate {kind} `{n}`"),
                });
            }
        }
    };
    check("index set", unit.indexsets.iter().map(|d| (d.name.as_str(), d.span)).collect());
    check(
        "name",
        unit.decls
            .iter()
            .map(|d| (d.name.as_str(), d.span))
            .chain(unit.defs.iter().map(|d| (d.name.as_str(), d.span)).filter(|(n, _)| {
                !unit.decls.iter().any(|d| d.name == *n)
            }))
            .collect(),
    );
    check("definition", unit.defs.iter().map(|d| (d.name.as_str(), d.span)).collect());
    check("equation", unit.equations.iter().map(|d| (d.name.as_str(), d.span)).collect());
    check("algorithm", unit.templates.iter().map(|d| (d.name.as_str(), d.span)).collect());
    errs
}

/// Parses a `.qir` source text, reporting every syntax and duplicate-name
/// error found.
pub fn parse(src: &str) -> Result<SourceUnit, Vec<ParseError>> {
    let toks = lex(src).map_err(|e| vec![e])?;
    let mut p = Parser { toks, pos: 0 };
    let mut unit = SourceUnit::default();
    let mut errs = Vec::new();
    while !matches!(p.peek(), Tok::Eof) {
        if let Err(e) = p.item(&mut unit) {
            errs.push(e);
            p.recover();
        }
    }
    errs.extend(duplicates(&unit));
    if errs.is_empty() {
        Ok(unit)
    } else {
        Err(errs)
    }
}

/// Parses a single expression.
pub fn parse_term(src: &str) -> Result<Term, ParseError> {
    let mut p = Parser { toks: lex(src)?, pos: 0 };
    let t = p.expr()?;
    if !matches!(p.peek(), Tok::Eof) {
        let found = p.peek().clone();
        return p.err(format!("trailing input at {found}"));
    }
    Ok(t)
}

/// Parses a single statement.
pub fn parse_stmt(src: &str) -> Result<Stmt, ParseError> {
    let mut p = Parser { toks: lex(src)?, pos: 0 };
    let s = p.stmt()?;
    if !matches!(p.peek(), Tok::Eof) {
        return p.err("trailing input after statement");
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_source_is_empty_unit() {
        assert_eq!(parse("").unwrap(), SourceUnit::default());
        assert_eq!(parse("  # only a comment\n").unwrap(), SourceUnit::default());
    }

    #[test]
    fn goal_line_parses_to_inverse_application() {
        let u = parse("goal { x = Dirac^-1 * b ; }").unwrap();
        assert_eq!(
            u.goal,
            vec![Stmt::assign("x", Term::mul(Term::inverse(Term::sym("Dirac")), Term::sym("b")))]
        );
    }

    #[test]
    fn tensor_and_mul_share_a_level_left_assoc() {
        let t = parse_term("A * B (x) C").unwrap();
        assert_eq!(
            t,
            Term::tensor(Term::mul(Term::sym("A"), Term::sym("B")), Term::sym("C"))
        );
    }

    #[test]
    fn binder_body_stops_at_additive_operator() {
        let t = parse_term("sum d in D : gamma[d] * A + B").unwrap();
        match t {
            Term::Add(l, r) => {
                assert!(matches!(*l, Term::IndexedSum { .. }));
                assert_eq!(*r, Term::sym("B"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn syntax_errors_carry_positions_and_recover() {
        let errs = parse("def A = ( ;\ndef B = I_C ;\ndef C = * ;").unwrap_err();
        assert_eq!(errs.len(), 2);
        assert_eq!(errs[0].line, 1);
        assert_eq!(errs[1].line, 3);
    }

    #[test]
    fn duplicate_definitions_are_reported() {
        let errs = parse("def A = I_C ; def A = I_S ;").unwrap_err();
        assert!(errs[0].msg.contains("duplicate"));
    }

    #[test]
    fn template_requires_single_match() {
        let src = "algorithm X { input A : M ; body { } }";
        assert!(parse(src).is_err());
    }

    #[test]
    fn links_projections_and_literals() {
        let t = parse_term("proj(even, L) * dagger(U(-d)[s]) . lit(1.5, -2.0)").unwrap();
        assert!(matches!(t, Term::ScalarMul(..)));
        assert_eq!(parse_term("0").unwrap(), Term::Zero);
        assert_eq!(parse_term("0.0").unwrap(), Term::real(0.0));
        assert_eq!(parse_term("1e-16").unwrap(), Term::real(1e-16));
    }
}
