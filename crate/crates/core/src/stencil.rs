//! Site-level view of matrix terms. An operator acting on lattice vectors
//! becomes a sum of hops: each output site reads one input site at a fixed
//! offset, transports it through a product of links and multiplies the
//! spin components by a constant 4x4 matrix.

use std::collections::HashMap;
use std::fmt;

use crate::gamma::{self, Mat4};
use crate::ir::*;
use crate::printer::term_to_string;
use crate::shape::{SetAtom, TypeEnv};

/// Site domain of a lattice vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dom {
    Full,
    Even,
    Odd,
}

impl Dom {
    pub fn of(p: Option<Parity>) -> Dom {
        match p {
            None => Dom::Full,
            Some(Parity::Even) => Dom::Even,
            Some(Parity::Odd) => Dom::Odd,
        }
    }

    pub fn parity(self) -> Option<Parity> {
        match self {
            Dom::Full => None,
            Dom::Even => Some(Parity::Even),
            Dom::Odd => Some(Parity::Odd),
        }
    }

    /// Number of sites for a lattice of the given volume.
    pub fn sites(self, volume: usize) -> usize {
        if self == Dom::Full {
            volume
        } else {
            volume / 2
        }
    }
}

impl fmt::Display for Dom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dom::Full => "all",
            Dom::Even => "even",
            Dom::Odd => "odd",
        })
    }
}

/// `U(±axis)` evaluated at `out_site + at`, optionally daggered.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LinkRef {
    pub axis: u8,
    pub neg: bool,
    pub dagger: bool,
    pub at: [i32; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hop {
    pub coef: Term,
    /// `(to, from)` domains; `None` for purely colour/spin factors.
    pub lattice: Option<(Dom, Dom)>,
    pub offset: [i32; 4],
    pub links: Vec<LinkRef>,
    /// Required parity of the output site (only when `to` is `Full`).
    pub mask: Option<Parity>,
    pub spin: Mat4,
}

/// Hops sharing offset, links and mask; their spin parts add up.
#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub offset: [i32; 4],
    pub links: Vec<LinkRef>,
    pub mask: Option<Parity>,
    pub spin: Vec<(Term, Mat4)>,
}

/// One kernel's worth of hops between two domains.
#[derive(Clone, Debug, PartialEq)]
pub struct Stencil {
    pub to: Dom,
    pub from: Dom,
    pub groups: Vec<Group>,
}

impl Stencil {
    /// True when no group reads another site.
    pub fn is_local(&self) -> bool {
        self.groups.iter().all(|g| g.offset == [0; 4])
    }
}

/// Operator as a composition of stencils.
#[derive(Clone, Debug, PartialEq)]
pub enum LinOp {
    Hops(Stencil),
    /// Apply the right operand first.
    Compose(Box<LinOp>, Box<LinOp>),
    Sum(Vec<LinOp>),
    Scale(Term, Box<LinOp>),
}

impl LinOp {
    pub fn to(&self) -> Dom {
        match self {
            LinOp::Hops(s) => s.to,
            LinOp::Compose(a, _) | LinOp::Scale(_, a) => a.to(),
            LinOp::Sum(xs) => xs[0].to(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HopError {
    /// A product whose expansion would not be a single stencil.
    Split,
    Unsupported(String),
}

fn unsupported(t: &Term) -> HopError {
    HopError::Unsupported(term_to_string(t))
}

fn is_one(t: &Term) -> bool {
    matches!(t, Term::Lit(c) if *c == Complex::new(1.0, 0.0))
}

pub fn mul_coef(a: &Term, b: &Term) -> Term {
    match (a, b) {
        (Term::Lit(x), Term::Lit(y)) => Term::Lit(x * y),
        _ if is_one(a) => b.clone(),
        _ if is_one(b) => a.clone(),
        _ => Term::mul(a.clone(), b.clone()),
    }
}

fn odd(off: &[i32; 4]) -> bool {
    off.iter().map(|x| x.rem_euclid(2)).sum::<i32>() % 2 == 1
}

fn shifted(p: Parity, off: &[i32; 4]) -> Parity {
    if odd(off) {
        p.flip()
    } else {
        p
    }
}

fn add_off(a: &[i32; 4], b: &[i32; 4]) -> [i32; 4] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]]
}

/// Adds the constraint that `out + off` has parity `p`; `None` when the
/// hop vanishes.
fn constrain(h: &mut Hop, off: &[i32; 4], p: Parity) -> Option<()> {
    let need = shifted(p, off);
    let fixed = match h.lattice {
        Some((to, _)) => to.parity(),
        None => None,
    };
    match (fixed, h.mask) {
        (Some(q), _) if q != need => None,
        (Some(_), _) => Some(()),
        (None, Some(m)) if m != need => None,
        (None, _) => {
            h.mask = Some(need);
            Some(())
        }
    }
}

fn base(lattice: Option<(Dom, Dom)>) -> Hop {
    Hop {
        coef: Term::real(1.0),
        lattice,
        offset: [0; 4],
        links: Vec::new(),
        mask: None,
        spin: gamma::identity(),
    }
}

/// `a * b`, or `None` if the product is identically zero.
fn compose(a: &Hop, b: &Hop) -> Option<Hop> {
    let lattice = match (a.lattice, b.lattice) {
        (Some((to, _)), Some((_, from))) => Some((to, from)),
        (x, None) | (None, x) => x,
    };
    let mut h = Hop {
        coef: mul_coef(&a.coef, &b.coef),
        lattice,
        offset: add_off(&a.offset, &b.offset),
        links: a.links.clone(),
        mask: None,
        spin: gamma::mul(&a.spin, &b.spin),
    };
    h.links.extend(b.links.iter().map(|l| LinkRef {
        at: add_off(&l.at, &a.offset),
        ..l.clone()
    }));
    if let Some(m) = a.mask {
        constrain(&mut h, &[0; 4], m)?;
    }
    if let Some(m) = b.mask {
        constrain(&mut h, &a.offset, m)?;
    }
    // the intermediate site must lie in both inner domains
    if let (Some((_, fa)), Some((tb, _))) = (a.lattice, b.lattice) {
        for d in [fa, tb] {
            if let Some(p) = d.parity() {
                constrain(&mut h, &a.offset, p)?;
            }
        }
    }
    Some(h)
}

fn tensor(a: &Hop, b: &Hop) -> Result<Hop, HopError> {
    if a.lattice.is_some() && b.lattice.is_some() {
        return Err(HopError::Unsupported("Kronecker product of two lattice operators".into()));
    }
    let mut h = Hop {
        coef: mul_coef(&a.coef, &b.coef),
        lattice: a.lattice.or(b.lattice),
        offset: add_off(&a.offset, &b.offset),
        links: a.links.iter().chain(&b.links).cloned().collect(),
        mask: None,
        spin: gamma::mul(&a.spin, &b.spin),
    };
    for m in [a.mask, b.mask].into_iter().flatten() {
        if constrain(&mut h, &[0; 4], m).is_none() {
            return Ok(Hop {
                coef: Term::Zero,
                ..h
            });
        }
    }
    Ok(h)
}

type GroupKey = (Option<(Dom, Dom)>, [i32; 4], Vec<LinkRef>, Option<Parity>);

fn key(h: &Hop) -> GroupKey {
    (h.lattice, h.offset, h.links.clone(), h.mask)
}

fn group_count(hs: &[Hop]) -> usize {
    let mut keys: Vec<GroupKey> = hs.iter().map(key).collect();
    keys.sort();
    keys.dedup();
    keys.len()
}

/// Converts operator terms to hops.
pub struct HopBuilder<'a> {
    pub env: &'a TypeEnv,
    dirs: HashMap<String, (u8, bool)>,
}

impl<'a> HopBuilder<'a> {
    pub fn new(env: &'a TypeEnv) -> HopBuilder<'a> {
        HopBuilder {
            env,
            dirs: HashMap::new(),
        }
    }

    fn dir(&self, d: &SignedDir) -> Result<(u8, bool), HopError> {
        match &d.dir {
            DirRef::Axis(a) => Ok((a.0, d.neg)),
            DirRef::Var(v) => self
                .dirs
                .get(v)
                .map(|(a, n)| (*a, *n != d.neg))
                .ok_or_else(|| HopError::Unsupported(format!("free direction {v}"))),
        }
    }

    fn lattice_dom(&self, s: &SetExpr) -> Result<Option<Dom>, HopError> {
        let set = self
            .env
            .resolve_set(s)
            .map_err(|e| HopError::Unsupported(e.to_string()))?;
        let mut dom = None;
        for a in &set.0 {
            match a {
                SetAtom::Lattice { parity, .. } => dom = Some(Dom::of(*parity)),
                SetAtom::Atomic { .. } => {}
                other => return Err(HopError::Unsupported(format!("index set factor {other:?}"))),
            }
        }
        Ok(dom)
    }

    fn links(&self, t: &Term, binder: &str, dagger: bool) -> Result<Vec<LinkRef>, HopError> {
        match t {
            Term::Link(d, s) if s == binder => {
                let (axis, neg) = self.dir(d)?;
                Ok(vec![LinkRef {
                    axis,
                    neg,
                    dagger,
                    at: [0; 4],
                }])
            }
            Term::Dagger(x) => self.links(x, binder, !dagger),
            Term::Mul(a, b) => {
                let (mut x, y) = (self.links(a, binder, dagger)?, self.links(b, binder, dagger)?);
                if dagger {
                    return Ok(y.into_iter().chain(x).collect());
                }
                x.extend(y);
                Ok(x)
            }
            Term::Identity(_) => Ok(Vec::new()),
            other => Err(unsupported(other)),
        }
    }

    /// Expands an operator term into hops.
    pub fn hops(&mut self, t: &Term) -> Result<Vec<Hop>, HopError> {
        Ok(match t {
            Term::Zero => Vec::new(),
            Term::Identity(s) => {
                let d = self.lattice_dom(s)?;
                vec![base(d.map(|d| (d, d)))]
            }
            Term::Gamma(d) => {
                let (axis, _) = self.dir(&SignedDir::pos(d.clone()))?;
                vec![Hop {
                    spin: gamma::gamma(axis as usize),
                    ..base(None)
                }]
            }
            Term::Gamma5 => vec![Hop {
                spin: gamma::gamma5(),
                ..base(None)
            }],
            Term::Shift(_, d) => {
                let (axis, neg) = self.dir(d)?;
                let mut h = base(Some((Dom::Full, Dom::Full)));
                h.offset[axis as usize] = if neg { -1 } else { 1 };
                vec![h]
            }
            Term::Projection(p, _) => vec![base(Some((Dom::of(Some(*p)), Dom::Full)))],
            Term::Transpose(x) => match &**x {
                Term::Projection(p, _) => {
                    let mut h = base(Some((Dom::Full, Dom::of(Some(*p)))));
                    h.mask = Some(*p);
                    vec![h]
                }
                _ => return Err(unsupported(t)),
            },
            Term::DirectSum { binder, domain, body } => {
                let d = self
                    .lattice_dom(domain)?
                    .ok_or_else(|| HopError::Unsupported("direct sum over a non-lattice set".into()))?;
                let mut h = base(Some((d, d)));
                h.links = self.links(body, binder, false)?;
                vec![h]
            }
            Term::Add(a, b) => {
                let mut x = self.hops(a)?;
                x.extend(self.hops(b)?);
                x
            }
            Term::Sub(a, b) => {
                let mut x = self.hops(a)?;
                x.extend(self.scaled(&Term::real(-1.0), b)?);
                x
            }
            Term::Neg(a) => self.scaled(&Term::real(-1.0), a)?,
            Term::ScalarMul(c, a) => self.scaled(c, a)?,
            Term::Mul(a, b) => {
                let (x, y) = (self.hops(a)?, self.hops(b)?);
                let out: Vec<Hop> = x.iter().flat_map(|p| y.iter().filter_map(|q| compose(p, q))).collect();
                if group_count(&out) > group_count(&x).max(group_count(&y)) {
                    return Err(HopError::Split);
                }
                out
            }
            Term::Tensor(a, b) => {
                let (x, y) = (self.hops(a)?, self.hops(b)?);
                let mut out = Vec::new();
                for p in &x {
                    for q in &y {
                        let h = tensor(p, q)?;
                        if !h.coef.is_zero() {
                            out.push(h);
                        }
                    }
                }
                out
            }
            Term::IndexedSum { binder, domain, body } => {
                let set = self
                    .env
                    .resolve_set(domain)
                    .map_err(|e| HopError::Unsupported(e.to_string()))?;
                if !matches!(set.0.as_slice(), [SetAtom::Directions { .. }]) {
                    return Err(unsupported(t));
                }
                let saved = self.dirs.get(binder).copied();
                let mut out = Vec::new();
                for a in 0..4u8 {
                    self.dirs.insert(binder.clone(), (a, false));
                    out.extend(self.hops(body)?);
                }
                match saved {
                    Some(v) => self.dirs.insert(binder.clone(), v),
                    None => self.dirs.remove(binder),
                };
                out
            }
            other => return Err(unsupported(other)),
        })
    }

    fn scaled(&mut self, c: &Term, a: &Term) -> Result<Vec<Hop>, HopError> {
        let mut x = self.hops(a)?;
        for h in &mut x {
            h.coef = mul_coef(c, &h.coef);
        }
        Ok(x)
    }

    /// Builds a kernel plan for an operator, splitting products that
    /// would not fit in one stencil.
    pub fn linop(&mut self, t: &Term) -> Result<LinOp, HopError> {
        match self.hops(t) {
            Ok(hs) => stencil(hs).map(LinOp::Hops),
            Err(HopError::Split) => match t {
                Term::Add(a, b) => Ok(LinOp::Sum(vec![self.linop(a)?, self.linop(b)?])),
                Term::Sub(a, b) => Ok(LinOp::Sum(vec![
                    self.linop(a)?,
                    LinOp::Scale(Term::real(-1.0), Box::new(self.linop(b)?)),
                ])),
                Term::Neg(a) => Ok(LinOp::Scale(Term::real(-1.0), Box::new(self.linop(a)?))),
                Term::ScalarMul(c, a) => Ok(LinOp::Scale((**c).clone(), Box::new(self.linop(a)?))),
                Term::Mul(a, b) => Ok(LinOp::Compose(Box::new(self.linop(a)?), Box::new(self.linop(b)?))),
                other => Err(unsupported(other)),
            },
            Err(e) => Err(e),
        }
    }
}

/// Groups hops into a stencil; all must map between the same domains.
pub fn stencil(hs: Vec<Hop>) -> Result<Stencil, HopError> {
    let Some((to, from)) = hs.first().and_then(|h| h.lattice) else {
        return Err(HopError::Unsupported("operator without a lattice factor".into()));
    };
    let mut groups: Vec<Group> = Vec::new();
    for h in hs {
        if h.lattice != Some((to, from)) {
            return Err(HopError::Unsupported(format!(
                "operator mixes domains {to}->{from} and {:?}",
                h.lattice
            )));
        }
        match groups
            .iter_mut()
            .find(|g| g.offset == h.offset && g.links == h.links && g.mask == h.mask)
        {
            Some(g) => g.spin.push((h.coef, h.spin)),
            None => groups.push(Group {
                offset: h.offset,
                links: h.links,
                mask: h.mask,
                spin: vec![(h.coef, h.spin)],
            }),
        }
    }
    Ok(Stencil { to, from, groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_term;
    use crate::prelude::standard_unit;
    use crate::shape::typecheck_program;

    fn hops_of(src: &str) -> Result<Vec<Hop>, HopError> {
        let p = typecheck_program(&standard_unit()).unwrap();
        let t = crate::shape::elaborate_term(&parse_term(src).unwrap(), &p.env).unwrap();
        HopBuilder::new(&p.env).hops(&t)
    }

    #[test]
    fn parity_mismatch_vanishes() {
        assert!(hops_of("proj(even, L) * proj(odd, L)^t").unwrap().is_empty());
        assert_eq!(hops_of("proj(even, L) * shift(L, dx) * proj(odd, L)^t").unwrap().len(), 1);
        assert!(hops_of("proj(even, L) * shift(L, dx) * proj(even, L)^t").unwrap().is_empty());
    }

    #[test]
    fn hopping_sum_has_one_group_per_direction() {
        let hs = hops_of("sum d in D : (shift(L, d) (x) I_C) * (dsum s in L : U(-d)[s]) (x) (I_S - gamma[d])").unwrap();
        let s = stencil(hs).unwrap();
        assert_eq!(s.groups.len(), 4);
        assert!(s.groups.iter().all(|g| g.spin.len() == 2 && g.links.len() == 1));
    }

    #[test]
    fn two_hop_products_split() {
        let r = hops_of(
            "(sum d in D : shift(L, d)) * (sum d in D : shift(L, -d))",
        );
        assert_eq!(r, Err(HopError::Split));
    }
}
