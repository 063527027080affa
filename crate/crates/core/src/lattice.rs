//! Periodic 4D lattice geometry. Sites are linearized x fastest:
//! `index = x + Lx (y + Ly (z + Lz t))`.

use thiserror::Error;

use crate::ir::Parity;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LatticeError {
    #[error("lattice extents must be even and positive, got {0:?}")]
    OddExtent([usize; 4]),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lattice {
    pub dims: [usize; 4],
    even: Vec<usize>,
    odd: Vec<usize>,
    /// Position of each site inside its parity list.
    half_index: Vec<usize>,
}

impl Lattice {
    pub fn new(dims: [usize; 4]) -> Result<Lattice, LatticeError> {
        if dims.iter().any(|&d| d == 0 || d % 2 == 1) {
            return Err(LatticeError::OddExtent(dims));
        }
        let volume = dims.iter().product();
        let mut lat = Lattice {
            dims,
            even: Vec::new(),
            odd: Vec::new(),
            half_index: vec![0; volume],
        };
        for s in 0..volume {
            let list = match lat.parity(s) {
                Parity::Even => &mut lat.even,
                Parity::Odd => &mut lat.odd,
            };
            lat.half_index[s] = list.len();
            list.push(s);
        }
        Ok(lat)
    }

    pub fn volume(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn coords(&self, mut s: usize) -> [usize; 4] {
        let mut c = [0; 4];
        for (k, d) in self.dims.iter().enumerate() {
            c[k] = s % d;
            s /= d;
        }
        c
    }

    pub fn index(&self, c: [usize; 4]) -> usize {
        c[0] + self.dims[0] * (c[1] + self.dims[1] * (c[2] + self.dims[2] * c[3]))
    }

    /// `s + d̂` (forward) or `s - d̂` with periodic wraparound.
    pub fn neighbor(&self, s: usize, axis: usize, forward: bool) -> usize {
        let mut c = self.coords(s);
        let n = self.dims[axis];
        c[axis] = if forward { (c[axis] + 1) % n } else { (c[axis] + n - 1) % n };
        self.index(c)
    }

    /// Site reached by a sum of unit steps, each `(axis, forward)`.
    pub fn offset(&self, s: usize, steps: &[(usize, bool)]) -> usize {
        steps.iter().fold(s, |acc, &(a, f)| self.neighbor(acc, a, f))
    }

    pub fn parity(&self, s: usize) -> Parity {
        Parity::of_bool(self.coords(s).iter().sum::<usize>() % 2 == 1)
    }

    pub fn sites(&self, p: Parity) -> &[usize] {
        match p {
            Parity::Even => &self.even,
            Parity::Odd => &self.odd,
        }
    }

    pub fn half_index(&self, s: usize) -> usize {
        self.half_index[s]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn x_is_fastest() {
        let l = Lattice::new([4, 2, 2, 2]).unwrap();
        assert_eq!(l.index([1, 0, 0, 0]), 1);
        assert_eq!(l.index([0, 1, 0, 0]), 4);
        assert_eq!(l.coords(l.index([3, 1, 0, 1])), [3, 1, 0, 1]);
    }

    #[test]
    fn neighbors_wrap_and_flip_parity() {
        let l = Lattice::new([4, 4, 2, 2]).unwrap();
        for s in 0..l.volume() {
            for a in 0..4 {
                let n = l.neighbor(s, a, true);
                assert_eq!(l.neighbor(n, a, false), s);
                assert_ne!(l.parity(n), l.parity(s));
            }
        }
        assert_eq!(l.sites(Parity::Even).len(), l.volume() / 2);
    }

    #[test]
    fn odd_extent_is_rejected() {
        assert_eq!(Lattice::new([3, 2, 2, 2]), Err(LatticeError::OddExtent([3, 2, 2, 2])));
    }
}
