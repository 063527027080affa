//! SU(3) gauge configurations, random generation and the binary file
//! formats for gauge fields (`QGAUGE1`) and vectors (`QVEC1`).

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::ir::Complex;
use crate::lattice::{Lattice, LatticeError};

/// 3×3 complex matrix, row-major.
pub type Su3 = [Complex; 9];

#[derive(Debug, Error)]
pub enum GaugeError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad file format: {0}")]
    Format(String),
}

pub fn su3_mul(a: &Su3, b: &Su3) -> Su3 {
    let mut c = [Complex::new(0.0, 0.0); 9];
    for i in 0..3 {
        for j in 0..3 {
            c[3 * i + j] = (0..3).map(|k| a[3 * i + k] * b[3 * k + j]).sum();
        }
    }
    c
}

pub fn su3_dagger(a: &Su3) -> Su3 {
    let mut c = [Complex::new(0.0, 0.0); 9];
    for i in 0..3 {
        for j in 0..3 {
            c[3 * i + j] = a[3 * j + i].conj();
        }
    }
    c
}

pub fn su3_det(a: &Su3) -> Complex {
    a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6]) + a[2] * (a[3] * a[7] - a[4] * a[6])
}

/// `‖U†U − I‖_F` and `|det U − 1|`.
pub fn su3_defect(u: &Su3) -> (f64, f64) {
    let p = su3_mul(&su3_dagger(u), u);
    let mut f = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let want = if i == j { 1.0 } else { 0.0 };
            f += (p[3 * i + j] - Complex::new(want, 0.0)).norm_sqr();
        }
    }
    (f.sqrt(), (su3_det(u) - Complex::new(1.0, 0.0)).norm())
}

fn gaussian(rng: &mut ChaCha8Rng) -> Complex {
    Complex::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
}

/// Gram-Schmidt on the columns of a Gaussian matrix, then a global phase
/// so that the determinant is one.
fn random_su3(rng: &mut ChaCha8Rng) -> Su3 {
    let mut cols = [[Complex::new(0.0, 0.0); 3]; 3];
    for c in cols.iter_mut() {
        for x in c.iter_mut() {
            *x = gaussian(rng);
        }
    }
    for j in 0..3 {
        for k in 0..j {
            let proj: Complex = (0..3).map(|i| cols[k][i].conj() * cols[j][i]).sum();
            for i in 0..3 {
                let v = cols[k][i];
                cols[j][i] -= proj * v;
            }
        }
        let norm = cols[j].iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        cols[j].iter_mut().for_each(|x| *x /= norm);
    }
    let mut u = [Complex::new(0.0, 0.0); 9];
    for i in 0..3 {
        for j in 0..3 {
            u[3 * i + j] = cols[j][i];
        }
    }
    let phase = Complex::from_polar(1.0, -su3_det(&u).arg() / 3.0);
    u.iter_mut().for_each(|x| *x *= phase);
    u
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaugeConfig {
    pub lattice: Lattice,
    /// Indexed `site * 4 + axis`.
    pub links: Vec<Su3>,
}

impl GaugeConfig {
    pub fn dims(&self) -> [usize; 4] {
        self.lattice.dims
    }

    pub fn link(&self, site: usize, axis: usize) -> &Su3 {
        &self.links[site * 4 + axis]
    }

    /// `U(d)[s]`, or for a negative direction `U(-d)[s] = U(d)[s - d̂]†`.
    pub fn signed_link(&self, site: usize, axis: usize, neg: bool) -> Su3 {
        if neg {
            let back = self.lattice.neighbor(site, axis, false);
            su3_dagger(self.link(back, axis))
        } else {
            *self.link(site, axis)
        }
    }

    /// All links equal to the identity.
    pub fn unit(dims: [usize; 4]) -> Result<GaugeConfig, GaugeError> {
        let lattice = Lattice::new(dims)?;
        let mut one = [Complex::new(0.0, 0.0); 9];
        one[0] = Complex::new(1.0, 0.0);
        one[4] = one[0];
        one[8] = one[0];
        let links = vec![one; lattice.volume() * 4];
        Ok(GaugeConfig { lattice, links })
    }

    pub fn write(&self, w: &mut dyn Write) -> std::io::Result<()> {
        let d = self.dims();
        writeln!(w, "QGAUGE1 {} {} {} {}", d[0], d[1], d[2], d[3])?;
        let mut buf = Vec::with_capacity(self.links.len() * 18 * 8);
        for u in &self.links {
            for c in u {
                buf.extend_from_slice(&c.re.to_le_bytes());
                buf.extend_from_slice(&c.im.to_le_bytes());
            }
        }
        w.write_all(&buf)
    }

    pub fn read(r: &mut dyn Read) -> Result<GaugeConfig, GaugeError> {
        let mut r = BufReader::new(r);
        let header = read_header(&mut r)?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 5 || parts[0] != "QGAUGE1" {
            return Err(GaugeError::Format(format!("expected QGAUGE1 header, got `{header}`")));
        }
        let mut dims = [0; 4];
        for k in 0..4 {
            dims[k] = parts[k + 1]
                .parse()
                .map_err(|_| GaugeError::Format(format!("bad extent `{}`", parts[k + 1])))?;
        }
        let lattice = Lattice::new(dims)?;
        let data = read_complex(&mut r, lattice.volume() * 4 * 9)?;
        let links = data
            .chunks_exact(9)
            .map(|c| {
                let mut u = [Complex::new(0.0, 0.0); 9];
                u.copy_from_slice(c);
                u
            })
            .collect();
        Ok(GaugeConfig { lattice, links })
    }

    pub fn save(&self, path: &Path) -> Result<(), GaugeError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<GaugeConfig, GaugeError> {
        GaugeConfig::read(&mut std::fs::File::open(path)?)
    }
}

/// Deterministic random SU(3) configuration.
pub fn random_gauge(dims: [usize; 4], seed: u64) -> Result<GaugeConfig, GaugeError> {
    let lattice = Lattice::new(dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let links = (0..lattice.volume() * 4).map(|_| random_su3(&mut rng)).collect();
    Ok(GaugeConfig { lattice, links })
}

/// Complex Gaussian vector of length `n`.
pub fn random_vector(n: usize, seed: u64) -> Vec<Complex> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| gaussian(&mut rng)).collect()
}

fn read_header(r: &mut dyn BufRead) -> Result<String, GaugeError> {
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(GaugeError::Format("missing header line".into()));
    }
    line.pop();
    String::from_utf8(line).map_err(|_| GaugeError::Format("header is not text".into()))
}

fn read_complex(r: &mut dyn Read, n: usize) -> Result<Vec<Complex>, GaugeError> {
    let mut bytes = vec![0u8; n * 16];
    r.read_exact(&mut bytes)
        .map_err(|e| GaugeError::Format(format!("expected {n} complex values: {e}")))?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(GaugeError::Format("trailing data".into()));
    }
    Ok(bytes
        .chunks_exact(16)
        .map(|c| {
            let re = f64::from_le_bytes(c[..8].try_into().unwrap());
            let im = f64::from_le_bytes(c[8..].try_into().unwrap());
            Complex::new(re, im)
        })
        .collect())
}

pub fn write_vector(w: &mut dyn Write, v: &[Complex]) -> std::io::Result<()> {
    writeln!(w, "QVEC1 {}", v.len())?;
    let mut buf = Vec::with_capacity(v.len() * 16);
    for c in v {
        buf.extend_from_slice(&c.re.to_le_bytes());
        buf.extend_from_slice(&c.im.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_vector(r: &mut dyn Read) -> Result<Vec<Complex>, GaugeError> {
    let mut r = BufReader::new(r);
    let header = read_header(&mut r)?;
    let n = match header.split_whitespace().collect::<Vec<_>>().as_slice() {
        ["QVEC1", n] => n
            .parse::<usize>()
            .map_err(|_| GaugeError::Format(format!("bad length `{n}`")))?,
        _ => return Err(GaugeError::Format(format!("expected QVEC1 header, got `{header}`"))),
    };
    read_complex(&mut r, n)
}

pub fn save_vector(path: &Path, v: &[Complex]) -> Result<(), GaugeError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_vector(&mut f, v)?;
    f.flush()?;
    Ok(())
}

pub fn load_vector(path: &Path) -> Result<Vec<Complex>, GaugeError> {
    read_vector(&mut std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_links_are_special_unitary() {
        let g = random_gauge([2, 2, 2, 2], 42).unwrap();
        assert_eq!(g.links.len(), 64);
        for u in &g.links {
            let (unit, det) = su3_defect(u);
            assert!(unit <= 1e-12 && det <= 1e-12, "{unit} {det}");
        }
        assert_eq!(g, random_gauge([2, 2, 2, 2], 42).unwrap());
        assert_ne!(g, random_gauge([2, 2, 2, 2], 43).unwrap());
    }

    #[test]
    fn odd_extent_fails() {
        assert!(matches!(random_gauge([3, 2, 2, 2], 1), Err(GaugeError::Lattice(_))));
    }

    #[test]
    fn files_round_trip() {
        let g = random_gauge([2, 2, 2, 4], 7).unwrap();
        let mut buf = Vec::new();
        g.write(&mut buf).unwrap();
        assert!(buf.starts_with(b"QGAUGE1 2 2 2 4\n"));
        assert_eq!(buf.len(), 16 + 32 * 4 * 18 * 8);
        assert_eq!(GaugeConfig::read(&mut buf.as_slice()).unwrap(), g);

        let v = random_vector(10, 3);
        let mut buf = Vec::new();
        write_vector(&mut buf, &v).unwrap();
        assert_eq!(read_vector(&mut buf.as_slice()).unwrap(), v);
        assert!(read_vector(&mut &b"QVEC1 3\n\0\0"[..]).is_err());
    }
}
