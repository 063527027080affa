//! Euclidean gamma matrices in the chiral basis. Entries are 0, ±1, ±i,
//! so the Clifford relations hold exactly in floating point.

use crate::ir::Complex;

pub type Mat4 = [[Complex; 4]; 4];

const O: Complex = Complex::new(0.0, 0.0);
const P: Complex = Complex::new(1.0, 0.0);
const M: Complex = Complex::new(-1.0, 0.0);
const I: Complex = Complex::new(0.0, 1.0);
const J: Complex = Complex::new(0.0, -1.0);

/// `gamma[d]` for axis 0..4 (x, y, z, t).
pub fn gamma(axis: usize) -> Mat4 {
    match axis {
        0 => [[O, O, O, J], [O, O, J, O], [O, I, O, O], [I, O, O, O]],
        1 => [[O, O, O, M], [O, O, P, O], [O, P, O, O], [M, O, O, O]],
        2 => [[O, O, J, O], [O, O, O, I], [I, O, O, O], [O, J, O, O]],
        3 => [[O, O, P, O], [O, O, O, P], [P, O, O, O], [O, P, O, O]],
        _ => panic!("gamma axis {axis} out of range"),
    }
}

/// `gamma5 = gamma_x gamma_y gamma_z gamma_t = diag(1, 1, -1, -1)`.
pub fn gamma5() -> Mat4 {
    mul(&mul(&gamma(0), &gamma(1)), &mul(&gamma(2), &gamma(3)))
}

pub fn identity() -> Mat4 {
    let mut m = [[O; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = P;
    }
    m
}

pub fn mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut c = [[O; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            c[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub fn add(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut c = *a;
    for i in 0..4 {
        for j in 0..4 {
            c[i][j] += b[i][j];
        }
    }
    c
}

pub fn scale(s: Complex, a: &Mat4) -> Mat4 {
    let mut c = *a;
    c.iter_mut().flatten().for_each(|x| *x *= s);
    c
}

pub fn dagger(a: &Mat4) -> Mat4 {
    let mut c = [[O; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            c[i][j] = a[j][i].conj();
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma5_is_chirality_diagonal() {
        let g5 = gamma5();
        let mut want = [[O; 4]; 4];
        want[0][0] = P;
        want[1][1] = P;
        want[2][2] = M;
        want[3][3] = M;
        assert_eq!(g5, want);
    }

    #[test]
    fn clifford_relations_are_exact() {
        for d in 0..4 {
            for e in 0..4 {
                let ac = add(&mul(&gamma(d), &gamma(e)), &mul(&gamma(e), &gamma(d)));
                let want = if d == e { scale(Complex::new(2.0, 0.0), &identity()) } else { [[O; 4]; 4] };
                assert_eq!(ac, want, "d={d} e={e}");
            }
            assert_eq!(dagger(&gamma(d)), gamma(d));
        }
    }
}
