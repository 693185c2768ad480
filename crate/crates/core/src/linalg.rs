//! Small fixed-size complex linear algebra used throughout.

use nalgebra::{Matrix2, Matrix4, SymmetricEigen, Vector2, Vector4};
use num_complex::Complex64;

pub type C64 = Complex64;
pub type Mat2c = Matrix2<C64>;
pub type Mat4c = Matrix4<C64>;
pub type Vec2c = Vector2<C64>;
pub type Vec4c = Vector4<C64>;

pub const I: C64 = C64::new(0.0, 1.0);

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn cr(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// `U0 = [[1, i], [1, -i]] / sqrt(2)`; maps (x, p) to (z, z*).
pub fn u0() -> Mat2c {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    Mat2c::new(cr(s), c(0.0, s), cr(s), c(0.0, -s))
}

/// `U = 1 ⊗ U0`.
pub fn u_full() -> Mat4c {
    let u = u0();
    let mut out = Mat4c::zeros();
    out.fixed_view_mut::<2, 2>(0, 0).copy_from(&u);
    out.fixed_view_mut::<2, 2>(2, 2).copy_from(&u);
    out
}

pub fn sigma_x() -> Mat2c {
    Mat2c::new(cr(0.0), cr(1.0), cr(1.0), cr(0.0))
}

/// (a, a*) column.
pub fn pair(a: C64) -> Vec2c {
    Vec2c::new(a, a.conj())
}

pub fn block4(a1: &Mat2c, a2: &Mat2c, a3: &Mat2c) -> Mat4c {
    let mut a = Mat4c::zeros();
    a.fixed_view_mut::<2, 2>(0, 0).copy_from(a1);
    a.fixed_view_mut::<2, 2>(0, 2).copy_from(a2);
    a.fixed_view_mut::<2, 2>(2, 0).copy_from(&a2.adjoint());
    a.fixed_view_mut::<2, 2>(2, 2).copy_from(a3);
    a
}

pub fn max_abs4(m: &Mat4c) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Real phase-space representation `U† A U`, with the imaginary residue.
pub fn to_real_rep(a: &Mat4c) -> (Matrix4<f64>, f64) {
    let u = u_full();
    let ar = u.adjoint() * a * u;
    let residue = ar.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    let re = ar.map(|z| z.re);
    (0.5 * (re + re.transpose()), residue)
}

pub fn from_real_rep(ar: &Matrix4<f64>) -> Mat4c {
    let u = u_full();
    u * ar.map(cr) * u.adjoint()
}

pub fn min_eigenvalue4(m: &Matrix4<f64>) -> f64 {
    SymmetricEigen::new(*m).eigenvalues.min()
}

/// Smallest eigenvalue of a 2x2 Hermitian matrix.
pub fn min_eigenvalue2_herm(m: &Mat2c) -> f64 {
    let a = m[(0, 0)].re;
    let d = m[(1, 1)].re;
    let off = m[(0, 1)].norm();
    0.5 * (a + d) - ((0.5 * (a - d)).powi(2) + off * off).sqrt()
}

pub fn vec4(a: C64, b: C64, c_: C64, d: C64) -> Vec4c {
    Vector4::new(a, b, c_, d)
}

pub fn vec2(a: C64, b: C64) -> Vec2c {
    Vector2::new(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_maps_are_unitary() {
        let u = u0();
        assert!((u * u.adjoint() - Mat2c::identity()).norm() < 1e-15);
        let uf = u_full();
        assert!((uf.adjoint() * uf - Mat4c::identity()).norm() < 1e-15);
    }

    #[test]
    fn real_rep_round_trip() {
        let ar = Matrix4::new(
            2.0, 0.1, 0.3, 0.0, 0.1, 1.0, 0.2, 0.4, 0.3, 0.2, 1.5, 0.0, 0.0, 0.4, 0.0, 0.7,
        );
        let a = from_real_rep(&ar);
        let (back, res) = to_real_rep(&a);
        assert!(res < 1e-14);
        assert!((back - ar).norm() < 1e-14);
    }
}
