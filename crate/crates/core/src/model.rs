//! Gaussian-process parametrization through the exponent of the process
//! Husimi Q function,
//!
//! ```text
//! log Q(α, z) = -Z† A Z + B† Z + c0,   Z = (α, α*, z, z*)ᵀ
//! ```
//!
//! with `A = [[A1, A2], [A2†, A3]]`, `B = (b1, b1*, b2, b2*)ᵀ` and
//! `A1 = [[a1/2, -c1*], [-c1, a1/2]]`, `A2 = ½[[g2, g1*], [g1, g2*]]`,
//! `A3 = [[a2/2, -c2*], [-c2, a2/2]]`. The matrix form is the ground truth for
//! every Q evaluation in the crate.
//!
//! # Design-row convention
//!
//! The linear design row `v(α, z)` is laid out in the classic order
//! `2·(|α|²/2, |z|²/2, αr, αi, wr, -wi, (α²)r, (α²)i, (w²)r, -(w²)i,
//! (αw*)r, (αw*)i, (α*w*)r, (α*w*)i, ½)` ([`printed_row`]). That layout only
//! reproduces the matrix form when evaluated at `w = z*`, and then with a fixed
//! sign per slot. [`build_row_v`] applies both once: the 14 recoverable slots
//! carry the natural parameter values (a1, a2, b1r, ...), and the constant slot
//! pairs with `-c0`, so `-vᵀx′ = log Q` with `x′ = (x, -c0)`.

use nalgebra::{Matrix4, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    block4, c, cr, from_real_rep, min_eigenvalue4, pair, sigma_x, to_real_rep, vec4, Mat2c,
    Mat4c, Vec2c, Vec4c, C64,
};

pub const N_PARAMS: usize = 14;
pub const N_EXTENDED: usize = 15;
pub const N_TP_PARAMS: usize = 9;

/// TP residual threshold used to declare a process trace preserving.
pub const TP_TOLERANCE: f64 = 1e-10;
/// Positivity pass threshold.
pub const POSITIVITY_TOLERANCE: f64 = -1e-10;
/// `a2² - 4|c2|²` below this is treated as a singular A3 block.
pub const A3_SINGULAR_TOLERANCE: f64 = 1e-12;

pub const PARAM_NAMES: [&str; N_PARAMS] = [
    "a1", "a2", "b1r", "b1i", "b2r", "b2i", "c1r", "c1i", "c2r", "c2i", "g1r", "g1i", "g2r",
    "g2i",
];

pub const TP_PARAM_NAMES: [&str; N_TP_PARAMS] =
    ["a2", "b2r", "b2i", "c2r", "c2i", "g1r", "g1i", "g2r", "g2i"];

/// Per-slot signs mapping [`printed_row`] at `w = z*` onto the natural
/// coordinates `(a1, a2, b1r, ..., g2i, -c0)`.
const ROW_SIGNS: [f64; N_EXTENDED] = [
    1.0, 1.0, -1.0, -1.0, -1.0, -1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0, 1.0, -1.0, 1.0,
];

/// Exponent data of a single-mode Gaussian process Q function.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QFunctionParams {
    pub a1: f64,
    pub a2: f64,
    pub c1: C64,
    pub c2: C64,
    pub g1: C64,
    pub g2: C64,
    pub b1: C64,
    pub b2: C64,
    pub c0: f64,
}

impl QFunctionParams {
    pub fn a1_block(&self) -> Mat2c {
        Mat2c::new(cr(self.a1 / 2.0), -self.c1.conj(), -self.c1, cr(self.a1 / 2.0))
    }

    pub fn a2_block(&self) -> Mat2c {
        Mat2c::new(self.g2, self.g1.conj(), self.g1, self.g2.conj()) * cr(0.5)
    }

    pub fn a3_block(&self) -> Mat2c {
        Mat2c::new(cr(self.a2 / 2.0), -self.c2.conj(), -self.c2, cr(self.a2 / 2.0))
    }

    pub fn b1_pair(&self) -> Vec2c {
        pair(self.b1)
    }

    pub fn b2_pair(&self) -> Vec2c {
        pair(self.b2)
    }

    /// `(A, B)` in the computational basis.
    pub fn assemble_matrices(&self) -> (Mat4c, Vec4c) {
        let a = block4(&self.a1_block(), &self.a2_block(), &self.a3_block());
        let b = vec4(self.b1, self.b1.conj(), self.b2, self.b2.conj());
        (a, b)
    }

    /// Reads the parameters back from an `(A, B)` pair with the block structure
    /// above. Only the structured entries are consulted.
    pub fn from_matrices(a: &Mat4c, b: &Vec4c, c0: f64) -> Self {
        QFunctionParams {
            a1: 2.0 * a[(0, 0)].re,
            a2: 2.0 * a[(2, 2)].re,
            c1: -a[(1, 0)],
            c2: -a[(3, 2)],
            g2: 2.0 * a[(0, 2)],
            g1: 2.0 * a[(1, 2)],
            b1: b[0],
            b2: b[2],
            c0,
        }
    }

    /// `-Z†AZ + B†Z + c0`, the logarithm of the process Q function.
    pub fn log_q_value(&self, alpha: C64, z: C64) -> f64 {
        let (a, b) = self.assemble_matrices();
        let zz = vec4(alpha, alpha.conj(), z, z.conj());
        let quad = (zz.adjoint() * a * zz)[(0, 0)];
        let lin = (b.adjoint() * zz)[(0, 0)];
        (-quad + lin).re + self.c0
    }

    pub fn tp_params(&self) -> TPParamVector {
        TPParamVector::from_params(self)
    }

    pub fn max_abs_diff(&self, other: &QFunctionParams) -> f64 {
        let mut d = ParamVector::from_params(self).max_abs_diff(&ParamVector::from_params(other));
        d = d.max((self.c0 - other.c0).abs());
        d
    }
}

/// The 14 recoverable real parameters in natural order
/// `(a1, a2, b1r, b1i, b2r, b2i, c1r, c1i, c2r, c2i, g1r, g1i, g2r, g2i)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub [f64; N_PARAMS]);

impl ParamVector {
    pub fn from_params(p: &QFunctionParams) -> Self {
        ParamVector([
            p.a1, p.a2, p.b1.re, p.b1.im, p.b2.re, p.b2.im, p.c1.re, p.c1.im, p.c2.re, p.c2.im,
            p.g1.re, p.g1.im, p.g2.re, p.g2.im,
        ])
    }

    pub fn to_params(&self, c0: f64) -> QFunctionParams {
        let x = &self.0;
        QFunctionParams {
            a1: x[0],
            a2: x[1],
            b1: c(x[2], x[3]),
            b2: c(x[4], x[5]),
            c1: c(x[6], x[7]),
            c2: c(x[8], x[9]),
            g1: c(x[10], x[11]),
            g2: c(x[12], x[13]),
            c0,
        }
    }

    /// `x′ = (x, -c0)`, the coordinates dual to [`build_row_v`].
    pub fn extended(&self, c0: f64) -> [f64; N_EXTENDED] {
        let mut out = [0.0; N_EXTENDED];
        out[..N_PARAMS].copy_from_slice(&self.0);
        out[N_PARAMS] = -c0;
        out
    }

    pub fn from_extended(xe: &[f64]) -> (ParamVector, f64) {
        let mut x = [0.0; N_PARAMS];
        x.copy_from_slice(&xe[..N_PARAMS]);
        (ParamVector(x), -xe[N_PARAMS])
    }

    pub fn squared_error(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).powi(2)).sum()
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// The 9 free parameters of a trace-preserving process,
/// `(a2, b2r, b2i, c2r, c2i, g1r, g1i, g2r, g2i)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TPParamVector(pub [f64; N_TP_PARAMS]);

impl TPParamVector {
    pub fn from_params(p: &QFunctionParams) -> Self {
        TPParamVector([
            p.a2, p.b2.re, p.b2.im, p.c2.re, p.c2.im, p.g1.re, p.g1.im, p.g2.re, p.g2.im,
        ])
    }

    pub fn a2(&self) -> f64 {
        self.0[0]
    }

    pub fn b2(&self) -> C64 {
        c(self.0[1], self.0[2])
    }

    pub fn c2(&self) -> C64 {
        c(self.0[3], self.0[4])
    }

    pub fn g1(&self) -> C64 {
        c(self.0[5], self.0[6])
    }

    pub fn g2(&self) -> C64 {
        c(self.0[7], self.0[8])
    }

    /// `a2² - 4|c2|²`; the process is CPTP-admissible iff this is positive.
    pub fn admissibility(&self) -> f64 {
        self.a2().powi(2) - 4.0 * self.c2().norm_sqr()
    }

    pub fn is_admissible(&self) -> bool {
        self.a2() > 0.0 && self.admissibility() > A3_SINGULAR_TOLERANCE
    }

    pub fn squared_error(&self, other: &TPParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).powi(2)).sum()
    }

    pub fn max_abs_diff(&self, other: &TPParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Design row in the classic printed layout, evaluated at `(α, w)`.
pub fn printed_row(alpha: C64, w: C64) -> [f64; N_EXTENDED] {
    let a2 = alpha * alpha;
    let w2 = w * w;
    let aw = alpha * w.conj();
    let acw = alpha.conj() * w.conj();
    [
        alpha.norm_sqr(),
        w.norm_sqr(),
        2.0 * alpha.re,
        2.0 * alpha.im,
        2.0 * w.re,
        -2.0 * w.im,
        2.0 * a2.re,
        2.0 * a2.im,
        2.0 * w2.re,
        -2.0 * w2.im,
        2.0 * aw.re,
        2.0 * aw.im,
        2.0 * acw.re,
        2.0 * acw.im,
        1.0,
    ]
}

/// Design row `v(α, z)` with `-vᵀx′ = log Q(α, z)` for every process.
pub fn build_row_v(alpha: C64, z: C64) -> [f64; N_EXTENDED] {
    let mut v = printed_row(alpha, z.conj());
    for (vi, s) in v.iter_mut().zip(ROW_SIGNS) {
        *vi *= s;
    }
    v
}

fn a3_inverse(a3: &Mat2c, admissibility: f64) -> Result<Mat2c> {
    if admissibility <= A3_SINGULAR_TOLERANCE {
        return Err(Error::SingularA3(admissibility));
    }
    a3.try_inverse().ok_or(Error::SingularA3(admissibility))
}

/// Fills in `A1`, `b1` and `c0` so the process is trace preserving.
pub fn tp_complete(t: &TPParamVector) -> Result<QFunctionParams> {
    if t.a2() <= 0.0 {
        return Err(Error::SingularA3(t.admissibility()));
    }
    let mut p = QFunctionParams {
        a2: t.a2(),
        c2: t.c2(),
        g1: t.g1(),
        g2: t.g2(),
        b2: t.b2(),
        ..Default::default()
    };
    let adm = t.admissibility();
    let a3 = p.a3_block();
    let a3_inv = a3_inverse(&a3, adm)?;
    let a2b = p.a2_block();
    let a1 = a2b * a3_inv * a2b.adjoint();
    let b2 = p.b2_pair();
    let b1 = a2b * a3_inv * b2;
    // 2 sqrt(det A3) = sqrt(a2^2 - 4|c2|^2)
    let quad = (b2.adjoint() * a3_inv * b2)[(0, 0)].re;
    p.a1 = 2.0 * a1[(0, 0)].re;
    p.c1 = -a1[(1, 0)];
    p.b1 = b1[0];
    p.c0 = 0.5 * adm.ln() - 0.25 * quad;
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpResiduals {
    /// Frobenius norm of `W = A1 - A2 A3⁻¹ A2†`.
    pub w_norm: f64,
    /// Norm of `y = b1 - A2 A3⁻¹ b2`.
    pub y_norm: f64,
    /// `w0 = c0 - log(2 sqrt(det A3)) + ¼ b2† A3⁻¹ b2`.
    pub w0: f64,
}

impl TpResiduals {
    pub fn max(&self) -> f64 {
        self.w_norm.max(self.y_norm).max(self.w0.abs())
    }

    pub fn is_tp(&self) -> bool {
        self.max() < TP_TOLERANCE
    }
}

pub fn check_tp(p: &QFunctionParams) -> Result<TpResiduals> {
    let adm = p.a2 * p.a2 - 4.0 * p.c2.norm_sqr();
    let a3_inv = a3_inverse(&p.a3_block(), adm)?;
    let a2b = p.a2_block();
    let w = p.a1_block() - a2b * a3_inv * a2b.adjoint();
    let b2 = p.b2_pair();
    let y = p.b1_pair() - a2b * a3_inv * b2;
    let quad = (b2.adjoint() * a3_inv * b2)[(0, 0)].re;
    Ok(TpResiduals {
        w_norm: w.norm(),
        y_norm: y.norm(),
        w0: p.c0 - 0.5 * adm.ln() + 0.25 * quad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositivityMode {
    Cp,
    Tp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositivityStatus {
    pub mode: PositivityMode,
    /// Minimum eigenvalue of `A` (CP) or `a2² - 4|c2|²` (TP).
    pub value: f64,
    pub pass: bool,
}

pub fn positivity_status(p: &QFunctionParams, mode: PositivityMode) -> PositivityStatus {
    let value = match mode {
        PositivityMode::Cp => {
            let (a, _) = p.assemble_matrices();
            let (ar, _) = to_real_rep(&a);
            min_eigenvalue4(&ar)
        }
        PositivityMode::Tp => p.a2 * p.a2 - 4.0 * p.c2.norm_sqr(),
    };
    PositivityStatus {
        mode,
        value,
        pass: value >= POSITIVITY_TOLERANCE,
    }
}

/// Trace-preserving spectral projection of `A` onto the positive cone in the
/// real representation: negative eigenvalues are zeroed and the spectrum is
/// rescaled to keep `Tr A′`. `B` and `c0` are untouched.
pub fn project_physical(p: &QFunctionParams) -> Result<QFunctionParams> {
    let (a, b) = p.assemble_matrices();
    let (ar, _) = to_real_rep(&a);
    let projected = project_spectrum(&ar)?;
    Ok(QFunctionParams::from_matrices(
        &from_real_rep(&projected),
        &b,
        p.c0,
    ))
}

/// Nearest CP process in the Frobenius norm of `A′`: negative eigenvalues of
/// the real representation are set to zero, nothing is rescaled.
pub fn nearest_cp(p: &QFunctionParams) -> QFunctionParams {
    let (a, b) = p.assemble_matrices();
    let (ar, _) = to_real_rep(&a);
    let eig = SymmetricEigen::new(ar);
    if eig.eigenvalues.iter().all(|&d| d >= 0.0) {
        return *p;
    }
    let q = &eig.eigenvectors;
    let out = q * Matrix4::from_diagonal(&eig.eigenvalues.map(|d| d.max(0.0))) * q.transpose();
    QFunctionParams::from_matrices(&from_real_rep(&(0.5 * (out + out.transpose()))), &b, p.c0)
}

pub(crate) fn project_spectrum(ar: &Matrix4<f64>) -> Result<Matrix4<f64>> {
    let eig = SymmetricEigen::new(*ar);
    if eig.eigenvalues.iter().all(|&d| d >= 0.0) {
        return Ok(*ar);
    }
    let trace: f64 = eig.eigenvalues.sum();
    let plus = eig.eigenvalues.map(|d| d.max(0.0));
    let trace_plus: f64 = plus.sum();
    if trace_plus <= 0.0 {
        return Err(Error::AllNegativeSpectrum);
    }
    let q = &eig.eigenvectors;
    let out = q * Matrix4::from_diagonal(&plus) * q.transpose() * (trace / trace_plus);
    Ok(0.5 * (out + out.transpose()))
}

/// Single output port of a beam splitter with mixing angle `θ`.
pub fn beam_splitter_process(theta: f64) -> QFunctionParams {
    let ct = theta.cos();
    QFunctionParams {
        a1: ct * ct,
        a2: 1.0,
        g1: cr(-ct),
        ..Default::default()
    }
}

/// `A2 = -(cos θ) σx / 2` for the beam splitter; exposed for checks.
pub fn beam_splitter_a2(theta: f64) -> Mat2c {
    sigma_x() * cr(-theta.cos() / 2.0)
}
