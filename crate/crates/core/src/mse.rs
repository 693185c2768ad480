//! Asymptotic MSE formulas for LI (14 parameters) and TP-constrained ML
//! (9 parameters), and the TP design rows they share with the TP estimator.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cr, pair, Mat2c, Vec2c, C64};
use crate::model::{
    build_row_v, tp_complete, QFunctionParams, TPParamVector, N_EXTENDED, N_PARAMS,
    N_TP_PARAMS,
};
use crate::phase_space::{bin_probabilities, GridLayout, PhaseSpaceGrid};

/// Gram matrices with condition number at or above this are treated as singular.
pub const IC_COND_THRESHOLD: f64 = 1e10;

/// `1 - (1 - p)^N`, the probability that a bin is observed at least once.
pub fn survival(p: f64, n: f64) -> f64 {
    if p >= 1.0 {
        return 1.0;
    }
    -(n * (-p).ln_1p()).exp_m1()
}

/// `Y_kk′ = s_k s_k′ (δ_kk′/p̃_k - 1)` with survival factors `s`.
pub fn y_block(p_tilde: &[f64], n: f64) -> DMatrix<f64> {
    let s: Vec<f64> = p_tilde.iter().map(|&p| survival(p, n)).collect();
    let k = p_tilde.len();
    DMatrix::from_fn(k, k, |a, b| {
        let mut y = -s[a] * s[b];
        if a == b && p_tilde[a] > 0.0 {
            y += s[a] * (s[a] / p_tilde[a]);
        }
        y
    })
}

/// `diag(B Y Bᵀ)` for one input block without forming `Y`.
fn diag_byb(b: &DMatrix<f64>, p_tilde: &[f64], n: f64) -> Vec<f64> {
    let s: Vec<f64> = p_tilde.iter().map(|&p| survival(p, n)).collect();
    (0..b.nrows())
        .map(|i| {
            let mut quad = 0.0;
            let mut lin = 0.0;
            for (k, (&sk, &pk)) in s.iter().zip(p_tilde).enumerate() {
                let bik = b[(i, k)];
                if pk > 0.0 {
                    quad += bik * bik * sk * (sk / pk);
                }
                lin += bik * sk;
            }
            quad - lin * lin
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseBreakdown {
    pub total: f64,
    pub per_parameter: Vec<f64>,
}

impl MseBreakdown {
    /// Total divided by the number of parameters.
    pub fn normalized(&self) -> f64 {
        self.total / self.per_parameter.len() as f64
    }
}

/// Condition number of a symmetric PSD matrix from its eigenvalues.
pub fn condition_number(g: &DMatrix<f64>) -> f64 {
    let ev = g.clone().symmetric_eigenvalues();
    let max = ev.max();
    let min = ev.min();
    if min <= 0.0 || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `(VᵀV)⁻¹` with a condition check. Columns are equilibrated first so the
/// check measures geometry rather than units.
pub fn gram_inverse(v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let g = v.transpose() * v;
    gram_inverse_of(&g)
}

pub fn gram_inverse_of(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = g.nrows();
    let d: Vec<f64> = (0..n).map(|i| g[(i, i)].max(0.0).sqrt()).collect();
    if d.iter().any(|&x| x == 0.0) {
        return Err(Error::NotIc {
            cond: f64::INFINITY,
        });
    }
    let gs = DMatrix::from_fn(n, n, |a, b| g[(a, b)] / (d[a] * d[b]));
    let cond = condition_number(&gs);
    if !(cond < IC_COND_THRESHOLD) {
        return Err(Error::NotIc { cond });
    }
    let inv = gs.cholesky().ok_or(Error::NotIc { cond })?.inverse();
    Ok(DMatrix::from_fn(n, n, |a, b| inv[(a, b)] / (d[a] * d[b])))
}

pub(crate) fn design_rows(inputs: &[C64], grids: &[PhaseSpaceGrid]) -> DMatrix<f64> {
    let k = grids[0].k();
    let mut v = DMatrix::zeros(inputs.len() * k, N_EXTENDED);
    for (j, (&a, g)) in inputs.iter().zip(grids).enumerate() {
        for kk in 0..k {
            let row = build_row_v(a, g.bin_center(kk));
            for (c, x) in row.iter().enumerate() {
                v[(j * k + kk, c)] = *x;
            }
        }
    }
    v
}

fn check_layout(inputs: &[C64], grids: &[PhaseSpaceGrid]) -> Result<usize> {
    if inputs.is_empty() || inputs.len() != grids.len() {
        return Err(Error::InvalidInput(
            "need one grid per input and at least one input".into(),
        ));
    }
    let k = grids[0].k();
    if grids.iter().any(|g| g.k() != k) {
        return Err(Error::InvalidInput("all grids must have the same K".into()));
    }
    Ok(k)
}

/// Generic `(1/N) Σ_j diag(B_j Y_j B_jᵀ)` where `B = (VᵀV)⁻¹Vᵀ` restricted to
/// the first `keep` rows.
fn sandwich_mse(
    v: &DMatrix<f64>,
    keep: usize,
    p_tilde: &[Vec<f64>],
    n: f64,
) -> Result<MseBreakdown> {
    let ginv = gram_inverse(v)?;
    let pinv = ginv.rows(0, keep) * v.transpose();
    let k = p_tilde[0].len();
    let mut per = vec![0.0; keep];
    for (j, pt) in p_tilde.iter().enumerate() {
        let b = pinv.columns(j * k, k).into_owned();
        for (acc, d) in per.iter_mut().zip(diag_byb(&b, pt, n)) {
            *acc += d / n;
        }
    }
    Ok(MseBreakdown {
        total: per.iter().sum(),
        per_parameter: per,
    })
}

fn normalized_bins(
    p: &QFunctionParams,
    inputs: &[C64],
    grids: &[PhaseSpaceGrid],
) -> Result<Vec<Vec<f64>>> {
    inputs
        .iter()
        .zip(grids)
        .map(|(&a, g)| Ok(bin_probabilities(p, a, g)?.p_tilde))
        .collect()
}

/// Asymptotic LI MSE over the 14 recoverable parameters.
pub fn mse_formula_nontp(
    p: &QFunctionParams,
    inputs: &[C64],
    layout: &GridLayout,
    n: f64,
) -> Result<MseBreakdown> {
    let grids = layout.grids(p, inputs)?;
    mse_formula_nontp_on(p, inputs, &grids, n)
}

pub fn mse_formula_nontp_on(
    p: &QFunctionParams,
    inputs: &[C64],
    grids: &[PhaseSpaceGrid],
    n: f64,
) -> Result<MseBreakdown> {
    check_layout(inputs, grids)?;
    let v = design_rows(inputs, grids);
    let pt = normalized_bins(p, inputs, grids)?;
    sandwich_mse(&v, N_PARAMS, &pt, n)
}

/// Reference route: dense pseudoinverse against explicit `Y` blocks.
pub fn mse_formula_dense(
    v: &DMatrix<f64>,
    keep: usize,
    p_tilde: &[Vec<f64>],
    n: f64,
) -> Result<f64> {
    let pinv = gram_inverse(v)?.rows(0, keep) * v.transpose();
    let k = p_tilde[0].len();
    let mut y = DMatrix::zeros(v.nrows(), v.nrows());
    for (j, pt) in p_tilde.iter().enumerate() {
        y.view_mut((j * k, j * k), (k, k)).copy_from(&y_block(pt, n));
    }
    Ok((pinv.transpose() * &pinv * y).trace() / n)
}

/// Per-(process, input) quantities shared by every grid point of a TP row.
pub struct TpRowContext {
    k: Mat2c,
    a2: Mat2c,
    b2: Vec2c,
}

const PERM: [usize; N_TP_PARAMS] = [0, 7, 8, 1, 2, 3, 4, 5, 6];

impl TpRowContext {
    pub fn new(t: &TPParamVector) -> Result<Self> {
        let p = tp_complete(t)?;
        let k = p
            .a3_block()
            .try_inverse()
            .ok_or(Error::SingularA3(t.admissibility()))?;
        Ok(TpRowContext {
            k,
            a2: p.a2_block(),
            b2: p.b2_pair(),
        })
    }

    /// Gradient of `log Q(α, z)` for the TP-completed process with respect to
    /// the 9 TP parameters, in `(a2, b2r, b2i, c2r, c2i, g1r, g1i, g2r, g2i)` order.
    pub fn row(&self, alpha: C64, z: C64) -> [f64; N_TP_PARAMS] {
        let (k, a2, b2) = (&self.k, &self.a2, &self.b2);
        let av = pair(alpha);
        let zv = pair(z);
        let aa = av * av.adjoint();
        let kb = k * b2;
        let m1 = -(zv * zv.adjoint()) + k * a2.adjoint() * aa * a2 * k + k * cr(0.5)
            - kb * av.adjoint() * a2 * k
            + kb * kb.adjoint() * cr(0.25);
        let m2 = k * a2.adjoint() * aa * cr(-2.0) - zv * av.adjoint() * cr(2.0)
            + kb * av.adjoint();
        let m3 = zv + k * a2.adjoint() * av - kb * cr(0.5);

        let vec_f = |m: &Mat2c| [m[(0, 0)], m[(1, 0)], m[(0, 1)], m[(1, 1)]];
        let e1 = e1();
        let e2 = e2();
        let e3 = e3();
        let mut printed = [0.0; N_TP_PARAMS];
        let v1 = vec_f(&m1);
        for c in 0..3 {
            printed[c] = (0..4).map(|i| v1[i].conj() * e1[i][c]).sum::<C64>().re;
        }
        let v2 = vec_f(&m2.transpose());
        for c in 0..4 {
            printed[3 + c] = (0..4).map(|i| v2[i] * e2[i][c]).sum::<C64>().re;
        }
        for c in 0..2 {
            printed[7 + c] = (0..2).map(|i| m3[i].conj() * e3[i][c]).sum::<C64>().re;
        }
        PERM.map(|i| printed[i])
    }
}

fn ci(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// `vec(δA3) = E1 (δa2, δc2r, δc2i)ᵀ`.
pub fn e1() -> [[C64; 3]; 4] {
    [
        [cr(0.5), cr(0.0), cr(0.0)],
        [cr(0.0), cr(-1.0), ci(0.0, -1.0)],
        [cr(0.0), cr(-1.0), ci(0.0, 1.0)],
        [cr(0.5), cr(0.0), cr(0.0)],
    ]
}

/// `vec(δA2) = E2 (δg1r, δg1i, δg2r, δg2i)ᵀ`.
pub fn e2() -> [[C64; 4]; 4] {
    [
        [cr(0.0), cr(0.0), cr(0.5), ci(0.0, 0.5)],
        [cr(0.5), ci(0.0, 0.5), cr(0.0), cr(0.0)],
        [cr(0.5), ci(0.0, -0.5), cr(0.0), cr(0.0)],
        [cr(0.0), cr(0.0), cr(0.5), ci(0.0, -0.5)],
    ]
}

/// `δb̄2 = E3 (δb2r, δb2i)ᵀ`.
pub fn e3() -> [[C64; 2]; 2] {
    [[cr(1.0), ci(0.0, 1.0)], [cr(1.0), ci(0.0, -1.0)]]
}

/// The `JK × 9` TP design matrix, rows j-major.
pub fn vtp_rows(
    t: &TPParamVector,
    inputs: &[C64],
    grids: &[PhaseSpaceGrid],
) -> Result<DMatrix<f64>> {
    let k = check_layout(inputs, grids)?;
    let ctx = TpRowContext::new(t)?;
    let mut v = DMatrix::zeros(inputs.len() * k, N_TP_PARAMS);
    for (j, (&a, g)) in inputs.iter().zip(grids).enumerate() {
        for kk in 0..k {
            let row = ctx.row(a, g.bin_center(kk));
            for (c, x) in row.iter().enumerate() {
                v[(j * k + kk, c)] = *x;
            }
        }
    }
    Ok(v)
}

/// Asymptotic TP-ML MSE over the 9 TP parameters.
pub fn mse_formula_tp(
    t: &TPParamVector,
    inputs: &[C64],
    layout: &GridLayout,
    n: f64,
) -> Result<MseBreakdown> {
    let p = tp_complete(t)?;
    let grids = layout.grids(&p, inputs)?;
    mse_formula_tp_on(t, inputs, &grids, n)
}

pub fn mse_formula_tp_on(
    t: &TPParamVector,
    inputs: &[C64],
    grids: &[PhaseSpaceGrid],
    n: f64,
) -> Result<MseBreakdown> {
    if inputs.len() < 3 {
        return Err(Error::NotIc {
            cond: f64::INFINITY,
        });
    }
    let p = tp_complete(t)?;
    let v = vtp_rows(t, inputs, grids)?;
    let pt = normalized_bins(&p, inputs, grids)?;
    sandwich_mse(&v, N_TP_PARAMS, &pt, n)
}

/// Least-squares solve `x = (VᵀV)⁻¹ Vᵀ u` through a QR factorization.
pub(crate) fn least_squares(v: &DMatrix<f64>, u: &DVector<f64>) -> Option<DVector<f64>> {
    let qr = v.clone().qr();
    let qtu = qr.q().transpose() * u;
    qr.r().solve_upper_triangular(&qtu)
}
