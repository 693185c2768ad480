//! Parameter estimation from binned heterodyne data: logarithmic inversion,
//! CP-constrained ML in the 14-parameter model and ML in the 9-parameter TP
//! model.

use nalgebra::{DMatrix, DVector, Matrix4, SMatrix, SVector, SymmetricEigen, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::exec::{derive_seed, Exec};
use crate::linalg::{c, from_real_rep, to_real_rep, C64};
use crate::model::{
    nearest_cp, positivity_status, project_physical, tp_complete, ParamVector, PositivityMode,
    PositivityStatus, QFunctionParams, TPParamVector, N_EXTENDED, N_PARAMS, N_TP_PARAMS,
};
use crate::mse::{
    condition_number, design_rows, gram_inverse_of, least_squares, TpRowContext,
    IC_COND_THRESHOLD,
};
use crate::phase_space::{
    bin_probabilities, output_gaussian_moments, z_linear_term, GridLayout, PhaseSpaceGrid,
};
use crate::simulator::MeasurementRecord;

/// Admissibility margin kept by TP-ML steps.
pub const TP_MARGIN: f64 = 1e-9;
/// Calibrated TP likelihood ignores the off-grid cell when `1 - γ_j` is below this.
pub const OFF_GRID_MIN: f64 = 1e-9;
/// Final `a2² - 4|c2|²` below this flags a boundary estimate.
pub const TP_BOUNDARY_FLAG: f64 = 1e-6;

/// Estimator input: per-input grids, calibration weights and frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedData {
    pub inputs: Vec<C64>,
    pub grids: Vec<PhaseSpaceGrid>,
    pub gamma: Vec<f64>,
    /// `ν̃_jk`, each row sums to one.
    pub freqs: Vec<Vec<f64>>,
    /// Shots per input.
    pub n: f64,
}

impl BinnedData {
    pub fn from_record(rec: &MeasurementRecord) -> Self {
        BinnedData {
            inputs: rec.inputs.clone(),
            grids: rec.grids.clone(),
            gamma: rec.gamma.clone(),
            freqs: rec.frequencies(),
            n: rec.n as f64,
        }
    }

    /// Noiseless data: frequencies equal the normalized bin masses.
    pub fn exact(p: &QFunctionParams, inputs: &[C64], layout: &GridLayout, n: f64) -> Result<Self> {
        let grids = layout.grids(p, inputs)?;
        let mut gamma = Vec::with_capacity(inputs.len());
        let mut freqs = Vec::with_capacity(inputs.len());
        for (&a, g) in inputs.iter().zip(&grids) {
            let bp = bin_probabilities(p, a, g)?;
            gamma.push(bp.gamma);
            freqs.push(bp.p_tilde);
        }
        Ok(BinnedData {
            inputs: inputs.to_vec(),
            grids,
            gamma,
            freqs,
            n,
        })
    }

    pub fn with_gamma_scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.gamma.iter_mut().for_each(|g| *g *= s);
        out
    }

    pub fn j(&self) -> usize {
        self.inputs.len()
    }

    pub fn k(&self) -> usize {
        self.grids.first().map_or(0, |g| g.k())
    }

    /// `log(bin_area_j / π)`, the per-input offset between `log Q` and `log p`.
    fn log_area(&self, j: usize) -> f64 {
        (self.grids[j].bin_area() / PI).ln()
    }
}

/// `JK × 15` design matrix with its Gram matrix.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub v: DMatrix<f64>,
    pub gram: DMatrix<f64>,
    /// Condition number of the column-equilibrated Gram matrix.
    pub cond: f64,
    pub j: usize,
    pub k: usize,
}

pub fn build_design_matrix(inputs: &[C64], grids: &[PhaseSpaceGrid]) -> Result<DesignMatrix> {
    if inputs.is_empty() || inputs.len() != grids.len() {
        return Err(Error::InvalidInput(
            "need one grid per input and at least one input".into(),
        ));
    }
    let k = grids[0].k();
    if grids.iter().any(|g| g.k() != k) {
        return Err(Error::InvalidInput("all grids must have the same K".into()));
    }
    let v = design_rows(inputs, grids);
    let gram = v.transpose() * &v;
    let cond = equilibrated_cond(&gram);
    Ok(DesignMatrix {
        v,
        gram,
        cond,
        j: inputs.len(),
        k,
    })
}

pub fn build_design_matrix_shared(inputs: &[C64], grid: &PhaseSpaceGrid) -> Result<DesignMatrix> {
    build_design_matrix(inputs, &vec![*grid; inputs.len()])
}

fn equilibrated_cond(g: &DMatrix<f64>) -> f64 {
    let n = g.nrows();
    let d: Vec<f64> = (0..n).map(|i| g[(i, i)].max(0.0).sqrt()).collect();
    if d.iter().any(|&x| x == 0.0) {
        return f64::INFINITY;
    }
    condition_number(&DMatrix::from_fn(n, n, |a, b| g[(a, b)] / (d[a] * d[b])))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcDiagnostics {
    pub is_ic: bool,
    pub cond: f64,
    /// Unit eigenvector of the smallest Gram eigenvalue, when not IC.
    pub null_vector: Option<Vec<f64>>,
    /// Orthonormal basis of the numerical null space, when not IC.
    pub null_space: Vec<Vec<f64>>,
}

pub fn ic_diagnostics(d: &DesignMatrix) -> IcDiagnostics {
    let is_ic = d.cond < IC_COND_THRESHOLD;
    if is_ic {
        return IcDiagnostics {
            is_ic,
            cond: d.cond,
            null_vector: None,
            null_space: vec![],
        };
    }
    let eig = d.gram.clone().symmetric_eigen();
    let max = eig.eigenvalues.max().max(f64::MIN_POSITIVE);
    let unit = |i: usize| {
        let col = eig.eigenvectors.column(i);
        let sign = if col[N_EXTENDED - 1] < 0.0 { -1.0 } else { 1.0 };
        col.iter().map(|x| x * sign).collect::<Vec<f64>>()
    };
    let imin = eig.eigenvalues.imin();
    let null_space = (0..N_EXTENDED)
        .filter(|&i| eig.eigenvalues[i] <= max / IC_COND_THRESHOLD)
        .map(unit)
        .collect();
    IcDiagnostics {
        is_ic,
        cond: d.cond,
        null_vector: Some(unit(imin)),
        null_space,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "li")]
    Li,
    #[serde(rename = "li-proj")]
    LiProjected,
    #[serde(rename = "ml")]
    Ml,
    #[serde(rename = "ml-tp")]
    MlTp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub method: Method,
    /// 14-vector for the non-TP methods, 9-vector for TP ML.
    pub x: Vec<f64>,
    pub params: QFunctionParams,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub log_likelihood: Option<f64>,
    pub positivity: PositivityStatus,
    pub projected: bool,
    pub constraint_boundary: bool,
}

impl EstimateReport {
    fn nontp(method: Method, params: QFunctionParams) -> Self {
        EstimateReport {
            method,
            x: ParamVector::from_params(&params).0.to_vec(),
            params,
            iterations: 0,
            gradient_norm: 0.0,
            log_likelihood: None,
            positivity: positivity_status(&params, PositivityMode::Cp),
            projected: false,
            constraint_boundary: false,
        }
    }

    pub fn param_vector(&self) -> ParamVector {
        ParamVector::from_params(&self.params)
    }

    pub fn tp_vector(&self) -> TPParamVector {
        TPParamVector::from_params(&self.params)
    }
}

/// Logarithmic inversion on the bins with nonzero counts.
pub fn li_estimate(data: &BinnedData, d: &DesignMatrix, project: bool) -> Result<EstimateReport> {
    let k = data.k();
    if d.j != data.j() || d.k != k {
        return Err(Error::InvalidInput(
            "design matrix does not match the data layout".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut u = Vec::new();
    for j in 0..data.j() {
        let before = rows.len();
        for (kk, &f) in data.freqs[j].iter().enumerate() {
            if f > 0.0 {
                rows.push(j * k + kk);
                u.push(-(data.gamma[j] * f).ln() + data.log_area(j));
            }
        }
        if rows.len() == before {
            return Err(Error::AllZeroRow(j));
        }
    }
    let vs = d.v.select_rows(&rows);
    gram_inverse_of(&(vs.transpose() * &vs))?;
    let xe = least_squares(&vs, &DVector::from_vec(u)).ok_or(Error::NotIc {
        cond: f64::INFINITY,
    })?;
    let (x, c0) = ParamVector::from_extended(xe.as_slice());
    let raw = x.to_params(c0);
    if project {
        let mut rep = EstimateReport::nontp(Method::LiProjected, project_physical(&raw)?);
        rep.projected = true;
        Ok(rep)
    } else {
        Ok(EstimateReport::nontp(Method::Li, raw))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlOptions {
    pub max_iter: usize,
    /// Convergence when the gradient ∞-norm drops below `grad_tol` times the
    /// total data weight.
    pub grad_tol: f64,
    /// Multi-start count for TP ML.
    pub starts: usize,
    pub seed: u64,
    pub exec: Exec,
    #[serde(default)]
    pub tp_normalization: TpNormalization,
}

impl Default for MlOptions {
    fn default() -> Self {
        MlOptions {
            max_iter: 10_000,
            grad_tol: 1e-7,
            starts: 4,
            seed: 0,
            exec: Exec::default(),
            tp_normalization: TpNormalization::default(),
        }
    }
}

type V14 = SVector<f64, N_PARAMS>;
type M14 = SMatrix<f64, N_PARAMS, N_PARAMS>;
type V9 = SVector<f64, N_TP_PARAMS>;
type M9 = SMatrix<f64, N_TP_PARAMS, N_TP_PARAMS>;

/// Joint log-likelihood of the 14-parameter model,
/// `-Σ ν_r v_rᵀx′ - μ log Σ_r exp(-v_rᵀx′ + o_r)` with `ν_jk = γ_j ν̃_jk`,
/// `μ = Σ γ_j` and per-input bin-area offsets `o_r`.
pub struct NonTpLikelihood {
    v: DMatrix<f64>,
    offset: Vec<f64>,
    mu: f64,
    /// `Vᵀν`, the whole data dependence of the linear term.
    data_term: [f64; N_EXTENDED],
}

pub struct NonTpEval {
    pub value: f64,
    pub gradient: V14,
    pub hessian: M14,
    /// `log Σ_r exp(-v_rᵀx′ + o_r)`.
    pub log_partition: f64,
}

impl NonTpLikelihood {
    pub fn new(data: &BinnedData) -> Result<Self> {
        let d = build_design_matrix(&data.inputs, &data.grids)?;
        let k = data.k();
        let mut nu = Vec::with_capacity(data.j() * k);
        let mut offset = Vec::with_capacity(data.j() * k);
        for j in 0..data.j() {
            let o = data.log_area(j);
            for &f in &data.freqs[j] {
                nu.push(data.gamma[j] * f);
                offset.push(o);
            }
        }
        let mu = data.gamma.iter().sum();
        let mut data_term = [0.0; N_EXTENDED];
        for (c, t) in data_term.iter_mut().enumerate() {
            *t = neumaier_sum(nu.iter().enumerate().map(|(r, n)| n * d.v[(r, c)]));
        }
        Ok(NonTpLikelihood {
            v: d.v,
            offset,
            mu,
            data_term,
        })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn value(&self, xe: &[f64; N_EXTENDED]) -> f64 {
        self.eval(xe, false).value
    }

    pub fn gradient(&self, xe: &[f64; N_EXTENDED]) -> [f64; N_PARAMS] {
        self.eval(xe, false).gradient.into()
    }

    pub fn eval(&self, xe: &[f64; N_EXTENDED], with_hessian: bool) -> NonTpEval {
        let rows = self.v.nrows();
        let mut s = vec![0.0; rows];
        for (r, s_r) in s.iter_mut().enumerate() {
            let d = neumaier_sum((0..N_EXTENDED).map(|c| self.v[(r, c)] * xe[c]));
            *s_r = -d + self.offset[r];
        }
        let lin = neumaier_sum(self.data_term.iter().zip(xe).map(|(b, x)| b * x));
        let smax = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = s.iter().map(|x| (x - smax).exp()).collect();
        let z = neumaier_sum(w.iter().copied());
        let log_partition = smax + z.ln();
        let mut mean = V14::zeros();
        let mut second = M14::zeros();
        let data_term = V14::from_fn(|i, _| self.data_term[i]);
        for r in 0..rows {
            let wr = w[r] / z;
            let vr = V14::from_fn(|i, _| self.v[(r, i)]);
            mean += wr * vr;
            if with_hessian {
                second += wr * vr * vr.transpose();
            }
        }
        let gradient = -data_term + self.mu * mean;
        let hessian = if with_hessian {
            -self.mu * (second - mean * mean.transpose())
        } else {
            M14::zeros()
        };
        NonTpEval {
            value: -lin - self.mu * log_partition,
            gradient,
            hessian,
            log_partition,
        }
    }
}

/// Compensated sum; keeps the likelihood value smooth enough for
/// finite-difference checks at h = 1e-6.
fn neumaier_sum(it: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut comp) = (0.0f64, 0.0f64);
    for x in it {
        let t = s + x;
        comp += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + comp
}

fn extended_of(p: &QFunctionParams) -> [f64; N_EXTENDED] {
    ParamVector::from_params(p).extended(p.c0)
}

fn params_of(xe: &[f64; N_EXTENDED]) -> QFunctionParams {
    let (x, c0) = ParamVector::from_extended(xe);
    x.to_params(c0)
}

fn cp_clip(xe: &[f64; N_EXTENDED]) -> [f64; N_EXTENDED] {
    let mut out = extended_of(&nearest_cp(&params_of(xe)));
    out[N_PARAMS] = xe[N_PARAMS];
    out
}

fn moved(xe: &[f64; N_EXTENDED], d: &V14, t: f64) -> [f64; N_EXTENDED] {
    let mut out = *xe;
    for i in 0..N_PARAMS {
        out[i] += t * d[i];
    }
    out
}

fn displacement(a: &[f64; N_EXTENDED], b: &[f64; N_EXTENDED]) -> V14 {
    V14::from_fn(|i, _| a[i] - b[i])
}

/// Slots of the 14-vector that live in `A`; the rest are the `b` entries.
const A_SLOTS: [usize; 10] = [0, 1, 6, 7, 8, 9, 10, 11, 12, 13];
const B_SLOTS: [usize; 4] = [2, 3, 4, 5];
/// Upper-triangle index pairs of a symmetric 4×4 matrix.
const VECH: [(usize, usize); 10] = [
    (0, 0), (0, 1), (0, 2), (0, 3), (1, 1), (1, 2), (1, 3), (2, 2), (2, 3), (3, 3),
];

type V20 = SVector<f64, 20>;
type M20 = SMatrix<f64, 20, 20>;

/// Linear map from the upper triangle of `A′` to the `A` slots.
fn a_slot_map() -> &'static SMatrix<f64, 10, 10> {
    static MAP: OnceLock<SMatrix<f64, 10, 10>> = OnceLock::new();
    MAP.get_or_init(|| {
        let mut t = SMatrix::<f64, 10, 10>::zeros();
        for (col, &(a, b)) in VECH.iter().enumerate() {
            let mut e = Matrix4::zeros();
            e[(a, b)] = 1.0;
            e[(b, a)] = 1.0;
            let p = QFunctionParams::from_matrices(&from_real_rep(&e), &Default::default(), 0.0);
            let x = ParamVector::from_params(&p).0;
            for (row, &s) in A_SLOTS.iter().enumerate() {
                t[(row, col)] = x[s];
            }
        }
        t
    })
}

/// `A′ = R Rᵀ` factor of a CP point, `R = Q √Λ₊`.
fn factor_of(xe: &[f64; N_EXTENDED]) -> Matrix4<f64> {
    let (a, _) = params_of(xe).assemble_matrices();
    let (ar, _) = to_real_rep(&a);
    let eig = SymmetricEigen::new(ar);
    eig.eigenvectors * Matrix4::from_diagonal(&eig.eigenvalues.map(|d| d.max(0.0).sqrt()))
}

fn point_of(r: &Matrix4<f64>, b: &[f64; 4], c0_slot: f64) -> [f64; N_EXTENDED] {
    let ar = r * r.transpose();
    let vech = SVector::<f64, 10>::from_fn(|i, _| ar[VECH[i]]);
    let xa = a_slot_map() * vech;
    let mut xe = [0.0; N_EXTENDED];
    for (i, &s) in A_SLOTS.iter().enumerate() {
        xe[s] = xa[i];
    }
    for (i, &s) in B_SLOTS.iter().enumerate() {
        xe[s] = b[i];
    }
    xe[N_PARAMS] = c0_slot;
    xe
}

/// Damped Newton step in `θ = (R, b)`; returns an improving CP point if one
/// is found. Positivity holds by construction.
fn factored_step(
    lik: &NonTpLikelihood,
    xe: &[f64; N_EXTENDED],
    cur: &NonTpEval,
    damping: &mut f64,
) -> Option<[f64; N_EXTENDED]> {
    let r = factor_of(xe);
    let t = a_slot_map();
    // chain rule through vech(R Rᵀ)
    let mut jac = SMatrix::<f64, N_PARAMS, 20>::zeros();
    for (row, &s) in A_SLOTS.iter().enumerate() {
        for (col, &(a, b)) in VECH.iter().enumerate() {
            let w = t[(row, col)];
            if w == 0.0 {
                continue;
            }
            for c in 0..4 {
                jac[(s, 4 * a + c)] += w * r[(b, c)];
                jac[(s, 4 * b + c)] += w * r[(a, c)];
            }
        }
    }
    for (i, &s) in B_SLOTS.iter().enumerate() {
        jac[(s, 16 + i)] = 1.0;
    }
    let ga = SVector::<f64, 10>::from_fn(|i, _| cur.gradient[A_SLOTS[i]]);
    let w = t.transpose() * ga;
    let mut m = Matrix4::zeros();
    for (i, &(a, b)) in VECH.iter().enumerate() {
        if a == b {
            m[(a, a)] = 2.0 * w[i];
        } else {
            m[(a, b)] = w[i];
            m[(b, a)] = w[i];
        }
    }
    let grad: V20 = jac.transpose() * cur.gradient;
    let mut neg_h: M20 = -(jac.transpose() * cur.hessian * jac);
    for c in 0..4 {
        for i in 0..4 {
            for j in 0..4 {
                neg_h[(4 * i + c, 4 * j + c)] -= m[(i, j)];
            }
        }
    }
    let scale = neg_h.diagonal().amax().max(f64::MIN_POSITIVE);
    let b0 = [xe[2], xe[3], xe[4], xe[5]];
    for _ in 0..12 {
        let sys = neg_h + M20::identity() * (*damping * scale);
        if let Some(ch) = sys.cholesky() {
            let d = ch.solve(&grad);
            let r1 = r + Matrix4::from_fn(|i, c| d[4 * i + c]);
            let b1 = std::array::from_fn(|i| b0[i] + d[16 + i]);
            let trial = point_of(&r1, &b1, xe[N_PARAMS]);
            if lik.eval(&trial, false).value > cur.value {
                *damping = (*damping * 0.1).max(1e-12);
                return Some(trial);
            }
        }
        *damping *= 10.0;
    }
    *damping = 1e-6;
    None
}

/// CP-constrained ML in the 14-parameter model. The likelihood is concave in
/// `x′` and the CP set is convex, so any stationary point of the projected
/// problem is the constrained maximum. Steps: damped Newton in the factored
/// coordinates `A′ = R Rᵀ` (follows the boundary of the cone); if that stalls,
/// projected Newton / projected gradient arcs `P(x + t·s)` with `P` the
/// eigenvalue clip of `A′`. Stationarity is measured by the projected-gradient
/// map, which is the plain gradient in the interior. With `init = None` the
/// start is the projected LI estimate.
pub fn ml_estimate_nontp(
    data: &BinnedData,
    init: Option<&QFunctionParams>,
    opts: &MlOptions,
) -> Result<EstimateReport> {
    let lik = NonTpLikelihood::new(data)?;
    let start = match init {
        Some(p) => project_physical(p)?,
        None => {
            let d = build_design_matrix(&data.inputs, &data.grids)?;
            li_estimate(data, &d, true)?.params
        }
    };
    let mut xe = cp_clip(&extended_of(&start));
    let mut cur = lik.eval(&xe, true);
    let tol = opts.grad_tol * lik.mu();
    let mut iterations = 0;
    let mut boundary = false;
    let mut converged = false;
    let mut stationarity = f64::INFINITY;
    let mut damping = 1e-6;

    while iterations < opts.max_iter {
        let neg_h = -cur.hessian;
        let curvature = neg_h.symmetric_eigenvalues().max().max(f64::MIN_POSITIVE);
        let pg = cp_clip(&moved(&xe, &cur.gradient, 1.0 / curvature));
        let pg_step = displacement(&pg, &xe);
        stationarity = curvature * pg_step.amax();
        boundary = (cur.gradient - curvature * pg_step).amax() > 1e-9 * cur.gradient.amax().max(1.0);
        if stationarity < tol {
            converged = true;
            break;
        }
        iterations += 1;
        if let Some(next) = factored_step(&lik, &xe, &cur, &mut damping) {
            xe = next;
            cur = lik.eval(&xe, true);
            continue;
        }
        let newton = neg_h.cholesky().map(|ch| ch.solve(&cur.gradient));
        let mut accepted = None;
        for dir in newton.iter().chain(std::iter::once(&(cur.gradient / curvature))) {
            let mut t = 1.0;
            for _ in 0..50 {
                let trial = cp_clip(&moved(&xe, dir, t));
                let gain = cur.gradient.dot(&displacement(&trial, &xe));
                if gain > 0.0 {
                    let val = lik.eval(&trial, false).value;
                    if val >= cur.value + 1e-4 * gain {
                        accepted = Some(trial);
                        break;
                    }
                }
                t *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
        }
        match accepted {
            Some(next) => {
                xe = next;
                cur = lik.eval(&xe, true);
            }
            // no ascent along either arc: stationary to working precision
            None => {
                converged = true;
                break;
            }
        }
    }

    // total mass fixes the constant slot
    xe[N_PARAMS] += cur.log_partition - lik.mu().ln();
    // rounding can leave eigenvalues at -1e-17
    let params = project_physical(&params_of(&xe))?;
    let final_eval = lik.eval(&extended_of(&params), false);
    let mut rep = EstimateReport::nontp(Method::Ml, params);
    rep.iterations = iterations;
    rep.gradient_norm = stationarity;
    rep.log_likelihood = Some(final_eval.value);
    rep.projected = false;
    rep.constraint_boundary = boundary;
    if !converged {
        return Err(Error::NoConvergence {
            iterations,
            best: Box::new(rep),
        });
    }
    Ok(rep)
}

/// How the TP likelihood normalizes the model probabilities.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TpNormalization {
    /// Per input, the `K` grid bins plus one cell for everything that fell
    /// off the grid, sized from the calibrated `γ_j`: the record is read as
    /// `N/γ_j` shots of which `N` landed on the grid. Since the TP model fixes
    /// the absolute bin masses, `γ_j` is informative.
    #[default]
    Calibrated,
    /// One softmax over all `JK` bins, data weighted by `ν_jk = γ_j ν̃_jk`.
    Joint,
    /// `Σ_jk n_jk log p̃_jk` with `p̃` normalized over each input's grid.
    /// Ignores `γ`.
    PerInput,
}

/// Log-likelihood of the 9-parameter TP model.
pub struct TpLikelihood<'a> {
    data: &'a BinnedData,
    norm: TpNormalization,
    counts: Vec<Vec<f64>>,
    totals: Vec<f64>,
}

pub struct TpEval {
    pub value: f64,
    pub gradient: V9,
    pub fisher: M9,
}

impl<'a> TpLikelihood<'a> {
    pub fn new(data: &'a BinnedData) -> Self {
        Self::with_normalization(data, TpNormalization::default())
    }

    pub fn with_normalization(data: &'a BinnedData, norm: TpNormalization) -> Self {
        let counts: Vec<Vec<f64>> = data
            .freqs
            .iter()
            .enumerate()
            .map(|(j, row)| {
                let w = match norm {
                    TpNormalization::Joint => data.n * data.gamma[j],
                    _ => data.n,
                };
                row.iter().map(|f| f * w).collect()
            })
            .collect();
        let totals = counts.iter().map(|r| r.iter().sum()).collect();
        TpLikelihood {
            data,
            norm,
            counts,
            totals,
        }
    }

    pub fn total(&self) -> f64 {
        self.totals.iter().sum()
    }

    pub fn value(&self, t: &TPParamVector) -> Result<f64> {
        Ok(self.eval(t, false)?.value)
    }

    pub fn gradient(&self, t: &TPParamVector) -> Result<[f64; N_TP_PARAMS]> {
        Ok(self.eval(t, true)?.gradient.into())
    }

    pub fn eval(&self, t: &TPParamVector, derivatives: bool) -> Result<TpEval> {
        if !t.is_admissible() {
            return Err(Error::SingularA3(t.admissibility()));
        }
        let p = tp_complete(t)?;
        let ctx = if derivatives {
            Some(TpRowContext::new(t)?)
        } else {
            None
        };
        let (jn, k) = (self.data.j(), self.data.k());
        // log p_jk up to a per-input constant (PerInput) or exactly (Joint)
        let mut logs = vec![vec![0.0; k]; jn];
        for (j, lj) in logs.iter_mut().enumerate() {
            let mo = output_gaussian_moments(&p, self.data.inputs[j])?;
            let g = &self.data.grids[j];
            let off = self.data.log_area(j);
            for (kk, l) in lj.iter_mut().enumerate() {
                *l = mo.log_q(g.bin_center(kk)) + off;
            }
        }
        let lse = |it: &mut dyn Iterator<Item = f64>| {
            let v: Vec<f64> = it.collect();
            let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + v.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
        };
        let lz: Vec<f64> = match self.norm {
            TpNormalization::PerInput => logs.iter().map(|r| lse(&mut r.iter().copied())).collect(),
            TpNormalization::Joint => {
                let z = lse(&mut logs.iter().flatten().copied());
                vec![z; jn]
            }
            TpNormalization::Calibrated => vec![0.0; jn],
        };
        let mut value = 0.0;
        // off-grid cell: weight N(1-γ)/γ, model mass 1 - γ_j(t)
        let mut off_grid = vec![(0.0, 0.0); jn];
        if self.norm == TpNormalization::Calibrated {
            for j in 0..jn {
                let g_obs = self.data.gamma[j];
                if !(g_obs < 1.0 - OFF_GRID_MIN) {
                    continue;
                }
                let w = self.data.n * (1.0 - g_obs) / g_obs;
                let g_model: f64 = logs[j].iter().map(|l| l.exp()).sum();
                if g_model >= 1.0 {
                    return Ok(TpEval {
                        value: f64::NEG_INFINITY,
                        gradient: V9::zeros(),
                        fisher: M9::zeros(),
                    });
                }
                value += w * (1.0 - g_model).ln();
                off_grid[j] = (w, g_model);
            }
        }
        for j in 0..jn {
            for kk in 0..k {
                let cnt = self.counts[j][kk];
                if cnt > 0.0 {
                    value += cnt * (logs[j][kk] - lz[j]);
                }
            }
        }
        let mut gradient = V9::zeros();
        let mut fisher = M9::zeros();
        if let Some(ctx) = &ctx {
            let mut mean = V9::zeros();
            let mut second = M9::zeros();
            for j in 0..jn {
                let a = self.data.inputs[j];
                let g = &self.data.grids[j];
                for kk in 0..k {
                    let pk = (logs[j][kk] - lz[j]).exp();
                    let d = V9::from(ctx.row(a, g.bin_center(kk)));
                    gradient += self.counts[j][kk] * d;
                    mean += pk * d;
                    second += pk * d * d.transpose();
                }
                match self.norm {
                    TpNormalization::PerInput => {
                        gradient -= self.totals[j] * mean;
                        fisher += self.totals[j] * (second - mean * mean.transpose());
                    }
                    TpNormalization::Calibrated => {
                        // mean = ∇γ_j here, second = Σ p d dᵀ
                        let (w, g_model) = off_grid[j];
                        let shots = self.totals[j] + w;
                        fisher += shots * second;
                        if w > 0.0 {
                            gradient -= w / (1.0 - g_model) * mean;
                            fisher += shots / (1.0 - g_model) * mean * mean.transpose();
                        }
                    }
                    TpNormalization::Joint => continue,
                }
                mean = V9::zeros();
                second = M9::zeros();
            }
            if self.norm == TpNormalization::Joint {
                let w = self.total();
                gradient -= w * mean;
                fisher += w * (second - mean * mean.transpose());
            }
        }
        Ok(TpEval {
            value,
            gradient,
            fisher,
        })
    }
}

/// Weighted log-quadratic fit of the counts: a shared output precision gives
/// `a2, c2`, the per-input linear terms give `b2, g1, g2` by least squares.
pub fn tp_initial_guess(data: &BinnedData) -> Result<TPParamVector> {
    let jn = data.j();
    if jn < 3 {
        return Err(Error::NonIdentifiable(jn));
    }
    let k = data.k();
    let ncols = 3 + 3 * jn;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut rhs = Vec::new();
    for j in 0..jn {
        for kk in 0..k {
            let cnt = data.freqs[j][kk] * data.n;
            if cnt <= 0.0 {
                continue;
            }
            let w = cnt.sqrt();
            let z = data.grids[j].bin_center(kk);
            let (x, y) = (z.re, z.im);
            let mut row = vec![0.0; ncols];
            row[0] = -0.5 * x * x * w;
            row[1] = -x * y * w;
            row[2] = -0.5 * y * y * w;
            row[3 + 3 * j] = x * w;
            row[4 + 3 * j] = y * w;
            row[5 + 3 * j] = w;
            rows.push(row);
            rhs.push(cnt.ln() * w);
        }
    }
    let a = DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]);
    let fit = if rows.len() >= ncols {
        least_squares(&a, &DVector::from_vec(rhs))
    } else {
        None
    };
    let (mut a2, mut c2, ells) = match fit {
        Some(f) if f.iter().all(|x| x.is_finite()) => {
            let (p11, p12, p22) = (f[0], f[1], f[2]);
            let ells: Vec<Vector2<f64>> = (0..jn)
                .map(|j| Vector2::new(f[3 + 3 * j], f[4 + 3 * j]))
                .collect();
            ((p11 + p22) / 4.0, c((p22 - p11) / 8.0, p12 / 4.0), ells)
        }
        _ => (1.0, c(0.0, 0.0), vec![Vector2::zeros(); jn]),
    };
    if !(a2 > 0.0 && a2 * a2 - 4.0 * c2.norm_sqr() > 1e-3 * a2 * a2) {
        a2 = 1.0;
        c2 = c(0.0, 0.0);
    }
    // ℓ_j is linear in (b2, g1, g2)
    let basis: [fn(f64) -> QFunctionParams; 6] = [
        |v| QFunctionParams { b2: c(v, 0.0), ..Default::default() },
        |v| QFunctionParams { b2: c(0.0, v), ..Default::default() },
        |v| QFunctionParams { g1: c(v, 0.0), ..Default::default() },
        |v| QFunctionParams { g1: c(0.0, v), ..Default::default() },
        |v| QFunctionParams { g2: c(v, 0.0), ..Default::default() },
        |v| QFunctionParams { g2: c(0.0, v), ..Default::default() },
    ];
    let mut lm = DMatrix::zeros(2 * jn, 6);
    let mut lr = DVector::zeros(2 * jn);
    for j in 0..jn {
        for (col, f) in basis.iter().enumerate() {
            let l = z_linear_term(&f(1.0), data.inputs[j]);
            lm[(2 * j, col)] = l[0];
            lm[(2 * j + 1, col)] = l[1];
        }
        lr[2 * j] = ells[j][0];
        lr[2 * j + 1] = ells[j][1];
    }
    let th = least_squares(&lm, &lr)
        .filter(|v| v.iter().all(|x| x.is_finite()))
        .unwrap_or_else(|| DVector::zeros(6));
    Ok(TPParamVector([
        a2, th[0], th[1], c2.re, c2.im, th[2], th[3], th[4], th[5],
    ]))
}

fn tp_admissible(t: &TPParamVector) -> bool {
    t.a2() > 0.0 && t.admissibility() > TP_MARGIN
}

struct TpRun {
    t: TPParamVector,
    value: f64,
    gradient: f64,
    iterations: usize,
    converged: bool,
    boundary: bool,
}

fn tp_single_start(lik: &TpLikelihood, start: TPParamVector, opts: &MlOptions) -> Result<TpRun> {
    let mut t = start;
    let mut cur = lik.eval(&t, true)?;
    let tol = opts.grad_tol * lik.total();
    let mut iterations = 0;
    let mut converged = false;
    let mut boundary = false;
    while iterations < opts.max_iter {
        if cur.gradient.amax() < tol {
            converged = true;
            break;
        }
        iterations += 1;
        let step = match cur.fisher.cholesky() {
            Some(ch) => ch.solve(&cur.gradient),
            None => {
                let reg = cur.fisher + M9::identity() * (1e-8 * cur.fisher.trace().abs().max(1.0));
                reg.cholesky()
                    .map(|ch| ch.solve(&cur.gradient))
                    .unwrap_or(cur.gradient / cur.gradient.norm().max(1.0))
            }
        };
        let slope = cur.gradient.dot(&step);
        let mut s = 1.0;
        let mut accepted = None;
        let mut constraint_hit = false;
        for _ in 0..60 {
            let trial = TPParamVector(std::array::from_fn(|i| t.0[i] + s * step[i]));
            if !tp_admissible(&trial) {
                constraint_hit = true;
                s *= 0.5;
                continue;
            }
            if let Ok(v) = lik.value(&trial) {
                if v >= cur.value + 1e-4 * s * slope {
                    accepted = Some(trial);
                    break;
                }
            }
            s *= 0.5;
        }
        match accepted {
            Some(next) => {
                let moved = next.max_abs_diff(&t);
                t = next;
                cur = lik.eval(&t, true)?;
                if moved < 1e-14 * (1.0 + t.0.iter().map(|x| x.abs()).fold(0.0, f64::max)) {
                    boundary = constraint_hit;
                    converged = true;
                    break;
                }
            }
            None => {
                boundary = constraint_hit;
                converged = true;
                break;
            }
        }
    }
    if !converged && cur.gradient.amax() < tol {
        converged = true;
    }
    let boundary = boundary || t.admissibility() < TP_BOUNDARY_FLAG;
    Ok(TpRun {
        t,
        value: cur.value,
        gradient: cur.gradient.amax(),
        iterations,
        converged,
        boundary,
    })
}

fn perturbed(t0: &TPParamVector, seed: u64) -> TPParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..100 {
        let cand = TPParamVector(std::array::from_fn(|i| {
            let z: f64 = StandardNormal.sample(&mut rng);
            t0.0[i] + 0.1 * (0.2 + t0.0[i].abs()) * z
        }));
        if tp_admissible(&cand) {
            return cand;
        }
    }
    *t0
}

/// ML in the 9-parameter TP model by Fisher scoring with backtracking that
/// keeps `a2² - 4|c2|²` positive. Extra starts perturb the initial point.
pub fn ml_estimate_tp(
    data: &BinnedData,
    init: Option<&TPParamVector>,
    opts: &MlOptions,
) -> Result<EstimateReport> {
    if data.j() < 3 {
        return Err(Error::NonIdentifiable(data.j()));
    }
    let t0 = match init {
        Some(t) => *t,
        None => tp_initial_guess(data)?,
    };
    if !tp_admissible(&t0) {
        return Err(Error::SingularA3(t0.admissibility()));
    }
    let lik = TpLikelihood::with_normalization(data, opts.tp_normalization);
    let starts = opts.starts.max(1);
    let runs = opts.exec.map_range(starts, |s| {
        let start = if s == 0 {
            t0
        } else {
            perturbed(&t0, derive_seed(opts.seed, &[s as u64]))
        };
        tp_single_start(&lik, start, opts)
    });
    let mut best: Option<TpRun> = None;
    let mut first_err = None;
    for r in runs {
        match r {
            Ok(run) => {
                let better = match &best {
                    None => true,
                    Some(b) => (run.converged && !b.converged)
                        || (run.converged == b.converged && run.value > b.value),
                };
                if better {
                    best = Some(run);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let run = match best {
        Some(r) => r,
        None => return Err(first_err.unwrap_or(Error::AllStartsSingular)),
    };
    let params = tp_complete(&run.t)?;
    let rep = EstimateReport {
        method: Method::MlTp,
        x: run.t.0.to_vec(),
        params,
        iterations: run.iterations,
        gradient_norm: run.gradient,
        log_likelihood: Some(run.value),
        positivity: positivity_status(&params, PositivityMode::Tp),
        projected: false,
        constraint_boundary: run.boundary,
    };
    if !run.converged {
        return Err(Error::NoConvergence {
            iterations: run.iterations,
            best: Box::new(rep),
        });
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::cr;
    use crate::model::beam_splitter_process;
    use crate::phase_space::make_grid;
    use crate::simulator::{run_experiment, ExperimentOptions};

    fn truth() -> QFunctionParams {
        tp_complete(&TPParamVector([
            1.2, 0.3, -0.2, 0.1, 0.15, -0.6, 0.2, 0.15, -0.1,
        ]))
        .unwrap()
    }

    fn inputs8() -> Vec<C64> {
        vec![
            c(0.9, 0.1),
            c(-0.6, 0.8),
            c(0.2, -0.9),
            c(-0.3, -0.2),
            c(0.5, 0.5),
            c(-0.9, -0.7),
            c(0.1, 0.4),
            c(0.7, -0.4),
        ]
    }

    fn shared() -> GridLayout {
        GridLayout::Shared(make_grid(12, 4.0).unwrap())
    }

    #[test]
    fn design_shape() {
        let d = build_design_matrix_shared(&[cr(0.5)], &make_grid(2, 1.0).unwrap()).unwrap();
        assert_eq!((d.v.nrows(), d.v.ncols()), (4, 15));
    }

    #[test]
    fn five_inputs_are_never_ic() {
        let d = build_design_matrix_shared(&inputs8()[..5], &make_grid(20, 5.0).unwrap())
            .unwrap();
        assert!(!ic_diagnostics(&d).is_ic);
        let d = build_design_matrix_shared(&inputs8()[..6], &make_grid(20, 5.0).unwrap())
            .unwrap();
        assert!(ic_diagnostics(&d).is_ic, "cond {}", d.cond);
    }

    #[test]
    fn li_is_exact_on_noiseless_data() {
        let p = truth();
        for lay in [shared(), GridLayout::Windowed { m: 8, n_sigma: 1.0 }] {
            let data = BinnedData::exact(&p, &inputs8(), &lay, 1.0).unwrap();
            let d = build_design_matrix(&data.inputs, &data.grids).unwrap();
            let rep = li_estimate(&data, &d, false).unwrap();
            assert!(rep.param_vector().max_abs_diff(&ParamVector::from_params(&p)) < 1e-9);
            assert!((rep.params.c0 - p.c0).abs() < 1e-8);
        }
    }

    #[test]
    fn li_invariant_under_gamma_scaling() {
        let p = truth();
        let data = BinnedData::exact(&p, &inputs8(), &shared(), 1.0).unwrap();
        let d = build_design_matrix(&data.inputs, &data.grids).unwrap();
        let base = li_estimate(&data, &d, false).unwrap();
        for s in [0.5, 2.0, 10.0] {
            let rep = li_estimate(&data.with_gamma_scaled(s), &d, false).unwrap();
            assert!(rep.param_vector().max_abs_diff(&base.param_vector()) < 1e-10);
            assert!((rep.params.c0 - base.params.c0 - s.ln()).abs() < 1e-8);
        }
    }

    #[test]
    fn li_single_shot_is_not_ic() {
        let p = truth();
        let rec = run_experiment(&p, &inputs8(), 1, &shared(), 4, ExperimentOptions::default())
            .unwrap();
        let data = BinnedData::from_record(&rec);
        let d = build_design_matrix(&data.inputs, &data.grids).unwrap();
        assert!(matches!(li_estimate(&data, &d, false), Err(Error::NotIc { .. })));
    }

    #[test]
    fn nontp_gradient_matches_finite_differences() {
        let p = truth();
        let data = BinnedData::exact(&p, &inputs8(), &shared(), 1.0).unwrap();
        let lik = NonTpLikelihood::new(&data).unwrap();
        let mut xe = extended_of(&p);
        xe[0] += 0.3;
        xe[7] -= 0.2;
        xe[12] += 0.1;
        let g = lik.gradient(&xe);
        let scale = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let h = 1e-6;
        for i in 0..N_PARAMS {
            let mut a = xe;
            let mut b = xe;
            a[i] += h;
            b[i] -= h;
            let fd = (lik.value(&a) - lik.value(&b)) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() < 1e-6 * fd.abs().max(1e-2 * scale),
                "{i}: {fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn nontp_ml_recovers_noiseless_truth() {
        let p = truth();
        let data = BinnedData::exact(&p, &inputs8(), &shared(), 1.0).unwrap();
        let rep = ml_estimate_nontp(&data, None, &MlOptions::default()).unwrap();
        assert!(rep.param_vector().max_abs_diff(&ParamVector::from_params(&p)) < 1e-6);
        let again = ml_estimate_nontp(&data, Some(&p), &MlOptions::default()).unwrap();
        assert!(again.iterations <= 2);
    }

    #[test]
    fn tp_ml_recovers_noiseless_truth() {
        let p = truth();
        let data = BinnedData::exact(&p, &inputs8()[..4], &shared(), 1.0).unwrap();
        let rep = ml_estimate_tp(&data, None, &MlOptions::default()).unwrap();
        assert!(rep.tp_vector().max_abs_diff(&TPParamVector::from_params(&p)) < 1e-6);
        assert!(check_close_tp(&rep.params));
    }

    fn check_close_tp(p: &QFunctionParams) -> bool {
        crate::model::check_tp(p).unwrap().max() < 1e-10
    }

    #[test]
    fn tp_gradient_matches_finite_differences() {
        let p = truth();
        let rec = run_experiment(&p, &inputs8()[..4], 2000, &shared(), 9, ExperimentOptions::default())
            .unwrap();
        let data = BinnedData::from_record(&rec);
        let t = TPParamVector([1.0, 0.2, 0.1, -0.1, 0.2, -0.4, 0.1, 0.3, 0.0]);
        let windowed = BinnedData::exact(&p, &inputs8()[..4], &GridLayout::Windowed { m: 12, n_sigma: 0.7 }, 2000.0)
            .unwrap();
        for d in [&data, &windowed] {
            for norm in [TpNormalization::Calibrated, TpNormalization::Joint, TpNormalization::PerInput] {
                let lik = TpLikelihood::with_normalization(d, norm);
                let g = lik.gradient(&t).unwrap();
                let gmax = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                let h = 1e-6;
                for i in 0..9 {
                    let mut a = t;
                    let mut b = t;
                    a.0[i] += h;
                    b.0[i] -= h;
                    let fd = (lik.value(&a).unwrap() - lik.value(&b).unwrap()) / (2.0 * h);
                    assert!((fd - g[i]).abs() < 1e-6 * fd.abs().max(1e-2 * gmax), "{norm:?} {i}: {fd} vs {}", g[i]);
                }
            }
        }
    }

    #[test]
    fn tp_normalizations_agree_on_noiseless_windowed_data() {
        let p = truth();
        let layout = GridLayout::Windowed { m: 12, n_sigma: 0.7 };
        let data = BinnedData::exact(&p, &inputs8()[..4], &layout, 1e4).unwrap();
        let want = TPParamVector::from_params(&p);
        for norm in [TpNormalization::Calibrated, TpNormalization::Joint, TpNormalization::PerInput] {
            let opts = MlOptions { tp_normalization: norm, starts: 1, ..Default::default() };
            let rep = ml_estimate_tp(&data, None, &opts).unwrap();
            assert!(rep.tp_vector().max_abs_diff(&want) < 1e-6, "{norm:?}");
        }
    }

    #[test]
    fn tp_needs_three_inputs() {
        let p = beam_splitter_process(0.3);
        let data = BinnedData::exact(&p, &inputs8()[..2], &shared(), 1.0).unwrap();
        assert!(matches!(
            ml_estimate_tp(&data, None, &MlOptions::default()),
            Err(Error::NonIdentifiable(2))
        ));
    }

    #[test]
    fn ml_on_sampled_data_is_physical() {
        let p = truth();
        let rec = run_experiment(&p, &inputs8()[..6], 10_000, &shared(), 21, ExperimentOptions::default())
            .unwrap();
        let data = BinnedData::from_record(&rec);
        let rep = ml_estimate_nontp(&data, None, &MlOptions::default()).unwrap();
        assert!(rep.positivity.pass);
        let tp = ml_estimate_tp(&data, None, &MlOptions::default()).unwrap();
        assert!(tp.tp_vector().is_admissible());
        assert!(tp.tp_vector().max_abs_diff(&TPParamVector::from_params(&p)) < 0.2);
    }

    #[test]
    fn report_json_round_trip() {
        let p = truth();
        let data = BinnedData::exact(&p, &inputs8(), &shared(), 1.0).unwrap();
        let d = build_design_matrix(&data.inputs, &data.grids).unwrap();
        let rep = li_estimate(&data, &d, true).unwrap();
        let s = serde_json::to_string(&rep).unwrap();
        assert!(s.contains("\"method\":\"li-proj\""));
        let back: EstimateReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, rep);
    }
}
