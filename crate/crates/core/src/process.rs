//! CPTP Gaussian processes from experimental knobs (phase shift, squeezing,
//! displacement, gain/loss, reservoir noise), the ω-deformed idle channel and
//! the process groups used in the campaigns.

use nalgebra::{Matrix2, Matrix4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, PI};

use crate::error::{Error, Result};
use crate::exec::derive_seed;
use crate::linalg::{c, cr, from_real_rep, min_eigenvalue2_herm, u_full, Mat2c, Mat4c, Vec4c};
use crate::model::{
    positivity_status, tp_complete, PositivityMode, QFunctionParams, TPParamVector,
};

/// Default finite-`t` surrogate for the idle Choi state.
pub const DEFAULT_T: f64 = 14.0;
const T_MAX: f64 = 60.0;
const LADDER_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalChannelSpec {
    pub phi: f64,
    pub r: f64,
    pub theta: f64,
    pub x0: f64,
    pub p0: f64,
    pub chi: f64,
    #[serde(rename = "n_T")]
    pub n_t: f64,
    #[serde(rename = "a_T")]
    pub a_t: f64,
    #[serde(rename = "theta_T")]
    pub theta_t: f64,
}

impl PhysicalChannelSpec {
    pub fn idle() -> Self {
        PhysicalChannelSpec {
            phi: 0.0,
            r: 0.0,
            theta: 0.0,
            x0: 0.0,
            p0: 0.0,
            chi: 1.0,
            n_t: 0.0,
            a_t: 0.0,
            theta_t: 0.0,
        }
    }
}

/// Sampling intervals for wildcard knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    pub r_max: f64,
    pub displacement: (f64, f64),
    pub chi: (f64, f64),
    pub n_t_max: f64,
}

impl Default for ParamRanges {
    fn default() -> Self {
        ParamRanges {
            r_max: 1.0 / 3.0,
            displacement: (-2.0, 2.0),
            chi: (0.1, 1.5),
            n_t_max: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelMaps {
    pub x: Matrix2<f64>,
    pub y: Matrix2<f64>,
}

pub fn rotation(phi: f64) -> Matrix2<f64> {
    let (s, c) = phi.sin_cos();
    Matrix2::new(c, s, -s, c)
}

pub fn squeezer(r: f64, theta: f64) -> Matrix2<f64> {
    let rt = rotation(theta);
    rt.transpose() * Matrix2::new(r.exp(), 0.0, 0.0, (-r).exp()) * rt
}

pub fn omega() -> Matrix2<f64> {
    Matrix2::new(0.0, 1.0, -1.0, 0.0)
}

/// `X = χ S(r, θ) R(φ)`, `Y = |1 - χ²| 𝟙/2 + (n_T/2) Rᵀ(θ_T) diag(1 + a_T, 1 - a_T) R(θ_T)`.
///
/// The isotropic term uses `|1 - χ²|`, the minimal noise that keeps a
/// gain/loss `χ` consistent with the uncertainty relation.
pub fn xy_matrices(spec: &PhysicalChannelSpec) -> ChannelMaps {
    let x = spec.chi * squeezer(spec.r, spec.theta) * rotation(spec.phi);
    let rt = rotation(spec.theta_t);
    let y = Matrix2::identity() * ((1.0 - spec.chi * spec.chi).abs() / 2.0)
        + rt.transpose()
            * Matrix2::new(1.0 + spec.a_t, 0.0, 0.0, 1.0 - spec.a_t)
            * rt
            * (spec.n_t / 2.0);
    ChannelMaps {
        x,
        y: 0.5 * (y + y.transpose()),
    }
}

/// Smallest eigenvalue of `XᵀΣX + Y + iΩ/2`.
pub fn symplectic_check(maps: &ChannelMaps, sigma_in: &Matrix2<f64>) -> f64 {
    let s = maps.x.transpose() * sigma_in * maps.x + maps.y;
    let s = 0.5 * (s + s.transpose());
    let h = Mat2c::new(
        cr(s[(0, 0)]),
        c(s[(0, 1)], 0.5),
        c(s[(1, 0)], -0.5),
        cr(s[(1, 1)]),
    );
    min_eigenvalue2_herm(&h)
}

/// Smallest eigenvalue of `Y + i(Ω - XᵀΩX)/2`, the condition for `(X, Y)` to be
/// a valid channel on every input, including halves of entangled states.
/// Single-mode inputs alone cannot expose noiseless amplification.
pub fn channel_cp_check(maps: &ChannelMaps) -> f64 {
    let w = (omega() - maps.x.transpose() * omega() * maps.x) * 0.5;
    let h = Mat2c::new(
        cr(maps.y[(0, 0)]),
        c(maps.y[(0, 1)], w[(0, 1)]),
        c(maps.y[(1, 0)], w[(1, 0)]),
        cr(maps.y[(1, 1)]),
    );
    min_eigenvalue2_herm(&h)
}

pub fn sigma_t(t: f64) -> Matrix4<f64> {
    let (ch, sh) = (t.cosh() / 2.0, t.sinh() / 2.0);
    Matrix4::new(
        ch, 0.0, sh, 0.0, //
        0.0, ch, 0.0, -sh, //
        sh, 0.0, ch, 0.0, //
        0.0, -sh, 0.0, ch,
    )
}

/// `A′(t) = ½[(𝟙⊕Xᵀ)Σ_t(𝟙⊕X) + 0⊕Y + 𝟙/2]⁻¹`, evaluated through its Schur
/// complement `S = ½XᵀX + Y + ½𝟙`, which does not depend on `t`.
pub fn a_prime(maps: &ChannelMaps, t: f64) -> Result<Matrix4<f64>> {
    let zd = Matrix2::new(1.0, 0.0, 0.0, -1.0);
    let s = 0.5 * maps.x.transpose() * maps.x + maps.y + Matrix2::identity() * 0.5;
    let s_inv = s
        .try_inverse()
        .ok_or_else(|| Error::NotCp(s.determinant()))?;
    let th = (t / 2.0).tanh();
    let ul = Matrix2::identity() * (2.0 / (t.cosh() + 1.0))
        + zd * maps.x * s_inv * maps.x.transpose() * zd * (th * th);
    let ur = -(zd * maps.x * s_inv) * th;
    let mut inv = Matrix4::zeros();
    inv.fixed_view_mut::<2, 2>(0, 0).copy_from(&ul);
    inv.fixed_view_mut::<2, 2>(0, 2).copy_from(&ur);
    inv.fixed_view_mut::<2, 2>(2, 0).copy_from(&ur.transpose());
    inv.fixed_view_mut::<2, 2>(2, 2).copy_from(&s_inv);
    let a = inv * 0.5;
    Ok(0.5 * (a + a.transpose()))
}

/// Raw `(A, B)` at a fixed `t`, before TP completion.
pub fn raw_process_matrices(spec: &PhysicalChannelSpec, t: f64) -> Result<(Mat4c, Vec4c)> {
    let maps = xy_matrices(spec);
    let a = from_real_rep(&a_prime(&maps, t)?);
    let mu = Vec4c::new(cr(0.0), cr(0.0), cr(spec.x0), cr(spec.p0));
    let b = a * u_full() * mu * cr(2.0);
    Ok((a, b))
}

fn max_abs_diff4(a: &Mat4c, b: &Mat4c) -> f64 {
    (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// CPTP process from the knobs. Starting at `t`, `t` grows in steps of 2 until
/// `A` stops changing, then `A1`, `b1`, `c0` are fixed by TP completion.
pub fn process_from_physical(spec: &PhysicalChannelSpec, t: f64) -> Result<QFunctionParams> {
    let mut t = t.max(0.0);
    let mut last_diff;
    loop {
        let (a, b) = raw_process_matrices(spec, t)?;
        let (a_next, _) = raw_process_matrices(spec, t + 2.0)?;
        last_diff = max_abs_diff4(&a, &a_next);
        if last_diff < LADDER_TOL {
            let raw = QFunctionParams::from_matrices(&a, &b, 0.0);
            let p = tp_complete(&TPParamVector::from_params(&raw))?;
            let cp = positivity_status(&p, PositivityMode::Cp);
            if !cp.pass {
                return Err(Error::NotCp(cp.value));
            }
            return Ok(p);
        }
        t += 2.0;
        if t > T_MAX {
            return Err(Error::GeneratorNoConvergence(last_diff));
        }
    }
}

/// Two-mode-squeezed regularization of the idle channel.
pub fn idle_deformed(omega: f64) -> QFunctionParams {
    QFunctionParams {
        a1: 1.0,
        a2: 1.0,
        g1: cr(-omega.tanh()),
        ..Default::default()
    }
}

/// Output mean in `z` for a pure displacer probed at `α`:
/// `α* + (x0 + i p0)/√2`.
pub fn displacer_mean(alpha: crate::linalg::C64, x0: f64, p0: f64) -> crate::linalg::C64 {
    alpha.conj() + c(x0, p0) * FRAC_1_SQRT_2
}

/// Number of processes in a group (group 3 accepts any positive index).
pub fn group_size(group: u8) -> Option<usize> {
    match group {
        1 => Some(1),
        2 => Some(6),
        3 => Some(10),
        _ => None,
    }
}

/// Knobs for process `index` (1-based) of a group; wildcards are drawn
/// uniformly from `ranges` with a seed derived from `(seed, group, index)`.
pub fn sample_group_spec(
    group: u8,
    index: usize,
    seed: u64,
    ranges: &ParamRanges,
) -> Result<PhysicalChannelSpec> {
    let valid = match group {
        1 => index == 1,
        2 => (1..=6).contains(&index),
        3 => index >= 1,
        _ => false,
    };
    if !valid {
        return Err(Error::InvalidInput(format!(
            "no process {index} in group {group}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[group as u64, index as u64]));
    let mut s = PhysicalChannelSpec::idle();
    let (dlo, dhi) = ranges.displacement;
    let phi = |rng: &mut ChaCha8Rng| rng.random_range(0.0..2.0 * PI);
    let sq = |rng: &mut ChaCha8Rng| rng.random_range(0.0..=ranges.r_max);
    let ang = |rng: &mut ChaCha8Rng| rng.random_range(0.0..=FRAC_PI_2);
    let disp = |rng: &mut ChaCha8Rng| rng.random_range(dlo..=dhi);
    let chi = |rng: &mut ChaCha8Rng| rng.random_range(ranges.chi.0..ranges.chi.1);
    let nt = |rng: &mut ChaCha8Rng| rng.random_range(0.0..=ranges.n_t_max);
    let at = |rng: &mut ChaCha8Rng| rng.random_range(-1.0..=1.0);
    match (group, index) {
        (1, _) => {}
        (2, 1) => s.phi = phi(&mut rng),
        (2, 2) => {
            s.r = sq(&mut rng);
            s.theta = ang(&mut rng);
        }
        (2, 3) => {
            s.x0 = disp(&mut rng);
            s.p0 = disp(&mut rng);
        }
        (2, 4) => s.chi = chi(&mut rng),
        (2, 5) => s.n_t = nt(&mut rng),
        (2, 6) => {
            s.n_t = nt(&mut rng);
            s.a_t = at(&mut rng);
            s.theta_t = ang(&mut rng);
        }
        _ => {
            s.phi = phi(&mut rng);
            s.r = sq(&mut rng);
            s.theta = ang(&mut rng);
            s.x0 = disp(&mut rng);
            s.p0 = disp(&mut rng);
            s.chi = chi(&mut rng);
            s.n_t = nt(&mut rng);
            s.a_t = at(&mut rng);
            s.theta_t = ang(&mut rng);
        }
    }
    Ok(s)
}

pub fn sample_group(
    group: u8,
    index: usize,
    seed: u64,
    ranges: &ParamRanges,
) -> Result<(PhysicalChannelSpec, QFunctionParams)> {
    let spec = sample_group_spec(group, index, seed, ranges)?;
    let p = process_from_physical(&spec, DEFAULT_T)?;
    Ok((spec, p))
}
