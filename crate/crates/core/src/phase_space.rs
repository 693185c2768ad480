//! Output-plane binning, output Q-function moments and the complex Gaussian
//! integral.
//!
//! Quadratures follow `z = (x + ip)/√2`, so the vacuum Q function has
//! covariance `1/2` in `(z_r, z_i)`.

use nalgebra::{Matrix2, SymmetricEigen, Vector2};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::{c, cr, sigma_x, Mat2c, Vec2c, C64};
use crate::model::QFunctionParams;

fn is_zero(z: &C64) -> bool {
    *z == C64::new(0.0, 0.0)
}

/// Uniform `M × M` binning of the square `center + [-E, E]²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpaceGrid {
    #[serde(rename = "M")]
    pub m: usize,
    pub extent: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub center: C64,
}

impl Default for PhaseSpaceGrid {
    fn default() -> Self {
        PhaseSpaceGrid {
            m: 20,
            extent: 5.0,
            center: cr(0.0),
        }
    }
}

pub fn make_grid(m: usize, extent: f64) -> Result<PhaseSpaceGrid> {
    PhaseSpaceGrid::centered(m, extent, cr(0.0))
}

impl PhaseSpaceGrid {
    pub fn centered(m: usize, extent: f64, center: C64) -> Result<PhaseSpaceGrid> {
        if m < 2 {
            return Err(Error::InvalidInput(format!("grid needs M >= 2, got {m}")));
        }
        if !(extent > 0.0 && extent.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "grid extent must be positive, got {extent}"
            )));
        }
        Ok(PhaseSpaceGrid { m, extent, center })
    }

    pub fn k(&self) -> usize {
        self.m * self.m
    }

    pub fn bin_width(&self) -> f64 {
        2.0 * self.extent / self.m as f64
    }

    pub fn bin_area(&self) -> f64 {
        self.bin_width().powi(2)
    }

    /// Center of bin `k = m·M + n`, where `m` indexes `z_r` and `n` indexes `z_i`.
    pub fn bin_center(&self, k: usize) -> C64 {
        let h = self.bin_width();
        let (mi, ni) = (k / self.m, k % self.m);
        self.center
            + c(
                -self.extent + (mi as f64 + 0.5) * h,
                -self.extent + (ni as f64 + 0.5) * h,
            )
    }

    pub fn bin_centers(&self) -> Vec<C64> {
        (0..self.k()).map(|k| self.bin_center(k)).collect()
    }

    /// Bin index containing `z`, if inside the grid.
    pub fn locate(&self, z: C64) -> Option<usize> {
        let h = self.bin_width();
        let u = (z.re - self.center.re + self.extent) / h;
        let v = (z.im - self.center.im + self.extent) / h;
        if !(u >= 0.0 && v >= 0.0) {
            return None;
        }
        let (mi, ni) = (u.floor() as usize, v.floor() as usize);
        if mi >= self.m || ni >= self.m {
            return None;
        }
        Some(mi * self.m + ni)
    }
}

/// Which grid each input's output is binned on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridLayout {
    /// One fixed grid for all inputs.
    Shared(PhaseSpaceGrid),
    /// Per-input grid centered on the output mean with half-width
    /// `n_sigma` times the largest output standard deviation.
    Windowed { m: usize, n_sigma: f64 },
}

impl Default for GridLayout {
    fn default() -> Self {
        GridLayout::Shared(PhaseSpaceGrid::default())
    }
}

impl GridLayout {
    pub fn m(&self) -> usize {
        match self {
            GridLayout::Shared(g) => g.m,
            GridLayout::Windowed { m, .. } => *m,
        }
    }

    pub fn k(&self) -> usize {
        self.m() * self.m()
    }

    pub fn grid_for(&self, p: &QFunctionParams, alpha: C64) -> Result<PhaseSpaceGrid> {
        match self {
            GridLayout::Shared(g) => Ok(*g),
            GridLayout::Windowed { m, n_sigma } => {
                let mo = output_gaussian_moments(p, alpha)?;
                let sigma = mo.cov.symmetric_eigenvalues().max().sqrt();
                PhaseSpaceGrid::centered(*m, n_sigma * sigma, mo.mean_z())
            }
        }
    }

    pub fn grids(&self, p: &QFunctionParams, inputs: &[C64]) -> Result<Vec<PhaseSpaceGrid>> {
        inputs.iter().map(|&a| self.grid_for(p, a)).collect()
    }
}

/// Output Q function at fixed input, `log Q(r) = -½ rᵀPr + ℓᵀr + c` with
/// `r = (z_r, z_i)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputMoments {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub precision: Matrix2<f64>,
    pub linear: Vector2<f64>,
    pub constant: f64,
    /// `∫ Q d²z / π` over the whole plane.
    pub amplitude: f64,
}

impl OutputMoments {
    pub fn mean_z(&self) -> C64 {
        c(self.mean[0], self.mean[1])
    }

    pub fn log_q(&self, z: C64) -> f64 {
        let r = Vector2::new(z.re, z.im);
        -0.5 * r.dot(&(self.precision * r)) + self.linear.dot(&r) + self.constant
    }
}

/// `T` with `(z, z*)ᵀ = T (z_r, z_i)ᵀ`.
fn t_map() -> Mat2c {
    Mat2c::new(cr(1.0), c(0.0, 1.0), cr(1.0), c(0.0, -1.0))
}

/// Linear coefficient `ℓ` of the output exponent in `(z_r, z_i)`.
pub fn z_linear_term(p: &QFunctionParams, alpha: C64) -> Vector2<f64> {
    let t = t_map();
    let ab = Vec2c::new(alpha, alpha.conj());
    let lin_c = (ab.adjoint() * p.a2_block() * t) * cr(-2.0) + p.b2_pair().adjoint() * t;
    Vector2::new(lin_c[(0, 0)].re, lin_c[(0, 1)].re)
}

/// Precision `P` of the output exponent in `(z_r, z_i)`; depends on `a2, c2` only.
pub fn z_precision(p: &QFunctionParams) -> Matrix2<f64> {
    let t = t_map();
    let prec = (t.adjoint() * p.a3_block() * t).map(|z| 2.0 * z.re);
    0.5 * (prec + prec.transpose())
}

pub fn output_gaussian_moments(p: &QFunctionParams, alpha: C64) -> Result<OutputMoments> {
    let ab = Vec2c::new(alpha, alpha.conj());
    let prec = z_precision(p);
    let linear = z_linear_term(p, alpha);
    let constant = (-(ab.adjoint() * p.a1_block() * ab)[(0, 0)]
        + (p.b1_pair().adjoint() * ab)[(0, 0)])
        .re
        + p.c0;
    let det = prec.determinant();
    if !(prec[(0, 0)] > 0.0 && det > 0.0) {
        return Err(Error::NonNormalizable);
    }
    let cov = prec.try_inverse().ok_or(Error::NonNormalizable)?;
    let mean = cov * linear;
    let amplitude = 2.0 / det.sqrt() * (0.5 * linear.dot(&mean) + constant).exp();
    Ok(OutputMoments {
        mean,
        cov,
        precision: prec,
        linear,
        constant,
        amplitude,
    })
}

/// Midpoint-rule bin masses of the output Q function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinProbabilities {
    pub p: Vec<f64>,
    pub p_tilde: Vec<f64>,
    pub gamma: f64,
}

impl BinProbabilities {
    pub fn write_csv<W: std::io::Write>(&self, grid: &PhaseSpaceGrid, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["k", "z_r", "z_i", "p", "p_tilde"])?;
        for k in 0..self.p.len() {
            let z = grid.bin_center(k);
            wr.write_record(&[
                k.to_string(),
                z.re.to_string(),
                z.im.to_string(),
                self.p[k].to_string(),
                self.p_tilde[k].to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub fn bin_probabilities(
    p: &QFunctionParams,
    alpha: C64,
    grid: &PhaseSpaceGrid,
) -> Result<BinProbabilities> {
    let mo = output_gaussian_moments(p, alpha)?;
    bin_probabilities_from_moments(&mo, grid)
}

pub fn bin_probabilities_from_moments(
    mo: &OutputMoments,
    grid: &PhaseSpaceGrid,
) -> Result<BinProbabilities> {
    let logs: Vec<f64> = (0..grid.k()).map(|k| mo.log_q(grid.bin_center(k))).collect();
    let lmax = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - lmax).exp()).collect();
    let s: f64 = w.iter().sum();
    let scale = grid.bin_area() / PI;
    let gamma = lmax.exp() * s * scale;
    if !(gamma >= 1e-300) || !s.is_finite() {
        return Err(Error::EmptyGrid(gamma));
    }
    let p = logs.iter().map(|l| l.exp() * scale).collect();
    let p_tilde = w.iter().map(|x| x / s).collect();
    Ok(BinProbabilities { p, p_tilde, gamma })
}

/// `∫ d²β/π exp(-β̄†Mβ̄ + vᵀβ̄)` with `β̄ = (β, β*)ᵀ`.
///
/// Only `M00 + M11`, `M01` and `M10` enter the exponent, so the diagonal is
/// balanced before the closed form is applied.
pub fn gaussian_integral(m: &Mat2c, v: &Vec2c) -> Result<C64> {
    let d = (m[(0, 0)] + m[(1, 1)]) * 0.5;
    let mb = Mat2c::new(d, m[(0, 1)], m[(1, 0)], d);
    // convergence: real part of the form must be positive definite in (βr, βi)
    let t = t_map();
    let h = (mb + mb.adjoint()) * cr(0.5);
    let hr = (t.adjoint() * h * t).map(|z| z.re);
    let eig = SymmetricEigen::new(0.5 * (hr + hr.transpose()));
    if eig.eigenvalues.min() <= 0.0 {
        return Err(Error::Divergent);
    }
    let det = mb.determinant();
    let inv = mb.try_inverse().ok_or(Error::Divergent)?;
    let expo = (v.transpose() * inv * sigma_x() * v)[(0, 0)] / 4.0;
    Ok(expo.exp() / (det.sqrt() * 2.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::beam_splitter_process;

    fn vacuum_channel() -> QFunctionParams {
        QFunctionParams {
            a2: 1.0,
            ..Default::default()
        }
    }

    #[test]
    fn two_by_two_centers() {
        let g = make_grid(2, 1.0).unwrap();
        let cs = g.bin_centers();
        for z in [c(-0.5, -0.5), c(-0.5, 0.5), c(0.5, -0.5), c(0.5, 0.5)] {
            assert!(cs.iter().any(|w| (w - z).norm() < 1e-15));
        }
    }

    #[test]
    fn default_grid_shape() {
        let g = make_grid(20, 5.0).unwrap();
        assert_eq!(g.k(), 400);
        assert!((g.bin_area() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn odd_grid_has_center_bin() {
        let g = make_grid(3, 3.0).unwrap();
        assert!(g.bin_center(4).norm() < 1e-15);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(make_grid(1, 1.0).is_err());
        assert!(make_grid(4, 0.0).is_err());
    }

    #[test]
    fn locate_inverts_centers() {
        let g = PhaseSpaceGrid::centered(7, 2.0, c(0.3, -1.0)).unwrap();
        for k in 0..g.k() {
            assert_eq!(g.locate(g.bin_center(k)), Some(k));
        }
        assert_eq!(g.locate(c(10.0, 0.0)), None);
    }

    #[test]
    fn beam_splitter_moments() {
        let th = 0.6;
        let p = beam_splitter_process(th);
        let alpha = c(0.8, -0.3);
        let mo = output_gaussian_moments(&p, alpha).unwrap();
        // transpose convention: argument α probes the physical input α*
        let expected = alpha.conj() * th.cos();
        assert!((mo.mean_z() - expected).norm() < 1e-14);
        assert!((mo.cov - Matrix2::identity() * 0.5).norm() < 1e-14);
        assert!((mo.amplitude - 1.0).abs() < 1e-14);
    }

    #[test]
    fn full_loss_moments() {
        let mo = output_gaussian_moments(&vacuum_channel(), c(1.5, 2.0)).unwrap();
        assert!(mo.mean.norm() < 1e-15);
        assert!((mo.cov - Matrix2::identity() * 0.5).norm() < 1e-15);
    }

    #[test]
    fn moments_log_q_matches_matrix_form() {
        let p = QFunctionParams {
            a1: 0.7,
            a2: 1.2,
            c1: c(0.1, 0.2),
            c2: c(-0.2, 0.1),
            g1: c(-0.5, 0.1),
            g2: c(0.2, -0.3),
            b1: c(0.3, 0.1),
            b2: c(-0.4, 0.6),
            c0: 0.2,
        };
        let alpha = c(0.4, -0.9);
        let mo = output_gaussian_moments(&p, alpha).unwrap();
        for z in [c(0.0, 0.0), c(1.0, -2.0), c(-0.3, 0.7)] {
            assert!((mo.log_q(z) - p.log_q_value(alpha, z)).abs() < 1e-13);
        }
    }

    #[test]
    fn non_normalizable_output() {
        let p = QFunctionParams {
            a2: 1.0,
            c2: cr(0.6),
            ..Default::default()
        };
        assert!(matches!(
            output_gaussian_moments(&p, cr(0.0)),
            Err(Error::NonNormalizable)
        ));
    }

    #[test]
    fn vacuum_bin_mass() {
        let g = make_grid(20, 5.0).unwrap();
        let bp = bin_probabilities(&vacuum_channel(), cr(0.0), &g).unwrap();
        assert!((bp.gamma - 1.0).abs() < 1e-3);
        assert!((bp.p_tilde.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_output_has_grid_symmetry() {
        for m in [6, 7] {
            let g = make_grid(m, 3.0).unwrap();
            let bp = bin_probabilities(&vacuum_channel(), cr(0.0), &g).unwrap();
            for mi in 0..m {
                for ni in 0..m {
                    let k = mi * m + ni;
                    let k2 = (m - 1 - mi) * m + ni;
                    let k3 = ni * m + mi;
                    assert!((bp.p_tilde[k] - bp.p_tilde[k2]).abs() < 1e-15);
                    assert!((bp.p_tilde[k] - bp.p_tilde[k3]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn beam_splitter_peak_bin() {
        let g = make_grid(20, 5.0).unwrap();
        let bp = bin_probabilities(&beam_splitter_process(0.0), cr(2.0), &g).unwrap();
        let kmax = (0..g.k())
            .max_by(|&a, &b| bp.p[a].total_cmp(&bp.p[b]))
            .unwrap();
        let best = g.bin_center(kmax);
        let nearest = (0..g.k())
            .map(|k| (g.bin_center(k) - cr(2.0)).norm())
            .fold(f64::INFINITY, f64::min);
        assert!(((best - cr(2.0)).norm() - nearest).abs() < 1e-12);
    }

    #[test]
    fn gamma_converges_with_resolution() {
        let p = beam_splitter_process(0.3);
        let alpha = c(0.5, 0.5);
        let mo = output_gaussian_moments(&p, alpha).unwrap();
        let sd = mo.cov.symmetric_eigenvalues().max().sqrt();
        let g = PhaseSpaceGrid::centered(40, 6.0 * sd, mo.mean_z()).unwrap();
        let bp = bin_probabilities(&p, alpha, &g).unwrap();
        assert!((bp.gamma / mo.amplitude - 1.0).abs() < 1e-3);
    }

    #[test]
    fn windowed_layout_centers_on_mean() {
        let p = beam_splitter_process(0.2);
        let lay = GridLayout::Windowed { m: 10, n_sigma: 2.0 };
        let g = lay.grid_for(&p, c(1.0, 1.0)).unwrap();
        assert!((g.center - c(1.0, -1.0) * 0.2f64.cos()).norm() < 1e-14);
        assert!((g.extent - 2.0 * 0.5f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn gaussian_integral_vacuum() {
        let m = Mat2c::identity() * cr(0.5);
        let v = gaussian_integral(&m, &Vec2c::zeros()).unwrap();
        assert!((v - cr(1.0)).norm() < 1e-15);
    }

    #[test]
    fn gaussian_integral_scalar_form() {
        // a = 1, b1 = b2 = β̄, c1 = c2 = 0  →  e^{β̄²}
        let beta = c(0.3, -0.4);
        let m = Mat2c::identity() * cr(0.5);
        let v = Vec2c::new(beta, beta);
        let got = gaussian_integral(&m, &v).unwrap();
        assert!((got - (beta * beta).exp()).norm() < 1e-14);
    }

    #[test]
    fn gaussian_integral_divergent() {
        let m = Mat2c::new(cr(0.5), cr(-0.8), cr(-0.8), cr(0.5));
        assert!(matches!(
            gaussian_integral(&m, &Vec2c::zeros()),
            Err(Error::Divergent)
        ));
    }

    #[test]
    fn grid_json_keys() {
        let s = serde_json::to_string(&make_grid(20, 5.0).unwrap()).unwrap();
        assert_eq!(s, "{\"M\":20,\"extent\":5.0}");
    }
}
