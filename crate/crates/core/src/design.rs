//! Input-state design: the process-independent geometric objective, its
//! box-constrained multi-start minimization, and truth-informed designs that
//! minimize the asymptotic MSE formulas directly.

use std::sync::OnceLock;

use nalgebra::{DMatrix, SMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{derive_seed, Exec};
use crate::linalg::{c, C64};
use crate::model::{build_row_v, QFunctionParams, N_EXTENDED, N_PARAMS};
use crate::mse::{condition_number, mse_formula_nontp, mse_formula_tp};
use crate::nelder_mead::{nelder_mead, NmOptions};
use crate::phase_space::{GridLayout, PhaseSpaceGrid};

/// Gram matrices with an equilibrated condition number above this are
/// treated as singular by the design objective.
pub const DESIGN_COND_THRESHOLD: f64 = 1e12;

pub const DEFAULT_STARTS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    Geometric,
    Random,
    BestNontp,
    BestTp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BestMode {
    NonTp,
    Tp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDesign {
    pub amplitudes: Vec<C64>,
    #[serde(rename = "L")]
    pub l: f64,
    pub objective: f64,
    pub strategy: Strategy,
    pub starts: usize,
    pub evaluations: usize,
    pub seed: u64,
}

impl InputDesign {
    pub fn j(&self) -> usize {
        self.amplitudes.len()
    }

    /// Cauchy–Schwarz bound on the LI MSE at `n` shots per input. Only
    /// meaningful for geometric objectives.
    pub fn bound(&self, n: f64) -> f64 {
        self.j() as f64 * n * self.objective
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["j", "alpha_r", "alpha_i"])?;
        for (j, a) in self.amplitudes.iter().enumerate() {
            wr.write_record([j.to_string(), a.re.to_string(), a.im.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignOptions {
    pub starts: usize,
    pub seed: u64,
    pub nm: NmOptions,
    pub exec: Exec,
    /// Extra start evaluated after the Latin-hypercube ones.
    pub warm_start: Option<Vec<C64>>,
}

impl Default for DesignOptions {
    fn default() -> Self {
        DesignOptions {
            starts: DEFAULT_STARTS,
            seed: 0,
            nm: NmOptions::default(),
            exec: Exec::default(),
            warm_start: None,
        }
    }
}

/// Monomials `(1, x, y, |w|², Re w², Im w²)` of `w = x + iy`. Every design
/// row entry is a bilinear combination of these in `α` and `z`.
fn monomials(w: C64) -> [f64; 6] {
    [1.0, w.re, w.im, w.norm_sqr(), w.re * w.re - w.im * w.im, 2.0 * w.re * w.im]
}

type RowMap = SMatrix<f64, N_EXTENDED, 36>;

/// `v(α, z) = C (f(α) ⊗ h(z))`, recovered once by least squares on random
/// points.
fn row_map() -> &'static RowMap {
    static MAP: OnceLock<RowMap> = OnceLock::new();
    MAP.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let n = 120;
        let mut phi = DMatrix::zeros(n, 36);
        let mut targets = DMatrix::zeros(n, N_EXTENDED);
        for r in 0..n {
            let a = c(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let z = c(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let (f, h) = (monomials(a), monomials(z));
            for i in 0..6 {
                for l in 0..6 {
                    phi[(r, i * 6 + l)] = f[i] * h[l];
                }
            }
            for (cc, x) in build_row_v(a, z).iter().enumerate() {
                targets[(r, cc)] = *x;
            }
        }
        let sol = phi
            .svd(true, true)
            .solve(&targets, 1e-12)
            .expect("monomial fit");
        let mut m = RowMap::zeros();
        for i in 0..36 {
            for cc in 0..N_EXTENDED {
                // entries are small rationals; snap away the fit noise
                m[(cc, i)] = (sol[(i, cc)] * 4.0).round() / 4.0;
            }
        }
        m
    })
}

fn outer_sum(points: impl Iterator<Item = C64>) -> SMatrix<f64, 6, 6> {
    let mut s = SMatrix::<f64, 6, 6>::zeros();
    for w in points {
        let f = SMatrix::<f64, 6, 1>::from(monomials(w));
        s += f * f.transpose();
    }
    s
}

/// Gram matrix `VᵀV` of a design on a shared grid in `O(J + K)`.
pub fn design_gram(amps: &[C64], grid: &PhaseSpaceGrid) -> DMatrix<f64> {
    let h = outer_sum(grid.bin_centers().into_iter());
    gram_from(amps, &h)
}

fn gram_from(amps: &[C64], h: &SMatrix<f64, 6, 6>) -> DMatrix<f64> {
    let f = outer_sum(amps.iter().copied());
    let mut kron = SMatrix::<f64, 36, 36>::zeros();
    for a in 0..6 {
        for b in 0..6 {
            kron.fixed_view_mut::<6, 6>(a * 6, b * 6).copy_from(&(h * f[(a, b)]));
        }
    }
    let cm = row_map();
    let g = cm * kron * cm.transpose();
    DMatrix::from_fn(N_EXTENDED, N_EXTENDED, |i, j| g[(i, j)])
}

fn leading_trace(g: &DMatrix<f64>) -> f64 {
    let n = g.nrows();
    let d: Vec<f64> = (0..n).map(|i| g[(i, i)].max(0.0).sqrt()).collect();
    if d.iter().any(|&x| x == 0.0) {
        return f64::INFINITY;
    }
    let gs = DMatrix::from_fn(n, n, |a, b| g[(a, b)] / (d[a] * d[b]));
    if !(condition_number(&gs) <= DESIGN_COND_THRESHOLD) {
        return f64::INFINITY;
    }
    let Some(ch) = gs.cholesky() else {
        return f64::INFINITY;
    };
    let inv = ch.inverse();
    (0..N_PARAMS).map(|i| inv[(i, i)] / (d[i] * d[i])).sum()
}

/// `Tr` of the leading 14×14 block of `(VᵀV)⁻¹`; `+∞` for singular designs.
pub fn geometric_objective(amps: &[C64], grid: &PhaseSpaceGrid) -> f64 {
    leading_trace(&design_gram(amps, grid))
}

fn to_amps(x: &[f64]) -> Vec<C64> {
    x.chunks(2).map(|p| c(p[0], p[1])).collect()
}

fn to_coords(amps: &[C64]) -> Vec<f64> {
    amps.iter().flat_map(|a| [a.re, a.im]).collect()
}

/// `n` Latin-hypercube points in `[-l, l]^dim`.
fn latin_hypercube(n: usize, dim: usize, l: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = vec![vec![0.0; dim]; n];
    for d in 0..dim {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        for (s, p) in pts.iter_mut().enumerate() {
            let u: f64 = rng.random();
            p[d] = -l + 2.0 * l * (perm[s] as f64 + u) / n as f64;
        }
    }
    pts
}

fn check_box(j: usize, l: f64) -> Result<()> {
    if j == 0 || !(l > 0.0) || !l.is_finite() {
        return Err(Error::InvalidInput(format!(
            "need J >= 1 and L > 0 (got J = {j}, L = {l})"
        )));
    }
    Ok(())
}

/// Runs every start through the bounded simplex search and keeps the best,
/// ties going to the lower start index.
fn multistart<F>(
    j: usize,
    l: f64,
    opts: &DesignOptions,
    strategy: Strategy,
    f: F,
) -> Result<InputDesign>
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    let dim = 2 * j;
    let mut starts = latin_hypercube(opts.starts, dim, l, derive_seed(opts.seed, &[0x4c48]));
    if let Some(w) = &opts.warm_start {
        if w.len() != j {
            return Err(Error::InvalidInput(format!(
                "warm start has {} states, expected {j}",
                w.len()
            )));
        }
        let mut x = to_coords(w);
        for v in &mut x {
            *v = v.clamp(-l, l);
        }
        starts.push(x);
    }
    let lo = vec![-l; dim];
    let hi = vec![l; dim];
    let results = opts
        .exec
        .map(starts, |x0| nelder_mead(&f, &x0, &lo, &hi, &opts.nm));
    let evaluations = results.iter().map(|r| r.evals).sum();
    let n_starts = results.len();
    let best = results
        .into_iter()
        .filter(|r| r.f.is_finite())
        .reduce(|a, b| if b.f < a.f { b } else { a })
        .ok_or(Error::AllStartsSingular)?;
    Ok(InputDesign {
        amplitudes: to_amps(&best.x),
        l,
        objective: best.f,
        strategy,
        starts: n_starts,
        evaluations,
        seed: opts.seed,
    })
}

/// Minimizes the geometric objective over `J` amplitudes in the box
/// `[-L, L]²`.
pub fn optimize_geometric(
    j: usize,
    l: f64,
    grid: &PhaseSpaceGrid,
    opts: &DesignOptions,
) -> Result<InputDesign> {
    check_box(j, l)?;
    if j < 6 {
        return Err(Error::InvalidInput(format!(
            "geometric designs need J >= 6 (got {j})"
        )));
    }
    let h = outer_sum(grid.bin_centers().into_iter());
    multistart(j, l, opts, Strategy::Geometric, |x| {
        leading_trace(&gram_from(&to_amps(x), &h))
    })
}

/// Minimizes the asymptotic MSE formula of the given truth.
#[allow(clippy::too_many_arguments)]
pub fn optimize_best_informed(
    truth: &QFunctionParams,
    mode: BestMode,
    j: usize,
    l: f64,
    layout: &GridLayout,
    n: f64,
    opts: &DesignOptions,
) -> Result<InputDesign> {
    check_box(j, l)?;
    let t = truth.tp_params();
    let (strategy, objective): (Strategy, Box<dyn Fn(&[C64]) -> f64 + Sync + Send>) = match mode {
        BestMode::NonTp => (
            Strategy::BestNontp,
            Box::new(move |a: &[C64]| {
                mse_formula_nontp(truth, a, layout, n).map_or(f64::INFINITY, |m| m.total)
            }),
        ),
        BestMode::Tp => (
            Strategy::BestTp,
            Box::new(move |a: &[C64]| {
                mse_formula_tp(&t, a, layout, n).map_or(f64::INFINITY, |m| m.total)
            }),
        ),
    };
    multistart(j, l, opts, strategy, |x| objective(&to_amps(x)))
}

/// Uniform random amplitudes in the box; the objective slot holds the
/// geometric objective on `grid`.
pub fn random_design(j: usize, l: f64, grid: &PhaseSpaceGrid, seed: u64) -> Result<InputDesign> {
    check_box(j, l)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amplitudes: Vec<C64> = (0..j)
        .map(|_| c(rng.random_range(-l..=l), rng.random_range(-l..=l)))
        .collect();
    Ok(InputDesign {
        objective: geometric_objective(&amplitudes, grid),
        amplitudes,
        l,
        strategy: Strategy::Random,
        starts: 0,
        evaluations: 1,
        seed,
    })
}

/// Amplitudes sorted by (real, imaginary).
pub fn canonicalize(design: &InputDesign) -> InputDesign {
    let mut d = design.clone();
    d.amplitudes
        .sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    d
}

/// Appends the candidate point that lowers the geometric objective most,
/// scanning a `steps × steps` lattice of the box.
pub fn greedy_extension(amps: &[C64], l: f64, grid: &PhaseSpaceGrid, steps: usize) -> Vec<C64> {
    let h = outer_sum(grid.bin_centers().into_iter());
    let mut best = (f64::INFINITY, c(0.0, 0.0));
    let steps = steps.max(2);
    for a in 0..steps {
        for b in 0..steps {
            let cand = c(
                -l + 2.0 * l * a as f64 / (steps - 1) as f64,
                -l + 2.0 * l * b as f64 / (steps - 1) as f64,
            );
            let mut trial = amps.to_vec();
            trial.push(cand);
            let v = leading_trace(&gram_from(&trial, &h));
            if v < best.0 {
                best = (v, cand);
            }
        }
    }
    let mut out = amps.to_vec();
    out.push(best.1);
    out
}
