//! Box-constrained Nelder–Mead. Trial points are clamped into the box, which
//! keeps the simplex feasible without penalty terms.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmOptions {
    pub max_evals: usize,
    /// Stop when `|f_worst - f_best| <= ftol · max(|f_best|, 1e-300)`.
    pub ftol: f64,
    /// Initial simplex edge as a fraction of the box width.
    pub step: f64,
    /// Fresh simplices built around the optimum after convergence.
    pub restarts: usize,
    /// Evaluation budget for the closing compass search; 0 disables it.
    pub polish_evals: usize,
}

impl Default for NmOptions {
    fn default() -> Self {
        NmOptions {
            max_evals: 5_000,
            ftol: 1e-8,
            step: 0.1,
            restarts: 2,
            polish_evals: 4_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

fn clamp(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

pub fn nelder_mead<F>(f: F, x0: &[f64], lo: &[f64], hi: &[f64], opts: &NmOptions) -> NmResult
where
    F: Fn(&[f64]) -> f64,
{
    let mut evals = 0;
    let mut x = x0.to_vec();
    clamp(&mut x, lo, hi);
    let mut fx = f(&x);
    evals += 1;
    let mut converged = false;
    for _ in 0..=opts.restarts {
        let r = run(&f, &x, lo, hi, opts, opts.max_evals.saturating_sub(evals));
        evals += r.evals;
        let improved = r.f < fx;
        if r.f <= fx {
            x = r.x;
            fx = r.f;
        }
        converged = r.converged;
        if !improved || evals >= opts.max_evals {
            break;
        }
    }
    if opts.polish_evals > 0 && fx.is_finite() {
        let (xp, fp, used) = compass(&f, x, fx, lo, hi, opts.step, opts.polish_evals);
        x = xp;
        fx = fp;
        evals += used;
    }
    NmResult {
        x,
        f: fx,
        evals,
        converged,
    }
}

/// Coordinate pattern search with step halving. Simplex runs stall on box
/// faces where the optimum of these design problems usually sits; this
/// closes the remaining gap.
fn compass<F>(
    f: &F,
    mut x: Vec<f64>,
    mut fx: f64,
    lo: &[f64],
    hi: &[f64],
    step: f64,
    budget: usize,
) -> (Vec<f64>, f64, usize)
where
    F: Fn(&[f64]) -> f64,
{
    let mut h: Vec<f64> = lo.iter().zip(hi).map(|(l, u)| step * (u - l)).collect();
    let min_h: Vec<f64> = h.iter().map(|v| v * 1e-9).collect();
    let mut evals = 0;
    while evals < budget && h.iter().zip(&min_h).any(|(a, b)| a > b) {
        let mut moved = false;
        for i in 0..x.len() {
            for dir in [1.0, -1.0] {
                let old = x[i];
                let t = (old + dir * h[i]).clamp(lo[i], hi[i]);
                if t == old {
                    continue;
                }
                x[i] = t;
                let ft = f(&x);
                evals += 1;
                if ft < fx {
                    fx = ft;
                    moved = true;
                    break;
                }
                x[i] = old;
            }
        }
        if !moved {
            h.iter_mut().for_each(|v| *v *= 0.5);
        }
    }
    (x, fx, evals)
}

fn run<F>(f: &F, x0: &[f64], lo: &[f64], hi: &[f64], opts: &NmOptions, budget: usize) -> NmResult
where
    F: Fn(&[f64]) -> f64,
{
    let n = x0.len();
    let mut evals = 0;
    let eval = |p: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(p);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), eval(x0, &mut evals)));
    for i in 0..n {
        let mut p = x0.to_vec();
        let h = opts.step * (hi[i] - lo[i]);
        // step away from the nearer wall so the vertex stays distinct
        p[i] = if p[i] + h <= hi[i] { p[i] + h } else { p[i] - h };
        clamp(&mut p, lo, hi);
        let v = eval(&p, &mut evals);
        simplex.push((p, v));
    }
    // dimension-adaptive coefficients (Gao and Han) keep the simplex from
    // collapsing in 10+ dimensions
    let nf = n as f64;
    let (expand, contract, shrink) = if n > 2 {
        (1.0 + 2.0 / nf, 0.75 - 0.5 / nf, 1.0 - 1.0 / nf)
    } else {
        (2.0, 0.5, 0.5)
    };
    let mut converged = false;
    while evals < budget {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        if best.is_finite() && (worst - best).abs() <= opts.ftol * best.abs().max(1e-300) {
            converged = true;
            break;
        }
        let mut centroid = vec![0.0; n];
        for (p, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / n as f64;
            }
        }
        let along = |t: f64| {
            let mut p: Vec<f64> = centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| c + t * (c - w))
                .collect();
            clamp(&mut p, lo, hi);
            p
        };
        let xr = along(1.0);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = along(expand);
            let fe = eval(&xe, &mut evals);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < simplex[n].1 {
            let p = along(contract);
            let v = eval(&p, &mut evals);
            (p, v)
        } else {
            let p = along(-contract);
            let v = eval(&p, &mut evals);
            (p, v)
        };
        if fc < simplex[n].1.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        // shrink toward the best vertex
        let x_best = simplex[0].0.clone();
        for (p, v) in simplex.iter_mut().skip(1) {
            for (pi, bi) in p.iter_mut().zip(&x_best) {
                *pi = bi + shrink * (*pi - bi);
            }
            *v = eval(p, &mut evals);
        }
        let spread = simplex
            .iter()
            .flat_map(|(p, _)| p.iter().zip(&x_best).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if spread < 1e-14 {
            converged = true;
            break;
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, f) = simplex.swap_remove(0);
    NmResult {
        x,
        f,
        evals,
        converged,
    }
}
