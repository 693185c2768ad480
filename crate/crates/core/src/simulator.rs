//! Heterodyne measurement simulation: draws from the output Q distribution,
//! conditioned on the grid and binned into counts.

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{derive_seed, Exec};
use crate::linalg::{c, C64};
use crate::model::QFunctionParams;
use crate::phase_space::{
    bin_probabilities_from_moments, output_gaussian_moments, GridLayout, PhaseSpaceGrid,
};

/// Minimum acceptable probability that a draw lands on the grid.
pub const MIN_ACCEPTANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Continuous Gaussian draws binned by location, rejecting off-grid draws.
    #[default]
    Continuous,
    /// Multinomial draws directly from the normalized midpoint bin masses.
    Binned,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn sample_output_counts(
    p: &QFunctionParams,
    alpha: C64,
    n: u64,
    grid: &PhaseSpaceGrid,
    seed: u64,
) -> Result<Vec<u64>> {
    sample_output_counts_with(p, alpha, n, grid, seed, SamplingMode::Continuous)
}

pub fn sample_output_counts_with(
    p: &QFunctionParams,
    alpha: C64,
    n: u64,
    grid: &PhaseSpaceGrid,
    seed: u64,
    mode: SamplingMode,
) -> Result<Vec<u64>> {
    if n == 0 {
        return Err(Error::InvalidInput("N must be at least 1".into()));
    }
    let mo = output_gaussian_moments(p, alpha)?;
    let bp = bin_probabilities_from_moments(&mo, grid)?;
    let acceptance = (bp.gamma / mo.amplitude).min(1.0);
    if acceptance < MIN_ACCEPTANCE {
        return Err(Error::RejectionOverflow(acceptance));
    }
    let mut rng = rng(seed);
    let mut counts = vec![0u64; grid.k()];
    match mode {
        SamplingMode::Binned => {
            let mut remaining = n;
            let mut mass_left = 1.0;
            for (k, &pk) in bp.p_tilde.iter().enumerate() {
                if remaining == 0 {
                    break;
                }
                let q = if mass_left > 0.0 {
                    (pk / mass_left).clamp(0.0, 1.0)
                } else {
                    1.0
                };
                let draw = Binomial::new(remaining, q)
                    .map_err(|e| Error::InvalidInput(e.to_string()))?
                    .sample(&mut rng);
                counts[k] = draw;
                remaining -= draw;
                mass_left -= pk;
            }
            // rounding can leave a handful of draws; they go to the last bin with mass
            if remaining > 0 {
                let k = (0..grid.k()).rev().find(|&k| bp.p_tilde[k] > 0.0).unwrap_or(0);
                counts[k] += remaining;
            }
        }
        SamplingMode::Continuous => {
            let chol = mo.cov.cholesky().ok_or(Error::NonNormalizable)?.l();
            let budget = ((n as f64 / acceptance) * 20.0).ceil() as u64 + 10_000;
            let mut accepted = 0;
            let mut drawn = 0u64;
            while accepted < n {
                if drawn > budget {
                    return Err(Error::RejectionOverflow(accepted as f64 / drawn as f64));
                }
                drawn += 1;
                let xi = Vector2::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                );
                let r = mo.mean + chol * xi;
                if let Some(k) = grid.locate(c(r[0], r[1])) {
                    counts[k] += 1;
                    accepted += 1;
                }
            }
        }
    }
    Ok(counts)
}

/// Raw (unbinned) draws from the output Q distribution; used for moment checks.
pub fn sample_output_points(p: &QFunctionParams, alpha: C64, n: usize, seed: u64) -> Result<Vec<C64>> {
    let mo = output_gaussian_moments(p, alpha)?;
    let chol = mo.cov.cholesky().ok_or(Error::NonNormalizable)?.l();
    let mut rng = rng(seed);
    Ok((0..n)
        .map(|_| {
            let xi = Vector2::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            );
            let r = mo.mean + chol * xi;
            c(r[0], r[1])
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub inputs: Vec<C64>,
    #[serde(rename = "N")]
    pub n: u64,
    pub gamma: Vec<f64>,
    pub counts: Vec<Vec<u64>>,
    pub grids: Vec<PhaseSpaceGrid>,
}

impl MeasurementRecord {
    pub fn j(&self) -> usize {
        self.inputs.len()
    }

    /// Per-input relative frequencies `ν̃_jk = n_jk / N`.
    pub fn frequencies(&self) -> Vec<Vec<f64>> {
        let n = self.n as f64;
        self.counts
            .iter()
            .map(|row| row.iter().map(|&x| x as f64 / n).collect())
            .collect()
    }

    pub fn write_counts_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["j", "k", "n"])?;
        for (j, row) in self.counts.iter().enumerate() {
            for (k, x) in row.iter().enumerate() {
                wr.write_record(&[j.to_string(), k.to_string(), x.to_string()])?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOptions {
    pub mode: SamplingMode,
    pub exec: Exec,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        ExperimentOptions {
            mode: SamplingMode::Continuous,
            exec: Exec::default(),
        }
    }
}

pub fn run_experiment(
    p: &QFunctionParams,
    inputs: &[C64],
    n: u64,
    layout: &GridLayout,
    seed: u64,
    opts: ExperimentOptions,
) -> Result<MeasurementRecord> {
    if inputs.is_empty() {
        return Err(Error::InvalidInput("need at least one input state".into()));
    }
    let grids = layout.grids(p, inputs)?;
    let per_input = opts.exec.map_range(inputs.len(), |j| -> Result<(f64, Vec<u64>)> {
        let mo = output_gaussian_moments(p, inputs[j])?;
        let gamma = bin_probabilities_from_moments(&mo, &grids[j])?.gamma;
        let counts = sample_output_counts_with(
            p,
            inputs[j],
            n,
            &grids[j],
            derive_seed(seed, &[j as u64]),
            opts.mode,
        )?;
        Ok((gamma, counts))
    });
    let mut gamma = Vec::with_capacity(inputs.len());
    let mut counts = Vec::with_capacity(inputs.len());
    for r in per_input {
        let (g, cnt) = r?;
        gamma.push(g);
        counts.push(cnt);
    }
    Ok(MeasurementRecord {
        inputs: inputs.to_vec(),
        n,
        gamma,
        counts,
        grids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::cr;
    use crate::model::beam_splitter_process;
    use crate::phase_space::{bin_probabilities, make_grid};

    fn vacuum() -> QFunctionParams {
        QFunctionParams {
            a2: 1.0,
            ..Default::default()
        }
    }

    #[test]
    fn single_shot() {
        let g = make_grid(20, 5.0).unwrap();
        let counts = sample_output_counts(&vacuum(), cr(0.0), 1, &g, 3).unwrap();
        assert_eq!(counts.iter().filter(|&&x| x > 0).count(), 1);
        assert!(sample_output_counts(&vacuum(), cr(0.0), 0, &g, 3).is_err());
    }

    #[test]
    fn deterministic_in_seed() {
        let g = make_grid(20, 5.0).unwrap();
        let a = sample_output_counts(&vacuum(), cr(0.3), 1000, &g, 11).unwrap();
        let b = sample_output_counts(&vacuum(), cr(0.3), 1000, &g, 11).unwrap();
        let d = sample_output_counts(&vacuum(), cr(0.3), 1000, &g, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, d);
    }

    #[test]
    fn vacuum_frequencies_within_bands() {
        let g = make_grid(20, 5.0).unwrap();
        let n = 100_000u64;
        let bp = bin_probabilities(&vacuum(), cr(0.0), &g).unwrap();
        for mode in [SamplingMode::Continuous, SamplingMode::Binned] {
            let counts = sample_output_counts_with(&vacuum(), cr(0.0), n, &g, 5, mode).unwrap();
            assert_eq!(counts.iter().sum::<u64>(), n);
            for k in 0..g.k() {
                let mu = n as f64 * bp.p_tilde[k];
                let sd = (mu * (1.0 - bp.p_tilde[k])).sqrt().max(1.0);
                // midpoint masses differ from exact cell masses by O(h²) for continuous draws
                let slack = 0.02 * mu;
                assert!(
                    (counts[k] as f64 - mu).abs() <= 5.0 * sd + slack,
                    "bin {k}: {} vs {mu}",
                    counts[k]
                );
            }
        }
    }

    #[test]
    fn badly_placed_grid_overflows() {
        let g = PhaseSpaceGrid::centered(10, 0.5, cr(30.0)).unwrap();
        let r = sample_output_counts(&vacuum(), cr(0.0), 10, &g, 1);
        assert!(matches!(r, Err(Error::RejectionOverflow(_) | Error::EmptyGrid(_))));
    }

    #[test]
    fn raw_covariance_converges() {
        let p = beam_splitter_process(0.4);
        let pts = sample_output_points(&p, c(0.5, 0.2), 1_000_000, 9).unwrap();
        let n = pts.len() as f64;
        let mean = pts.iter().sum::<C64>() / n;
        let mut cov = [0.0; 3];
        for z in &pts {
            let d = z - mean;
            cov[0] += d.re * d.re / n;
            cov[1] += d.re * d.im / n;
            cov[2] += d.im * d.im / n;
        }
        assert!((cov[0] / 0.5 - 1.0).abs() < 0.02);
        assert!((cov[2] / 0.5 - 1.0).abs() < 0.02);
        assert!(cov[1].abs() < 0.01);
    }

    #[test]
    fn experiment_invariants() {
        let p = beam_splitter_process(0.0);
        let inputs: Vec<C64> = (0..6)
            .map(|j| C64::from_polar(1.0, j as f64 * std::f64::consts::PI / 3.0))
            .collect();
        let lay = GridLayout::Shared(make_grid(20, 5.0).unwrap());
        let rec = run_experiment(&p, &inputs, 1000, &lay, 42, ExperimentOptions::default())
            .unwrap();
        for (j, row) in rec.counts.iter().enumerate() {
            assert_eq!(row.iter().sum::<u64>(), 1000);
            assert!(rec.gamma[j] > 0.0);
            let g = &rec.grids[j];
            let mean = row
                .iter()
                .enumerate()
                .map(|(k, &x)| g.bin_center(k) * x as f64)
                .sum::<C64>()
                / 1000.0;
            assert!((mean - inputs[j].conj()).norm() < 0.1);
        }
    }

    #[test]
    fn experiment_independent_of_exec() {
        let p = beam_splitter_process(0.5);
        let inputs = [c(0.1, 0.2), c(-0.5, 0.4), c(0.9, -0.1)];
        let lay = GridLayout::Windowed { m: 8, n_sigma: 1.0 };
        let mk = |exec| {
            run_experiment(
                &p,
                &inputs,
                500,
                &lay,
                7,
                ExperimentOptions {
                    exec,
                    ..Default::default()
                },
            )
            .unwrap()
        };
        assert_eq!(mk(Exec::Sequential), mk(Exec::Parallel));
    }

    #[test]
    fn record_json_keys() {
        let rec = MeasurementRecord {
            inputs: vec![cr(1.0)],
            n: 2,
            gamma: vec![1.0],
            counts: vec![vec![1, 1]],
            grids: vec![make_grid(2, 1.0).unwrap()],
        };
        let s = serde_json::to_string(&rec).unwrap();
        assert!(s.starts_with("{\"inputs\":[[1.0,0.0]],\"N\":2,\"gamma\":[1.0],\"counts\":[[1,1]]"));
    }
}
