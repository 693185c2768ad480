//! Strategy-comparison campaigns: generate processes, build designs,
//! simulate, reconstruct and compare against the asymptotic formulas.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::design::{
    optimize_best_informed, optimize_geometric, random_design, BestMode, DesignOptions,
    InputDesign,
};
use crate::error::{Error, Result};
use crate::exec::{derive_seed, Exec};
use crate::linalg::C64;
use crate::model::{QFunctionParams, N_PARAMS, N_TP_PARAMS};
use crate::mse::{mse_formula_nontp_on, mse_formula_tp_on, MseBreakdown};
use crate::nelder_mead::NmOptions;
use crate::phase_space::{make_grid, GridLayout, PhaseSpaceGrid};
use crate::process::{group_size, sample_group, ParamRanges, PhysicalChannelSpec};
use crate::reconstruction::{
    build_design_matrix, li_estimate, ml_estimate_nontp, ml_estimate_tp, BinnedData,
    EstimateReport, MlOptions,
};
use crate::simulator::{run_experiment, ExperimentOptions, SamplingMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyTag {
    #[serde(rename = "RML_TP")]
    RmlTp,
    #[serde(rename = "RML_NONTP")]
    RmlNonTp,
    #[serde(rename = "GML_NONTP")]
    GmlNonTp,
    #[serde(rename = "GML_TP")]
    GmlTp,
    #[serde(rename = "BML_TP")]
    BmlTp,
    #[serde(rename = "BML_NONTP")]
    BmlNonTp,
    #[serde(rename = "RLI")]
    Rli,
    #[serde(rename = "GLI")]
    Gli,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum DesignKind {
    Random,
    Geometric,
    Best(bool),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Recon {
    Li,
    Ml,
    MlTp,
}

impl StrategyTag {
    pub fn label(self) -> &'static str {
        match self {
            StrategyTag::RmlTp => "RML_TP",
            StrategyTag::RmlNonTp => "RML_NONTP",
            StrategyTag::GmlNonTp => "GML_NONTP",
            StrategyTag::GmlTp => "GML_TP",
            StrategyTag::BmlTp => "BML_TP",
            StrategyTag::BmlNonTp => "BML_NONTP",
            StrategyTag::Rli => "RLI",
            StrategyTag::Gli => "GLI",
        }
    }

    pub fn is_tp(self) -> bool {
        self.recon() == Recon::MlTp
    }

    fn kind(self) -> DesignKind {
        match self {
            StrategyTag::RmlTp | StrategyTag::RmlNonTp | StrategyTag::Rli => DesignKind::Random,
            StrategyTag::GmlNonTp | StrategyTag::GmlTp | StrategyTag::Gli => DesignKind::Geometric,
            StrategyTag::BmlTp => DesignKind::Best(true),
            StrategyTag::BmlNonTp => DesignKind::Best(false),
        }
    }

    fn recon(self) -> Recon {
        match self {
            StrategyTag::Rli | StrategyTag::Gli => Recon::Li,
            StrategyTag::RmlTp | StrategyTag::GmlTp | StrategyTag::BmlTp => Recon::MlTp,
            _ => Recon::Ml,
        }
    }
}

fn default_strategies() -> Vec<StrategyTag> {
    vec![
        StrategyTag::RmlTp,
        StrategyTag::RmlNonTp,
        StrategyTag::GmlNonTp,
        StrategyTag::BmlTp,
        StrategyTag::BmlNonTp,
    ]
}

fn default_group() -> u8 {
    3
}
fn default_j() -> usize {
    6
}
fn default_l() -> f64 {
    1.0
}
fn default_m() -> usize {
    20
}
fn default_extent() -> f64 {
    5.0
}
fn default_n_list() -> Vec<u64> {
    vec![1_000, 10_000]
}
fn default_reps() -> usize {
    30
}
fn default_one() -> usize {
    1
}
fn default_design_starts() -> usize {
    crate::design::DEFAULT_STARTS
}
fn default_bml_starts() -> usize {
    4
}
fn default_bml_evals() -> usize {
    1_500
}
fn default_ml_starts() -> usize {
    2
}
fn default_true() -> bool {
    true
}

/// Campaign description. Every field except the strategy roster has a
/// default, so `{}` is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_strategies")]
    pub strategies: Vec<StrategyTag>,
    #[serde(default = "default_group")]
    pub group: u8,
    /// 1-based process indices; defaults to the whole group.
    #[serde(default)]
    pub processes: Option<Vec<usize>>,
    #[serde(rename = "J", default = "default_j")]
    pub j: usize,
    #[serde(rename = "L", default = "default_l")]
    pub l: f64,
    #[serde(rename = "M", default = "default_m")]
    pub m: usize,
    #[serde(default = "default_extent")]
    pub extent: f64,
    /// Per-input windowed grids of half-width `window_sigma·σ` instead of the
    /// shared `[-extent, extent]²` grid.
    #[serde(default)]
    pub window_sigma: Option<f64>,
    #[serde(rename = "N", default = "default_n_list")]
    pub n: Vec<u64>,
    #[serde(default = "default_reps")]
    pub repetitions: usize,
    /// Fixed random designs per process for the R* strategies.
    #[serde(default = "default_one")]
    pub random_sets: usize,
    #[serde(default)]
    pub seed: u64,
    /// Divide MSEs by the parameter count (14 or 9).
    #[serde(default = "default_true")]
    pub normalize: bool,
    /// Which parameters the squared error is taken over.
    #[serde(default)]
    pub params: ParamSet,
    /// Record wall time per row. Off by default so outputs are reproducible
    /// byte for byte.
    #[serde(default)]
    pub timing: bool,
    #[serde(default = "default_design_starts")]
    pub design_starts: usize,
    #[serde(default = "default_bml_starts")]
    pub bml_starts: usize,
    #[serde(default = "default_bml_evals")]
    pub bml_max_evals: usize,
    #[serde(default = "default_ml_starts")]
    pub ml_starts: usize,
    #[serde(default)]
    pub sampling: SamplingMode,
    #[serde(default)]
    pub ranges: ParamRanges,
    #[serde(default)]
    pub exec: Exec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        let size = match group_size(self.group) {
            Some(s) => s,
            None => return bad(format!("unknown group {}", self.group)),
        };
        if let Some(ps) = &self.processes {
            if ps.is_empty() {
                return bad("process list is empty".into());
            }
            if self.group != 3 && ps.iter().any(|&p| p == 0 || p > size) {
                return bad(format!("group {} has processes 1..={size}", self.group));
            }
            if ps.contains(&0) {
                return bad("process indices are 1-based".into());
            }
        }
        if self.strategies.is_empty() {
            return bad("no strategies".into());
        }
        if self.j == 0 || self.n.is_empty() || self.n.contains(&0) {
            return bad("J and every N must be positive".into());
        }
        if self.repetitions == 0 || self.random_sets == 0 {
            return bad("repetitions and random_sets must be positive".into());
        }
        if !(self.l > 0.0) || !(self.extent > 0.0) || self.m < 2 {
            return bad("need L > 0, extent > 0, M >= 2".into());
        }
        if let Some(s) = self.window_sigma {
            if !(s > 0.0) {
                return bad("window_sigma must be positive".into());
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<GridLayout> {
        Ok(match self.window_sigma {
            Some(n_sigma) => GridLayout::Windowed { m: self.m, n_sigma },
            None => GridLayout::Shared(make_grid(self.m, self.extent)?),
        })
    }

    /// Shared grid used for the geometric objective.
    pub fn design_grid(&self) -> Result<PhaseSpaceGrid> {
        make_grid(self.m, self.extent)
    }

    pub fn process_indices(&self) -> Vec<usize> {
        match &self.processes {
            Some(p) => p.clone(),
            None => (1..=group_size(self.group).unwrap_or(1)).collect(),
        }
    }
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRow {
    pub strategy: StrategyTag,
    pub group: u8,
    pub process: usize,
    #[serde(rename = "J")]
    pub j: usize,
    #[serde(rename = "N")]
    pub n: u64,
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(with = "nan_as_null")]
    pub mse_empirical: f64,
    #[serde(with = "nan_as_null")]
    pub mse_formula: f64,
    #[serde(with = "nan_as_null")]
    pub stderr: f64,
    pub wall_time: f64,
    pub seed: u64,
    /// Successful reconstructions behind `mse_empirical`.
    pub samples: usize,
    /// Reconstructions that failed outright (excluded).
    pub failures: usize,
    /// Reconstructions that stopped at the iteration cap (kept).
    pub unconverged: usize,
    pub failure: Option<String>,
}

impl PartialEq for ResultRow {
    fn eq(&self, o: &Self) -> bool {
        let feq = |a: f64, b: f64| a == b || (a.is_nan() && b.is_nan());
        self.strategy == o.strategy
            && self.group == o.group
            && self.process == o.process
            && self.j == o.j
            && self.n == o.n
            && self.l == o.l
            && self.k == o.k
            && feq(self.mse_empirical, o.mse_empirical)
            && feq(self.mse_formula, o.mse_formula)
            && feq(self.stderr, o.stderr)
            && self.wall_time == o.wall_time
            && self.seed == o.seed
            && self.samples == o.samples
            && self.failures == o.failures
            && self.unconverged == o.unconverged
            && self.failure == o.failure
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignEntry {
    pub label: String,
    pub process: Option<usize>,
    pub design: InputDesign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessEntry {
    pub process: usize,
    pub spec: PhysicalChannelSpec,
    pub params: QFunctionParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignOutput {
    pub config: ExperimentConfig,
    pub processes: Vec<ProcessEntry>,
    pub designs: Vec<DesignEntry>,
    pub rows: Vec<ResultRow>,
}

// seed-derivation domains
const SEED_PROCESS: u64 = 1;
const SEED_RANDOM: u64 = 2;
const SEED_GEOMETRIC: u64 = 3;
const SEED_BEST: u64 = 4;
const SEED_SIM: u64 = 5;
const SEED_ML: u64 = 6;

struct Job {
    process: usize,
    pi: usize,
    strategy: StrategyTag,
    design: usize,
    n: u64,
    rep: usize,
}

/// Parameter set an MSE is measured on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSet {
    /// 9 TP parameters for TP estimators, all 14 otherwise.
    #[default]
    Native,
    /// The 9 TP parameters for every strategy.
    Tp,
    /// All 14 parameters for every strategy (TP estimates are completed).
    All,
}

impl ParamSet {
    fn uses_tp(self, tag: StrategyTag) -> bool {
        match self {
            ParamSet::Native => tag.is_tp(),
            ParamSet::Tp => true,
            ParamSet::All => false,
        }
    }
}

/// Positions of the TP parameters inside the 14-vector.
const TP_SLOTS: [usize; N_TP_PARAMS] = [1, 4, 5, 8, 9, 10, 11, 12, 13];

enum Outcome {
    Ok(f64),
    Unconverged(f64),
    Failed(String),
}

fn sq_error(
    tag: StrategyTag,
    set: ParamSet,
    truth: &QFunctionParams,
    est: &EstimateReport,
    normalize: bool,
) -> f64 {
    let (e, np) = if set.uses_tp(tag) {
        (est.tp_vector().squared_error(&truth.tp_params()), N_TP_PARAMS)
    } else {
        (est.param_vector().squared_error(&crate::model::ParamVector::from_params(truth)), N_PARAMS)
    };
    if normalize {
        e / np as f64
    } else {
        e
    }
}

fn reconstruct(tag: StrategyTag, data: &BinnedData, ml: &MlOptions) -> Result<EstimateReport> {
    match tag.recon() {
        Recon::Li => {
            let d = build_design_matrix(&data.inputs, &data.grids)?;
            li_estimate(data, &d, false)
        }
        Recon::Ml => ml_estimate_nontp(data, None, ml),
        Recon::MlTp => ml_estimate_tp(data, None, ml),
    }
}

fn formula(
    tag: StrategyTag,
    truth: &QFunctionParams,
    inputs: &[C64],
    layout: &GridLayout,
    n: f64,
    set: ParamSet,
    normalize: bool,
) -> f64 {
    let grids = match layout.grids(truth, inputs) {
        Ok(g) => g,
        Err(_) => return f64::NAN,
    };
    let r = match (tag.is_tp(), set.uses_tp(tag)) {
        (true, true) => mse_formula_tp_on(&truth.tp_params(), inputs, &grids, n),
        (false, false) => mse_formula_nontp_on(truth, inputs, &grids, n),
        (false, true) => mse_formula_nontp_on(truth, inputs, &grids, n).map(|m| MseBreakdown {
            total: TP_SLOTS.iter().map(|&i| m.per_parameter[i]).sum(),
            per_parameter: TP_SLOTS.iter().map(|&i| m.per_parameter[i]).collect(),
        }),
        // no closed form for the completed parameters
        (true, false) => return f64::NAN,
    };
    match r {
        Ok(m) if normalize => m.normalized(),
        Ok(m) => m.total,
        Err(_) => f64::NAN,
    }
}

/// Runs every (process, strategy, N) cell. Individual reconstruction
/// failures are counted per row; the campaign only aborts on setup errors
/// (bad config, process generation).
pub fn run_campaign(cfg: &ExperimentConfig) -> Result<CampaignOutput> {
    cfg.validate()?;
    let layout = cfg.layout()?;
    let dgrid = cfg.design_grid()?;
    let seed = cfg.seed;
    let exec = cfg.exec;
    let indices = cfg.process_indices();

    let mut processes = Vec::with_capacity(indices.len());
    for &i in &indices {
        let (spec, params) =
            sample_group(cfg.group, i, derive_seed(seed, &[SEED_PROCESS]), &cfg.ranges)?;
        processes.push(ProcessEntry {
            process: i,
            spec,
            params,
        });
    }

    let kinds: Vec<DesignKind> = {
        let mut k: Vec<DesignKind> = cfg.strategies.iter().map(|s| s.kind()).collect();
        k.sort();
        k.dedup();
        k
    };

    // designs[(process position, kind)] -> list of designs
    let mut designs: BTreeMap<(usize, DesignKind), Vec<InputDesign>> = BTreeMap::new();
    let mut entries = Vec::new();
    let geometric = if kinds.contains(&DesignKind::Geometric)
        || kinds.iter().any(|k| matches!(k, DesignKind::Best(_)))
    {
        let opts = DesignOptions {
            starts: cfg.design_starts,
            seed: derive_seed(seed, &[SEED_GEOMETRIC]),
            exec,
            ..Default::default()
        };
        let d = optimize_geometric(cfg.j, cfg.l, &dgrid, &opts)?;
        entries.push(DesignEntry {
            label: "geometric".into(),
            process: None,
            design: d.clone(),
        });
        Some(d)
    } else {
        None
    };
    let n_max = *cfg.n.iter().max().expect("validated") as f64;
    for (pi, pe) in processes.iter().enumerate() {
        for &kind in &kinds {
            let list = match kind {
                DesignKind::Geometric => vec![geometric.clone().expect("computed above")],
                DesignKind::Random => (0..cfg.random_sets)
                    .map(|s| {
                        random_design(
                            cfg.j,
                            cfg.l,
                            &dgrid,
                            derive_seed(seed, &[SEED_RANDOM, pe.process as u64, s as u64]),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?,
                DesignKind::Best(tp) => {
                    let opts = DesignOptions {
                        starts: cfg.bml_starts,
                        seed: derive_seed(seed, &[SEED_BEST, pe.process as u64, tp as u64]),
                        exec,
                        nm: NmOptions {
                            max_evals: cfg.bml_max_evals,
                            restarts: 0,
                            polish_evals: cfg.bml_max_evals / 2,
                            ..Default::default()
                        },
                        warm_start: geometric.as_ref().map(|g| g.amplitudes.clone()),
                    };
                    let mode = if tp { BestMode::Tp } else { BestMode::NonTp };
                    match optimize_best_informed(&pe.params, mode, cfg.j, cfg.l, &layout, n_max, &opts) {
                        Ok(d) => vec![d],
                        Err(_) => Vec::new(),
                    }
                }
            };
            for (s, d) in list.iter().enumerate() {
                let label = match kind {
                    DesignKind::Geometric => continue,
                    DesignKind::Random => format!("random-{s}"),
                    DesignKind::Best(true) => "best-tp".into(),
                    DesignKind::Best(false) => "best-nontp".into(),
                };
                entries.push(DesignEntry {
                    label,
                    process: Some(pe.process),
                    design: d.clone(),
                });
            }
            designs.insert((pi, kind), list);
        }
    }

    let mut jobs = Vec::new();
    for (pi, pe) in processes.iter().enumerate() {
        for &tag in &cfg.strategies {
            let nd = designs[&(pi, tag.kind())].len();
            for &n in &cfg.n {
                for design in 0..nd {
                    for rep in 0..cfg.repetitions {
                        jobs.push(Job {
                            process: pe.process,
                            pi,
                            strategy: tag,
                            design,
                            n,
                            rep,
                        });
                    }
                }
            }
        }
    }

    let kind_id = |k: DesignKind| match k {
        DesignKind::Random => 0u64,
        DesignKind::Geometric => 1,
        DesignKind::Best(false) => 2,
        DesignKind::Best(true) => 3,
    };
    let outcomes: Vec<(Outcome, f64)> = exec.map(jobs.iter().collect(), |job| {
        let t0 = Instant::now();
        let truth = &processes[job.pi].params;
        let d = &designs[&(job.pi, job.strategy.kind())][job.design];
        // data shared by every strategy that uses the same design
        let sim_seed = derive_seed(
            seed,
            &[
                SEED_SIM,
                job.process as u64,
                kind_id(job.strategy.kind()),
                job.design as u64,
                job.n,
                job.rep as u64,
            ],
        );
        let ml = MlOptions {
            starts: cfg.ml_starts,
            seed: derive_seed(sim_seed, &[SEED_ML]),
            exec: Exec::Sequential,
            ..Default::default()
        };
        let opts = ExperimentOptions {
            mode: cfg.sampling,
            exec: Exec::Sequential,
        };
        let out = run_experiment(truth, &d.amplitudes, job.n, &layout, sim_seed, opts)
            .map(|rec| BinnedData::from_record(&rec))
            .and_then(|data| reconstruct(job.strategy, &data, &ml));
        let o = match out {
            Ok(est) => Outcome::Ok(sq_error(job.strategy, cfg.params, truth, &est, cfg.normalize)),
            Err(Error::NoConvergence { best, .. }) => {
                Outcome::Unconverged(sq_error(job.strategy, cfg.params, truth, &best, cfg.normalize))
            }
            Err(e) => Outcome::Failed(e.to_string()),
        };
        (o, t0.elapsed().as_secs_f64())
    });

    // formulas, one per (process, strategy, design, N)
    let mut formula_cache: BTreeMap<(usize, StrategyTag, usize, u64), f64> = BTreeMap::new();
    let mut formula_keys = Vec::new();
    for (pi, _) in processes.iter().enumerate() {
        for &tag in &cfg.strategies {
            for design in 0..designs[&(pi, tag.kind())].len() {
                for &n in &cfg.n {
                    formula_keys.push((pi, tag, design, n));
                }
            }
        }
    }
    let values = exec.map(formula_keys.clone(), |(pi, tag, design, n)| {
        formula(
            tag,
            &processes[pi].params,
            &designs[&(pi, tag.kind())][design].amplitudes,
            &layout,
            n as f64,
            cfg.params,
            cfg.normalize,
        )
    });
    for (k, v) in formula_keys.into_iter().zip(values) {
        formula_cache.insert(k, v);
    }

    #[derive(Default)]
    struct Acc {
        vals: Vec<f64>,
        failures: usize,
        unconverged: usize,
        first_failure: Option<String>,
        time: f64,
    }
    let mut acc: BTreeMap<(usize, usize, u64), Acc> = BTreeMap::new();
    let strat_pos = |t: StrategyTag| cfg.strategies.iter().position(|&s| s == t).unwrap_or(0);
    for (job, (o, dt)) in jobs.iter().zip(outcomes) {
        let a = acc.entry((job.pi, strat_pos(job.strategy), job.n)).or_default();
        a.time += dt;
        match o {
            Outcome::Ok(v) => a.vals.push(v),
            Outcome::Unconverged(v) => {
                a.vals.push(v);
                a.unconverged += 1;
            }
            Outcome::Failed(m) => {
                a.failures += 1;
                a.first_failure.get_or_insert(m);
            }
        }
    }

    let mut rows = Vec::new();
    for (pi, pe) in processes.iter().enumerate() {
        for &tag in &cfg.strategies {
            let nd = designs[&(pi, tag.kind())].len();
            for &n in &cfg.n {
                let a = acc.remove(&(pi, strat_pos(tag), n)).unwrap_or_default();
                let cnt = a.vals.len();
                let (mean, stderr) = if cnt == 0 {
                    (f64::NAN, f64::NAN)
                } else {
                    let mean = a.vals.iter().sum::<f64>() / cnt as f64;
                    let var = if cnt > 1 {
                        a.vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (cnt - 1) as f64
                    } else {
                        0.0
                    };
                    (mean, (var / cnt as f64).sqrt())
                };
                let mse_formula = if nd == 0 {
                    f64::NAN
                } else {
                    (0..nd).map(|d| formula_cache[&(pi, tag, d, n)]).sum::<f64>() / nd as f64
                };
                let failure = if nd == 0 {
                    Some("design optimization failed".to_string())
                } else {
                    a.first_failure
                };
                rows.push(ResultRow {
                    strategy: tag,
                    group: cfg.group,
                    process: pe.process,
                    j: cfg.j,
                    n,
                    l: cfg.l,
                    k: cfg.m * cfg.m,
                    mse_empirical: mean,
                    mse_formula,
                    stderr,
                    wall_time: if cfg.timing { a.time } else { 0.0 },
                    seed,
                    samples: cnt,
                    failures: a.failures,
                    unconverged: a.unconverged,
                    failure,
                });
            }
        }
    }

    Ok(CampaignOutput {
        config: cfg.clone(),
        processes,
        designs: entries,
        rows,
    })
}

pub const CSV_HEADER: [&str; 12] = [
    "strategy",
    "group",
    "process",
    "J",
    "N",
    "L",
    "K",
    "mse_empirical",
    "mse_formula",
    "stderr",
    "wall_time",
    "seed",
];

pub fn write_results_csv<W: std::io::Write>(rows: &[ResultRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(CSV_HEADER)?;
    for r in rows {
        wr.write_record([
            r.strategy.label().to_string(),
            r.group.to_string(),
            r.process.to_string(),
            r.j.to_string(),
            r.n.to_string(),
            r.l.to_string(),
            r.k.to_string(),
            r.mse_empirical.to_string(),
            r.mse_formula.to_string(),
            r.stderr.to_string(),
            r.wall_time.to_string(),
            r.seed.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Writes `results.csv` and `results.json` into `dir`, overwriting.
pub fn emit_results(out: &CampaignOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_results_csv(&out.rows, std::fs::File::create(dir.join("results.csv"))?)?;
    let json = serde_json::to_string_pretty(out)?;
    std::fs::write(dir.join("results.json"), json)?;
    Ok(())
}

/// Rows grouped by strategy, averaged over processes: `(mean empirical, mean formula)`.
pub fn strategy_means(rows: &[ResultRow], n: u64) -> BTreeMap<StrategyTag, (f64, f64)> {
    let mut sums: BTreeMap<StrategyTag, (f64, f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.n == n && r.mse_empirical.is_finite()) {
        let e = sums.entry(r.strategy).or_default();
        e.0 += r.mse_empirical;
        e.1 += r.mse_formula;
        e.2 += 1;
    }
    sums.into_iter()
        .map(|(k, (a, b, c))| (k, (a / c as f64, b / c as f64)))
        .collect()
}
