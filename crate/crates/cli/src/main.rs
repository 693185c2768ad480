use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gaussproc::design::{optimize_geometric, DesignOptions, InputDesign};
use gaussproc::exec::{derive_seed, Exec};
use gaussproc::harness::{emit_results, run_campaign, write_results_csv, ExperimentConfig};
use gaussproc::model::{check_tp, positivity_status, PositivityMode, QFunctionParams};
use gaussproc::mse::{mse_formula_nontp, mse_formula_tp};
use gaussproc::phase_space::{make_grid, GridLayout};
use gaussproc::process::{process_from_physical, sample_group_spec, ParamRanges, DEFAULT_T};
use gaussproc::reconstruction::{
    build_design_matrix, li_estimate, ml_estimate_nontp, ml_estimate_tp, BinnedData, MlOptions,
};
use gaussproc::simulator::{run_experiment, ExperimentOptions, MeasurementRecord, SamplingMode};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug)]
enum CliError {
    Config(String),
    Numerical(String),
}

impl From<gaussproc::Error> for CliError {
    fn from(e: gaussproc::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "gaussproc", version, about = "Gaussian process tomography workbench")]
struct Cli {
    /// Run loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample a CPTP process from a group of the physical generator.
    GenerateProcess(GenerateArgs),
    /// Optimize a geometric input design.
    GeometricSet(GeometricArgs),
    /// Simulate heterodyne counts for a process and input set.
    Simulate(SimulateArgs),
    /// Reconstruct a process from a measurement record.
    Reconstruct(ReconstructArgs),
    /// Asymptotic MSE of a design for a given process.
    MseFormula(MseArgs),
    /// Run a strategy-comparison campaign.
    Campaign(CampaignArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    group: Option<u8>,
    #[arg(long)]
    index: Option<usize>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateConfig {
    group: Option<u8>,
    index: Option<usize>,
    #[serde(default)]
    ranges: ParamRanges,
}

#[derive(Args)]
struct GeometricArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "J")]
    j: Option<usize>,
    #[arg(long = "L")]
    l: Option<f64>,
    #[arg(long = "M")]
    m: Option<usize>,
    #[arg(long)]
    extent: Option<f64>,
    #[arg(long)]
    starts: Option<usize>,
    #[arg(long)]
    seed: u64,
    /// Directory for design.json and design.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometricConfig {
    #[serde(rename = "J")]
    j: Option<usize>,
    #[serde(rename = "L")]
    l: Option<f64>,
    #[serde(rename = "M")]
    m: Option<usize>,
    extent: Option<f64>,
    starts: Option<usize>,
}

/// Where the true process comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum ProcessSource {
    Params { params: QFunctionParams },
    Group { group: u8, index: usize, seed: Option<u64> },
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SetupConfig {
    process: Option<ProcessSource>,
    inputs: Option<Vec<Complex64>>,
    #[serde(rename = "N")]
    n: Option<u64>,
    #[serde(rename = "M")]
    m: Option<usize>,
    extent: Option<f64>,
    window_sigma: Option<f64>,
    sampling: Option<SamplingMode>,
    mode: Option<FormulaMode>,
}

#[derive(Args)]
struct SetupArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// QFunctionParams JSON file.
    #[arg(long)]
    process: Option<PathBuf>,
    /// Design JSON file (as written by geometric-set).
    #[arg(long)]
    design: Option<PathBuf>,
    #[arg(long = "N")]
    n: Option<u64>,
    #[arg(long = "M")]
    m: Option<usize>,
    #[arg(long)]
    extent: Option<f64>,
    #[arg(long)]
    window_sigma: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    setup: SetupArgs,
    #[arg(long, value_enum)]
    sampling: Option<SamplingArg>,
    #[arg(long)]
    seed: u64,
    /// Record JSON path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-bin counts as CSV.
    #[arg(long)]
    counts_csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplingArg {
    Continuous,
    Binned,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum FormulaMode {
    Nontp,
    Tp,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Li,
    LiProj,
    Ml,
    MlTp,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Measurement record JSON (as written by simulate).
    #[arg(long)]
    data: PathBuf,
    /// Seed for the extra starts of ml-tp.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    starts: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MseArgs {
    #[command(flatten)]
    setup: SetupArgs,
    #[arg(long, value_enum)]
    mode: Option<FormulaMode>,
    /// Seed for processes given as {group, index} without their own seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CampaignArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    /// Output directory for results.csv and results.json; CSV goes to
    /// stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long = "N", value_delimiter = ',')]
    n: Option<Vec<u64>>,
    #[arg(long = "J")]
    j: Option<usize>,
    #[arg(long = "L")]
    l: Option<f64>,
    #[arg(long)]
    group: Option<u8>,
    #[arg(long)]
    timing: bool,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let s = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&s).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn read_config<T: for<'de> Deserialize<'de> + Default>(path: &Option<PathBuf>) -> CliResult<T> {
    match path {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

fn write_out(path: &Option<PathBuf>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| CliError::Config(format!("{}: {e}", p.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn exec_of(cli_sequential: bool) -> Exec {
    if cli_sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn cmd_generate(a: GenerateArgs) -> CliResult<()> {
    let cfg: GenerateConfig = read_config(&a.config)?;
    let group = a.group.or(cfg.group).unwrap_or(3);
    let index = a.index.or(cfg.index).unwrap_or(1);
    let spec = sample_group_spec(group, index, a.seed, &cfg.ranges)?;
    let params = process_from_physical(&spec, DEFAULT_T)?;
    let tp = check_tp(&params)?;
    let out = serde_json::json!({
        "group": group,
        "index": index,
        "seed": a.seed,
        "spec": spec,
        "params": params,
        "tp_residual": tp.max(),
        "cp_min_eigenvalue": positivity_status(&params, PositivityMode::Cp).value,
    });
    write_out(&a.out, &serde_json::to_string_pretty(&out)?)
}

fn cmd_geometric(a: GeometricArgs, exec: Exec) -> CliResult<()> {
    let cfg: GeometricConfig = read_config(&a.config)?;
    let j = a.j.or(cfg.j).unwrap_or(6);
    let l = a.l.or(cfg.l).unwrap_or(1.0);
    let m = a.m.or(cfg.m).unwrap_or(20);
    let extent = a.extent.or(cfg.extent).unwrap_or(5.0);
    let starts = a.starts.or(cfg.starts).unwrap_or(gaussproc::design::DEFAULT_STARTS);
    let grid = make_grid(m, extent)?;
    let d = optimize_geometric(
        j,
        l,
        &grid,
        &DesignOptions {
            starts,
            seed: a.seed,
            exec,
            ..Default::default()
        },
    )?;
    let json = serde_json::to_string_pretty(&d)?;
    if let Some(dir) = &a.out {
        let io = |e: std::io::Error| CliError::Config(format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir).map_err(io)?;
        fs::write(dir.join("design.json"), &json).map_err(io)?;
        let f = fs::File::create(dir.join("design.csv")).map_err(io)?;
        d.write_csv(f)?;
    }
    println!("{json}");
    Ok(())
}

struct Setup {
    params: QFunctionParams,
    inputs: Vec<Complex64>,
    n: u64,
    layout: GridLayout,
    sampling: SamplingMode,
    mode: FormulaMode,
}

fn resolve_setup(a: &SetupArgs, seed: Option<u64>) -> CliResult<Setup> {
    let cfg: SetupConfig = read_config(&a.config)?;
    let params = match (&a.process, &cfg.process) {
        (Some(p), _) => read_json::<QFunctionParams>(p)?,
        (None, Some(ProcessSource::Params { params })) => *params,
        (None, Some(ProcessSource::Group { group, index, seed: s })) => {
            let s = s.or(seed).ok_or_else(|| {
                CliError::Config("process given by group/index needs a seed".into())
            })?;
            process_from_physical(
                &sample_group_spec(*group, *index, s, &ParamRanges::default())?,
                DEFAULT_T,
            )?
        }
        (None, None) => return Err(CliError::Config("no process given (--process or config)".into())),
    };
    let inputs = match (&a.design, &cfg.inputs) {
        (Some(p), _) => read_json::<InputDesign>(p)?.amplitudes,
        (None, Some(i)) => i.clone(),
        (None, None) => return Err(CliError::Config("no input states given (--design or config)".into())),
    };
    let m = a.m.or(cfg.m).unwrap_or(20);
    let layout = match a.window_sigma.or(cfg.window_sigma) {
        Some(n_sigma) => GridLayout::Windowed { m, n_sigma },
        None => GridLayout::Shared(make_grid(m, a.extent.or(cfg.extent).unwrap_or(5.0))?),
    };
    Ok(Setup {
        params,
        inputs,
        n: a.n.or(cfg.n).unwrap_or(10_000),
        layout,
        sampling: cfg.sampling.unwrap_or_default(),
        mode: cfg.mode.unwrap_or(FormulaMode::Nontp),
    })
}

fn cmd_simulate(a: SimulateArgs, exec: Exec) -> CliResult<()> {
    let s = resolve_setup(&a.setup, Some(derive_seed(a.seed, &[0x70])))?;
    let mode = match a.sampling {
        Some(SamplingArg::Binned) => SamplingMode::Binned,
        Some(SamplingArg::Continuous) => SamplingMode::Continuous,
        None => s.sampling,
    };
    if s.n == 0 {
        return Err(CliError::Config("N must be positive".into()));
    }
    let rec = run_experiment(
        &s.params,
        &s.inputs,
        s.n,
        &s.layout,
        a.seed,
        ExperimentOptions { mode, exec },
    )?;
    if let Some(p) = &a.counts_csv {
        let f = fs::File::create(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        rec.write_counts_csv(f)?;
    }
    write_out(&a.out, &serde_json::to_string(&rec)?)
}

fn cmd_reconstruct(a: ReconstructArgs, exec: Exec) -> CliResult<()> {
    let rec: MeasurementRecord = read_json(&a.data)?;
    let data = BinnedData::from_record(&rec);
    let mut ml = MlOptions {
        exec,
        ..Default::default()
    };
    if let Some(m) = a.max_iter {
        ml.max_iter = m;
    }
    if let Some(s) = a.starts {
        ml.starts = s;
    }
    let report = match a.method {
        MethodArg::Li | MethodArg::LiProj => {
            let d = build_design_matrix(&data.inputs, &data.grids)?;
            li_estimate(&data, &d, matches!(a.method, MethodArg::LiProj))?
        }
        MethodArg::Ml => ml_estimate_nontp(&data, None, &ml)?,
        MethodArg::MlTp => {
            ml.seed = match (a.seed, ml.starts) {
                (Some(s), _) => s,
                (None, 0 | 1) => 0,
                (None, _) => {
                    return Err(CliError::Config(
                        "ml-tp with several starts is stochastic; pass --seed".into(),
                    ))
                }
            };
            ml_estimate_tp(&data, None, &ml)?
        }
    };
    write_out(&a.out, &serde_json::to_string_pretty(&report)?)
}

fn cmd_mse(a: MseArgs) -> CliResult<()> {
    let s = resolve_setup(&a.setup, a.seed)?;
    let mode = a.mode.unwrap_or(s.mode);
    let m = match mode {
        FormulaMode::Nontp => mse_formula_nontp(&s.params, &s.inputs, &s.layout, s.n as f64)?,
        FormulaMode::Tp => mse_formula_tp(&s.params.tp_params(), &s.inputs, &s.layout, s.n as f64)?,
    };
    let out = serde_json::json!({
        "mode": mode,
        "N": s.n,
        "total": m.total,
        "normalized": m.normalized(),
        "per_parameter": m.per_parameter,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn cmd_campaign(a: CampaignArgs, exec: Exec) -> CliResult<()> {
    let mut cfg: ExperimentConfig = match &a.config {
        Some(p) => {
            let s = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&s).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    cfg.seed = a.seed;
    cfg.exec = exec;
    if let Some(r) = a.repetitions {
        cfg.repetitions = r;
    }
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(j) = a.j {
        cfg.j = j;
    }
    if let Some(l) = a.l {
        cfg.l = l;
    }
    if let Some(g) = a.group {
        cfg.group = g;
        cfg.processes = None;
    }
    if a.timing {
        cfg.timing = true;
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let out = run_campaign(&cfg)?;
    for r in out.rows.iter().filter(|r| r.failure.is_some()) {
        eprintln!(
            "warning: {} process {} N={}: {} failed reconstructions ({})",
            r.strategy.label(),
            r.process,
            r.n,
            r.failures,
            r.failure.as_deref().unwrap_or("")
        );
    }
    match &a.out {
        Some(dir) => emit_results(&out, dir)?,
        None => write_results_csv(&out.rows, std::io::stdout())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let exec = exec_of(cli.sequential);
    let r = match cli.cmd {
        Cmd::GenerateProcess(a) => cmd_generate(a),
        Cmd::GeometricSet(a) => cmd_geometric(a, exec),
        Cmd::Simulate(a) => cmd_simulate(a, exec),
        Cmd::Reconstruct(a) => cmd_reconstruct(a, exec),
        Cmd::MseFormula(a) => cmd_mse(a),
        Cmd::Campaign(a) => cmd_campaign(a, exec),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(CliError::Numerical(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(EXIT_NUMERICAL)
        }
    }
}
