mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::{Precision, RunConfig};
use sgbs::bifidelity::{self, BifidStore};
use sgbs::fdsolver::{write_coefficients, StabilityBound};
use sgbs::io::write_toml;
use sgbs::orthopoly::galerkin_tensor;
use sgbs::sgsystem::ParabolicityReport;
use sgbs::volfit::{density_table, read_market_csv};
use sgbs::{
    build_problem, fit_constrained_mle, implied_vol, solve, stability_bound, Error, GalerkinTensor, MomentSurfaces,
    Real, Result, SolveOptions, VolatilityModel, TRADING_DAYS_PER_YEAR,
};

/// Stochastic Galerkin Black-Scholes solver with random volatility.
#[derive(Parser)]
#[command(name = "sgbs", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set solver.n_tau=400`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the degree-one volatility model to market data.
    Fit {
        /// `date,spot,price,strike,maturity_days,rate` or `date,implied_vol`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the stochastic Galerkin system and write moment surfaces.
    Solve {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Build the Galerkin tensor and write it to a cache file.
    Tensor {
        #[arg(long)]
        out: PathBuf,
    },
    /// Bi-fidelity offline and online phases.
    Bifid {
        #[command(subcommand)]
        phase: BifidPhase,
    },
    /// Compare direct high-fidelity solves against bi-fidelity reconstructions.
    Bench {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Black-Scholes implied volatility of one price or of a price file.
    ImpliedVol(ImpliedVolArgs),
}

#[derive(Subcommand)]
enum BifidPhase {
    Offline {
        #[arg(long)]
        store: PathBuf,
    },
    Online {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArg,
    },
}

#[derive(Args)]
struct ModelArg {
    /// Volatility coefficients, same as `model.coefficients`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    model: Option<Vec<f64>>,
}

#[derive(Args)]
struct ImpliedVolArgs {
    /// Price file with header `date,spot,price,strike,maturity_days,rate`.
    #[arg(long, conflicts_with_all = ["price", "spot"])]
    input: Option<PathBuf>,
    /// Output CSV `date,implied_vol` for `--input`.
    #[arg(long, requires = "input")]
    out: Option<PathBuf>,
    #[arg(long, requires_all = ["spot", "strike", "maturity_days"])]
    price: Option<f64>,
    #[arg(long)]
    spot: Option<f64>,
    #[arg(long)]
    strike: Option<f64>,
    #[arg(long)]
    maturity_days: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    rate: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Fit { input, out } => fit(&cfg, &input, &out),
        Command::Solve { out, model } => {
            let cfg = with_model(cfg, model);
            match cfg.solver.precision {
                Precision::F64 => solve_cmd::<f64>(&cfg, &out),
                Precision::F32 => solve_cmd::<f32>(&cfg, &out),
            }
        }
        Command::Tensor { out } => tensor_cmd(&cfg, &out),
        Command::Bifid { phase } => match phase {
            BifidPhase::Offline { store } => bifid_offline(&cfg, &store),
            BifidPhase::Online { store, out, model } => bifid_online(&with_model(cfg, model), &store, &out),
        },
        Command::Bench { store, out } => bench_cmd(&cfg, &store, &out),
        Command::ImpliedVol(args) => implied_vol_cmd(args),
    }
}

fn with_model(mut cfg: RunConfig, m: ModelArg) -> RunConfig {
    if let Some(c) = m.model {
        cfg.model.coefficients = c;
    }
    cfg
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_rows(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{header}")?;
    for r in rows {
        writeln!(f, "{r}")?;
    }
    f.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct FitRecord {
    format: &'static str,
    version: u32,
    input: String,
    samples: usize,
    mode: sgbs::FitMode,
    families: Vec<String>,
    log_likelihood: f64,
    phi: f64,
    sample_mean: f64,
    sample_variance: f64,
    model_mean: f64,
    model_variance: f64,
    orthonormal: Coefficients,
    raw: Coefficients,
}

#[derive(Serialize)]
struct Coefficients {
    s00: f64,
    s10: f64,
    s01: f64,
}

fn fit(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    let series = read_market_csv(input)?;
    let families = cfg.families()?;
    let result = fit_constrained_mle(&series.vols(), &families, cfg.fit.mode)?;
    let m = &result.model;
    let c = m.coefficients();
    let raw = m.raw_linear_coefficients();
    create_dir(out)?;
    let record = FitRecord {
        format: "sgbs-fit",
        version: 1,
        input: input.display().to_string(),
        samples: result.samples,
        mode: cfg.fit.mode,
        families: families.iter().map(|f| f.to_string()).collect(),
        log_likelihood: result.log_likelihood,
        phi: result.phi,
        sample_mean: result.sample_mean,
        sample_variance: result.sample_variance,
        model_mean: m.mean(),
        model_variance: m.variance(),
        orthonormal: Coefficients { s00: c[0], s10: c[1], s01: c[2] },
        raw: Coefficients { s00: raw[0], s10: raw[1], s01: raw[2] },
    };
    write_toml(&out.join("fit.toml"), &record)?;
    let table = density_table(&series.vols(), m, cfg.fit.bins)?;
    write_rows(
        &out.join("density.csv"),
        "x,histogram,model",
        table.iter().map(|(x, h, f)| format!("{x},{h},{f}")),
    )?;
    println!(
        "fitted {} samples: s00 = {:.6}, s10 = {:.6}, s01 = {:.6} (raw {:.6}); log-likelihood {:.4}",
        result.samples, c[0], c[1], c[2], raw[2], result.log_likelihood
    );
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SurfaceManifest {
    format: &'static str,
    version: u32,
    columns: Vec<&'static str>,
    precision: Precision,
    families: Vec<String>,
    vol_degree: u32,
    sol_degree: u32,
    coefficients: Vec<f64>,
    strike: f64,
    maturity_days: f64,
    rate: f64,
    m_zeta: usize,
    n_tau: usize,
    store_every: usize,
    levels: usize,
    nodes: usize,
    parabolicity: ParabolicityReport,
    stability: StabilityBound,
    /// Chaos coefficients of `V / (S + K)` as `S -> infinity`.
    asymptote: Vec<f64>,
    smoothing_area: Option<[f64; 2]>,
    seconds: f64,
}

fn load_or_build_tensor<T: Real>(cfg: &RunConfig) -> Result<GalerkinTensor<T>> {
    let fams = cfg.families()?;
    if let Some(path) = &cfg.solver.tensor_cache {
        let t = GalerkinTensor::<T>::load(Path::new(path))?;
        if t.families() != fams.as_slice() || t.vol_degree() != cfg.model.vol_degree || t.sol_degree() != cfg.solver.sol_degree {
            return Err(Error::StoreMismatch(format!(
                "tensor cache {path} was built for {:?}, K={}, N={}",
                t.families(),
                t.vol_degree(),
                t.sol_degree()
            )));
        }
        return Ok(t);
    }
    galerkin_tensor(&fams, cfg.model.vol_degree, cfg.solver.sol_degree)
}

fn solve_cmd<T: Real>(cfg: &RunConfig, out: &Path) -> Result<()> {
    let start = Instant::now();
    let model64 = cfg.model()?;
    let model = VolatilityModel::<T>::new(
        model64.families().to_vec(),
        model64.degree(),
        model64.coefficients().iter().map(|&c| T::lit(c)).collect(),
    )?;
    let tensor = load_or_build_tensor::<T>(cfg)?;
    let option = cfg.option()?;
    let problem = build_problem(&tensor, &model, option, cfg.solver.allow_nonparabolic)?;
    let grid = cfg.grid();
    let bound = stability_bound(&problem, &grid);
    let field = solve(&problem, &grid, SolveOptions { allow_unstable: cfg.solver.allow_unstable })?;
    let ms = field.moments();
    create_dir(out)?;
    ms.write_csv(&out.join("surface.csv"))?;
    if cfg.solver.raw_dump {
        write_coefficients(&field, &out.join("coefficients.bin"))?;
    }
    let manifest = surface_manifest(cfg, &model64, &ms, problem.report.clone(), bound, start.elapsed().as_secs_f64());
    write_toml(&out.join("manifest.toml"), &manifest)?;
    let today = ms.today();
    let atm = ms
        .s
        .iter()
        .zip(ms.mean_at(today).iter().zip(ms.variance_at(today)))
        .min_by(|a, b| (a.0 - option.strike).abs().total_cmp(&(b.0 - option.strike).abs()))
        .map(|(s, (m, v))| (*s, *m, *v))
        .unwrap_or_default();
    println!(
        "solved {} x {} grid in {:.2} s; at S = {:.4}: mean {:.6}, variance {:.6e}",
        grid.m_zeta, grid.n_tau, manifest.seconds, atm.0, atm.1, atm.2
    );
    Ok(())
}

fn surface_manifest(
    cfg: &RunConfig,
    model: &VolatilityModel<f64>,
    ms: &MomentSurfaces,
    parabolicity: ParabolicityReport,
    stability: StabilityBound,
    seconds: f64,
) -> SurfaceManifest {
    SurfaceManifest {
        format: "sgbs-surface",
        version: 1,
        columns: vec!["t_days", "S", "mean", "variance"],
        precision: cfg.solver.precision,
        families: model.families().iter().map(|f| f.to_string()).collect(),
        vol_degree: model.degree(),
        sol_degree: cfg.solver.sol_degree,
        coefficients: model.coefficients().to_vec(),
        strike: cfg.option.strike,
        maturity_days: cfg.option.maturity_days,
        rate: cfg.option.rate,
        m_zeta: cfg.solver.m_zeta,
        n_tau: cfg.solver.n_tau,
        store_every: cfg.solver.store_every,
        levels: ms.n_levels(),
        nodes: ms.n_nodes(),
        parabolicity,
        stability,
        asymptote: ms.asymptote.clone(),
        smoothing_area: ms.smoothing_area().map(|(a, b)| [a, b]),
        seconds,
    }
}

fn tensor_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let start = Instant::now();
    let t: GalerkinTensor<f64> = galerkin_tensor(&cfg.families()?, cfg.model.vol_degree, cfg.solver.sol_degree)?;
    if let Some(parent) = out.parent() {
        create_dir(parent)?;
    }
    t.save(out)?;
    println!(
        "tensor K={} N={} ({} values) written to {} in {:.3} s",
        t.vol_degree(),
        t.sol_degree(),
        t.values().len(),
        out.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

// ---------------------------------------------------------------------------

fn bifid_offline(cfg: &RunConfig, store_dir: &Path) -> Result<()> {
    let bc = cfg.bifid()?;
    let start = Instant::now();
    let progress = |stage: &str, done: usize, total: usize| {
        eprintln!("[{:>7.1} s] {stage}: {done}/{total}", start.elapsed().as_secs_f64());
    };
    let store = bifidelity::offline(&bc, Some(&progress))?;
    store.save(store_dir)?;
    let m = &store.manifest;
    if m.jitter > 0.0 {
        eprintln!("warning: Gram matrix needed a diagonal shift of {:e}", m.jitter);
    }
    println!(
        "store written to {}: {} of {} grid points admissible, {} selected, projection {:?}, {:.1} s",
        store_dir.display(),
        m.admissible_points,
        m.grid_points,
        m.points.len(),
        m.method,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn open_store(cfg: &RunConfig, dir: &Path) -> Result<BifidStore> {
    let store = BifidStore::load(dir)?;
    store.check_config(&cfg.bifid()?)?;
    Ok(store)
}

fn bifid_online(cfg: &RunConfig, store_dir: &Path, out: &Path) -> Result<()> {
    let start = Instant::now();
    let store = open_store(cfg, store_dir)?;
    let model = cfg.model()?;
    let rec = bifidelity::online(&store, model.coefficients())?;
    let ms = rec.moments();
    create_dir(out)?;
    ms.write_csv(&out.join("surface.csv"))?;
    if cfg.solver.raw_dump {
        write_coefficients(&rec.field, &out.join("coefficients.bin"))?;
    }
    let problem = store.template.problem(model.coefficients())?;
    let mut manifest = surface_manifest(
        cfg,
        &model,
        &ms,
        problem.report.clone(),
        stability_bound(&problem, &store.manifest.config.high),
        start.elapsed().as_secs_f64(),
    );
    let high = store.manifest.config.high;
    manifest.m_zeta = high.m_zeta;
    manifest.n_tau = high.n_tau;
    manifest.store_every = high.store_every;
    manifest.sol_degree = store.manifest.config.sol_degree;
    write_toml(&out.join("manifest.toml"), &manifest)?;
    write_toml(
        &out.join("reconstruction.toml"),
        &ReconstructionRecord {
            coefficients: rec.coefficients.clone(),
            residual: rec.residual,
            seconds_online: rec.seconds,
        },
    )?;
    println!(
        "reconstructed from {} snapshots in {:.4} s; low-fidelity residual {:.3e}",
        rec.coefficients.len(),
        rec.seconds,
        rec.residual
    );
    Ok(())
}

#[derive(Serialize)]
struct ReconstructionRecord {
    coefficients: Vec<f64>,
    residual: f64,
    seconds_online: f64,
}

fn bench_cmd(cfg: &RunConfig, store_dir: &Path, out: &Path) -> Result<()> {
    let store = open_store(cfg, store_dir)?;
    let summary = bifidelity::bench(&store, cfg.bench.models, cfg.bench.seed)?;
    create_dir(out)?;
    write_rows(
        &out.join("bench.csv"),
        "s00,s10,s01,seconds_high,seconds_online,speedup,residual,mean_max_abs_err,mean_mean_abs_err,mean_near_strike_mae,var_max_abs_err,var_near_strike_mae",
        summary.records.iter().map(|r| {
            format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.model[0],
                r.model[1],
                r.model[2],
                r.seconds_high,
                r.seconds_online,
                r.speedup,
                r.residual,
                r.mean_max_abs_err,
                r.mean_mean_abs_err,
                r.mean_near_strike_mae,
                r.var_max_abs_err,
                r.var_near_strike_mae
            )
        }),
    )?;
    write_toml(
        &out.join("summary.toml"),
        &BenchSummaryRecord {
            seed: summary.seed,
            models: summary.records.len(),
            skipped: summary.skipped,
            mean_speedup: summary.mean_speedup,
            mean_near_strike_mae: summary.mean_near_strike_mae,
            var_near_strike_mae: summary.var_near_strike_mae,
        },
    )?;
    println!(
        "{} models (seed {}, {} skipped): mean speedup {:.2}, near-strike MAE mean {:.3e}, variance {:.3e}",
        summary.records.len(),
        summary.seed,
        summary.skipped,
        summary.mean_speedup,
        summary.mean_near_strike_mae,
        summary.var_near_strike_mae
    );
    Ok(())
}

#[derive(Serialize)]
struct BenchSummaryRecord {
    seed: u64,
    models: usize,
    skipped: usize,
    mean_speedup: f64,
    mean_near_strike_mae: f64,
    var_near_strike_mae: f64,
}

fn implied_vol_cmd(a: ImpliedVolArgs) -> Result<()> {
    if let Some(input) = a.input {
        let series = read_market_csv(&input)?;
        let rows = series.observations.iter().map(|o| format!("{},{}", o.date, o.implied_vol));
        match a.out {
            Some(out) => write_rows(&out, "date,implied_vol", rows)?,
            None => {
                println!("date,implied_vol");
                for r in rows {
                    println!("{r}");
                }
            }
        }
        return Ok(());
    }
    match (a.price, a.spot, a.strike, a.maturity_days) {
        (Some(p), Some(s), Some(k), Some(d)) => {
            let v = implied_vol(p, s, d / TRADING_DAYS_PER_YEAR, k, a.rate)?;
            println!("{v}");
            Ok(())
        }
        _ => Err(Error::Config("give --input or all of --price, --spot, --strike, --maturity-days".into())),
    }
}
