//! Command-line interface.
//!
//! Subcommands: `simulate`, `fit`, `cv`, `predict`, `eigen`, `study`.
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::io::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::fit::{cross_validate, fit, FitConfig, LambdaGrid};
use crate::io::{load_model, read_samples_csv, save_model, write_samples_csv};
use crate::penalty::Lambdas;
use crate::predict::{infer_scores, predict_curve, PredictTarget};
use crate::sim::{generate, run_study, SimTruth, StudyConfig};

#[derive(Parser)]
#[command(
    name = "sfpca",
    about = "Supervised functional PCA with covariate-dependent mean and covariance",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic curves and write them as CSV.
    Simulate(SimulateArgs),
    /// Fit a model to a sample CSV.
    Fit(FitArgs),
    /// Cross-validate the smoothing weights.
    Cv(CvArgs),
    /// Predict new curves from a fitted model.
    Predict(PredictArgs),
    /// Export eigenvalue/eigenfunction surfaces of a fitted model.
    Eigen(EigenArgs),
    /// Run the simulation study end to end.
    Study(StudyArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Number of curves.
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Observations per curve on the regular grid.
    #[arg(long, default_value_t = 51)]
    m_per_curve: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Observation noise variance.
    #[arg(long, default_value_t = 0.1)]
    noise_var: f64,
    /// Fraction of grid points dropped per curve.
    #[arg(long, default_value_t = 0.0)]
    irregular_drop: f64,
    /// Omit the measurement-error column from the output.
    #[arg(long, default_value_t = false)]
    omit_sd: bool,
}

#[derive(Args, Clone)]
struct FitFlags {
    /// Rank of the covariance factor.
    #[arg(long)]
    rank: Option<usize>,
    /// Mean basis size over time.
    #[arg(long)]
    mean_t_size: Option<usize>,
    /// Mean basis size over the covariate.
    #[arg(long)]
    mean_z_size: Option<usize>,
    /// Covariance basis size over time.
    #[arg(long)]
    cov_t_size: Option<usize>,
    /// Covariance basis size over the covariate.
    #[arg(long)]
    cov_z_size: Option<usize>,
    /// Fixed smoothing weights "t_cov,z_cov,t_mean,z_mean".
    #[arg(long, conflicts_with = "cv_grid")]
    lambdas: Option<String>,
    /// Cross-validate over this comma-separated weight list (applied to
    /// all four penalty axes) before the final fit.
    #[arg(long)]
    cv_grid: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_outer: Option<usize>,
    #[arg(long)]
    max_inner: Option<usize>,
    #[arg(long)]
    rel_tol: Option<f64>,
    #[arg(long)]
    inner_tol: Option<f64>,
    /// Covariate bins used by the initializer.
    #[arg(long)]
    n_bins: Option<usize>,
    #[arg(long)]
    cv_folds: Option<usize>,
    /// key=value file supplying any of the long fit options; explicit
    /// flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Training CSV.
    #[arg(long)]
    input: PathBuf,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    /// Optional objective-trace CSV.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
    #[command(flatten)]
    flags: FitFlags,
}

#[derive(Args)]
struct CvArgs {
    #[arg(long)]
    input: PathBuf,
    /// Cross-validation table CSV.
    #[arg(long)]
    out: PathBuf,
    /// Candidate weights per axis, comma separated.
    #[arg(long, default_value = "1e-4,1e-2,1e0")]
    grid_t_mean: String,
    #[arg(long, default_value = "1e-4,1e-2,1e0")]
    grid_z_mean: String,
    #[arg(long, default_value = "1e-4,1e-2,1e0")]
    grid_t_cov: String,
    #[arg(long, default_value = "1e-4,1e-2,1e0")]
    grid_z_cov: String,
    #[command(flatten)]
    flags: FitFlags,
}

#[derive(Args)]
struct PredictArgs {
    /// Fitted model file.
    #[arg(long)]
    model: PathBuf,
    /// CSV of observed points for the curves to predict.
    #[arg(long)]
    input: PathBuf,
    /// Output CSV (id,t,mean,var).
    #[arg(long)]
    out: PathBuf,
    /// Number of equally spaced prediction times over the trained range.
    #[arg(long, default_value_t = 101)]
    grid: usize,
    /// Predict the latent curve (drops the noise variance from var).
    #[arg(long, default_value_t = false)]
    latent: bool,
}

#[derive(Args)]
struct EigenArgs {
    #[arg(long)]
    model: PathBuf,
    /// Output CSV (z,t,j,value,eigenvalue).
    #[arg(long)]
    out: PathBuf,
    /// Covariate grid size.
    #[arg(long, default_value_t = 9)]
    n_z: usize,
    /// Time grid size.
    #[arg(long, default_value_t = 101)]
    n_t: usize,
}

#[derive(Args)]
struct StudyArgs {
    /// Output directory for the report and plot data.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 1000)]
    n_test: usize,
    #[arg(long, default_value_t = 51)]
    m_per_curve: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Ranks to fit, comma separated.
    #[arg(long, default_value = "1,2,3")]
    ranks: String,
    #[arg(long, default_value_t = 0.2)]
    observe_fraction: f64,
    /// Repetitions for the standard-error study; 1 runs the plain study.
    #[arg(long)]
    reps: Option<usize>,
    /// Shorthand for the repeated standard-error study (20 repetitions
    /// unless --reps is given).
    #[arg(long, default_value_t = false)]
    se_study: bool,
}

/// Entry point used by the binary; returns the process exit code.
pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with success codes.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Cv(args) => cmd_cv(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Eigen(args) => cmd_eigen(args),
        Command::Study(args) => cmd_study(args),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => 1,
        Error::Data(_) | Error::SampleRejected { .. } | Error::Io(_) | Error::ModelFile(_) => 2,
        Error::Domain { .. } => 2,
        Error::Numerical(_) => 3,
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    if args.n == 0 || args.m_per_curve < 2 {
        return Err(Error::invalid("need n >= 1 and at least 2 points per curve"));
    }
    if !(0.0..1.0).contains(&args.irregular_drop) {
        return Err(Error::invalid("irregular drop fraction must be in [0, 1)"));
    }
    let truth = SimTruth {
        n_curves: args.n,
        m_per_curve: args.m_per_curve,
        noise_var: args.noise_var,
        seed: args.seed,
        irregular_drop: args.irregular_drop,
        ..SimTruth::default()
    };
    let mut samples = generate(&truth);
    if !args.omit_sd {
        let sd = args.noise_var.sqrt();
        if !(sd > 0.0) {
            return Err(Error::invalid(
                "zero noise variance cannot emit an sd column; pass --omit-sd",
            ));
        }
        for s in &mut samples {
            s.noise_sd = Some(vec![sd; s.len()]);
        }
    }
    write_samples_csv(&args.out, &samples)?;
    println!(
        "wrote {} curves ({} rows) to {}",
        samples.len(),
        samples.iter().map(|s| s.len()).sum::<usize>(),
        args.out.display()
    );
    Ok(())
}

fn parse_f64_list(text: &str, what: &str) -> Result<Vec<f64>> {
    let vals: Result<Vec<f64>> = text
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("cannot parse {what} entry {v:?}")))
        })
        .collect();
    let vals = vals?;
    if vals.is_empty() {
        return Err(Error::invalid(format!("{what} list is empty")));
    }
    Ok(vals)
}

fn parse_lambdas(text: &str) -> Result<Lambdas> {
    let vals = parse_f64_list(text, "--lambdas")?;
    if vals.len() != 4 {
        return Err(Error::invalid(
            "--lambdas needs exactly four values: t_cov,z_cov,t_mean,z_mean",
        ));
    }
    Ok(Lambdas {
        t_cov: vals[0],
        z_cov: vals[1],
        t_mean: vals[2],
        z_mean: vals[3],
    })
}

/// Merge CLI flags over an optional key=value config file and defaults.
fn resolve_config(flags: &FitFlags) -> Result<FitConfig> {
    let mut file: std::collections::HashMap<String, String> = Default::default();
    if let Some(path) = &flags.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::data(format!(
                    "{} line {}: expected key=value",
                    path.display(),
                    lineno + 1
                ))
            })?;
            file.insert(key.trim().to_string(), value.trim().to_string());
        }
    }
    fn lookup<T: std::str::FromStr>(
        file: &std::collections::HashMap<String, String>,
        key: &str,
    ) -> Result<Option<T>> {
        match file.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::invalid(format!("config {key}: cannot parse {raw:?}"))),
        }
    }
    let rank = flags
        .rank
        .or(lookup(&file, "rank")?)
        .unwrap_or(3);
    let mut config = FitConfig::defaults(rank);
    if let Some(v) = flags.mean_t_size.or(lookup(&file, "mean_t_size")?) {
        config.mean_t_size = v;
    }
    if let Some(v) = flags.mean_z_size.or(lookup(&file, "mean_z_size")?) {
        config.mean_z_size = v;
    }
    if let Some(v) = flags.cov_t_size.or(lookup(&file, "cov_t_size")?) {
        config.cov_t_size = v;
    }
    if let Some(v) = flags.cov_z_size.or(lookup(&file, "cov_z_size")?) {
        config.cov_z_size = v;
    }
    if let Some(v) = flags.seed.or(lookup(&file, "seed")?) {
        config.seed = v;
    }
    if let Some(v) = flags.max_outer.or(lookup(&file, "max_outer")?) {
        config.max_outer = v;
    }
    if let Some(v) = flags.max_inner.or(lookup(&file, "max_inner")?) {
        config.max_inner = v;
    }
    if let Some(v) = flags.rel_tol.or(lookup(&file, "rel_tol")?) {
        config.rel_tol = v;
    }
    if let Some(v) = flags.inner_tol.or(lookup(&file, "inner_tol")?) {
        config.inner_tol = v;
    }
    if let Some(v) = flags.n_bins.or(lookup(&file, "n_bins")?) {
        config.n_bins = Some(v);
    }
    if let Some(v) = flags.cv_folds.or(lookup(&file, "cv_folds")?) {
        config.cv_folds = v;
    }
    let lambdas_text = flags
        .lambdas
        .clone()
        .or_else(|| file.get("lambdas").cloned());
    if let Some(text) = lambdas_text {
        config.lambdas = parse_lambdas(&text)?;
    }
    Ok(config)
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let samples = read_samples_csv(&args.input)?;
    let mut config = resolve_config(&args.flags)?;
    if let Some(grid_text) = &args.flags.cv_grid {
        let axis = parse_f64_list(grid_text, "--cv-grid")?;
        let grid = LambdaGrid {
            t_mean: axis.clone(),
            z_mean: axis.clone(),
            t_cov: axis.clone(),
            z_cov: axis,
        };
        let (best, _) = cross_validate(&samples, &config, &grid)?;
        println!(
            "cross-validation selected lambdas t_cov={} z_cov={} t_mean={} z_mean={}",
            best.t_cov, best.z_cov, best.t_mean, best.z_mean
        );
        config.lambdas = best;
    }
    let model = fit(&samples, &config)?;
    save_model(&args.out, &model)?;
    if let Some(path) = &args.diagnostics {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "step,objective")?;
        for (i, v) in model.diagnostics.objective_trace.iter().enumerate() {
            writeln!(out, "{i},{v}")?;
        }
        out.flush()?;
    }
    println!(
        "fit: {} curves, objective {:.6e}, {} outer sweeps, converged {}, noise variance {:.6e}",
        model.meta.n_samples,
        model.diagnostics.final_objective,
        model.diagnostics.outer_iters,
        model.diagnostics.converged,
        model.params.noise_var()
    );
    println!(
        "block gradient norms at exit: mean {:.3e}, factor {:.3e}, noise {:.3e}",
        model.diagnostics.final_grad_norms[0],
        model.diagnostics.final_grad_norms[1],
        model.diagnostics.final_grad_norms[2]
    );
    println!("model written to {}", args.out.display());
    Ok(())
}

fn cmd_cv(args: CvArgs) -> Result<()> {
    let samples = read_samples_csv(&args.input)?;
    if args.flags.cv_grid.is_some() {
        return Err(Error::invalid(
            "cv takes per-axis --grid-* lists, not --cv-grid",
        ));
    }
    let config = resolve_config(&args.flags)?;
    let grid = LambdaGrid {
        t_mean: parse_f64_list(&args.grid_t_mean, "--grid-t-mean")?,
        z_mean: parse_f64_list(&args.grid_z_mean, "--grid-z-mean")?,
        t_cov: parse_f64_list(&args.grid_t_cov, "--grid-t-cov")?,
        z_cov: parse_f64_list(&args.grid_z_cov, "--grid-z-cov")?,
    };
    let (best, table) = cross_validate(&samples, &config, &grid)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    writeln!(out, "stage,t_mean,z_mean,t_cov,z_cov,score,folds")?;
    for e in &table {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            e.stage,
            e.lambdas.t_mean,
            e.lambdas.z_mean,
            e.lambdas.t_cov,
            e.lambdas.z_cov,
            e.score,
            e.folds_used
        )?;
    }
    out.flush()?;
    println!(
        "best lambdas: t_cov={} z_cov={} t_mean={} z_mean={}",
        best.t_cov, best.z_cov, best.t_mean, best.z_mean
    );
    println!("table written to {}", args.out.display());
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    if args.grid < 2 {
        return Err(Error::invalid("--grid needs at least 2 points"));
    }
    let model = load_model(&args.model)?;
    let samples = read_samples_csv(&args.input)?;
    let (lo, hi) = model.meta.t_range;
    let t_grid: Vec<f64> = (0..args.grid)
        .map(|i| {
            if i + 1 == args.grid {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (args.grid as f64 - 1.0)
            }
        })
        .collect();
    let target = if args.latent {
        PredictTarget::Latent
    } else {
        PredictTarget::Observation
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    writeln!(out, "id,t,mean,var")?;
    for s in &samples {
        let posterior = infer_scores(&model, s)?;
        let (mean, var) = predict_curve(&model, &posterior, s.covariate, &t_grid, target)?;
        for (i, &t) in t_grid.iter().enumerate() {
            writeln!(out, "{},{},{},{}", s.id, t, mean[i], var[i])?;
        }
    }
    out.flush()?;
    println!(
        "predicted {} curves on a {}-point grid to {}",
        samples.len(),
        args.grid,
        args.out.display()
    );
    Ok(())
}

fn cmd_eigen(args: EigenArgs) -> Result<()> {
    if args.n_z < 1 || args.n_t < 2 {
        return Err(Error::invalid("need n_z >= 1 and n_t >= 2"));
    }
    let model = load_model(&args.model)?;
    let (z_lo, z_hi) = model.meta.z_range;
    let z_grid: Vec<f64> = if args.n_z == 1 {
        vec![0.5 * (z_lo + z_hi)]
    } else {
        (0..args.n_z)
            .map(|i| {
                if i + 1 == args.n_z {
                    z_hi
                } else {
                    z_lo + (z_hi - z_lo) * i as f64 / (args.n_z as f64 - 1.0)
                }
            })
            .collect()
    };
    let (t_lo, t_hi) = model.meta.t_range;
    let t_grid: Vec<f64> = (0..args.n_t)
        .map(|i| {
            if i + 1 == args.n_t {
                t_hi
            } else {
                t_lo + (t_hi - t_lo) * i as f64 / (args.n_t as f64 - 1.0)
            }
        })
        .collect();
    let slices = crate::model::eigen_surface(&model.params, &model.bases.cov_z, &z_grid)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    writeln!(out, "z,t,j,value,eigenvalue")?;
    for slice in &slices {
        for j in 0..model.params.rank() {
            for &t in &t_grid {
                let b = model.bases.cov_t.eval_with(t, crate::basis::DomainPolicy::Clamp)?;
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    slice.z,
                    t,
                    j + 1,
                    slice.vectors.column(j).dot(&b),
                    slice.eigenvalues[j]
                )?;
            }
        }
    }
    out.flush()?;
    println!("eigen surfaces written to {}", args.out.display());
    Ok(())
}

fn cmd_study(args: StudyArgs) -> Result<()> {
    let ranks: Result<Vec<usize>> = args
        .ranks
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("cannot parse rank {v:?}")))
        })
        .collect();
    let repetitions = match (args.se_study, args.reps) {
        (_, Some(r)) => r.max(1),
        (true, None) => 20,
        (false, None) => 1,
    };
    let cfg = StudyConfig {
        n_train: args.n_train,
        n_test: args.n_test,
        m_per_curve: args.m_per_curve,
        seed: args.seed,
        ranks: ranks?,
        observe_fraction: args.observe_fraction,
        repetitions,
        out_dir: Some(args.out_dir.clone()),
        ..StudyConfig::default()
    };
    let report = run_study(&cfg)?;
    print!("{}", report.report_text);
    println!("study files written to {}", args.out_dir.display());
    Ok(())
}
