use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use occfluct_core::gaussian::{self, CovKernel, Family};
use occfluct_core::harness::{
    self, estimate_cov, horizon_dir, limit_check, oracle_matrix, read_ensemble_csv, simulate_horizon, write_cov_report,
    write_ensemble, write_limit_check, write_matrix_csv, write_oracle, CovReport, EnsembleMeta, ExperimentConfig,
};
use occfluct_core::occupation::run_records;
use occfluct_core::rng::{replication_rng, GAUSSIAN_STREAM};
use occfluct_core::selfcheck::run_self_checks;
use occfluct_core::Error;

#[derive(Parser, Debug)]
#[command(name = "occfluct", version, about = "Occupation-time fluctuations of branching stable particle systems")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Experiment config (JSON); defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted-path override, e.g. `model.alpha=1.2`; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate ensembles for every configured horizon.
    Simulate {
        /// Also write one `s,value` CSV per replication.
        #[arg(long)]
        dump_records: bool,
    },
    /// Covariance report from saved ensembles.
    EstimateCov {
        /// A single `ensemble.csv`; defaults to every horizon under --out.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Exact finite-T covariance matrices from the moment oracle.
    OracleCov,
    /// Full pipeline across the horizon list with a trend verdict.
    LimitCheck,
    /// Sample Gaussian limit-process paths.
    GpSample {
        #[arg(long, default_value = "rl")]
        family: Family,
        #[arg(long = "H", default_value_t = 5.0 / 6.0)]
        h: f64,
        #[arg(long, default_value_t = 10)]
        n: usize,
        /// Grid `t_i = i / points`, `i = 1..=points`.
        #[arg(long, default_value_t = 20)]
        points: usize,
        /// Write paths here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also dump the kernel matrix as `s,t,value` CSV.
        #[arg(long)]
        matrix: Option<PathBuf>,
    },
    /// Fit the increment-covariance decay exponent.
    DepExp {
        /// Kernel family; without it the configured RL index plus FBM and
        /// sub-FBM at the same H are fitted.
        #[arg(long)]
        family: Option<Family>,
        #[arg(long = "H")]
        h: Option<f64>,
        /// Quadruple `u,v,s,t`.
        #[arg(long, default_value = "0,1,2,3", value_delimiter = ',')]
        quad: Vec<f64>,
        #[arg(long, default_value = "100,1000,10000,100000", value_delimiter = ',')]
        horizons: Vec<f64>,
    },
    /// Closed-form invariant suite.
    SelfCheck,
}

enum Outcome {
    Pass,
    Fail,
}

fn load_config(g: &GlobalArgs) -> occfluct_core::Result<ExperimentConfig> {
    let base = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut c = base.with_overrides(&g.overrides)?;
    if let Some(s) = g.seed {
        c.seed = s;
    }
    if let Some(w) = g.workers {
        c.workers = w;
    }
    if let Some(o) = &g.out {
        c.out = o.clone();
    }
    c.validate()?;
    Ok(c)
}

fn is_config_error(e: &Error) -> bool {
    matches!(e, Error::Config { .. } | Error::InvalidParameter { .. } | Error::Json(_))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_config_error(&e) { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> occfluct_core::Result<Outcome> {
    match cli.command {
        Command::SelfCheck => Ok(self_check()),
        Command::GpSample { family, h, n, points, output, matrix } => {
            let seed = load_config(&cli.global)?.seed;
            gp_sample(family, h, n, points, seed, output.as_deref(), matrix.as_deref())
        }
        Command::DepExp { family, h, quad, horizons } => {
            let config = load_config(&cli.global)?;
            dep_exp(&config, family, h, &quad, &horizons)
        }
        Command::Simulate { dump_records } => simulate(&load_config(&cli.global)?, dump_records),
        Command::EstimateCov { input } => estimate(&load_config(&cli.global)?, input.as_deref()),
        Command::OracleCov => oracle(&load_config(&cli.global)?),
        Command::LimitCheck => {
            let config = load_config(&cli.global)?;
            let check = limit_check(&config)?;
            write_limit_check(&config.out, &config, &check)?;
            let v = &check.verdict;
            println!("{}", v.primary.statistic);
            for (t, d) in v.primary.horizons.iter().zip(&v.primary.deviations) {
                println!("  T = {t:<8} deviation {d:.4}");
            }
            println!(
                "monotone {} final < {} {} pair failures {}",
                v.primary.monotone,
                v.primary.threshold,
                v.primary.final_ok,
                v.primary.pair_failures.len()
            );
            println!("{}", if v.pass { "PASS" } else { "FAIL" });
            Ok(if v.pass { Outcome::Pass } else { Outcome::Fail })
        }
    }
}

fn self_check() -> Outcome {
    let results = run_self_checks();
    let mut all = true;
    for r in &results {
        all &= r.pass;
        println!("{} {} {}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    if all {
        Outcome::Pass
    } else {
        Outcome::Fail
    }
}

fn gp_sample(
    family: Family,
    h: f64,
    n: usize,
    points: usize,
    seed: u64,
    output: Option<&Path>,
    matrix: Option<&Path>,
) -> occfluct_core::Result<Outcome> {
    let kernel = CovKernel::new(family, if family == Family::Bm { 0.5 } else { h })?;
    if points == 0 {
        return Err(Error::Config { field: "--points".into(), reason: "must be >= 1".into() });
    }
    let grid: Vec<f64> = (1..=points).map(|i| i as f64 / points as f64).collect();
    let mut rng = replication_rng(seed, GAUSSIAN_STREAM);
    let paths = gaussian::sample_paths(&kernel, &grid, n, &mut rng)?;
    let mut w: Box<dyn Write> = match output {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    writeln!(w, "path_id,t,value")?;
    for (id, path) in paths.iter().enumerate() {
        for (t, v) in grid.iter().zip(path) {
            writeln!(w, "{id},{t},{v}")?;
        }
    }
    w.flush()?;
    if let Some(p) = matrix {
        write_matrix_csv(p, &grid, &kernel.matrix(&grid))?;
    }
    Ok(Outcome::Pass)
}

fn dep_exp(
    config: &ExperimentConfig,
    family: Option<Family>,
    h: Option<f64>,
    quad: &[f64],
    horizons: &[f64],
) -> occfluct_core::Result<Outcome> {
    let [u, v, s, t] = quad else {
        return Err(Error::Config { field: "--quad".into(), reason: "need four values u,v,s,t".into() });
    };
    let default_h = 1.5 - 1.0 / config.model.alpha;
    let kernels: Vec<CovKernel> = match family {
        Some(Family::Bm) => vec![CovKernel::bm()],
        Some(f) => vec![CovKernel::new(f, h.unwrap_or(default_h))?],
        None => {
            let h = h.unwrap_or(default_h);
            vec![CovKernel::rl(h)?, CovKernel::fbm(h)?, CovKernel::sub_fbm(h)?]
        }
    };
    for k in kernels {
        let expected = match k.family() {
            Family::Rl => Some(1.5 - k.h()),
            Family::Fbm => Some(2.0 - 2.0 * k.h()),
            Family::SubFbm => Some(3.0 - 2.0 * k.h()),
            Family::Bm => None,
        };
        match gaussian::dependence_exponent_fit(&k, *u, *v, *s, *t, horizons) {
            Ok(kappa) => println!(
                "family={} H={} kappa_hat={kappa:.4} expected={}",
                k.family(),
                k.h(),
                expected.map_or("-".into(), |e| format!("{e:.4}"))
            ),
            Err(Error::NoPolynomialDecay(at)) => {
                println!("family={} H={} no polynomial decay (covariance 0 at T={at})", k.family(), k.h())
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Outcome::Pass)
}

fn simulate(config: &ExperimentConfig, dump_records: bool) -> occfluct_core::Result<Outcome> {
    for (i, &horizon) in config.horizons.iter().enumerate() {
        let (params, seed, ens) = simulate_horizon(config, i)?;
        let dir = horizon_dir(&config.out, horizon);
        write_ensemble(&dir, config, &params, seed, &ens)?;
        if dump_records || config.dump_records {
            let recs = run_records(&params, &config.phi, config.replications, seed, config.workers, &config.evolve_options())?;
            let rdir = dir.join("records");
            fs::create_dir_all(&rdir)?;
            for (rep, r) in recs.reps.iter().zip(&recs.items) {
                r.write_csv(&rdir.join(format!("rep{rep}.csv")))?;
            }
        }
        println!(
            "T = {horizon}: {} paths, {} aborted -> {}",
            ens.len(),
            ens.aborted.len(),
            dir.join("ensemble.csv").display()
        );
    }
    Ok(Outcome::Pass)
}

fn estimate_one(config: &ExperimentConfig, csv: &Path) -> occfluct_core::Result<()> {
    let dir = csv.parent().unwrap_or(Path::new("."));
    let meta_text = fs::read_to_string(dir.join("ensemble.json"))
        .map_err(|e| Error::Config { field: "--input".into(), reason: format!("sidecar ensemble.json: {e}") })?;
    let meta: EnsembleMeta = harness::parse_ensemble_meta(&meta_text)?;
    let ens = read_ensemble_csv(csv)?;
    let est = estimate_cov(&ens, config.bootstrap_resamples, meta.seed)?;
    let report = CovReport::build(
        &est,
        meta.horizon,
        meta.aborted.clone(),
        meta.seed,
        config.bootstrap_resamples,
        config.phi.integral(),
        config.limit()?,
        None,
        meta.config_hash.clone(),
    )?;
    write_cov_report(dir, &report)?;
    println!("T = {}: {} replications -> {}", meta.horizon, est.replications, dir.join("cov_report.json").display());
    Ok(())
}

fn estimate(config: &ExperimentConfig, input: Option<&Path>) -> occfluct_core::Result<Outcome> {
    match input {
        Some(p) => estimate_one(config, p)?,
        None => {
            for &t in &config.horizons {
                estimate_one(config, &horizon_dir(&config.out, t).join("ensemble.csv"))?;
            }
        }
    }
    Ok(Outcome::Pass)
}

fn oracle(config: &ExperimentConfig) -> occfluct_core::Result<Outcome> {
    for &t in &config.horizons {
        let m = oracle_matrix(config, t)?;
        let dir = horizon_dir(&config.out, t);
        write_oracle(&dir, config, t, &m)?;
        println!(
            "T = {t}: refinement change {:.2e} -> {}",
            m.max_rel_change,
            dir.join("oracle.csv").display()
        );
    }
    Ok(Outcome::Pass)
}
