//! `margint`: simulate paths, estimate additive components and run the Monte
//! Carlo studies.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration, 3 data or
//! estimation, 4 a study or self-test missed its pass band.

mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use margint::additive::MarginalIntegrator;
use margint::config::{validate_config, RunConfig};
use margint::experiments::{self, Scenario, StudyResult};
use margint::pathio;
use margint::process_sim::SamplePath;

use output::{num, stamped_csv, Run};

#[derive(Parser, Debug)]
#[command(name = "margint", version, about = "Marginal-integration estimation of additive components")]
struct Cli {
    /// Configuration file; the built-in default scenario when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Validate, print resolved bandwidths and exit.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Overrides the configured master seed.
    #[arg(long, global = true, env = "MARGINT_SEED")]
    seed: Option<u64>,
    /// Overrides the configured worker count.
    #[arg(long, global = true, env = "MARGINT_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one sample path.
    Simulate {
        /// Horizon T; the configured horizon when omitted.
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long, value_enum, default_value_t = PathFormat::Csv)]
        format: PathFormat,
    },
    /// Evaluate the regression estimate at points.
    Estimate {
        /// Path file (`.csv` or `.bin`).
        #[arg(long)]
        path: PathBuf,
        /// Evaluation point `x_1,...,x_d`; repeatable. Defaults to the density grid on C.
        #[arg(long = "at")]
        at: Vec<String>,
    },
    /// Estimate every additive component on its grid.
    Components {
        /// Path file; a path is simulated from the configuration when omitted.
        #[arg(long)]
        path: Option<PathBuf>,
    },
    /// Run a Monte Carlo study.
    Study {
        #[arg(value_enum)]
        kind: StudyKind,
    },
    /// Run the manufactured-data self-tests.
    Selftest,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum PathFormat {
    Csv,
    Bin,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum StudyKind {
    Rate,
    Normality,
    Coverage,
    DensityRate,
    DensityModes,
}

impl StudyKind {
    fn name(self) -> &'static str {
        match self {
            StudyKind::Rate => "rate",
            StudyKind::Normality => "normality",
            StudyKind::Coverage => "coverage",
            StudyKind::DensityRate => "density-rate",
            StudyKind::DensityModes => "density-modes",
        }
    }
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Data(anyhow::Error),
    Study(String),
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Study(_) => 4,
        }
    }
}

fn data<T>(r: margint::Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(|e| Failure::Data(e.into()))
}

fn other<T>(r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(Failure::Other)
}

fn load_config(cli: &Cli) -> std::result::Result<RunConfig, Failure> {
    let text = match &cli.config {
        Some(p) => fs::read_to_string(p)
            .with_context(|| format!("reading config {}", p.display()))
            .map_err(Failure::Config)?,
        None => String::new(),
    };
    let mut cfg = validate_config(&text).map_err(|e| Failure::Config(e.into()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.display().to_string();
    }
    Ok(cfg)
}

fn config_hash(cfg: &RunConfig) -> String {
    output::sha256_hex(cfg.canonical_text().as_bytes())
}

fn dry_run(cfg: &RunConfig) -> std::result::Result<(), Failure> {
    let rows = cfg.resolved_bandwidths().map_err(|e| Failure::Config(e.into()))?;
    println!("config_hash {}", config_hash(cfg));
    let heads: Vec<String> = (1..=cfg.dim).map(|l| format!("h_{l}")).collect();
    println!("{:>10} {:>12} {}", "T", "h_T", heads.iter().map(|h| format!("{h:>12}")).collect::<String>());
    for (t, ht, hl) in rows {
        println!(
            "{t:>10} {ht:>12.6} {}",
            hl.iter().map(|h| format!("{h:>12.6}")).collect::<String>()
        );
    }
    Ok(())
}

fn read_path(p: &Path) -> std::result::Result<SamplePath, Failure> {
    let file = fs::File::open(p)
        .with_context(|| format!("opening {}", p.display()))
        .map_err(Failure::Data)?;
    let reader = std::io::BufReader::new(file);
    let path = if p.extension().is_some_and(|e| e == "bin") {
        pathio::read_binary(reader)
    } else {
        pathio::read_csv(reader)
    };
    data(path)
}

fn parse_point(s: &str, d: usize) -> std::result::Result<Vec<f64>, Failure> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Failure::Data(anyhow!("bad point '{s}': {e}")))?;
    if v.len() != d {
        return Err(Failure::Data(anyhow!("point '{s}' has {} coordinates, expected {d}", v.len())));
    }
    Ok(v)
}

fn simulate(cfg: &RunConfig, run: &mut Run, horizon: Option<f64>, format: PathFormat) -> std::result::Result<(), Failure> {
    let scn = data(Scenario::new(cfg))?;
    let t = horizon.unwrap_or(cfg.horizon);
    let path = data(run.time("simulate", || scn.simulate(t, cfg.seed)))?;
    let mut bytes = Vec::new();
    let name = match format {
        PathFormat::Csv => {
            data(pathio::write_csv(&path, &mut bytes))?;
            "path.csv"
        }
        PathFormat::Bin => {
            data(pathio::write_binary(&path, &mut bytes))?;
            "path.bin"
        }
    };
    other(run.write(name, &bytes, true))?;
    println!("wrote {} observations to {}", path.len(), run.dir.join(name).display());
    Ok(())
}

fn estimate(cfg: &RunConfig, run: &mut Run, path_file: &Path, at: &[String]) -> std::result::Result<(), Failure> {
    let scn = data(Scenario::new(cfg))?;
    let path = read_path(path_file)?;
    if path.dim != cfg.dim {
        return Err(Failure::Data(anyhow!("path has d = {}, config has d = {}", path.dim, cfg.dim)));
    }
    let points = if at.is_empty() {
        cfg.density_grid()
    } else {
        at.iter().map(|s| parse_point(s, cfg.dim)).collect::<std::result::Result<_, _>>()?
    };
    let re = data(run.time("estimator", || scn.regression(&path, cfg.density_mode)))?;
    let mut header: Vec<String> = (1..=cfg.dim).map(|l| format!("x_{l}")).collect();
    header.extend(["m_hat".into(), "defined".into()]);
    let rows = points.iter().map(|p| {
        let (v, ok) = match re.eval(p) {
            Ok(v) => (num(v), "true"),
            Err(_) => (String::new(), "false"),
        };
        let mut r: Vec<String> = p.iter().map(|x| num(*x)).collect();
        r.extend([v, ok.to_string()]);
        r
    });
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let bytes = other(stamped_csv(&run.config_hash, &header_refs, rows))?;
    other(run.write("estimate.csv", &bytes, true))?;
    println!("estimated at {} points", points.len());
    Ok(())
}

fn components(cfg: &RunConfig, run: &mut Run, path_file: Option<&Path>) -> std::result::Result<(), Failure> {
    let scn = data(Scenario::new(cfg))?;
    let path = match path_file {
        Some(p) => read_path(p)?,
        None => data(run.time("simulate", || scn.simulate(cfg.horizon, cfg.seed)))?,
    };
    if path.dim != cfg.dim {
        return Err(Failure::Data(anyhow!("path has d = {}, config has d = {}", path.dim, cfg.dim)));
    }
    let re = data(scn.regression(&path, cfg.density_mode))?;
    let mi = data(run.time("integrate", || MarginalIntegrator::new(&re, &scn.q, cfg.quad_nodes)))?;
    let mut rows = Vec::new();
    let mut per = Vec::new();
    for l in 0..cfg.dim {
        let grid = cfg.component_grid(l);
        let c = data(mi.component(l, &grid))?;
        let mut sup = 0.0f64;
        for (x, v) in c.grid.iter().zip(&c.values) {
            let truth = scn.truth(l, *x);
            sup = sup.max((v - truth).abs());
            rows.push(vec![(l + 1).to_string(), num(*x), num(*v), num(truth)]);
        }
        per.push(json!({"coordinate": l + 1, "sup_error_vs_model": sup}));
    }
    let bytes = other(stamped_csv(&run.config_hash, &["coordinate", "x", "eta_hat", "eta_model"], rows))?;
    other(run.write("components.csv", &bytes, true))?;
    let summary = json!({
        "config_hash": run.config_hash,
        "horizon": path.horizon,
        "observations": path.len(),
        "density_mode": cfg.density_mode,
        "global_average": mi.global_average(),
        "global_average_model": margint::additive::true_global_average(&scn.model, &scn.q),
        "components": per,
    });
    other(run.write_json("components.json", &summary, true))?;
    println!("global average {:.6}", mi.global_average());
    Ok(())
}

fn write_study(run: &mut Run, res: &StudyResult) -> std::result::Result<(), Failure> {
    let name = res.study.clone();
    let mut doc = other(serde_json::to_value(res.without_timing()).map_err(Into::into))?;
    doc["config_hash"] = json!(run.config_hash);
    other(run.write_json(&format!("{name}.json"), &doc, true))?;
    let errors = res.errors.iter().map(|e| vec![num(e.horizon), e.replica.to_string(), e.seed.to_string(), num(e.value)]);
    let bytes = other(stamped_csv(&run.config_hash, &["horizon", "replica", "seed", "value"], errors))?;
    other(run.write(&format!("{name}_errors.csv"), &bytes, true))?;
    let label = res.series_label.clone();
    let series = res.series.iter().map(|(a, b)| vec![num(*a), num(*b)]);
    let bytes = other(stamped_csv(&run.config_hash, &["t", &label], series))?;
    other(run.write(&format!("{name}_series.csv"), &bytes, true))?;
    run.write_json(
        &format!("{name}_timing.json"),
        &json!({"config_hash": run.config_hash, "elapsed_seconds": res.elapsed_seconds}),
        false,
    )
    .map_err(Failure::Other)?;
    Ok(())
}

fn study(cfg: &RunConfig, run: &mut Run, kind: StudyKind) -> std::result::Result<(), Failure> {
    let scn = data(Scenario::new(cfg))?;
    let res = data(run.time(kind.name(), || match kind {
        StudyKind::Rate => experiments::mse_rate_study(&scn),
        StudyKind::Normality => experiments::normality_study(&scn),
        StudyKind::Coverage => experiments::coverage_study(&scn),
        StudyKind::DensityRate => experiments::density_rate_study(&scn),
        StudyKind::DensityModes => experiments::density_modes_study(&scn),
    }))?;
    write_study(run, &res)?;
    for c in &res.checks {
        println!(
            "{} {:<32} {:>14.6} in [{}, {}]{}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.lower,
            c.upper,
            if c.required { "" } else { " (diagnostic)" }
        );
    }
    if res.passed {
        Ok(())
    } else {
        Err(Failure::Study(format!("study {} missed its pass band", res.study)))
    }
}

fn selftest(cfg: &RunConfig, run: &mut Run) -> std::result::Result<(), Failure> {
    let checks = run.time("selftest", || experiments::self_tests(cfg.seed));
    for c in &checks {
        println!("{} {:<28} {:>14.6} in [{}, {}]", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.lower, c.upper);
    }
    let doc = json!({"config_hash": run.config_hash, "checks": checks});
    other(run.write_json("selftest.json", &doc, true))?;
    if checks.iter().all(|c| c.passed) {
        Ok(())
    } else {
        Err(Failure::Study("self-test failed".into()))
    }
}

fn command_name(c: &Command) -> String {
    match c {
        Command::Simulate { .. } => "simulate".into(),
        Command::Estimate { .. } => "estimate".into(),
        Command::Components { .. } => "components".into(),
        Command::Study { kind } => format!("study {}", kind.name()),
        Command::Selftest => "selftest".into(),
    }
}

fn run(cli: &Cli) -> std::result::Result<(), Failure> {
    let cfg = load_config(cli)?;
    if cli.dry_run {
        return dry_run(&cfg);
    }
    if cfg.workers > 0 {
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
    let hash = config_hash(&cfg);
    let mut run = other(Run::new(
        Path::new(&cfg.output_dir),
        hash,
        cfg.seed,
        rayon::current_num_threads(),
        &command_name(&cli.command),
    ))?;
    let outcome = match &cli.command {
        Command::Simulate { horizon, format } => simulate(&cfg, &mut run, *horizon, *format),
        Command::Estimate { path, at } => estimate(&cfg, &mut run, path, at),
        Command::Components { path } => components(&cfg, &mut run, path.as_deref()),
        Command::Study { kind } => study(&cfg, &mut run, *kind),
        Command::Selftest => selftest(&cfg, &mut run),
    };
    // The manifest is written even when a study misses its band.
    if outcome.is_ok() || matches!(outcome, Err(Failure::Study(_))) {
        let h = other(run.finish())?;
        println!("results_hash {h}");
    }
    outcome
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(e) => eprintln!("configuration error: {e:#}"),
                Failure::Data(e) => eprintln!("data error: {e:#}"),
                Failure::Study(m) => eprintln!("{m}"),
                Failure::Other(e) => eprintln!("error: {e:#}"),
            }
            ExitCode::from(f.code())
        }
    }
}
