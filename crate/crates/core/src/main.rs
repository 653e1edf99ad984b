use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde_json::json;

use ou_evolve::config::RunConfig;
use ou_evolve::grid::{lp_norm, GridFunction};
use ou_evolve::propagator::PropagatorCache;
use ou_evolve::suites::{self, Suite};
use ou_evolve::verify::System;
use ou_evolve::{Error, Result};

#[derive(Parser)]
#[command(name = "ou-evolve", version, about = "Evolution systems of non-autonomous Ornstein-Uhlenbeck operators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write U(t,s), g(t,s), Q_{t,s} and the covariance constants.
    Propagator(Common),
    /// Evolve the configured initial datum from s to t.
    Evolve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "wholespace")]
        system: String,
    },
    /// Run verification checks and write a pass/fail report.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "wholespace")]
        system: String,
        #[arg(long, default_value = "all")]
        suite: String,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output`, then `out/<experiment>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    configure_threads()?;
    let started = Instant::now();
    let (name, common) = match &cli.command {
        Command::Propagator(c) => ("propagator", c),
        Command::Evolve { common, .. } => ("evolve", common),
        Command::Verify { common, .. } => ("verify", common),
    };
    let cfg = RunConfig::from_path(&common.config)?;
    let out =
        common.out.clone().or_else(|| cfg.output.clone()).unwrap_or_else(|| Path::new("out").join(&cfg.experiment));
    std::fs::create_dir_all(&out)?;
    let (code, system) = match &cli.command {
        Command::Propagator(_) => (cmd_propagator(&cfg, &out)?, None),
        Command::Evolve { system, .. } => {
            let system: System = system.parse()?;
            (cmd_evolve(&cfg, system, &out)?, Some(system))
        }
        Command::Verify { system, suite, .. } => {
            let system: System = system.parse()?;
            (cmd_verify(&cfg, system, suite.parse()?, &out)?, Some(system))
        }
    };
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let meta = json!({
        "command": name,
        "system": system,
        "config": common.config,
        "version": env!("CARGO_PKG_VERSION"),
        "finished_unix_s": stamp,
        "wall_time_s": started.elapsed().as_secs_f64(),
        "threads": rayon::current_num_threads(),
    });
    write_json(&out.join("metadata.json"), &meta)?;
    Ok(code)
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("OU_EVOLVE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("OU_EVOLVE_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the worker pool: {e}")))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["row", "col", "value"])?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_record([i.to_string(), j.to_string(), format!("{:e}", m[(i, j)])])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_pairs(path: &Path, header: [&str; 2], rows: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for (a, b) in rows {
        w.write_record([format!("{a:e}"), format!("{b:e}")])?;
    }
    w.flush()?;
    Ok(())
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn cmd_propagator(cfg: &RunConfig, out: &Path) -> Result<u8> {
    let (t, s) = (cfg.times.t, cfg.times.s);
    let cache = PropagatorCache::new(cfg.coefficients()?, cfg.scheme.ode_tol, cfg.scheme.quad_nodes)?;
    let d = cache.dim();
    let u = cache.flow_u(t, s)?;
    let g = cache.drift_g(t, s)?;
    let q = if t > s { cache.covariance_q(t, s)?.q_ts.clone() } else { DMatrix::zeros(d, d) };
    let horizon = if t > s { t - s } else { 1.0 };
    let constants = cache.estimate_constants(horizon, 20)?;
    write_matrix(&out.join("u.csv"), &u)?;
    write_matrix(&out.join("q.csv"), &q)?;
    write_matrix(&out.join("g.csv"), &DMatrix::from_column_slice(d, 1, g.as_slice()))?;
    let mut w = csv::Writer::from_path(out.join("constants.csv"))?;
    w.write_record(["t", "s", "inv_sqrt", "det"])?;
    for p in &constants.pairs {
        w.write_record([p.t, p.s, p.inv_sqrt, p.det].map(|v| format!("{v:e}")))?;
    }
    w.flush()?;
    let report = json!({
        "experiment": cfg.experiment,
        "t": t,
        "s": s,
        "u": rows(&u),
        "g": g.as_slice(),
        "q": rows(&q),
        "constants": constants,
    });
    write_json(&out.join("propagator.json"), &report)?;
    println!("propagator: U, g, Q written to {}", out.display());
    Ok(0)
}

fn norms(f: &GridFunction) -> serde_json::Value {
    json!({ "l1": lp_norm(f, 1.0), "l2": lp_norm(f, 2.0), "max": f.max_abs() })
}

fn cmd_evolve(cfg: &RunConfig, system: System, out: &Path) -> Result<u8> {
    let (t, s) = (cfg.times.t, cfg.times.s);
    let setup = suites::setup(cfg, system)?;
    let f = setup.restrict(&cfg.initial_data(&setup.grid)?);
    let mut snapshots = Vec::new();
    let mut times = Vec::new();
    if let Some(r) = cfg.times.r.filter(|&r| r > s && r < t) {
        times.push((r, "snapshot_r.csv"));
    }
    times.push((t, "solution.csv"));
    let mut picard = None;
    for (time, file) in times {
        let u = if time == s {
            f.clone()
        } else if system == System::Exterior {
            let ex = setup.exterior_problem(time - s)?;
            let (u, diag) = ex.picard_apply(time, s, &f)?;
            if time == t {
                picard = Some(diag.to_report_json());
                write_json(&out.join("picard.json"), &diag.to_report_json())?;
            }
            u
        } else {
            setup.evolve(time, s, &f)?
        };
        u.write_csv(out.join(file))?;
        snapshots.push(json!({ "time": time, "file": file, "norms": norms(&u) }));
    }
    f.write_csv(out.join("initial.csv"))?;
    let report = json!({
        "experiment": cfg.experiment,
        "system": system,
        "s": s,
        "t": t,
        "initial": { "file": "initial.csv", "norms": norms(&f) },
        "snapshots": snapshots,
        "picard": picard,
    });
    write_json(&out.join("evolve.json"), &report)?;
    println!("evolve: {system:?} solution at t = {t} written to {}", out.display());
    Ok(0)
}

fn cmd_verify(cfg: &RunConfig, system: System, suite: Suite, out: &Path) -> Result<u8> {
    let report = suites::run(cfg, system, suite)?;
    for c in &report.checks {
        if let Some(table) = &c.table {
            write_pairs(&out.join(format!("{}.csv", c.name)), ["gap", "value"], table)?;
        }
        let verdict = if c.pass { "PASS" } else { "FAIL" };
        let target = c.target.map(|t| format!(" target {t:e}")).unwrap_or_default();
        println!(
            "{verdict} {} measured {:e}{target} tolerance {:e} ({:?})",
            c.name, c.measured, c.tolerance, c.relation
        );
    }
    write_json(&out.join("report.json"), &report)?;
    println!("verify: {} of {} checks passed", report.checks.iter().filter(|c| c.pass).count(), report.checks.len());
    Ok(if report.pass { 0 } else { 1 })
}
