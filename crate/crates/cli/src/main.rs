use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use slowfast::averaging::{
    estimate_kappa_curves, tabulate_bar_g, tabulate_double_bar_f, DoubleAverageConfig, KappaConfig,
};
use slowfast::harness::output::{write_json, write_table_csv};
use slowfast::harness::{
    run_fluctuation_sweep, run_id, run_strong_sweep, run_weak_sweep, write_report, ExperimentConfig, SweepReport,
};
use slowfast::noise::PathNoise;
use slowfast::poisson::{estimate_double_bar_sigma, solve_poisson, tabulate_double_bar_sigma, PoissonSource};
use slowfast::sde::{run_coupled_path, CoupledRun, TimeGrid};

#[derive(Parser)]
#[command(
    name = "slowfast",
    version,
    about = "Slow-fast SDE averaging and fluctuation experiments"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment configuration (`.toml` or JSON); defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads (all cores by default). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// One coupled path (X^ε, Y^ε) with its averaged path Ȳ on the macro grid.
    Simulate {
        /// Scale separation; the first entry of `eps_list` by default.
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long, default_value_t = 0)]
        path: u64,
    },
    /// Tabulate F̄̄ and Ḡ (and Σ̄̄ when configured) over the configured y grid.
    Average,
    /// Feynman–Kac solution of the Poisson equation at one point.
    Poisson,
    /// Strong error sweep over eps_list.
    StrongSweep,
    /// Weak error sweep over eps_list with the configured test functions.
    WeakSweep,
    /// Fluctuation-integral sweep over eps_list.
    FluctuationSweep,
    /// κ1, κ2 (and optionally κ3) residual curves.
    KappaCurves,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let mut cfg = match &cli.global.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.global.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.global.out_dir {
        cfg.out_dir = d.clone();
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    match cli.command {
        Command::Simulate { eps, path } => simulate(&cfg, eps, path),
        Command::Average => average(&cfg),
        Command::Poisson => poisson(&cfg),
        Command::StrongSweep => sweep(&cfg, run_strong_sweep(&cfg)?),
        Command::WeakSweep => sweep(&cfg, run_weak_sweep(&cfg)?),
        Command::FluctuationSweep => sweep(&cfg, run_fluctuation_sweep(&cfg)?),
        Command::KappaCurves => kappa(&cfg),
    }
}

fn summary(cfg: &ExperimentConfig, kind: &str, start: Instant, result: serde_json::Value) -> Result<PathBuf> {
    let path = cfg.out_dir.join(format!("{kind}_summary.json"));
    write_json(
        &path,
        &json!({
            "run_id": run_id(kind, cfg)?,
            "kind": kind,
            "config": cfg,
            "wall_time_s": start.elapsed().as_secs_f64(),
            "result": result,
        }),
    )?;
    Ok(path)
}

fn report(paths: &[impl AsRef<Path>]) {
    for p in paths {
        println!("wrote {}", p.as_ref().display());
    }
}

fn sweep(cfg: &ExperimentConfig, r: SweepReport) -> Result<()> {
    let files = write_report(&cfg.out_dir, cfg, &r)?;
    for s in &r.series {
        match &s.fit {
            Some(f) => println!(
                "{} {}: slope {:.3} [{:.3}, {:.3}], {} of {} points used",
                r.kind.name(),
                s.label,
                f.slope,
                f.slope_ci.0,
                f.slope_ci.1,
                f.n_used,
                s.rows.len()
            ),
            None => println!(
                "{} {}: no fit ({})",
                r.kind.name(),
                s.label,
                s.fit_error.as_deref().unwrap_or("")
            ),
        }
    }
    report(&files);
    Ok(())
}

fn simulate(cfg: &ExperimentConfig, eps: Option<f64>, path: u64) -> Result<()> {
    let start = Instant::now();
    let sys = cfg.system()?;
    let avg = cfg.averaged(&sys)?;
    let eps = eps.unwrap_or(cfg.eps_list[0]);
    let grid = TimeGrid::new(0.0, cfg.horizon, cfg.macro_steps)?;
    let run = CoupledRun::new(eps, grid, cfg.h_rel);
    let mut rows = Vec::new();
    run_coupled_path(
        &sys,
        avg.as_ref(),
        &run,
        &cfg.x0(&sys),
        &cfg.y0,
        PathNoise::new(cfg.seed, path),
        |o| {
            let mut r = vec![o.t];
            r.extend_from_slice(o.x);
            r.extend_from_slice(o.y_eps);
            r.extend_from_slice(o.y_bar);
            rows.push(r);
        },
    )?;
    let mut header = vec!["t".to_string()];
    header.extend((0..sys.d1()).map(|i| format!("x{i}")));
    header.extend((0..sys.d2()).map(|i| format!("y_eps{i}")));
    header.extend((0..sys.d2()).map(|i| format!("y_bar{i}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let csv = cfg.out_dir.join("simulate.csv");
    write_table_csv(&csv, &header, &rows)?;
    let s = summary(
        cfg,
        "simulate",
        start,
        json!({ "eps": eps, "path": path, "micro_per_macro": run.micro_per_macro }),
    )?;
    report(&[csv, s]);
    Ok(())
}

fn average(cfg: &ExperimentConfig) -> Result<()> {
    let start = Instant::now();
    let sys = cfg.system()?;
    let a = &cfg.average;
    let t_avg = match (a.t_avg, sys.period) {
        (Some(t), _) | (None, Some(t)) => t,
        (None, None) => bail!("average.t_avg is required for non-periodic systems"),
    };
    let dcfg = DoubleAverageConfig {
        t_avg: Some(t_avg),
        n_nodes: a.n_nodes,
        cloud: cfg.cloud,
        ..Default::default()
    };
    let f = tabulate_double_bar_f(&sys, &a.y_grid, &dcfg)?;
    let g = tabulate_bar_g(&sys, &a.y_grid, t_avg, a.n_nodes)?;
    let mut files = vec![cfg.out_dir.join("double_bar_f.json"), cfg.out_dir.join("bar_g.json")];
    f.save_json(&files[0])?;
    g.save_json(&files[1])?;
    if a.homogenized {
        let mut h = cfg.kappa.homogenization.clone();
        h.t_avg = Some(t_avg);
        h.n_nodes = a.n_nodes;
        h.cloud = cfg.cloud;
        h.kappa_times.clear();
        let s = tabulate_double_bar_sigma(&sys, &a.y_grid, &h)?;
        let p = cfg.out_dir.join("double_bar_sigma.json");
        s.save_json(&p)?;
        files.push(p);
    }
    files.push(summary(
        cfg,
        "average",
        start,
        json!({ "t_avg": t_avg, "y_grid": a.y_grid }),
    )?);
    report(&files);
    Ok(())
}

fn poisson(cfg: &ExperimentConfig) -> Result<()> {
    let start = Instant::now();
    let sys = cfg.system()?;
    let p = &cfg.poisson;
    let mut solver = p.solver.clone();
    solver.seed = cfg.seed;
    let source = PoissonSource::centered_slow_drift(&sys);
    let v = solve_poisson(&sys, &source, p.t, &p.x, &p.y, &solver)?;
    let oracle = sys.oracles.phi.as_ref().map(|f| f(p.t, &p.x, &p.y));
    println!(
        "phi = {:?} ± {:?} (tail bound {:.2e})",
        v.value.value, v.value.se, v.horizon.tail_bound
    );
    let s = summary(cfg, "poisson", start, json!({ "estimate": v, "oracle": oracle }))?;
    report(&[s]);
    Ok(())
}

fn kappa(cfg: &ExperimentConfig) -> Result<()> {
    let start = Instant::now();
    let sys = cfg.system()?;
    let k = &cfg.kappa;
    let curves = estimate_kappa_curves(
        &sys,
        &k.y,
        &k.t_list,
        &KappaConfig {
            cloud: cfg.cloud,
            ..Default::default()
        },
    )?;
    let mut rows: Vec<Vec<f64>> = curves
        .kappa1
        .iter()
        .zip(&curves.kappa2)
        .map(|(a, b)| vec![a.x, a.error, a.se, b.error, b.se])
        .collect();
    let mut header = vec!["T", "kappa1", "kappa1_stderr", "kappa2", "kappa2_stderr"];
    let mut k3 = serde_json::Value::Null;
    if k.kappa3 {
        let mut h = k.homogenization.clone();
        h.kappa_times = k.t_list.clone();
        h.cloud = cfg.cloud;
        let hd = estimate_double_bar_sigma(&sys, &k.y, &h)?;
        for (r, p) in rows.iter_mut().zip(&hd.kappa3) {
            r.extend([p.error, p.se]);
        }
        header.extend(["kappa3", "kappa3_stderr"]);
        k3 = json!({
            "points": hd.kappa3,
            "fit": hd.kappa3_fit,
            "reference": hd.reference,
            "double_bar_sigma_sq": hd.double_bar_sigma_sq.iter().collect::<Vec<_>>(),
        });
    }
    let csv = cfg.out_dir.join("kappa.csv");
    write_table_csv(&csv, &header, &rows)?;
    let s = summary(cfg, "kappa", start, json!({ "kappa1_2": curves, "kappa3": k3 }))?;
    report(&[csv, s]);
    Ok(())
}
