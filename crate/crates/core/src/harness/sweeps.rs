//! `ε`-sweeps of strong, weak and fluctuation errors.
//!
//! Suprema over time are taken over the macro grid. Paths are processed in
//! blocks of [`BLOCK`] and merged in index order, so results do not depend on
//! the number of threads.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::deviation::{run_limit_path, LimitOUSpec};
use crate::error::{Error, Result};
use crate::noise::PathNoise;
use crate::rate::{fit_rate, RateFit, RatePoint};
use crate::sde::{run_coupled_path, AveragedDynamics, CoupledRun, MacroObservation, TimeGrid};
use crate::stats::{par_blocks, Moments, BLOCK};
use crate::system::SystemSpec;

use super::config::ExperimentConfig;
use super::panel::TestFunction;

/// Seed offset of the limit ensemble in weak sweeps.
const LIMIT_SEED_OFFSET: u64 = 0xD1B5_4A32_D192_ED03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Strong,
    Weak,
    Fluctuation,
}

impl SweepKind {
    pub fn name(&self) -> &'static str {
        match self {
            SweepKind::Strong => "strong",
            SweepKind::Weak => "weak",
            SweepKind::Fluctuation => "fluctuation",
        }
    }
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eps: f64,
    pub q: f64,
    pub error: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub censored: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSeries {
    pub label: String,
    pub rows: Vec<SweepRow>,
    /// Macro-grid time at which each supremum was attained.
    pub t_sup: Vec<f64>,
    pub fit: Option<RateFit>,
    pub fit_error: Option<String>,
    /// Error at the smallest `ε` below the error at the largest by more than
    /// three combined standard errors.
    pub trend_ok: bool,
}

impl SweepSeries {
    fn new(label: impl Into<String>, rows: Vec<SweepRow>, t_sup: Vec<f64>) -> Self {
        let points: Vec<RatePoint> = rows.iter().map(|r| RatePoint::new(r.eps, r.error, r.stderr)).collect();
        let (fit, fit_error) = match fit_rate(&points) {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let trend_ok = match (rows.first(), rows.last()) {
            (Some(a), Some(b)) if rows.len() > 1 => {
                b.error < a.error - 3.0 * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt()
            }
            _ => false,
        };
        Self {
            label: label.into(),
            rows,
            t_sup,
            fit,
            fit_error,
            trend_ok,
        }
    }
}

/// `Var Z^ε_T` against the variance of the limit ensemble at `T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub eps: f64,
    pub variance: f64,
    pub stderr: f64,
    pub limit_variance: f64,
    pub limit_stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub kind: SweepKind,
    pub system: String,
    pub series: Vec<SweepSeries>,
    /// Weak sweeps only.
    pub variance: Vec<VarianceRow>,
    pub wall_time_s: f64,
}

/// Run `n_paths` coupled paths in parallel blocks, folding observations into
/// per-block accumulators merged in order.
#[allow(clippy::too_many_arguments)]
fn coupled_ensemble<A, N, O, M>(
    sys: &SystemSpec,
    avg: &dyn AveragedDynamics,
    run: &CoupledRun,
    x0: &[f64],
    y0: &[f64],
    seed: u64,
    n_paths: usize,
    new_acc: N,
    observe: O,
    mut merge: M,
) -> Result<A>
where
    A: Send,
    N: Fn() -> A + Sync + Send,
    O: Fn(&mut A, &MacroObservation) + Sync + Send,
    M: FnMut(&mut A, A),
{
    let parts = par_blocks(n_paths, BLOCK, |range| -> Result<A> {
        let mut acc = new_acc();
        for i in range {
            run_coupled_path(sys, avg, run, x0, y0, PathNoise::new(seed, i as u64), |obs| {
                observe(&mut acc, obs)
            })
            .map_err(|e| Error::SweepAborted {
                eps: run.eps,
                path: i,
                source: Box::new(e),
            })?;
        }
        Ok(acc)
    });
    let mut it = parts.into_iter();
    let mut acc = it.next().ok_or(Error::EmptyCloud)??;
    for p in it {
        merge(&mut acc, p?);
    }
    Ok(acc)
}

fn merge_all(a: &mut [Moments], b: &[Moments]) {
    for (x, y) in a.iter_mut().zip(b) {
        x.merge(y);
    }
}

/// Largest mean over nodes `1..` with its SE and node index.
fn sup_over_nodes(m: &[Moments]) -> (f64, f64, usize) {
    let mut best = (0.0, 0.0, 0);
    for (k, m) in m.iter().enumerate().skip(1) {
        if m.mean > best.0 || k == 1 {
            best = (m.mean, m.se(), k);
        }
    }
    best
}

type SweepSetup = (SystemSpec, Box<dyn AveragedDynamics>, TimeGrid, Vec<f64>);

fn sweep_setup(cfg: &ExperimentConfig) -> Result<SweepSetup> {
    cfg.validate()?;
    let sys = cfg.system()?;
    let avg = cfg.averaged(&sys)?;
    let grid = TimeGrid::new(0.0, cfg.horizon, cfg.macro_steps)?;
    let x0 = cfg.x0(&sys);
    Ok((sys, avg, grid, x0))
}

/// Moment-type sweep: `sup_t E|v_t|^q` with `v` picked from each observation.
fn moment_sweep(
    cfg: &ExperimentConfig,
    kind: SweepKind,
    pick: impl Fn(&MacroObservation, &mut [f64]) + Sync + Send,
    track_fluctuation: bool,
) -> Result<SweepReport> {
    let start = Instant::now();
    let (sys, avg, grid, x0) = sweep_setup(cfg)?;
    let d2 = sys.d2();
    let nodes = grid.n_steps + 1;
    let mut rows = Vec::new();
    let mut t_sup = Vec::new();
    for &eps in &cfg.eps_list {
        let mut run = CoupledRun::new(eps, grid, cfg.h_rel);
        run.track_fluctuation = track_fluctuation;
        let q = cfg.q;
        let m = coupled_ensemble(
            &sys,
            avg.as_ref(),
            &run,
            &x0,
            &cfg.y0,
            cfg.seed,
            cfg.n_paths,
            || (vec![Moments::default(); nodes], vec![0.0; d2]),
            |acc, obs| {
                pick(obs, &mut acc.1);
                let norm = acc.1.iter().map(|v| v * v).sum::<f64>().sqrt();
                acc.0[obs.k].push(norm.powf(q));
            },
            |a, b| merge_all(&mut a.0, &b.0),
        )?
        .0;
        let (error, se, k) = sup_over_nodes(&m);
        rows.push(SweepRow {
            eps,
            q,
            error,
            stderr: se,
            n_paths: cfg.n_paths,
            censored: crate::rate::is_censored(error, se),
        });
        t_sup.push(grid.time(k));
    }
    Ok(SweepReport {
        kind,
        system: sys.name().to_string(),
        series: vec![SweepSeries::new(kind.name(), rows, t_sup)],
        variance: Vec::new(),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// `sup_t E|Y^ε_t − Ȳ_t|^q` on a shared `W²`.
pub fn run_strong_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    moment_sweep(
        cfg,
        SweepKind::Strong,
        |obs, out| {
            for ((o, a), b) in out.iter_mut().zip(obs.y_eps).zip(obs.y_bar) {
                *o = a - b;
            }
        },
        false,
    )
}

/// `sup_t E|∫₀ᵗ [F(r/ε, X^ε, Y^ε) − F̄̄(Y^ε)] dr|^q`.
pub fn run_fluctuation_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    moment_sweep(
        cfg,
        SweepKind::Fluctuation,
        |obs, out| out.copy_from_slice(obs.fluctuation),
        true,
    )
}

/// Per-node moments of every test function and of `z`, `z²` per component.
struct LawMoments {
    phi: Vec<Vec<Moments>>,
    z: Vec<Vec<Moments>>,
    z2: Vec<Vec<Moments>>,
}

impl LawMoments {
    fn new(n_phi: usize, nodes: usize, dim: usize) -> Self {
        Self {
            phi: vec![vec![Moments::default(); nodes]; n_phi],
            z: vec![vec![Moments::default(); dim]; nodes],
            z2: vec![vec![Moments::default(); dim]; nodes],
        }
    }

    fn push(&mut self, panel: &[TestFunction], k: usize, z: &[f64]) {
        for (m, f) in self.phi.iter_mut().zip(panel) {
            m[k].push(f.eval(z));
        }
        for (i, v) in z.iter().enumerate() {
            self.z[k][i].push(*v);
            self.z2[k][i].push(v * v);
        }
    }

    fn merge(&mut self, other: &LawMoments) {
        for (a, b) in self.phi.iter_mut().zip(&other.phi) {
            merge_all(a, b);
        }
        for (a, b) in self.z.iter_mut().zip(&other.z) {
            merge_all(a, b);
        }
        for (a, b) in self.z2.iter_mut().zip(&other.z2) {
            merge_all(a, b);
        }
    }

    /// Variance of component 0 at node `k` with a delta-method SE.
    fn variance(&self, k: usize) -> (f64, f64) {
        let (m1, m2) = (&self.z[k][0], &self.z2[k][0]);
        let v = m2.mean - m1.mean * m1.mean;
        let se = (m2.se().powi(2) + (2.0 * m1.mean * m1.se()).powi(2)).sqrt();
        (v, se)
    }
}

/// Law of the limit `Z̄` at the macro nodes from an independent ensemble
/// simulated on the finer limit grid.
fn limit_ensemble(
    avg: &dyn AveragedDynamics,
    spec: &LimitOUSpec,
    cfg: &ExperimentConfig,
    panel: &[TestFunction],
) -> Result<LawMoments> {
    let grid = TimeGrid::new(0.0, cfg.horizon, cfg.limit_steps)?;
    let stride = cfg.limit_steps / cfg.macro_steps;
    let nodes = cfg.macro_steps + 1;
    let n = cfg.limit_paths.unwrap_or(cfg.n_paths);
    let seed = cfg.seed.wrapping_add(LIMIT_SEED_OFFSET);
    let parts = par_blocks(n, BLOCK, |range| -> Result<LawMoments> {
        let mut acc = LawMoments::new(panel.len(), nodes, spec.dim);
        for i in range {
            run_limit_path(
                avg,
                spec,
                &cfg.y0,
                grid,
                PathNoise::new(seed, i as u64),
                |k, _, _, z| {
                    if k % stride == 0 {
                        acc.push(panel, k / stride, z);
                    }
                },
            )
            .map_err(|e| Error::SweepAborted {
                eps: 0.0,
                path: i,
                source: Box::new(e),
            })?;
        }
        Ok(acc)
    });
    fold_parts(parts)
}

fn fold_parts(parts: Vec<Result<LawMoments>>) -> Result<LawMoments> {
    let mut it = parts.into_iter();
    let mut acc = it.next().ok_or(Error::EmptyCloud)??;
    for p in it {
        acc.merge(&p?);
    }
    Ok(acc)
}

/// `sup_t |Eφ(Z^ε_t) − Eφ(Z̄_t)|` for each test function, with `Z^ε` from
/// coupled paths and `Z̄` from an independent limit ensemble.
pub fn run_weak_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    let start = Instant::now();
    let (sys, avg, grid, x0) = sweep_setup(cfg)?;
    let spec = cfg.limit_spec(&sys)?;
    let panel = &cfg.test_functions;
    if panel.is_empty() {
        return Err(Error::Config("weak sweep needs at least one test function".into()));
    }
    let nodes = grid.n_steps + 1;
    let limit = limit_ensemble(avg.as_ref(), &spec, cfg, panel)?;
    let mut per_phi: Vec<(Vec<SweepRow>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); panel.len()];
    let mut variance = Vec::new();
    for &eps in &cfg.eps_list {
        let run = CoupledRun::new(eps, grid, cfg.h_rel);
        let scale = eps.powf(spec.theta);
        let d2 = sys.d2();
        let law = coupled_ensemble(
            &sys,
            avg.as_ref(),
            &run,
            &x0,
            &cfg.y0,
            cfg.seed,
            cfg.n_paths,
            || (LawMoments::new(panel.len(), nodes, d2), vec![0.0; d2]),
            |acc, obs| {
                for ((z, a), b) in acc.1.iter_mut().zip(obs.y_eps).zip(obs.y_bar) {
                    *z = (a - b) / scale;
                }
                let z = std::mem::take(&mut acc.1);
                acc.0.push(panel, obs.k, &z);
                acc.1 = z;
            },
            |a, b| a.0.merge(&b.0),
        )?
        .0;
        for (j, (rows, t_sup)) in per_phi.iter_mut().enumerate() {
            let mut best = (0.0, 0.0, 0usize);
            for k in 0..nodes {
                let (a, b) = (&law.phi[j][k], &limit.phi[j][k]);
                let diff = (a.mean - b.mean).abs();
                if diff > best.0 || k == 0 {
                    best = (diff, (a.se().powi(2) + b.se().powi(2)).sqrt(), k);
                }
            }
            rows.push(SweepRow {
                eps,
                q: 1.0,
                error: best.0,
                stderr: best.1,
                n_paths: cfg.n_paths,
                censored: crate::rate::is_censored(best.0, best.1),
            });
            t_sup.push(grid.time(best.2));
        }
        let (v, se) = law.variance(nodes - 1);
        let (lv, lse) = limit.variance(nodes - 1);
        variance.push(VarianceRow {
            eps,
            variance: v,
            stderr: se,
            limit_variance: lv,
            limit_stderr: lse,
        });
    }
    Ok(SweepReport {
        kind: SweepKind::Weak,
        system: sys.name().to_string(),
        series: panel
            .iter()
            .zip(per_phi)
            .map(|(f, (rows, t_sup))| SweepSeries::new(f.label(), rows, t_sup))
            .collect(),
        variance,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
