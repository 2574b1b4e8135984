//! Monte Carlo runs, experiments and the file outputs behind the CLI.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{metadata_row, ExperimentConfig, ModelConfig};
use crate::decomposition::{decompose, Decomposition};
use crate::dici::{self, DiciInit, JorConfig};
use crate::error::{DkfError, Result};
use crate::filters::{riccati_traces, CentralFilter, Lif, LifConfig, StepDiagnostics};
use crate::model::{self, GlobalModel, NoiseFactors};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    Cif,
    Clbif,
    Lif,
}

impl FilterKind {
    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Cif => "cif",
            FilterKind::Clbif => "clbif",
            FilterKind::Lif => "lif",
        }
    }
}

impl std::str::FromStr for FilterKind {
    type Err = DkfError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cif" => Ok(FilterKind::Cif),
            "clbif" => Ok(FilterKind::Clbif),
            "lif" => Ok(FilterKind::Lif),
            other => Err(DkfError::InvalidArgument(format!("unknown filter {other}"))),
        }
    }
}

/// States and observations of all trials, one `n x trials` / `p x trials`
/// matrix per step.
#[derive(Debug, Clone)]
pub struct McData {
    pub states: Vec<DMatrix<f64>>,
    pub observations: Vec<DMatrix<f64>>,
}

impl McData {
    pub fn trials(&self) -> usize {
        self.states.first().map_or(0, |m| m.ncols())
    }
    pub fn steps(&self) -> usize {
        self.states.len()
    }
}

/// Simulates `trials` independent realizations; trial `t` uses stream `t`.
pub fn simulate_trials(m: &GlobalModel, k_max: usize, seed: u64, trials: usize) -> Result<McData> {
    let nf = NoiseFactors::new(m)?;
    let runs: Vec<model::Trajectory> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = model::trial_rng(seed, t as u64);
            let x0 = &nf.s0 * model::standard_normal(&mut rng, m.n());
            model::simulate_from(m, &nf, x0, k_max, &mut rng, seed)
        })
        .collect();
    let gather = |f: &dyn Fn(&model::Trajectory, usize) -> nalgebra::DVector<f64>, rows: usize| {
        (0..k_max)
            .map(|k| {
                let mut out = DMatrix::zeros(rows, trials);
                for (t, r) in runs.iter().enumerate() {
                    out.set_column(t, &f(r, k));
                }
                out
            })
            .collect::<Vec<_>>()
    };
    Ok(McData {
        states: gather(&|r, k| r.states[k].clone(), m.n()),
        observations: gather(&|r, k| r.observations[k].clone(), m.p()),
    })
}

/// Mean squared estimation error per step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct McCurve {
    pub mse: Vec<f64>,
    /// First step whose error was not finite or whose filter failed numerically.
    pub diverged_at: Option<usize>,
    pub diagnostics: Vec<StepDiagnostics>,
    /// Per-sensor flops accumulated over the run (LIF only).
    pub flops: Vec<u64>,
    /// Per-sensor transmissions over the run (LIF only).
    pub sensor_messages: Vec<u64>,
    pub max_payload: usize,
}

impl McCurve {
    pub fn steady_state(&self, window: usize) -> f64 {
        let k = self.mse.len();
        let w = window.min(k).max(1);
        self.mse[k - w..].iter().sum::<f64>() / w as f64
    }

    pub fn peak(&self) -> f64 {
        self.mse.iter().fold(0.0, |m: f64, v| if v.is_nan() { f64::INFINITY } else { m.max(*v) })
    }

    fn diverge(&mut self, k: usize, steps: usize) {
        self.diverged_at = Some(k);
        self.mse.resize(steps, f64::INFINITY);
        self.mse[k..].fill(f64::INFINITY);
    }
}

fn mse(x: &DMatrix<f64>, xhat: &DMatrix<f64>) -> f64 {
    (x - xhat).norm_squared() / x.ncols() as f64
}

fn is_numeric(e: &DkfError) -> bool {
    matches!(
        e,
        DkfError::NotPositiveDefinite(_)
            | DkfError::SingularWindow { .. }
            | DkfError::SingularPivot { .. }
            | DkfError::NoConvergence { .. }
            | DkfError::Diverged { .. }
    )
}

/// CIF (`band = None`) or CLBIF over all trials in one batch.
pub fn run_central(m: &GlobalModel, band: Option<usize>, data: &McData) -> Result<McCurve> {
    let f = match band {
        None => CentralFilter::cif(m)?,
        Some(l) => CentralFilter::clbif(m, l)?,
    };
    let mut st = f.init(data.trials())?;
    let mut curve = McCurve::default();
    for k in 0..data.steps() {
        let step = f.step(&st, &data.observations[k]).and_then(|(filt, pred)| Ok((filt.estimate()?, pred)));
        match step {
            Ok((x, pred)) => {
                let e = mse(&data.states[k], &x);
                curve.mse.push(e);
                if !e.is_finite() {
                    curve.diverge(k, data.steps());
                    break;
                }
                st = pred;
            }
            Err(e) if is_numeric(&e) => {
                curve.diverge(k, data.steps());
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(curve)
}

/// LIF over all trials in lockstep (one covariance pass per step).
pub fn run_lif(m: &GlobalModel, dec: &Decomposition, cfg: LifConfig, data: &McData, log: bool) -> Result<(McCurve, Option<String>)> {
    let mut lif = Lif::new(m, dec, cfg, data.trials())?;
    lif.net.set_logging(log);
    let mut curve = McCurve::default();
    for k in 0..data.steps() {
        match lif.step(&data.observations[k]) {
            Ok((diag, x)) => {
                let e = mse(&data.states[k], &x);
                curve.mse.push(e);
                curve.diagnostics.push(diag);
                if !e.is_finite() {
                    curve.diverge(k, data.steps());
                    break;
                }
            }
            Err(e) if is_numeric(&e) => {
                curve.diverge(k, data.steps());
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let rep = lif.net.traffic_report();
    curve.flops = lif.flops();
    curve.sensor_messages = rep.by_sensor.iter().map(|t| t.messages).collect();
    curve.max_payload = rep.max_payload;
    Ok((curve, log.then(|| lif.net.log_csv())))
}

/// LIF settings from an experiment config; `budget` fixes the iteration
/// count of both DICI stages, otherwise they run to the stopping rule.
pub fn lif_config(exp: &ExperimentConfig, budget: Option<usize>) -> LifConfig {
    let converged = JorConfig {
        gamma: exp.gamma,
        max_iter: exp.dici_max_iter,
        tol: exp.dici_tol,
        window: exp.dici_window.max(1),
    };
    LifConfig {
        consensus_tol: exp.consensus_tol,
        consensus_max_iter: exp.consensus_max_iter,
        dici: budget.map_or(converged, |t| JorConfig::budget(exp.gamma, t)),
        dici_vector: budget.map_or(converged, |t| JorConfig::budget(exp.gamma, t)),
        init: DiciInit::Blended,
        payload_limit: None,
    }
}

/// Steady-state `trace(S_{k|k})` of the exact filter.
pub fn riccati_steady(m: &GlobalModel) -> Result<f64> {
    let tr = riccati_traces(m, 500)?;
    Ok(*tr.last().unwrap())
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub riccati: Vec<f64>,
    pub riccati_steady: f64,
    pub direct: McCurve,
    /// Both DICI stages run to the stopping rule.
    pub converged: McCurve,
    pub budgets: Vec<(usize, McCurve)>,
    /// One iteration from the unblended local inverses.
    pub decoupled: McCurve,
}

/// Trace versus matrix DICI budget, with the banded direct-inverse filter and
/// the Riccati trace as references. All runs share the same realizations.
pub fn dici_sweep(exp: &ExperimentConfig) -> Result<SweepResult> {
    let m = exp.model.build()?;
    let dec = decompose(&m, exp.l)?;
    let data = simulate_trials(&m, exp.k_max, exp.seed, exp.trials)?;
    let direct = run_central(&m, Some(exp.l), &data)?;
    let converged = run_lif(&m, &dec, lif_config(exp, None), &data, false)?.0;
    let mut budgets = Vec::new();
    for &t in &exp.budgets {
        budgets.push((t, run_lif(&m, &dec, lif_config(exp, Some(t)), &data, false)?.0));
    }
    let mut cfg = lif_config(exp, Some(1));
    cfg.init = DiciInit::LocalInverse;
    let decoupled = run_lif(&m, &dec, cfg, &data, false)?.0;
    Ok(SweepResult {
        riccati: riccati_traces(&m, exp.k_max)?,
        riccati_steady: riccati_steady(&m)?,
        direct,
        converged,
        budgets,
        decoupled,
    })
}

// ---------------------------------------------------------------------------
// Commands.

fn write(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, body)?;
    Ok(())
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:e}")
    } else {
        "inf".into()
    }
}

/// Writes the model (as given and fully explicit), the decomposition report
/// the fusion graph edges and one realization of `k_max` steps.
pub fn cmd_generate(exp: &ExperimentConfig, out: &Path) -> Result<()> {
    let m = exp.model.build()?;
    write(&out.join("model.toml"), &exp.model.to_toml())?;
    write(&out.join("model_explicit.toml"), &ModelConfig::explicit_from(&m)?.to_toml())?;
    let traj = model::simulate(&m, exp.k_max, exp.seed)?;
    let meta = metadata_row(&exp.hash(), exp.seed, &[]);
    write(&out.join("states.csv"), &(meta.clone() + &traj.states_csv()))?;
    write(&out.join("observations.csv"), &(meta + &traj.observations_csv()))?;
    cmd_decompose(exp, out)
}

pub fn cmd_decompose(exp: &ExperimentConfig, out: &Path) -> Result<()> {
    let m = exp.model.build()?;
    let dec = decompose(&m, exp.l)?;
    write(&out.join("decomposition.json"), &dec.report())?;
    let meta = metadata_row(&exp.hash(), exp.seed, &[("l", exp.l.to_string())]);
    write(&out.join("fusion_edges.csv"), &(meta + &dec.topology.edges_csv()))
}

/// Averaged `k,trace` curve per band width (the CIF ignores it). Returns the
/// steady-state value per written curve.
pub fn cmd_run(exp: &ExperimentConfig, kind: FilterKind, out: &Path, log: bool) -> Result<Vec<(usize, f64)>> {
    let m = exp.model.build()?;
    let data = simulate_trials(&m, exp.k_max, exp.seed, exp.trials)?;
    let ls: Vec<usize> = if kind == FilterKind::Cif { vec![m.n() - 1] } else { exp.l_values.clone() };
    let mut summary = Vec::new();
    for l in ls {
        if l >= m.n() {
            return Err(DkfError::InvalidArgument(format!("L = {l} must be below n = {}", m.n())));
        }
        let meta = metadata_row(&exp.hash(), exp.seed, &[("filter", kind.name().into()), ("l", l.to_string())]);
        let curve = match kind {
            FilterKind::Cif => run_central(&m, None, &data)?,
            FilterKind::Clbif => run_central(&m, Some(l), &data)?,
            FilterKind::Lif => {
                let dec = decompose(&m, l)?;
                let (curve, log_csv) = run_lif(&m, &dec, lif_config(exp, None), &data, log)?;
                let mut s = meta.clone() + "k,trace_S_filtered,trace_S_predicted,consensus_iters,dici_iters,messages\n";
                for d in &curve.diagnostics {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{}",
                        d.k,
                        fmt(d.trace_s_filtered),
                        fmt(d.trace_s_predicted),
                        d.consensus_iters,
                        d.dici_iters,
                        d.messages
                    );
                }
                write(&out.join(format!("lif_steps_L{l}.csv")), &s)?;
                if let Some(lc) = log_csv {
                    write(&out.join(format!("messages_L{l}.csv")), &(meta.clone() + &lc))?;
                }
                curve
            }
        };
        if let Some(k) = curve.diverged_at {
            return Err(DkfError::Diverged {
                step: k,
                trace: curve.mse.get(k).copied().unwrap_or(f64::INFINITY),
            });
        }
        let name = if kind == FilterKind::Cif { "trace_cif.csv".to_string() } else { format!("trace_{}_L{l}.csv", kind.name()) };
        let mut s = meta + "k,trace\n";
        for (k, v) in curve.mse.iter().enumerate() {
            let _ = writeln!(s, "{k},{}", fmt(*v));
        }
        write(&out.join(name), &s)?;
        summary.push((l, curve.steady_state(exp.steady_window)));
    }
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContractionSummary {
    pub trials: usize,
    pub max: f64,
    pub min: f64,
}

/// Contraction quotients of random trials (`trial,alpha`) and their histogram.
pub fn contraction_alphas(n: usize, gamma: f64, trials: usize, seed: u64) -> Result<Vec<f64>> {
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = model::trial_rng(seed, t as u64);
            dici::contraction_trial(n, gamma, &mut rng).map(|(a, _)| a)
        })
        .collect()
}

pub fn cmd_exp_contraction(exp: &ExperimentConfig, out: &Path) -> Result<ContractionSummary> {
    let alphas = contraction_alphas(exp.n, exp.gamma, exp.trials, exp.seed)?;
    let meta = metadata_row(&exp.hash(), exp.seed, &[("n", exp.n.to_string()), ("gamma", exp.gamma.to_string())]);
    let mut s = meta.clone() + "trial,alpha\n";
    for (t, a) in alphas.iter().enumerate() {
        let _ = writeln!(s, "{t},{a:e}");
    }
    write(&out.join("contraction.csv"), &s)?;
    let mut h = vec![0usize; exp.bins];
    for a in &alphas {
        let b = ((a * exp.bins as f64) as usize).min(exp.bins - 1);
        h[b] += 1;
    }
    let mut s = meta + "bin_lo,bin_hi,count\n";
    for (b, c) in h.iter().enumerate() {
        let _ = writeln!(s, "{},{},{c}", b as f64 / exp.bins as f64, (b + 1) as f64 / exp.bins as f64);
    }
    write(&out.join("contraction_hist.csv"), &s)?;
    Ok(ContractionSummary {
        trials: alphas.len(),
        max: alphas.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        min: alphas.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

pub fn cmd_exp_error_bound(exp: &ExperimentConfig, out: &Path) -> Result<dici::ErrorBoundStats> {
    let stats = dici::error_bound_experiment(exp.n, exp.l, exp.gamma, exp.iterations, exp.trials, exp.seed)?;
    let meta = metadata_row(
        &exp.hash(),
        exp.seed,
        &[("n", exp.n.to_string()), ("l", exp.l.to_string()), ("gamma", exp.gamma.to_string())],
    );
    let mut s = meta + "iter,max_diff,min_diff,mean_diff\n";
    for t in 0..stats.mean_diff.len() {
        let _ = writeln!(s, "{},{:e},{:e},{:e}", t + 1, stats.max_diff[t], stats.min_diff[t], stats.mean_diff[t]);
    }
    write(&out.join("error_bound.csv"), &s)?;
    Ok(stats)
}

pub fn cmd_exp_dici_sweep(exp: &ExperimentConfig, out: &Path) -> Result<SweepResult> {
    let r = dici_sweep(exp)?;
    let w = exp.steady_window;
    let meta = metadata_row(
        &exp.hash(),
        exp.seed,
        &[
            ("l", exp.l.to_string()),
            ("gamma", exp.gamma.to_string()),
            ("riccati", fmt(r.riccati_steady)),
            ("direct", fmt(r.direct.steady_state(w))),
            ("converged", fmt(r.converged.steady_state(w))),
            ("decoupled", fmt(r.decoupled.steady_state(w))),
        ],
    );
    let mut s = meta.clone() + "t,trace\n";
    for (t, c) in &r.budgets {
        let _ = writeln!(s, "{t},{}", fmt(c.steady_state(w)));
    }
    write(&out.join("dici_sweep.csv"), &s)?;
    let mut s = meta + "k,riccati,direct,converged,decoupled";
    for (t, _) in &r.budgets {
        let _ = write!(s, ",t{t}");
    }
    s.push('\n');
    for k in 0..exp.k_max {
        let _ = write!(
            s,
            "{k},{},{},{},{}",
            fmt(r.riccati[k]),
            fmt(r.direct.mse[k]),
            fmt(r.converged.mse[k]),
            fmt(r.decoupled.mse[k])
        );
        for (_, c) in &r.budgets {
            let _ = write!(s, ",{}", fmt(c.mse[k]));
        }
        s.push('\n');
    }
    write(&out.join("dici_sweep_curves.csv"), &s)?;
    Ok(r)
}
