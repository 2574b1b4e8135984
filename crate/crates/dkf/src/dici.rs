//! Iterative inversion: JOR, the iterate-collapse DICI-OR algorithm (central
//! reference and distributed implementation), and the contraction and error
//! bound experiments.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;

use crate::banded::{self, BandProfile};
use crate::decomposition::SubSystem;
use crate::error::{DkfError, Result};
use crate::linalg;
use crate::model::trial_rng;
use crate::simulator::{CommNetwork, Message, Phase};

/// Relaxation and stopping rule. Iteration stops when the largest change over
/// the last `window` iterations is below `tol`; `tol == 0` means a fixed
/// budget of exactly `max_iter` iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JorConfig {
    pub gamma: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub window: usize,
}

pub const DEFAULT_GAMMA: f64 = 0.1;

impl JorConfig {
    pub fn new(gamma: f64, max_iter: usize, tol: f64) -> Result<Self> {
        let cfg = Self {
            gamma,
            max_iter,
            tol,
            window: 1,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fixed iteration budget `t`.
    pub fn budget(gamma: f64, t: usize) -> Self {
        Self {
            gamma,
            max_iter: t,
            tol: 0.0,
            window: 1,
        }
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window.max(1);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(DkfError::InvalidArgument("gamma must be positive".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(DkfError::InvalidArgument("tol must be non-negative".into()));
        }
        Ok(())
    }

    pub fn is_budget(&self) -> bool {
        self.tol == 0.0
    }
}

/// Tracks the stopping rule over a sliding window of per-iteration changes.
#[derive(Debug, Clone)]
struct Stopper {
    cfg: JorConfig,
    recent: Vec<f64>,
    iterations: usize,
}

impl Stopper {
    fn new(cfg: JorConfig) -> Self {
        Self {
            cfg,
            recent: Vec::new(),
            iterations: 0,
        }
    }

    /// Records one iteration's change; returns Ok(true) when done.
    fn record(&mut self, change: f64) -> Result<bool> {
        self.iterations += 1;
        if self.cfg.is_budget() {
            return Ok(self.iterations >= self.cfg.max_iter);
        }
        self.recent.push(change);
        if self.recent.len() > self.cfg.window {
            self.recent.remove(0);
        }
        let worst = self.recent.iter().fold(0.0_f64, |m, v| m.max(*v));
        if self.recent.len() == self.cfg.window && worst < self.cfg.tol {
            return Ok(true);
        }
        if self.iterations >= self.cfg.max_iter {
            return Err(DkfError::NoConvergence {
                iterations: self.iterations,
                residual: worst,
            });
        }
        Ok(false)
    }

    fn residual(&self) -> f64 {
        self.recent.last().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct JorResult {
    pub s: DMatrix<f64>,
    pub iterations: usize,
    /// `‖S_t - reference‖₂` for `t = 0, 1, ...` when a reference was given.
    pub errors: Vec<f64>,
    pub rho: f64,
}

fn inv_diag(z: &DMatrix<f64>) -> Result<DVector<f64>> {
    let d = z.diagonal();
    if d.iter().any(|v| !(*v > 0.0)) {
        return Err(DkfError::NotPositiveDefinite("diagonal must be positive".into()));
    }
    Ok(d.map(|v| 1.0 / v))
}

/// The multiplier `P_γ = I - γ M⁻¹ Z`.
pub fn jor_multiplier(z: &DMatrix<f64>, gamma: f64) -> Result<DMatrix<f64>> {
    let mi = inv_diag(z)?;
    let n = z.nrows();
    Ok(DMatrix::from_fn(n, n, |r, c| {
        (if r == c { 1.0 } else { 0.0 }) - gamma * mi[r] * z[(r, c)]
    }))
}

/// `S_{t+1} = P_γ S_t + γ M⁻¹` from `S_0 = M⁻¹` until `‖S_{t+1} - S_t‖_F < tol`.
pub fn jor_inverse(z: &DMatrix<f64>, cfg: &JorConfig, reference: Option<&DMatrix<f64>>) -> Result<JorResult> {
    cfg.validate()?;
    let rho = linalg::jor_spectral_radius(z, cfg.gamma);
    if rho >= 1.0 {
        return Err(DkfError::NotContractive { rho });
    }
    let mi = inv_diag(z)?;
    let p = jor_multiplier(z, cfg.gamma)?;
    let gm = DMatrix::from_diagonal(&(&mi * cfg.gamma));
    let mut s = DMatrix::from_diagonal(&mi);
    let mut errors = Vec::new();
    let err = |s: &DMatrix<f64>| reference.map(|r| linalg::spectral_norm(&(s - r)));
    errors.extend(err(&s));
    let mut stop = Stopper::new(*cfg);
    loop {
        if cfg.is_budget() && cfg.max_iter == 0 {
            break;
        }
        let next = &p * &s + &gm;
        let change = (&next - &s).norm();
        s = next;
        errors.extend(err(&s));
        if stop.record(change)? {
            break;
        }
    }
    Ok(JorResult {
        s,
        iterations: stop.iterations,
        errors,
        rho,
    })
}

/// One DICI-OR update on the global band: collapse fills the off-band
/// entries of `S_t` that the iterate needs, then every in-band entry becomes
/// the symmetrized `(P_γ Ŝ_t)_ij` plus `γ / m_ii` on the diagonal.
pub fn dici_or_round(z: &BandProfile, s: &BandProfile, gamma: f64) -> Result<BandProfile> {
    let l = z.width();
    let full = banded::complete(s, 2 * l)?;
    let mut next = BandProfile::zeros_local(s.n(), s.offset(), s.len(), l);
    iterate_pairs(z, &full, s.offset(), gamma, s.pairs(), |a, b, v| next.set(a, b, v));
    Ok(next)
}

/// Central reference implementation of DICI-OR on a global L-banded `z`,
/// started from `s0` (default `M⁻¹`). Returns the final band and the number of
/// iterations.
pub fn dici_or_central(z: &BandProfile, cfg: &JorConfig, s0: Option<BandProfile>) -> Result<(BandProfile, usize)> {
    cfg.validate()?;
    let mut s = s0.unwrap_or_else(|| diag_inverse_band(z));
    let mut stop = Stopper::new(*cfg);
    if cfg.is_budget() && cfg.max_iter == 0 {
        return Ok((s, 0));
    }
    loop {
        let next = dici_or_round(z, &s, cfg.gamma)?;
        let change = next.max_abs_diff(&s);
        s = next;
        if stop.record(change)? {
            return Ok((s, stop.iterations));
        }
    }
}

fn diag_inverse_band(z: &BandProfile) -> BandProfile {
    let mut s = BandProfile::zeros(z.n(), z.width());
    for i in 0..z.n() {
        s.set(i, i, 1.0 / z.get(i, i));
    }
    s
}

/// Iterate values for the given pairs; `full` is the completed `S_t` over the
/// local range starting at `off`, `z` covers every row used.
fn iterate_pairs(
    z: &BandProfile,
    full: &DMatrix<f64>,
    off: usize,
    gamma: f64,
    pairs: impl Iterator<Item = (usize, usize)>,
    mut put: impl FnMut(usize, usize, f64),
) {
    let l = z.width();
    let zr = z.range();
    let row = |a: usize, b: usize| -> f64 {
        // (P Ŝ)_ab = Ŝ_ab - γ/m_aa Σ_c z_ac Ŝ_cb
        let lo = a.saturating_sub(l).max(zr.start);
        let hi = (a + l + 1).min(zr.end);
        let mut acc = 0.0;
        for c in lo..hi {
            acc += z.get(a, c) * full[(c - off, b - off)];
        }
        full[(a - off, b - off)] - gamma / z.get(a, a) * acc
    };
    for (a, b) in pairs {
        let mut v = if a == b { row(a, a) } else { 0.5 * (row(a, b) + row(b, a)) };
        if a == b {
            v += gamma / z.get(a, a);
        }
        put(a, b, v);
    }
}

/// Approximate flops of one iterate over `pairs` entries.
fn iterate_flops(pairs: usize, l: usize) -> u64 {
    (pairs * 2 * 2 * (2 * l + 1)) as u64
}

/// Symmetric matrix with random eigenvectors (from a symmetrized Gaussian)
/// and eigenvalues drawn uniformly from (0, 10].
pub fn random_spd(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    let v = SymmetricEigen::new(&g + g.transpose()).eigenvectors;
    let lam = DVector::from_fn(n, |_, _| 10.0 - rng.random_range(0.0..10.0));
    let mut out = &v * DMatrix::from_diagonal(&lam) * v.transpose();
    linalg::symmetrize(&mut out);
    out
}

/// L-banded SPD matrix: the L-banded inverse of the band of a random SPD matrix.
pub fn random_lbanded_spd(n: usize, l: usize, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
    let w = random_spd(n, rng);
    Ok(banded::lband_invert(&banded::band_project(&w, l)?)?.to_dense())
}

/// Contraction quotient `‖Υ(X) - Υ(Y)‖₂ / ‖X - Y‖₂` of the iterate-collapse
/// map `Υ = ζ ∘ P_γ` for random SPD `X`, `Y` and a random L-banded `Z`.
/// Returns `(alpha, L)`.
pub fn contraction_trial(n: usize, gamma: f64, rng: &mut impl Rng) -> Result<(f64, usize)> {
    let l = rng.random_range(1..=(n / 2).max(1)).min(n - 1);
    let z = random_lbanded_spd(n, l, rng)?;
    let p = jor_multiplier(&z, gamma)?;
    loop {
        let x = random_spd(n, rng);
        let y = random_spd(n, rng);
        let d = linalg::sym_spectral_norm(&(&x - &y));
        if d == 0.0 {
            continue;
        }
        let ups = |m: &DMatrix<f64>| -> Result<DMatrix<f64>> {
            let mut it = &p * m;
            linalg::symmetrize(&mut it);
            let b = BandProfile::from_dense_local(&it, n, 0, l);
            banded::complete(&b, usize::MAX)
        };
        let num = linalg::sym_spectral_norm(&(ups(&x)? - ups(&y)?));
        return Ok((num / d, l));
    }
}

/// Per-iteration statistics over trials of `‖Ẽ_t‖₂ - ‖Ê_t‖₂` (JOR error
/// minus DICI-OR error, both started from `M⁻¹`).
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorBoundStats {
    pub max_diff: Vec<f64>,
    pub min_diff: Vec<f64>,
    pub mean_diff: Vec<f64>,
    /// Final JOR and DICI-OR errors per trial.
    pub final_errors: Vec<(f64, f64)>,
}

/// Error-bound experiment on `trials` random L-banded SPD systems.
pub fn error_bound_experiment(
    n: usize,
    l: usize,
    gamma: f64,
    iterations: usize,
    trials: usize,
    seed: u64,
) -> Result<ErrorBoundStats> {
    let per_trial: Vec<Result<(Vec<f64>, (f64, f64))>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t as u64);
            let z = random_lbanded_spd(n, l, &mut rng)?;
            error_bound_trial(&z, l, gamma, iterations)
        })
        .collect();
    let mut stats = ErrorBoundStats {
        max_diff: vec![f64::NEG_INFINITY; iterations],
        min_diff: vec![f64::INFINITY; iterations],
        mean_diff: vec![0.0; iterations],
        final_errors: Vec::with_capacity(trials),
    };
    for r in per_trial {
        let (d, fin) = r?;
        for (t, v) in d.iter().enumerate() {
            stats.max_diff[t] = stats.max_diff[t].max(*v);
            stats.min_diff[t] = stats.min_diff[t].min(*v);
            stats.mean_diff[t] += v / trials as f64;
        }
        stats.final_errors.push(fin);
    }
    Ok(stats)
}

/// Differences `‖Ẽ_t‖₂ - ‖Ê_t‖₂` for `t = 1..=iterations` on one system.
pub fn error_bound_trial(z: &DMatrix<f64>, l: usize, gamma: f64, iterations: usize) -> Result<(Vec<f64>, (f64, f64))> {
    let n = z.nrows();
    let exact = linalg::spd_inverse_or(z, "Z")?;
    let zb = BandProfile::from_dense_local(z, n, 0, l);
    let p = jor_multiplier(z, gamma)?;
    let mi = inv_diag(z)?;
    let gm = DMatrix::from_diagonal(&(&mi * gamma));
    let mut sj = DMatrix::from_diagonal(&mi);
    let mut sd = diag_inverse_band(&zb);
    let mut diffs = Vec::with_capacity(iterations);
    let (mut ej, mut ed) = (0.0, 0.0);
    for _ in 0..iterations {
        sj = &p * &sj + &gm;
        sd = dici_or_round(&zb, &sd, gamma)?;
        ej = linalg::spectral_norm(&(&sj - &exact));
        ed = linalg::sym_spectral_norm(&(banded::complete(&sd, usize::MAX)? - &exact));
        diffs.push(ej - ed);
    }
    Ok((diffs, (ej, ed)))
}

// ---------------------------------------------------------------------------
// Distributed implementation.

/// Per-sensor bookkeeping for distributed band and vector iterations.
///
/// Every in-band pair `(a, b)` is owned by the lowest-id sensor whose
/// cut-point set contains both states; owners publish their values to every
/// sensor whose neighbourhood `lo..hi` contains the pair, so all copies are
/// bit-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct DiciLayout {
    pub sensor: usize,
    pub cutset: Vec<usize>,
    pub lo: usize,
    pub hi: usize,
    pub l: usize,
    pub owned: Vec<(usize, usize)>,
    pub owned_states: Vec<usize>,
    /// Per destination: indices into `owned`.
    pub publish: Vec<(usize, Vec<usize>)>,
    /// Per destination: indices into `owned_states`.
    pub publish_states: Vec<(usize, Vec<usize>)>,
    /// Per owner: indices into that owner's `owned` for pairs inside this
    /// sensor's cut-point set.
    pub contribute: Vec<(usize, Vec<usize>)>,
    /// `1 / sqrt(c_a)` per cut-point state, `c_a` the number of cut-point
    /// sets holding `a`.
    pub share: Vec<f64>,
}

impl DiciLayout {
    pub fn len(&self) -> usize {
        self.hi - self.lo
    }
    pub fn is_empty(&self) -> bool {
        self.hi == self.lo
    }
    pub fn in_range(&self, x: usize) -> bool {
        (self.lo..self.hi).contains(&x)
    }
}

/// Builds layouts with neighbourhood `[min V_l - reach, max V_l + reach]`.
/// Fails if an in-band pair inside some neighbourhood has no owner.
pub fn build_layouts(subsystems: &[SubSystem], n: usize, l: usize, reach: usize) -> Result<Vec<DiciLayout>> {
    let owner_of = |a: usize, b: usize| -> Option<usize> {
        subsystems
            .iter()
            .find(|s| s.local_index(a).is_some() && s.local_index(b).is_some())
            .map(|s| s.sensor_id)
    };
    let mut layouts: Vec<DiciLayout> = subsystems
        .iter()
        .map(|s| {
            let lo = s.cutset[0].saturating_sub(reach);
            let hi = (s.cutset[s.cutset.len() - 1] + reach + 1).min(n);
            DiciLayout {
                sensor: s.sensor_id,
                cutset: s.cutset.clone(),
                lo,
                hi,
                l,
                owned: Vec::new(),
                owned_states: Vec::new(),
                publish: Vec::new(),
                publish_states: Vec::new(),
                contribute: Vec::new(),
                share: Vec::new(),
            }
        })
        .collect();
    let mut holders = vec![0usize; n];
    for s in subsystems {
        for &x in &s.cutset {
            holders[x] += 1;
        }
    }
    for lay in &mut layouts {
        lay.share = lay.cutset.iter().map(|&x| 1.0 / (holders[x] as f64).sqrt()).collect();
    }
    let mut owner = std::collections::HashMap::new();
    for a in 0..n {
        for b in a..(a + l + 1).min(n) {
            if let Some(o) = owner_of(a, b) {
                owner.insert((a, b), o);
                layouts[o].owned.push((a, b));
                if a == b {
                    layouts[o].owned_states.push(a);
                }
            }
        }
    }
    let ns = layouts.len();
    for d in 0..ns {
        let (lo, hi) = (layouts[d].lo, layouts[d].hi);
        for a in lo..hi {
            for b in a..(a + l + 1).min(hi) {
                let o = *owner.get(&(a, b)).ok_or(DkfError::Locality { sensor: d, state: b })?;
                if o == d {
                    continue;
                }
                let idx = layouts[o].owned.binary_search(&(a, b)).unwrap();
                push_index(&mut layouts[o].publish, d, idx);
                if a == b {
                    let si = layouts[o].owned_states.binary_search(&a).unwrap();
                    push_index(&mut layouts[o].publish_states, d, si);
                }
            }
        }
    }
    for (si, sub) in subsystems.iter().enumerate() {
        for (ia, &a) in sub.cutset.iter().enumerate() {
            for &b in &sub.cutset[ia..] {
                if b - a > l {
                    break;
                }
                let o = owner[&(a, b)];
                if o != si {
                    let idx = layouts[o].owned.binary_search(&(a, b)).unwrap();
                    push_index(&mut layouts[si].contribute, o, idx);
                }
            }
        }
    }
    for lay in &mut layouts {
        lay.publish.sort_by_key(|(d, _)| *d);
        lay.publish_states.sort_by_key(|(d, _)| *d);
    }
    Ok(layouts)
}

fn push_index(list: &mut Vec<(usize, Vec<usize>)>, dst: usize, idx: usize) {
    match list.iter_mut().find(|(d, _)| *d == dst) {
        Some((_, v)) => v.push(idx),
        None => list.push((dst, vec![idx])),
    }
}

/// Sends owned pair values (aligned with `owned`) to subscribers and
/// assembles each sensor's band over its neighbourhood. `own[s]` must hold
/// one value per owned pair.
pub fn exchange_band(
    net: &mut CommNetwork,
    layouts: &[DiciLayout],
    phase: Phase,
    own: Vec<Vec<f64>>,
    n: usize,
) -> Result<Vec<BandProfile>> {
    let mut st: Vec<(Vec<f64>, BandProfile)> = own
        .into_iter()
        .zip(layouts)
        .map(|(v, lay)| (v, BandProfile::zeros_local(n, lay.lo, lay.len(), lay.l)))
        .collect();
    net.run_round(&mut st, |id, (vals, _), _| {
        Ok(layouts[id]
            .publish
            .iter()
            .map(|(dst, idx)| Message::new(id, *dst, phase, 0, idx.iter().map(|&i| vals[i]).collect()))
            .collect())
    })?;
    net.run_round(&mut st, |id, (vals, band), inbox| {
        let lay = &layouts[id];
        for (k, &(a, b)) in lay.owned.iter().enumerate() {
            if band.contains(a, b) {
                band.set(a, b, vals[k]);
            }
        }
        for msg in inbox {
            let src = &layouts[msg.src];
            let (_, idx) = src.publish.iter().find(|(d, _)| *d == id).unwrap();
            for (v, &i) in msg.data.iter().zip(idx) {
                let (a, b) = src.owned[i];
                band.set(a, b, *v);
            }
        }
        Ok(Vec::new())
    })?;
    Ok(st.into_iter().map(|(_, b)| b).collect())
}

/// Sends owned state values (`own[s]` is `owned_states x batch`) and returns
/// each sensor's `len x batch` block over its neighbourhood.
pub fn exchange_states(
    net: &mut CommNetwork,
    layouts: &[DiciLayout],
    phase: Phase,
    own: Vec<DMatrix<f64>>,
) -> Result<Vec<DMatrix<f64>>> {
    let batch = own.first().map_or(1, |m| m.ncols());
    let mut st: Vec<(DMatrix<f64>, DMatrix<f64>)> = own
        .into_iter()
        .zip(layouts)
        .map(|(v, lay)| (v, DMatrix::zeros(lay.len(), batch)))
        .collect();
    net.run_round(&mut st, |id, (vals, _), _| {
        Ok(layouts[id]
            .publish_states
            .iter()
            .map(|(dst, idx)| {
                let mut data = Vec::with_capacity(idx.len() * batch);
                for &i in idx {
                    data.extend(vals.row(i).iter());
                }
                Message::batched(id, *dst, phase, 1, data, batch)
            })
            .collect())
    })?;
    net.run_round(&mut st, |id, (vals, block), inbox| {
        let lay = &layouts[id];
        for (k, &a) in lay.owned_states.iter().enumerate() {
            if lay.in_range(a) {
                block.row_mut(a - lay.lo).copy_from(&vals.row(k));
            }
        }
        for msg in inbox {
            let src = &layouts[msg.src];
            let (_, idx) = src.publish_states.iter().find(|(d, _)| *d == id).unwrap();
            for (r, &i) in idx.iter().enumerate() {
                let a = src.owned_states[i];
                for b in 0..batch {
                    block[(a - lay.lo, b)] = msg.data[r * batch + b];
                }
            }
        }
        Ok(Vec::new())
    })?;
    Ok(st.into_iter().map(|(_, b)| b).collect())
}

/// Starting band of the distributed matrix iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiciInit {
    /// Each pair takes its owner's `(Z^(l))⁻¹` entry. Windows mixing two
    /// owners can be indefinite.
    LocalInverse,
    /// `Σ_l W_l (Z^(l))⁻¹ W_l` with `W_l = diag(1/sqrt(c_a))`: a sum of
    /// positive semidefinite terms, so every window is positive definite.
    #[default]
    Blended,
    /// `M⁻¹`.
    Diagonal,
}

/// Diagnostics of a distributed DICI run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DiciRun {
    pub iterations: usize,
    pub residual: f64,
    /// Collapse pivot windows that were not positive definite.
    pub pivot_violations: usize,
}

/// Output of the distributed band inversion, per sensor.
#[derive(Debug, Clone)]
pub struct DiciBands {
    /// `Z` band over the neighbourhood (owner values).
    pub z: Vec<BandProfile>,
    /// `S = Z⁻¹` band over the neighbourhood.
    pub s: Vec<BandProfile>,
    pub run: DiciRun,
}

/// Distributed DICI-OR: computes the band of `Z⁻¹` from the local information
/// matrices `z_loc[s]` (`n_l x n_l`, over the cut-point set). Starts from
/// `init`; owners' values win on shared entries. `flops[s]` accumulates
/// the per-sensor computation.
pub fn dici_or_band_inverse(
    net: &mut CommNetwork,
    layouts: &[DiciLayout],
    z_loc: &[DMatrix<f64>],
    cfg: &JorConfig,
    init: DiciInit,
    n: usize,
    flops: &mut [u64],
) -> Result<DiciBands> {
    cfg.validate()?;
    let pick = |lay: &DiciLayout, m: &DMatrix<f64>| -> Vec<f64> {
        lay.owned
            .iter()
            .map(|&(a, b)| m[(local(&lay.cutset, a), local(&lay.cutset, b))])
            .collect()
    };
    let z_own: Vec<Vec<f64>> = layouts.iter().zip(z_loc).map(|(lay, m)| pick(lay, m)).collect();
    let z = exchange_band(net, layouts, Phase::DiciMatrix, z_own, n)?;
    let mut s0_own = Vec::with_capacity(layouts.len());
    let mut contrib = Vec::with_capacity(layouts.len());
    for (lay, m) in layouts.iter().zip(z_loc) {
        let nl = m.nrows();
        match init {
            DiciInit::Diagonal => {
                s0_own.push(
                    lay.owned
                        .iter()
                        .map(|&(a, b)| if a == b { 1.0 / m[(local(&lay.cutset, a), local(&lay.cutset, a))] } else { 0.0 })
                        .collect(),
                );
                contrib.push(Vec::new());
            }
            DiciInit::LocalInverse | DiciInit::Blended => {
                let mut inv = linalg::spd_inverse_or(m, "local information matrix")?;
                flops[lay.sensor] += (nl * nl * nl) as u64;
                if init == DiciInit::Blended {
                    for r in 0..nl {
                        for c in 0..nl {
                            inv[(r, c)] *= lay.share[r] * lay.share[c];
                        }
                    }
                }
                contrib.push(
                    lay.contribute
                        .iter()
                        .map(|(o, idx)| {
                            let src = &layouts[*o];
                            let vals: Vec<f64> = idx
                                .iter()
                                .map(|&i| {
                                    let (a, b) = src.owned[i];
                                    inv[(local(&lay.cutset, a), local(&lay.cutset, b))]
                                })
                                .collect();
                            (*o, vals)
                        })
                        .collect(),
                );
                s0_own.push(pick(lay, &inv));
            }
        }
    }
    if init == DiciInit::Blended {
        // Contributions travel to the owners, which sum them.
        let mut st: Vec<(Vec<f64>, Vec<(usize, Vec<f64>)>)> = s0_own.into_iter().zip(contrib).collect();
        net.run_round(&mut st, |id, (_, c), _| {
            Ok(c.iter()
                .map(|(o, v)| Message::new(id, *o, Phase::DiciMatrix, 2, v.clone()))
                .collect())
        })?;
        net.run_round(&mut st, |id, (own, _), inbox| {
            for msg in inbox {
                let (_, idx) = layouts[msg.src].contribute.iter().find(|(o, _)| *o == id).unwrap();
                for (v, &i) in msg.data.iter().zip(idx) {
                    own[i] += v;
                }
            }
            Ok(Vec::new())
        })?;
        s0_own = st.into_iter().map(|(v, _)| v).collect();
    }
    let mut s = exchange_band(net, layouts, Phase::DiciMatrix, s0_own, n)?;
    let mut stop = Stopper::new(*cfg);
    let mut run = DiciRun::default();
    if cfg.is_budget() && cfg.max_iter == 0 {
        return Ok(DiciBands { z, s, run });
    }
    let l = layouts.first().map_or(0, |x| x.l);
    loop {
        let results: Vec<Result<(Vec<f64>, f64, u64, usize)>> = layouts
            .par_iter()
            .map(|lay| {
                let sb = &s[lay.sensor];
                let (full, viol) = banded::complete_counted(sb, 2 * l)?;
                let mut vals = Vec::with_capacity(lay.owned.len());
                iterate_pairs(&z[lay.sensor], &full, lay.lo, cfg.gamma, lay.owned.iter().copied(), |_, _, v| {
                    vals.push(v)
                });
                let change = lay
                    .owned
                    .iter()
                    .zip(&vals)
                    .map(|(&(a, b), v)| (v - sb.get(a, b)).abs())
                    .fold(0.0, f64::max);
                let cost = banded::complete_flops(lay.len(), l, 2 * l) + iterate_flops(lay.owned.len(), l);
                Ok((vals, change, cost, viol))
            })
            .collect();
        let mut own = Vec::with_capacity(layouts.len());
        let mut change = 0.0_f64;
        for (lay, r) in layouts.iter().zip(results) {
            let (v, c, cost, viol) = r?;
            flops[lay.sensor] += cost;
            run.pivot_violations += viol;
            change = change.max(c);
            own.push(v);
        }
        s = exchange_band(net, layouts, Phase::DiciMatrix, own, n)?;
        let done = stop.record(change)?;
        run.iterations = stop.iterations;
        run.residual = stop.residual();
        if done {
            return Ok(DiciBands { z, s, run });
        }
    }
}

fn local(cutset: &[usize], x: usize) -> usize {
    cutset.binary_search(&x).expect("state in cut-point set")
}

/// Distributed JOR for `Z x = ẑ` on the banded system. `z` are the
/// neighbourhood bands from [`dici_or_band_inverse`], `z_loc` the local
/// information matrices (used for the local-solve start), `zhat[s]` is
/// `n_l x batch` over the cut-point set. Returns `x` over each neighbourhood.
#[allow(clippy::too_many_arguments)]
pub fn dici_solve_vector(
    net: &mut CommNetwork,
    layouts: &[DiciLayout],
    z: &[BandProfile],
    z_loc: &[DMatrix<f64>],
    zhat: &[DMatrix<f64>],
    cfg: &JorConfig,
    flops: &mut [u64],
) -> Result<(Vec<DMatrix<f64>>, DiciRun)> {
    cfg.validate()?;
    let batch = zhat.first().map_or(1, |m| m.ncols());
    let mut own = Vec::with_capacity(layouts.len());
    for ((lay, m), zh) in layouts.iter().zip(z_loc).zip(zhat) {
        let chol = m
            .clone()
            .cholesky()
            .ok_or_else(|| DkfError::NotPositiveDefinite("local information matrix".into()))?;
        let x = chol.solve(zh);
        let nl = m.nrows() as u64;
        flops[lay.sensor] += nl * nl * nl / 3 + 2 * nl * nl * batch as u64;
        own.push(DMatrix::from_fn(lay.owned_states.len(), batch, |r, b| x[(local(&lay.cutset, lay.owned_states[r]), b)]));
    }
    let mut x = exchange_states(net, layouts, Phase::DiciVector, own)?;
    let mut stop = Stopper::new(*cfg);
    let mut run = DiciRun::default();
    if cfg.is_budget() && cfg.max_iter == 0 {
        return Ok((x, run));
    }
    loop {
        let mut own = Vec::with_capacity(layouts.len());
        let mut change = 0.0_f64;
        for ((lay, zh), xs) in layouts.iter().zip(zhat).zip(&x) {
            let zb = &z[lay.sensor];
            let l = lay.l;
            let mut out = DMatrix::zeros(lay.owned_states.len(), batch);
            for (r, &a) in lay.owned_states.iter().enumerate() {
                let lo = a.saturating_sub(l).max(lay.lo);
                let hi = (a + l + 1).min(lay.hi);
                let za = zb.get(a, a);
                let la = local(&lay.cutset, a);
                for b in 0..batch {
                    let mut acc = 0.0;
                    for c in lo..hi {
                        acc += zb.get(a, c) * xs[(c - lay.lo, b)];
                    }
                    let old = xs[(a - lay.lo, b)];
                    let v = old - cfg.gamma / za * (acc - zh[(la, b)]);
                    change = change.max((v - old).abs());
                    out[(r, b)] = v;
                }
            }
            flops[lay.sensor] += (lay.owned_states.len() * batch * 2 * (2 * l + 2)) as u64;
            own.push(out);
        }
        x = exchange_states(net, layouts, Phase::DiciVector, own)?;
        let done = stop.record(change)?;
        run.iterations = stop.iterations;
        run.residual = stop.residual();
        if done {
            return Ok((x, run));
        }
    }
}

/// Dense JOR vector iteration (reference for tests and the examples).
pub fn jor_solve(z: &DMatrix<f64>, zhat: &DVector<f64>, cfg: &JorConfig) -> Result<(DVector<f64>, usize)> {
    cfg.validate()?;
    let mi = inv_diag(z)?;
    let mut x = zhat.component_mul(&mi);
    let mut stop = Stopper::new(*cfg);
    if cfg.is_budget() && cfg.max_iter == 0 {
        return Ok((x, 0));
    }
    loop {
        let r = z * &x - zhat;
        let next = &x - (r.component_mul(&mi) * cfg.gamma);
        let change = (&next - &x).amax();
        x = next;
        if stop.record(change)? {
            return Ok((x, stop.iterations));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(n, n);
        for i in 0..n {
            z[(i, i)] = 3.0 + rng.random::<f64>();
            if i + 1 < n {
                let v = rng.random::<f64>() - 0.5;
                z[(i, i + 1)] = v;
                z[(i + 1, i)] = v;
            }
        }
        z
    }

    #[test]
    fn identity_in_one_step() {
        let z = DMatrix::<f64>::identity(4, 4);
        let r = jor_inverse(&z, &JorConfig::budget(1.0, 1), None).unwrap();
        assert_eq!(r.s, z);
        let r = jor_inverse(&z, &JorConfig::new(0.5, 200, 1e-14).unwrap(), None).unwrap();
        assert!((r.s - z).amax() < 1e-13);
    }

    #[test]
    fn diagonal_is_jacobi_exact() {
        let z = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0, 5.0]));
        let r = jor_inverse(&z, &JorConfig::budget(1.0, 1), None).unwrap();
        assert!((r.s - z.try_inverse().unwrap()).amax() < 1e-15);
    }

    #[test]
    fn error_recursion_exact() {
        let mut rng = trial_rng(3, 0);
        let z = random_spd(8, &mut rng);
        let exact = z.clone().try_inverse().unwrap();
        let p = jor_multiplier(&z, 0.1).unwrap();
        let mi = inv_diag(&z).unwrap();
        let s0 = DMatrix::from_diagonal(&mi);
        let s1 = &p * &s0 + DMatrix::from_diagonal(&(&mi * 0.1));
        let e0 = &s0 - &exact;
        let e1 = &s1 - &exact;
        assert!((e1 - &p * e0).amax() < 1e-12);
    }

    #[test]
    fn too_large_gamma_rejected() {
        let z = DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0]);
        assert!(matches!(
            jor_inverse(&z, &JorConfig::new(1.5, 10, 1e-8).unwrap(), None),
            Err(DkfError::NotContractive { .. })
        ));
    }

    #[test]
    fn full_band_matches_jor() {
        let mut rng = trial_rng(5, 0);
        let z = random_spd(6, &mut rng);
        let zb = banded::band_project(&z, 5).unwrap();
        let cfg = JorConfig::budget(0.1, 25);
        let (d, _) = dici_or_central(&zb, &cfg, None).unwrap();
        let j = jor_inverse(&z, &cfg, None).unwrap();
        let mut js = j.s.clone();
        linalg::symmetrize(&mut js);
        assert!((d.to_dense() - js).amax() < 1e-12);
    }

    #[test]
    fn tridiagonal_band_inverse() {
        let mut rng = trial_rng(9, 0);
        let z = tridiag(10, &mut rng);
        let zb = banded::band_project(&z, 1).unwrap();
        let (d, _) = dici_or_central(&zb, &JorConfig::new(0.5, 5000, 1e-14).unwrap(), None).unwrap();
        let exact = z.try_inverse().unwrap();
        for (i, j) in d.pairs() {
            assert!((d.get(i, j) - exact[(i, j)]).abs() < 1e-8);
        }
    }

    #[test]
    fn fixed_point() {
        let mut rng = trial_rng(11, 0);
        let z = random_lbanded_spd(12, 2, &mut rng).unwrap();
        let mut exact = z.clone().try_inverse().unwrap();
        linalg::symmetrize(&mut exact);
        let zb = banded::band_project(&z, 2).unwrap();
        let sb = banded::band_project(&exact, 2).unwrap();
        let next = dici_or_round(&zb, &sb, 0.1).unwrap();
        assert!(next.max_abs_diff(&sb) < 1e-12);
    }

    #[test]
    fn vector_solve() {
        let z = DMatrix::<f64>::identity(3, 3);
        let zh = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let (x, _) = jor_solve(&z, &zh, &JorConfig::budget(1.0, 1)).unwrap();
        assert_eq!(x, zh);
        let zero = DVector::zeros(3);
        let (x, _) = jor_solve(&z, &zero, &JorConfig::budget(0.1, 5)).unwrap();
        assert_eq!(x, zero);
    }

    #[test]
    fn contraction_quotient_in_unit_interval() {
        let mut rng = trial_rng(1, 0);
        for _ in 0..5 {
            let (a, l) = contraction_trial(30, 0.1, &mut rng).unwrap();
            assert!(a > 0.0 && a < 1.0, "alpha {a} at L = {l}");
        }
    }

    #[test]
    fn full_band_error_difference_zero() {
        let mut rng = trial_rng(2, 0);
        let z = random_spd(6, &mut rng);
        let (d, _) = error_bound_trial(&z, 5, 0.1, 10).unwrap();
        assert!(d.iter().all(|v| v.abs() < 1e-12));
    }
}
