use nalgebra::DMatrix;
use rayon::prelude::*;

use super::StatePhase;
use crate::banded::{self, BandProfile};
use crate::consensus::{self, ConsensusRun, FusionPlans};
use crate::decomposition::{Decomposition, SubSystem};
use crate::dici::{self, DiciInit, DiciLayout, JorConfig, DEFAULT_GAMMA};
use crate::error::{DkfError, Result};
use crate::linalg;
use crate::model::GlobalModel;
use crate::simulator::{CommNetwork, Phase};

/// Iteration settings of the local filters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifConfig {
    /// Consensus stopping tolerance; 0 runs exactly `consensus_max_iter` rounds.
    pub consensus_tol: f64,
    pub consensus_max_iter: usize,
    /// Matrix DICI (covariance band).
    pub dici: JorConfig,
    /// Vector DICI (estimates).
    pub dici_vector: JorConfig,
    pub init: DiciInit,
    pub payload_limit: Option<usize>,
}

impl Default for LifConfig {
    fn default() -> Self {
        let jor = JorConfig {
            gamma: DEFAULT_GAMMA,
            max_iter: 20_000,
            tol: 1e-5,
            window: 10,
        };
        Self {
            consensus_tol: 1e-10,
            consensus_max_iter: 10_000,
            dici: jor,
            dici_vector: jor,
            init: DiciInit::Blended,
            payload_limit: None,
        }
    }
}

/// Everything one sensor stores. Sizes depend on `n_l`, `L` and the
/// neighbourhood width only.
#[derive(Debug, Clone)]
pub struct InfoState {
    pub sensor: usize,
    pub k: usize,
    pub phase: StatePhase,
    /// `ẑ^(l)` (`n_l x batch`).
    pub z_hat: DMatrix<f64>,
    /// `Z^(l)` (`n_l x n_l`).
    pub z_loc: DMatrix<f64>,
    /// `S^(l)` (`n_l x n_l`), from the last DICI run.
    pub s_loc: DMatrix<f64>,
    /// Filtered estimates over the neighbourhood (`len x batch`); holds
    /// `x̂^(l)` on the cut-point set and `d̂^(l)` on the input states.
    pub x_hat: DMatrix<f64>,
    /// Local predictor `F^(l) x̂^(l) + D^(l) d̂^(l)` (`n_l x batch`).
    pub x_pred: DMatrix<f64>,
    /// Filtered covariance band over the neighbourhood.
    pub s_band: Option<BandProfile>,
    /// Observation information fused at start-up, `I_f^(l)`.
    pub i_fused: DMatrix<f64>,
    pub flops: u64,
}

impl InfoState {
    pub fn x_hat_loc(&self, lay: &DiciLayout) -> DMatrix<f64> {
        DMatrix::from_fn(lay.cutset.len(), self.x_hat.ncols(), |r, b| self.x_hat[(lay.cutset[r] - lay.lo, b)])
    }

    pub fn d_hat(&self, lay: &DiciLayout, sub: &SubSystem) -> DMatrix<f64> {
        DMatrix::from_fn(sub.d_states.len(), self.x_hat.ncols(), |r, b| self.x_hat[(sub.d_states[r] - lay.lo, b)])
    }
}

/// Per-step record of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepDiagnostics {
    pub k: usize,
    pub trace_s_filtered: f64,
    pub trace_s_predicted: f64,
    pub consensus_iters: usize,
    pub dici_iters: usize,
    pub dici_vector_iters: usize,
    pub messages: u64,
    pub pivot_violations: usize,
}

/// The network of local information filters.
#[derive(Debug, Clone)]
pub struct Lif {
    pub l: usize,
    pub n: usize,
    pub subsystems: Vec<SubSystem>,
    pub layouts: Vec<DiciLayout>,
    pub net: CommNetwork,
    pub cfg: LifConfig,
    pub matrix_fusion: ConsensusRun,
    plans: FusionPlans,
    r_inv: Vec<DMatrix<f64>>,
    sensor_rows: Vec<std::ops::Range<usize>>,
    states: Vec<InfoState>,
    batch: usize,
    diag: StepDiagnostics,
}

impl Lif {
    /// Builds the sensors, fuses the observation matrices once and sets the
    /// initial conditions `ẑ^(l) = 0`, `Z^(l)` from the neighbourhood band of `S0`.
    pub fn new(model: &GlobalModel, dec: &Decomposition, cfg: LifConfig, batch: usize) -> Result<Self> {
        cfg.dici.validate()?;
        cfg.dici_vector.validate()?;
        let n = model.n();
        let l = dec.l;
        let reach = l.max(model.f.bandwidth());
        let layouts = dici::build_layouts(&dec.subsystems, n, l, reach)?;
        let mut net = CommNetwork::new(dec.topology.comm.clone());
        net.set_payload_limit(cfg.payload_limit);
        let plans = FusionPlans::new(&dec.subsystems, &dec.topology)?;
        let r_inv = dec
            .subsystems
            .iter()
            .map(|s| linalg::spd_inverse_or(&s.r_l, "R_l"))
            .collect::<Result<Vec<_>>>()?;
        let i_locals: Vec<DMatrix<f64>> = dec
            .subsystems
            .iter()
            .zip(&r_inv)
            .map(|(s, ri)| consensus::local_information_matrix(s, ri))
            .collect();
        let (i_fused, matrix_fusion) =
            consensus::fuse_observation_matrices(&mut net, &plans, &dec.subsystems, &i_locals, cfg.consensus_tol, cfg.consensus_max_iter)?;
        for (s, m) in dec.subsystems.iter().zip(&i_fused) {
            check_band(s, m, l)?;
        }
        let states = dec
            .subsystems
            .iter()
            .zip(&layouts)
            .zip(i_fused)
            .map(|((s, lay), i_f)| {
                let sb = BandProfile::from_dense_local(&model.s0.view((lay.lo, lay.lo), (lay.len(), lay.len())).into_owned(), n, lay.lo, l);
                let z_loc = predicted_information(s, lay, &sb)?;
                let nl = s.n_l();
                Ok(InfoState {
                    sensor: s.sensor_id,
                    k: 0,
                    phase: StatePhase::Predicted,
                    z_hat: DMatrix::zeros(nl, batch),
                    z_loc,
                    s_loc: DMatrix::zeros(nl, nl),
                    x_hat: DMatrix::zeros(lay.len(), batch),
                    x_pred: DMatrix::zeros(nl, batch),
                    s_band: None,
                    i_fused: i_f,
                    flops: banded::lband_invert_flops(nl, l),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            l,
            n,
            subsystems: dec.subsystems.clone(),
            layouts,
            net,
            cfg,
            matrix_fusion,
            plans,
            r_inv,
            sensor_rows: model.sensor_rows.clone(),
            states,
            batch,
            diag: StepDiagnostics::default(),
        })
    }

    pub fn states(&self) -> &[InfoState] {
        &self.states
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Per-sensor accumulated flop counts.
    pub fn flops(&self) -> Vec<u64> {
        self.states.iter().map(|s| s.flops).collect()
    }

    /// Local filter step: fuse the observations `y` (`p x batch`), add the
    /// fused information, then convert to the Kalman domain with DICI.
    pub fn filter_step(&mut self, y: &DMatrix<f64>) -> Result<()> {
        if y.ncols() != self.batch {
            return Err(DkfError::Dimension(format!("{} observation columns, batch {}", y.ncols(), self.batch)));
        }
        let before = self.net.traffic_report().total.messages;
        let i_locals: Vec<DMatrix<f64>> = self
            .subsystems
            .iter()
            .map(|s| {
                let rows = &self.sensor_rows[s.sensor_id];
                let yl = y.rows(rows.start, rows.len()).into_owned();
                consensus::local_information_vector(s, &self.r_inv[s.sensor_id], &yl)
            })
            .collect();
        let fused = consensus::fuse_observation_vectors(
            &mut self.net,
            &self.plans,
            &self.subsystems,
            &i_locals,
            self.cfg.consensus_tol,
            self.cfg.consensus_max_iter,
        )?;
        for (st, i_f) in self.states.iter_mut().zip(&fused.i) {
            st.z_loc += &st.i_fused;
            st.z_hat += i_f;
            st.phase = StatePhase::Filtered;
        }
        let z_loc: Vec<DMatrix<f64>> = self.states.iter().map(|s| s.z_loc.clone()).collect();
        let mut flops: Vec<u64> = vec![0; self.states.len()];
        let bands = dici::dici_or_band_inverse(&mut self.net, &self.layouts, &z_loc, &self.cfg.dici, self.cfg.init, self.n, &mut flops)?;
        let zhat: Vec<DMatrix<f64>> = self.states.iter().map(|s| s.z_hat.clone()).collect();
        let (x, vrun) = dici::dici_solve_vector(&mut self.net, &self.layouts, &bands.z, &z_loc, &zhat, &self.cfg.dici_vector, &mut flops)?;
        let mut trace = 0.0;
        for (((st, lay), sb), xs) in self.states.iter_mut().zip(&self.layouts).zip(bands.s).zip(x) {
            for &a in &lay.owned_states {
                trace += sb.get(a, a);
            }
            st.x_hat = xs;
            st.s_band = Some(sb);
        }
        for (st, f) in self.states.iter_mut().zip(flops) {
            st.flops += f;
        }
        self.diag = StepDiagnostics {
            k: self.states[0].k,
            trace_s_filtered: trace,
            consensus_iters: fused.run.iterations,
            dici_iters: bands.run.iterations,
            dici_vector_iters: vrun.iterations,
            pivot_violations: bands.run.pivot_violations,
            messages: self.net.traffic_report().total.messages - before,
            ..Default::default()
        };
        Ok(())
    }

    /// Local prediction step: covariance prediction over the cut-point set,
    /// band exchange, L-banded inversion over neighbouring windows, and the
    /// predicted information vector with the out-of-set correction.
    pub fn prediction_step(&mut self) -> Result<()> {
        let before = self.net.traffic_report().total.messages;
        let l = self.l;
        let n = self.n;
        let batch = self.batch;
        // Local covariance prediction and predictor.
        let computed: Vec<Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, usize, u64)>> = self
            .states
            .par_iter()
            .zip(&self.layouts)
            .zip(&self.subsystems)
            .map(|((st, lay), sub)| {
                let sb = st.s_band.as_ref().ok_or_else(|| DkfError::InvalidArgument("prediction before filter step".into()))?;
                let (full, viol) = banded::complete_counted(sb, usize::MAX)?;
                let mut xs: Vec<usize> = sub.cutset.clone();
                for &d in &sub.d_states {
                    if !lay.in_range(d) {
                        return Err(DkfError::Locality { sensor: sub.sensor_id, state: d });
                    }
                    xs.push(d);
                }
                let nl = sub.n_l();
                let nx = xs.len();
                let mut a = DMatrix::zeros(nl, nx);
                a.columns_mut(0, nl).copy_from(&sub.f_loc);
                a.columns_mut(nl, nx - nl).copy_from(&sub.d_loc);
                let s_x = DMatrix::from_fn(nx, nx, |r, c| full[(xs[r] - lay.lo, xs[c] - lay.lo)]);
                let mut sp = &a * s_x * a.transpose() + &sub.g_loc * &sub.q_loc * sub.g_loc.transpose();
                linalg::symmetrize(&mut sp);
                let x_x = DMatrix::from_fn(nx, batch, |r, b| st.x_hat[(xs[r] - lay.lo, b)]);
                let x_pred = &a * x_x;
                let ng = sub.noise_ids.len();
                let cost = banded::complete_flops(lay.len(), l, lay.len())
                    + (2 * nl * nx * (nx + nl) + 2 * nl * ng * (ng + nl) + 2 * nl * nx * batch) as u64;
                Ok((sp, x_pred, full, viol, cost))
            })
            .collect();
        let mut sp_loc = Vec::with_capacity(computed.len());
        let mut violations = 0;
        for (st, r) in self.states.iter_mut().zip(computed) {
            let (sp, xp, full, viol, cost) = r?;
            let lay = &self.layouts[st.sensor];
            st.s_loc = DMatrix::from_fn(lay.cutset.len(), lay.cutset.len(), |r, c| full[(lay.cutset[r] - lay.lo, lay.cutset[c] - lay.lo)]);
            st.x_pred = xp;
            st.flops += cost;
            violations += viol;
            sp_loc.push(sp);
        }
        let own: Vec<Vec<f64>> = self
            .layouts
            .iter()
            .zip(&sp_loc)
            .map(|(lay, sp)| {
                lay.owned
                    .iter()
                    .map(|&(a, b)| sp[(local(lay, a), local(lay, b))])
                    .collect()
            })
            .collect();
        let trace: f64 = self
            .layouts
            .iter()
            .zip(&sp_loc)
            .map(|(lay, sp)| lay.owned_states.iter().map(|&a| sp[(local(lay, a), local(lay, a))]).sum::<f64>())
            .sum();
        let sp_bands = dici::exchange_band(&mut self.net, &self.layouts, Phase::Prediction, own, n)?;
        let fx_own: Vec<DMatrix<f64>> = self
            .layouts
            .iter()
            .zip(&self.states)
            .map(|(lay, st)| DMatrix::from_fn(lay.owned_states.len(), batch, |r, b| st.x_pred[(local(lay, lay.owned_states[r]), b)]))
            .collect();
        let fx = dici::exchange_states(&mut self.net, &self.layouts, Phase::Prediction, fx_own)?;
        let updates: Vec<Result<(DMatrix<f64>, DMatrix<f64>, u64)>> = self
            .states
            .par_iter()
            .zip(&self.layouts)
            .zip(&sp_bands)
            .zip(&fx)
            .map(|(((st, lay), spb), fxe)| {
                let z_loc = predicted_information(&self.subsystems[st.sensor], lay, spb)?;
                let rows = banded::lband_invert_rows(spb, lay.cutset[0], lay.cutset[lay.cutset.len() - 1] + 1)?;
                let nl = lay.cutset.len();
                let mut z_hat = DMatrix::zeros(nl, batch);
                for (ia, &a) in lay.cutset.iter().enumerate() {
                    let lo = a.saturating_sub(l).max(lay.lo);
                    let hi = (a + l + 1).min(lay.hi);
                    for b in lo..hi {
                        let zab = rows.get(a, b);
                        match lay.cutset.binary_search(&b) {
                            // Local part Z^(l)(F^(l) x̂ + D^(l) d̂).
                            Ok(ib) => {
                                for c in 0..batch {
                                    z_hat[(ia, c)] += zab * st.x_pred[(ib, c)];
                                }
                            }
                            // Correction from states outside the cut-point set.
                            Err(_) => {
                                for c in 0..batch {
                                    z_hat[(ia, c)] += zab * fxe[(b - lay.lo, c)];
                                }
                            }
                        }
                    }
                }
                let span = lay.cutset[lay.cutset.len() - 1] + 1 - lay.cutset[0];
                let cost = 2 * banded::lband_invert_flops(span, l) + (2 * nl * (2 * l + 1) * batch) as u64;
                Ok((z_loc, z_hat, cost))
            })
            .collect();
        for (st, r) in self.states.iter_mut().zip(updates) {
            let (z, zh, cost) = r?;
            st.z_loc = z;
            st.z_hat = zh;
            st.flops += cost;
            st.k += 1;
            st.phase = StatePhase::Predicted;
        }
        self.diag.trace_s_predicted = trace;
        self.diag.messages += self.net.traffic_report().total.messages - before;
        self.diag.pivot_violations += violations;
        Ok(())
    }

    /// One full cycle; returns the diagnostics and the filtered estimates
    /// (owner values, `n x batch`).
    pub fn step(&mut self, y: &DMatrix<f64>) -> Result<(StepDiagnostics, DMatrix<f64>)> {
        self.filter_step(y)?;
        let x = self.filtered_estimate();
        self.prediction_step()?;
        Ok((self.diag, x))
    }

    /// Filtered estimate of every state taken from its owner.
    pub fn filtered_estimate(&self) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(self.n, self.batch);
        for (lay, st) in self.layouts.iter().zip(&self.states) {
            for &a in &lay.owned_states {
                x.row_mut(a).copy_from(&st.x_hat.row(a - lay.lo));
            }
        }
        x
    }

    /// Zero-padded union of the local information matrices (owner values on
    /// shared entries); diagnostics only.
    pub fn padded_information(&self) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.n, self.n);
        for (lay, st) in self.layouts.iter().zip(&self.states) {
            for &(a, b) in &lay.owned {
                let v = st.z_loc[(local(lay, a), local(lay, b))];
                z[(a, b)] = v;
                z[(b, a)] = v;
            }
        }
        z
    }

    /// Zero-padded information vector (owner values); diagnostics only.
    pub fn padded_information_vector(&self) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.n, self.batch);
        for (lay, st) in self.layouts.iter().zip(&self.states) {
            for &a in &lay.owned_states {
                z.row_mut(a).copy_from(&st.z_hat.row(local(lay, a)));
            }
        }
        z
    }

    /// For every state held by two or more sensors, the largest pairwise
    /// deviation between their information estimates `ẑ^(l)` and their local
    /// predictors. Entries are `(state, deviation)`.
    pub fn check_estimate_consensus(&self) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        for x in 0..self.n {
            let holders: Vec<usize> = self.subsystems.iter().filter(|s| s.local_index(x).is_some()).map(|s| s.sensor_id).collect();
            if holders.len() < 2 {
                continue;
            }
            let mut dev = 0.0_f64;
            for (i, &p) in holders.iter().enumerate() {
                for &q in &holders[i + 1..] {
                    let (sp, sq) = (&self.states[p], &self.states[q]);
                    let (ip, iq) = (self.subsystems[p].local_index(x).unwrap(), self.subsystems[q].local_index(x).unwrap());
                    dev = dev.max((sp.z_hat.row(ip) - sq.z_hat.row(iq)).amax());
                    dev = dev.max((sp.x_pred.row(ip) - sq.x_pred.row(iq)).amax());
                }
            }
            out.push((x, dev));
        }
        out
    }
}

fn local(lay: &DiciLayout, x: usize) -> usize {
    lay.cutset.binary_search(&x).expect("state in cut-point set")
}

/// `Z^(l)` on the cut-point set from a covariance band over the neighbourhood.
fn predicted_information(sub: &SubSystem, lay: &DiciLayout, sb: &BandProfile) -> Result<DMatrix<f64>> {
    let l = lay.l;
    let rows = banded::lband_invert_rows(sb, lay.cutset[0], lay.cutset[lay.cutset.len() - 1] + 1)?;
    let nl = sub.n_l();
    Ok(DMatrix::from_fn(nl, nl, |r, c| {
        let (a, b) = (sub.cutset[r], sub.cutset[c]);
        if a.abs_diff(b) <= l {
            rows.get(a.min(b), a.max(b))
        } else {
            0.0
        }
    }))
}

fn check_band(sub: &SubSystem, m: &DMatrix<f64>, l: usize) -> Result<()> {
    for (r, &a) in sub.cutset.iter().enumerate() {
        for (c, &b) in sub.cutset.iter().enumerate() {
            if a.abs_diff(b) > l && m[(r, c)] != 0.0 {
                return Err(DkfError::BandOverflow { i: a, j: b, l });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposition::decompose;
    use crate::filters::CentralFilter;
    use crate::sparse::SparseMat;

    fn chain_model() -> GlobalModel {
        let n = 8;
        let mut f = DMatrix::zeros(n, n);
        for i in 0..n {
            f[(i, i)] = 0.9;
            if i + 1 < n {
                f[(i, i + 1)] = 0.05;
                f[(i + 1, i)] = 0.05;
            }
        }
        let mut h = DMatrix::zeros(4, n);
        for s in 0..4 {
            h[(s, 2 * s)] = 1.0;
            h[(s, 2 * s + 1)] = 0.5;
        }
        GlobalModel::new(
            SparseMat::from_dense(&f),
            SparseMat::identity(n),
            DMatrix::identity(n, n) * 0.5,
            SparseMat::from_dense(&h),
            DMatrix::identity(4, 4),
            DMatrix::identity(n, n),
            (0..4).map(|s| s..s + 1).collect(),
        )
        .unwrap()
    }

    fn tight() -> LifConfig {
        let jor = JorConfig {
            gamma: 0.1,
            max_iter: 100_000,
            tol: 1e-13,
            window: 10,
        };
        LifConfig {
            dici: jor,
            dici_vector: jor,
            consensus_tol: 1e-14,
            ..Default::default()
        }
    }

    #[test]
    fn matches_banded_central_filter() {
        let m = chain_model();
        let dec = decompose(&m, 1).unwrap();
        let mut lif = Lif::new(&m, &dec, tight(), 1).unwrap();
        let cf = CentralFilter::clbif(&m, 1).unwrap();
        let mut st = cf.init(1).unwrap();
        for k in 0..5 {
            let y = DMatrix::from_fn(4, 1, |r, _| (r + k) as f64 * 0.3 - 0.5);
            assert!((lif.padded_information() - crate::banded::band_project(&st.z, 1).unwrap().to_dense()).amax() < 1e-8);
            let (_, x) = lif.step(&y).unwrap();
            let (f, p) = cf.step(&st, &y).unwrap();
            assert!((x - f.estimate().unwrap()).amax() < 1e-7, "step {k}");
            st = p;
        }
    }

    #[test]
    fn owned_entries_agree() {
        let m = chain_model();
        let dec = decompose(&m, 1).unwrap();
        let mut lif = Lif::new(&m, &dec, tight(), 1).unwrap();
        lif.step(&DMatrix::from_element(4, 1, 1.0)).unwrap();
        for (x, d) in lif.check_estimate_consensus() {
            assert!(d < 1e-9, "state {x}: {d}");
        }
    }
}
