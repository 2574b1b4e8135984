//! Weighted-average consensus used to fuse shared observation variables.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::decomposition::{metropolis_weights, FusionTopology, SubSystem};
use crate::error::{DkfError, Result};
use crate::simulator::{CommNetwork, Message, Phase};

/// Diagnostics of one consensus run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ConsensusRun {
    pub iterations: usize,
    /// Largest change in the last iteration (initial spread if none ran).
    pub residual: f64,
    pub messages: u64,
}

/// Consensus on one subgraph with weight matrix `w` (participants in row
/// order). Returns each participant's value times the group size, i.e. the
/// sum of the initial values at convergence.
pub fn consensus_sum(
    values: &[DVector<f64>],
    w: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<DVector<f64>>, ConsensusRun)> {
    let m = values.len();
    if w.nrows() != m || w.ncols() != m {
        return Err(DkfError::Dimension("weight matrix size".into()));
    }
    let edges = (0..m)
        .flat_map(|a| (0..m).map(move |b| (a, b)))
        .filter(|&(a, b)| a != b && w[(a, b)] != 0.0)
        .count() as u64;
    let mut x: Vec<DVector<f64>> = values.to_vec();
    let spread = spread_of(&x);
    let mut run = ConsensusRun {
        residual: spread,
        ..Default::default()
    };
    if spread <= tol {
        return Ok((scale(x, m), run));
    }
    loop {
        if run.iterations >= max_iter {
            return Err(DkfError::NoConvergence {
                iterations: run.iterations,
                residual: run.residual,
            });
        }
        let next: Vec<DVector<f64>> = (0..m)
            .map(|a| {
                let mut v = &x[a] * w[(a, a)];
                for b in 0..m {
                    if b != a && w[(a, b)] != 0.0 {
                        v += &x[b] * w[(a, b)];
                    }
                }
                v
            })
            .collect();
        run.residual = next
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max);
        run.iterations += 1;
        run.messages += edges;
        x = next;
        if run.residual < tol || spread_of(&x) <= tol {
            return Ok((scale(x, m), run));
        }
    }
}

fn spread_of(x: &[DVector<f64>]) -> f64 {
    let mut s = 0.0_f64;
    for a in x {
        for b in x {
            s = s.max((a - b).amax());
        }
    }
    s
}

fn scale(x: Vec<DVector<f64>>, m: usize) -> Vec<DVector<f64>> {
    x.into_iter().map(|v| v * m as f64).collect()
}

/// Distributed fusion of a family of items (states or state pairs). Item `k`
/// is summed over `groups[k]` by consensus and then delivered to every sensor
/// in `holders[k]` that is not in the group.
#[derive(Debug, Clone)]
pub struct ConsensusPlan {
    groups: Vec<Vec<usize>>,
    sensors: Vec<SensorPlan>,
}

#[derive(Debug, Clone, Default)]
struct SensorPlan {
    /// Items this sensor participates in, ascending; its input values follow this order.
    items: Vec<usize>,
    self_w: Vec<f64>,
    /// Per neighbour: positions in `items` shared with it and the weights.
    links: Vec<(usize, Vec<(usize, f64)>)>,
    /// Items this sensor must end up holding, ascending.
    held: Vec<usize>,
    /// Items this sensor forwards after consensus: (destination, positions in `items`).
    forwards: Vec<(usize, Vec<usize>)>,
    /// Positions in `held` filled by messages from each source, in item order.
    receives: Vec<(usize, Vec<usize>)>,
}

impl ConsensusPlan {
    pub fn new(groups: Vec<Vec<usize>>, holders: Vec<Vec<usize>>, comm: &[Vec<usize>]) -> Result<Self> {
        let ns = comm.len();
        let mut sensors = vec![SensorPlan::default(); ns];
        let mut links: Vec<BTreeMap<usize, Vec<(usize, f64)>>> = vec![BTreeMap::new(); ns];
        let mut forwards: Vec<BTreeMap<usize, Vec<usize>>> = vec![BTreeMap::new(); ns];
        let mut receives: Vec<BTreeMap<usize, Vec<usize>>> = vec![BTreeMap::new(); ns];
        for (k, g) in groups.iter().enumerate() {
            let w = metropolis_weights(g, comm).map_err(|_| DkfError::DisconnectedFusion { state: k })?;
            for (a, &s) in g.iter().enumerate() {
                let pos = sensors[s].items.len();
                sensors[s].items.push(k);
                sensors[s].self_w.push(w[(a, a)]);
                for (b, &t) in g.iter().enumerate() {
                    if a != b && w[(a, b)] != 0.0 {
                        links[s].entry(t).or_default().push((pos, w[(a, b)]));
                    }
                }
            }
        }
        for (k, hs) in holders.iter().enumerate() {
            for &h in hs {
                sensors[h].held.push(k);
            }
        }
        for s in &mut sensors {
            s.held.sort_unstable();
            s.held.dedup();
        }
        for (k, hs) in holders.iter().enumerate() {
            let Some(&src) = groups[k].first() else { continue };
            let src_pos = sensors[src].items.binary_search(&k).unwrap();
            for &h in hs {
                if groups[k].binary_search(&h).is_ok() {
                    continue;
                }
                forwards[src].entry(h).or_default().push(src_pos);
                let held_pos = sensors[h].held.binary_search(&k).unwrap();
                receives[h].entry(src).or_default().push(held_pos);
            }
        }
        for (s, plan) in sensors.iter_mut().enumerate() {
            plan.links = std::mem::take(&mut links[s]).into_iter().collect();
            plan.forwards = std::mem::take(&mut forwards[s]).into_iter().collect();
            plan.receives = std::mem::take(&mut receives[s]).into_iter().collect();
        }
        Ok(Self { groups, sensors })
    }

    /// Largest disagreement within any group (the simulator's global view).
    fn spread(&self, vals: &[Vec<f64>], batch: usize) -> f64 {
        let mut spread = 0.0_f64;
        for (k, g) in self.groups.iter().enumerate() {
            for b in 0..batch {
                let (lo, hi) = g.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
                    let pos = self.sensors[s].items.binary_search(&k).unwrap();
                    let v = vals[s][pos * batch + b];
                    (lo.min(v), hi.max(v))
                });
                if !g.is_empty() {
                    spread = spread.max(hi - lo);
                }
            }
        }
        spread
    }

    /// Items sensor `s` contributes to, in input order.
    pub fn items(&self, s: usize) -> &[usize] {
        &self.sensors[s].items
    }

    /// Items sensor `s` holds after fusion, in output order.
    pub fn held(&self, s: usize) -> &[usize] {
        &self.sensors[s].held
    }

    pub fn group(&self, k: usize) -> &[usize] {
        &self.groups[k]
    }

    /// Runs consensus over the network. `inputs[s]` holds `batch` values per
    /// item of `items(s)` (item-major). Returns per sensor the fused sums for
    /// `held(s)` (item-major, `batch` values each). With `tol == 0` exactly
    /// `max_iter` iterations run.
    pub fn run(
        &self,
        net: &mut CommNetwork,
        phase: Phase,
        inputs: Vec<Vec<f64>>,
        batch: usize,
        tol: f64,
        max_iter: usize,
    ) -> Result<(Vec<Vec<f64>>, ConsensusRun)> {
        let ns = self.sensors.len();
        assert_eq!(inputs.len(), ns);
        let before = net.traffic_report().by_phase.get(&phase).copied().unwrap_or_default();
        let mut run = ConsensusRun::default();
        // The initial spread decides whether any iteration is needed.
        let spread = self.spread(&inputs, batch);
        run.residual = spread;
        let mut states: Vec<(Vec<f64>, f64)> = inputs.into_iter().map(|v| (v, 0.0)).collect();
        let budget = tol == 0.0;
        let needed = if budget { max_iter > 0 } else { spread > tol };
        if needed {
            let send = |id: usize, vals: &Vec<f64>| -> Vec<Message> {
                self.sensors[id]
                    .links
                    .iter()
                    .map(|(peer, slots)| {
                        let mut data = Vec::with_capacity(slots.len() * batch);
                        for &(pos, _) in slots {
                            data.extend_from_slice(&vals[pos * batch..(pos + 1) * batch]);
                        }
                        Message::batched(id, *peer, phase, 0, data, batch)
                    })
                    .collect()
            };
            net.run_round(&mut states, |id, st, _| Ok(send(id, &st.0)))?;
            loop {
                let last = budget && run.iterations + 1 >= max_iter;
                net.run_round(&mut states, |id, st, inbox| {
                    let plan = &self.sensors[id];
                    let mut next: Vec<f64> = st.0.clone();
                    for (pos, w) in plan.self_w.iter().enumerate() {
                        for b in 0..batch {
                            next[pos * batch + b] = w * st.0[pos * batch + b];
                        }
                    }
                    for msg in inbox {
                        let (_, slots) = plan
                            .links
                            .iter()
                            .find(|(p, _)| *p == msg.src)
                            .expect("message from a linked neighbour");
                        // The peer lists shared items in ascending item order, as do we.
                        for (idx, &(pos, w)) in slots.iter().enumerate() {
                            for b in 0..batch {
                                next[pos * batch + b] += w * msg.data[idx * batch + b];
                            }
                        }
                    }
                    st.1 = next.iter().zip(&st.0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    st.0 = next;
                    Ok(if last { Vec::new() } else { send(id, &st.0) })
                })?;
                run.iterations += 1;
                run.residual = states.iter().map(|s| s.1).fold(0.0, f64::max);
                let done = if budget {
                    last
                } else {
                    run.residual < tol || {
                        let vals: Vec<Vec<f64>> = states.iter().map(|s| s.0.clone()).collect();
                        self.spread(&vals, batch) <= tol
                    }
                };
                if done {
                    if !last {
                        // Discard the values already in flight.
                        net.run_round(&mut states, |_, _, _| Ok(Vec::new()))?;
                    }
                    break;
                }
                if run.iterations >= max_iter {
                    return Err(DkfError::NoConvergence {
                        iterations: run.iterations,
                        residual: run.residual,
                    });
                }
            }
        }
        // Scale averages to sums, then deliver to non-participating holders.
        let sums: Vec<Vec<f64>> = states
            .into_iter()
            .enumerate()
            .map(|(s, (vals, _))| {
                let plan = &self.sensors[s];
                let mut v = vals;
                for (pos, &k) in plan.items.iter().enumerate() {
                    let m = self.groups[k].len() as f64;
                    for b in 0..batch {
                        v[pos * batch + b] *= m;
                    }
                }
                v
            })
            .collect();
        let mut outs: Vec<(Vec<f64>, Vec<f64>)> = sums
            .into_iter()
            .enumerate()
            .map(|(s, sum)| {
                let plan = &self.sensors[s];
                let mut held = vec![0.0; plan.held.len() * batch];
                for (hp, k) in plan.held.iter().enumerate() {
                    if let Ok(pos) = plan.items.binary_search(k) {
                        held[hp * batch..(hp + 1) * batch].copy_from_slice(&sum[pos * batch..(pos + 1) * batch]);
                    }
                }
                (sum, held)
            })
            .collect();
        if self.sensors.iter().any(|p| !p.forwards.is_empty()) {
            net.run_round(&mut outs, |id, st, _| {
                Ok(self.sensors[id]
                    .forwards
                    .iter()
                    .map(|(dst, positions)| {
                        let mut data = Vec::with_capacity(positions.len() * batch);
                        for &p in positions {
                            data.extend_from_slice(&st.0[p * batch..(p + 1) * batch]);
                        }
                        Message::batched(id, *dst, phase, 1, data, batch)
                    })
                    .collect())
            })?;
            net.run_round(&mut outs, |id, st, inbox| {
                let plan = &self.sensors[id];
                for msg in inbox {
                    let (_, slots) = plan.receives.iter().find(|(s, _)| *s == msg.src).expect("expected forward");
                    for (idx, &hp) in slots.iter().enumerate() {
                        st.1[hp * batch..(hp + 1) * batch].copy_from_slice(&msg.data[idx * batch..(idx + 1) * batch]);
                    }
                }
                Ok(Vec::new())
            })?;
        }
        let after = net.traffic_report().by_phase.get(&phase).copied().unwrap_or_default();
        run.messages = after.messages - before.messages;
        Ok((outs.into_iter().map(|(_, h)| h).collect(), run))
    }
}

/// Fused observation variables of every sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedObservations {
    /// `i_f^(l)` over the cut-point set (`n_l x batch`).
    pub i: Vec<DMatrix<f64>>,
    pub run: ConsensusRun,
}

/// Plans for the per-state vector fusion and the per-pair matrix fusion.
#[derive(Debug, Clone)]
pub struct FusionPlans {
    pub vector: ConsensusPlan,
    pub matrix: ConsensusPlan,
    /// Pair index of each matrix item.
    pub pairs: Vec<(usize, usize)>,
}

impl FusionPlans {
    /// Vector items are states (fused over `G_j`, held by every sensor whose
    /// cut-point set contains `j`); matrix items are state pairs observed
    /// together by at least one sensor (fused over `G_a ∩ G_b`).
    pub fn new(subsystems: &[SubSystem], topology: &FusionTopology) -> Result<Self> {
        let n = topology.groups.len();
        let mut holders = vec![Vec::new(); n];
        for s in subsystems {
            for &x in &s.cutset {
                holders[x].push(s.sensor_id);
            }
        }
        let vector = ConsensusPlan::new(topology.groups.clone(), holders.clone(), &topology.comm)?;
        let mut pairs = Vec::new();
        let mut groups = Vec::new();
        let mut pair_holders = Vec::new();
        for a in 0..n {
            for b in a..n {
                let g = topology.pair_group(a, b);
                if g.is_empty() {
                    continue;
                }
                let hs: Vec<usize> = holders[a].iter().copied().filter(|s| holders[b].contains(s)).collect();
                pairs.push((a, b));
                groups.push(g);
                pair_holders.push(hs);
            }
        }
        let matrix = ConsensusPlan::new(groups, pair_holders, &topology.comm)
            .map_err(|e| match e {
                DkfError::DisconnectedFusion { state } => DkfError::DisconnectedFusion { state: pairs[state].0 },
                other => other,
            })?;
        Ok(Self { vector, matrix, pairs })
    }
}

/// Local observation variables `i^(l) = H^(l)ᵀ R_l⁻¹ y^(l)` for a batch of
/// observation vectors (columns), over the sensor's cut-point set.
pub fn local_information_vector(sub: &SubSystem, r_inv: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    sub.h_red.transpose() * r_inv * y
}

/// `I^(l) = H^(l)ᵀ R_l⁻¹ H^(l)`.
pub fn local_information_matrix(sub: &SubSystem, r_inv: &DMatrix<f64>) -> DMatrix<f64> {
    sub.h_red.transpose() * r_inv * &sub.h_red
}

/// Fuses local observation vectors (`i_locals[l]` is `n_l x batch`) and
/// returns `i_f^(l)` for every sensor.
pub fn fuse_observation_vectors(
    net: &mut CommNetwork,
    plans: &FusionPlans,
    subsystems: &[SubSystem],
    i_locals: &[DMatrix<f64>],
    tol: f64,
    max_iter: usize,
) -> Result<FusedObservations> {
    let batch = i_locals.first().map_or(1, |m| m.ncols());
    let inputs = subsystems
        .iter()
        .map(|s| {
            let mut v = Vec::new();
            for &k in plans.vector.items(s.sensor_id) {
                let li = s.local_index(k).expect("observed state in cut-point set");
                v.extend(i_locals[s.sensor_id].row(li).iter());
            }
            v
        })
        .collect();
    let (held, run) = plans.vector.run(net, Phase::Fusion, inputs, batch, tol, max_iter)?;
    let i = subsystems
        .iter()
        .map(|s| {
            let mut out = DMatrix::zeros(s.n_l(), batch);
            for (hp, &k) in plans.vector.held(s.sensor_id).iter().enumerate() {
                let li = s.local_index(k).unwrap();
                for b in 0..batch {
                    out[(li, b)] = held[s.sensor_id][hp * batch + b];
                }
            }
            out
        })
        .collect();
    Ok(FusedObservations { i, run })
}

/// Fuses the local observation matrices entrywise over the pair subgraphs
/// and returns `I_f^(l)` (`n_l x n_l`) for every sensor.
pub fn fuse_observation_matrices(
    net: &mut CommNetwork,
    plans: &FusionPlans,
    subsystems: &[SubSystem],
    big_i_locals: &[DMatrix<f64>],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<DMatrix<f64>>, ConsensusRun)> {
    let inputs = subsystems
        .iter()
        .map(|s| {
            plans
                .matrix
                .items(s.sensor_id)
                .iter()
                .map(|&k| {
                    let (a, b) = plans.pairs[k];
                    big_i_locals[s.sensor_id][(s.local_index(a).unwrap(), s.local_index(b).unwrap())]
                })
                .collect()
        })
        .collect();
    let (held, run) = plans.matrix.run(net, Phase::Fusion, inputs, 1, tol, max_iter)?;
    let out = subsystems
        .iter()
        .map(|s| {
            let mut m = DMatrix::zeros(s.n_l(), s.n_l());
            for (hp, &k) in plans.matrix.held(s.sensor_id).iter().enumerate() {
                let (a, b) = plans.pairs[k];
                let (ia, ib) = (s.local_index(a).unwrap(), s.local_index(b).unwrap());
                m[(ia, ib)] = held[s.sensor_id][hp];
                m[(ib, ia)] = held[s.sensor_id][hp];
            }
            m
        })
        .collect();
    Ok((out, run))
}
