//! Spatial decomposition: system digraph, cut-point sets, reduced local
//! models and the observation fusion topology.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{DkfError, Result};
use crate::model::GlobalModel;

/// Directed graph over states and noise inputs; `e[(i, j)] = 1` when column
/// `j` of `[F | G]` drives state `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemDigraph {
    pub n: usize,
    pub noise: usize,
    pub e: DMatrix<u8>,
}

impl SystemDigraph {
    /// Undirected state-to-state neighbours (self loops removed), ascending.
    pub fn state_neighbours(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j && self.e[(i, j)] == 1 {
                    adj[i].push(j);
                    adj[j].push(i);
                }
            }
        }
        for a in &mut adj {
            a.sort_unstable();
            a.dedup();
        }
        adj
    }
}

pub fn build_digraph(model: &GlobalModel) -> SystemDigraph {
    let n = model.n();
    let m = model.g.ncols();
    let mut e = DMatrix::zeros(n, n + m);
    for (i, j, _) in model.f.triplets() {
        e[(i, j)] = 1;
    }
    for (i, j, _) in model.g.triplets() {
        e[(i, n + j)] = 1;
    }
    SystemDigraph { n, noise: m, e }
}

/// Support of each sensor's observation rows; states observed by nobody go to
/// the sensor nearest in digraph distance (lowest sensor id on ties).
pub fn cut_point_sets(model: &GlobalModel) -> Vec<Vec<usize>> {
    let n = model.n();
    let mut sets: Vec<BTreeSet<usize>> = (0..model.num_sensors())
        .map(|l| model.h_block(l).triplets().map(|(_, c, _)| c).collect())
        .collect();
    let mut label: Vec<Option<usize>> = vec![None; n];
    for (l, s) in sets.iter().enumerate() {
        for &x in s {
            label[x].get_or_insert(l);
        }
    }
    if label.iter().any(Option::is_none) && !sets.is_empty() {
        // Multi-source BFS; visiting sources in ascending (sensor, state)
        // order makes the lowest sensor id win ties at equal distance.
        let adj = build_digraph(model).state_neighbours();
        let mut dist: Vec<Option<(usize, usize)>> = vec![None; n];
        let mut queue = VecDeque::new();
        for (l, s) in sets.iter().enumerate() {
            for &x in s {
                if dist[x].is_none() {
                    dist[x] = Some((0, l));
                    queue.push_back(x);
                }
            }
        }
        while let Some(v) = queue.pop_front() {
            let (d, l) = dist[v].unwrap();
            for &w in &adj[v] {
                match dist[w] {
                    None => {
                        dist[w] = Some((d + 1, l));
                        queue.push_back(w);
                    }
                    Some((dw, lw)) if dw == d + 1 && l < lw => dist[w] = Some((dw, l)),
                    _ => {}
                }
            }
        }
        for x in 0..n {
            if label[x].is_none() {
                // Unreachable states go to sensor 0.
                let l = dist[x].map_or(0, |(_, l)| l);
                sets[l].insert(x);
            }
        }
    }
    sets.into_iter().map(|s| s.into_iter().collect()).collect()
}

/// Grows every set to at least `l` states by breadth-first search over the
/// digraph, adding candidates of each level in ascending index order.
pub fn extend_cutsets(
    sets: &[Vec<usize>],
    l: usize,
    digraph: &SystemDigraph,
) -> Result<Vec<Vec<usize>>> {
    let n = digraph.n;
    if l > n {
        return Err(DkfError::InvalidArgument(format!("L = {l} exceeds n = {n}")));
    }
    let adj = digraph.state_neighbours();
    let mut out = Vec::with_capacity(sets.len());
    for set in sets {
        let mut have: BTreeSet<usize> = set.iter().copied().collect();
        if have.is_empty() {
            return Err(DkfError::InvalidArgument("cannot extend an empty cut-point set".into()));
        }
        let mut level: Vec<usize> = have.iter().copied().collect();
        while have.len() < l {
            let mut next: BTreeSet<usize> = BTreeSet::new();
            for &v in &level {
                next.extend(adj[v].iter().copied().filter(|w| !have.contains(w)));
            }
            if next.is_empty() {
                // Component exhausted: take the lowest unused states.
                next = (0..n).filter(|x| !have.contains(x)).take(l - have.len()).collect();
            }
            let mut added = Vec::new();
            for w in next {
                if have.len() >= l {
                    break;
                }
                have.insert(w);
                added.push(w);
            }
            level = added;
        }
        out.push(have.into_iter().collect());
    }
    Ok(out)
}

/// Makes every band window `{i, ..., i + l}` lie inside some cut-point set,
/// so that every in-band pair has a holder and the windows used by the
/// L-banded inversion are local. An uncovered window goes to the sensor whose
/// set centroid is nearest the window centre (lowest id on ties).
pub fn cover_band_windows(sets: &[Vec<usize>], n: usize, l: usize) -> Vec<Vec<usize>> {
    let mut sets: Vec<BTreeSet<usize>> = sets.iter().map(|s| s.iter().copied().collect()).collect();
    if sets.is_empty() || l >= n {
        return sets.into_iter().map(|s| s.into_iter().collect()).collect();
    }
    for i in 0..(n - l) {
        let covered = sets.iter().any(|s| (i..=i + l).all(|x| s.contains(&x)));
        if covered {
            continue;
        }
        let centre = i as f64 + l as f64 / 2.0;
        let best = (0..sets.len())
            .min_by(|&a, &b| {
                let da = centroid_gap(&sets[a], centre);
                let db = centroid_gap(&sets[b], centre);
                da.total_cmp(&db).then(a.cmp(&b))
            })
            .unwrap();
        sets[best].extend(i..=i + l);
    }
    sets.into_iter().map(|s| s.into_iter().collect()).collect()
}

fn centroid_gap(s: &BTreeSet<usize>, centre: f64) -> f64 {
    if s.is_empty() {
        return f64::INFINITY;
    }
    let c = s.iter().sum::<usize>() as f64 / s.len() as f64;
    (c - centre).abs()
}

/// Reduced model of one sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SubSystem {
    pub sensor_id: usize,
    /// Cut-point set, ascending global state indices.
    pub cutset: Vec<usize>,
    pub f_loc: DMatrix<f64>,
    /// States outside the cutset that drive it, ascending.
    pub d_states: Vec<usize>,
    pub d_loc: DMatrix<f64>,
    /// Noise inputs entering the cutset, ascending.
    pub noise_ids: Vec<usize>,
    pub g_loc: DMatrix<f64>,
    pub q_loc: DMatrix<f64>,
    pub h_red: DMatrix<f64>,
    pub r_l: DMatrix<f64>,
}

impl SubSystem {
    pub fn n_l(&self) -> usize {
        self.cutset.len()
    }

    /// The `n_l x n` selection matrix (diagnostics only; never used by sensors).
    pub fn selection(&self, n: usize) -> DMatrix<f64> {
        let mut t = DMatrix::zeros(self.cutset.len(), n);
        for (r, &c) in self.cutset.iter().enumerate() {
            t[(r, c)] = 1.0;
        }
        t
    }

    pub fn local_index(&self, state: usize) -> Option<usize> {
        self.cutset.binary_search(&state).ok()
    }
}

pub fn build_subsystem(model: &GlobalModel, cutset: &[usize], sensor_id: usize) -> Result<SubSystem> {
    if cutset.is_empty() {
        return Err(DkfError::InvalidArgument("cut-point set is empty".into()));
    }
    let mut cutset = cutset.to_vec();
    cutset.sort_unstable();
    cutset.dedup();
    if cutset.last().is_some_and(|&x| x >= model.n()) {
        return Err(DkfError::InvalidArgument("cut-point state out of range".into()));
    }
    let inside = |x: usize| cutset.binary_search(&x).ok();
    let mut d_states = BTreeSet::new();
    let mut noise_ids = BTreeSet::new();
    for &a in &cutset {
        d_states.extend(model.f.row(a).map(|(c, _)| c).filter(|&c| inside(c).is_none()));
        noise_ids.extend(model.g.row(a).map(|(c, _)| c));
    }
    let d_states: Vec<usize> = d_states.into_iter().collect();
    let noise_ids: Vec<usize> = noise_ids.into_iter().collect();
    let nl = cutset.len();
    let mut f_loc = DMatrix::zeros(nl, nl);
    let mut d_loc = DMatrix::zeros(nl, d_states.len());
    let mut g_loc = DMatrix::zeros(nl, noise_ids.len());
    for (r, &a) in cutset.iter().enumerate() {
        for (c, v) in model.f.row(a) {
            match inside(c) {
                Some(k) => f_loc[(r, k)] = v,
                None => d_loc[(r, d_states.binary_search(&c).unwrap())] = v,
            }
        }
        for (c, v) in model.g.row(a) {
            g_loc[(r, noise_ids.binary_search(&c).unwrap())] = v;
        }
    }
    let q_loc = DMatrix::from_fn(noise_ids.len(), noise_ids.len(), |r, c| {
        model.q[(noise_ids[r], noise_ids[c])]
    });
    let hl = model.h_block(sensor_id);
    let mut h_red = DMatrix::zeros(hl.nrows(), nl);
    for (r, c, v) in hl.triplets() {
        let k = inside(c).ok_or_else(|| {
            DkfError::InvalidArgument(format!("sensor {sensor_id} observes state {c} outside its cut-point set"))
        })?;
        h_red[(r, k)] = v;
    }
    Ok(SubSystem {
        sensor_id,
        cutset,
        f_loc,
        d_states,
        d_loc,
        noise_ids,
        g_loc,
        q_loc,
        h_red,
        r_l: model.r_block(sensor_id),
    })
}

/// Sensor graph: `l` and `m` are adjacent when their cut-point sets overlap or
/// one needs internal inputs from the other's cut-point set.
pub fn default_comm_graph(subsystems: &[SubSystem]) -> Vec<Vec<usize>> {
    let n = subsystems.len();
    let mut adj = vec![Vec::new(); n];
    let sets: Vec<BTreeSet<usize>> = subsystems.iter().map(|s| s.cutset.iter().copied().collect()).collect();
    for a in 0..n {
        for b in (a + 1)..n {
            let overlap = !sets[a].is_disjoint(&sets[b]);
            let feeds = subsystems[a].d_states.iter().any(|x| sets[b].contains(x))
                || subsystems[b].d_states.iter().any(|x| sets[a].contains(x));
            if overlap || feeds {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
    }
    adj
}

/// Bipartite fusion graph and per-state fusion subgraphs.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionTopology {
    /// Edges `(sensor, state)`: the sensor's observation block has a nonzero in that column.
    pub bipartite: Vec<(usize, usize)>,
    /// Sensors adjacent to each state in the bipartite graph, ascending.
    pub groups: Vec<Vec<usize>>,
    /// Consensus weights per state over `groups[j]` (row/column order of the group).
    pub weights: Vec<DMatrix<f64>>,
    /// Sensor communication graph.
    pub comm: Vec<Vec<usize>>,
}

impl FusionTopology {
    /// Sensors observing both states; they fuse the `(a, b)` information entry.
    pub fn pair_group(&self, a: usize, b: usize) -> Vec<usize> {
        self.groups[a]
            .iter()
            .copied()
            .filter(|s| self.groups[b].binary_search(s).is_ok())
            .collect()
    }

    pub fn adjacent(&self, a: usize, b: usize) -> bool {
        self.comm[a].binary_search(&b).is_ok()
    }

    /// Fusion graph as edge-list CSV.
    pub fn edges_csv(&self) -> String {
        let mut s = String::from("sensor,state\n");
        for (l, j) in &self.bipartite {
            s.push_str(&format!("{l},{j}\n"));
        }
        s
    }
}

/// Metropolis weights `1 / (1 + max(deg_u, deg_v))` on the subgraph induced by
/// `group`; the diagonal absorbs the remainder. `Err(None)` if disconnected.
pub fn metropolis_weights(group: &[usize], comm: &[Vec<usize>]) -> std::result::Result<DMatrix<f64>, ()> {
    let m = group.len();
    let linked = |a: usize, b: usize| comm[group[a]].contains(&group[b]);
    let deg: Vec<usize> = (0..m).map(|a| (0..m).filter(|&b| b != a && linked(a, b)).count()).collect();
    let mut w = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in 0..m {
            if a != b && linked(a, b) {
                w[(a, b)] = 1.0 / (1.0 + deg[a].max(deg[b]) as f64);
            }
        }
        w[(a, a)] = 1.0 - (0..m).filter(|&b| b != a).map(|b| w[(a, b)]).sum::<f64>();
    }
    let mut seen = vec![false; m];
    let mut stack = vec![0];
    if m > 0 {
        seen[0] = true;
    }
    while let Some(v) = stack.pop() {
        for u in 0..m {
            if !seen[u] && linked(v, u) {
                seen[u] = true;
                stack.push(u);
            }
        }
    }
    if seen.iter().all(|s| *s) {
        Ok(w)
    } else {
        Err(())
    }
}

pub fn build_fusion_topology(
    model: &GlobalModel,
    subsystems: &[SubSystem],
    comm: Vec<Vec<usize>>,
) -> Result<FusionTopology> {
    let n = model.n();
    if comm.len() != subsystems.len() {
        return Err(DkfError::Dimension("communication graph size".into()));
    }
    let mut comm = comm;
    for a in &mut comm {
        a.sort_unstable();
        a.dedup();
    }
    let mut groups = vec![Vec::new(); n];
    let mut bipartite = Vec::new();
    for l in 0..model.num_sensors() {
        let cols: BTreeSet<usize> = model.h_block(l).triplets().map(|(_, c, _)| c).collect();
        for c in cols {
            bipartite.push((l, c));
            groups[c].push(l);
        }
    }
    bipartite.sort_unstable();
    let mut weights = Vec::with_capacity(n);
    for (j, g) in groups.iter().enumerate() {
        weights.push(metropolis_weights(g, &comm).map_err(|_| DkfError::DisconnectedFusion { state: j })?);
    }
    Ok(FusionTopology {
        bipartite,
        groups,
        weights,
        comm,
    })
}

/// Full decomposition for band width `l`.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub l: usize,
    pub subsystems: Vec<SubSystem>,
    pub topology: FusionTopology,
}

/// Cut-point sets, extension to `n_l >= l`, band-window coverage, local
/// models and fusion topology with the default communication graph.
pub fn decompose(model: &GlobalModel, l: usize) -> Result<Decomposition> {
    decompose_with(model, l, None)
}

pub fn decompose_with(model: &GlobalModel, l: usize, comm: Option<Vec<Vec<usize>>>) -> Result<Decomposition> {
    let n = model.n();
    if l >= n {
        return Err(DkfError::InvalidArgument(format!("L = {l} must be below n = {n}")));
    }
    if model.num_sensors() == 0 {
        return Err(DkfError::InvalidArgument("model has no sensors".into()));
    }
    let dg = build_digraph(model);
    let sets = extend_cutsets(&cut_point_sets(model), l, &dg)?;
    let sets = cover_band_windows(&sets, n, l);
    let subsystems = sets
        .iter()
        .enumerate()
        .map(|(id, s)| build_subsystem(model, s, id))
        .collect::<Result<Vec<_>>>()?;
    let comm = comm.unwrap_or_else(|| default_comm_graph(&subsystems));
    let topology = build_fusion_topology(model, &subsystems, comm)?;
    Ok(Decomposition {
        l,
        subsystems,
        topology,
    })
}

#[derive(Serialize)]
struct SensorReport<'a> {
    sensor: usize,
    cutset: &'a [usize],
    input_states: &'a [usize],
    noise_inputs: &'a [usize],
    neighbours: &'a [usize],
}

#[derive(Serialize)]
struct Report<'a> {
    l: usize,
    sensors: Vec<SensorReport<'a>>,
}

impl Decomposition {
    /// Structured (JSON) report: cut-point sets, input states and neighbours.
    pub fn report(&self) -> String {
        let sensors = self
            .subsystems
            .iter()
            .map(|s| SensorReport {
                sensor: s.sensor_id,
                cutset: &s.cutset,
                input_states: &s.d_states,
                noise_inputs: &s.noise_ids,
                neighbours: &self.topology.comm[s.sensor_id],
            })
            .collect();
        serde_json::to_string_pretty(&Report { l: self.l, sensors }).expect("serializable report")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::SparseMat;

    /// Five states, three sensors with overlapping observations, noise on
    /// states 3 and 5.
    pub(crate) fn five_state() -> GlobalModel {
        let f = DMatrix::from_row_slice(
            5,
            5,
            &[
                0.9, 0.1, 0.0, 0.0, 0.0, //
                0.2, 0.8, 0.0, 0.1, 0.0, //
                0.1, 0.0, 0.7, 0.0, 0.0, //
                0.0, 0.0, 0.2, 0.0, 0.1, //
                0.0, 0.0, 0.0, 0.3, 0.6,
            ],
        );
        let mut g = DMatrix::zeros(5, 2);
        g[(2, 1)] = 1.0;
        g[(4, 0)] = 1.0;
        let h = [
            vec![1.0, 1.0, 1.0, 0.0, 0.0],
            vec![0.0, 1.0, 1.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0, 1.0],
        ];
        let base = GlobalModel::new(
            SparseMat::from_dense(&f),
            SparseMat::from_dense(&g),
            DMatrix::identity(2, 2),
            SparseMat::zeros(0, 5),
            DMatrix::zeros(0, 0),
            DMatrix::identity(5, 5),
            vec![],
        )
        .unwrap();
        base.with_sensors(
            h.iter()
                .map(|row| (SparseMat::from_dense(&DMatrix::from_row_slice(1, 5, row)), DMatrix::identity(1, 1)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn interconnection_matrix() {
        let e = build_digraph(&five_state()).e;
        let expect = [
            [1, 1, 0, 0, 0, 0, 0],
            [1, 1, 0, 1, 0, 0, 0],
            [1, 0, 1, 0, 0, 0, 1],
            [0, 0, 1, 0, 1, 0, 0],
            [0, 0, 0, 1, 1, 1, 0],
        ];
        assert_eq!(e, DMatrix::from_fn(5, 7, |r, c| expect[r][c] as u8));
    }

    #[test]
    fn diagonal_digraph() {
        let mut m = five_state();
        m.f = SparseMat::identity(5);
        m.g = SparseMat::zeros(5, 0);
        m.q = DMatrix::zeros(0, 0);
        let e = build_digraph(&m).e;
        assert_eq!(e, DMatrix::from_fn(5, 5, |r, c| (r == c) as u8));
    }

    #[test]
    fn first_cutset() {
        let sets = cut_point_sets(&five_state());
        assert_eq!(sets[0], vec![0, 1, 2]);
        assert_eq!(sets[1], vec![1, 2, 3]);
        assert_eq!(sets[2], vec![3, 4]);
    }

    #[test]
    fn identity_observation_gives_singletons() {
        let m = five_state();
        let blocks = (0..5)
            .map(|i| {
                (
                    SparseMat::from_triplets(1, 5, vec![(0, i, 1.0)]),
                    DMatrix::identity(1, 1),
                )
            })
            .collect();
        let m = m.with_sensors(blocks).unwrap();
        let sets = cut_point_sets(&m);
        assert_eq!(sets, (0..5).map(|i| vec![i]).collect::<Vec<_>>());
    }

    #[test]
    fn unobserved_state_lands_once() {
        let m = five_state();
        let blocks = vec![
            (SparseMat::from_triplets(1, 5, vec![(0, 0, 1.0), (0, 1, 1.0)]), DMatrix::identity(1, 1)),
            (SparseMat::from_triplets(1, 5, vec![(0, 3, 1.0), (0, 4, 1.0)]), DMatrix::identity(1, 1)),
        ];
        let m = m.with_sensors(blocks).unwrap();
        let sets = cut_point_sets(&m);
        assert_eq!(sets.iter().filter(|s| s.contains(&2)).count(), 1);
    }

    #[test]
    fn chain_extension() {
        let n = 9;
        let mut e = DMatrix::zeros(n, n);
        for i in 0..n {
            e[(i, i)] = 1;
            if i + 1 < n {
                e[(i, i + 1)] = 1;
            }
        }
        let dg = SystemDigraph { n, noise: 0, e };
        let out = extend_cutsets(&[vec![5]], 3, &dg).unwrap();
        assert_eq!(out[0], vec![4, 5, 6]);
        let same = extend_cutsets(&[vec![1, 2, 3]], 3, &dg).unwrap();
        assert_eq!(same[0], vec![1, 2, 3]);
        assert!(extend_cutsets(&[vec![1]], 10, &dg).is_err());
    }

    #[test]
    fn first_subsystem() {
        let m = five_state();
        let s = build_subsystem(&m, &[0, 1, 2], 0).unwrap();
        assert_eq!(s.d_states, vec![3]);
        assert_eq!(s.d_loc[(1, 0)], 0.1); // f24
        assert_eq!(s.noise_ids, vec![1]); // g32
        assert_eq!(s.g_loc[(2, 0)], 1.0);
        assert_eq!(s.h_red, DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]));
        let t = s.selection(5);
        assert_eq!(t, DMatrix::from_fn(3, 5, |r, c| (r == c) as u8 as f64));
        let full = build_subsystem(&m, &[0, 1, 2, 3, 4], 0).unwrap();
        assert!(full.d_states.is_empty());
        assert_eq!(full.f_loc, m.f.to_dense());
    }

    #[test]
    fn fusion_groups() {
        let m = five_state();
        let subs: Vec<_> = cut_point_sets(&m)
            .iter()
            .enumerate()
            .map(|(l, s)| build_subsystem(&m, s, l).unwrap())
            .collect();
        let topo = build_fusion_topology(&m, &subs, default_comm_graph(&subs)).unwrap();
        assert_eq!(topo.groups[0], vec![0]);
        assert_eq!(topo.groups[1], vec![0, 1]);
        assert_eq!(topo.groups[3], vec![1, 2]);
        for w in &topo.weights {
            for r in 0..w.nrows() {
                assert!((w.row(r).sum() - 1.0).abs() < 1e-15);
                assert!((w.column(r).sum() - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn disconnected_fusion_group() {
        let m = five_state();
        let subs: Vec<_> = cut_point_sets(&m)
            .iter()
            .enumerate()
            .map(|(l, s)| build_subsystem(&m, s, l).unwrap())
            .collect();
        let err = build_fusion_topology(&m, &subs, vec![vec![], vec![], vec![]]).unwrap_err();
        assert!(matches!(err, DkfError::DisconnectedFusion { state: 1 }));
    }
}
