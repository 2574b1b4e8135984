//! The global sparse linear system, its sensors, and simulation.

use std::collections::VecDeque;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{DkfError, Result};
use crate::linalg;
use crate::sparse::SparseMat;

/// `x_{k+1} = F x_k + G u_k`, `y_k = H x_k + w_k`, `u ~ N(0, Q)`,
/// `w ~ N(0, R)`, `x_0 ~ N(0, S0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub f: SparseMat,
    pub g: SparseMat,
    pub q: DMatrix<f64>,
    pub h: SparseMat,
    pub r: DMatrix<f64>,
    pub s0: DMatrix<f64>,
    /// Row range of `H` (and block of `R`) owned by each sensor, in sensor order.
    pub sensor_rows: Vec<Range<usize>>,
}

impl GlobalModel {
    pub fn new(
        f: SparseMat,
        g: SparseMat,
        q: DMatrix<f64>,
        h: SparseMat,
        r: DMatrix<f64>,
        s0: DMatrix<f64>,
        sensor_rows: Vec<Range<usize>>,
    ) -> Result<Self> {
        let m = Self {
            f,
            g,
            q,
            h,
            r,
            s0,
            sensor_rows,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.f.nrows()
    }
    pub fn p(&self) -> usize {
        self.h.nrows()
    }
    pub fn num_sensors(&self) -> usize {
        self.sensor_rows.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let dim = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(DkfError::Dimension(what.to_string()))
            }
        };
        dim(self.f.ncols() == n, "F must be square")?;
        dim(self.g.nrows() == n, "G rows must equal n")?;
        dim(self.q.nrows() == self.g.ncols() && self.q.ncols() == self.g.ncols(), "Q size")?;
        dim(self.h.ncols() == n, "H columns must equal n")?;
        dim(self.r.nrows() == self.p() && self.r.ncols() == self.p(), "R size")?;
        dim(self.s0.nrows() == n && self.s0.ncols() == n, "S0 size")?;
        let mut next = 0;
        for rg in &self.sensor_rows {
            if rg.start != next || rg.end < rg.start {
                return Err(DkfError::InvalidArgument("sensor rows must partition 0..p".into()));
            }
            next = rg.end;
        }
        if next != self.p() {
            return Err(DkfError::InvalidArgument("sensor rows must partition 0..p".into()));
        }
        for (name, a) in [("Q", &self.q), ("R", &self.r), ("S0", &self.s0)] {
            if !linalg::is_symmetric(a, 1e-12) {
                return Err(DkfError::InvalidArgument(format!("{name} must be symmetric")));
            }
            linalg::psd_factor(a)?;
        }
        for (a, ra) in self.sensor_rows.iter().enumerate() {
            for (b, rb) in self.sensor_rows.iter().enumerate() {
                if a == b {
                    continue;
                }
                for i in ra.clone() {
                    for j in rb.clone() {
                        if self.r[(i, j)] != 0.0 {
                            return Err(DkfError::InvalidArgument(
                                "R must be block diagonal over sensors".into(),
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Observation block `H_l`.
    pub fn h_block(&self, l: usize) -> SparseMat {
        self.h.select_rows(self.sensor_rows[l].clone())
    }

    /// Noise block `R_l`.
    pub fn r_block(&self, l: usize) -> DMatrix<f64> {
        let rg = self.sensor_rows[l].clone();
        self.r.view((rg.start, rg.start), (rg.len(), rg.len())).into_owned()
    }

    /// Replaces the observation model.
    pub fn with_sensors(mut self, blocks: Vec<(SparseMat, DMatrix<f64>)>) -> Result<Self> {
        let n = self.n();
        let p: usize = blocks.iter().map(|(h, _)| h.nrows()).sum();
        let mut trip = Vec::new();
        let mut r = DMatrix::zeros(p, p);
        let mut rows = Vec::new();
        let mut at = 0;
        for (h, rl) in &blocks {
            if h.ncols() != n || rl.nrows() != h.nrows() || rl.ncols() != h.nrows() {
                return Err(DkfError::Dimension("sensor block sizes".into()));
            }
            trip.extend(h.triplets().map(|(i, j, v)| (i + at, j, v)));
            r.view_mut((at, at), (h.nrows(), h.nrows())).copy_from(rl);
            rows.push(at..at + h.nrows());
            at += h.nrows();
        }
        self.h = SparseMat::from_triplets(p, n, trip);
        self.r = r;
        self.sensor_rows = rows;
        self.validate()?;
        Ok(self)
    }

    /// Global observation information `Hᵀ R⁻¹ H` (dense, for centralized filters).
    pub fn observation_information(&self) -> Result<DMatrix<f64>> {
        let n = self.n();
        let mut out = DMatrix::zeros(n, n);
        for l in 0..self.num_sensors() {
            let h = self.h_block(l).to_dense();
            let ri = linalg::spd_inverse_or(&self.r_block(l), "R_l")?;
            out += h.transpose() * ri * h;
        }
        Ok(out)
    }

    /// `G Q Gᵀ` (dense).
    pub fn process_noise(&self) -> DMatrix<f64> {
        let g = self.g.to_dense();
        &g * &self.q * g.transpose()
    }
}

/// A realization of states and observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
    pub seed: u64,
}

impl Trajectory {
    fn csv(rows: &[DVector<f64>], prefix: &str) -> String {
        let width = rows.first().map_or(0, |r| r.len());
        let mut s = String::from("k");
        for i in 0..width {
            s.push_str(&format!(",{prefix}_{i}"));
        }
        s.push('\n');
        for (k, r) in rows.iter().enumerate() {
            s.push_str(&k.to_string());
            for v in r.iter() {
                s.push_str(&format!(",{v:e}"));
            }
            s.push('\n');
        }
        s
    }
    pub fn states_csv(&self) -> String {
        Self::csv(&self.states, "x")
    }
    pub fn observations_csv(&self) -> String {
        Self::csv(&self.observations, "y")
    }
}

/// Independent reproducible stream `trial` of the generator seeded by `seed`.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

pub fn standard_normal(rng: &mut impl Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Cached Gaussian factors for sampling the model noises.
#[derive(Debug, Clone)]
pub struct NoiseFactors {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub s0: DMatrix<f64>,
}

impl NoiseFactors {
    pub fn new(model: &GlobalModel) -> Result<Self> {
        Ok(Self {
            q: linalg::psd_factor(&model.q)?,
            r: linalg::psd_factor(&model.r)?,
            s0: linalg::psd_factor(&model.s0)?,
        })
    }
}

/// One step of the realization: returns `y_k` and advances `x` to `x_{k+1}`.
pub fn step(
    model: &GlobalModel,
    nf: &NoiseFactors,
    x: &mut DVector<f64>,
    rng: &mut impl Rng,
) -> DVector<f64> {
    let w = &nf.r * standard_normal(rng, model.p());
    let y = model.h.mul_vec(x) + w;
    let u = &nf.q * standard_normal(rng, model.q.nrows());
    *x = model.f.mul_vec(x) + model.g.mul_vec(&u);
    y
}

pub fn simulate(model: &GlobalModel, k_max: usize, seed: u64) -> Result<Trajectory> {
    let nf = NoiseFactors::new(model)?;
    let mut rng = trial_rng(seed, 0);
    let x0 = &nf.s0 * standard_normal(&mut rng, model.n());
    Ok(simulate_from(model, &nf, x0, k_max, &mut rng, seed))
}

pub fn simulate_from(
    model: &GlobalModel,
    nf: &NoiseFactors,
    x0: DVector<f64>,
    k_max: usize,
    rng: &mut impl Rng,
    seed: u64,
) -> Trajectory {
    let mut x = x0;
    let mut states = Vec::with_capacity(k_max);
    let mut observations = Vec::with_capacity(k_max);
    for _ in 0..k_max {
        states.push(x.clone());
        observations.push(step(model, nf, &mut x, rng));
    }
    Trajectory {
        states,
        observations,
        seed,
    }
}

/// Elliptic operator on an `rows x cols` grid, discretized in time with step `dt`.
///
/// `F = I + dt (I ⊗ B + A ⊗ C)` with `B = mu I + beta_h A`, `C = beta_v I`, and
/// `A` the zero-diagonal tridiagonal matrix of ones. The boundary vector is
/// dropped. Each noise site gets a `G` column with entry `dt`; `Q = q I`.
/// Observations are empty and `S0 = I`; use [`GlobalModel::with_sensors`].
#[allow(clippy::too_many_arguments)]
pub fn build_elliptic_model(
    rows: usize,
    cols: usize,
    mu: f64,
    beta_h: f64,
    beta_v: f64,
    dt: f64,
    noise_sites: &[usize],
    q: f64,
) -> Result<GlobalModel> {
    if rows < 2 || cols < 2 {
        return Err(DkfError::InvalidArgument("grid needs at least 2 rows and 2 columns".into()));
    }
    if dt <= 0.0 || dt.is_nan() {
        return Err(DkfError::InvalidArgument("dt must be positive".into()));
    }
    let n = rows * cols;
    if let Some(&bad) = noise_sites.iter().find(|&&s| s >= n) {
        return Err(DkfError::InvalidArgument(format!("noise site {bad} out of range")));
    }
    let mut t = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            let at = i * cols + j;
            t.push((at, at, 1.0 + dt * mu));
            if j > 0 {
                t.push((at, at - 1, dt * beta_h));
            }
            if j + 1 < cols {
                t.push((at, at + 1, dt * beta_h));
            }
            if i > 0 {
                t.push((at, at - cols, dt * beta_v));
            }
            if i + 1 < rows {
                t.push((at, at + cols, dt * beta_v));
            }
        }
    }
    let f = SparseMat::from_triplets(n, n, t);
    let m = noise_sites.len();
    let g = SparseMat::from_triplets(n, m, noise_sites.iter().enumerate().map(|(c, &s)| (s, c, dt)));
    GlobalModel::new(
        f,
        g,
        DMatrix::identity(m, m) * q,
        SparseMat::zeros(0, n),
        DMatrix::zeros(0, 0),
        DMatrix::identity(n, n),
        Vec::new(),
    )
}

/// Parameters of a random sparse banded system with unit spectral norm.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomModelSpec {
    pub n: usize,
    /// Structural bandwidth of F.
    pub band: usize,
    /// Probability that an off-diagonal entry inside the band is nonzero.
    pub density: f64,
    /// Mirror the pattern and values so that F is symmetric.
    pub symmetric: bool,
    pub q: f64,
    pub seed: u64,
}

/// Random banded F normalized to `‖F‖₂ = 1`, `G = I`, `Q = q I`, `S0 = I`,
/// no sensors.
pub fn build_random_model(spec: &RandomModelSpec) -> Result<GlobalModel> {
    let n = spec.n;
    if n == 0 || !(0.0..=1.0).contains(&spec.density) {
        return Err(DkfError::InvalidArgument("n > 0 and density in [0, 1] required".into()));
    }
    let mut rng = trial_rng(spec.seed, 0);
    let mut f = DMatrix::zeros(n, n);
    for i in 0..n {
        let lo = i.saturating_sub(spec.band);
        let hi = (i + spec.band + 1).min(n);
        for j in lo..hi {
            let u: f64 = rng.random();
            if i == j || u < spec.density {
                f[(i, j)] = rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    if spec.symmetric {
        for i in 0..n {
            for j in (i + 1)..n {
                f[(j, i)] = f[(i, j)];
            }
        }
    }
    let norm = linalg::spectral_norm(&f);
    if norm > 0.0 {
        f /= norm;
    }
    GlobalModel::new(
        SparseMat::from_dense(&f),
        SparseMat::identity(n),
        DMatrix::identity(n, n) * spec.q,
        SparseMat::zeros(0, n),
        DMatrix::zeros(0, 0),
        DMatrix::identity(n, n),
        Vec::new(),
    )
}

/// One scalar observation per sensor with `span` consecutive random
/// coefficients, sensors spread evenly over the state range.
pub fn random_span_sensors(
    n: usize,
    count: usize,
    span: usize,
    r: f64,
    seed: u64,
) -> Result<Vec<(SparseMat, DMatrix<f64>)>> {
    if span == 0 || span > n || count == 0 {
        return Err(DkfError::InvalidArgument("need 0 < span <= n and count > 0".into()));
    }
    let mut rng = trial_rng(seed, 1);
    Ok((0..count)
        .map(|l| {
            let start = (l * n / count).min(n - span);
            let t: Vec<_> = (start..start + span)
                .map(|c| (0, c, rng.sample::<f64, _>(StandardNormal)))
                .collect();
            (SparseMat::from_triplets(1, n, t), DMatrix::identity(1, 1) * r)
        })
        .collect())
}

/// Reverse Cuthill-McKee ordering of the symmetrized pattern of `F`.
///
/// Returns the permuted model and `perm` with `perm[new] = old`. If the
/// reordering does not reduce the bandwidth, the identity is returned.
pub fn bandwidth_reduce(model: &GlobalModel) -> (GlobalModel, Vec<usize>) {
    let n = model.n();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, j, _) in model.f.triplets() {
        if i != j {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for a in &mut adj {
        a.sort_unstable();
        a.dedup();
    }
    let perm = rcm_order(&adj);
    let bw = |p: &[usize]| {
        let mut pos = vec![0; n];
        for (new, &old) in p.iter().enumerate() {
            pos[old] = new;
        }
        model
            .f
            .triplets()
            .map(|(i, j, _)| pos[i].abs_diff(pos[j]))
            .max()
            .unwrap_or(0)
    };
    let identity: Vec<usize> = (0..n).collect();
    if bw(&perm) >= bw(&identity) {
        return (model.clone(), identity);
    }
    (permute_model(model, &perm), perm)
}

/// Applies the state permutation `perm[new] = old` to every model matrix.
pub fn permute_model(model: &GlobalModel, perm: &[usize]) -> GlobalModel {
    let s0 = DMatrix::from_fn(perm.len(), perm.len(), |r, c| model.s0[(perm[r], perm[c])]);
    GlobalModel {
        f: model.f.permute(Some(perm), Some(perm)),
        g: model.g.permute(Some(perm), None),
        q: model.q.clone(),
        h: model.h.permute(None, Some(perm)),
        r: model.r.clone(),
        s0,
        sensor_rows: model.sensor_rows.clone(),
    }
}

fn rcm_order(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let deg: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let start = (0..n)
            .filter(|&v| !seen[v])
            .min_by_key(|&v| (deg[v], v))
            .expect("unvisited vertex");
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !seen[w]).collect();
            next.sort_by_key(|&w| (deg[w], w));
            for w in next {
                seen[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_operator_gives_identity() {
        let m = build_elliptic_model(2, 2, 0.0, 0.0, 0.0, 1.0, &[], 1.0).unwrap();
        assert_eq!(m.f.to_dense(), DMatrix::identity(4, 4));
    }

    #[test]
    fn centre_cell_stencil() {
        let dt = 0.5;
        let m = build_elliptic_model(3, 3, -1.0, 0.25, 0.25, dt, &[], 1.0).unwrap();
        let fc = (m.f.to_dense() - DMatrix::identity(9, 9)) / dt;
        assert_eq!(fc[(4, 4)], -1.0);
        for nb in [1, 3, 5, 7] {
            assert_eq!(fc[(4, nb)], 0.25);
        }
        assert_eq!(m.f.row(4).count(), 5);
    }

    #[test]
    fn kronecker_bandwidth_is_cols() {
        let m = build_elliptic_model(4, 5, 0.3, 0.2, 0.1, 0.5, &[0, 19], 1.0).unwrap();
        assert_eq!(m.f.bandwidth(), 5);
        assert_eq!(m.g.get(19, 1), 0.5);
    }

    #[test]
    fn elliptic_errors() {
        assert!(build_elliptic_model(3, 3, 0.0, 0.0, 0.0, 0.0, &[], 1.0).is_err());
        assert!(build_elliptic_model(3, 3, 0.0, 0.0, 0.0, 1.0, &[9], 1.0).is_err());
    }

    #[test]
    fn zero_noise_simulation_is_zero() {
        let m = build_elliptic_model(2, 2, 0.1, 0.1, 0.1, 1.0, &[0], 0.0).unwrap();
        let zero = DMatrix::zeros(4, 4);
        let h = SparseMat::identity(4);
        let mut m = m.with_sensors(vec![(h, DMatrix::zeros(4, 4))]).unwrap();
        m.s0 = zero;
        let t = simulate(&m, 5, 3).unwrap();
        assert!(t.states.iter().chain(&t.observations).all(|v| v.norm() == 0.0));
    }

    #[test]
    fn geometric_decay() {
        let m = GlobalModel::new(
            SparseMat::from_dense(&(DMatrix::identity(2, 2) * 0.5)),
            SparseMat::zeros(2, 0),
            DMatrix::zeros(0, 0),
            SparseMat::zeros(0, 2),
            DMatrix::zeros(0, 0),
            DMatrix::zeros(2, 2),
            vec![],
        )
        .unwrap();
        let nf = NoiseFactors::new(&m).unwrap();
        let x0 = DVector::from_vec(vec![1.0, -2.0]);
        let t = simulate_from(&m, &nf, x0.clone(), 6, &mut trial_rng(0, 0), 0);
        for (k, x) in t.states.iter().enumerate() {
            assert_eq!(*x, &x0 * 0.5f64.powi(k as i32));
        }
    }

    #[test]
    fn arrow_matrix_bandwidth_drops() {
        let n = 10;
        let mut t: Vec<_> = (0..n).map(|i| (i, i, 1.0)).collect();
        for j in 1..n {
            t.push((0, j, 1.0));
            t.push((j, 0, 1.0));
        }
        let f = SparseMat::from_triplets(n, n, t);
        let m = GlobalModel::new(
            f,
            SparseMat::identity(n),
            DMatrix::identity(n, n),
            SparseMat::zeros(0, n),
            DMatrix::zeros(0, 0),
            DMatrix::identity(n, n),
            vec![],
        )
        .unwrap();
        let (pm, perm) = bandwidth_reduce(&m);
        assert!(pm.f.bandwidth() < 9);
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn banded_model_keeps_identity() {
        let m = build_elliptic_model(3, 3, -1.0, 0.25, 0.25, 0.1, &[], 1.0).unwrap();
        let (pm, perm) = bandwidth_reduce(&m);
        assert!(pm.f.bandwidth() <= m.f.bandwidth());
        if perm == (0..9).collect::<Vec<_>>() {
            assert_eq!(pm, m);
        }
    }
}
