#![allow(dead_code)]

use dkf::model::GlobalModel;
use dkf::sparse::SparseMat;
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Covariance-form Kalman filter, the reference for the information filters.
pub struct CovarianceKf {
    f: DMatrix<f64>,
    gqg: DMatrix<f64>,
    h: DMatrix<f64>,
    r: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub p: DMatrix<f64>,
}

impl CovarianceKf {
    pub fn new(m: &GlobalModel, batch: usize) -> Self {
        let g = m.g.to_dense();
        Self {
            f: m.f.to_dense(),
            gqg: &g * &m.q * g.transpose(),
            h: m.h.to_dense(),
            r: m.r.clone(),
            x: DMatrix::zeros(m.n(), batch),
            p: m.s0.clone(),
        }
    }

    /// Measurement update followed by the time update; returns the filtered
    /// estimate and covariance.
    pub fn step(&mut self, y: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let s = &self.h * &self.p * self.h.transpose() + &self.r;
        let k = &self.p * self.h.transpose() * s.try_inverse().expect("innovation covariance");
        let innov = y - &self.h * &self.x;
        let x = &self.x + &k * innov;
        let n = self.p.nrows();
        let ikh = DMatrix::identity(n, n) - &k * &self.h;
        let p = &ikh * &self.p * ikh.transpose() + &k * &self.r * k.transpose();
        self.x = &self.f * &x;
        self.p = &self.f * &p * self.f.transpose() + &self.gqg;
        (x, p)
    }
}

/// Tridiagonal dynamics, diagonal noise, and `sensors` sensors whose rows
/// each touch one state or two adjacent ones.
pub fn random_chain_system(seed: u64, n: usize, sensors: usize) -> GlobalModel {
    let mut r = rng(seed);
    let mut f = DMatrix::zeros(n, n);
    for i in 0..n {
        f[(i, i)] = r.random_range(0.5..1.0);
        if i + 1 < n {
            f[(i, i + 1)] = r.random_range(-0.3..0.3);
            f[(i + 1, i)] = r.random_range(-0.3..0.3);
        }
    }
    let q = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(n, |_, _| r.random_range(0.5..1.5)));
    let mut rows = Vec::new();
    let mut sensor_rows = Vec::new();
    for s in 0..sensors {
        let lo = s * n / sensors;
        let hi = (s + 1) * n / sensors;
        let start = rows.len();
        for _ in 0..r.random_range(1..=2usize) {
            let j = r.random_range(lo..hi);
            let mut row = vec![0.0; n];
            row[j] = r.random_range(0.5..1.5);
            if j + 1 < n && r.random_bool(0.5) {
                row[j + 1] = r.random_range(-1.0..1.0);
            }
            rows.push(row);
        }
        sensor_rows.push(start..rows.len());
    }
    let p = rows.len();
    let h = DMatrix::from_fn(p, n, |i, j| rows[i][j]);
    let rv = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(p, |_, _| r.random_range(0.5..2.0)));
    GlobalModel::new(
        SparseMat::from_dense(&f),
        SparseMat::identity(n),
        q,
        SparseMat::from_dense(&h),
        rv,
        DMatrix::identity(n, n),
        sensor_rows,
    )
    .expect("valid model")
}

/// Five states, three sensors with overlapping observations, noise on states
/// 3 and 5.
pub fn five_state() -> GlobalModel {
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
    let h = DMatrix::from_row_slice(
        3,
        5,
        &[
            1.0, 1.0, 1.0, 0.0, 0.0, //
            0.0, 1.0, 1.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0, 1.0,
        ],
    );
    GlobalModel::new(
        SparseMat::from_dense(&f),
        SparseMat::from_dense(&g),
        DMatrix::identity(2, 2),
        SparseMat::from_dense(&h),
        DMatrix::identity(3, 3),
        DMatrix::identity(5, 5),
        vec![0..1, 1..2, 2..3],
    )
    .expect("valid model")
}

/// Deterministic observation sequence.
pub fn observations(m: &GlobalModel, steps: usize, seed: u64) -> Vec<DMatrix<f64>> {
    let traj = dkf::model::simulate(m, steps, seed).expect("simulation");
    traj.observations.iter().map(|y| DMatrix::from_column_slice(y.len(), 1, y.as_slice())).collect()
}
