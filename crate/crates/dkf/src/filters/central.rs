use nalgebra::DMatrix;

use super::StatePhase;
use crate::banded;
use crate::error::{DkfError, Result};
use crate::linalg;
use crate::model::GlobalModel;

/// Information matrix and (batched) information vector of a centralized filter.
#[derive(Debug, Clone, PartialEq)]
pub struct CentralState {
    pub k: usize,
    pub phase: StatePhase,
    /// `n x batch`.
    pub z_hat: DMatrix<f64>,
    pub z: DMatrix<f64>,
}

impl CentralState {
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        let mut s = linalg::spd_inverse_or(&self.z, "information matrix")?;
        linalg::symmetrize(&mut s);
        Ok(s)
    }

    /// `x̂ = Z⁻¹ ẑ`.
    pub fn estimate(&self) -> Result<DMatrix<f64>> {
        let c = self
            .z
            .clone()
            .cholesky()
            .ok_or_else(|| DkfError::NotPositiveDefinite("information matrix".into()))?;
        Ok(c.solve(&self.z_hat))
    }
}

/// Centralized information filter; with `band = Some(L)` every predicted
/// information matrix is replaced by its L-banded approximation.
#[derive(Debug, Clone)]
pub struct CentralFilter {
    pub band: Option<usize>,
    f: DMatrix<f64>,
    gqg: DMatrix<f64>,
    obs_info: DMatrix<f64>,
    ht_rinv: DMatrix<f64>,
    s0: DMatrix<f64>,
}

impl CentralFilter {
    pub fn cif(model: &GlobalModel) -> Result<Self> {
        Self::new(model, None)
    }

    pub fn clbif(model: &GlobalModel, l: usize) -> Result<Self> {
        if l >= model.n() {
            return Err(DkfError::InvalidArgument(format!("L = {l} must be below n = {}", model.n())));
        }
        Self::new(model, Some(l))
    }

    fn new(model: &GlobalModel, band: Option<usize>) -> Result<Self> {
        let rinv = linalg::spd_inverse_or(&model.r, "R")?;
        let ht_rinv = model.h.to_dense().transpose() * rinv;
        Ok(Self {
            band,
            f: model.f.to_dense(),
            gqg: model.process_noise(),
            obs_info: model.observation_information()?,
            ht_rinv,
            s0: model.s0.clone(),
        })
    }

    fn to_information(&self, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self.band {
            None => {
                let mut z = linalg::spd_inverse_or(s, "predicted covariance")?;
                linalg::symmetrize(&mut z);
                Ok(z)
            }
            Some(l) => Ok(banded::lband_invert(&banded::band_project(s, l)?)?.to_dense()),
        }
    }

    /// `Z_{0|-1} = S0⁻¹` (or its L-banded counterpart), `ẑ_{0|-1} = 0`.
    pub fn init(&self, batch: usize) -> Result<CentralState> {
        Ok(CentralState {
            k: 0,
            phase: StatePhase::Predicted,
            z_hat: DMatrix::zeros(self.f.nrows(), batch),
            z: self.to_information(&self.s0)?,
        })
    }

    /// Adds the observation information; `y` is `p x batch`.
    pub fn filter(&self, st: &CentralState, y: &DMatrix<f64>) -> CentralState {
        CentralState {
            k: st.k,
            phase: StatePhase::Filtered,
            z_hat: &st.z_hat + &self.ht_rinv * y,
            z: &st.z + &self.obs_info,
        }
    }

    pub fn predict(&self, st: &CentralState) -> Result<CentralState> {
        let s = st.covariance()?;
        let x = &s * &st.z_hat;
        let mut sp = &self.f * s * self.f.transpose() + &self.gqg;
        linalg::symmetrize(&mut sp);
        let z = self.to_information(&sp)?;
        let z_hat = &z * (&self.f * x);
        Ok(CentralState {
            k: st.k + 1,
            phase: StatePhase::Predicted,
            z_hat,
            z,
        })
    }

    /// Filter then predict; returns `(filtered, predicted)`.
    pub fn step(&self, st: &CentralState, y: &DMatrix<f64>) -> Result<(CentralState, CentralState)> {
        let f = self.filter(st, y);
        let p = self.predict(&f)?;
        Ok((f, p))
    }
}

pub fn cif_step(filter: &CentralFilter, st: &CentralState, y: &DMatrix<f64>) -> Result<(CentralState, CentralState)> {
    debug_assert!(filter.band.is_none());
    filter.step(st, y)
}

pub fn clbif_step(filter: &CentralFilter, st: &CentralState, y: &DMatrix<f64>) -> Result<(CentralState, CentralState)> {
    debug_assert!(filter.band.is_some());
    filter.step(st, y)
}

/// `trace(S_{k|k})` for `k = 0..steps` of the exact filter (data independent).
pub fn riccati_traces(model: &GlobalModel, steps: usize) -> Result<Vec<f64>> {
    let f = CentralFilter::cif(model)?;
    let mut st = f.init(0)?;
    let y = DMatrix::zeros(model.p(), 0);
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let filt = f.filter(&st, &y);
        out.push(filt.covariance()?.trace());
        st = f.predict(&filt)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::SparseMat;

    fn scalar_model(f: f64, q: f64, h: f64, r: f64) -> GlobalModel {
        GlobalModel::new(
            SparseMat::from_dense(&DMatrix::from_element(1, 1, f)),
            SparseMat::identity(1),
            DMatrix::from_element(1, 1, q),
            SparseMat::from_dense(&DMatrix::from_element(1, 1, h)),
            DMatrix::from_element(1, 1, r),
            DMatrix::from_element(1, 1, 1.0),
            vec![0..1],
        )
        .unwrap()
    }

    #[test]
    fn no_observation_leaves_state() {
        let m = scalar_model(0.9, 1.0, 0.0, 1.0);
        let f = CentralFilter::cif(&m).unwrap();
        let st = f.init(1).unwrap();
        let out = f.filter(&st, &DMatrix::from_element(1, 1, 3.0));
        assert_eq!(out.z, st.z);
        assert_eq!(out.z_hat, st.z_hat);
    }

    #[test]
    fn scalar_riccati_fixed_point() {
        let (a, q, r) = (0.9, 1.0, 2.0);
        let tr = riccati_traces(&scalar_model(a, q, 1.0, r), 200).unwrap();
        let p = tr[199];
        // P = ((a² P + q)⁻¹ + 1/r)⁻¹
        let again = 1.0 / (1.0 / (a * a * p + q) + 1.0 / r);
        assert!((p - again).abs() < 1e-12);
    }
}
