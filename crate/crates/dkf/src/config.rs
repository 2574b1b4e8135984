//! Model and experiment configuration files (TOML).
//!
//! `save` writes a canonical form; loading a canonical file and saving it
//! again reproduces it byte for byte.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DkfError, Result};
use crate::model::{self, GlobalModel, RandomModelSpec};
use crate::sparse::SparseMat;

/// Largest state dimension a config may request.
pub const MAX_STATES: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DynamicsConfig {
    /// Discretized 2-D elliptic operator on a `rows x cols` grid.
    Elliptic {
        rows: usize,
        cols: usize,
        mu: f64,
        beta_h: f64,
        beta_v: f64,
        dt: f64,
        noise_sites: Vec<usize>,
        q: f64,
    },
    /// Random banded matrix scaled to unit spectral norm; `G = I`, `Q = qI`.
    Random {
        n: usize,
        band: usize,
        density: f64,
        symmetric: bool,
        q: f64,
        seed: u64,
    },
    /// Explicit triplets; `q` is the diagonal of `Q`.
    Explicit {
        n: usize,
        f: Vec<(usize, usize, f64)>,
        g: Vec<(usize, usize, f64)>,
        q: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    /// Rows of `H` belonging to this sensor.
    pub rows: usize,
    /// Triplets `(row within the sensor, state, value)`.
    pub h: Vec<(usize, usize, f64)>,
    /// Noise variance, `R_l = r I`.
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SensorsConfig {
    /// `count` scalar sensors, each with Gaussian coefficients on `span`
    /// consecutive states.
    Span { count: usize, span: usize, r: f64, seed: u64 },
    Explicit { sensors: Vec<SensorSpec> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `S0 = s0_scale I`.
    pub s0_scale: f64,
    /// Apply reverse Cuthill-McKee reordering after building.
    #[serde(default)]
    pub reorder: bool,
    pub dynamics: DynamicsConfig,
    pub sensors: SensorsConfig,
}

impl Default for ModelConfig {
    /// 100 states, bandwidth 20, ten sensors of span 14.
    fn default() -> Self {
        Self {
            s0_scale: 1.0,
            reorder: false,
            dynamics: DynamicsConfig::Random {
                n: 100,
                band: 20,
                density: 0.3,
                symmetric: true,
                q: 1.0,
                seed: 11,
            },
            sensors: SensorsConfig::Span {
                count: 10,
                span: 14,
                r: 1.0,
                seed: 11,
            },
        }
    }
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| DkfError::Parse(e.to_string()))?;
        cfg.check_sizes()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    fn check_sizes(&self) -> Result<()> {
        let n = match &self.dynamics {
            DynamicsConfig::Elliptic { rows, cols, .. } => rows.checked_mul(*cols).unwrap_or(usize::MAX),
            DynamicsConfig::Random { n, .. } | DynamicsConfig::Explicit { n, .. } => *n,
        };
        if n == 0 || n > MAX_STATES {
            return Err(DkfError::InvalidArgument(format!("state dimension {n} outside 1..={MAX_STATES}")));
        }
        let p = match &self.sensors {
            SensorsConfig::Span { count, .. } => *count,
            SensorsConfig::Explicit { sensors } => sensors.iter().map(|s| s.rows).fold(0usize, usize::saturating_add),
        };
        if p > MAX_STATES {
            return Err(DkfError::InvalidArgument(format!("{p} observation rows")));
        }
        Ok(())
    }

    /// Materializes the model.
    pub fn build(&self) -> Result<GlobalModel> {
        self.check_sizes()?;
        if !(self.s0_scale > 0.0) {
            return Err(DkfError::InvalidArgument("s0_scale must be positive".into()));
        }
        let base = match &self.dynamics {
            DynamicsConfig::Elliptic {
                rows,
                cols,
                mu,
                beta_h,
                beta_v,
                dt,
                noise_sites,
                q,
            } => model::build_elliptic_model(*rows, *cols, *mu, *beta_h, *beta_v, *dt, noise_sites, *q)?,
            DynamicsConfig::Random {
                n,
                band,
                density,
                symmetric,
                q,
                seed,
            } => model::build_random_model(&RandomModelSpec {
                n: *n,
                band: *band,
                density: *density,
                symmetric: *symmetric,
                q: *q,
                seed: *seed,
            })?,
            DynamicsConfig::Explicit { n, f, g, q } => {
                let n = *n;
                let nq = q.len();
                check_triplets(f, n, n, "f")?;
                check_triplets(g, n, nq, "g")?;
                GlobalModel::new(
                    SparseMat::from_triplets(n, n, f.clone()),
                    SparseMat::from_triplets(n, nq, g.clone()),
                    DMatrix::from_diagonal(&nalgebra::DVector::from_vec(q.clone())),
                    SparseMat::zeros(0, n),
                    DMatrix::zeros(0, 0),
                    DMatrix::identity(n, n),
                    Vec::new(),
                )?
            }
        };
        let n = base.n();
        let blocks = match &self.sensors {
            SensorsConfig::Span { count, span, r, seed } => model::random_span_sensors(n, *count, *span, *r, *seed)?,
            SensorsConfig::Explicit { sensors } => sensors
                .iter()
                .map(|s| {
                    check_triplets(&s.h, s.rows, n, "h")?;
                    Ok((SparseMat::from_triplets(s.rows, n, s.h.clone()), DMatrix::identity(s.rows, s.rows) * s.r))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        let mut m = base.with_sensors(blocks)?;
        m.s0 = DMatrix::identity(n, n) * self.s0_scale;
        m.validate()?;
        if self.reorder {
            m = model::bandwidth_reduce(&m).0;
        }
        Ok(m)
    }

    /// Explicit configuration reproducing `model`, which needs a diagonal
    /// `Q`, scalar sensor noise `R = rI` per sensor and `S0 = cI`.
    pub fn explicit_from(model: &GlobalModel) -> Result<Self> {
        let n = model.n();
        let q: Vec<f64> = (0..model.q.nrows()).map(|i| model.q[(i, i)]).collect();
        if DMatrix::from_diagonal(&nalgebra::DVector::from_vec(q.clone())) != model.q {
            return Err(DkfError::InvalidArgument("Q is not diagonal".into()));
        }
        let s0_scale = model.s0[(0, 0)];
        if DMatrix::identity(n, n) * s0_scale != model.s0 {
            return Err(DkfError::InvalidArgument("S0 is not a multiple of the identity".into()));
        }
        let sensors = (0..model.num_sensors())
            .map(|l| {
                let rb = model.r_block(l);
                let r = rb[(0, 0)];
                if DMatrix::identity(rb.nrows(), rb.nrows()) * r != rb {
                    return Err(DkfError::InvalidArgument(format!("R_{l} is not a multiple of the identity")));
                }
                let h = model.h_block(l);
                Ok(SensorSpec {
                    rows: h.nrows(),
                    h: h.triplets().collect(),
                    r,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            s0_scale,
            reorder: false,
            dynamics: DynamicsConfig::Explicit {
                n,
                f: model.f.triplets().collect(),
                g: model.g.triplets().collect(),
                q,
            },
            sensors: SensorsConfig::Explicit { sensors },
        })
    }
}

fn check_triplets(t: &[(usize, usize, f64)], rows: usize, cols: usize, what: &str) -> Result<()> {
    for &(r, c, v) in t {
        if r >= rows || c >= cols || !v.is_finite() {
            return Err(DkfError::InvalidArgument(format!("{what} entry ({r}, {c}, {v}) invalid for {rows}x{cols}")));
        }
    }
    Ok(())
}

/// Settings shared by the filter runs and experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub seed: u64,
    pub trials: usize,
    pub k_max: usize,
    /// Band widths for `run`.
    pub l_values: Vec<usize>,
    /// Band width for the DICI sweep.
    pub l: usize,
    pub gamma: f64,
    pub dici_tol: f64,
    pub dici_window: usize,
    pub dici_max_iter: usize,
    pub consensus_tol: f64,
    pub consensus_max_iter: usize,
    /// Matrix DICI budgets for the sweep.
    pub budgets: Vec<usize>,
    /// Steps averaged for steady-state values.
    pub steady_window: usize,
    /// Divergence threshold as a multiple of the Riccati trace.
    pub divergence_factor: f64,
    /// Allowed relative gap of the LIF steady state to the Riccati trace.
    pub trace_tolerance: f64,
    /// Contraction experiment: matrix size and histogram bins.
    pub n: usize,
    pub bins: usize,
    /// Error-bound experiment: iterations per trial.
    pub iterations: usize,
    pub output_dir: String,
    pub model: ModelConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: "default".into(),
            seed: 1,
            trials: 100,
            k_max: 100,
            l_values: vec![1, 2, 5, 10, 15, 20],
            l: 20,
            gamma: crate::dici::DEFAULT_GAMMA,
            dici_tol: 1e-5,
            dici_window: 10,
            dici_max_iter: 20_000,
            consensus_tol: 1e-10,
            consensus_max_iter: 10_000,
            budgets: vec![1, 10, 30, 100, 200],
            steady_window: 20,
            divergence_factor: 10.0,
            trace_tolerance: 0.1,
            n: 100,
            bins: 1000,
            iterations: 100,
            output_dir: "runs".into(),
            model: ModelConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| DkfError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DkfError::InvalidArgument(m.into()));
        if self.trials == 0 || self.k_max == 0 || self.steady_window == 0 || self.bins == 0 {
            return bad("counts must be positive");
        }
        if self.steady_window > self.k_max {
            return bad("steady_window exceeds k_max");
        }
        if !(self.gamma > 0.0) || !(self.dici_tol >= 0.0) || !(self.consensus_tol >= 0.0) {
            return bad("gamma must be positive and tolerances non-negative");
        }
        if self.n < 2 || self.n > MAX_STATES {
            return bad("n out of range");
        }
        self.model.check_sizes()
    }

    /// Hex SHA-256 of the canonical form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Metadata row prepended to every CSV output.
pub fn metadata_row(config_hash: &str, seed: u64, extra: &[(&str, String)]) -> String {
    let mut s = format!(
        "#meta,config_hash={config_hash},seed={seed},version={},nalgebra=0.35",
        env!("CARGO_PKG_VERSION")
    );
    for (k, v) in extra {
        s.push_str(&format!(",{k}={v}"));
    }
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trip() {
        let text = ModelConfig::default().to_toml();
        let again = ModelConfig::from_toml(&text).unwrap().to_toml();
        assert_eq!(text, again);
        let text = ExperimentConfig::default().to_toml();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap().to_toml(), text);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ModelConfig::from_toml("s0_scale = 1.0\nbogus = 2\n").is_err());
    }

    #[test]
    fn explicit_materialization() {
        let m = ModelConfig::default().build().unwrap();
        let cfg = ModelConfig::explicit_from(&m).unwrap();
        let text = cfg.to_toml();
        let back = ModelConfig::from_toml(&text).unwrap();
        assert_eq!(back.build().unwrap(), m);
        assert_eq!(back.to_toml(), text);
    }
}
