//! Cyclic conditioning code: interleaved (cos, sin) pairs of the residual
//! time at integer multiples of the base frequency 2*pi/T, concatenated with
//! the unit wind direction. Any network consuming the code is exactly
//! T-periodic in time by construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WIND_UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct EncodingConfig {
    /// Loop period in frames.
    pub period: u32,
    /// Number of harmonics; code dimension is 2 * harmonics + 2.
    pub harmonics: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig {
            period: 150,
            harmonics: 5,
        }
    }
}

impl EncodingConfig {
    pub fn new(period: u32, harmonics: usize) -> Result<Self> {
        let cfg = EncodingConfig { period, harmonics };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.period < 2 {
            return Err(Error::Validation(format!(
                "encoding period must be >= 2, got {}",
                self.period
            )));
        }
        if self.harmonics < 1 {
            return Err(Error::Validation("encoding needs at least one harmonic".into()));
        }
        Ok(())
    }

    pub fn code_dim(&self) -> usize {
        2 * self.harmonics + 2
    }
}

/// Unit wind direction in the image plane.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct WindSpec {
    pub x: f64,
    pub y: f64,
}

impl WindSpec {
    /// Accepts an already-unit vector (within 1e-6).
    pub fn new(x: f64, y: f64) -> Result<Self> {
        let w = WindSpec { x, y };
        w.validate()?;
        Ok(w)
    }

    /// Renormalizes an arbitrary nonzero vector.
    pub fn from_unnormalized(x: f64, y: f64) -> Result<Self> {
        let n = (x * x + y * y).sqrt();
        if n < 1e-9 {
            return Err(Error::Validation(
                "wind direction must be a nonzero vector".into(),
            ));
        }
        Ok(WindSpec { x: x / n, y: y / n })
    }

    pub fn validate(&self) -> Result<()> {
        let n = (self.x * self.x + self.y * self.y).sqrt();
        if (n - 1.0).abs() > WIND_UNIT_TOL {
            return Err(Error::Validation(format!(
                "wind must be a unit vector, |({}, {})| = {}",
                self.x, self.y, n
            )));
        }
        Ok(())
    }

    pub fn angle(&self) -> f64 {
        self.y.atan2(self.x)
    }
}

/// Conditioning code, ordered [cos p1, sin p1, ..., cos pn, sin pn, wx, wy].
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningCode {
    values: Vec<f64>,
}

impl ConditioningCode {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Code as a [n, D] row-replicated f32 tensor for the network.
    pub fn to_tensor(&self, batch: usize) -> Tensor {
        let row: Vec<f32> = self.values.iter().map(|v| *v as f32).collect();
        let mut data = Vec::with_capacity(batch * row.len());
        for _ in 0..batch {
            data.extend_from_slice(&row);
        }
        Tensor::new(vec![batch, row.len()], data).expect("code tensor shape")
    }
}

/// Sinusoid vector of length 2 * harmonics: entries (cos pn, sin pn) with
/// pn = 2*pi*n*dt/T for n = 1..=harmonics, interleaved.
pub fn encode_time(dt: f64, cfg: &EncodingConfig) -> Vec<f64> {
    let base = 2.0 * std::f64::consts::PI * dt / cfg.period as f64;
    let mut out = Vec::with_capacity(2 * cfg.harmonics);
    for n in 1..=cfg.harmonics {
        let phase = base * n as f64;
        out.push(phase.cos());
        out.push(phase.sin());
    }
    out
}

/// Full conditioning code: time sinusoids then wind components.
pub fn build_code(dt: f64, cfg: &EncodingConfig, wind: &WindSpec) -> Result<ConditioningCode> {
    wind.validate()?;
    let mut values = encode_time(dt, cfg);
    values.push(wind.x);
    values.push(wind.y);
    Ok(ConditioningCode { values })
}
