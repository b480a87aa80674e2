use serde::{Deserialize, Serialize};

/// Base values used to express pressures and mass flow rates in per-unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bases {
    /// Pa
    pub pressure: f64,
    /// kg/s
    pub mfr: f64,
}

impl Default for Bases {
    fn default() -> Self {
        Bases { pressure: 5.0e6, mfr: 10.0 }
    }
}

impl Bases {
    pub fn p_pu(&self, p: f64) -> f64 {
        p / self.pressure
    }

    pub fn m_pu(&self, m: f64) -> f64 {
        m / self.mfr
    }

    pub fn p_si(&self, p: f64) -> f64 {
        p * self.pressure
    }

    pub fn m_si(&self, m: f64) -> f64 {
        m * self.mfr
    }
}

pub const SECONDS_PER_HOUR: f64 = 3600.0;
