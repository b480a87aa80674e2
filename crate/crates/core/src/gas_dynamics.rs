//! Isothermal gas flow in a horizontal pipeline.
//!
//! With the convective and gravity terms dropped, the flow obeys
//!
//! ```text
//! ∂p/∂t + (c²/A) ∂M/∂x = 0
//! ∂p/∂x + (1/A) ∂M/∂t + λc²M|M|/(2dA²p) = 0
//! ```
//!
//! The locally linearized variant replaces the friction term with
//! `λ·v̄·M/(2dA)` for a preselected average velocity `v̄`.
//!
//! The pipeline is split into `K` elements; node 0 is the inlet and node `K`
//! the outlet. Each element `k` owns the state at its outlet node and evolves
//! it with the explicit spatial differences
//!
//! ```text
//! dp_k/dt = −(c²/A)(M_k − M_{k−1})/Δx
//! dM_k/dt = −A(p_k − p_{k−1})/Δx − λc²(M_k + M_{k−1})|M_k + M_{k−1}|/(4dA(p_k + p_{k−1}))
//! ```

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical constants and operating limits of one pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPipelineParams", into = "RawPipelineParams")]
pub struct PipelineParams {
    length: f64,
    diameter: f64,
    friction_factor: f64,
    sound_speed: f64,
    mfr_min: f64,
    mfr_max: f64,
    p_min: f64,
    p_max: f64,
}

#[derive(Serialize, Deserialize)]
struct RawPipelineParams {
    length: f64,
    diameter: f64,
    friction_factor: f64,
    sound_speed: f64,
    mfr_min: f64,
    mfr_max: f64,
    p_min: f64,
    p_max: f64,
}

impl TryFrom<RawPipelineParams> for PipelineParams {
    type Error = Error;

    fn try_from(r: RawPipelineParams) -> Result<Self> {
        PipelineParams::new(r.length, r.diameter, r.friction_factor, r.sound_speed)?
            .with_mfr_limits(r.mfr_min, r.mfr_max)?
            .with_pressure_limits(r.p_min, r.p_max)
    }
}

impl From<PipelineParams> for RawPipelineParams {
    fn from(p: PipelineParams) -> Self {
        RawPipelineParams {
            length: p.length,
            diameter: p.diameter,
            friction_factor: p.friction_factor,
            sound_speed: p.sound_speed,
            mfr_min: p.mfr_min,
            mfr_max: p.mfr_max,
            p_min: p.p_min,
            p_max: p.p_max,
        }
    }
}

impl PipelineParams {
    /// Builds a pipeline with wide default limits (0–100 kg/s, 1–10 MPa).
    pub fn new(length: f64, diameter: f64, friction_factor: f64, sound_speed: f64) -> Result<Self> {
        for (name, v) in [
            ("length", length),
            ("diameter", diameter),
            ("friction_factor", friction_factor),
            ("sound_speed", sound_speed),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(PipelineParams {
            length,
            diameter,
            friction_factor,
            sound_speed,
            mfr_min: 0.0,
            mfr_max: 100.0,
            p_min: 1.0e6,
            p_max: 1.0e7,
        })
    }

    pub fn with_mfr_limits(mut self, mfr_min: f64, mfr_max: f64) -> Result<Self> {
        if !(mfr_min.is_finite() && mfr_max.is_finite() && mfr_min < mfr_max) {
            return Err(Error::InvalidParams(format!(
                "mfr limits must satisfy mfr_min < mfr_max, got [{mfr_min}, {mfr_max}]"
            )));
        }
        self.mfr_min = mfr_min;
        self.mfr_max = mfr_max;
        Ok(self)
    }

    pub fn with_pressure_limits(mut self, p_min: f64, p_max: f64) -> Result<Self> {
        if !(p_min.is_finite() && p_max.is_finite() && p_min > 0.0 && p_min < p_max) {
            return Err(Error::InvalidParams(format!(
                "pressure limits must satisfy 0 < p_min < p_max, got [{p_min}, {p_max}]"
            )));
        }
        self.p_min = p_min;
        self.p_max = p_max;
        Ok(self)
    }

    /// The 30 km test pipeline used for the step-response experiment.
    pub fn reference() -> Self {
        PipelineParams::new(30_000.0, 0.5, 0.0108, 340.0)
            .and_then(|p| p.with_mfr_limits(0.0, 40.0))
            .and_then(|p| p.with_pressure_limits(3.0e6, 7.0e6))
            .expect("reference pipeline is valid")
    }

    pub fn length(&self) -> f64 {
        self.length
    }
    pub fn diameter(&self) -> f64 {
        self.diameter
    }
    pub fn friction_factor(&self) -> f64 {
        self.friction_factor
    }
    pub fn sound_speed(&self) -> f64 {
        self.sound_speed
    }
    pub fn mfr_min(&self) -> f64 {
        self.mfr_min
    }
    pub fn mfr_max(&self) -> f64 {
        self.mfr_max
    }
    pub fn p_min(&self) -> f64 {
        self.p_min
    }
    pub fn p_max(&self) -> f64 {
        self.p_max
    }

    /// Cross-sectional area π d²/4.
    pub fn area(&self) -> f64 {
        PI * self.diameter * self.diameter / 4.0
    }

    /// `λc²/(dA²)`, the coefficient of the steady squared-pressure drop per metre.
    pub fn weymouth_coefficient(&self) -> f64 {
        let a = self.area();
        self.friction_factor * self.sound_speed.powi(2) / (self.diameter * a * a)
    }

    /// Default number of spatial elements: one per 5 km, at least two.
    pub fn default_segments(&self) -> usize {
        ((self.length / 5_000.0).round() as usize).max(2)
    }

    /// Mass stored per pascal in one element of length `dx`.
    pub fn linepack_per_pascal(&self, dx: f64) -> f64 {
        self.area() * dx / self.sound_speed.powi(2)
    }
}

/// Friction model used in the momentum balance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrictionMode {
    Nonlinear,
    /// Average-velocity linearization around `vbar` m/s.
    Local { vbar: f64 },
}

impl FrictionMode {
    pub fn is_nonlinear(&self) -> bool {
        matches!(self, FrictionMode::Nonlinear)
    }
}

/// Pressures and mass flow rates on the `K + 1` nodes of a pipeline grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridState {
    pub pressures: Vec<f64>,
    pub mfrs: Vec<f64>,
    pub segment_length: f64,
}

impl GridState {
    pub fn new(pressures: Vec<f64>, mfrs: Vec<f64>, segment_length: f64) -> Result<Self> {
        if pressures.len() != mfrs.len() {
            return Err(Error::LengthMismatch { left: pressures.len(), right: mfrs.len() });
        }
        if pressures.len() < 2 {
            return Err(Error::InvalidParams("a grid needs at least one segment".into()));
        }
        if !(segment_length > 0.0) {
            return Err(Error::InvalidParams("segment length must be positive".into()));
        }
        Ok(GridState { pressures, mfrs, segment_length })
    }

    pub fn segments(&self) -> usize {
        self.pressures.len() - 1
    }

    pub fn p_in(&self) -> f64 {
        self.pressures[0]
    }
    pub fn p_out(&self) -> f64 {
        *self.pressures.last().unwrap()
    }
    pub fn m_in(&self) -> f64 {
        self.mfrs[0]
    }
    pub fn m_out(&self) -> f64 {
        *self.mfrs.last().unwrap()
    }

    /// Gas mass held in the pipeline, Σ_k p_k·A·Δx/c² over element outlet nodes.
    pub fn linepack(&self, params: &PipelineParams) -> f64 {
        let per_pa = params.linepack_per_pascal(self.segment_length);
        self.pressures[1..].iter().sum::<f64>() * per_pa
    }

    /// True when every pressure lies inside the pipeline limits widened by `slack`.
    pub fn within_limits(&self, params: &PipelineParams, slack: f64) -> bool {
        let lo = params.p_min() * (1.0 - slack);
        let hi = params.p_max() * (1.0 + slack);
        self.pressures.iter().all(|&p| p >= lo && p <= hi)
    }
}

/// Closed-form steady profile `p(x) = sqrt(p_in² − λc²M|M|x/(dA²))` on a uniform grid.
pub fn steady_state_profile(
    params: &PipelineParams,
    p_in: f64,
    mfr: f64,
    segments: usize,
) -> Result<GridState> {
    if !(p_in > 0.0) {
        return Err(Error::Domain(format!("inlet pressure must be positive, got {p_in}")));
    }
    if segments == 0 {
        return Err(Error::InvalidParams("segments must be at least 1".into()));
    }
    let coeff = params.weymouth_coefficient() * mfr * mfr.abs();
    let radicand_end = p_in * p_in - coeff * params.length();
    if !(radicand_end > 0.0) {
        return Err(Error::NonPhysicalSteadyState { p_in, mfr, radicand: radicand_end });
    }
    let dx = params.length() / segments as f64;
    let pressures = (0..=segments)
        .map(|k| (p_in * p_in - coeff * dx * k as f64).sqrt())
        .collect();
    GridState::new(pressures, vec![mfr; segments + 1], dx)
}

/// Friction contribution to `∂p/∂x` in Pa/m.
///
/// The nonlinear form uses `M|M|` so friction opposes the flow direction.
pub fn friction_term(params: &PipelineParams, p: f64, mfr: f64, mode: FrictionMode) -> Result<f64> {
    let a = params.area();
    let d = params.diameter();
    let lambda = params.friction_factor();
    match mode {
        FrictionMode::Nonlinear => {
            if !(p > 0.0) {
                return Err(Error::Domain(format!("nonlinear friction needs p > 0, got {p}")));
            }
            let c2 = params.sound_speed().powi(2);
            Ok(lambda * c2 * mfr * mfr.abs() / (2.0 * d * a * a * p))
        }
        FrictionMode::Local { vbar } => Ok(lambda * vbar * mfr / (2.0 * d * a)),
    }
}

/// Friction term of one element's `dM/dt` equation and its partial derivatives.
///
/// Returns `(F, ∂F/∂M_out, ∂F/∂M_in, ∂F/∂p_out, ∂F/∂p_in)` where the element
/// momentum equation reads `dM_out/dt = −A(p_out − p_in)/Δx − F`.
pub(crate) fn element_friction(
    params: &PipelineParams,
    m_out: f64,
    m_in: f64,
    p_out: f64,
    p_in: f64,
    mode: FrictionMode,
) -> Result<(f64, f64, f64, f64, f64)> {
    let a = params.area();
    let d = params.diameter();
    let lambda = params.friction_factor();
    let ms = m_out + m_in;
    match mode {
        FrictionMode::Nonlinear => {
            let ps = p_out + p_in;
            if !(ps > 0.0) || !(p_out > 0.0) || !(p_in > 0.0) {
                return Err(Error::Domain(format!(
                    "nonpositive pressure in element (p_in {p_in}, p_out {p_out})"
                )));
            }
            let k = lambda * params.sound_speed().powi(2) / (4.0 * d * a);
            let f = k * ms * ms.abs() / ps;
            let df_dm = k * 2.0 * ms.abs() / ps;
            let df_dp = -f / ps;
            Ok((f, df_dm, df_dm, df_dp, df_dp))
        }
        FrictionMode::Local { vbar } => {
            let k = lambda * vbar / (4.0 * d);
            Ok((k * ms, k, k, 0.0, 0.0))
        }
    }
}

/// Time derivatives of the element outlet states.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementRates {
    /// `dp_k/dt` for k = 1..=K, Pa/s.
    pub dp_dt: Vec<f64>,
    /// `dM_k/dt` for k = 1..=K, kg/s².
    pub dm_dt: Vec<f64>,
}

/// Semi-discrete right-hand side for a grid whose boundary nodes already hold
/// the boundary values (inlet pressure at node 0, flows at both ends).
pub fn semi_discrete_rhs(
    params: &PipelineParams,
    grid: &GridState,
    mode: FrictionMode,
) -> Result<ElementRates> {
    let k_max = grid.segments();
    let dx = grid.segment_length;
    let a = params.area();
    let c2 = params.sound_speed().powi(2);
    let mut dp_dt = Vec::with_capacity(k_max);
    let mut dm_dt = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let (p_in, p_out) = (grid.pressures[k - 1], grid.pressures[k]);
        let (m_in, m_out) = (grid.mfrs[k - 1], grid.mfrs[k]);
        if !p_in.is_finite() || !p_out.is_finite() || !m_in.is_finite() || !m_out.is_finite() {
            return Err(Error::Domain(format!("non-finite state in element {k}")));
        }
        let (fric, ..) = element_friction(params, m_out, m_in, p_out, p_in, mode)?;
        dp_dt.push(-(c2 / a) * (m_out - m_in) / dx);
        dm_dt.push(-a * (p_out - p_in) / dx - fric);
    }
    Ok(ElementRates { dp_dt, dm_dt })
}
