//! Identification data: seeded excitation of a single pipeline and the
//! normalized boundary/outlet series recorded from the simulator.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gas_dynamics::{steady_state_profile, FrictionMode, PipelineParams};
use crate::transient_sim::{simulate_pipeline, BoundaryProfile};
use crate::units::Bases;

/// Internal simulator step used when the recording interval is coarser.
pub const SIM_SUBSTEP: f64 = 900.0;

/// Excitation signal driving a pipeline during data generation.
///
/// The inlet pressure follows a random walk reflected at the edges of a band
/// around `nominal_pressure`; the outlet flow holds a level for a random
/// duration and then jumps to a fresh uniform draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExcitationConfig {
    /// Pa
    pub nominal_pressure: f64,
    /// Half-width of the pressure band as a fraction of the nominal pressure.
    pub pressure_band: f64,
    /// Largest walk increment per recorded step, as a fraction of the base pressure.
    pub pressure_step: f64,
    /// kg/s, initial outlet flow.
    pub nominal_mfr: f64,
    /// kg/s, range of outlet flow levels.
    pub mfr_levels: [f64; 2],
    /// Hours, range of the hold duration between flow jumps.
    pub hold_hours: [f64; 2],
    /// Hours simulated and discarded before recording starts.
    pub settle_hours: f64,
}

impl Default for ExcitationConfig {
    fn default() -> Self {
        ExcitationConfig {
            nominal_pressure: 5.78e6,
            pressure_band: 0.10,
            pressure_step: 0.005,
            nominal_mfr: 10.0,
            mfr_levels: [8.0, 12.0],
            hold_hours: [2.0, 6.0],
            settle_hours: 24.0,
        }
    }
}

impl ExcitationConfig {
    /// Default excitation centred on a given operating point.
    pub fn around(nominal_pressure: f64, nominal_mfr: f64) -> Self {
        ExcitationConfig {
            nominal_pressure,
            nominal_mfr,
            mfr_levels: [0.8 * nominal_mfr, 1.2 * nominal_mfr],
            ..Default::default()
        }
    }

    pub fn pressure_range(&self) -> [f64; 2] {
        [
            self.nominal_pressure * (1.0 - self.pressure_band),
            self.nominal_pressure * (1.0 + self.pressure_band),
        ]
    }

    /// Rejects ranges the pipeline cannot operate in.
    pub fn validate(&self, params: &PipelineParams) -> Result<()> {
        let [plo, phi] = self.pressure_range();
        let [mlo, mhi] = self.mfr_levels;
        if !(self.pressure_band >= 0.0 && self.pressure_band < 1.0) || !(self.pressure_step >= 0.0) {
            return Err(Error::ExcitationOutOfBounds("pressure band or step is invalid".into()));
        }
        if plo < params.p_min() || phi > params.p_max() {
            return Err(Error::ExcitationOutOfBounds(format!(
                "inlet pressure range [{plo}, {phi}] Pa leaves the pipeline limits [{}, {}]",
                params.p_min(),
                params.p_max()
            )));
        }
        if !(mlo <= mhi) || mlo < params.mfr_min() || mhi > params.mfr_max() {
            return Err(Error::ExcitationOutOfBounds(format!(
                "outlet flow range [{mlo}, {mhi}] kg/s leaves the pipeline limits [{}, {}]",
                params.mfr_min(),
                params.mfr_max()
            )));
        }
        if !(self.nominal_mfr >= mlo && self.nominal_mfr <= mhi) {
            return Err(Error::ExcitationOutOfBounds("nominal flow lies outside the flow levels".into()));
        }
        let [hlo, hhi] = self.hold_hours;
        if !(hlo > 0.0 && hlo <= hhi) || !(self.settle_hours >= 0.0) {
            return Err(Error::ExcitationOutOfBounds("hold or settle durations are invalid".into()));
        }
        Ok(())
    }
}

/// Normalized boundary inputs `u = (p_in, M_in)` and outlet states
/// `x = (p_out, M_out)` of one pipeline at a uniform interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSet {
    pub pipeline_id: String,
    pub dt: f64,
    pub bases: Bases,
    pub seed: Option<u64>,
    pub u: Vec<[f64; 2]>,
    pub x: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct SnapshotMeta {
    pipeline_id: String,
    dt_seconds: f64,
    base_pressure: f64,
    base_mfr: f64,
    seed: Option<u64>,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct SnapshotRow {
    t: f64,
    p_in: f64,
    m_in: f64,
    p_out: f64,
    m_out: f64,
}

impl SnapshotSet {
    pub fn new(pipeline_id: &str, dt: f64, bases: Bases, u: Vec<[f64; 2]>, x: Vec<[f64; 2]>) -> Result<Self> {
        if u.len() != x.len() {
            return Err(Error::LengthMismatch { left: u.len(), right: x.len() });
        }
        if !(dt > 0.0) {
            return Err(Error::Spec("snapshot interval must be positive".into()));
        }
        Ok(SnapshotSet { pipeline_id: pipeline_id.to_string(), dt, bases, seed: None, u, x })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// Sidecar metadata path for a snapshot CSV.
    pub fn meta_path(csv: &Path) -> PathBuf {
        csv.with_extension("meta.json")
    }

    /// Writes the CSV and its JSON sidecar.
    pub fn save(&self, csv_path: &Path) -> Result<()> {
        let mut wr = csv::Writer::from_writer(BufWriter::new(File::create(csv_path)?));
        for (n, (u, x)) in self.u.iter().zip(&self.x).enumerate() {
            wr.serialize(SnapshotRow { t: n as f64 * self.dt, p_in: u[0], m_in: u[1], p_out: x[0], m_out: x[1] })?;
        }
        wr.flush()?;
        let meta = SnapshotMeta {
            pipeline_id: self.pipeline_id.clone(),
            dt_seconds: self.dt,
            base_pressure: self.bases.pressure,
            base_mfr: self.bases.mfr,
            seed: self.seed,
            count: self.len(),
        };
        serde_json::to_writer_pretty(BufWriter::new(File::create(Self::meta_path(csv_path))?), &meta)?;
        Ok(())
    }

    pub fn load(csv_path: &Path) -> Result<Self> {
        let meta: SnapshotMeta = serde_json::from_reader(BufReader::new(File::open(Self::meta_path(csv_path))?))?;
        let mut rd = csv::Reader::from_reader(BufReader::new(File::open(csv_path)?));
        let mut u = Vec::new();
        let mut x = Vec::new();
        for row in rd.deserialize() {
            let r: SnapshotRow = row?;
            u.push([r.p_in, r.m_in]);
            x.push([r.p_out, r.m_out]);
        }
        if u.len() != meta.count {
            return Err(Error::SchemaMismatch(format!(
                "metadata announces {} snapshots, file holds {}",
                meta.count,
                u.len()
            )));
        }
        let bases = Bases { pressure: meta.base_pressure, mfr: meta.base_mfr };
        let mut set = SnapshotSet::new(&meta.pipeline_id, meta.dt_seconds, bases, u, x)?;
        set.seed = meta.seed;
        Ok(set)
    }

    /// Splits at `fraction` of the records: `(train, test)`.
    pub fn split(&self, fraction: f64) -> (SnapshotSet, SnapshotSet) {
        let cut = ((self.len() as f64) * fraction).round() as usize;
        let cut = cut.min(self.len());
        let part = |r: std::ops::Range<usize>| SnapshotSet {
            u: self.u[r.clone()].to_vec(),
            x: self.x[r].to_vec(),
            ..self.clone()
        };
        (part(0..cut), part(cut..self.len()))
    }
}

/// Boundary sequences in SI units at the recording interval, before the
/// substep expansion.
fn excitation_series(cfg: &ExcitationConfig, steps: usize, dt: f64, bases: Bases, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let [plo, phi] = cfg.pressure_range();
    let [mlo, mhi] = cfg.mfr_levels;
    let hold_lo = ((cfg.hold_hours[0] * 3600.0 / dt).round() as i64).max(1);
    let hold_hi = ((cfg.hold_hours[1] * 3600.0 / dt).round() as i64).max(hold_lo);
    let mut p = cfg.nominal_pressure;
    let mut m = cfg.nominal_mfr;
    let mut hold = 0i64;
    let mut pin = Vec::with_capacity(steps);
    let mut mout = Vec::with_capacity(steps);
    for _ in 0..steps {
        p += rng.random_range(-1.0..=1.0) * cfg.pressure_step * bases.pressure;
        if p > phi {
            p = 2.0 * phi - p;
        }
        if p < plo {
            p = 2.0 * plo - p;
        }
        p = p.clamp(plo, phi);
        if hold <= 0 {
            m = if mhi > mlo { rng.random_range(mlo..=mhi) } else { mlo };
            hold = rng.random_range(hold_lo..=hold_hi);
        }
        hold -= 1;
        pin.push(p);
        mout.push(m);
    }
    (pin, mout)
}

/// Simulates a pipeline under the seeded excitation and records `count`
/// normalized snapshots at interval `dt`.
///
/// The simulator always advances in steps of at most [`SIM_SUBSTEP`]; when
/// `dt` is coarser the boundary values are held over each recording interval.
pub fn generate_snapshots(
    pipeline_id: &str,
    params: &PipelineParams,
    segments: usize,
    excitation: &ExcitationConfig,
    count: usize,
    dt: f64,
    seed: u64,
) -> Result<SnapshotSet> {
    excitation.validate(params)?;
    if count == 0 {
        return Err(Error::InsufficientData("snapshot count must be positive".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::Spec("snapshot interval must be positive".into()));
    }
    let sub = (dt / SIM_SUBSTEP).ceil().max(1.0) as usize;
    let h = dt / sub as f64;
    let bases = Bases::default();
    let settle = (excitation.settle_hours * 3600.0 / dt).ceil() as usize;
    let total = settle + count;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pin, mout) = excitation_series(excitation, total, dt, bases, &mut rng);
    let expand = |v: &[f64]| v.iter().flat_map(|&a| std::iter::repeat_n(a, sub)).collect::<Vec<_>>();
    let boundary = BoundaryProfile::pipeline(h, expand(&pin), expand(&mout));
    let init = steady_state_profile(params, excitation.nominal_pressure, excitation.nominal_mfr, segments)?;
    let traj = simulate_pipeline(params, segments, &boundary, &init, FrictionMode::Nonlinear)?;

    let mut u = Vec::with_capacity(count);
    let mut x = Vec::with_capacity(count);
    for n in settle..total {
        let g = &traj.states[(n + 1) * sub].grids[0];
        u.push([bases.p_pu(g.p_in()), bases.m_pu(g.m_in())]);
        x.push([bases.p_pu(g.p_out()), bases.m_pu(g.m_out())]);
    }
    let mut set = SnapshotSet::new(pipeline_id, dt, bases, u, x)?;
    set.seed = Some(seed);
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig1() -> PipelineParams {
        PipelineParams::reference()
    }

    #[test]
    fn constant_excitation_gives_constant_snapshots() {
        let cfg = ExcitationConfig {
            pressure_step: 0.0,
            mfr_levels: [10.0, 10.0],
            settle_hours: 2.0,
            ..Default::default()
        };
        let s = generate_snapshots("p", &fig1(), 6, &cfg, 40, 900.0, 1).unwrap();
        assert_eq!(s.len(), 40);
        for x in &s.x {
            assert!((x[0] - s.x[0][0]).abs() < 1e-10 && (x[1] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn same_seed_same_data() {
        let cfg = ExcitationConfig { settle_hours: 4.0, ..Default::default() };
        let a = generate_snapshots("p", &fig1(), 6, &cfg, 200, 900.0, 42).unwrap();
        let b = generate_snapshots("p", &fig1(), 6, &cfg, 200, 900.0, 42).unwrap();
        let c = generate_snapshots("p", &fig1(), 6, &cfg, 200, 900.0, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.x, c.x);
    }

    #[test]
    fn excitation_respects_bands() {
        let cfg = ExcitationConfig::default();
        let s = generate_snapshots("p", &fig1(), 6, &cfg, 800, 900.0, 7).unwrap();
        let b = s.bases;
        let [plo, phi] = cfg.pressure_range();
        for (u, x) in s.u.iter().zip(&s.x) {
            let p = b.p_si(u[0]);
            assert!(p >= plo - 1e-6 && p <= phi + 1e-6);
            assert!(b.m_si(x[1]) >= 5.0 && b.m_si(x[1]) <= 20.0);
        }
    }

    #[test]
    fn coarse_interval_uses_substeps() {
        let cfg = ExcitationConfig { settle_hours: 4.0, ..Default::default() };
        let s = generate_snapshots("p", &fig1(), 6, &cfg, 50, 3600.0, 3).unwrap();
        assert_eq!(s.len(), 50);
        assert_eq!(s.dt, 3600.0);
    }

    #[test]
    fn out_of_range_excitation_is_rejected() {
        let cfg = ExcitationConfig { mfr_levels: [5.0, 60.0], ..Default::default() };
        let err = generate_snapshots("p", &fig1(), 6, &cfg, 10, 900.0, 0).unwrap_err();
        assert!(matches!(err, Error::ExcitationOutOfBounds(_)));
    }

    #[test]
    fn csv_round_trip() {
        let cfg = ExcitationConfig { settle_hours: 2.0, ..Default::default() };
        let s = generate_snapshots("p1", &fig1(), 6, &cfg, 30, 900.0, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.csv");
        s.save(&path).unwrap();
        let back = SnapshotSet::load(&path).unwrap();
        assert_eq!(s, back);
    }
}
