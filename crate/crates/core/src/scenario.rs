//! Scenario files: the power system, coupling devices, gas network and
//! references to trained pipeline models.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dispatch::{CouplingSpec, DispatchHorizon, GasDispatchSpec, GasModel, PowerSystemSpec};
use crate::error::{Error, Result};
use crate::gas_dynamics::{FrictionMode, PipelineParams};
use crate::koopman::{train, KoopmanModel, TrainConfig, TrainReport};
use crate::snapshots::{generate_snapshots, ExcitationConfig, SnapshotSet};
use crate::transient_sim::{pipeline_steady_state, simulate_pipeline, BoundaryProfile, Trajectory};

/// Step experiment on a single pipeline: fixed inlet pressure, outlet flow
/// switching from `initial_mfr` to `final_mfr` at `step_hour`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineRun {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub params: PipelineParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<usize>,
    /// Time step, seconds.
    pub dt: f64,
    pub hours: f64,
    /// Pa
    pub inlet_pressure: f64,
    /// kg/s
    pub initial_mfr: f64,
    /// kg/s
    pub final_mfr: f64,
    pub step_hour: f64,
}

impl PipelineRun {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Spec(format!("cannot read pipeline run {}: {e}", path.display())))?;
        let run: PipelineRun =
            serde_json::from_str(&text).map_err(|e| Error::Spec(format!("{}: {e}", path.display())))?;
        run.validate()?;
        Ok(run)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::Spec(format!("dt: must be positive, got {}", self.dt)));
        }
        if !(self.hours * 3600.0 >= self.dt) {
            return Err(Error::Spec(format!("hours: run of {} h is shorter than one step", self.hours)));
        }
        if !(self.inlet_pressure > 0.0) {
            return Err(Error::Spec("inlet_pressure: must be positive".into()));
        }
        if self.segments == Some(0) {
            return Err(Error::Spec("segments: must be at least 1".into()));
        }
        Ok(())
    }

    pub fn segments(&self) -> usize {
        self.segments.unwrap_or_else(|| self.params.default_segments())
    }

    pub fn boundary(&self) -> BoundaryProfile {
        let n = (self.hours * 3600.0 / self.dt).round() as usize;
        let step = self.step_hour * 3600.0;
        let mfr = (1..=n)
            .map(|i| if i as f64 * self.dt <= step + 1e-9 { self.initial_mfr } else { self.final_mfr })
            .collect();
        BoundaryProfile::pipeline(self.dt, vec![self.inlet_pressure; n], mfr)
    }

    /// Simulates from the steady profile carrying `initial_mfr`.
    pub fn simulate(&self, mode: FrictionMode) -> Result<Trajectory> {
        self.validate()?;
        let k = self.segments();
        let init = pipeline_steady_state(&self.params, self.inlet_pressure, self.initial_mfr, k)?;
        simulate_pipeline(&self.params, k, &self.boundary(), &init, mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub horizon: DispatchHorizon,
    pub power: PowerSystemSpec,
    #[serde(default)]
    pub coupling: CouplingSpec,
    pub gas: GasDispatchSpec,
    /// Model file per pipeline id; relative paths resolve against the
    /// scenario file's directory.
    #[serde(default)]
    pub models: BTreeMap<String, PathBuf>,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Spec(format!("cannot read scenario {}: {e}", path.display())))?;
        let mut s: Scenario = serde_json::from_str(&text)
            .map_err(|e| Error::Spec(format!("{}: {e}", path.display())))?;
        s.base_dir = path.parent().map(Path::to_path_buf);
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.power.validate(self.horizon.hours)?;
        self.gas.validate(self.horizon.hours)?;
        self.coupling.validate(&self.power, &self.gas.network)?;
        self.horizon.steps_per_hour()?;
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(d) if p.is_relative() => d.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Loads the referenced model of every pipeline, in network order.
    pub fn load_models(&self) -> Result<Vec<KoopmanModel>> {
        self.gas
            .network
            .pipelines
            .iter()
            .map(|p| {
                let path = self
                    .models
                    .get(&p.id)
                    .ok_or_else(|| Error::Spec(format!("scenario names no model file for pipeline {}", p.id)))?;
                KoopmanModel::load(&self.resolve(path))
            })
            .collect()
    }

    /// Global gas model from the referenced files.
    pub fn global_model(&self) -> Result<GasModel> {
        Ok(GasModel::Global(self.load_models()?))
    }

    /// Training excitation of every pipeline: inlet pressure around its value
    /// in the initial steady state, outlet flow levels spanning the
    /// pipeline's flow limits.
    pub fn excitations(&self) -> Result<Vec<ExcitationConfig>> {
        let init = self.gas.initial_state()?;
        Ok(self
            .gas
            .network
            .pipelines
            .iter()
            .zip(&init.grids)
            .map(|(p, g)| {
                let (lo, hi) = (p.params.mfr_min(), p.params.mfr_max());
                ExcitationConfig {
                    nominal_pressure: g.p_in(),
                    nominal_mfr: g.m_out().clamp(lo, hi),
                    mfr_levels: [lo, hi],
                    ..ExcitationConfig::default()
                }
            })
            .collect())
    }

    /// Snapshot sets for every pipeline; pipeline `j` uses seed `seed + j`.
    pub fn generate_training_data(&self, count: usize, dt: f64, seed: u64, parallel: bool) -> Result<Vec<SnapshotSet>> {
        let exc = self.excitations()?;
        let job = |j: usize| {
            let p = &self.gas.network.pipelines[j];
            generate_snapshots(&p.id, &p.params, p.segments(), &exc[j], count, dt, seed.wrapping_add(j as u64))
        };
        let n = exc.len();
        if parallel {
            (0..n).into_par_iter().map(job).collect()
        } else {
            (0..n).map(job).collect()
        }
    }

    /// Generates data and trains one model per pipeline.
    pub fn train_models(
        &self,
        count: usize,
        dt: f64,
        seed: u64,
        cfg: &TrainConfig,
        parallel: bool,
    ) -> Result<Vec<(KoopmanModel, TrainReport)>> {
        let data = self.generate_training_data(count, dt, seed, parallel)?;
        if parallel {
            data.par_iter().map(|d| train(d, cfg)).collect()
        } else {
            data.iter().map(|d| train(d, cfg)).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> Scenario {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk7.json");
        Scenario::load(&path).unwrap()
    }

    #[test]
    fn bundled_scenario_validates() {
        let s = desk();
        s.validate().unwrap();
        assert_eq!(s.gas.network.nodes.len(), 7);
        assert!(s.base_dir.is_some());
    }

    #[test]
    fn stress_network_has_twenty_nodes_and_two_sources() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/stress20.json");
        let s = Scenario::load(&path).unwrap();
        s.validate().unwrap();
        assert_eq!(s.gas.network.nodes.len(), 20);
        assert_eq!(s.gas.network.sources().count(), 2);
        let init = s.gas.initial_state().unwrap();
        for (p, g) in s.gas.network.pipelines.iter().zip(&init.grids) {
            assert!(g.within_limits(&p.params, 0.0), "{}", p.id);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let s = desk();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        s.save(&path).unwrap();
        let back = Scenario::load(&path).unwrap();
        assert_eq!(back.power, s.power);
        assert_eq!(back.gas, s.gas);
        assert_eq!(back.base_dir.as_deref(), Some(dir.path()));
    }

    #[test]
    fn missing_model_file_is_reported() {
        let s = desk();
        assert!(matches!(s.load_models(), Err(Error::Spec(_))));
    }

    #[test]
    fn excitation_stays_inside_pipeline_limits() {
        let s = desk();
        for (e, p) in s.excitations().unwrap().iter().zip(&s.gas.network.pipelines) {
            e.validate(&p.params).unwrap();
        }
    }

    #[test]
    fn bundled_pipeline_run_settles() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/fig1.json");
        let run = PipelineRun::load(&path).unwrap();
        let tr = run.simulate(FrictionMode::Nonlinear).unwrap();
        assert!((tr.last().grids[0].m_in() - run.final_mfr).abs() < 0.01);
        let b = run.boundary();
        assert_eq!(b.steps(), tr.len() - 1);
    }

    #[test]
    fn pipeline_run_rejects_bad_step() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/fig1.json");
        let mut run = PipelineRun::load(&path).unwrap();
        run.dt = 0.0;
        assert!(matches!(run.simulate(FrictionMode::Nonlinear), Err(Error::Spec(_))));
    }

    #[test]
    fn malformed_file_fails_to_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, "{\"name\": 3}").unwrap();
        assert!(matches!(Scenario::load(&path), Err(Error::Spec(_))));
    }
}
