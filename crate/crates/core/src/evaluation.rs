//! Error metrics and the network-level check of a dispatch against the
//! nonlinear simulator.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dispatch::{hourly_average, solve_dispatch, DispatchHorizon, DispatchSolution, GasDispatchSpec, GasModel};
use crate::error::{Error, Result};
use crate::gas_dynamics::FrictionMode;
use crate::koopman::{DelayConfig, KoopmanModel, TrainConfig, TrainReport};
use crate::network::NodeRole;
use crate::scenario::Scenario;
use crate::snapshots::SIM_SUBSTEP;
use crate::transient_sim::{simulate_network, BoundaryProfile, Trajectory};
use crate::units::SECONDS_PER_HOUR;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
    /// `(candidate − reference) / base` entry by entry.
    pub normalized: Vec<f64>,
}

/// RMSE, MAPE and normalized error of `candidate` against `reference`.
///
/// MAPE skips entries whose reference magnitude is at most `1e-9·base`.
pub fn metrics(reference: &[f64], candidate: &[f64], base: f64) -> Result<Metrics> {
    if reference.len() != candidate.len() {
        return Err(Error::LengthMismatch { left: reference.len(), right: candidate.len() });
    }
    if reference.is_empty() {
        return Err(Error::InsufficientData("metrics need at least one entry".into()));
    }
    let n = reference.len() as f64;
    let err: Vec<f64> = candidate.iter().zip(reference).map(|(c, r)| c - r).collect();
    let rmse = (err.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let (sum, count) = err
        .iter()
        .zip(reference)
        .filter(|(_, r)| r.abs() > 1e-9 * base)
        .fold((0.0, 0usize), |(s, c), (e, r)| (s + (e / r).abs(), c + 1));
    let mape = if count == 0 { 0.0 } else { 100.0 * sum / count as f64 };
    Ok(Metrics { rmse, mape, normalized: err.iter().map(|e| e / base).collect() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineErrors {
    pub id: String,
    /// Pa
    pub p_out_rmse: f64,
    pub p_out_mape: f64,
    /// kg/s
    pub m_in_rmse: f64,
    pub m_in_mape: f64,
    /// Hourly normalized errors, dispatch minus simulation.
    pub p_out_normalized: Vec<f64>,
    pub m_in_normalized: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceErrors {
    pub node: String,
    /// Largest hourly |dispatch − simulation| source flow, per unit.
    pub max_normalized_error: f64,
    /// kg per hour.
    pub planned: Vec<f64>,
    /// kg per hour.
    pub simulated: Vec<f64>,
}

impl SourceErrors {
    /// Σ_hours |planned − simulated|, tons.
    pub fn deviation(&self) -> f64 {
        self.planned.iter().zip(&self.simulated).map(|(p, s)| (p - s).abs()).sum::<f64>() / 1e3
    }

    /// Σ_hours (planned − simulated), tons.
    pub fn signed_deviation(&self) -> f64 {
        self.planned.iter().zip(&self.simulated).map(|(p, s)| p - s).sum::<f64>() / 1e3
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// Pipeline or node id.
    pub element: String,
    /// Simulator step (1-based).
    pub step: usize,
    pub bound: String,
    pub value: f64,
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub gas_model: String,
    pub pipelines: Vec<PipelineErrors>,
    /// Over all pipelines and hours, percent.
    pub pressure_mape: f64,
    pub mfr_mape: f64,
    /// Pa
    pub pressure_rmse: f64,
    /// kg/s
    pub mfr_rmse: f64,
    pub sources: Vec<SourceErrors>,
    /// Σ over sources of the absolute hourly deviations, tons.
    pub extraction_deviation: f64,
    /// Signed counterpart, tons.
    pub extraction_deviation_signed: f64,
    /// Percent of the planned extraction.
    pub extraction_deviation_pct: f64,
    /// Planned extraction over the horizon, tons.
    pub planned_extraction: f64,
    pub violations: Vec<Violation>,
}

/// Simulator settings of the network-level check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NleSettings {
    /// Simulator step, seconds; must divide one hour.
    pub dt: f64,
    /// Relative slack before a simulated value counts as a violation.
    pub violation_tolerance: f64,
}

impl Default for NleSettings {
    fn default() -> Self {
        NleSettings { dt: SIM_SUBSTEP, violation_tolerance: 1e-6 }
    }
}

/// Hourly zero-order-held boundary conditions taken from a schedule.
pub fn boundary_from_solution(sol: &DispatchSolution, gas: &GasDispatchSpec, dt: f64) -> Result<BoundaryProfile> {
    let per_hour = DispatchHorizon { hours: sol.hours, dt }.steps_per_hour()?;
    let hold = |v: &Vec<f64>| -> Vec<f64> { (0..sol.hours * per_hour).map(|n| v[n / per_hour]).collect() };
    let mut b = BoundaryProfile { dt, source_pressure: BTreeMap::new(), withdrawal: BTreeMap::new() };
    for node in &gas.network.nodes {
        let missing = || Error::HorizonMismatch(format!("schedule has no series for node {}", node.id));
        if node.role == NodeRole::Source {
            let v = sol.source_pressure.get(&node.id).ok_or_else(missing)?;
            if v.len() != sol.hours {
                return Err(Error::HorizonMismatch(format!("{} hourly pressures for {} hours", v.len(), sol.hours)));
            }
            b.source_pressure.insert(node.id.clone(), hold(v));
        } else {
            let v = sol.withdrawal.get(&node.id).ok_or_else(missing)?;
            if v.len() != sol.hours {
                return Err(Error::HorizonMismatch(format!("{} hourly withdrawals for {} hours", v.len(), sol.hours)));
            }
            b.withdrawal.insert(node.id.clone(), hold(v));
        }
    }
    Ok(b)
}

/// Feeds a schedule's hourly controls to the nonlinear simulator and
/// measures how far the dispatch's gas states are from the simulated ones.
pub fn nle_evaluate(sol: &DispatchSolution, gas: &GasDispatchSpec, settings: &NleSettings) -> Result<(ErrorReport, Trajectory)> {
    let net = &gas.network;
    if sol.pipelines.len() != net.pipelines.len() || sol.steps() == 0 {
        return Err(Error::HorizonMismatch("schedule does not cover the network".into()));
    }
    for p in &sol.pipelines {
        if p.p_out.len() != sol.steps() || p.m_in.len() != sol.steps() {
            return Err(Error::HorizonMismatch(format!("pipeline {} covers the wrong number of steps", p.id)));
        }
    }
    let boundary = boundary_from_solution(sol, gas, settings.dt)?;
    let per_hour = boundary.steps() / sol.hours;
    let init = gas.initial_state()?;
    let traj = simulate_network(net, &net.segments(), &boundary, &init.grids, FrictionMode::Nonlinear)?;
    let report = compare_to_trajectory(sol, gas, &traj, per_hour, settings)?;
    Ok((report, traj))
}

/// Error report of a schedule against an already simulated trajectory whose
/// step is `1/per_hour` hours.
pub fn compare_to_trajectory(
    sol: &DispatchSolution,
    gas: &GasDispatchSpec,
    traj: &Trajectory,
    per_hour: usize,
    settings: &NleSettings,
) -> Result<ErrorReport> {
    let net = &gas.network;
    let (pb, mb) = (sol.bases.pressure, sol.bases.mfr);
    if traj.len() != sol.hours * per_hour + 1 {
        return Err(Error::HorizonMismatch(format!(
            "trajectory has {} states for {} hours",
            traj.len(),
            sol.hours
        )));
    }
    let sim_dt = SECONDS_PER_HOUR / per_hour as f64;
    let states = &traj.states[1..];

    let mut pipelines = Vec::new();
    let (mut p_ref, mut p_cand, mut m_ref, mut m_cand) = (vec![], vec![], vec![], vec![]);
    for (j, pipe) in net.pipelines.iter().enumerate() {
        let sched = sol
            .pipeline(&pipe.id)
            .ok_or_else(|| Error::HorizonMismatch(format!("schedule lacks pipeline {}", pipe.id)))?;
        let sim_p: Vec<f64> = states.iter().map(|s| s.grids[j].p_out()).collect();
        let sim_m: Vec<f64> = states.iter().map(|s| s.grids[j].m_in()).collect();
        let (sp, sm) = (hourly_average(&sim_p, per_hour), hourly_average(&sim_m, per_hour));
        let dp = hourly_average(&sched.p_out, sol.steps_per_hour);
        let dm = hourly_average(&sched.m_in, sol.steps_per_hour);
        let mp = metrics(&sp, &dp, pb)?;
        let mm = metrics(&sm, &dm, mb)?;
        pipelines.push(PipelineErrors {
            id: pipe.id.clone(),
            p_out_rmse: mp.rmse,
            p_out_mape: mp.mape,
            m_in_rmse: mm.rmse,
            m_in_mape: mm.mape,
            p_out_normalized: mp.normalized,
            m_in_normalized: mm.normalized,
        });
        p_ref.extend(sp);
        p_cand.extend(dp);
        m_ref.extend(sm);
        m_cand.extend(dm);
    }
    let all_p = metrics(&p_ref, &p_cand, pb)?;
    let all_m = metrics(&m_ref, &m_cand, mb)?;

    let mut sources = Vec::new();
    for (i, node) in net.sources() {
        let planned_flow = sol
            .injection
            .get(&node.id)
            .ok_or_else(|| Error::HorizonMismatch(format!("schedule lacks injection at {}", node.id)))?;
        let sim_flow: Vec<f64> = states.iter().map(|s| s.injections[i]).collect();
        let planned = sol.hourly_extraction(&node.id);
        let simulated: Vec<f64> = sim_flow.chunks(per_hour).map(|c| c.iter().sum::<f64>() * sim_dt).collect();
        let ha = hourly_average(planned_flow, sol.steps_per_hour);
        let hs = hourly_average(&sim_flow, per_hour);
        let max_normalized_error = ha.iter().zip(&hs).map(|(a, b)| (a - b).abs() / mb).fold(0.0, f64::max);
        sources.push(SourceErrors { node: node.id.clone(), max_normalized_error, planned, simulated });
    }
    let extraction_deviation: f64 = sources.iter().map(SourceErrors::deviation).sum();
    let extraction_deviation_signed: f64 = sources.iter().map(SourceErrors::signed_deviation).sum();
    let planned_extraction = sol.total_extraction() / 1e3;
    let extraction_deviation_pct =
        if planned_extraction > 0.0 { 100.0 * extraction_deviation / planned_extraction } else { 0.0 };

    Ok(ErrorReport {
        gas_model: sol.gas_model.clone(),
        pipelines,
        pressure_mape: all_p.mape,
        mfr_mape: all_m.mape,
        pressure_rmse: all_p.rmse,
        mfr_rmse: all_m.rmse,
        sources,
        extraction_deviation,
        extraction_deviation_signed,
        extraction_deviation_pct,
        planned_extraction,
        violations: violations(gas, traj, settings.violation_tolerance),
    })
}

/// Simulated values outside pipeline or node limits.
pub fn violations(gas: &GasDispatchSpec, traj: &Trajectory, tol: f64) -> Vec<Violation> {
    let net = &gas.network;
    let mut out = Vec::new();
    let mut check = |element: &str, step: usize, what: &str, v: f64, lo: f64, hi: f64| {
        if v < lo - tol * lo.abs() {
            out.push(Violation { element: element.into(), step, bound: format!("{what}_min"), value: v, limit: lo });
        } else if v > hi + tol * hi.abs() {
            out.push(Violation { element: element.into(), step, bound: format!("{what}_max"), value: v, limit: hi });
        }
    };
    for (n, s) in traj.states.iter().enumerate().skip(1) {
        for (j, pipe) in net.pipelines.iter().enumerate() {
            let g = &s.grids[j];
            let pr = &pipe.params;
            check(&pipe.id, n, "m_in", g.m_in(), pr.mfr_min(), pr.mfr_max());
            check(&pipe.id, n, "m_out", g.m_out(), pr.mfr_min(), pr.mfr_max());
            for &p in &g.pressures {
                if p < pr.p_min() || p > pr.p_max() {
                    check(&pipe.id, n, "p", p, pr.p_min(), pr.p_max());
                }
            }
        }
        for (i, node) in net.nodes.iter().enumerate() {
            check(&node.id, n, "p", s.node_pressures[i], node.p_min, node.p_max);
        }
    }
    out
}

impl ErrorReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// A CSV table held in memory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table { header: header.iter().map(|s| s.to_string()).collect(), rows: vec![] }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut wr = csv::Writer::from_path(path)?;
        wr.write_record(&self.header)?;
        for r in &self.rows {
            wr.write_record(r)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Named tables written as `<name>.csv`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TableBundle {
    pub tables: BTreeMap<String, Table>,
}

impl TableBundle {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, t) in &self.tables {
            t.write(&dir.join(format!("{name}.csv")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareOptions {
    /// Average velocities of the local-model runs, m/s.
    pub vbars: Vec<f64>,
    /// Gas resolutions of the global-model runs, minutes.
    pub resolutions: Vec<u32>,
    /// State delays tabulated in the training table; the dispatch runs use `train.delays`.
    pub dx_list: Vec<usize>,
    pub snapshots: usize,
    pub seed: u64,
    pub train: TrainConfig,
    pub nle: NleSettings,
    pub parallel: bool,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            vbars: vec![0.0, 1.0, 2.0],
            resolutions: vec![15, 30, 60],
            dx_list: vec![3],
            snapshots: 6400,
            seed: 0,
            train: TrainConfig::default(),
            nle: NleSettings::default(),
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRow {
    pub resolution: u32,
    pub dx: usize,
    pub pipeline: String,
    pub report: TrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub training: Vec<TrainingRow>,
    /// Global-model reports by resolution in minutes.
    pub global: Vec<(u32, ErrorReport)>,
    /// Local-model reports by average velocity (at the finest resolution).
    pub local: Vec<(f64, ErrorReport)>,
    pub global_solutions: Vec<(u32, DispatchSolution)>,
    pub local_solutions: Vec<(f64, DispatchSolution)>,
    /// Dispatch models by resolution in minutes.
    #[serde(skip)]
    pub global_models: Vec<(u32, Vec<KoopmanModel>)>,
}

fn f(v: f64) -> String {
    format!("{v:.6e}")
}

impl Comparison {
    /// Training errors, global NLE per resolution, local NLE per average
    /// velocity, source summary and hourly normalized-error series.
    pub fn tables(&self) -> TableBundle {
        let mut b = TableBundle::default();
        let mut t = Table::new(&[
            "resolution_min", "dx", "pipeline", "train_rmse_p", "train_rmse_m", "test_rmse_p", "test_rmse_m",
            "test_max_p", "test_max_m", "test_mape_p_pct", "test_mape_m_pct", "spectral_radius",
        ]);
        for r in &self.training {
            let (tr, te) = (&r.report.train, &r.report.test);
            t.push(vec![
                r.resolution.to_string(),
                r.dx.to_string(),
                r.pipeline.clone(),
                f(tr.rmse[0]),
                f(tr.rmse[1]),
                f(te.rmse[0]),
                f(te.rmse[1]),
                f(te.max_abs[0]),
                f(te.max_abs[1]),
                f(te.mape[0]),
                f(te.mape[1]),
                f(r.report.spectral_radius),
            ]);
        }
        b.tables.insert("training_errors".into(), t);

        let header = ["pressure_rmse_pa", "pressure_mape_pct", "mfr_rmse_kg_s", "mfr_mape_pct", "violations"];
        let summary_row = |r: &ErrorReport| {
            vec![f(r.pressure_rmse), f(r.pressure_mape), f(r.mfr_rmse), f(r.mfr_mape), r.violations.len().to_string()]
        };
        let mut t = Table::new(&[&["resolution_min"][..], &header[..]].concat());
        for (res, r) in &self.global {
            t.push([vec![res.to_string()], summary_row(r)].concat());
        }
        b.tables.insert("nle_global".into(), t);
        let mut t = Table::new(&[&["vbar_m_s"][..], &header[..]].concat());
        for (v, r) in &self.local {
            t.push([vec![v.to_string()], summary_row(r)].concat());
        }
        b.tables.insert("nle_local".into(), t);

        let mut t = Table::new(&[
            "model", "source", "max_normalized_error", "planned_t", "simulated_t", "deviation_t", "signed_deviation_t",
            "deviation_pct",
        ]);
        let runs = self
            .global
            .iter()
            .map(|(res, r)| (format!("global_{res}min"), r))
            .chain(self.local.iter().map(|(v, r)| (format!("local_vbar{v}"), r)));
        for (label, r) in runs {
            for s in &r.sources {
                t.push(vec![
                    label.clone(),
                    s.node.clone(),
                    f(s.max_normalized_error),
                    f(s.planned.iter().sum::<f64>() / 1e3),
                    f(s.simulated.iter().sum::<f64>() / 1e3),
                    f(s.deviation()),
                    f(s.signed_deviation()),
                    f(r.extraction_deviation_pct),
                ]);
            }
        }
        b.tables.insert("source_summary".into(), t);

        let mut t = Table::new(&["model", "pipeline", "hour", "p_out_normalized", "m_in_normalized"]);
        let runs = self
            .global
            .iter()
            .map(|(res, r)| (format!("global_{res}min"), r))
            .chain(self.local.iter().map(|(v, r)| (format!("local_vbar{v}"), r)));
        for (label, r) in runs {
            for p in &r.pipelines {
                for (h, (ep, em)) in p.p_out_normalized.iter().zip(&p.m_in_normalized).enumerate() {
                    t.push(vec![label.clone(), p.id.clone(), h.to_string(), f(*ep), f(*em)]);
                }
            }
        }
        b.tables.insert("hourly_errors".into(), t);
        b
    }
}

/// Trains global models at every resolution, dispatches with them and with
/// the local model at every average velocity, and checks each schedule
/// against the nonlinear simulator.
pub fn compare_models(scn: &Scenario, opts: &CompareOptions) -> Result<Comparison> {
    scn.validate()?;
    if opts.resolutions.is_empty() {
        return Err(Error::Spec("at least one resolution is required".into()));
    }
    let mut training = Vec::new();
    let mut global = Vec::new();
    let mut global_solutions = Vec::new();
    let mut global_models = Vec::new();
    let finest = *opts.resolutions.iter().min().unwrap();
    for &res in &opts.resolutions {
        let dt = res as f64 * 60.0;
        let data = scn.generate_training_data(opts.snapshots, dt, opts.seed, opts.parallel)?;
        let mut dxs = opts.dx_list.clone();
        if !dxs.contains(&opts.train.delays.dx) {
            dxs.push(opts.train.delays.dx);
        }
        let mut dispatch_models = Vec::new();
        for dx in dxs {
            let cfg = TrainConfig { delays: DelayConfig::new(dx, opts.train.delays.du)?, ..opts.train.clone() };
            let fitted: Vec<_> = if opts.parallel {
                data.par_iter().map(|d| crate::koopman::train(d, &cfg)).collect::<Result<_>>()?
            } else {
                data.iter().map(|d| crate::koopman::train(d, &cfg)).collect::<Result<_>>()?
            };
            for (m, r) in &fitted {
                if opts.dx_list.contains(&dx) {
                    training.push(TrainingRow { resolution: res, dx, pipeline: m.pipeline_id.clone(), report: r.clone() });
                }
            }
            if dx == opts.train.delays.dx {
                dispatch_models = fitted.into_iter().map(|(m, _)| m).collect();
            }
        }
        let horizon = DispatchHorizon { hours: scn.horizon.hours, dt };
        let model = GasModel::Global(dispatch_models.clone());
        let sol = solve_dispatch(&scn.power, &scn.coupling, &scn.gas, &horizon, &model)?;
        global_models.push((res, dispatch_models));
        let (report, _) = nle_evaluate(&sol, &scn.gas, &opts.nle)?;
        global.push((res, report));
        global_solutions.push((res, sol));
    }

    let horizon = DispatchHorizon { hours: scn.horizon.hours, dt: finest as f64 * 60.0 };
    let run_local = |&v: &f64| -> Result<(f64, ErrorReport, DispatchSolution)> {
        let sol = solve_dispatch(&scn.power, &scn.coupling, &scn.gas, &horizon, &GasModel::Local { vbar: v })?;
        let (report, _) = nle_evaluate(&sol, &scn.gas, &opts.nle)?;
        Ok((v, report, sol))
    };
    let locals: Vec<_> = if opts.parallel {
        opts.vbars.par_iter().map(run_local).collect::<Result<_>>()?
    } else {
        opts.vbars.iter().map(run_local).collect::<Result<_>>()?
    };
    let mut local = Vec::new();
    let mut local_solutions = Vec::new();
    for (v, r, s) in locals {
        local.push((v, r));
        local_solutions.push((v, s));
    }
    Ok(Comparison { training, global, local, global_solutions, local_solutions, global_models })
}
