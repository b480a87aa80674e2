//! Joint electricity–gas dispatch as one linear program.
//!
//! Power quantities are scaled by the system MVA base, gas pressures and flows
//! by the [`Bases`] of the pipeline models, and the objective is carried in
//! thousands of dollars.

mod solution;
mod spec;
mod verify;

use std::f64::consts::PI;
use std::time::Instant;

pub use solution::{hourly_average, DispatchSolution, PipelineSchedule, SolveStats};
pub use spec::{
    Bus, CouplingSpec, DispatchHorizon, GasDispatchSpec, GasFiredLink, Generator, GeneratorKind,
    InitialGasState, Line, P2gLink, PowerSystemSpec, SourceSpec,
};
pub use verify::verify_solution;

use crate::error::{Error, Result};
use crate::gas_dynamics::FrictionMode;
use crate::koopman::KoopmanModel;
use crate::lp::{solve_lp, LinearProgram, LpSolution};
use crate::network::NodeRole;
use crate::transient_sim::{network_steady_state_with, NetworkState};
use crate::units::Bases;

/// Objective unit in dollars.
pub(crate) const COST_SCALE: f64 = 1_000.0;

/// Gas-side model used inside the LP.
#[derive(Debug, Clone)]
pub enum GasModel {
    /// One Koopman model per pipeline, in network order.
    Global(Vec<KoopmanModel>),
    /// Finite-difference grid with average-velocity friction.
    Local { vbar: f64 },
}

impl GasModel {
    pub fn label(&self) -> String {
        match self {
            GasModel::Global(_) => "global".into(),
            GasModel::Local { vbar } => format!("local(vbar={vbar})"),
        }
    }

    fn bases(&self) -> Bases {
        match self {
            GasModel::Global(m) => m.first().map_or_else(Bases::default, |m| m.bases),
            GasModel::Local { .. } => Bases::default(),
        }
    }
}

/// Variable indices of one pipeline at every step (entry `s − 1` for step `s`).
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum PipeVars {
    /// Start of `ψ` (N entries) and of the inlet pair `(p_in, M_in)`.
    Global { psi: Vec<usize>, u: Vec<usize>, n: usize },
    /// Start of the pressures `p₀…p_K` and of the flows `M₀…M_K`.
    Local { p: Vec<usize>, m: Vec<usize>, k: usize },
}

impl PipeVars {
    pub(crate) fn p_in(&self, s: usize) -> usize {
        match self {
            PipeVars::Global { u, .. } => u[s - 1],
            PipeVars::Local { p, .. } => p[s - 1],
        }
    }

    pub(crate) fn m_in(&self, s: usize) -> usize {
        match self {
            PipeVars::Global { u, .. } => u[s - 1] + 1,
            PipeVars::Local { m, .. } => m[s - 1],
        }
    }

    pub(crate) fn p_out(&self, s: usize) -> usize {
        match self {
            PipeVars::Global { psi, .. } => psi[s - 1],
            PipeVars::Local { p, k, .. } => p[s - 1] + k,
        }
    }

    pub(crate) fn m_out(&self, s: usize) -> usize {
        match self {
            PipeVars::Global { psi, .. } => psi[s - 1] + 1,
            PipeVars::Local { m, k, .. } => m[s - 1] + k,
        }
    }

    /// Start and length of the model's internal state at step `s`.
    pub(crate) fn internal(&self, s: usize) -> Vec<usize> {
        match self {
            PipeVars::Global { psi, n, .. } => (psi[s - 1]..psi[s - 1] + n).collect(),
            PipeVars::Local { p, m, k } => {
                (p[s - 1]..=p[s - 1] + k).chain(m[s - 1]..=m[s - 1] + k).collect()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub hours: usize,
    pub steps: usize,
    pub steps_per_hour: usize,
    pub dt: f64,
    /// `[hour][generator]`
    pub gen: Vec<Vec<usize>>,
    /// `[hour][p2g unit]`
    pub p2g: Vec<Vec<usize>>,
    /// `[hour][bus]`
    pub theta: Vec<Vec<usize>>,
    /// `[hour][node]`, sources only.
    pub source_p: Vec<Vec<Option<usize>>>,
    /// `[hour][node]`, non-sources only.
    pub withdrawal: Vec<Vec<Option<usize>>>,
    /// `[step − 1][node]`; sources point at the hourly pressure.
    pub node_p: Vec<Vec<usize>>,
    /// `[step − 1][node]`, sources only.
    pub injection: Vec<Vec<Option<usize>>>,
    pub pipes: Vec<PipeVars>,
    /// Gas variables and rows each pipeline adds per step.
    pub gas_vars_per_step: Vec<usize>,
    pub gas_rows_per_step: Vec<usize>,
}

/// Assembled LP with the bookkeeping needed to read a solution back.
#[derive(Debug, Clone)]
pub struct DispatchLp {
    pub lp: LinearProgram,
    pub bases: Bases,
    /// Gas network state at the start of the horizon.
    pub initial: NetworkState,
    pub(crate) layout: Layout,
}

impl DispatchLp {
    /// Gas variables per pipeline per step.
    pub fn gas_vars_per_step(&self) -> &[usize] {
        &self.layout.gas_vars_per_step
    }

    /// Gas constraint rows per pipeline per step.
    pub fn gas_rows_per_step(&self) -> &[usize] {
        &self.layout.gas_rows_per_step
    }

    /// Rows whose label starts with `prefix`.
    pub fn count_rows(&self, prefix: &str) -> usize {
        self.lp.rows.iter().filter(|r| r.label.starts_with(prefix)).count()
    }
}

/// Initial network state consistent with the chosen gas model: the nonlinear
/// steady state for Koopman models, the model's own steady state otherwise.
pub fn initial_state(gas: &GasDispatchSpec, model: &GasModel) -> Result<NetworkState> {
    let mode = match model {
        GasModel::Global(_) => FrictionMode::Nonlinear,
        GasModel::Local { vbar } => FrictionMode::Local { vbar: *vbar },
    };
    network_steady_state_with(
        &gas.network,
        &gas.network.segments(),
        &gas.initial.source_pressure,
        &gas.initial.withdrawal,
        mode,
    )
}

fn validate_models(gas: &GasDispatchSpec, horizon: &DispatchHorizon, model: &GasModel) -> Result<()> {
    match model {
        GasModel::Global(models) => {
            if models.len() != gas.network.pipelines.len() {
                return Err(Error::Spec(format!(
                    "{} models for {} pipelines",
                    models.len(),
                    gas.network.pipelines.len()
                )));
            }
            let bases = model.bases();
            for (m, p) in models.iter().zip(&gas.network.pipelines) {
                if m.pipeline_id != p.id {
                    return Err(Error::Spec(format!("model for {} supplied for pipeline {}", m.pipeline_id, p.id)));
                }
                if (m.dt - horizon.dt).abs() > 1e-9 {
                    return Err(Error::HorizonMismatch(format!(
                        "model of {} has Δt {} s, horizon uses {} s",
                        p.id, m.dt, horizon.dt
                    )));
                }
                let n = m.observables.dim();
                let kx_ok = m.kx.len() == m.delays.dx && m.kx.iter().all(|k| k.shape() == (n, n));
                let ku_ok = m.ku.len() == m.delays.du + 1 && m.ku.iter().all(|k| k.shape() == (n, 2));
                if !kx_ok || !ku_ok {
                    return Err(Error::DimensionMismatch(format!(
                        "operators of {} do not match observable set {} (N = {n})",
                        p.id, m.observables
                    )));
                }
                if !(m.stability.enabled && m.stability.certified_spectral_radius < 1.0) {
                    return Err(Error::Spec(format!("model of {} is not certified stable", p.id)));
                }
                if m.bases != bases {
                    return Err(Error::Spec("all pipeline models must share base values".into()));
                }
            }
        }
        GasModel::Local { vbar } => {
            if !(vbar.is_finite() && *vbar >= 0.0) {
                return Err(Error::Spec(format!("average velocity {vbar} must be finite and nonnegative")));
            }
        }
    }
    Ok(())
}

/// Builds the dispatch LP.
pub fn assemble_lp(
    power: &PowerSystemSpec,
    coupling: &CouplingSpec,
    gas: &GasDispatchSpec,
    horizon: &DispatchHorizon,
    model: &GasModel,
) -> Result<DispatchLp> {
    let hours = horizon.hours;
    if hours == 0 {
        return Err(Error::Spec("horizon must cover at least one hour".into()));
    }
    let sph = horizon.steps_per_hour()?;
    let steps = hours * sph;
    let dt = horizon.dt;
    power.validate(hours)?;
    gas.validate(hours)?;
    coupling.validate(power, &gas.network)?;
    validate_models(gas, horizon, model)?;

    let bases = model.bases();
    let (pb, mb) = (bases.pressure, bases.mfr);
    let s_base = power.base_mva;
    let net = &gas.network;
    let ends = net.endpoints()?;
    let initial = initial_state(gas, model)?;
    let mut lp = LinearProgram::new();

    // Electric side, hour by hour.
    let mut gen: Vec<Vec<usize>> = Vec::with_capacity(hours);
    let mut p2g: Vec<Vec<usize>> = Vec::with_capacity(hours);
    let mut theta: Vec<Vec<usize>> = Vec::with_capacity(hours);
    for h in 0..hours {
        let g: Vec<usize> = power
            .generators
            .iter()
            .map(|g| {
                lp.add_var(
                    format!("gen[{}][{h}]", g.id),
                    g.p_min / s_base,
                    g.upper(h).max(g.p_min) / s_base,
                    g.cost * s_base / COST_SCALE,
                )
            })
            .collect();
        let q: Vec<usize> = coupling
            .p2g
            .iter()
            .map(|u| lp.add_var(format!("p2g[{}][{h}]", u.id), u.p_min / s_base, u.p_max / s_base, 0.0))
            .collect();
        let th: Vec<usize> = power
            .buses
            .iter()
            .map(|b| {
                let lim = if b.id == power.slack_bus { 0.0 } else { PI };
                lp.add_var(format!("theta[{}][{h}]", b.id), -lim, lim, 0.0)
            })
            .collect();

        let mut balance: Vec<Vec<(usize, f64)>> = vec![Vec::new(); power.buses.len()];
        for (gi, unit) in power.generators.iter().enumerate() {
            balance[power.bus_index(&unit.bus).unwrap()].push((g[gi], 1.0));
        }
        for (ui, unit) in coupling.p2g.iter().enumerate() {
            balance[power.bus_index(&unit.bus).unwrap()].push((q[ui], -1.0));
        }
        for l in &power.lines {
            let (i, j) = (power.bus_index(&l.from).unwrap(), power.bus_index(&l.to).unwrap());
            let b = 1.0 / l.reactance;
            // flow i → j leaves bus i and enters bus j
            balance[i].extend([(th[i], -b), (th[j], b)]);
            balance[j].extend([(th[i], b), (th[j], -b)]);
            let lim = l.limit / s_base;
            lp.add_le(format!("line_max[{}][{h}]", l.id), vec![(th[i], b), (th[j], -b)], lim);
            lp.add_le(format!("line_min[{}][{h}]", l.id), vec![(th[i], -b), (th[j], b)], lim);
        }
        for (bi, b) in power.buses.iter().enumerate() {
            let load = b.load.get(h).copied().unwrap_or(0.0) / s_base;
            lp.add_eq(format!("bus[{}][{h}]", b.id), std::mem::take(&mut balance[bi]), load);
        }
        if h > 0 {
            for (gi, unit) in power.generators.iter().enumerate() {
                if let Some(r) = unit.ramp {
                    let (now, prev) = (g[gi], gen[h - 1][gi]);
                    lp.add_le(format!("ramp_up[{}][{h}]", unit.id), vec![(now, 1.0), (prev, -1.0)], r / s_base);
                    lp.add_le(format!("ramp_down[{}][{h}]", unit.id), vec![(prev, 1.0), (now, -1.0)], r / s_base);
                }
            }
        }
        gen.push(g);
        p2g.push(q);
        theta.push(th);
    }

    // Hourly gas controls: source pressures and total withdrawals.
    let mut source_p = Vec::with_capacity(hours);
    let mut withdrawal = Vec::with_capacity(hours);
    for h in 0..hours {
        let mut sp = vec![None; net.nodes.len()];
        let mut wd = vec![None; net.nodes.len()];
        for (i, node) in net.nodes.iter().enumerate() {
            if node.role == NodeRole::Source {
                let src = gas.source(&node.id).unwrap();
                let lo = src.p_min.max(node.p_min) / pb;
                let hi = src.p_max.min(node.p_max) / pb;
                sp[i] = Some(lp.add_var(format!("p_src[{}][{h}]", node.id), lo, hi, 0.0));
            } else {
                let w = lp.add_var(format!("w[{}][{h}]", node.id), f64::NEG_INFINITY, f64::INFINITY, 0.0);
                let mut terms = vec![(w, 1.0)];
                for l in coupling.gas_fired.iter().filter(|l| l.gas_node == node.id) {
                    let gi = power.generators.iter().position(|g| g.id == l.generator).unwrap();
                    terms.push((gen[h][gi], -l.kg_s_per_mw * s_base / mb));
                }
                for (ui, l) in coupling.p2g.iter().enumerate().filter(|(_, l)| l.gas_node == node.id) {
                    terms.push((p2g[h][ui], l.kg_s_per_mw * s_base / mb));
                }
                lp.add_eq(format!("withdrawal[{}][{h}]", node.id), terms, gas.baseline(&node.id, h) / mb);
                wd[i] = Some(w);
            }
        }
        source_p.push(sp);
        withdrawal.push(wd);
    }

    // History of every pipeline at rest in the initial state.
    let hist: Vec<([f64; 2], [f64; 2])> = initial
        .grids
        .iter()
        .map(|g| {
            (
                [bases.p_pu(g.p_out()), bases.m_pu(g.m_out())],
                [bases.p_pu(g.p_in()), bases.m_pu(g.m_in())],
            )
        })
        .collect();

    let mut node_p = Vec::with_capacity(steps);
    let mut injection = Vec::with_capacity(steps);
    let mut pipes: Vec<PipeVars> = net
        .pipelines
        .iter()
        .enumerate()
        .map(|(j, p)| match model {
            GasModel::Global(m) => PipeVars::Global { psi: vec![], u: vec![], n: m[j].n() },
            GasModel::Local { .. } => PipeVars::Local { p: vec![], m: vec![], k: p.segments() },
        })
        .collect();
    let mut gas_vars_per_step = vec![0; pipes.len()];
    let mut gas_rows_per_step = vec![0; pipes.len()];

    for s in 1..=steps {
        let h = (s - 1) / sph;
        let np: Vec<usize> = net
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| match source_p[h][i] {
                Some(v) => v,
                None => lp.add_var(format!("p[{}][{s}]", node.id), node.p_min / pb, node.p_max / pb, 0.0),
            })
            .collect();
        let inj: Vec<Option<usize>> = net
            .nodes
            .iter()
            .map(|node| {
                (node.role == NodeRole::Source).then(|| {
                    let price = gas.source(&node.id).unwrap().price;
                    lp.add_var(format!("inj[{}][{s}]", node.id), 0.0, f64::INFINITY, price * mb * dt / COST_SCALE)
                })
            })
            .collect();

        for (j, pipe) in net.pipelines.iter().enumerate() {
            let params = &pipe.params;
            let (vars0, rows0) = (lp.num_vars(), lp.num_rows());
            let (f, t) = ends[j];
            let (plo, phi) = (params.p_min() / pb, params.p_max() / pb);
            let (mlo, mhi) = (params.mfr_min() / mb, params.mfr_max() / mb);
            let tag = format!("{}][{s}", pipe.id);
            match (&mut pipes[j], model) {
                (PipeVars::Global { psi, u, n }, GasModel::Global(models)) => {
                    let m = &models[j];
                    let n = *n;
                    let start = lp.num_vars();
                    for r in 0..n {
                        let (lo, hi) = match r {
                            0 => (plo, phi),
                            1 => (mlo, mhi),
                            _ => (f64::NEG_INFINITY, f64::INFINITY),
                        };
                        lp.add_var(format!("psi{r}[{tag}]"), lo, hi, 0.0);
                    }
                    let ustart = lp.add_var(format!("p_in[{tag}]"), plo, phi, 0.0);
                    lp.add_var(format!("m_in[{tag}]"), mlo, mhi, 0.0);
                    psi.push(start);
                    u.push(ustart);

                    let psi0 = m.observables.lift(hist[j].0);
                    let u0 = hist[j].1;
                    for r in 0..n {
                        let mut terms = vec![(start + r, 1.0)];
                        let mut rhs = 0.0;
                        for i in 1..=m.delays.dx {
                            let k = &m.kx[i - 1];
                            for c in 0..n {
                                if s > i {
                                    terms.push((psi[s - 1 - i] + c, -k[(r, c)]));
                                } else {
                                    rhs += k[(r, c)] * psi0[c];
                                }
                            }
                        }
                        for i in 0..=m.delays.du {
                            let k = &m.ku[i];
                            for c in 0..2 {
                                if s > i {
                                    terms.push((u[s - 1 - i] + c, -k[(r, c)]));
                                } else {
                                    rhs += k[(r, c)] * u0[c];
                                }
                            }
                        }
                        lp.add_eq(format!("koopman{r}[{tag}]"), terms, rhs);
                    }
                }
                (PipeVars::Local { p, m, k }, GasModel::Local { vbar }) => {
                    let k = *k;
                    let pstart = lp.num_vars();
                    for i in 0..=k {
                        let (lo, hi) = if i == 0 || i == k { (plo, phi) } else { (f64::NEG_INFINITY, f64::INFINITY) };
                        lp.add_var(format!("p{i}[{tag}]"), lo, hi, 0.0);
                    }
                    let mstart = lp.num_vars();
                    for i in 0..=k {
                        let (lo, hi) = if i == 0 || i == k { (mlo, mhi) } else { (f64::NEG_INFINITY, f64::INFINITY) };
                        lp.add_var(format!("m{i}[{tag}]"), lo, hi, 0.0);
                    }
                    p.push(pstart);
                    m.push(mstart);

                    let dx = params.length() / k as f64;
                    let a = params.area();
                    let cs = params.linepack_per_pascal(dx) * pb / (dt * mb);
                    let cf = params.friction_factor() * vbar / (4.0 * params.diameter()) * dx / a * mb / pb;
                    let cm = dx * mb / (dt * a * pb);
                    let g0 = &initial.grids[j];
                    for i in 1..=k {
                        // mass balance of element i
                        let mut terms = vec![(mstart + i, 1.0), (mstart + i - 1, -1.0), (pstart + i, cs)];
                        let mut rhs = 0.0;
                        if s > 1 {
                            terms.push((p[s - 2] + i, -cs));
                        } else {
                            rhs += cs * bases.p_pu(g0.pressures[i]);
                        }
                        lp.add_eq(format!("mass{i}[{tag}]"), terms, rhs);
                        // momentum balance of element i
                        let mut terms = vec![
                            (pstart + i, 1.0),
                            (pstart + i - 1, -1.0),
                            (mstart + i, cf + cm),
                            (mstart + i - 1, cf),
                        ];
                        let mut rhs = 0.0;
                        if s > 1 {
                            terms.push((m[s - 2] + i, -cm));
                        } else {
                            rhs += cm * bases.m_pu(g0.mfrs[i]);
                        }
                        lp.add_eq(format!("momentum{i}[{tag}]"), terms, rhs);
                    }
                }
                _ => unreachable!("pipeline variables follow the gas model"),
            }
            let pv = &pipes[j];
            lp.add_eq(format!("tie_in[{tag}]"), vec![(pv.p_in(s), 1.0), (np[f], -1.0)], 0.0);
            lp.add_eq(format!("tie_out[{tag}]"), vec![(pv.p_out(s), 1.0), (np[t], -1.0)], 0.0);
            if s == 1 {
                gas_vars_per_step[j] = lp.num_vars() - vars0;
                gas_rows_per_step[j] = lp.num_rows() - rows0;
            }
        }

        for (i, node) in net.nodes.iter().enumerate() {
            let mut terms = Vec::new();
            for (j, &(f, t)) in ends.iter().enumerate() {
                if t == i {
                    terms.push((pipes[j].m_out(s), 1.0));
                }
                if f == i {
                    terms.push((pipes[j].m_in(s), -1.0));
                }
            }
            if let Some(v) = inj[i] {
                terms.push((v, 1.0));
            }
            if let Some(w) = withdrawal[h][i] {
                terms.push((w, -1.0));
            }
            lp.add_eq(format!("node[{}][{s}]", node.id), terms, 0.0);
        }
        node_p.push(np);
        injection.push(inj);
    }

    Ok(DispatchLp {
        lp,
        bases,
        initial,
        layout: Layout {
            hours,
            steps,
            steps_per_hour: sph,
            dt,
            gen,
            p2g,
            theta,
            source_p,
            withdrawal,
            node_p,
            injection,
            pipes,
            gas_vars_per_step,
            gas_rows_per_step,
        },
    })
}

/// Assembles, solves and extracts the schedule in one call.
pub fn solve_dispatch(
    power: &PowerSystemSpec,
    coupling: &CouplingSpec,
    gas: &GasDispatchSpec,
    horizon: &DispatchHorizon,
    model: &GasModel,
) -> Result<DispatchSolution> {
    let t0 = Instant::now();
    let dlp = assemble_lp(power, coupling, gas, horizon, model)?;
    let assembly = t0.elapsed().as_secs_f64();
    let raw = solve_lp(&dlp.lp)?;
    let mut sol = extract_schedule(&dlp, &raw, power, coupling, gas, model);
    sol.stats.assembly_seconds = assembly;
    Ok(sol)
}

/// Maps a raw LP solution back to named physical quantities.
pub fn extract_schedule(
    dlp: &DispatchLp,
    raw: &LpSolution,
    power: &PowerSystemSpec,
    coupling: &CouplingSpec,
    gas: &GasDispatchSpec,
    model: &GasModel,
) -> DispatchSolution {
    solution::extract(dlp, raw, power, coupling, gas, model)
}
