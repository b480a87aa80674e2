//! Backward-Euler time stepping of pipelines and networks.
//!
//! Every step solves one global Newton system over all pipeline grids plus
//! the pressures of non-source nodes. Equations are scaled so that the
//! residual is expressed in per-unit pressure (momentum, pressure ties) or
//! per-unit mass flow (mass conservation, node balances).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gas_dynamics::{element_friction, steady_state_profile, FrictionMode, GridState, PipelineParams};
use crate::network::{GasNetworkSpec, NodeRole};
use crate::units::Bases;

/// Newton stopping tolerance on the scaled residual (max norm).
pub const NEWTON_TOL: f64 = 1e-8;
pub const NEWTON_MAX_ITER: usize = 50;
const MAX_HALVINGS: usize = 10;

/// Time series of boundary conditions, one value per step.
///
/// Entry `n` applies to the state at time `(n + 1)·dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryProfile {
    pub dt: f64,
    /// Prescribed pressure (Pa) at each source node.
    pub source_pressure: BTreeMap<String, Vec<f64>>,
    /// Prescribed withdrawal (kg/s) at non-source nodes; missing nodes withdraw nothing.
    #[serde(default)]
    pub withdrawal: BTreeMap<String, Vec<f64>>,
}

impl BoundaryProfile {
    /// Boundary for [`GasNetworkSpec::single_pipeline`]: inlet pressure and outlet flow.
    pub fn pipeline(dt: f64, inlet_pressure: Vec<f64>, outlet_mfr: Vec<f64>) -> Self {
        BoundaryProfile {
            dt,
            source_pressure: BTreeMap::from([("inlet".to_string(), inlet_pressure)]),
            withdrawal: BTreeMap::from([("outlet".to_string(), outlet_mfr)]),
        }
    }

    pub fn steps(&self) -> usize {
        self.source_pressure.values().next().map_or(0, Vec::len)
    }

    fn validate(&self, net: &GasNetworkSpec) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::Spec(format!("time step must be positive, got {}", self.dt)));
        }
        let n = self.steps();
        if n == 0 {
            return Err(Error::Spec("boundary profile is empty".into()));
        }
        for (_, node) in net.sources() {
            let series = self
                .source_pressure
                .get(&node.id)
                .ok_or_else(|| Error::Spec(format!("no pressure profile for source {}", node.id)))?;
            if series.len() != n {
                return Err(Error::LengthMismatch { left: series.len(), right: n });
            }
            if series.iter().any(|&p| !(p > 0.0)) {
                return Err(Error::Spec(format!("source {} pressure must be positive", node.id)));
            }
        }
        for (id, series) in &self.withdrawal {
            let idx = net
                .node_index(id)
                .ok_or_else(|| Error::Spec(format!("withdrawal at unknown node {id}")))?;
            if net.nodes[idx].role == NodeRole::Source {
                return Err(Error::Spec(format!("withdrawal prescribed at source node {id}")));
            }
            if series.len() != n {
                return Err(Error::LengthMismatch { left: series.len(), right: n });
            }
        }
        for id in self.source_pressure.keys() {
            match net.node_index(id) {
                Some(i) if net.nodes[i].role == NodeRole::Source => {}
                _ => return Err(Error::Spec(format!("pressure prescribed at non-source node {id}"))),
            }
        }
        Ok(())
    }
}

/// Network state at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub grids: Vec<GridState>,
    /// Pa, indexed like `GasNetworkSpec::nodes`.
    pub node_pressures: Vec<f64>,
    /// Net injection into the network at each node, kg/s (supply at sources,
    /// minus the withdrawal elsewhere).
    pub injections: Vec<f64>,
}

/// Recorded simulation: entry 0 is the initial state, entry `n` the state
/// after `n` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub node_ids: Vec<String>,
    pub pipeline_ids: Vec<String>,
    pub states: Vec<NetworkState>,
    /// Final scaled Newton residual of each step (empty entry for the initial state).
    pub residuals: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.states.len()).map(|n| n as f64 * self.dt).collect()
    }

    pub fn pipeline_series(&self, j: usize) -> impl Iterator<Item = &GridState> {
        self.states.iter().map(move |s| &s.grids[j])
    }

    pub fn last(&self) -> &NetworkState {
        self.states.last().expect("trajectory holds the initial state")
    }

    /// Writes `t,p_in,m_in,p_out,m_out` rows for pipeline `j`.
    pub fn write_pipeline_csv<W: std::io::Write>(&self, j: usize, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "p_in", "m_in", "p_out", "m_out"])?;
        for (n, g) in self.pipeline_series(j).enumerate() {
            wr.write_record(&[
                format!("{}", n as f64 * self.dt),
                format!("{}", g.p_in()),
                format!("{}", g.m_in()),
                format!("{}", g.p_out()),
                format!("{}", g.m_out()),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Writes one row per record with the pressure of every node.
    pub fn write_nodes_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend(self.node_ids.iter().map(|id| format!("p_{id}")));
        header.extend(self.node_ids.iter().map(|id| format!("inj_{id}")));
        wr.write_record(&header)?;
        for (n, s) in self.states.iter().enumerate() {
            let mut row = vec![format!("{}", n as f64 * self.dt)];
            row.extend(s.node_pressures.iter().map(|p| format!("{p}")));
            row.extend(s.injections.iter().map(|m| format!("{m}")));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Unknown layout and equation assembly for one network.
struct System<'a> {
    net: &'a GasNetworkSpec,
    ends: Vec<(usize, usize)>,
    segments: Vec<usize>,
    offsets: Vec<usize>,
    node_var: Vec<Option<usize>>,
    len: usize,
    mode: FrictionMode,
    bases: Bases,
}

/// Boundary data and previous state for one step.
struct StepInput<'b> {
    /// None for a steady-state solve.
    dt: Option<f64>,
    prev: Option<&'b DVector<f64>>,
    /// Pa per node (only sources used).
    source_pressure: Vec<f64>,
    /// kg/s per node.
    withdrawal: Vec<f64>,
}

impl<'a> System<'a> {
    fn new(net: &'a GasNetworkSpec, segments: &[usize], mode: FrictionMode) -> Result<Self> {
        net.validate()?;
        if segments.len() != net.pipelines.len() {
            return Err(Error::LengthMismatch { left: segments.len(), right: net.pipelines.len() });
        }
        if segments.iter().any(|&k| k == 0) {
            return Err(Error::Spec("every pipeline needs at least one segment".into()));
        }
        let mut offsets = Vec::with_capacity(segments.len());
        let mut len = 0;
        for &k in segments {
            offsets.push(len);
            len += 2 * (k + 1);
        }
        let mut node_var = vec![None; net.nodes.len()];
        for (i, n) in net.nodes.iter().enumerate() {
            if n.role != NodeRole::Source {
                node_var[i] = Some(len);
                len += 1;
            }
        }
        Ok(System {
            net,
            ends: net.endpoints()?,
            segments: segments.to_vec(),
            offsets,
            node_var,
            len,
            mode,
            bases: Bases::default(),
        })
    }

    fn p_idx(&self, j: usize, k: usize) -> usize {
        self.offsets[j] + k
    }

    fn m_idx(&self, j: usize, k: usize) -> usize {
        self.offsets[j] + self.segments[j] + 1 + k
    }

    fn dx(&self, j: usize) -> f64 {
        self.net.pipelines[j].params.length() / self.segments[j] as f64
    }

    fn pack(&self, grids: &[GridState], node_pressures: &[f64]) -> DVector<f64> {
        let mut z = DVector::zeros(self.len);
        for (j, g) in grids.iter().enumerate() {
            for k in 0..=self.segments[j] {
                z[self.p_idx(j, k)] = g.pressures[k];
                z[self.m_idx(j, k)] = g.mfrs[k];
            }
        }
        for (i, v) in self.node_var.iter().enumerate() {
            if let Some(v) = v {
                z[*v] = node_pressures[i];
            }
        }
        z
    }

    fn unpack(&self, z: &DVector<f64>, input: &StepInput) -> NetworkState {
        let grids: Vec<GridState> = (0..self.segments.len())
            .map(|j| {
                let k = self.segments[j];
                GridState {
                    pressures: (0..=k).map(|i| z[self.p_idx(j, i)]).collect(),
                    mfrs: (0..=k).map(|i| z[self.m_idx(j, i)]).collect(),
                    segment_length: self.dx(j),
                }
            })
            .collect();
        let node_pressures: Vec<f64> = (0..self.net.nodes.len())
            .map(|i| match self.node_var[i] {
                Some(v) => z[v],
                None => input.source_pressure[i],
            })
            .collect();
        let mut injections = vec![0.0; self.net.nodes.len()];
        for (j, &(f, t)) in self.ends.iter().enumerate() {
            injections[f] += grids[j].m_in();
            injections[t] -= grids[j].m_out();
        }
        NetworkState { grids, node_pressures, injections }
    }

    fn node_pressure(&self, z: &DVector<f64>, input: &StepInput, node: usize) -> (f64, Option<usize>) {
        match self.node_var[node] {
            Some(v) => (z[v], Some(v)),
            None => (input.source_pressure[node], None),
        }
    }

    /// Residual and, optionally, dense Jacobian.
    fn evaluate(
        &self,
        z: &DVector<f64>,
        input: &StepInput,
        mut jac: Option<&mut DMatrix<f64>>,
    ) -> Result<DVector<f64>> {
        let (pb, mb) = (self.bases.pressure, self.bases.mfr);
        let mut r = DVector::zeros(self.len);
        if let Some(j) = jac.as_deref_mut() {
            j.fill(0.0);
        }
        let mut row = 0;
        for (j, pipe) in self.net.pipelines.iter().enumerate() {
            let params = &pipe.params;
            let a = params.area();
            let dx = self.dx(j);
            let storage = params.linepack_per_pascal(dx);
            for k in 1..=self.segments[j] {
                let (ip0, ip1) = (self.p_idx(j, k - 1), self.p_idx(j, k));
                let (im0, im1) = (self.m_idx(j, k - 1), self.m_idx(j, k));
                let (p0, p1, m0, m1) = (z[ip0], z[ip1], z[im0], z[im1]);
                let (f, df_dmo, df_dmi, df_dpo, df_dpi) =
                    element_friction(params, m1, m0, p1, p0, self.mode)?;

                // mass conservation, per-unit mass flow
                let mut mass = (m1 - m0) / mb;
                if let (Some(dt), Some(prev)) = (input.dt, input.prev) {
                    mass += (p1 - prev[ip1]) * storage / (dt * mb);
                }
                r[row] = mass;
                if let Some(jm) = jac.as_deref_mut() {
                    jm[(row, im1)] += 1.0 / mb;
                    jm[(row, im0)] -= 1.0 / mb;
                    if let Some(dt) = input.dt {
                        jm[(row, ip1)] += storage / (dt * mb);
                    }
                }
                row += 1;

                // momentum, per-unit pressure
                let mut mom = (p1 - p0) + f * dx / a;
                if let (Some(dt), Some(prev)) = (input.dt, input.prev) {
                    mom += (m1 - prev[im1]) * dx / (dt * a);
                }
                r[row] = mom / pb;
                if let Some(jm) = jac.as_deref_mut() {
                    let inertia = input.dt.map_or(0.0, |dt| dx / (dt * a));
                    jm[(row, im1)] += (inertia + df_dmo * dx / a) / pb;
                    jm[(row, im0)] += df_dmi * dx / a / pb;
                    jm[(row, ip1)] += (1.0 + df_dpo * dx / a) / pb;
                    jm[(row, ip0)] += (-1.0 + df_dpi * dx / a) / pb;
                }
                row += 1;
            }
            // pressure ties at both ends
            let (from, to) = self.ends[j];
            for (node, ip) in [(from, self.p_idx(j, 0)), (to, self.p_idx(j, self.segments[j]))] {
                let (pn, var) = self.node_pressure(z, input, node);
                r[row] = (z[ip] - pn) / pb;
                if let Some(jm) = jac.as_deref_mut() {
                    jm[(row, ip)] += 1.0 / pb;
                    if let Some(v) = var {
                        jm[(row, v)] -= 1.0 / pb;
                    }
                }
                row += 1;
            }
        }
        // node mass balance at non-source nodes
        for n in 0..self.net.nodes.len() {
            if self.node_var[n].is_none() {
                continue;
            }
            let mut bal = -input.withdrawal[n];
            for (j, &(f, t)) in self.ends.iter().enumerate() {
                if t == n {
                    let im = self.m_idx(j, self.segments[j]);
                    bal += z[im];
                    if let Some(jm) = jac.as_deref_mut() {
                        jm[(row, im)] += 1.0 / mb;
                    }
                }
                if f == n {
                    let im = self.m_idx(j, 0);
                    bal -= z[im];
                    if let Some(jm) = jac.as_deref_mut() {
                        jm[(row, im)] -= 1.0 / mb;
                    }
                }
            }
            r[row] = bal / mb;
            row += 1;
        }
        debug_assert_eq!(row, self.len);
        Ok(r)
    }

    fn pressures_positive(&self, z: &DVector<f64>) -> bool {
        (0..self.segments.len()).all(|j| (0..=self.segments[j]).all(|k| z[self.p_idx(j, k)] > 0.0))
            && self.node_var.iter().flatten().all(|&v| z[v] > 0.0)
    }

    /// Damped Newton solve from `z`.
    fn newton(&self, mut z: DVector<f64>, input: &StepInput, step: usize) -> Result<(DVector<f64>, f64)> {
        let mut jac = DMatrix::zeros(self.len, self.len);
        let mut r = self.evaluate(&z, input, None)?;
        let mut norm = r.amax();
        for _ in 0..NEWTON_MAX_ITER {
            if norm <= NEWTON_TOL {
                return Ok((z, norm));
            }
            self.evaluate(&z, input, Some(&mut jac))?;
            let delta = jac
                .clone()
                .lu()
                .solve(&(-&r))
                .ok_or(Error::NewtonDivergence { step, residual: norm })?;
            let mut alpha = 1.0;
            let mut accepted = None;
            let mut fallback = None;
            for _ in 0..=MAX_HALVINGS {
                let cand = &z + &delta * alpha;
                if self.pressures_positive(&cand) {
                    if let Ok(rc) = self.evaluate(&cand, input, None) {
                        let nc = rc.amax();
                        if nc.is_finite() {
                            if nc < norm {
                                accepted = Some((cand, rc, nc));
                                break;
                            }
                            fallback = Some((cand, rc, nc));
                        }
                    }
                }
                alpha *= 0.5;
            }
            match accepted.or(fallback) {
                Some((zc, rc, nc)) => {
                    z = zc;
                    r = rc;
                    norm = nc;
                }
                None => {
                    return Err(Error::NonPhysicalState {
                        step,
                        detail: "no damped Newton step keeps pressures positive".into(),
                    })
                }
            }
        }
        if norm <= NEWTON_TOL {
            Ok((z, norm))
        } else {
            Err(Error::NewtonDivergence { step, residual: norm })
        }
    }

    fn step_input<'b>(&self, boundary: &BoundaryProfile, n: usize, prev: &'b DVector<f64>) -> StepInput<'b> {
        let mut source_pressure = vec![0.0; self.net.nodes.len()];
        let mut withdrawal = vec![0.0; self.net.nodes.len()];
        for (i, node) in self.net.nodes.iter().enumerate() {
            match node.role {
                NodeRole::Source => source_pressure[i] = boundary.source_pressure[&node.id][n],
                _ => {
                    withdrawal[i] = boundary.withdrawal.get(&node.id).map_or(0.0, |s| s[n]);
                }
            }
        }
        StepInput { dt: Some(boundary.dt), prev: Some(prev), source_pressure, withdrawal }
    }
}

/// Checks that an initial state is continuous at every node, returning the
/// node pressures.
fn check_initial(net: &GasNetworkSpec, init: &[GridState]) -> Result<Vec<f64>> {
    let ends = net.endpoints()?;
    let mut p_node: Vec<Option<f64>> = vec![None; net.nodes.len()];
    for (j, &(f, t)) in ends.iter().enumerate() {
        let g = &init[j];
        for (node, p) in [(f, g.p_in()), (t, g.p_out())] {
            match p_node[node] {
                None => p_node[node] = Some(p),
                Some(q) if ((q - p) / q).abs() > 1e-6 => {
                    return Err(Error::Spec(format!(
                        "initial state is discontinuous at node {} ({q} vs {p} Pa)",
                        net.nodes[node].id
                    )))
                }
                _ => {}
            }
        }
    }
    Ok(p_node.into_iter().map(|p| p.unwrap_or(0.0)).collect())
}

/// Simulates a gas network with one global Newton solve per backward-Euler step.
///
/// `init` must hold one grid per pipeline with the segment counts given in
/// `segments`. Withdrawals at load nodes in the initial state are implied by
/// the grids; the boundary profile drives every subsequent step.
pub fn simulate_network(
    net: &GasNetworkSpec,
    segments: &[usize],
    boundary: &BoundaryProfile,
    init: &[GridState],
    mode: FrictionMode,
) -> Result<Trajectory> {
    let sys = System::new(net, segments, mode)?;
    boundary.validate(net)?;
    if init.len() != net.pipelines.len() {
        return Err(Error::LengthMismatch { left: init.len(), right: net.pipelines.len() });
    }
    for (j, g) in init.iter().enumerate() {
        if g.segments() != segments[j] {
            return Err(Error::Spec(format!(
                "initial grid of pipeline {} has {} segments, expected {}",
                net.pipelines[j].id,
                g.segments(),
                segments[j]
            )));
        }
    }
    let node_p = check_initial(net, init)?;
    let mut z = sys.pack(init, &node_p);

    let init_input = StepInput {
        dt: None,
        prev: None,
        source_pressure: node_p.clone(),
        withdrawal: vec![0.0; net.nodes.len()],
    };
    let mut states = Vec::with_capacity(boundary.steps() + 1);
    states.push(sys.unpack(&z, &init_input));
    let mut residuals = vec![0.0];
    for n in 0..boundary.steps() {
        let prev = z.clone();
        let input = sys.step_input(boundary, n, &prev);
        let mut guess = z.clone();
        // warm start with boundary values imposed
        for (j, &(f, _)) in sys.ends.iter().enumerate() {
            if sys.node_var[f].is_none() {
                guess[sys.p_idx(j, 0)] = input.source_pressure[f];
            }
        }
        let (zn, res) = sys.newton(guess, &input, n + 1)?;
        z = zn;
        states.push(sys.unpack(&z, &input));
        residuals.push(res);
    }
    Ok(Trajectory {
        dt: boundary.dt,
        node_ids: net.nodes.iter().map(|n| n.id.clone()).collect(),
        pipeline_ids: net.pipelines.iter().map(|p| p.id.clone()).collect(),
        states,
        residuals,
    })
}

/// Simulates one pipeline with prescribed inlet pressure and outlet flow.
pub fn simulate_pipeline(
    params: &PipelineParams,
    segments: usize,
    boundary: &BoundaryProfile,
    init: &GridState,
    mode: FrictionMode,
) -> Result<Trajectory> {
    let net = GasNetworkSpec::single_pipeline("pipeline", params.clone(), segments);
    simulate_network(&net, &[segments], boundary, std::slice::from_ref(init), mode)
}

/// Steady operating point of a network for given source pressures (Pa) and
/// non-source withdrawals (kg/s), keyed by node id.
pub fn network_steady_state(
    net: &GasNetworkSpec,
    segments: &[usize],
    source_pressure: &BTreeMap<String, f64>,
    withdrawal: &BTreeMap<String, f64>,
) -> Result<NetworkState> {
    network_steady_state_with(net, segments, source_pressure, withdrawal, FrictionMode::Nonlinear)
}

/// [`network_steady_state`] under an arbitrary friction model.
pub fn network_steady_state_with(
    net: &GasNetworkSpec,
    segments: &[usize],
    source_pressure: &BTreeMap<String, f64>,
    withdrawal: &BTreeMap<String, f64>,
    mode: FrictionMode,
) -> Result<NetworkState> {
    let mut sp = vec![0.0; net.nodes.len()];
    let mut wd = vec![0.0; net.nodes.len()];
    for (i, node) in net.nodes.iter().enumerate() {
        match node.role {
            NodeRole::Source => {
                sp[i] = *source_pressure
                    .get(&node.id)
                    .ok_or_else(|| Error::Spec(format!("no pressure for source {}", node.id)))?
            }
            _ => wd[i] = withdrawal.get(&node.id).copied().unwrap_or(0.0),
        }
    }
    let p_ref = sp.iter().copied().fold(0.0, f64::max);
    let input = StepInput { dt: None, prev: None, source_pressure: sp, withdrawal: wd };

    // The linear friction model gives a well-posed starting point.
    let linear = System::new(net, segments, FrictionMode::Local { vbar: 1.0 })?;
    let mut z = DVector::from_element(linear.len, p_ref);
    for j in 0..segments.len() {
        for k in 0..=segments[j] {
            z[linear.m_idx(j, k)] = 0.0;
        }
    }
    let (z, _) = linear.newton(z, &input, 0)?;
    let sys = System::new(net, segments, mode)?;
    let (z, _) = sys.newton(z, &input, 0)?;
    let mut state = sys.unpack(&z, &input);
    for (i, node) in net.nodes.iter().enumerate() {
        if node.role != NodeRole::Source {
            state.injections[i] = -input.withdrawal[i];
        }
    }
    Ok(state)
}

/// Pipeline initial state at rest: the closed-form steady profile.
pub fn pipeline_steady_state(params: &PipelineParams, p_in: f64, mfr: f64, segments: usize) -> Result<GridState> {
    steady_state_profile(params, p_in, mfr, segments)
}

/// Scaled backward-Euler residual of a recorded step, re-evaluated from the
/// stored states (used to audit trajectories).
pub fn step_residual(
    net: &GasNetworkSpec,
    traj: &Trajectory,
    boundary: &BoundaryProfile,
    n: usize,
    mode: FrictionMode,
) -> Result<f64> {
    let segments: Vec<usize> = traj.states[0].grids.iter().map(GridState::segments).collect();
    let sys = System::new(net, &segments, mode)?;
    let prev = sys.pack(&traj.states[n - 1].grids, &traj.states[n - 1].node_pressures);
    let cur = sys.pack(&traj.states[n].grids, &traj.states[n].node_pressures);
    let input = sys.step_input(boundary, n - 1, &prev);
    Ok(sys.evaluate(&cur, &input, None)?.amax())
}

/// Total gas held in all pipelines, kg.
pub fn network_linepack(net: &GasNetworkSpec, state: &NetworkState) -> f64 {
    net.pipelines
        .iter()
        .zip(&state.grids)
        .map(|(p, g)| g.linepack(&p.params))
        .sum()
}
