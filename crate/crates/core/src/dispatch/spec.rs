use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{GasNetworkSpec, NodeRole};
use crate::transient_sim::{network_steady_state, NetworkState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Coal,
    GasFired,
    Wind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: String,
    /// MW per hour.
    #[serde(default)]
    pub load: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub id: String,
    pub from: String,
    pub to: String,
    /// p.u. on the system base
    pub reactance: f64,
    /// MW
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub id: String,
    pub bus: String,
    pub kind: GeneratorKind,
    /// MW
    pub p_min: f64,
    /// MW
    pub p_max: f64,
    /// $/MWh
    pub cost: f64,
    /// MW/h; absent means unlimited.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ramp: Option<f64>,
    /// MW per hour (wind only); caps `p_max` hour by hour.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub availability: Option<Vec<f64>>,
}

impl Generator {
    pub fn upper(&self, hour: usize) -> f64 {
        match &self.availability {
            Some(a) => a[hour].min(self.p_max),
            None => self.p_max,
        }
    }
}

fn default_base_mva() -> f64 {
    100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSystemSpec {
    #[serde(default = "default_base_mva")]
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub generators: Vec<Generator>,
    pub slack_bus: String,
}

impl PowerSystemSpec {
    pub fn bus_index(&self, id: &str) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn validate(&self, hours: usize) -> Result<()> {
        if !(self.base_mva > 0.0) {
            return Err(Error::Spec("power base must be positive".into()));
        }
        if self.bus_index(&self.slack_bus).is_none() {
            return Err(Error::Spec(format!("slack bus {} does not exist", self.slack_bus)));
        }
        for b in &self.buses {
            if !b.load.is_empty() && b.load.len() != hours {
                return Err(Error::Spec(format!("bus {} has {} load values for {hours} hours", b.id, b.load.len())));
            }
        }
        let mut adj = vec![vec![]; self.buses.len()];
        for l in &self.lines {
            let (f, t) = (self.bus_index(&l.from), self.bus_index(&l.to));
            let (Some(f), Some(t)) = (f, t) else {
                return Err(Error::Spec(format!("line {} references an unknown bus", l.id)));
            };
            if !(l.reactance > 0.0) || !(l.limit > 0.0) || f == t {
                return Err(Error::Spec(format!("line {} needs positive reactance and limit", l.id)));
            }
            adj[f].push(t);
            adj[t].push(f);
        }
        let mut seen = vec![false; self.buses.len()];
        let mut q = VecDeque::from([0]);
        seen[0] = true;
        while let Some(v) = q.pop_front() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    q.push_back(w);
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Spec(format!("bus {} is not connected", self.buses[i].id)));
        }
        for g in &self.generators {
            if self.bus_index(&g.bus).is_none() {
                return Err(Error::Spec(format!("generator {} sits at unknown bus {}", g.id, g.bus)));
            }
            if !(g.p_min <= g.p_max) || g.p_min < 0.0 {
                return Err(Error::Spec(format!("generator {} has invalid limits", g.id)));
            }
            if let Some(a) = &g.availability {
                if a.len() != hours {
                    return Err(Error::Spec(format!("generator {} availability covers {} hours", g.id, a.len())));
                }
            }
            if g.kind == GeneratorKind::Wind && g.p_min > 0.0 {
                return Err(Error::Spec(format!("wind unit {} must be curtailable to zero", g.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GasFiredLink {
    pub generator: String,
    pub gas_node: String,
    /// kg/s of gas burnt per MW of output.
    pub kg_s_per_mw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct P2gLink {
    pub id: String,
    pub bus: String,
    pub gas_node: String,
    /// kg/s of gas produced per MW consumed.
    pub kg_s_per_mw: f64,
    pub p_min: f64,
    pub p_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CouplingSpec {
    #[serde(default)]
    pub gas_fired: Vec<GasFiredLink>,
    #[serde(default)]
    pub p2g: Vec<P2gLink>,
}

impl CouplingSpec {
    pub fn validate(&self, power: &PowerSystemSpec, gas: &GasNetworkSpec) -> Result<()> {
        for l in &self.gas_fired {
            let g = power
                .generators
                .iter()
                .find(|g| g.id == l.generator)
                .ok_or_else(|| Error::Spec(format!("gas-fired link names unknown generator {}", l.generator)))?;
            if g.kind != GeneratorKind::GasFired {
                return Err(Error::Spec(format!("generator {} is not gas-fired", g.id)));
            }
            if gas.node_index(&l.gas_node).is_none() || !(l.kg_s_per_mw > 0.0) {
                return Err(Error::Spec(format!("gas-fired link of {} is invalid", l.generator)));
            }
        }
        for l in &self.p2g {
            if power.bus_index(&l.bus).is_none() || gas.node_index(&l.gas_node).is_none() {
                return Err(Error::Spec(format!("P2G unit {} references unknown bus or node", l.id)));
            }
            if !(l.kg_s_per_mw > 0.0) || !(0.0 <= l.p_min && l.p_min <= l.p_max) {
                return Err(Error::Spec(format!("P2G unit {} has invalid data", l.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub node: String,
    /// Pa
    pub p_min: f64,
    /// Pa
    pub p_max: f64,
    /// $/kg
    pub price: f64,
}

/// Operating point the network rests at before the horizon starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialGasState {
    /// Pa per source node.
    pub source_pressure: BTreeMap<String, f64>,
    /// kg/s per non-source node, including coupling devices.
    pub withdrawal: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GasDispatchSpec {
    pub network: GasNetworkSpec,
    pub sources: Vec<SourceSpec>,
    /// Baseline withdrawals in kg/s per hour, keyed by node.
    #[serde(default)]
    pub loads: BTreeMap<String, Vec<f64>>,
    pub initial: InitialGasState,
}

impl GasDispatchSpec {
    pub fn validate(&self, hours: usize) -> Result<()> {
        self.network.validate()?;
        for (_, n) in self.network.sources() {
            if !self.sources.iter().any(|s| s.node == n.id) {
                return Err(Error::Spec(format!("source node {} has no source data", n.id)));
            }
        }
        for s in &self.sources {
            match self.network.node_index(&s.node) {
                Some(i) if self.network.nodes[i].role == NodeRole::Source => {}
                _ => return Err(Error::Spec(format!("source data for non-source node {}", s.node))),
            }
            if !(s.p_min > 0.0 && s.p_min <= s.p_max) {
                return Err(Error::Spec(format!("source {} has invalid pressure limits", s.node)));
            }
        }
        for (id, l) in &self.loads {
            if self.network.node_index(id).is_none() {
                return Err(Error::Spec(format!("load profile at unknown node {id}")));
            }
            if l.len() != hours {
                return Err(Error::Spec(format!("load profile at {id} covers {} of {hours} hours", l.len())));
            }
        }
        Ok(())
    }

    pub fn source(&self, node: &str) -> Option<&SourceSpec> {
        self.sources.iter().find(|s| s.node == node)
    }

    /// Baseline withdrawal at `node` during `hour`, kg/s.
    pub fn baseline(&self, node: &str, hour: usize) -> f64 {
        self.loads.get(node).map_or(0.0, |l| l[hour])
    }

    /// Converged nonlinear steady state at the initial operating point.
    pub fn initial_state(&self) -> Result<NetworkState> {
        network_steady_state(
            &self.network,
            &self.network.segments(),
            &self.initial.source_pressure,
            &self.initial.withdrawal,
        )
    }
}

/// Dispatch horizon: hourly controls, gas dynamics at `dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispatchHorizon {
    pub hours: usize,
    /// Gas model step, seconds; must divide one hour.
    pub dt: f64,
}

impl Default for DispatchHorizon {
    fn default() -> Self {
        DispatchHorizon { hours: 24, dt: 900.0 }
    }
}

impl DispatchHorizon {
    pub fn steps_per_hour(&self) -> Result<usize> {
        let k = 3600.0 / self.dt;
        if !(self.dt > 0.0) || (k - k.round()).abs() > 1e-9 || k.round() < 1.0 {
            return Err(Error::Spec(format!("gas step {} s does not divide one hour", self.dt)));
        }
        Ok(k.round() as usize)
    }

    pub fn steps(&self) -> Result<usize> {
        Ok(self.hours * self.steps_per_hour()?)
    }

    /// Hour containing step `s` (1-based).
    pub fn hour_of(&self, s: usize) -> usize {
        let k = (3600.0 / self.dt).round() as usize;
        (s - 1) / k
    }
}
