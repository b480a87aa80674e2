use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CouplingSpec, DispatchLp, GasDispatchSpec, GasModel, PowerSystemSpec, COST_SCALE};
use crate::error::Result;
use crate::lp::LpSolution;
use crate::units::Bases;

/// Boundary and internal trajectory of one pipeline over the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSchedule {
    pub id: String,
    /// Pa, one value per gas step.
    pub p_in: Vec<f64>,
    /// kg/s
    pub m_in: Vec<f64>,
    /// Pa
    pub p_out: Vec<f64>,
    /// kg/s
    pub m_out: Vec<f64>,
    /// Per-unit model state per step: the lifted vector ψ for Koopman
    /// models, `[p₀…p_K, M₀…M_K]` for the finite-difference grid.
    pub states: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SolveStats {
    pub variables: usize,
    pub rows: usize,
    pub gas_vars_per_pipeline_step: Vec<usize>,
    pub gas_rows_per_pipeline_step: Vec<usize>,
    pub primal_residual: f64,
    pub relative_gap: f64,
    pub iterations: u32,
    /// Wall-clock times are kept out of `solution.json` so that repeated
    /// runs write identical files; [`DispatchSolution::write`] puts them in
    /// `timing.json`.
    #[serde(skip)]
    pub solve_seconds: f64,
    #[serde(skip)]
    pub assembly_seconds: f64,
    pub status: String,
}

/// Dispatch schedule in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchSolution {
    pub gas_model: String,
    pub hours: usize,
    /// Gas step, seconds.
    pub dt: f64,
    pub steps_per_hour: usize,
    pub bases: Bases,
    pub base_mva: f64,
    /// MW per hour.
    pub generators: BTreeMap<String, Vec<f64>>,
    /// MW per hour.
    pub p2g: BTreeMap<String, Vec<f64>>,
    /// rad per hour.
    pub angles: BTreeMap<String, Vec<f64>>,
    /// MW per hour, positive from `from` to `to`.
    pub line_flows: BTreeMap<String, Vec<f64>>,
    /// Pa per hour at source nodes.
    pub source_pressure: BTreeMap<String, Vec<f64>>,
    /// kg/s per hour at non-source nodes (baseline plus coupling devices).
    pub withdrawal: BTreeMap<String, Vec<f64>>,
    /// Pa per step at every node.
    pub node_pressure: BTreeMap<String, Vec<f64>>,
    /// kg/s per step at source nodes.
    pub injection: BTreeMap<String, Vec<f64>>,
    pub pipelines: Vec<PipelineSchedule>,
    /// $
    pub objective: f64,
    pub generation_cost: f64,
    pub gas_cost: f64,
    pub stats: SolveStats,
}

/// Mean of each consecutive block of `per_hour` values.
pub fn hourly_average(values: &[f64], per_hour: usize) -> Vec<f64> {
    values.chunks(per_hour).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

impl DispatchSolution {
    pub fn steps(&self) -> usize {
        self.hours * self.steps_per_hour
    }

    pub fn pipeline(&self, id: &str) -> Option<&PipelineSchedule> {
        self.pipelines.iter().find(|p| p.id == id)
    }

    /// Planned gas taken from `node` in each hour, kg.
    pub fn hourly_extraction(&self, node: &str) -> Vec<f64> {
        self.injection
            .get(node)
            .map(|v| v.chunks(self.steps_per_hour).map(|c| c.iter().sum::<f64>() * self.dt).collect())
            .unwrap_or_default()
    }

    /// Planned gas taken from all sources over the horizon, kg.
    pub fn total_extraction(&self) -> f64 {
        self.injection.values().flatten().sum::<f64>() * self.dt
    }

    /// Writes `solution.json`, `summary.json`, `hourly.csv`, `gas_steps.csv`
    /// and `timing.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("solution.json"), serde_json::to_string_pretty(self)?)?;
        let summary = serde_json::json!({
            "gas_model": self.gas_model,
            "objective": self.objective,
            "generation_cost": self.generation_cost,
            "gas_cost": self.gas_cost,
            "total_extraction_kg": self.total_extraction(),
            "stats": self.stats,
        });
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        let timing = serde_json::json!({
            "assembly_seconds": self.stats.assembly_seconds,
            "solve_seconds": self.stats.solve_seconds,
        });
        fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&timing)?)?;

        let mut wr = csv::Writer::from_path(dir.join("hourly.csv"))?;
        let mut header = vec!["hour".to_string()];
        let groups: [(&str, &BTreeMap<String, Vec<f64>>); 5] = [
            ("gen", &self.generators),
            ("p2g", &self.p2g),
            ("flow", &self.line_flows),
            ("p_src", &self.source_pressure),
            ("w", &self.withdrawal),
        ];
        for (tag, map) in &groups {
            header.extend(map.keys().map(|k| format!("{tag}_{k}")));
        }
        wr.write_record(&header)?;
        for h in 0..self.hours {
            let mut row = vec![h.to_string()];
            for (_, map) in &groups {
                row.extend(map.values().map(|v| v[h].to_string()));
            }
            wr.write_record(&row)?;
        }
        wr.flush()?;

        let mut wr = csv::Writer::from_path(dir.join("gas_steps.csv"))?;
        let mut header = vec!["t".to_string()];
        for p in &self.pipelines {
            for q in ["p_in", "m_in", "p_out", "m_out"] {
                header.push(format!("{q}_{}", p.id));
            }
        }
        header.extend(self.node_pressure.keys().map(|k| format!("p_{k}")));
        header.extend(self.injection.keys().map(|k| format!("inj_{k}")));
        wr.write_record(&header)?;
        for s in 0..self.steps() {
            let mut row = vec![((s + 1) as f64 * self.dt).to_string()];
            for p in &self.pipelines {
                row.extend([p.p_in[s], p.m_in[s], p.p_out[s], p.m_out[s]].map(|v| v.to_string()));
            }
            row.extend(self.node_pressure.values().map(|v| v[s].to_string()));
            row.extend(self.injection.values().map(|v| v[s].to_string()));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads `solution.json` from a directory written by [`write`](Self::write).
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("solution.json"))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub(super) fn extract(
    dlp: &DispatchLp,
    raw: &LpSolution,
    power: &PowerSystemSpec,
    coupling: &CouplingSpec,
    gas: &GasDispatchSpec,
    model: &GasModel,
) -> DispatchSolution {
    let x = &raw.x;
    let l = &dlp.layout;
    let b = dlp.bases;
    let s_base = power.base_mva;
    let hourly = |idx: &dyn Fn(usize) -> usize, scale: f64| -> Vec<f64> {
        (0..l.hours).map(|h| x[idx(h)] * scale).collect()
    };

    let generators = power
        .generators
        .iter()
        .enumerate()
        .map(|(g, unit)| (unit.id.clone(), hourly(&|h| l.gen[h][g], s_base)))
        .collect();
    let p2g = coupling
        .p2g
        .iter()
        .enumerate()
        .map(|(u, unit)| (unit.id.clone(), hourly(&|h| l.p2g[h][u], s_base)))
        .collect();
    let angles: BTreeMap<String, Vec<f64>> = power
        .buses
        .iter()
        .enumerate()
        .map(|(i, bus)| (bus.id.clone(), hourly(&|h| l.theta[h][i], 1.0)))
        .collect();
    let line_flows = power
        .lines
        .iter()
        .map(|line| {
            let (i, j) = (&angles[&line.from], &angles[&line.to]);
            let f = (0..l.hours).map(|h| (i[h] - j[h]) / line.reactance * s_base).collect();
            (line.id.clone(), f)
        })
        .collect();

    let net = &gas.network;
    let mut source_pressure = BTreeMap::new();
    let mut withdrawal = BTreeMap::new();
    let mut node_pressure = BTreeMap::new();
    let mut injection = BTreeMap::new();
    for (i, node) in net.nodes.iter().enumerate() {
        if l.source_p[0][i].is_some() {
            source_pressure.insert(node.id.clone(), hourly(&|h| l.source_p[h][i].unwrap(), b.pressure));
            injection.insert(
                node.id.clone(),
                (0..l.steps).map(|s| x[l.injection[s][i].unwrap()] * b.mfr).collect::<Vec<f64>>(),
            );
        } else {
            withdrawal.insert(node.id.clone(), hourly(&|h| l.withdrawal[h][i].unwrap(), b.mfr));
        }
        node_pressure.insert(node.id.clone(), (0..l.steps).map(|s| x[l.node_p[s][i]] * b.pressure).collect());
    }

    let pipelines = net
        .pipelines
        .iter()
        .zip(&l.pipes)
        .map(|(p, pv)| {
            let series = |f: &dyn Fn(usize) -> usize, scale: f64| -> Vec<f64> {
                (1..=l.steps).map(|s| x[f(s)] * scale).collect()
            };
            PipelineSchedule {
                id: p.id.clone(),
                p_in: series(&|s| pv.p_in(s), b.pressure),
                m_in: series(&|s| pv.m_in(s), b.mfr),
                p_out: series(&|s| pv.p_out(s), b.pressure),
                m_out: series(&|s| pv.m_out(s), b.mfr),
                states: (1..=l.steps).map(|s| pv.internal(s).into_iter().map(|v| x[v]).collect()).collect(),
            }
        })
        .collect();

    let generation_cost: f64 = power
        .generators
        .iter()
        .enumerate()
        .map(|(g, unit)| (0..l.hours).map(|h| x[l.gen[h][g]] * s_base * unit.cost).sum::<f64>())
        .sum();
    let gas_cost: f64 = injection
        .iter()
        .map(|(node, v)| gas.source(node).unwrap().price * v.iter().sum::<f64>() * l.dt)
        .sum();

    let cert = &raw.certificate;
    DispatchSolution {
        gas_model: model.label(),
        hours: l.hours,
        dt: l.dt,
        steps_per_hour: l.steps_per_hour,
        bases: b,
        base_mva: s_base,
        generators,
        p2g,
        angles,
        line_flows,
        source_pressure,
        withdrawal,
        node_pressure,
        injection,
        pipelines,
        objective: raw.objective * COST_SCALE,
        generation_cost,
        gas_cost,
        stats: SolveStats {
            variables: dlp.lp.num_vars(),
            rows: dlp.lp.num_rows(),
            gas_vars_per_pipeline_step: l.gas_vars_per_step.clone(),
            gas_rows_per_pipeline_step: l.gas_rows_per_step.clone(),
            primal_residual: cert.primal_residual,
            relative_gap: cert.relative_gap,
            iterations: cert.iterations,
            solve_seconds: cert.solve_seconds,
            assembly_seconds: 0.0,
            status: cert.status.clone(),
        },
    }
}
