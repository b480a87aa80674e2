use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gas_dynamics::PipelineParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    /// Pressure-controlled supply.
    Source,
    Junction,
    /// Prescribed withdrawal.
    Load,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GasNode {
    pub id: String,
    pub role: NodeRole,
    /// Pa
    pub p_min: f64,
    /// Pa
    pub p_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub id: String,
    pub from: String,
    pub to: String,
    pub params: PipelineParams,
    /// Spatial elements; defaults to one per 5 km.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<usize>,
}

impl PipelineSpec {
    pub fn segments(&self) -> usize {
        self.segments.unwrap_or_else(|| self.params.default_segments())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GasNetworkSpec {
    pub name: String,
    pub nodes: Vec<GasNode>,
    pub pipelines: Vec<PipelineSpec>,
}

impl GasNetworkSpec {
    /// A source feeding a load through a single pipeline. Node ids are
    /// `inlet` and `outlet`, the pipeline id is `id`.
    pub fn single_pipeline(id: &str, params: PipelineParams, segments: usize) -> Self {
        GasNetworkSpec {
            name: id.to_string(),
            nodes: vec![
                GasNode {
                    id: "inlet".into(),
                    role: NodeRole::Source,
                    p_min: params.p_min(),
                    p_max: params.p_max(),
                },
                GasNode {
                    id: "outlet".into(),
                    role: NodeRole::Load,
                    p_min: params.p_min(),
                    p_max: params.p_max(),
                },
            ],
            pipelines: vec![PipelineSpec {
                id: id.to_string(),
                from: "inlet".into(),
                to: "outlet".into(),
                params,
                segments: Some(segments),
            }],
        }
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn pipeline_index(&self, id: &str) -> Option<usize> {
        self.pipelines.iter().position(|p| p.id == id)
    }

    pub fn sources(&self) -> impl Iterator<Item = (usize, &GasNode)> {
        self.nodes.iter().enumerate().filter(|(_, n)| n.role == NodeRole::Source)
    }

    pub fn non_sources(&self) -> impl Iterator<Item = (usize, &GasNode)> {
        self.nodes.iter().enumerate().filter(|(_, n)| n.role != NodeRole::Source)
    }

    /// `(from, to)` node indices of every pipeline.
    pub fn endpoints(&self) -> Result<Vec<(usize, usize)>> {
        self.pipelines
            .iter()
            .map(|p| {
                let f = self.node_index(&p.from).ok_or_else(|| {
                    Error::Topology(format!("pipeline {} starts at unknown node {}", p.id, p.from))
                })?;
                let t = self.node_index(&p.to).ok_or_else(|| {
                    Error::Topology(format!("pipeline {} ends at unknown node {}", p.id, p.to))
                })?;
                Ok((f, t))
            })
            .collect()
    }

    pub fn segments(&self) -> Vec<usize> {
        self.pipelines.iter().map(|p| p.segments()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for n in &self.nodes {
            if seen.insert(n.id.as_str(), ()).is_some() {
                return Err(Error::Topology(format!("duplicate node id {}", n.id)));
            }
            if !(n.p_min > 0.0 && n.p_min < n.p_max) {
                return Err(Error::Spec(format!("node {} has invalid pressure bounds", n.id)));
            }
        }
        let mut pseen = BTreeMap::new();
        for p in &self.pipelines {
            if pseen.insert(p.id.as_str(), ()).is_some() {
                return Err(Error::Topology(format!("duplicate pipeline id {}", p.id)));
            }
            if p.segments() == 0 {
                return Err(Error::Spec(format!("pipeline {} needs at least one segment", p.id)));
            }
        }
        let ends = self.endpoints()?;
        if ends.iter().any(|(f, t)| f == t) {
            return Err(Error::Topology("pipeline connects a node to itself".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Topology("network has no nodes".into()));
        }
        if self.sources().next().is_none() {
            return Err(Error::Topology("network has no source node".into()));
        }
        for (i, n) in self.sources() {
            if !ends.iter().any(|(f, _)| *f == i) {
                return Err(Error::Topology(format!("source {} has no outgoing pipeline", n.id)));
            }
        }
        // connectivity
        let mut adj = vec![vec![]; self.nodes.len()];
        for &(f, t) in &ends {
            adj[f].push(t);
            adj[t].push(f);
        }
        let mut visited = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([0usize]);
        visited[0] = true;
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !visited[w] {
                    visited[w] = true;
                    queue.push_back(w);
                }
            }
        }
        if let Some(i) = visited.iter().position(|v| !v) {
            return Err(Error::Topology(format!(
                "network is disconnected: node {} unreachable",
                self.nodes[i].id
            )));
        }
        Ok(())
    }
}
