//! Re-checks a stored schedule against the dispatch constraints, working from
//! the physical quantities rather than the assembled LP matrix.

use super::{initial_state, CouplingSpec, DispatchHorizon, DispatchSolution, GasDispatchSpec, GasModel, PowerSystemSpec};
use crate::error::{Error, Result};
use crate::network::NodeRole;

/// Running maximum of scaled violations, `|lhs − rhs| / (1 + |rhs|)`.
#[derive(Default)]
struct Audit {
    worst: f64,
    label: String,
}

impl Audit {
    fn eq(&mut self, lhs: f64, rhs: f64, label: impl FnOnce() -> String) {
        self.note((lhs - rhs).abs() / (1.0 + rhs.abs()), label);
    }

    fn within(&mut self, v: f64, lo: f64, hi: f64, label: impl FnOnce() -> String) {
        let viol = if v < lo {
            (lo - v) / (1.0 + lo.abs())
        } else if v > hi {
            (v - hi) / (1.0 + hi.abs())
        } else {
            0.0
        };
        self.note(viol, label);
    }

    fn note(&mut self, viol: f64, label: impl FnOnce() -> String) {
        if !(viol <= self.worst) {
            self.worst = if viol.is_nan() { f64::INFINITY } else { viol };
            self.label = label();
        }
    }
}

/// Largest scaled constraint violation of `sol`, with the offending
/// constraint's description. Quantities are compared in the per-unit scaling
/// of the LP.
pub fn verify_solution(
    sol: &DispatchSolution,
    power: &PowerSystemSpec,
    coupling: &CouplingSpec,
    gas: &GasDispatchSpec,
    model: &GasModel,
) -> Result<(f64, String)> {
    let horizon = DispatchHorizon { hours: sol.hours, dt: sol.dt };
    let sph = horizon.steps_per_hour()?;
    if sph != sol.steps_per_hour {
        return Err(Error::HorizonMismatch("steps per hour disagree with the gas step".into()));
    }
    let steps = sol.steps();
    let s_base = power.base_mva;
    let (pb, mb) = (sol.bases.pressure, sol.bases.mfr);
    let mut a = Audit::default();
    let missing = |what: &str| Error::Spec(format!("solution lacks {what}"));

    for h in 0..sol.hours {
        let mut net_inj = vec![0.0; power.buses.len()];
        for g in &power.generators {
            let v = sol.generators.get(&g.id).ok_or_else(|| missing(&g.id))?[h] / s_base;
            a.within(v, g.p_min / s_base, g.upper(h).max(g.p_min) / s_base, || format!("gen {} hour {h}", g.id));
            net_inj[power.bus_index(&g.bus).unwrap()] += v;
            if let (Some(r), true) = (g.ramp, h > 0) {
                let prev = sol.generators[&g.id][h - 1] / s_base;
                a.within(v - prev, -r / s_base, r / s_base, || format!("ramp {} hour {h}", g.id));
            }
        }
        for u in &coupling.p2g {
            let v = sol.p2g.get(&u.id).ok_or_else(|| missing(&u.id))?[h] / s_base;
            a.within(v, u.p_min / s_base, u.p_max / s_base, || format!("p2g {} hour {h}", u.id));
            net_inj[power.bus_index(&u.bus).unwrap()] -= v;
        }
        let theta = |b: &str| sol.angles.get(b).map(|v| v[h]).ok_or_else(|| missing(b));
        a.eq(theta(&power.slack_bus)?, 0.0, || format!("slack angle hour {h}"));
        for l in &power.lines {
            let f = (theta(&l.from)? - theta(&l.to)?) / l.reactance;
            a.within(f, -l.limit / s_base, l.limit / s_base, || format!("line {} hour {h}", l.id));
            net_inj[power.bus_index(&l.from).unwrap()] -= f;
            net_inj[power.bus_index(&l.to).unwrap()] += f;
        }
        for (i, bus) in power.buses.iter().enumerate() {
            let load = bus.load.get(h).copied().unwrap_or(0.0) / s_base;
            a.eq(net_inj[i], load, || format!("bus balance {} hour {h}", bus.id));
        }
    }

    let net = &gas.network;
    let ends = net.endpoints()?;
    let pipes: Vec<_> = net
        .pipelines
        .iter()
        .map(|p| sol.pipeline(&p.id).ok_or_else(|| missing(&p.id)))
        .collect::<Result<_>>()?;

    for (i, node) in net.nodes.iter().enumerate() {
        let np = sol.node_pressure.get(&node.id).ok_or_else(|| missing(&node.id))?;
        if node.role == NodeRole::Source {
            let src = gas.source(&node.id).unwrap();
            let sp = sol.source_pressure.get(&node.id).ok_or_else(|| missing(&node.id))?;
            let inj = sol.injection.get(&node.id).ok_or_else(|| missing(&node.id))?;
            for h in 0..sol.hours {
                let lo = src.p_min.max(node.p_min) / pb;
                let hi = src.p_max.min(node.p_max) / pb;
                a.within(sp[h] / pb, lo, hi, || format!("source pressure {} hour {h}", node.id));
            }
            for s in 0..steps {
                a.eq(np[s] / pb, sp[s / sph] / pb, || format!("source hold {} step {}", node.id, s + 1));
                a.within(inj[s] / mb, 0.0, f64::INFINITY, || format!("injection {} step {}", node.id, s + 1));
            }
        } else {
            let w = sol.withdrawal.get(&node.id).ok_or_else(|| missing(&node.id))?;
            for h in 0..sol.hours {
                let mut expect = gas.baseline(&node.id, h);
                for l in coupling.gas_fired.iter().filter(|l| l.gas_node == node.id) {
                    expect += l.kg_s_per_mw * sol.generators[&l.generator][h];
                }
                for l in coupling.p2g.iter().filter(|l| l.gas_node == node.id) {
                    expect -= l.kg_s_per_mw * sol.p2g[&l.id][h];
                }
                a.eq(w[h] / mb, expect / mb, || format!("withdrawal {} hour {h}", node.id));
            }
            for s in 0..steps {
                a.within(np[s] / pb, node.p_min / pb, node.p_max / pb, || format!("pressure {} step {}", node.id, s + 1));
            }
        }
        for s in 0..steps {
            let mut bal = 0.0;
            for (j, &(f, t)) in ends.iter().enumerate() {
                if t == i {
                    bal += pipes[j].m_out[s];
                }
                if f == i {
                    bal -= pipes[j].m_in[s];
                }
            }
            if let Some(inj) = sol.injection.get(&node.id) {
                bal += inj[s];
            }
            if let Some(w) = sol.withdrawal.get(&node.id) {
                bal -= w[s / sph];
            }
            a.eq(bal / mb, 0.0, || format!("node balance {} step {}", node.id, s + 1));
        }
    }

    let init = initial_state(gas, model)?;
    for (j, pipe) in net.pipelines.iter().enumerate() {
        let ps = pipes[j];
        let params = &pipe.params;
        let (f, t) = ends[j];
        let (plo, phi) = (params.p_min() / pb, params.p_max() / pb);
        let (mlo, mhi) = (params.mfr_min() / mb, params.mfr_max() / mb);
        let pf = &sol.node_pressure[&net.nodes[f].id];
        let pt = &sol.node_pressure[&net.nodes[t].id];
        if ps.states.len() != steps || ps.p_in.len() != steps {
            return Err(Error::HorizonMismatch(format!("pipeline {} covers the wrong number of steps", pipe.id)));
        }
        for s in 0..steps {
            let lbl = |q: &str| format!("{q} {} step {}", pipe.id, s + 1);
            a.within(ps.p_in[s] / pb, plo, phi, || lbl("p_in"));
            a.within(ps.p_out[s] / pb, plo, phi, || lbl("p_out"));
            a.within(ps.m_in[s] / mb, mlo, mhi, || lbl("m_in"));
            a.within(ps.m_out[s] / mb, mlo, mhi, || lbl("m_out"));
            a.eq(ps.p_in[s] / pb, pf[s] / pb, || lbl("inlet continuity"));
            a.eq(ps.p_out[s] / pb, pt[s] / pb, || lbl("outlet continuity"));
        }
        let g0 = &init.grids[j];
        match model {
            GasModel::Global(models) => {
                let m = &models[j];
                let n = m.n();
                let psi0: Vec<f64> = m
                    .observables
                    .lift([g0.p_out() / pb, g0.m_out() / mb])
                    .iter()
                    .copied()
                    .collect();
                let u0 = [g0.p_in() / pb, g0.m_in() / mb];
                let psi = |s: usize| -> &[f64] { if s == 0 { &psi0 } else { &ps.states[s - 1] } };
                let u = |s: usize| -> [f64; 2] {
                    if s == 0 { u0 } else { [ps.p_in[s - 1] / pb, ps.m_in[s - 1] / mb] }
                };
                for s in 1..=steps {
                    let cur = psi(s);
                    if cur.len() != n {
                        return Err(Error::DimensionMismatch(format!("lifted state of {} has length {}", pipe.id, cur.len())));
                    }
                    a.eq(cur[0], ps.p_out[s - 1] / pb, || format!("extracted pressure {} step {s}", pipe.id));
                    a.eq(cur[1], ps.m_out[s - 1] / mb, || format!("extracted flow {} step {s}", pipe.id));
                    for r in 0..n {
                        let mut pred = 0.0;
                        for i in 1..=m.delays.dx {
                            let prev = psi(s.saturating_sub(i));
                            pred += (0..n).map(|c| m.kx[i - 1][(r, c)] * prev[c]).sum::<f64>();
                        }
                        for i in 0..=m.delays.du {
                            let ui = u(s.saturating_sub(i));
                            pred += m.ku[i][(r, 0)] * ui[0] + m.ku[i][(r, 1)] * ui[1];
                        }
                        a.eq(cur[r], pred, || format!("koopman row {r} {} step {s}", pipe.id));
                    }
                }
            }
            GasModel::Local { vbar } => {
                let k = pipe.segments();
                let dx = params.length() / k as f64;
                let area = params.area();
                let storage = params.linepack_per_pascal(dx);
                let kf = params.friction_factor() * vbar / (4.0 * params.diameter());
                let prev0: Vec<f64> = g0
                    .pressures
                    .iter()
                    .map(|p| p / pb)
                    .chain(g0.mfrs.iter().map(|m| m / mb))
                    .collect();
                for s in 1..=steps {
                    let cur = &ps.states[s - 1];
                    let prev = if s == 1 { &prev0 } else { &ps.states[s - 2] };
                    if cur.len() != 2 * (k + 1) {
                        return Err(Error::DimensionMismatch(format!("grid state of {} has length {}", pipe.id, cur.len())));
                    }
                    let (p, m) = cur.split_at(k + 1);
                    let (pp, mp) = prev.split_at(k + 1);
                    a.eq(p[0], ps.p_in[s - 1] / pb, || format!("grid inlet pressure {} step {s}", pipe.id));
                    a.eq(p[k], ps.p_out[s - 1] / pb, || format!("grid outlet pressure {} step {s}", pipe.id));
                    a.eq(m[0], ps.m_in[s - 1] / mb, || format!("grid inlet flow {} step {s}", pipe.id));
                    a.eq(m[k], ps.m_out[s - 1] / mb, || format!("grid outlet flow {} step {s}", pipe.id));
                    for e in 1..=k {
                        // SI residuals, rescaled to the LP's per-unit rows
                        let mass = (m[e] - m[e - 1]) * mb + (p[e] - pp[e]) * pb * storage / sol.dt;
                        a.eq(mass / mb, 0.0, || format!("mass {} element {e} step {s}", pipe.id));
                        let mom = (p[e] - p[e - 1]) * pb
                            + kf * (m[e] + m[e - 1]) * mb * dx / area
                            + (m[e] - mp[e]) * mb * dx / (sol.dt * area);
                        a.eq(mom / pb, 0.0, || format!("momentum {} element {e} step {s}", pipe.id));
                    }
                }
            }
        }
    }
    Ok((a.worst, a.label))
}
