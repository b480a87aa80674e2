mod common;

use common::{model, scenario, SEGMENTS};
use koopgas::dispatch::{assemble_lp, initial_state, verify_solution, DispatchHorizon};
use koopgas::transient_sim::simulate_network;
use koopgas::{solve_dispatch, BoundaryProfile, FrictionMode, GasModel, Scenario};

fn global() -> GasModel {
    GasModel::Global(vec![model().clone()])
}

fn solve(scn: &Scenario, m: &GasModel) -> koopgas::DispatchSolution {
    solve_dispatch(&scn.power, &scn.coupling, &scn.gas, &scn.horizon, m).unwrap()
}

#[test]
fn one_hour_has_four_koopman_blocks() {
    let scn = scenario(1, vec![50.0], 10.0);
    let dlp = assemble_lp(&scn.power, &scn.coupling, &scn.gas, &scn.horizon, &global()).unwrap();
    let n = model().n();
    assert_eq!(dlp.count_rows("koopman"), 4 * n);
    assert_eq!(dlp.count_rows("mass"), 0);
}

#[test]
fn lifted_model_is_smaller_than_the_grid() {
    let scn = scenario(2, vec![50.0; 2], 10.0);
    let g = assemble_lp(&scn.power, &scn.coupling, &scn.gas, &scn.horizon, &global()).unwrap();
    let l = assemble_lp(&scn.power, &scn.coupling, &scn.gas, &scn.horizon, &GasModel::Local { vbar: 1.0 }).unwrap();
    let n = model().n();
    assert_eq!(n, 4);
    assert_eq!(g.gas_vars_per_step(), &[n + 2]);
    assert_eq!(g.gas_rows_per_step(), &[n + 2]);
    assert_eq!(l.gas_vars_per_step(), &[2 * (SEGMENTS + 1)]);
    assert_eq!(l.gas_rows_per_step(), &[2 * SEGMENTS + 2]);
    assert!(g.lp.num_vars() < l.lp.num_vars());
    assert!(g.lp.num_rows() < l.lp.num_rows());
}

#[test]
fn idle_system_costs_nothing() {
    let mut scn = scenario(3, vec![0.0; 3], 0.0);
    scn.gas.initial.withdrawal.insert("outlet".into(), 0.0);
    let sol = solve(&scn, &GasModel::Local { vbar: 1.0 });
    assert!(sol.objective.abs() < 1e-3, "{}", sol.objective);
    for v in sol.generators.values() {
        assert!(v.iter().all(|x| x.abs() < 1e-6));
    }
    assert!(sol.injection["inlet"].iter().all(|m| m.abs() < 1e-6));
}

#[test]
fn single_hour_follows_merit_order() {
    let scn = scenario(1, vec![120.0], 10.0);
    let sol = solve(&scn, &GasModel::Local { vbar: 1.0 });
    let g = |id: &str| sol.generators[id][0];
    assert!((g("G1") - 60.0).abs() < 1e-4);
    assert!((g("GT") - 40.0).abs() < 1e-4);
    assert!((g("G2") - 20.0).abs() < 1e-4);
}

#[test]
fn extraction_is_the_integrated_inlet_flow() {
    let scn = scenario(3, vec![80.0; 3], 10.0);
    for m in [global(), GasModel::Local { vbar: 1.0 }] {
        let sol = solve(&scn, &m);
        let integrated: f64 = sol.pipelines[0].m_in.iter().map(|f| f * sol.dt).sum();
        assert!((sol.total_extraction() - integrated).abs() <= 1e-6 * integrated);
        let hourly: f64 = sol.hourly_extraction("inlet").iter().sum();
        assert!((hourly - integrated).abs() <= 1e-6 * integrated);
    }
}

#[test]
fn more_load_never_costs_less() {
    let light = scenario(3, vec![60.0, 80.0, 70.0], 10.0);
    let heavy = scenario(3, vec![70.0, 95.0, 70.0], 10.0);
    for m in [global(), GasModel::Local { vbar: 1.0 }] {
        let a = solve(&light, &m).objective;
        let b = solve(&heavy, &m).objective;
        assert!(b >= a - 1e-6 * a.abs(), "{b} < {a}");
    }
}

#[test]
fn dispatch_is_reproducible() {
    let scn = scenario(2, vec![90.0, 110.0], 10.0);
    let a = solve(&scn, &global());
    let b = solve(&scn, &global());
    assert_eq!(a.objective, b.objective);
    assert_eq!(a.generators, b.generators);
    assert_eq!(a.pipelines[0].p_out, b.pipelines[0].p_out);
}

#[test]
fn schedules_reverify() {
    let scn = scenario(4, vec![90.0, 110.0, 130.0, 100.0], 10.0);
    for m in [global(), GasModel::Local { vbar: 0.0 }, GasModel::Local { vbar: 2.0 }] {
        let sol = solve(&scn, &m);
        let (worst, at) = verify_solution(&sol, &scn.power, &scn.coupling, &scn.gas, &m).unwrap();
        assert!(worst <= 1e-6, "{} violates {at} by {worst}", m.label());
    }
}

#[test]
fn grid_rows_reproduce_the_simulator() {
    // The local LP's finite-difference rows are the simulator's
    // backward-Euler equations under the same friction model.
    let scn = scenario(3, vec![90.0, 120.0, 100.0], 10.0);
    let vbar = 1.0;
    let m = GasModel::Local { vbar };
    let sol = solve(&scn, &m);
    let init = initial_state(&scn.gas, &m).unwrap();
    let steps = sol.steps();
    let per_hour = sol.steps_per_hour;
    let boundary = BoundaryProfile {
        dt: sol.dt,
        source_pressure: [("inlet".to_string(), (0..steps).map(|s| sol.source_pressure["inlet"][s / per_hour]).collect())]
            .into(),
        withdrawal: [("outlet".to_string(), (0..steps).map(|s| sol.withdrawal["outlet"][s / per_hour]).collect())].into(),
    };
    let net = &scn.gas.network;
    let traj = simulate_network(net, &net.segments(), &boundary, &init.grids, FrictionMode::Local { vbar }).unwrap();
    let pipe = &sol.pipelines[0];
    for s in 1..=steps {
        let g = &traj.states[s].grids[0];
        assert!((g.p_out() - pipe.p_out[s - 1]).abs() <= 1e-6 * g.p_out(), "step {s}");
        assert!((g.m_in() - pipe.m_in[s - 1]).abs() <= 1e-5 * g.m_in().abs().max(1.0), "step {s}");
    }
}

#[test]
fn horizon_must_divide_the_hour() {
    let mut scn = scenario(1, vec![50.0], 10.0);
    scn.horizon = DispatchHorizon { hours: 1, dt: 1000.0 };
    assert!(solve_dispatch(&scn.power, &scn.coupling, &scn.gas, &scn.horizon, &GasModel::Local { vbar: 1.0 }).is_err());
}

#[test]
fn mismatched_model_is_rejected() {
    let scn = scenario(1, vec![50.0], 10.0);
    let mut other = model().clone();
    other.dt = 1800.0;
    let err = assemble_lp(&scn.power, &scn.coupling, &scn.gas, &scn.horizon, &GasModel::Global(vec![other]));
    assert!(matches!(err, Err(koopgas::Error::HorizonMismatch(_))));
}

#[test]
fn stress_network_dispatch_reverifies() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/stress20.json");
    let scn = Scenario::load(&path).unwrap();
    let m = GasModel::Local { vbar: 1.0 };
    let sol = solve(&scn, &m);
    let (viol, label) = verify_solution(&sol, &scn.power, &scn.coupling, &scn.gas, &m).unwrap();
    assert!(viol <= 1e-6, "{viol} at {label}");
    assert_eq!(sol.pipelines.len(), 19);
}
