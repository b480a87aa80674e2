//! Small scenarios shared by the integration tests.
#![allow(dead_code)]

pub mod lp_oracle;

use std::collections::BTreeMap;
use std::sync::OnceLock;

use koopgas::dispatch::{
    Bus, CouplingSpec, DispatchHorizon, GasDispatchSpec, GasFiredLink, Generator, GeneratorKind, InitialGasState,
    PowerSystemSpec, SourceSpec,
};
use koopgas::koopman::train;
use koopgas::{generate_snapshots, ExcitationConfig, GasNetworkSpec, KoopmanModel, PipelineParams, Scenario, TrainConfig};

pub const SEGMENTS: usize = 6;

pub fn pipe() -> PipelineParams {
    PipelineParams::reference()
}

fn unit(id: &str, kind: GeneratorKind, p_max: f64, cost: f64) -> Generator {
    Generator { id: id.into(), bus: "B1".into(), kind, p_min: 0.0, p_max, cost, ramp: None, availability: None }
}

/// One bus, two coal units (60 MW at $20, 100 MW at $60) and a 40 MW gas
/// turbine at $5 burning 0.05 kg/s per MW drawn from the pipeline outlet.
pub fn power(load: Vec<f64>) -> PowerSystemSpec {
    PowerSystemSpec {
        base_mva: 100.0,
        buses: vec![Bus { id: "B1".into(), load }],
        lines: vec![],
        generators: vec![
            unit("G1", GeneratorKind::Coal, 60.0, 20.0),
            unit("G2", GeneratorKind::Coal, 100.0, 60.0),
            unit("GT", GeneratorKind::GasFired, 40.0, 5.0),
        ],
        slack_bus: "B1".into(),
    }
}

pub fn coupling() -> CouplingSpec {
    CouplingSpec {
        gas_fired: vec![GasFiredLink { generator: "GT".into(), gas_node: "outlet".into(), kg_s_per_mw: 0.05 }],
        p2g: vec![],
    }
}

/// The reference pipeline between a source held in [5.5, 6.0] MPa and a
/// load of `gas_load` kg/s.
pub fn gas(hours: usize, gas_load: f64, initial_withdrawal: f64) -> GasDispatchSpec {
    GasDispatchSpec {
        network: GasNetworkSpec::single_pipeline("P", pipe(), SEGMENTS),
        sources: vec![SourceSpec { node: "inlet".into(), p_min: 5.5e6, p_max: 6.0e6, price: 0.25 }],
        loads: BTreeMap::from([("outlet".to_string(), vec![gas_load; hours])]),
        initial: InitialGasState {
            source_pressure: BTreeMap::from([("inlet".to_string(), 5.78e6)]),
            withdrawal: BTreeMap::from([("outlet".to_string(), initial_withdrawal)]),
        },
    }
}

pub fn scenario(hours: usize, load: Vec<f64>, gas_load: f64) -> Scenario {
    Scenario {
        name: "one-pipe".into(),
        description: String::new(),
        horizon: DispatchHorizon { hours, dt: 900.0 },
        power: power(load),
        coupling: coupling(),
        gas: gas(hours, gas_load, gas_load + 1.0),
        models: BTreeMap::new(),
        base_dir: None,
    }
}

/// A model of the reference pipeline trained once per test binary.
pub fn model() -> &'static KoopmanModel {
    static MODEL: OnceLock<KoopmanModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let exc = ExcitationConfig::around(5.78e6, 10.0);
        let data = generate_snapshots("P", &pipe(), SEGMENTS, &exc, 1200, 900.0, 7).unwrap();
        train(&data, &TrainConfig::default()).unwrap().0
    })
}
