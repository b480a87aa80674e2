//! `koopgas` command-line interface.
//!
//! Exit codes: 0 success, 1 domain error (infeasible, diverged, simulated
//! limit violations), 2 usage or configuration error.

mod manifest;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use koopgas::dispatch::verify_solution;
use koopgas::evaluation::{compare_models, nle_evaluate, CompareOptions, NleSettings};
use koopgas::koopman::{train, FitOptions, StabilityConstraint, StabilityMode, TrainReport};
use koopgas::transient_sim::{network_steady_state_with, simulate_network};
use koopgas::{
    generate_snapshots, solve_dispatch, BoundaryProfile, DelayConfig, DispatchSolution, ExcitationConfig,
    FrictionMode, GasModel, KoopmanModel, ObservableSet, PipelineRun, Scenario, SnapshotSet, TrainConfig,
};
use rayon::prelude::*;
use serde_json::json;

use manifest::Manifest;

#[derive(Parser)]
#[command(name = "koopgas", version, about = "Gas network simulation, Koopman surrogates and electricity-gas dispatch")]
struct Cli {
    /// Seed of the data generator; KOOPGAS_SEED overrides it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for per-pipeline and per-scenario work.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the transient simulator.
    Simulate {
        #[command(subcommand)]
        target: SimTarget,
    },
    /// Generate snapshot data for one or all pipelines.
    GenerateData(GenerateArgs),
    /// Fit Koopman models to snapshot files.
    Train(TrainArgs),
    /// Solve the joint dispatch LP.
    Dispatch(DispatchArgs),
    /// Check a dispatch schedule against the nonlinear simulator.
    Evaluate(EvaluateArgs),
    /// Train, dispatch and evaluate global and local models side by side.
    Compare(CompareArgs),
}

#[derive(Subcommand)]
enum SimTarget {
    /// Step experiment on a single pipeline (pipeline run config).
    Pipeline(SimArgs),
    /// Network under the scenario's baseline withdrawals (scenario config).
    Network(SimArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Nonlinear,
    Local,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Nonlinear)]
    mode: Mode,
    /// Average velocity of the local friction model, m/s.
    #[arg(long)]
    vbar: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    /// Scenario or pipeline run config.
    #[arg(long)]
    config: PathBuf,
    /// Pipeline id (scenario configs only); all pipelines when omitted.
    #[arg(long)]
    pipeline: Option<String>,
    #[arg(long, default_value_t = 6400)]
    count: usize,
    /// Snapshot interval, e.g. 15m, 900s or 1h.
    #[arg(long, default_value = "15m", value_parser = parse_duration)]
    dt: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Projection {
    Joint,
    PerBlock,
    Scaled,
}

#[derive(Args)]
struct TrainArgs {
    /// Snapshot CSV files (each with its `.meta.json` sidecar).
    #[arg(long, num_args = 1.., required = true)]
    data: Vec<PathBuf>,
    #[arg(long, default_value_t = 3)]
    dx: usize,
    #[arg(long, default_value_t = 2)]
    du: usize,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    stability: Switch,
    #[arg(long, default_value_t = 0.001)]
    epsilon: f64,
    #[arg(long, value_enum, default_value_t = Projection::Joint)]
    projection: Projection,
    #[arg(long, default_value = "v5a")]
    obs: ObservableSet,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum GasModelArg {
    Global,
    Local,
}

#[derive(Args)]
struct DispatchArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, value_enum)]
    gas_model: GasModelArg,
    #[arg(long)]
    vbar: Option<f64>,
    /// Directory holding `<pipeline id>.json` models; defaults to the
    /// scenario's model references.
    #[arg(long)]
    models: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory written by `dispatch`.
    #[arg(long)]
    solution: PathBuf,
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value_t = 6400)]
    snapshots: usize,
    /// Gas resolutions of the global runs, minutes.
    #[arg(long, value_delimiter = ',', default_value = "15,30,60")]
    resolutions: Vec<u32>,
    /// Average velocities of the local runs, m/s.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    vbars: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

/// Bad invocation detected after parsing (exit code 2).
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Finished run whose result is a domain failure (exit code 1).
#[derive(Debug)]
struct DomainFailure(String);

impl std::fmt::Display for DomainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DomainFailure {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse_duration(s: &str) -> Result<f64, String> {
    let s = s.trim();
    let (num, scale) = if let Some(v) = s.strip_suffix("min") {
        (v, 60.0)
    } else if let Some(v) = s.strip_suffix('m') {
        (v, 60.0)
    } else if let Some(v) = s.strip_suffix('h') {
        (v, 3600.0)
    } else if let Some(v) = s.strip_suffix('s') {
        (v, 1.0)
    } else {
        (s, 1.0)
    };
    let v: f64 = num.trim().parse().map_err(|_| format!("cannot read duration {s:?}"))?;
    if !(v > 0.0) {
        return Err(format!("duration must be positive, got {s:?}"));
    }
    Ok(v * scale)
}

fn friction(mode: Mode, vbar: Option<f64>) -> anyhow::Result<FrictionMode> {
    match (mode, vbar) {
        (Mode::Nonlinear, None) => Ok(FrictionMode::Nonlinear),
        (Mode::Nonlinear, Some(_)) => Err(usage("--vbar only applies to --mode local")),
        (Mode::Local, Some(vbar)) if vbar >= 0.0 => Ok(FrictionMode::Local { vbar }),
        (Mode::Local, Some(vbar)) => Err(usage(format!("--vbar must be nonnegative, got {vbar}"))),
        (Mode::Local, None) => Err(usage("--mode local requires --vbar")),
    }
}

fn mode_label(mode: FrictionMode) -> String {
    match mode {
        FrictionMode::Nonlinear => "nonlinear".into(),
        FrictionMode::Local { vbar } => format!("local(vbar={vbar})"),
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

fn out_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn simulate_pipeline_cmd(args: &SimArgs, m: &mut Manifest) -> anyhow::Result<()> {
    let mode = friction(args.mode, args.vbar)?;
    let run = PipelineRun::load(&args.config)?;
    m.input(&args.config)?;
    let tr = run.simulate(mode)?;
    out_dir(&args.out)?;
    tr.write_pipeline_csv(0, create(&args.out.join("trajectory.csv"))?)?;
    let last = &tr.last().grids[0];
    println!(
        "{}: {} steps of {} s, final p_out {:.1} Pa, final M_in {:.4} kg/s",
        run.name,
        tr.len() - 1,
        tr.dt,
        last.p_out(),
        last.m_in()
    );
    m.settings = json!({ "mode": mode_label(mode), "segments": run.segments(), "dt": run.dt, "hours": run.hours });
    m.finish(&args.out)
}

/// Hourly baseline withdrawals plus the coupling offtakes held at their
/// initial values, sources held at their initial pressures.
fn baseline_boundary(scn: &Scenario) -> anyhow::Result<BoundaryProfile> {
    let per_hour = scn.horizon.steps_per_hour()?;
    let steps = scn.horizon.steps()?;
    let gas = &scn.gas;
    let mut source_pressure = BTreeMap::new();
    let mut withdrawal = BTreeMap::new();
    for node in &gas.network.nodes {
        if let Some(&p) = gas.initial.source_pressure.get(&node.id) {
            source_pressure.insert(node.id.clone(), vec![p; steps]);
        } else {
            let init = gas.initial.withdrawal.get(&node.id).copied().unwrap_or(0.0);
            let offset = init - gas.baseline(&node.id, 0);
            let series = (0..steps).map(|s| gas.baseline(&node.id, s / per_hour) + offset).collect();
            withdrawal.insert(node.id.clone(), series);
        }
    }
    Ok(BoundaryProfile { dt: scn.horizon.dt, source_pressure, withdrawal })
}

fn load_scenario(path: &Path, m: &mut Manifest) -> anyhow::Result<Scenario> {
    let scn = Scenario::load(path)?;
    scn.validate()?;
    m.input(path)?;
    Ok(scn)
}

fn simulate_network_cmd(args: &SimArgs, m: &mut Manifest) -> anyhow::Result<()> {
    let mode = friction(args.mode, args.vbar)?;
    let scn = load_scenario(&args.config, m)?;
    let net = &scn.gas.network;
    let segments = net.segments();
    let init = network_steady_state_with(
        net,
        &segments,
        &scn.gas.initial.source_pressure,
        &scn.gas.initial.withdrawal,
        mode,
    )?;
    let boundary = baseline_boundary(&scn)?;
    let tr = simulate_network(net, &segments, &boundary, &init.grids, mode)?;
    out_dir(&args.out)?;
    tr.write_nodes_csv(create(&args.out.join("nodes.csv"))?)?;
    for (j, id) in tr.pipeline_ids.iter().enumerate() {
        tr.write_pipeline_csv(j, create(&args.out.join(format!("pipeline_{id}.csv")))?)?;
    }
    println!("{}: {} pipelines, {} steps of {} s", scn.name, net.pipelines.len(), tr.len() - 1, tr.dt);
    m.settings = json!({ "mode": mode_label(mode), "segments": segments, "dt": scn.horizon.dt, "hours": scn.horizon.hours });
    m.finish(&args.out)
}

fn generate_cmd(args: &GenerateArgs, seed: u64, parallel: bool, m: &mut Manifest) -> anyhow::Result<()> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| koopgas::Error::Spec(format!("cannot read config {}: {e}", args.config.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| koopgas::Error::Spec(format!("{}: {e}", args.config.display())))?;
    let sets: Vec<SnapshotSet> = if value.get("gas").is_some() {
        let scn = load_scenario(&args.config, m)?;
        match &args.pipeline {
            Some(id) => {
                let j = scn
                    .gas
                    .network
                    .pipeline_index(id)
                    .ok_or_else(|| usage(format!("--pipeline {id} is not in {}", args.config.display())))?;
                let p = &scn.gas.network.pipelines[j];
                let exc = &scn.excitations()?[j];
                vec![generate_snapshots(&p.id, &p.params, p.segments(), exc, args.count, args.dt, seed.wrapping_add(j as u64))?]
            }
            None => scn.generate_training_data(args.count, args.dt, seed, parallel)?,
        }
    } else {
        if args.pipeline.is_some() {
            return Err(usage("--pipeline applies to scenario configs only"));
        }
        let run = PipelineRun::load(&args.config)?;
        m.input(&args.config)?;
        let exc = ExcitationConfig::around(run.inlet_pressure, run.final_mfr);
        vec![generate_snapshots(&run.name, &run.params, run.segments(), &exc, args.count, args.dt, seed)?]
    };
    out_dir(&args.out)?;
    for s in &sets {
        s.save(&args.out.join(format!("{}.csv", s.pipeline_id)))?;
        println!("{}: {} snapshots at {} s", s.pipeline_id, s.len(), s.dt);
    }
    m.settings = json!({ "count": args.count, "dt": args.dt, "pipeline": args.pipeline });
    m.finish(&args.out)
}

fn print_report(id: &str, r: &TrainReport) {
    println!(
        "{id}: train RMSE p {:.3e} M {:.3e} MAPE p {:.4}% M {:.4}% | test RMSE p {:.3e} M {:.3e} MAPE p {:.4}% M {:.4}% | spectral radius {:.6}",
        r.train.rmse[0],
        r.train.rmse[1],
        r.train.mape[0],
        r.train.mape[1],
        r.test.rmse[0],
        r.test.rmse[1],
        r.test.mape[0],
        r.test.mape[1],
        r.spectral_radius
    );
}

fn train_cmd(args: &TrainArgs, parallel: bool, m: &mut Manifest) -> anyhow::Result<()> {
    let delays = DelayConfig::new(args.dx, args.du)?;
    let mode = match args.projection {
        Projection::Joint => StabilityMode::Joint,
        Projection::PerBlock => StabilityMode::PerBlock,
        Projection::Scaled => StabilityMode::Scaled,
    };
    let stability = match args.stability {
        Switch::On => Some(StabilityConstraint { epsilon: args.epsilon, mode }),
        Switch::Off => None,
    };
    let cfg = TrainConfig {
        observables: args.obs,
        delays,
        fit: FitOptions { stability, ..FitOptions::default() },
        train_fraction: args.train_fraction,
    };
    let mut data = Vec::new();
    for path in &args.data {
        data.push(SnapshotSet::load(path).map_err(|e| anyhow!(e).context(format!("loading {}", path.display())))?);
        m.input(path)?;
        m.input(&SnapshotSet::meta_path(path))?;
    }
    let fitted: Vec<(KoopmanModel, TrainReport)> = if parallel {
        data.par_iter().map(|d| train(d, &cfg)).collect::<Result<_, _>>()?
    } else {
        data.iter().map(|d| train(d, &cfg)).collect::<Result<_, _>>()?
    };
    out_dir(&args.out)?;
    let mut reports = BTreeMap::new();
    for (model, report) in &fitted {
        model.save(&args.out.join(format!("{}.json", model.pipeline_id)))?;
        print_report(&model.pipeline_id, report);
        reports.insert(model.pipeline_id.clone(), report.clone());
    }
    fs::write(args.out.join("reports.json"), serde_json::to_string_pretty(&reports)?)?;
    m.settings = json!({
        "dx": args.dx,
        "du": args.du,
        "stability": stability.is_some(),
        "epsilon": args.epsilon,
        "projection": format!("{mode:?}"),
        "observables": args.obs.id(),
        "train_fraction": args.train_fraction,
    });
    m.finish(&args.out)
}

fn gas_model(scn: &Scenario, args: &DispatchArgs, m: &mut Manifest) -> anyhow::Result<GasModel> {
    match (args.gas_model, args.vbar) {
        (GasModelArg::Local, Some(vbar)) if vbar >= 0.0 => Ok(GasModel::Local { vbar }),
        (GasModelArg::Local, Some(vbar)) => Err(usage(format!("--vbar must be nonnegative, got {vbar}"))),
        (GasModelArg::Local, None) => Err(usage("--gas-model local requires --vbar")),
        (GasModelArg::Global, Some(_)) => Err(usage("--vbar only applies to --gas-model local")),
        (GasModelArg::Global, None) => {
            let mut models = Vec::new();
            for p in &scn.gas.network.pipelines {
                let path = match &args.models {
                    Some(dir) => dir.join(format!("{}.json", p.id)),
                    None => {
                        let rel = scn.models.get(&p.id).ok_or_else(|| {
                            koopgas::Error::Spec(format!("scenario names no model file for pipeline {}", p.id))
                        })?;
                        match &scn.base_dir {
                            Some(d) if rel.is_relative() => d.join(rel),
                            _ => rel.clone(),
                        }
                    }
                };
                models.push(KoopmanModel::load(&path).map_err(|e| anyhow!(e).context(format!("loading {}", path.display())))?);
                m.input(&path)?;
            }
            Ok(GasModel::Global(models))
        }
    }
}

fn dispatch_cmd(args: &DispatchArgs, m: &mut Manifest) -> anyhow::Result<()> {
    let scn = load_scenario(&args.scenario, m)?;
    let model = gas_model(&scn, args, m)?;
    let sol = solve_dispatch(&scn.power, &scn.coupling, &scn.gas, &scn.horizon, &model)?;
    let (viol, label) = verify_solution(&sol, &scn.power, &scn.coupling, &scn.gas, &model)?;
    sol.write(&args.out)?;
    println!(
        "{}: objective ${:.2} ({} variables, {} rows, {} iterations, {:.2} s), re-verified to {viol:.1e} (worst: {label})",
        sol.gas_model, sol.objective, sol.stats.variables, sol.stats.rows, sol.stats.iterations, sol.stats.solve_seconds
    );
    m.settings = json!({ "gas_model": sol.gas_model, "hours": sol.hours, "dt": sol.dt });
    m.exclude("timing.json");
    m.finish(&args.out)
}

fn evaluate_cmd(args: &EvaluateArgs, m: &mut Manifest) -> anyhow::Result<()> {
    let scn = load_scenario(&args.scenario, m)?;
    let sol = DispatchSolution::load(&args.solution)
        .map_err(|e| anyhow!(e).context(format!("loading solution from {}", args.solution.display())))?;
    m.input(&args.solution.join("solution.json"))?;
    let settings = NleSettings::default();
    let (report, traj) = nle_evaluate(&sol, &scn.gas, &settings)?;
    out_dir(&args.out)?;
    report.write_json(&args.out.join("report.json"))?;
    traj.write_nodes_csv(create(&args.out.join("simulated_nodes.csv"))?)?;
    println!(
        "{}: pressure MAPE {:.4}% RMSE {:.1} Pa, MFR MAPE {:.4}% RMSE {:.4} kg/s, extraction deviation {:.3} t ({:.3}%)",
        report.gas_model,
        report.pressure_mape,
        report.pressure_rmse,
        report.mfr_mape,
        report.mfr_rmse,
        report.extraction_deviation,
        report.extraction_deviation_pct
    );
    m.settings = json!({ "dt": settings.dt, "violation_tolerance": settings.violation_tolerance });
    m.finish(&args.out)?;
    if let Some(first) = report.violations.first() {
        return Err(DomainFailure(format!(
            "{} simulated limit violations, first: {} {} at step {} ({} vs limit {})",
            report.violations.len(),
            first.element,
            first.bound,
            first.step,
            first.value,
            first.limit
        ))
        .into());
    }
    Ok(())
}

fn compare_cmd(args: &CompareArgs, seed: u64, parallel: bool, m: &mut Manifest) -> anyhow::Result<()> {
    let scn = load_scenario(&args.scenario, m)?;
    let opts = CompareOptions {
        vbars: args.vbars.clone(),
        resolutions: args.resolutions.clone(),
        snapshots: args.snapshots,
        seed,
        parallel,
        ..CompareOptions::default()
    };
    let cmp = compare_models(&scn, &opts)?;
    cmp.tables().write(&args.out)?;
    for (res, r) in &cmp.global {
        println!("global {res} min: pressure MAPE {:.4}%, MFR MAPE {:.4}%, deviation {:.3} t", r.pressure_mape, r.mfr_mape, r.extraction_deviation);
    }
    for (v, r) in &cmp.local {
        println!("local vbar {v}: pressure MAPE {:.4}%, MFR MAPE {:.4}%, deviation {:.3} t", r.pressure_mape, r.mfr_mape, r.extraction_deviation);
    }
    m.settings = json!({ "snapshots": args.snapshots, "resolutions": args.resolutions, "vbars": args.vbars });
    m.finish(&args.out)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let seed = match std::env::var("KOOPGAS_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| usage(format!("KOOPGAS_SEED must be an unsigned integer, got {v:?}")))?,
        Err(_) => cli.seed,
    };
    if cli.jobs == 0 {
        bail!(usage("--jobs must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global().context("cannot start worker threads")?;
    let parallel = cli.jobs > 1;
    let mut m = Manifest::new(seed);
    match &cli.command {
        Command::Simulate { target: SimTarget::Pipeline(a) } => simulate_pipeline_cmd(a, &mut m),
        Command::Simulate { target: SimTarget::Network(a) } => simulate_network_cmd(a, &mut m),
        Command::GenerateData(a) => generate_cmd(a, seed, parallel, &mut m),
        Command::Train(a) => train_cmd(a, parallel, &mut m),
        Command::Dispatch(a) => dispatch_cmd(a, &mut m),
        Command::Evaluate(a) => evaluate_cmd(a, &mut m),
        Command::Compare(a) => compare_cmd(a, seed, parallel, &mut m),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if cause.is::<DomainFailure>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<koopgas::Error>() {
            return if e.is_config_error() { 2 } else { 1 };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::parse_duration;

    #[test]
    fn durations() {
        assert_eq!(parse_duration("15m"), Ok(900.0));
        assert_eq!(parse_duration("15min"), Ok(900.0));
        assert_eq!(parse_duration("1h"), Ok(3600.0));
        assert_eq!(parse_duration("450s"), Ok(450.0));
        assert_eq!(parse_duration("300"), Ok(300.0));
        assert!(parse_duration("0m").is_err());
        assert!(parse_duration("ten").is_err());
    }
}
