//! Koopman/EDMD identification of pipeline outlet dynamics.

mod fit;
mod model;
mod observables;
mod regression;

pub use fit::{
    edmd_fit, project_stable, spectral_norm, spectral_norm_sum, split_theta, stack_theta, FitOptions, FitOutcome,
    StabilityConstraint, StabilityMode, DEFAULT_EPSILON, DEFAULT_RIDGE,
};
pub use model::{assemble_companion, spectral_radius, KoopmanModel, StabilityInfo, MODEL_VERSION};
pub use observables::ObservableSet;
pub use regression::{build_regression, DelayConfig, Regression};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::snapshots::SnapshotSet;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub observables: ObservableSet,
    pub delays: DelayConfig,
    pub fit: FitOptions,
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            observables: ObservableSet::default(),
            delays: DelayConfig { dx: 3, du: 2 },
            fit: FitOptions::default(),
            train_fraction: 0.8,
        }
    }
}

/// One-step prediction errors of `(p_out, M_out)` in per-unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneStepErrors {
    pub rows: usize,
    pub rmse: [f64; 2],
    pub max_abs: [f64; 2],
    /// Percent, over rows with a nonzero target.
    pub mape: [f64; 2],
}

impl OneStepErrors {
    pub fn compute(y: &DMatrix<f64>, predicted: &DMatrix<f64>) -> Self {
        let rows = y.nrows();
        let mut rmse = [0.0; 2];
        let mut max_abs = [0.0f64; 2];
        let mut mape = [0.0; 2];
        for c in 0..2 {
            let mut counted = 0;
            for r in 0..rows {
                let e = predicted[(r, c)] - y[(r, c)];
                rmse[c] += e * e;
                max_abs[c] = max_abs[c].max(e.abs());
                if y[(r, c)] != 0.0 {
                    mape[c] += (e / y[(r, c)]).abs();
                    counted += 1;
                }
            }
            rmse[c] = if rows > 0 { (rmse[c] / rows as f64).sqrt() } else { 0.0 };
            mape[c] = if counted > 0 { 100.0 * mape[c] / counted as f64 } else { 0.0 };
        }
        OneStepErrors { rows, rmse, max_abs, mape }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train: OneStepErrors,
    pub test: OneStepErrors,
    /// Training objective `½‖Y − ZΘ‖² + ½·ridge·‖Θ‖²`.
    pub objective: f64,
    pub iterations: usize,
    pub relative_gap: Option<f64>,
    pub spectral_norm_sum: f64,
    pub spectral_radius: f64,
}

/// Lifts, regresses and fits one pipeline's snapshots.
pub fn train(snapshots: &SnapshotSet, cfg: &TrainConfig) -> Result<(KoopmanModel, TrainReport)> {
    let reg = build_regression(snapshots, cfg.observables, cfg.delays, cfg.train_fraction)?;
    let (ytr, ztr) = reg.train();
    let outcome = edmd_fit(&ytr, &ztr, cfg.delays, &cfg.fit)?;
    let model = KoopmanModel::from_theta(
        &snapshots.pipeline_id,
        cfg.observables,
        cfg.delays,
        snapshots.dt,
        snapshots.bases,
        &outcome.theta,
        cfg.fit.stability.map(|s| (s.epsilon, s.mode)),
    )?;
    let (yte, zte) = reg.test();
    let report = TrainReport {
        train: OneStepErrors::compute(&ytr, &model.predict_rows(&ztr)),
        test: OneStepErrors::compute(&yte, &model.predict_rows(&zte)),
        objective: outcome.objective,
        iterations: outcome.iterations,
        relative_gap: outcome.relative_gap,
        spectral_norm_sum: spectral_norm_sum(&model.kx),
        spectral_radius: model.stability.certified_spectral_radius,
    };
    Ok((model, report))
}
