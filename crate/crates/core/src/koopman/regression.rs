use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::observables::ObservableSet;
use crate::error::{Error, Result};
use crate::snapshots::SnapshotSet;

/// Number of state and input delays in the lifted predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayConfig {
    pub dx: usize,
    pub du: usize,
}

impl DelayConfig {
    pub fn new(dx: usize, du: usize) -> Result<Self> {
        if dx == 0 {
            return Err(Error::InvalidParams("at least one state delay is required".into()));
        }
        Ok(DelayConfig { dx, du })
    }

    /// Regressor width for lifted dimension `n`: `dx·n + 2·(du + 1)`.
    pub fn width(&self, n: usize) -> usize {
        self.dx * n + 2 * (self.du + 1)
    }

    /// First snapshot index with a complete history.
    pub fn start(&self) -> usize {
        self.dx.max(self.du)
    }
}

/// Least-squares data `Y ≈ Z·Θ`, one row per predicted snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Regression {
    /// rows × N: ψ(xᵗ)
    pub y: DMatrix<f64>,
    /// rows × width: ψ(xᵗ⁻¹) … ψ(xᵗ⁻ᴰˣ), uᵗ … uᵗ⁻ᴰᵘ
    pub z: DMatrix<f64>,
    /// Rows `0..train_rows` form the training set, the rest the test set.
    pub train_rows: usize,
    pub delays: DelayConfig,
    pub observables: ObservableSet,
}

impl Regression {
    pub fn rows(&self) -> usize {
        self.y.nrows()
    }

    pub fn train(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.y.rows(0, self.train_rows).into_owned(), self.z.rows(0, self.train_rows).into_owned())
    }

    pub fn test(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.rows() - self.train_rows;
        (self.y.rows(self.train_rows, n).into_owned(), self.z.rows(self.train_rows, n).into_owned())
    }
}

/// Regressor row for time `t` from lifted states and inputs.
pub(crate) fn regressor_row(psi: &[DVector<f64>], u: &[[f64; 2]], t: usize, delays: DelayConfig) -> Vec<f64> {
    let mut row = Vec::with_capacity(delays.width(psi[0].len()));
    for i in 1..=delays.dx {
        row.extend(psi[t - i].iter());
    }
    for i in 0..=delays.du {
        row.extend_from_slice(&u[t - i]);
    }
    row
}

/// Builds the delay-embedded regression. The train/test boundary falls at
/// snapshot `round(train_fraction·count)`.
pub fn build_regression(
    snapshots: &SnapshotSet,
    observables: ObservableSet,
    delays: DelayConfig,
    train_fraction: f64,
) -> Result<Regression> {
    if delays.dx == 0 {
        return Err(Error::InvalidParams("at least one state delay is required".into()));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidParams(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let count = snapshots.len();
    let start = delays.start();
    if count <= start {
        return Err(Error::InsufficientData(format!(
            "{count} snapshots cannot fill a history of {start} steps"
        )));
    }
    let n = observables.dim();
    let width = delays.width(n);
    let rows = count - start;
    let psi: Vec<DVector<f64>> = snapshots.x.iter().map(|&x| observables.lift(x)).collect();
    let mut y = DMatrix::zeros(rows, n);
    let mut z = DMatrix::zeros(rows, width);
    for r in 0..rows {
        let t = r + start;
        y.row_mut(r).copy_from(&psi[t].transpose());
        for (c, v) in regressor_row(&psi, &snapshots.u, t, delays).into_iter().enumerate() {
            z[(r, c)] = v;
        }
    }
    let split = ((count as f64) * train_fraction).round() as usize;
    let train_rows = split.saturating_sub(start).min(rows);
    Ok(Regression { y, z, train_rows, delays, observables })
}
