use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Schur};
use serde::{Deserialize, Serialize};

use super::fit::{split_theta, stack_theta, StabilityMode};
use super::observables::ObservableSet;
use super::regression::{regressor_row, DelayConfig};
use crate::error::{Error, Result};
use crate::units::Bases;

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityInfo {
    pub enabled: bool,
    pub epsilon: f64,
    pub mode: StabilityMode,
    pub certified_spectral_radius: f64,
}

/// Delay-embedded linear predictor of one pipeline in lifted coordinates:
/// `ψᵗ = Σᵢ K_x^i ψᵗ⁻ⁱ + Σᵢ K_u^i uᵗ⁻ⁱ`.
#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanModel {
    pub pipeline_id: String,
    pub observables: ObservableSet,
    pub delays: DelayConfig,
    pub dt: f64,
    pub bases: Bases,
    /// `K_x^1 … K_x^(D_x)`, each N × N.
    pub kx: Vec<DMatrix<f64>>,
    /// `K_u^0 … K_u^(D_u)`, each N × 2.
    pub ku: Vec<DMatrix<f64>>,
    pub stability: StabilityInfo,
}

impl KoopmanModel {
    /// Builds a model from stacked coefficients and certifies its companion matrix.
    pub fn from_theta(
        pipeline_id: &str,
        observables: ObservableSet,
        delays: DelayConfig,
        dt: f64,
        bases: Bases,
        theta: &DMatrix<f64>,
        stability: Option<(f64, StabilityMode)>,
    ) -> Result<Self> {
        let n = observables.dim();
        if theta.ncols() != n || theta.nrows() != delays.width(n) {
            return Err(Error::DimensionMismatch(format!(
                "coefficients are {}×{}, expected {}×{n}",
                theta.nrows(),
                theta.ncols(),
                delays.width(n)
            )));
        }
        let (kx, ku) = split_theta(theta, delays, n);
        let mut model = KoopmanModel {
            pipeline_id: pipeline_id.to_string(),
            observables,
            delays,
            dt,
            bases,
            kx,
            ku,
            stability: StabilityInfo {
                enabled: stability.is_some(),
                epsilon: stability.map_or(0.0, |s| s.0),
                mode: stability.map_or(StabilityMode::default(), |s| s.1),
                certified_spectral_radius: f64::NAN,
            },
        };
        let rho = spectral_radius(&model.companion());
        model.stability.certified_spectral_radius = rho;
        if model.stability.enabled && !(rho < 1.0) {
            return Err(Error::StabilityCertificate(rho));
        }
        Ok(model)
    }

    pub fn n(&self) -> usize {
        self.observables.dim()
    }

    pub fn theta(&self) -> DMatrix<f64> {
        stack_theta(&self.kx, &self.ku)
    }

    /// Block-companion system matrix (N·D_x square).
    pub fn companion(&self) -> DMatrix<f64> {
        assemble_companion(&self.kx)
    }

    /// Lifted steady state for a constant input `u`, or None when `I − ΣK_x`
    /// is singular.
    pub fn steady_lifted(&self, u: [f64; 2]) -> Option<DVector<f64>> {
        let n = self.n();
        let mut a = DMatrix::<f64>::identity(n, n);
        for k in &self.kx {
            a -= k;
        }
        let uv = DVector::from_row_slice(&u);
        let rhs = self.ku.iter().fold(DVector::zeros(n), |acc, k| acc + k * &uv);
        a.lu().solve(&rhs)
    }

    /// One-step predictions `Z·Θ`.
    pub fn predict_rows(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        z * self.theta()
    }

    /// Rolls the predictor forward.
    ///
    /// `psi_history[i]` is `ψ` at `i + 1` steps before the first prediction;
    /// `u_history[i]` is the input `i + 1` steps before it. `inputs[k]` is the
    /// input at prediction step `k`.
    pub fn predict(&self, psi_history: &[DVector<f64>], u_history: &[[f64; 2]], inputs: &[[f64; 2]]) -> Result<Vec<DVector<f64>>> {
        let (dx, du) = (self.delays.dx, self.delays.du);
        if psi_history.len() != dx {
            return Err(Error::LengthMismatch { left: psi_history.len(), right: dx });
        }
        if u_history.len() != du {
            return Err(Error::LengthMismatch { left: u_history.len(), right: du });
        }
        let n = self.n();
        // chronological buffers
        let mut psi: Vec<DVector<f64>> = psi_history.iter().rev().cloned().collect();
        let mut u: Vec<[f64; 2]> = u_history.iter().rev().cloned().collect();
        let offset_psi = psi.len();
        let offset_u = u.len();
        let mut out = Vec::with_capacity(inputs.len());
        for (k, &uk) in inputs.iter().enumerate() {
            u.push(uk);
            let mut next = DVector::zeros(n);
            for i in 1..=dx {
                next += &self.kx[i - 1] * &psi[offset_psi + k - i];
            }
            for i in 0..=du {
                let ui = u[offset_u + k - i];
                next += &self.ku[i] * DVector::from_row_slice(&ui);
            }
            psi.push(next.clone());
            out.push(next);
        }
        Ok(out)
    }

    /// Zero-input response of the stacked delay state, returning its norm at
    /// every step (entry 0 is the initial norm).
    pub fn free_response_norms(&self, psi_history: &[DVector<f64>], steps: usize) -> Result<Vec<f64>> {
        let a = self.companion();
        let mut s = DVector::zeros(a.nrows());
        let n = self.n();
        if psi_history.len() != self.delays.dx {
            return Err(Error::LengthMismatch { left: psi_history.len(), right: self.delays.dx });
        }
        for (i, p) in psi_history.iter().enumerate() {
            s.rows_mut(i * n, n).copy_from(p);
        }
        let mut norms = vec![s.norm()];
        for _ in 0..steps {
            s = &a * s;
            norms.push(s.norm());
        }
        Ok(norms)
    }

    /// Regressor row at time `t` of lifted/input series (helper for callers
    /// assembling their own data).
    pub fn regressor(&self, psi: &[DVector<f64>], u: &[[f64; 2]], t: usize) -> DVector<f64> {
        DVector::from_vec(regressor_row(psi, u, t, self.delays))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile::from(self);
        serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), &file)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        Self::from_json(value)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile::from(self))?)
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let version = value
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::SchemaMismatch("model file has no version".into()))?;
        if version != MODEL_VERSION as u64 {
            return Err(Error::Version { expected: MODEL_VERSION, actual: version as u32 });
        }
        match value.get("observable_set") {
            Some(serde_json::Value::String(_)) => {}
            _ => return Err(Error::SchemaMismatch("model file has no observable_set".into())),
        }
        let file: ModelFile = serde_json::from_value(value).map_err(|e| Error::SchemaMismatch(e.to_string()))?;
        file.into_model()
    }
}

/// Standard block-companion form: `[K_x^1 … K_x^D]` on top, identities on the
/// block sub-diagonal.
pub fn assemble_companion(kx: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n = kx[0].nrows();
    let d = kx.len();
    let mut a = DMatrix::zeros(n * d, n * d);
    for (i, k) in kx.iter().enumerate() {
        a.view_mut((0, i * n), (n, n)).copy_from(k);
    }
    for i in 1..d {
        for j in 0..n {
            a[(i * n + j, (i - 1) * n + j)] = 1.0;
        }
    }
    a
}

/// Largest eigenvalue modulus (NaN if the eigenvalue iteration fails).
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    assert!(a.is_square(), "spectral radius of a non-square matrix");
    if a.nrows() == 0 {
        return 0.0;
    }
    let scale = a.amax();
    if scale == 0.0 {
        return 0.0;
    }
    if !scale.is_finite() {
        return f64::NAN;
    }
    let scaled = a / scale;
    let Some(schur) = Schur::try_new(scaled.clone(), f64::EPSILON, 100_000)
        .or_else(|| Schur::try_new(scaled.transpose(), f64::EPSILON, 100_000))
    else {
        return f64::NAN;
    };
    scale * schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    pipeline_id: String,
    observable_set: ObservableSet,
    #[serde(rename = "D_x")]
    dx: usize,
    #[serde(rename = "D_u")]
    du: usize,
    dt_seconds: f64,
    base_pressure: f64,
    base_mfr: f64,
    #[serde(rename = "Kx")]
    kx: Vec<Vec<f64>>,
    #[serde(rename = "Ku")]
    ku: Vec<Vec<f64>>,
    stability: StabilityInfo,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl From<&KoopmanModel> for ModelFile {
    fn from(m: &KoopmanModel) -> Self {
        ModelFile {
            version: MODEL_VERSION,
            pipeline_id: m.pipeline_id.clone(),
            observable_set: m.observables,
            dx: m.delays.dx,
            du: m.delays.du,
            dt_seconds: m.dt,
            base_pressure: m.bases.pressure,
            base_mfr: m.bases.mfr,
            kx: m.kx.iter().map(row_major).collect(),
            ku: m.ku.iter().map(row_major).collect(),
            stability: m.stability,
        }
    }
}

impl ModelFile {
    fn into_model(self) -> Result<KoopmanModel> {
        let n = self.observable_set.dim();
        let delays = DelayConfig::new(self.dx, self.du)?;
        if self.kx.len() != self.dx || self.ku.len() != self.du + 1 {
            return Err(Error::DimensionMismatch("operator count disagrees with the delays".into()));
        }
        let block = |v: &Vec<f64>, cols: usize| -> Result<DMatrix<f64>> {
            if v.len() != n * cols {
                return Err(Error::DimensionMismatch(format!(
                    "operator has {} entries, observable set {} needs {}",
                    v.len(),
                    self.observable_set,
                    n * cols
                )));
            }
            Ok(DMatrix::from_row_slice(n, cols, v))
        };
        Ok(KoopmanModel {
            pipeline_id: self.pipeline_id.clone(),
            observables: self.observable_set,
            delays,
            dt: self.dt_seconds,
            bases: Bases { pressure: self.base_pressure, mfr: self.base_mfr },
            kx: self.kx.iter().map(|v| block(v, n)).collect::<Result<_>>()?,
            ku: self.ku.iter().map(|v| block(v, 2)).collect::<Result<_>>()?,
            stability: self.stability,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn model(rng: &mut ChaCha8Rng, scale: f64) -> KoopmanModel {
        let d = DelayConfig::new(3, 2).unwrap();
        let obs = ObservableSet::V5a;
        let mut kx: Vec<_> = (0..3).map(|_| random(rng, 4, 4)).collect();
        let s = super::super::fit::spectral_norm_sum(&kx);
        for k in &mut kx {
            *k *= scale / s;
        }
        let ku: Vec<_> = (0..3).map(|_| random(rng, 4, 2)).collect();
        KoopmanModel::from_theta("p", obs, d, 900.0, Bases::default(), &stack_theta(&kx, &ku), Some((1e-3, StabilityMode::Joint)))
            .unwrap()
    }

    #[test]
    fn companion_shapes() {
        let k = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(assemble_companion(&[k.clone()]), k);
        let half = DMatrix::<f64>::identity(2, 2) * 0.5;
        let z = DMatrix::zeros(2, 2);
        let a = assemble_companion(&[half, z.clone(), z]);
        assert_eq!(a.shape(), (6, 6));
        assert!((spectral_radius(&a) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn spectral_radius_examples() {
        assert!((spectral_radius(&DMatrix::identity(3, 3)) - 1.0).abs() < 1e-14);
        assert_eq!(spectral_radius(&DMatrix::zeros(3, 3)), 0.0);
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -0.25, 1.0]);
        assert!((spectral_radius(&a) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn norm_budget_implies_stability() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let m = model(&mut rng, 0.99);
            assert!(m.stability.certified_spectral_radius < 1.0);
        }
    }

    #[test]
    fn zero_history_zero_input_stays_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = model(&mut rng, 0.9);
        let out = m.predict(&vec![DVector::zeros(4); 3], &[[0.0; 2]; 2], &[[0.0; 2]; 20]).unwrap();
        assert!(out.iter().all(|v| v.amax() == 0.0));
    }

    #[test]
    fn prediction_is_linear_in_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = model(&mut rng, 0.9);
        let u1: Vec<[f64; 2]> = (0..30).map(|_| [rng.random(), rng.random()]).collect();
        let u2: Vec<[f64; 2]> = (0..30).map(|_| [rng.random(), rng.random()]).collect();
        let (a, b) = (0.7, -1.3);
        let mix: Vec<[f64; 2]> = u1.iter().zip(&u2).map(|(x, y)| [a * x[0] + b * y[0], a * x[1] + b * y[1]]).collect();
        let h = vec![DVector::zeros(4); 3];
        let hu = [[0.0; 2]; 2];
        let p1 = m.predict(&h, &hu, &u1).unwrap();
        let p2 = m.predict(&h, &hu, &u2).unwrap();
        let pm = m.predict(&h, &hu, &mix).unwrap();
        for k in 0..30 {
            assert!((&pm[k] - (&p1[k] * a + &p2[k] * b)).amax() < 1e-10);
        }
    }

    #[test]
    fn prediction_matches_regressor_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = model(&mut rng, 0.9);
        let psi0: Vec<DVector<f64>> = (0..3).map(|_| DVector::from_fn(4, |_, _| rng.random())).collect();
        let u0: Vec<[f64; 2]> = (0..2).map(|_| [rng.random(), rng.random()]).collect();
        let inputs: Vec<[f64; 2]> = (0..5).map(|_| [rng.random(), rng.random()]).collect();
        let pred = m.predict(&psi0, &u0, &inputs).unwrap();
        // chronological series
        let mut psi: Vec<DVector<f64>> = psi0.iter().rev().cloned().collect();
        psi.extend(pred.iter().cloned());
        let mut u: Vec<[f64; 2]> = vec![[0.0; 2]; 1];
        u.extend(u0.iter().rev());
        u.extend(&inputs);
        for k in 0..5 {
            let row = m.regressor(&psi, &u, k + 3);
            let y = m.theta().transpose() * row;
            assert!((y - &pred[k]).amax() < 1e-12);
        }
    }

    #[test]
    fn free_response_decays() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = model(&mut rng, 0.9);
        let h: Vec<DVector<f64>> = (0..3).map(|_| DVector::from_element(4, 1.0)).collect();
        let norms = m.free_response_norms(&h, 500).unwrap();
        assert!(norms[500] < 1e-3 * norms[0]);
    }

    #[test]
    fn unstable_model_fails_certificate() {
        let d = DelayConfig::new(1, 0).unwrap();
        let theta = DMatrix::from_fn(d.width(4), 4, |i, j| if i == j { 1.5 } else { 0.0 });
        let err = KoopmanModel::from_theta("p", ObservableSet::V5a, d, 900.0, Bases::default(), &theta, Some((1e-3, StabilityMode::Joint)));
        assert!(matches!(err, Err(Error::StabilityCertificate(_))));
        let ok = KoopmanModel::from_theta("p", ObservableSet::V5a, d, 900.0, Bases::default(), &theta, None).unwrap();
        assert!((ok.stability.certified_spectral_radius - 1.5).abs() < 1e-12);
    }

    #[test]
    fn save_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = model(&mut rng, 0.9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        assert_eq!(KoopmanModel::load(&path).unwrap(), m);
    }

    #[test]
    fn schema_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = model(&mut rng, 0.9);
        let mut v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("observable_set");
        assert!(matches!(KoopmanModel::from_json(v), Err(Error::SchemaMismatch(_))));
        let mut v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        v["version"] = 0.into();
        assert!(matches!(KoopmanModel::from_json(v), Err(Error::Version { expected: 1, actual: 0 })));
    }

    #[test]
    fn steady_lifted_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = model(&mut rng, 0.9);
        let u = [1.1, 1.0];
        let s = m.steady_lifted(u).unwrap();
        let out = m.predict(&vec![s.clone(); 3], &[u; 2], &[u; 3]).unwrap();
        for p in out {
            assert!((p - &s).amax() < 1e-12);
        }
    }
}
