//! Least-squares estimation of the delay operators, with an optional
//! convex stability constraint `Σᵢ σ_max(K_x^i) ≤ 1 − ε`.
//!
//! Coefficients are stacked as `Θ` (width × N) with `Y ≈ Z·Θ`; block `i` of
//! the first `dx·N` rows is `(K_x^(i+1))ᵀ`, the remaining rows hold the
//! transposed input operators two rows at a time.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::regression::DelayConfig;
use crate::error::{Error, Result};

pub const DEFAULT_RIDGE: f64 = 1e-10;
pub const DEFAULT_EPSILON: f64 = 1e-3;

/// How the stability set is enforced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StabilityMode {
    /// Optimum over `Σᵢ σ_max(K_x^i) ≤ 1 − ε`.
    #[default]
    Joint,
    /// Optimum over `σ_max(K_x^i) ≤ (1 − ε)/D_x` for every block.
    PerBlock,
    /// Unconstrained fit with the state blocks scaled uniformly into the set,
    /// input operators refitted.
    Scaled,
}

impl std::str::FromStr for StabilityMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(StabilityMode::Joint),
            "per_block" | "per-block" => Ok(StabilityMode::PerBlock),
            "scaled" => Ok(StabilityMode::Scaled),
            other => Err(Error::InvalidParams(format!("unknown stability mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityConstraint {
    pub epsilon: f64,
    pub mode: StabilityMode,
}

impl Default for StabilityConstraint {
    fn default() -> Self {
        StabilityConstraint { epsilon: DEFAULT_EPSILON, mode: StabilityMode::Joint }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub ridge: f64,
    pub stability: Option<StabilityConstraint>,
    pub max_iterations: usize,
    /// Target relative duality gap of the constrained fit.
    pub gap_tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            ridge: DEFAULT_RIDGE,
            stability: Some(StabilityConstraint::default()),
            max_iterations: 2_000,
            gap_tolerance: 1e-6,
        }
    }
}

impl FitOptions {
    pub fn unconstrained() -> Self {
        FitOptions { stability: None, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub theta: DMatrix<f64>,
    /// `½‖Y − ZΘ‖² + ½·ridge·‖Θ‖²`
    pub objective: f64,
    pub iterations: usize,
    /// Certified relative optimality gap of a constrained fit (None when
    /// unconstrained or for the scaled heuristic).
    pub relative_gap: Option<f64>,
}

/// Splits `Θ` into state and input operators in their natural orientation.
pub fn split_theta(theta: &DMatrix<f64>, delays: DelayConfig, n: usize) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let kx = (0..delays.dx).map(|i| theta.rows(i * n, n).transpose()).collect();
    let ku = (0..=delays.du)
        .map(|i| theta.rows(delays.dx * n + 2 * i, 2).transpose())
        .collect();
    (kx, ku)
}

/// Inverse of [`split_theta`].
pub fn stack_theta(kx: &[DMatrix<f64>], ku: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n = kx[0].nrows();
    let width = kx.len() * n + 2 * ku.len();
    let mut theta = DMatrix::zeros(width, n);
    for (i, k) in kx.iter().enumerate() {
        theta.rows_mut(i * n, n).copy_from(&k.transpose());
    }
    for (i, k) in ku.iter().enumerate() {
        theta.rows_mut(kx.len() * n + 2 * i, 2).copy_from(&k.transpose());
    }
    theta
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().max()
}

/// `Σᵢ σ_max(K_x^i)`
pub fn spectral_norm_sum(blocks: &[DMatrix<f64>]) -> f64 {
    blocks.iter().map(spectral_norm).sum()
}

/// Clips singular values at `theta`.
fn clip_block(m: &DMatrix<f64>, theta: f64) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let (u, vt) = (svd.u.as_ref().unwrap(), svd.v_t.as_ref().unwrap());
    let s = svd.singular_values.map(|s| s.min(theta));
    u * DMatrix::from_diagonal(&s) * vt
}

/// Threshold `θ` such that `Σⱼ max(sⱼ − θ, 0) = μ`, or 0 if `Σ s ≤ μ`.
fn clip_level(s: &[f64], mu: f64) -> f64 {
    let total: f64 = s.iter().sum();
    if total <= mu {
        return 0.0;
    }
    let mut sorted = s.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut level = 0.0;
    for (k, &v) in sorted.iter().enumerate() {
        cum += v;
        let t = (cum - mu) / (k + 1) as f64;
        if v - t > 0.0 {
            level = t;
        }
    }
    level.max(0.0)
}

/// Euclidean projection onto `{Σᵢ σ_max(Bᵢ) ≤ r}`.
fn project_joint(blocks: &[DMatrix<f64>], r: f64) -> Vec<DMatrix<f64>> {
    let svals: Vec<Vec<f64>> = blocks.iter().map(|b| b.singular_values().as_slice().to_vec()).collect();
    let maxes: f64 = svals.iter().map(|s| s.iter().cloned().fold(0.0, f64::max)).sum();
    if maxes <= r {
        return blocks.to_vec();
    }
    let levels = |mu: f64| -> Vec<f64> {
        svals
            .iter()
            .map(|s| clip_level(s, mu).min(s.iter().cloned().fold(0.0, f64::max)))
            .collect()
    };
    let (mut lo, mut hi) = (0.0, svals.iter().map(|s| s.iter().sum::<f64>()).fold(0.0, f64::max));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if levels(mid).iter().sum::<f64>() > r {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-16 * hi.max(1e-300) {
            break;
        }
    }
    blocks.iter().zip(levels(hi)).map(|(b, t)| clip_block(b, t)).collect()
}

fn project_set(blocks: &[DMatrix<f64>], radius: f64, mode: StabilityMode) -> Vec<DMatrix<f64>> {
    match mode {
        StabilityMode::Joint => project_joint(blocks, radius),
        StabilityMode::PerBlock => {
            let t = radius / blocks.len() as f64;
            blocks
                .iter()
                .map(|b| if spectral_norm(b) <= t { b.clone() } else { clip_block(b, t) })
                .collect()
        }
        StabilityMode::Scaled => {
            let s = spectral_norm_sum(blocks);
            if s <= radius {
                blocks.to_vec()
            } else {
                blocks.iter().map(|b| b * (radius / s)).collect()
            }
        }
    }
}

/// Maps state blocks into `Σᵢ σ_max ≤ 1 − ε`.
///
/// `PerBlock` clips every block's singular values at `(1 − ε)/D_x`; `Scaled`
/// multiplies all blocks by `(1 − ε)/s` when `s = Σᵢ σ_max > 1 − ε`; `Joint`
/// is the Euclidean projection onto the set.
pub fn project_stable(blocks: &[DMatrix<f64>], epsilon: f64, mode: StabilityMode) -> Result<Vec<DMatrix<f64>>> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidParams(format!("epsilon {epsilon} outside (0, 1)")));
    }
    if blocks.is_empty() {
        return Ok(vec![]);
    }
    Ok(project_set(blocks, 1.0 - epsilon, mode))
}

/// Support function of the constraint set on the state rows of `lam`.
fn support(lam_blocks: &[DMatrix<f64>], radius: f64, mode: StabilityMode) -> f64 {
    let nuclear: Vec<f64> = lam_blocks.iter().map(|b| b.singular_values().sum()).collect();
    match mode {
        StabilityMode::PerBlock => nuclear.iter().sum::<f64>() * radius / lam_blocks.len() as f64,
        _ => radius * nuclear.iter().cloned().fold(0.0, f64::max),
    }
}

struct Problem<'a> {
    y: &'a DMatrix<f64>,
    z: &'a DMatrix<f64>,
    ridge: f64,
    g: DMatrix<f64>,
}

impl Problem<'_> {
    /// `ZΘ − Y` with compensated dot products; near the optimum the
    /// residual is orders of magnitude below the data and plain summation
    /// would swamp it with rounding.
    fn residual(&self, theta: &DMatrix<f64>) -> DMatrix<f64> {
        let (m, w) = self.z.shape();
        DMatrix::from_fn(m, theta.ncols(), |i, c| {
            let (mut sum, mut comp) = (-self.y[(i, c)], 0.0);
            for j in 0..w {
                let prod = self.z[(i, j)] * theta[(j, c)];
                let prod_err = self.z[(i, j)].mul_add(theta[(j, c)], -prod);
                let next = sum + prod;
                let bb = next - sum;
                comp += (sum - (next - bb)) + (prod - bb) + prod_err;
                sum = next;
            }
            sum + comp
        })
    }

    /// Gradient `Zᵀ(ZΘ − Y) + ridge·Θ`.
    fn gradient(&self, theta: &DMatrix<f64>) -> DMatrix<f64> {
        self.z.transpose() * self.residual(theta) + theta * self.ridge
    }

    fn objective(&self, theta: &DMatrix<f64>) -> f64 {
        let r = self.residual(theta);
        0.5 * r.norm_squared() + 0.5 * self.ridge * theta.norm_squared()
    }
}

/// Ridge least squares through a QR factorization of `[Z; √ridge·I]`.
fn ridge_solve(y: &DMatrix<f64>, z: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let (m, w) = z.shape();
    if m == 0 {
        return Err(Error::InsufficientData("empty regression".into()));
    }
    let mut za = DMatrix::zeros(m + w, w);
    za.rows_mut(0, m).copy_from(z);
    for i in 0..w {
        za[(m + i, i)] = ridge.sqrt();
    }
    let mut ya = DMatrix::zeros(m + w, y.ncols());
    ya.rows_mut(0, m).copy_from(y);
    let qr = za.qr();
    let r = qr.r();
    let diag = r.diagonal().map(f64::abs);
    if !(diag.min() > 1e-14 * diag.max()) || !diag.max().is_finite() {
        return Err(Error::RankDeficient);
    }
    let qty = qr.q().transpose() * ya;
    r.solve_upper_triangular(&qty).ok_or(Error::RankDeficient)
}

/// Refits the input operators with the state blocks of `theta` held fixed.
fn refit_inputs(p: &Problem, theta: &DMatrix<f64>, nx: usize) -> Result<DMatrix<f64>> {
    let w = theta.nrows();
    if nx == w {
        return Ok(theta.clone());
    }
    let zx = p.z.columns(0, nx);
    let zu = p.z.columns(nx, w - nx).into_owned();
    let target = p.y - zx * theta.rows(0, nx);
    let tu = ridge_solve(&target, &zu, p.ridge)?;
    let mut out = theta.clone();
    out.rows_mut(nx, w - nx).copy_from(&tu);
    Ok(out)
}

fn state_blocks(theta: &DMatrix<f64>, dx: usize, n: usize) -> Vec<DMatrix<f64>> {
    (0..dx).map(|i| theta.rows(i * n, n).into_owned()).collect()
}

fn set_state_blocks(theta: &mut DMatrix<f64>, blocks: &[DMatrix<f64>]) {
    let n = blocks[0].nrows();
    for (i, b) in blocks.iter().enumerate() {
        theta.rows_mut(i * n, n).copy_from(b);
    }
}

/// Fits `Θ` minimizing `½‖Y − ZΘ‖² + ½·ridge·‖Θ‖²`, optionally subject to the
/// stability constraint.
///
/// The constrained problem is solved by a barrier interior-point method and
/// stopped once a Frank–Wolfe lower bound certifies the requested relative
/// gap.
pub fn edmd_fit(y: &DMatrix<f64>, z: &DMatrix<f64>, delays: DelayConfig, opts: &FitOptions) -> Result<FitOutcome> {
    let n = y.ncols();
    if z.nrows() != y.nrows() {
        return Err(Error::DimensionMismatch(format!("Y has {} rows, Z has {}", y.nrows(), z.nrows())));
    }
    if z.ncols() != delays.width(n) {
        return Err(Error::DimensionMismatch(format!(
            "Z has {} columns, delays need {}",
            z.ncols(),
            delays.width(n)
        )));
    }
    if y.nrows() == 0 {
        return Err(Error::InsufficientData("no regression rows".into()));
    }
    let unc = ridge_solve(y, z, opts.ridge)?;
    let mut g = z.transpose() * z;
    for i in 0..g.nrows() {
        g[(i, i)] += opts.ridge;
    }
    let p = Problem { y, z, ridge: opts.ridge, g };

    let Some(stab) = opts.stability else {
        return Ok(FitOutcome { objective: p.objective(&unc), theta: unc, iterations: 0, relative_gap: None });
    };
    if !(stab.epsilon > 0.0 && stab.epsilon < 1.0) {
        return Err(Error::InvalidParams(format!("epsilon {} outside (0, 1)", stab.epsilon)));
    }
    let radius = 1.0 - stab.epsilon;
    let nx = delays.dx * n;
    let unc_blocks = state_blocks(&unc, delays.dx, n);
    let feasible_already = match stab.mode {
        StabilityMode::PerBlock => unc_blocks.iter().all(|b| spectral_norm(b) <= radius / delays.dx as f64),
        _ => spectral_norm_sum(&unc_blocks) <= radius,
    };
    if feasible_already {
        return Ok(FitOutcome { objective: p.objective(&unc), theta: unc, iterations: 0, relative_gap: Some(0.0) });
    }
    if stab.mode == StabilityMode::Scaled {
        let mut theta = unc.clone();
        set_state_blocks(&mut theta, &project_set(&unc_blocks, radius, stab.mode));
        let theta = refit_inputs(&p, &theta, nx)?;
        return Ok(FitOutcome { objective: p.objective(&theta), theta, iterations: 0, relative_gap: None });
    }
    interior_point(&p, &unc, delays.dx, n, radius, stab.mode, opts)
}

/// Barrier state of one state block, `F = [[t·I, B], [Bᵀ, t·I]] ≻ 0`.
struct BlockBarrier {
    finv: DMatrix<f64>,
    log_det: f64,
}

impl BlockBarrier {
    fn new(b: &DMatrix<f64>, t: f64) -> Option<Self> {
        let n = b.nrows();
        let mut f = DMatrix::identity(2 * n, 2 * n) * t;
        f.view_mut((0, n), (n, n)).copy_from(b);
        f.view_mut((n, 0), (n, n)).copy_from(&b.transpose());
        let chol = Cholesky::new(f)?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Some(BlockBarrier { finv: chol.inverse(), log_det })
    }
}

/// Position of the strictly feasible iterate: `Θ` and, in joint mode, one
/// bound `tᵢ ≥ σ_max(Bᵢ)` per block.
struct Iterate {
    theta: DMatrix<f64>,
    t: Vec<f64>,
}

struct Barrier {
    dx: usize,
    n: usize,
    w_dim: usize,
    radius: f64,
    joint: bool,
}

impl Barrier {
    fn block_bound(&self, it: &Iterate, i: usize) -> f64 {
        if self.joint { it.t[i] } else { self.radius / self.dx as f64 }
    }

    fn slack(&self, it: &Iterate) -> f64 {
        self.radius - it.t.iter().sum::<f64>()
    }

    /// Self-concordance parameter.
    fn nu(&self) -> f64 {
        (self.dx * 2 * self.n) as f64 + if self.joint { 1.0 } else { 0.0 }
    }

    fn blocks(&self, it: &Iterate) -> Option<Vec<BlockBarrier>> {
        if self.joint && !(self.slack(it) > 0.0) {
            return None;
        }
        (0..self.dx)
            .map(|i| BlockBarrier::new(&it.theta.rows(i * self.n, self.n).into_owned(), self.block_bound(it, i)))
            .collect()
    }

    fn value(&self, it: &Iterate) -> Option<f64> {
        let blocks = self.blocks(it)?;
        let mut v = -blocks.iter().map(|b| b.log_det).sum::<f64>();
        if self.joint {
            v -= self.slack(it).ln();
        }
        Some(v)
    }

    fn dim(&self) -> usize {
        self.w_dim * self.n + if self.joint { self.dx } else { 0 }
    }

    /// Index of `Θ[(row, col)]` in the Newton vector.
    fn idx(&self, row: usize, col: usize) -> usize {
        col * self.w_dim + row
    }

    /// Adds the barrier gradient and Hessian at `it` into `grad` and `hess`.
    fn add_derivatives(&self, it: &Iterate, blocks: &[BlockBarrier], grad: &mut DVector<f64>, hess: &mut DMatrix<f64>) {
        let n = self.n;
        let tcol = self.w_dim * n;
        for (i, bb) in blocks.iter().enumerate() {
            // variables of the block: B entries (a, c), then t when joint
            let mut vars: Vec<(usize, DMatrix<f64>)> = Vec::with_capacity(n * n + 1);
            for c in 0..n {
                for a in 0..n {
                    let mut d = DMatrix::zeros(2 * n, 2 * n);
                    d[(a, n + c)] = 1.0;
                    d[(n + c, a)] = 1.0;
                    vars.push((self.idx(i * n + a, c), &bb.finv * d));
                }
            }
            if self.joint {
                vars.push((tcol + i, bb.finv.clone()));
            }
            for (k, (gk, mk)) in vars.iter().enumerate() {
                grad[*gk] -= mk.trace();
                for (gl, ml) in vars.iter().skip(k) {
                    let h = mk.component_mul(&ml.transpose()).sum();
                    hess[(*gk, *gl)] += h;
                    if gk != gl {
                        hess[(*gl, *gk)] += h;
                    }
                }
            }
        }
        if self.joint {
            let s = self.slack(it);
            for i in 0..self.dx {
                grad[tcol + i] += 1.0 / s;
                for j in 0..self.dx {
                    hess[(tcol + i, tcol + j)] += 1.0 / (s * s);
                }
            }
        }
    }

    fn step(&self, it: &Iterate, dir: &DVector<f64>, alpha: f64) -> Iterate {
        let mut theta = it.theta.clone();
        for c in 0..self.n {
            for r in 0..self.w_dim {
                theta[(r, c)] += alpha * dir[self.idx(r, c)];
            }
        }
        let tcol = self.w_dim * self.n;
        let t = it.t.iter().enumerate().map(|(i, t)| t + alpha * dir[tcol + i]).collect();
        Iterate { theta, t }
    }
}

/// Frank–Wolfe lower bound `f(Θ) + min_{W∈S} ⟨∇f(Θ), W − Θ⟩` at a point whose
/// input rows are optimal.
fn linear_bound(p: &Problem, theta: &DMatrix<f64>, dx: usize, n: usize, radius: f64, mode: StabilityMode) -> f64 {
    let nx = dx * n;
    let grad = p.gradient(theta);
    let neg = state_blocks(&(-&grad), dx, n);
    p.objective(theta) - grad.rows(0, nx).dot(&theta.rows(0, nx)) - support(&neg, radius, mode)
}

/// Interior-point path following on `τ·f + φ`, where `φ` is the log-det
/// barrier of `[[tᵢI, Bᵢ], [Bᵢᵀ, tᵢI]] ⪰ 0` (plus `−log(r − Σtᵢ)` in joint
/// mode). Centering uses damped Newton steps; after each centering the
/// input rows are refitted and the gap is certified by the Frank–Wolfe
/// bound, which at a central point is at most `ν/τ`.
const CENTERING_STEPS: usize = 50;
/// Relative objective change between path stages treated as converged.
const STALL_CHANGE: f64 = 1e-10;

fn interior_point(
    p: &Problem,
    start: &DMatrix<f64>,
    dx: usize,
    n: usize,
    radius: f64,
    mode: StabilityMode,
    opts: &FitOptions,
) -> Result<FitOutcome> {
    let w_dim = p.g.nrows();
    let nx = dx * n;
    let joint = mode == StabilityMode::Joint;
    let bar = Barrier { dx, n, w_dim, radius, joint };

    // strictly feasible start: state blocks shrunk to half the budget
    let blocks = state_blocks(start, dx, n);
    let mut theta = start.clone();
    let t = if joint {
        let total = spectral_norm_sum(&blocks).max(f64::MIN_POSITIVE);
        let scale = (0.5 * radius / total).min(1.0);
        set_state_blocks(&mut theta, &blocks.iter().map(|b| b * scale).collect::<Vec<_>>());
        blocks.iter().map(|b| spectral_norm(b) * scale + 0.25 * radius / dx as f64).collect()
    } else {
        let cap = 0.5 * radius / dx as f64;
        let scaled: Vec<_> = blocks
            .iter()
            .map(|b| {
                let s = spectral_norm(b);
                if s > cap { b * (cap / s) } else { b.clone() }
            })
            .collect();
        set_state_blocks(&mut theta, &scaled);
        vec![]
    };
    let mut it = Iterate { theta, t };

    let floor = p.objective(start);
    let mut lower = floor;
    let mut best = refit_inputs(p, &it.theta, nx)?;
    let mut upper = p.objective(&best);
    let nu = bar.nu();
    let mut tau = nu / (upper - floor).max(f64::MIN_POSITIVE * 1e6);
    let dim = bar.dim();
    let mut newton = 0;

    while newton < opts.max_iterations {
        // centering; near the optimum rounding keeps the decrement from
        // vanishing, so a nearly centered stage stops after a bounded count
        for step in 0.. {
            let blocks = bar.blocks(&it).ok_or_else(|| Error::Domain("interior iterate left the stability set".into()))?;
            let mut grad = DVector::zeros(dim);
            let mut hess = DMatrix::zeros(dim, dim);
            let fgrad = p.gradient(&it.theta);
            for c in 0..n {
                for r in 0..w_dim {
                    grad[bar.idx(r, c)] = tau * fgrad[(r, c)];
                }
                hess.view_mut((c * w_dim, c * w_dim), (w_dim, w_dim)).copy_from(&(&p.g * tau));
            }
            bar.add_derivatives(&it, &blocks, &mut grad, &mut hess);
            let Some(dir) = newton_direction(&hess, &grad) else { break };
            let dec = (-grad.dot(&dir)).max(0.0).sqrt();
            newton += 1;
            if !dec.is_finite() {
                break;
            }
            // Armijo backtracking on τ·f + φ, never below the damped step
            // 1/(1 + δ) that self-concordance guarantees to be a descent step
            let merit = |x: &Iterate| bar.value(x).map(|phi| tau * p.objective(&x.theta) + phi);
            let current = merit(&it).unwrap_or(f64::INFINITY);
            let damped = 1.0 / (1.0 + dec);
            let mut alpha = 1.0;
            let mut next = bar.step(&it, &dir, alpha);
            if dec > 0.25 {
                while alpha > damped {
                    if merit(&next).is_some_and(|m| m <= current - 0.25 * alpha * dec * dec) {
                        break;
                    }
                    alpha = (alpha * 0.5).max(damped);
                    next = bar.step(&it, &dir, alpha);
                }
            }
            while bar.value(&next).is_none() && alpha > 1e-12 {
                alpha *= 0.5;
                next = bar.step(&it, &dir, alpha);
            }
            if bar.value(&next).is_none() {
                break;
            }
            it = next;
            if dec < 1e-6 || (dec < 1e-3 && step >= CENTERING_STEPS) || newton >= opts.max_iterations {
                break;
            }
        }
        let polished = refit_inputs(p, &it.theta, nx)?;
        let obj = p.objective(&polished);
        let previous = upper;
        if obj < upper && spectral_ok(&polished, dx, n, radius, mode) {
            upper = obj;
            best = polished.clone();
        }
        lower = lower.max(linear_bound(p, &polished, dx, n, radius, mode));
        let gap = ((upper - lower) / upper.abs().max(f64::MIN_POSITIVE)).max(0.0);
        let done = |gap| Ok(FitOutcome { theta: best.clone(), objective: upper, iterations: newton, relative_gap: Some(gap) });
        if gap <= opts.gap_tolerance {
            return done(gap);
        }
        let barrier_negligible = nu / tau < 1e-3 * opts.gap_tolerance * upper.abs();
        if barrier_negligible && (previous - upper) <= STALL_CHANGE * upper.abs() {
            // rounding floor of the certificate: the objective has stopped
            // moving, report the gap that could be certified
            return done(gap);
        }
        if nu / tau < 1e-6 * opts.gap_tolerance * upper.abs() {
            break;
        }
        tau *= 8.0;
    }
    Err(Error::NonConvergence { iterations: opts.max_iterations })
}

/// Newton step `−H⁻¹g` with symmetric diagonal scaling and one refinement pass.
fn newton_direction(hess: &DMatrix<f64>, grad: &DVector<f64>) -> Option<DVector<f64>> {
    let d = hess.diagonal().map(|h| if h > 0.0 { 1.0 / h.sqrt() } else { 1.0 });
    let scaled = DMatrix::from_fn(hess.nrows(), hess.ncols(), |i, j| hess[(i, j)] * d[i] * d[j]);
    let chol = Cholesky::new(scaled)?;
    let solve = |rhs: &DVector<f64>| -> DVector<f64> { chol.solve(&rhs.component_mul(&d)).component_mul(&d) };
    let mut dir = solve(&-grad);
    let resid = -grad - hess * &dir;
    dir += solve(&resid);
    dir.iter().all(|v| v.is_finite()).then_some(dir)
}

fn spectral_ok(theta: &DMatrix<f64>, dx: usize, n: usize, radius: f64, mode: StabilityMode) -> bool {
    let blocks = state_blocks(theta, dx, n);
    match mode {
        StabilityMode::PerBlock => blocks.iter().all(|b| spectral_norm(b) <= radius / dx as f64),
        _ => spectral_norm_sum(&blocks) <= radius,
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

    #[test]
    fn per_block_clips_singular_values() {
        let b = DMatrix::<f64>::identity(3, 3) * 2.0;
        let out = project_stable(&[b], 0.001, StabilityMode::PerBlock).unwrap();
        assert!((&out[0] - DMatrix::<f64>::identity(3, 3) * 0.999).amax() < 1e-12);
    }

    #[test]
    fn scaled_mode_scales_uniformly() {
        let i = DMatrix::<f64>::identity(2, 2);
        let out = project_stable(&[i.clone(), i.clone()], 0.001, StabilityMode::Scaled).unwrap();
        for o in out {
            assert!((o - &i * 0.4995).amax() < 1e-12);
        }
    }

    #[test]
    fn feasible_blocks_are_unchanged() {
        let a = DMatrix::<f64>::identity(2, 2) * 0.25;
        for mode in [StabilityMode::Joint, StabilityMode::PerBlock, StabilityMode::Scaled] {
            let out = project_stable(&[a.clone(), a.clone()], 0.001, mode).unwrap();
            assert_eq!(out, vec![a.clone(), a.clone()]);
        }
    }

    #[test]
    fn joint_projection_is_the_nearest_feasible_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let blocks: Vec<_> = (0..3).map(|_| random(&mut rng, 4, 4)).collect();
            let proj = project_stable(&blocks, 0.001, StabilityMode::Joint).unwrap();
            assert!(spectral_norm_sum(&proj) <= 0.999 + 1e-9);
            let dist = |c: &[DMatrix<f64>]| -> f64 {
                c.iter().zip(&blocks).map(|(a, b)| (a - b).norm_squared()).sum()
            };
            let d0 = dist(&proj);
            // no feasible perturbation of the projection gets closer
            for _ in 0..200 {
                let cand: Vec<_> = proj.iter().map(|p| p + random(&mut rng, 4, 4) * 0.01).collect();
                let cand = project_stable(&cand, 0.001, StabilityMode::Scaled).unwrap();
                assert!(dist(&cand) >= d0 - 1e-9);
            }
            for mode in [StabilityMode::PerBlock, StabilityMode::Scaled] {
                let other = project_stable(&blocks, 0.001, mode).unwrap();
                assert!(dist(&other) >= d0 - 1e-12);
            }
        }
    }

    #[test]
    fn clip_level_solves_the_shrinkage_equation() {
        let s = [3.0, 1.0, 0.5];
        let t = clip_level(&s, 2.5);
        let excess: f64 = s.iter().map(|v| (v - t).max(0.0)).sum();
        assert!((excess - 2.5).abs() < 1e-12);
        assert_eq!(clip_level(&s, 10.0), 0.0);
    }

    fn synthetic(rng: &mut ChaCha8Rng, rows: usize, delays: DelayConfig, n: usize, theta: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let z = random(rng, rows, delays.width(n));
        let y = &z * theta;
        (y, z)
    }

    #[test]
    fn unconstrained_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = DelayConfig::new(2, 1).unwrap();
        let theta = random(&mut rng, d.width(3), 3);
        let (mut y, z) = synthetic(&mut rng, 60, d, 3, &theta);
        y += random(&mut rng, 60, 3) * 0.1;
        let fit = edmd_fit(&y, &z, d, &FitOptions::unconstrained()).unwrap();
        let mut g = z.transpose() * &z;
        for i in 0..g.nrows() {
            g[(i, i)] += DEFAULT_RIDGE;
        }
        let oracle = g.lu().solve(&(z.transpose() * &y)).unwrap();
        assert!((&fit.theta - &oracle).norm() <= 1e-8 * oracle.norm());
    }

    #[test]
    fn constrained_fit_certifies_its_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = DelayConfig::new(2, 1).unwrap();
        let theta = random(&mut rng, d.width(3), 3) * 2.0;
        let (mut y, z) = synthetic(&mut rng, 200, d, 3, &theta);
        y += random(&mut rng, 200, 3) * 0.05;
        let unc = edmd_fit(&y, &z, d, &FitOptions::unconstrained()).unwrap();
        for mode in [StabilityMode::Joint, StabilityMode::PerBlock] {
            let opts = FitOptions {
                stability: Some(StabilityConstraint { epsilon: 0.001, mode }),
                ..Default::default()
            };
            let fit = edmd_fit(&y, &z, d, &opts).unwrap();
            let (kx, _) = split_theta(&fit.theta, d, 3);
            assert!(spectral_norm_sum(&kx) <= 0.999 + 1e-9);
            assert!(fit.relative_gap.unwrap() <= 1e-6);
            assert!(fit.objective >= unc.objective);
            // projected gradient with many iterations cannot beat the certified optimum
            let (g, b) = {
                let mut g = z.transpose() * &z;
                for i in 0..g.nrows() {
                    g[(i, i)] += DEFAULT_RIDGE;
                }
                (g.clone(), z.transpose() * &y)
            };
            let step = 1.0 / g.symmetric_eigenvalues().max();
            let mut t = fit.theta.clone();
            for _ in 0..2000 {
                let grad = &g * &t - &b;
                t -= grad * step;
                let blocks = project_set(&state_blocks(&t, 2, 3), 0.999, mode);
                set_state_blocks(&mut t, &blocks);
            }
            let r = &y - &z * &t;
            let obj = 0.5 * r.norm_squared() + 0.5 * DEFAULT_RIDGE * t.norm_squared();
            assert!(obj >= fit.objective * (1.0 - 1e-6), "{obj} < {}", fit.objective);
        }
    }

    #[test]
    fn synthetic_system_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = DelayConfig::new(2, 1).unwrap();
        let n = 3;
        let mut kx: Vec<_> = (0..2).map(|_| random(&mut rng, n, n)).collect();
        let s = spectral_norm_sum(&kx);
        for k in &mut kx {
            *k *= 0.6 / s;
        }
        let ku: Vec<_> = (0..2).map(|_| random(&mut rng, n, 2)).collect();
        let truth = stack_theta(&kx, &ku);
        let (y, z) = synthetic(&mut rng, 300, d, n, &truth);
        let fit = edmd_fit(&y, &z, d, &FitOptions::default()).unwrap();
        assert!((&fit.theta - &truth).norm() < 1e-6);
    }

    #[test]
    fn theta_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = DelayConfig::new(3, 2).unwrap();
        let theta = random(&mut rng, d.width(4), 4);
        let (kx, ku) = split_theta(&theta, d, 4);
        assert_eq!(kx.len(), 3);
        assert_eq!(ku.len(), 3);
        assert_eq!(ku[0].shape(), (4, 2));
        assert_eq!(stack_theta(&kx, &ku), theta);
    }

    #[test]
    fn dimension_checks() {
        let d = DelayConfig::new(1, 0).unwrap();
        let y = DMatrix::zeros(5, 2);
        let z = DMatrix::zeros(5, 3);
        assert!(matches!(edmd_fit(&y, &z, d, &FitOptions::default()), Err(Error::DimensionMismatch(_))));
    }
}
