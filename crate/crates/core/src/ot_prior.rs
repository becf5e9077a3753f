//! Temporal-order priors and the KL-regularized Sinkhorn solver.
//!
//! The solver maximizes `⟨Q, S⟩ − ρ·KL(Q ‖ M)` over couplings with row
//! marginals `1/B` and column marginals `1/K`. Its solution has the form
//! `Q = diag(u) · exp((S + ρ·log M)/ρ) · diag(v)`; the scalings are found by
//! alternating column and row normalizations carried out on log-potentials.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data_model::Transcript;
use crate::error::{Error, Result};

/// Prior entries are floored here before taking logs.
pub const PRIOR_FLOOR: f64 = 1e-12;

/// Default Sinkhorn iteration count used during training.
pub const TRAIN_SINKHORN_ITERATIONS: usize = 3;

/// Band width used when none is configured: `0.75 / K` in normalized time.
pub fn default_sigma(num_actions: usize) -> f64 {
    0.75 / num_actions as f64
}

/// Per-dataset hyperparameter presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetPreset {
    SaladsEval,
    SaladsMid,
    YouTubeInstructions,
    Breakfast,
    DesktopOrig,
    DesktopExtra,
}

impl DatasetPreset {
    pub const ALL: [DatasetPreset; 6] = [
        DatasetPreset::SaladsEval,
        DatasetPreset::SaladsMid,
        DatasetPreset::YouTubeInstructions,
        DatasetPreset::Breakfast,
        DatasetPreset::DesktopOrig,
        DatasetPreset::DesktopExtra,
    ];

    pub fn rho(self) -> f64 {
        match self {
            DatasetPreset::SaladsEval => 0.07,
            DatasetPreset::SaladsMid => 0.08,
            DatasetPreset::YouTubeInstructions => 0.08,
            DatasetPreset::Breakfast => 0.05,
            DatasetPreset::DesktopOrig => 0.07,
            DatasetPreset::DesktopExtra => 0.07,
        }
    }

    /// Embedding width `d`.
    pub fn feature_dim(self) -> usize {
        match self {
            DatasetPreset::YouTubeInstructions => 200,
            DatasetPreset::Breakfast => 40,
            _ => 30,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetPreset::SaladsEval => "50salads-eval",
            DatasetPreset::SaladsMid => "50salads-mid",
            DatasetPreset::YouTubeInstructions => "yti",
            DatasetPreset::Breakfast => "breakfast",
            DatasetPreset::DesktopOrig => "desktop-orig",
            DatasetPreset::DesktopExtra => "desktop-extra",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

/// A `B × K` band prior over (frame, action) pairs that sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMatrix {
    pub values: Array2<f64>,
    pub sigma: f64,
    /// The action order laid out along the band.
    pub order: Transcript,
}

impl PriorMatrix {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn actions(&self) -> usize {
        self.values.ncols()
    }
}

fn gaussian_band(frames: usize, actions: usize, sigma: f64) -> Result<Array2<f64>> {
    if frames == 0 || actions == 0 {
        return Err(Error::InvalidArgument(format!(
            "prior needs at least one frame and one action, got {frames}x{actions}"
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "prior band width must be positive, got {sigma}"
        )));
    }
    let b = frames as f64;
    let k = actions as f64;
    let mut m = Array2::from_shape_fn((frames, actions), |(i, j)| {
        let dt = (i as f64 + 0.5) / b - (j as f64 + 0.5) / k;
        (-dt * dt / (2.0 * sigma * sigma)).exp()
    });
    let total = m.sum();
    m.mapv_inplace(|v| (v / total).max(PRIOR_FLOOR));
    let total = m.sum();
    m.mapv_inplace(|v| v / total);
    Ok(m)
}

/// Band prior coupling early frames with early actions in canonical order.
pub fn build_fixed_order_prior(frames: usize, actions: usize, sigma: f64) -> Result<PriorMatrix> {
    Ok(PriorMatrix {
        values: gaussian_band(frames, actions, sigma)?,
        sigma,
        order: Transcript::identity(actions),
    })
}

/// The fixed-order band laid out in transcript order: column `t[p]` of the
/// result is column `p` of the fixed-order prior.
pub fn build_permutation_prior(
    frames: usize,
    actions: usize,
    sigma: f64,
    transcript: &Transcript,
) -> Result<PriorMatrix> {
    if transcript.len() != actions {
        return Err(Error::InvalidTranscript(format!(
            "transcript has {} entries for {actions} actions",
            transcript.len()
        )));
    }
    let band = gaussian_band(frames, actions, sigma)?;
    let mut values = Array2::zeros((frames, actions));
    for (p, &action) in transcript.actions().iter().enumerate() {
        values.column_mut(action).assign(&band.column(p));
    }
    Ok(PriorMatrix {
        values,
        sigma,
        order: transcript.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SinkhornMode {
    /// Run exactly `iterations` column+row sweeps.
    FixedIterations,
    /// Sweep until both marginals are within `tol`; `iterations` caps the
    /// sweep count.
    ConvergeTo(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub rho: f64,
    pub iterations: usize,
    pub mode: SinkhornMode,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            rho: DatasetPreset::SaladsEval.rho(),
            iterations: TRAIN_SINKHORN_ITERATIONS,
            mode: SinkhornMode::FixedIterations,
        }
    }
}

impl SinkhornConfig {
    pub fn fixed(rho: f64, iterations: usize) -> Self {
        Self {
            rho,
            iterations,
            mode: SinkhornMode::FixedIterations,
        }
    }

    pub fn converged(rho: f64, tol: f64) -> Self {
        Self {
            rho,
            iterations: 100_000,
            mode: SinkhornMode::ConvergeTo(tol),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "rho must be positive, got {}",
                self.rho
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("sinkhorn needs at least one iteration".into()));
        }
        if let SinkhornMode::ConvergeTo(tol) = self.mode {
            if !(tol > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "convergence tolerance must be positive, got {tol}"
                )));
            }
        }
        Ok(())
    }
}

/// Solver output: the coupling and the log-scalings that produced it.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    /// `log u`, one entry per frame.
    pub log_u: Array1<f64>,
    /// `log v`, one entry per action.
    pub log_v: Array1<f64>,
    pub iterations: usize,
}

fn log_sum_exp<I: Iterator<Item = f64> + Clone>(values: I) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Solve the prior-regularized transport problem for a `B × K` similarity.
pub fn sinkhorn_with_prior(
    similarity: ArrayView2<f64>,
    prior: &PriorMatrix,
    cfg: &SinkhornConfig,
) -> Result<TransportPlan> {
    cfg.validate()?;
    if similarity.dim() != prior.values.dim() {
        return Err(Error::shape(
            "sinkhorn similarity",
            prior.values.dim(),
            similarity.dim(),
        ));
    }
    if similarity.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite similarity".into()));
    }
    let (b, k) = similarity.dim();
    let log_row = -(b as f64).ln();
    let log_col = -(k as f64).ln();

    let kernel: Array2<f64> = ndarray::Zip::from(&similarity)
        .and(&prior.values)
        .map_collect(|&s, &m| s / cfg.rho + m.max(PRIOR_FLOOR).ln());
    if kernel.iter().any(|v| !v.is_finite()) {
        return Err(Error::TransportOverflow);
    }

    let mut log_u = Array1::<f64>::zeros(b);
    let mut log_v = Array1::<f64>::zeros(k);
    let mut iterations = 0;
    loop {
        for j in 0..k {
            let col = kernel.column(j);
            log_v[j] = log_col - log_sum_exp(col.iter().zip(log_u.iter()).map(|(&l, &u)| l + u));
        }
        for i in 0..b {
            let row = kernel.row(i);
            log_u[i] = log_row - log_sum_exp(row.iter().zip(log_v.iter()).map(|(&l, &v)| l + v));
        }
        iterations += 1;

        match cfg.mode {
            SinkhornMode::FixedIterations => {
                if iterations >= cfg.iterations {
                    break;
                }
            }
            SinkhornMode::ConvergeTo(tol) => {
                let plan = assemble(&kernel, &log_u, &log_v);
                if marginal_deviation(plan.view()) < tol {
                    break;
                }
                // Sweeps converge sublinearly on sharply peaked kernels; a
                // few Newton steps on the potentials finish the job.
                if iterations == NEWTON_AFTER_SWEEPS && newton_polish(&kernel, &mut log_u, &mut log_v, tol) {
                    break;
                }
                if iterations >= cfg.iterations {
                    return Err(Error::NotConverged { tol, iterations });
                }
            }
        }
    }

    let plan = assemble(&kernel, &log_u, &log_v);
    if plan.iter().any(|v| !v.is_finite()) {
        return Err(Error::TransportOverflow);
    }
    Ok(TransportPlan {
        plan,
        log_u,
        log_v,
        iterations,
    })
}

/// Sweeps after which converge-mode solves switch to Newton steps.
const NEWTON_AFTER_SWEEPS: usize = 50;
const NEWTON_MAX_STEPS: usize = 100;

/// Dual objective `Σ aᵢ/B + Σ bⱼ/K − Σ exp(kᵢⱼ + aᵢ + bⱼ)`, concave in the
/// potentials and maximized exactly at the marginal-feasible plan.
fn dual_objective(kernel: &Array2<f64>, log_u: &Array1<f64>, log_v: &Array1<f64>) -> f64 {
    let (b, k) = kernel.dim();
    log_u.sum() / b as f64 + log_v.sum() / k as f64 - assemble(kernel, log_u, log_v).sum()
}

/// Damped Newton ascent on the dual with the last column potential held
/// fixed. Returns whether the marginals reached `tol`; on failure the
/// potentials are left at the best point found.
fn newton_polish(kernel: &Array2<f64>, log_u: &mut Array1<f64>, log_v: &mut Array1<f64>, tol: f64) -> bool {
    let (b, k) = kernel.dim();
    let n = b + k - 1;
    let mut value = dual_objective(kernel, log_u, log_v);
    for _ in 0..NEWTON_MAX_STEPS {
        let plan = assemble(kernel, log_u, log_v);
        if marginal_deviation(plan.view()) < tol {
            return true;
        }
        let rows = plan.sum_axis(Axis(1));
        let cols = plan.sum_axis(Axis(0));
        let mut hessian = nalgebra::DMatrix::<f64>::zeros(n, n);
        let mut grad = nalgebra::DVector::<f64>::zeros(n);
        for i in 0..b {
            hessian[(i, i)] = rows[i];
            grad[i] = 1.0 / b as f64 - rows[i];
            for j in 0..k - 1 {
                hessian[(i, b + j)] = plan[[i, j]];
                hessian[(b + j, i)] = plan[[i, j]];
            }
        }
        for j in 0..k - 1 {
            hessian[(b + j, b + j)] = cols[j];
            grad[b + j] = 1.0 / k as f64 - cols[j];
        }
        let Some(chol) = hessian.cholesky() else {
            return false;
        };
        let step = chol.solve(&grad);
        let slope = grad.dot(&step);
        let mut t = 1.0;
        loop {
            let mut u = log_u.clone();
            let mut v = log_v.clone();
            for i in 0..b {
                u[i] += t * step[i];
            }
            for j in 0..k - 1 {
                v[j] += t * step[b + j];
            }
            let candidate = dual_objective(kernel, &u, &v);
            if candidate.is_finite() && candidate >= value + 1e-4 * t * slope {
                *log_u = u;
                *log_v = v;
                value = candidate;
                break;
            }
            t *= 0.5;
            if t < 1e-10 {
                return false;
            }
        }
    }
    marginal_deviation(assemble(kernel, log_u, log_v).view()) < tol
}

fn assemble(kernel: &Array2<f64>, log_u: &Array1<f64>, log_v: &Array1<f64>) -> Array2<f64> {
    let mut plan = kernel.clone();
    for ((i, j), v) in plan.indexed_iter_mut() {
        *v = (*v + log_u[i] + log_v[j]).exp();
    }
    plan
}

/// Largest absolute deviation of any row sum from `1/B` or column sum from
/// `1/K`.
pub fn marginal_deviation(plan: ArrayView2<f64>) -> f64 {
    let (b, k) = plan.dim();
    let rows = plan
        .sum_axis(Axis(1))
        .iter()
        .map(|s| (s - 1.0 / b as f64).abs())
        .fold(0.0, f64::max);
    let cols = plan
        .sum_axis(Axis(0))
        .iter()
        .map(|s| (s - 1.0 / k as f64).abs())
        .fold(0.0, f64::max);
    rows.max(cols)
}
