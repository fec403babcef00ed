//! Analytical identity predictor built from lineage transition kernels.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::PredictError;
use crate::model::{Boundary, ModelParams};
use crate::operators::{lineage_generator, GeneratorMatrix, SiteFunction};
use crate::pde::Trajectory;

/// Negative entries down to this size are treated as round-off and zeroed.
pub const CLAMP_TOL: f64 = 1e-14;
const MAX_TAYLOR_TERMS: usize = 60;

fn inf_norm(a: &DMatrix<f64>) -> f64 {
    a.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `exp(scale * a)` by scaling and squaring with a truncated Taylor series.
pub fn matrix_exponential(a: &DMatrix<f64>, scale: f64) -> Result<DMatrix<f64>, PredictError> {
    if !a.is_square() {
        return Err(PredictError::NotSquare(a.nrows(), a.ncols()));
    }
    if !scale.is_finite() || a.iter().any(|v| !v.is_finite()) {
        return Err(PredictError::NonFinite);
    }
    let dim = a.nrows();
    let scaled = a * scale;
    let norm = inf_norm(&scaled);
    let s = if norm > 1.0 { norm.log2().ceil() as i32 } else { 0 };
    let b = scaled / 2f64.powi(s);
    let mut sum = DMatrix::identity(dim, dim);
    let mut term = DMatrix::identity(dim, dim);
    for k in 1..=MAX_TAYLOR_TERMS {
        term = &term * &b / k as f64;
        sum += &term;
        if inf_norm(&term) < 1e-16 * inf_norm(&sum) {
            break;
        }
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    if sum.iter().any(|v| !v.is_finite()) {
        return Err(PredictError::NonFinite);
    }
    Ok(sum)
}

fn clamp_negative(m: &mut DMatrix<f64>) -> Result<(), PredictError> {
    for v in m.iter_mut() {
        if *v < 0.0 {
            if *v < -CLAMP_TOL {
                return Err(PredictError::Input(format!("transition probability {v} is negative")));
            }
            *v = 0.0;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub mu: f64,
    pub t_max: usize,
    /// Multiplier on the generator before exponentiation.
    pub rate_scale: f64,
    pub boundary: Boundary,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            mu: 1e-4,
            t_max: 28,
            rate_scale: 1.0,
            boundary: Boundary::Clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineageKernel {
    pub q: GeneratorMatrix,
    /// One-step transition matrix `exp(rate_scale * Q)`.
    pub p: DMatrix<f64>,
    /// `K_0 = I`, `K_t = K_{t-1} P` for `t = 0..=t_max`.
    pub k: Vec<DMatrix<f64>>,
    /// Coalescence weights `1 / (n + 1)`.
    pub d: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaMatrix {
    pub entries: DMatrix<f64>,
    pub t_max: usize,
    pub mu: f64,
    pub rate_scale: f64,
}

impl ThetaMatrix {
    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }
}

/// `K D K^T` with `D` diagonal.
fn weighted_gram(k: &DMatrix<f64>, d: &[f64]) -> DMatrix<f64> {
    let mut kd = k.clone();
    for (mut col, w) in kd.column_iter_mut().zip(d) {
        col *= *w;
    }
    kd * k.transpose()
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// `Theta = sum_{t=1}^{t_max} exp(-2 mu t) K_t D K_t^T`.
pub fn build_kernel(
    n: &SiteFunction,
    cfg: &KernelConfig,
) -> Result<(LineageKernel, ThetaMatrix), PredictError> {
    if cfg.t_max < 1 {
        return Err(PredictError::Input("t_max must be at least 1".into()));
    }
    if !(cfg.mu >= 0.0 && cfg.rate_scale >= 0.0) {
        return Err(PredictError::Input("mu and rate_scale must be non-negative".into()));
    }
    let q = lineage_generator(n, cfg.boundary)?;
    let mut p = matrix_exponential(&q.0, cfg.rate_scale)?;
    clamp_negative(&mut p)?;
    let d: Vec<f64> = n.iter().map(|v| 1.0 / (v + 1.0)).collect();
    let dim = n.len();
    let mut k = vec![DMatrix::identity(dim, dim)];
    let mut theta = DMatrix::zeros(dim, dim);
    for t in 1..=cfg.t_max {
        let mut next = &k[t - 1] * &p;
        clamp_negative(&mut next)?;
        theta += weighted_gram(&next, &d) * (-2.0 * cfg.mu * t as f64).exp();
        k.push(next);
    }
    symmetrize(&mut theta);
    Ok((
        LineageKernel { q, p, k, d },
        ThetaMatrix {
            entries: theta,
            t_max: cfg.t_max,
            mu: cfg.mu,
            rate_scale: cfg.rate_scale,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeDependentConfig {
    pub mu: f64,
    pub s0: f64,
    pub t: f64,
    /// Generator multiplier; `None` uses `u V_R R^2 / (d+2)`.
    pub rate_constant: Option<f64>,
    /// Overall factor; `None` uses `u^2 V_R^2`.
    pub prefactor: Option<f64>,
    /// Intervals of the path's time grid longer than this are subdivided.
    pub max_ds: f64,
}

impl TimeDependentConfig {
    pub fn new(mu: f64, s0: f64, t: f64) -> Self {
        TimeDependentConfig {
            mu,
            s0,
            t,
            rate_constant: None,
            prefactor: None,
            max_ds: 1.0,
        }
    }
}

fn quadrature_grid(path: &Trajectory, s0: f64, t: f64, max_ds: f64) -> Vec<f64> {
    let mut knots = vec![s0];
    knots.extend(path.times.iter().copied().filter(|&s| s > s0 && s < t));
    knots.push(t);
    let mut grid = vec![s0];
    for w in knots.windows(2) {
        let pieces = ((w[1] - w[0]) / max_ds).ceil().max(1.0) as usize;
        for k in 1..=pieces {
            grid.push(w[0] + (w[1] - w[0]) * k as f64 / pieces as f64);
        }
    }
    grid
}

/// Identity weights from a time-varying population profile.
///
/// Lineage densities started from site indicators at time `t` are carried
/// backwards to `s0` with the generator frozen at each interval midpoint, and
/// `exp(-2 mu (t-s)) sum_z G_s(l1,z) G_s(l2,z) / (n_s(z) + 1)` is integrated
/// over `s` by the trapezoid rule.
pub fn theta_time_dependent(
    n_path: &Trajectory,
    params: &ModelParams,
    cfg: &TimeDependentConfig,
) -> Result<DMatrix<f64>, PredictError> {
    if n_path.times.is_empty() {
        return Err(PredictError::Input("empty population path".into()));
    }
    if !(cfg.t >= cfg.s0) || !(cfg.max_ds > 0.0) || !(cfg.mu >= 0.0) {
        return Err(PredictError::Input("need s0 <= t, max_ds > 0 and mu >= 0".into()));
    }
    let c = cfg.rate_constant.unwrap_or_else(|| params.diffusion_constant());
    let uv = params.u * params.ball_volume();
    let pref = cfg.prefactor.unwrap_or(uv * uv);
    let dim = n_path.states[0].len();
    let grid = quadrature_grid(n_path, cfg.s0, cfg.t, cfg.max_ds);
    let integrand = |g: &DMatrix<f64>, s: f64| -> DMatrix<f64> {
        let d: Vec<f64> = n_path.at(s).iter().map(|v| 1.0 / (v + 1.0)).collect();
        weighted_gram(g, &d) * (-2.0 * cfg.mu * (cfg.t - s)).exp()
    };
    let mut out = DMatrix::zeros(dim, dim);
    let mut g = DMatrix::identity(dim, dim);
    let mut f_hi = integrand(&g, cfg.t);
    for w in grid.windows(2).rev() {
        let (lo, hi) = (w[0], w[1]);
        let ds = hi - lo;
        let q = lineage_generator(&n_path.at(0.5 * (lo + hi)), params.boundary)?;
        let mut step = matrix_exponential(&q.0, c * ds)?;
        clamp_negative(&mut step)?;
        g = &g * &step;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(PredictError::NonFinite);
        }
        let f_lo = integrand(&g, lo);
        out += (&f_lo + &f_hi) * (0.5 * ds);
        f_hi = f_lo;
    }
    symmetrize(&mut out);
    Ok(out * pref)
}

/// Predicted raw identity probability `theta / (N delta)`.
pub fn align_prediction(theta: f64, n: f64, delta: f64) -> f64 {
    theta / (n * delta)
}

/// Inverse of [`align_prediction`]: puts a raw probability on the kernel scale.
pub fn align_inverse(p: f64, n: f64, delta: f64) -> f64 {
    p * n * delta
}

/// Alignment constant minimising the squared log distance between
/// `theta / N` and `observed`, over pairs where both are positive.
pub fn best_alignment(theta: &[f64], observed: &[f64]) -> Option<f64> {
    let logs: Vec<f64> = theta
        .iter()
        .zip(observed)
        .filter(|(t, o)| **t > 0.0 && **o > 0.0)
        .map(|(t, o)| t.ln() - o.ln())
        .collect();
    if logs.is_empty() {
        return None;
    }
    Some((logs.iter().sum::<f64>() / logs.len() as f64).exp())
}
