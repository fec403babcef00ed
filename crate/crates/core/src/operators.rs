//! Averaging operators acting on site functions, the lineage generator and
//! their consistency diagnostics.
//!
//! Operators live on a *working grid* of spacing `h` (in site units). At
//! `h = 1` and `delta = 1` they act on the simulation grid itself; finer grids
//! are used by the refinement studies, where a ball of physical radius
//! `delta * R` spans `delta * R / h` grid points.

use std::ops::{Deref, DerefMut};

use nalgebra::{DMatrix, DVector};

use crate::error::OperatorError;
use crate::model::{Boundary, GrowthSpec, ModelParams};
use crate::numerics::{loglog_slope, CompensatedPrefix};

/// Real values indexed by site.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SiteFunction(pub Vec<f64>);

impl SiteFunction {
    pub fn constant(len: usize, value: f64) -> Self {
        SiteFunction(vec![value; len])
    }

    pub fn from_fn(len: usize, f: impl FnMut(usize) -> f64) -> Self {
        SiteFunction((0..len).map(f).collect())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn max_abs_diff(&self, other: &SiteFunction) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `sum_z self(z) other(z)`.
    pub fn dot(&self, other: &SiteFunction) -> f64 {
        self.iter().zip(other.iter()).map(|(a, b)| a * b).sum()
    }
}

impl Deref for SiteFunction {
    type Target = Vec<f64>;
    fn deref(&self) -> &Vec<f64> {
        &self.0
    }
}

impl DerefMut for SiteFunction {
    fn deref_mut(&mut self) -> &mut Vec<f64> {
        &mut self.0
    }
}

impl From<Vec<f64>> for SiteFunction {
    fn from(v: Vec<f64>) -> Self {
        SiteFunction(v)
    }
}

/// Spacing and boundary handling of the grid an operator is applied on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkingGrid {
    pub spacing: f64,
    pub boundary: Boundary,
}

impl WorkingGrid {
    /// The simulation grid: unit spacing.
    pub fn unit(boundary: Boundary) -> Self {
        Self {
            spacing: 1.0,
            boundary,
        }
    }

    /// Grid points covered by a ball of physical radius `delta * radius`.
    pub fn radius_sites(&self, delta: f64, radius: usize) -> Result<usize, OperatorError> {
        let m = delta * radius as f64 / self.spacing;
        let rounded = m.round();
        if !(delta > 0.0) || rounded < 1.0 || (m - rounded).abs() > 1e-9 * m.max(1.0) {
            return Err(OperatorError::FractionalBall(m));
        }
        Ok(rounded as usize)
    }
}

/// Average of `values` over the ball of `m` grid points around every point.
pub fn ball_average(values: &[f64], m: usize, boundary: Boundary) -> Vec<f64> {
    let n = values.len();
    let prefix = CompensatedPrefix::new(values);
    match boundary {
        Boundary::Clip => (0..n)
            .map(|i| {
                let a = i.saturating_sub(m);
                let b = (i + m + 1).min(n);
                prefix.range(a, b) / (b - a) as f64
            })
            .collect(),
        Boundary::Wrap => {
            assert!(2 * m < n, "wrapped ball wider than the ring");
            let v = (2 * m + 1) as f64;
            (0..n)
                .map(|i| {
                    let s = if i < m {
                        prefix.range(0, i + m + 1) + prefix.range(n + i - m, n)
                    } else if i + m >= n {
                        prefix.range(i - m, n) + prefix.range(0, i + m + 1 - n)
                    } else {
                        prefix.range(i - m, i + m + 1)
                    };
                    s / v
                })
                .collect()
        }
    }
}

/// Jump (dispersal) operator `u V_R delta^-2 (double ball average of phi - phi)`.
pub fn apply_jump_operator(
    phi: &SiteFunction,
    params: &ModelParams,
    grid: &WorkingGrid,
    delta: f64,
) -> Result<SiteFunction, OperatorError> {
    let m = grid.radius_sites(delta, params.radius)?;
    let once = ball_average(phi, m, grid.boundary);
    let twice = ball_average(&once, m, grid.boundary);
    let c = params.u * params.ball_volume() / (delta * delta);
    Ok(twice
        .iter()
        .zip(phi.iter())
        .map(|(a, p)| c * (a - p))
        .collect::<Vec<_>>()
        .into())
}

/// Growth operator `u V_R * avg_z[ r_x(nbar(x)) * avg_x(phi) ]`.
pub fn apply_growth_operator(
    phi: &SiteFunction,
    n: &SiteFunction,
    spec: &GrowthSpec,
    params: &ModelParams,
    grid: &WorkingGrid,
    delta: f64,
) -> Result<SiteFunction, OperatorError> {
    if phi.len() != n.len() {
        return Err(OperatorError::Length {
            expected: n.len(),
            got: phi.len(),
        });
    }
    let m = grid.radius_sites(delta, params.radius)?;
    let nbar = ball_average(n, m, grid.boundary);
    let phibar = ball_average(phi, m, grid.boundary);
    let inner = nbar
        .iter()
        .zip(&phibar)
        .enumerate()
        .map(|(i, (nb, pb))| Ok(spec.eval(i as f64 * grid.spacing, *nb)? * pb))
        .collect::<Result<Vec<f64>, OperatorError>>()?;
    let c = params.u * params.ball_volume();
    Ok(ball_average(&inner, m, grid.boundary)
        .into_iter()
        .map(|v| c * v)
        .collect::<Vec<_>>()
        .into())
}

/// Expected rate of change of `<n, phi>` on the simulation grid:
/// `<n, (L + R_n) phi>` with both operators at unit scale.
pub fn population_drift(
    n: &SiteFunction,
    phi: &SiteFunction,
    spec: &GrowthSpec,
    params: &ModelParams,
) -> Result<f64, OperatorError> {
    let grid = WorkingGrid::unit(params.boundary);
    let l = apply_jump_operator(phi, params, &grid, 1.0)?;
    let r = apply_growth_operator(phi, n, spec, params, &grid, 1.0)?;
    Ok(n.iter().zip(l.iter().zip(r.iter())).map(|(n, (a, b))| n * (a + b)).sum())
}

/// Integrand of the predictable quadratic variation of `<n, phi>`:
///
/// `u^2 / delta^(d+2) * sum_x h / ((nbar(x) + 1) N) * ( sum_{z in B(x)} h ((1 + delta^2 r_x(nbar)) nbar - n(z)) phi(z) )^2`
pub fn qv_formula(
    n: &SiteFunction,
    phi: &SiteFunction,
    params: &ModelParams,
    spec: &GrowthSpec,
    grid: &WorkingGrid,
    scaling: f64,
    delta: f64,
) -> Result<f64, OperatorError> {
    if phi.len() != n.len() {
        return Err(OperatorError::Length {
            expected: n.len(),
            got: phi.len(),
        });
    }
    let m = grid.radius_sites(delta, params.radius)?;
    let h = grid.spacing;
    let nbar = ball_average(n, m, grid.boundary);
    let len = n.len();
    let mut total = 0.0;
    for x in 0..len {
        let r = spec.eval(x as f64 * h, nbar[x])?;
        let target = (1.0 + delta * delta * r) * nbar[x];
        let ball = crate::model::Ball::new(x, m, len, grid.boundary);
        let inner: f64 = ball.map(|z| h * (target - n[z]) * phi[z]).sum();
        total += h * inner * inner / ((nbar[x] + 1.0) * scaling);
    }
    let d = params.dim as f64;
    Ok(params.u * params.u / delta.powf(d + 2.0) * total)
}

/// Rates of the nearest-neighbour lineage walk, `Q(i, i±1) = n(i±1) / n(i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMatrix(pub DMatrix<f64>);

impl GeneratorMatrix {
    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn apply(&self, f: &SiteFunction) -> SiteFunction {
        let v = &self.0 * DVector::from_column_slice(f);
        SiteFunction(v.as_slice().to_vec())
    }

    pub fn max_row_sum_abs(&self) -> f64 {
        self.0
            .row_iter()
            .map(|r| r.iter().sum::<f64>().abs())
            .fold(0.0, f64::max)
    }
}

fn check_positive(n: &SiteFunction) -> Result<(), OperatorError> {
    match n.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        Some((site, &mass)) => Err(OperatorError::NonPositivePopulation { site, mass }),
        None => Ok(()),
    }
}

/// Tridiagonal lineage generator for population profile `n`.
///
/// Under [`Boundary::Clip`] the end rows only jump to their single in-grid
/// neighbour; under [`Boundary::Wrap`] neighbours are taken on the ring.
pub fn lineage_generator(
    n: &SiteFunction,
    boundary: Boundary,
) -> Result<GeneratorMatrix, OperatorError> {
    check_positive(n)?;
    let len = n.len();
    let mut q = DMatrix::zeros(len, len);
    for i in 0..len {
        let neighbours: [Option<usize>; 2] = match boundary {
            Boundary::Clip => [i.checked_sub(1), (i + 1 < len).then_some(i + 1)],
            Boundary::Wrap => [Some((i + len - 1) % len), Some((i + 1) % len)],
        };
        let mut out = 0.0;
        for j in neighbours.into_iter().flatten() {
            if j == i {
                continue;
            }
            let rate = n[j] / n[i];
            q[(i, j)] += rate;
            out += rate;
        }
        q[(i, i)] = -out;
    }
    Ok(GeneratorMatrix(q))
}

/// Residual of the lineage generator against its defining ratio formula.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftReport {
    /// `max_i |(Qf)(i) - [n(i+1)(f(i+1)-f(i)) + n(i-1)(f(i-1)-f(i))] / n(i)|`
    /// over interior sites.
    pub formula_residual: f64,
}

pub fn drift_consistency_check(
    n: &SiteFunction,
    f: &SiteFunction,
) -> Result<DriftReport, OperatorError> {
    if f.len() != n.len() {
        return Err(OperatorError::Length {
            expected: n.len(),
            got: f.len(),
        });
    }
    let q = lineage_generator(n, Boundary::Clip)?;
    let qf = q.apply(f);
    let mut residual: f64 = 0.0;
    for i in 1..n.len().saturating_sub(1) {
        let exact = (n[i + 1] * (f[i + 1] - f[i]) + n[i - 1] * (f[i - 1] - f[i])) / n[i];
        residual = residual.max((qf[i] - exact).abs());
    }
    Ok(DriftReport {
        formula_residual: residual,
    })
}

/// Errors of a sequence of grid refinements and their fitted order.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementStudy {
    pub steps: Vec<f64>,
    pub errors: Vec<f64>,
    pub slope: f64,
}

/// Compares `Q f / h^2` on grids of spacing `h` over `[a, b]` with the
/// continuum operator `f'' + 2 (n'/n) f'`, given as `target`.
pub fn generator_refinement(
    n: impl Fn(f64) -> f64,
    f: impl Fn(f64) -> f64,
    target: impl Fn(f64) -> f64,
    (a, b): (f64, f64),
    steps: &[f64],
) -> Result<RefinementStudy, OperatorError> {
    let mut errors = Vec::with_capacity(steps.len());
    for &h in steps {
        let k = ((b - a) / h).round() as usize;
        let xs: Vec<f64> = (0..=k).map(|i| a + i as f64 * h).collect();
        let nv = SiteFunction(xs.iter().map(|&x| n(x)).collect());
        let fv = SiteFunction(xs.iter().map(|&x| f(x)).collect());
        let q = lineage_generator(&nv, Boundary::Clip)?;
        let qf = q.apply(&fv);
        let err = (1..k)
            .map(|i| (qf[i] / (h * h) - target(xs[i])).abs())
            .fold(0.0, f64::max);
        errors.push(err);
    }
    Ok(RefinementStudy {
        slope: loglog_slope(steps, &errors),
        steps: steps.to_vec(),
        errors,
    })
}

/// One refinement level of the jump-operator convergence study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRow {
    pub delta: f64,
    pub spacing: f64,
    pub radius_sites: usize,
    pub points: usize,
    pub max_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceStudy {
    pub rows: Vec<ConvergenceRow>,
    pub slope: f64,
}

/// Max-norm error of the jump operator against `u V_R R^2/(d+2) phi''` for
/// `phi(x) = sin(2 pi x / L)` on a ring of length `L = grid_len`.
///
/// Each level uses `m = m0 / delta^2` grid points per ball radius, so the
/// grid-averaging bias shrinks at the same `delta^2` rate as the Taylor
/// remainder of the continuum double average.
pub fn jump_operator_convergence(
    params: &ModelParams,
    deltas: &[f64],
    m0: f64,
) -> Result<ConvergenceStudy, OperatorError> {
    let len = params.grid_len as f64;
    let k = 2.0 * std::f64::consts::PI / len;
    let coef = params.diffusion_constant();
    let mut rows = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let m = (m0 / (delta * delta)).round().max(1.0);
        let spacing = delta * params.radius as f64 / m;
        let points_f = len / spacing;
        let points = points_f.round() as usize;
        if (points_f - points as f64).abs() > 1e-6 {
            return Err(OperatorError::FractionalBall(points_f));
        }
        let grid = WorkingGrid {
            spacing,
            boundary: Boundary::Wrap,
        };
        let phi = SiteFunction::from_fn(points, |i| (k * i as f64 * spacing).sin());
        let out = apply_jump_operator(&phi, params, &grid, delta)?;
        let max_error = out
            .iter()
            .zip(phi.iter())
            .map(|(o, p)| (o + coef * k * k * p).abs())
            .fold(0.0, f64::max);
        rows.push(ConvergenceRow {
            delta,
            spacing,
            radius_sites: m as usize,
            points,
            max_error,
        });
    }
    let slope = loglog_slope(
        &rows.iter().map(|r| r.delta).collect::<Vec<_>>(),
        &rows.iter().map(|r| r.max_error).collect::<Vec<_>>(),
    );
    Ok(ConvergenceStudy { rows, slope })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;

    fn wrap_params() -> ModelParams {
        ModelParams {
            boundary: Boundary::Wrap,
            ..ModelParams::reference(21.2625)
        }
    }

    #[test]
    fn jump_annihilates_constants() {
        for b in [Boundary::Clip, Boundary::Wrap] {
            let p = ModelParams {
                boundary: b,
                ..wrap_params()
            };
            let out =
                apply_jump_operator(&SiteFunction::constant(101, 2.5), &p, &WorkingGrid::unit(b), 1.0)
                    .unwrap();
            assert!(out.iter().all(|v| v.abs() < 1e-14));
        }
    }

    #[test]
    fn jump_output_sums_to_zero_on_ring() {
        let p = wrap_params();
        let phi = SiteFunction::from_fn(101, |i| ((i * i) % 17) as f64 - 3.0);
        let out = apply_jump_operator(&phi, &p, &WorkingGrid::unit(Boundary::Wrap), 1.0).unwrap();
        assert!(out.iter().sum::<f64>().abs() < 1e-11);
    }

    #[test]
    fn jump_on_quadratic_interior() {
        // on the unit grid the discrete double average of x^2 exceeds x^2 by
        // 2 R (R + 1) / 3 exactly
        let p = wrap_params();
        let phi = SiteFunction::from_fn(101, |i| (i as f64).powi(2));
        let out = apply_jump_operator(&phi, &p, &WorkingGrid::unit(Boundary::Clip), 1.0).unwrap();
        let r = p.radius as f64;
        let expect = p.u * p.ball_volume() * 2.0 * r * (r + 1.0) / 3.0;
        assert!((out[50] - expect).abs() < 1e-9);
    }

    #[test]
    fn jump_on_quadratic_refines_at_second_order() {
        let p = wrap_params();
        let r = p.radius as f64;
        let target = p.diffusion_constant() * 2.0;
        let mut errs = vec![];
        let deltas = [0.25, 0.125, 0.0625];
        for &delta in &deltas {
            let m: f64 = 1.0 / (delta * delta);
            let h = delta * r / m;
            let grid = WorkingGrid {
                spacing: h,
                boundary: Boundary::Clip,
            };
            let pts = (4.0 * m) as usize * 4 + 1;
            let phi = SiteFunction::from_fn(pts, |i| (i as f64 * h).powi(2));
            let out = apply_jump_operator(&phi, &p, &grid, delta).unwrap();
            errs.push((out[pts / 2] - target).abs());
        }
        let slope = loglog_slope(&deltas, &errs);
        assert!((slope - 2.0).abs() < 0.05, "slope {slope}");
    }

    #[test]
    fn sine_is_an_eigenfunction() {
        let p = wrap_params();
        let study = jump_operator_convergence(&p, &[0.25], 1.0).unwrap();
        let row = study.rows[0];
        let k = 2.0 * std::f64::consts::PI / 101.0;
        let scale = p.diffusion_constant() * k * k;
        // the discrete ball of m points per radius overstates the second
        // moment by a factor 1 + 1/m
        let rel = row.max_error / scale;
        assert!((rel - 1.0 / row.radius_sites as f64).abs() < 0.01, "relative error {rel}");
    }

    #[test]
    fn fractional_ball_rejected() {
        let p = wrap_params();
        let g = WorkingGrid::unit(Boundary::Wrap);
        assert!(matches!(
            apply_jump_operator(&SiteFunction::constant(101, 1.0), &p, &g, 0.3),
            Err(OperatorError::FractionalBall(_))
        ));
    }

    #[test]
    fn growth_operator_zero_growth() {
        let p = wrap_params();
        let g = WorkingGrid::unit(Boundary::Wrap);
        let phi = SiteFunction::from_fn(101, |i| (i as f64 * 0.3).cos());
        let out = apply_growth_operator(
            &phi,
            &SiteFunction::constant(101, 3.0),
            &GrowthSpec::zero(101),
            &p,
            &g,
            1.0,
        )
        .unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn growth_operator_constants_pass_through() {
        let p = wrap_params();
        let g = WorkingGrid::unit(Boundary::Wrap);
        let spec = GrowthSpec::LogisticConst { kappa: 5.0 };
        let out = apply_growth_operator(
            &SiteFunction::constant(101, 1.0),
            &SiteFunction::constant(101, 3.0),
            &spec,
            &p,
            &g,
            1.0,
        )
        .unwrap();
        let expect = p.u * p.ball_volume() * 2.0;
        assert!(out.iter().all(|v| (v - expect).abs() < 1e-13));
    }

    #[test]
    fn growth_operator_valley_interior() {
        let p = ModelParams::reference(21.2625);
        let g = WorkingGrid::unit(Boundary::Clip);
        let spec = GrowthSpec::valley();
        let out = apply_growth_operator(
            &SiteFunction::constant(101, 1.0),
            &SiteFunction::constant(101, 3.0),
            &spec,
            &p,
            &g,
            1.0,
        )
        .unwrap();
        let direct: f64 = (46..=54).map(|y| spec.eval_site(y, 3.0).unwrap()).sum::<f64>() / 9.0;
        assert!((out[50] - p.u * 9.0 * direct).abs() < 1e-14);
    }

    #[test]
    fn drift_matches_event_compensator_on_ring() {
        // sum over centres of u * sum_{z in B(x)} ((1 + r) nbar - n(z)) phi(z)
        let p = wrap_params();
        let spec = GrowthSpec::valley();
        let n = SiteFunction::from_fn(101, |i| 3.0 + (i as f64 * 0.2).sin());
        let phi = SiteFunction::from_fn(101, |i| (i as f64 * 0.05).cos());
        let mut direct = 0.0;
        for x in 0..101 {
            let nb = crate::model::local_mean(&n, x, &p);
            let r = spec.eval_site(x, nb).unwrap();
            direct += p.u * p.ball(x).map(|z| ((1.0 + r) * nb - n[z]) * phi[z]).sum::<f64>();
        }
        let drift = population_drift(&n, &phi, &spec, &p).unwrap();
        assert!((drift - direct).abs() < 1e-12 * direct.abs().max(1.0));
    }

    #[test]
    fn generator_flat_profile() {
        let q = lineage_generator(&SiteFunction::constant(6, 3.0), Boundary::Clip).unwrap();
        assert_eq!(q.0[(2, 1)], 1.0);
        assert_eq!(q.0[(2, 3)], 1.0);
        assert_eq!(q.0[(2, 2)], -2.0);
        assert_eq!(q.0[(0, 0)], -1.0);
        assert_eq!(q.0[(0, 5)], 0.0);
        let w = lineage_generator(&SiteFunction::constant(6, 3.0), Boundary::Wrap).unwrap();
        assert_eq!(w.0[(0, 5)], 1.0);
    }

    #[test]
    fn generator_geometric_profile() {
        let q = lineage_generator(&SiteFunction(vec![1.0, 2.0, 4.0]), Boundary::Clip).unwrap();
        assert_eq!(q.0[(1, 0)], 0.5);
        assert_eq!(q.0[(1, 2)], 2.0);
        assert_eq!(q.0[(1, 1)], -2.5);
    }

    #[test]
    fn generator_rejects_empty_site() {
        let r = lineage_generator(&SiteFunction(vec![1.0, 0.0, 4.0]), Boundary::Clip);
        assert!(matches!(r, Err(OperatorError::NonPositivePopulation { site: 1, .. })));
    }

    #[test]
    fn drift_check_flat_and_constant() {
        let flat = SiteFunction::constant(20, 2.0);
        let sq = SiteFunction::from_fn(20, |i| (i as f64).powi(2));
        let q = lineage_generator(&flat, Boundary::Clip).unwrap();
        let qf = q.apply(&sq);
        assert!((1..19).all(|i| (qf[i] - 2.0).abs() < 1e-12));
        let rep = drift_consistency_check(&flat, &sq).unwrap();
        assert!(rep.formula_residual < 1e-12);
        let n = SiteFunction::from_fn(20, |i| 1.0 + i as f64);
        let c = lineage_generator(&n, Boundary::Clip)
            .unwrap()
            .apply(&SiteFunction::constant(20, 7.0));
        assert!(c.iter().all(|v| v.abs() < 1e-13));
    }

    #[test]
    fn exponential_profile_drift() {
        let alpha = 0.7;
        let study = generator_refinement(
            |x| (alpha * x).exp(),
            |x| x,
            |_| 2.0 * alpha,
            (0.0, 2.0),
            &[0.1, 0.05, 0.025, 0.0125],
        )
        .unwrap();
        assert!((study.slope - 2.0).abs() < 0.1, "{study:?}");
        // 2 sinh(alpha h) / h = 2 alpha + alpha^3 h^2 / 3 + ...
        let e0 = alpha.powi(3) * 0.01 / 3.0;
        assert!((study.errors[0] - e0).abs() / e0 < 0.01);
    }

    #[test]
    fn qv_vanishes_for_flat_zero_growth() {
        let p = wrap_params();
        let g = WorkingGrid::unit(Boundary::Wrap);
        let phi = SiteFunction::from_fn(101, |i| (i as f64 * 0.1).sin());
        let flat = SiteFunction::constant(101, 3.0);
        let v = qv_formula(&flat, &phi, &p, &GrowthSpec::zero(101), &g, 1.0, 1.0).unwrap();
        assert!(v.abs() < 1e-20);
        let z = qv_formula(&flat, &SiteFunction::constant(101, 0.0), &p, &GrowthSpec::valley(), &g, 1.0, 1.0)
            .unwrap();
        assert_eq!(z, 0.0);
    }

    #[test]
    fn qv_single_ball_by_hand() {
        let p = ModelParams {
            grid_len: 3,
            radius: 1,
            ..wrap_params()
        };
        let g = WorkingGrid::unit(Boundary::Wrap);
        let n = SiteFunction(vec![1.0, 3.0, 2.0]);
        let phi = SiteFunction(vec![1.0, 0.5, -1.0]);
        let spec = GrowthSpec::LogisticConst { kappa: 4.0 };
        // every ball is the whole ring: nbar = 2, r = 2, (1 + r) nbar = 6
        let inner: f64 = (6.0 - 1.0) * 1.0 + (6.0 - 3.0) * 0.5 + (6.0 - 2.0) * -1.0;
        let expect = p.u * p.u * 3.0 * inner * inner / 3.0;
        let v = qv_formula(&n, &phi, &p, &spec, &g, 1.0, 1.0).unwrap();
        assert!((v - expect).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn generator_rows_conserve(vals in proptest::collection::vec(0.01f64..50.0, 3..30)) {
            let n = SiteFunction(vals);
            for b in [Boundary::Clip, Boundary::Wrap] {
                let q = lineage_generator(&n, b).unwrap();
                proptest::prop_assert!(q.max_row_sum_abs() < 1e-14 * 50.0 / 0.01);
                for i in 0..q.dim() {
                    for j in 0..q.dim() {
                        if i != j {
                            proptest::prop_assert!(q.0[(i, j)] >= 0.0);
                        }
                    }
                }
            }
        }

        #[test]
        fn qv_is_nonnegative(
            vals in proptest::collection::vec(0.1f64..20.0, 101),
            phis in proptest::collection::vec(-1.0f64..1.0, 101),
        ) {
            let p = ModelParams::reference(21.2625);
            let g = WorkingGrid::unit(Boundary::Clip);
            let v = qv_formula(&SiteFunction(vals), &SiteFunction(phis), &p, &GrowthSpec::valley(), &g, 1.0, 1.0).unwrap();
            proptest::prop_assert!(v >= 0.0);
        }
    }
}
