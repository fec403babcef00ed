//! Identity-by-descent estimators, replicate statistics and the martingale
//! bracket diagnostic.

use serde::{Deserialize, Serialize};

use crate::error::AnalysisError;
use crate::field::{PopulationField, DEFAULT_TYPE_CAPACITY};
use crate::model::{local_mean, GrowthSpec, ModelParams};
use crate::numerics::{loglog_slope, quantile_sorted};
use crate::operators::{qv_formula, SiteFunction, WorkingGrid};
use crate::sim::Simulation;

/// Probability that individuals sampled at `l1` and `l2` share an explicit
/// type. The field must be mutation-synced.
pub fn identity_point(field: &PopulationField, l1: usize, l2: usize) -> Result<f64, AnalysisError> {
    let (n1, n2) = (field.total(l1), field.total(l2));
    if !(n1 > 0.0) {
        return Err(AnalysisError::EmptySite(l1));
    }
    if !(n2 > 0.0) {
        return Err(AnalysisError::EmptySite(l2));
    }
    // fixed summation order keeps the result exactly symmetric
    let (a, b) = (l1.min(l2), l1.max(l2));
    let mut ids: Vec<_> = field.types_at(a).collect();
    ids.sort_by_key(|t| t.0);
    let num: f64 = ids.iter().map(|&(id, m)| m * field.type_mass(b, id)).sum();
    Ok(num / (n1 * n2))
}

fn weighted_type_sums(field: &PopulationField, psi: &SiteFunction) -> Vec<f64> {
    let mut acc = vec![0.0; field.ledger().capacity()];
    for (x, w) in psi.iter().enumerate() {
        if *w != 0.0 {
            for (id, m) in field.types_at(x) {
                acc[id as usize] += w * m;
            }
        }
    }
    acc
}

/// `sum_{z1,z2} psi1(z1) psi2(z2) sum_k rho(z1,k) rho(z2,k)`.
pub fn identity_numerator(field: &PopulationField, psi1: &SiteFunction, psi2: &SiteFunction) -> f64 {
    let a = weighted_type_sums(field, psi1);
    let b = weighted_type_sums(field, psi2);
    a.iter().zip(&b).map(|(x, y)| x * y).sum()
}

/// Identity probability for individuals sampled with densities `psi1`, `psi2`.
pub fn identity_weighted(
    field: &PopulationField,
    psi1: &SiteFunction,
    psi2: &SiteFunction,
) -> Result<f64, AnalysisError> {
    if psi1.len() != field.len() || psi2.len() != field.len() {
        return Err(AnalysisError::Input("sampling densities must cover the grid".into()));
    }
    if psi1.iter().chain(psi2.iter()).any(|v| *v < 0.0) {
        return Err(AnalysisError::Input("sampling densities must be non-negative".into()));
    }
    let n = field.totals();
    let (d1, d2) = (psi1.dot(&n), psi2.dot(&n));
    if !(d1 > 0.0 && d2 > 0.0) {
        return Err(AnalysisError::ZeroDenominator);
    }
    Ok(identity_numerator(field, psi1, psi2) / (d1 * d2))
}

/// Identity with each reference site, for every site of one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentitySample {
    pub refs: Vec<usize>,
    /// `values[i][x]` is the identity between `refs[i]` and `x`.
    pub values: Vec<Vec<f64>>,
}

pub fn identity_profile(field: &PopulationField, refs: &[usize]) -> Result<IdentitySample, AnalysisError> {
    let mut values = Vec::with_capacity(refs.len());
    for &r in refs {
        if r >= field.len() {
            return Err(AnalysisError::Input(format!("reference site {r} outside the grid")));
        }
        values.push(
            (0..field.len())
                .map(|x| identity_point(field, r, x))
                .collect::<Result<Vec<_>, _>>()?,
        );
    }
    Ok(IdentitySample {
        refs: refs.to_vec(),
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentityScale {
    Raw,
    /// Multiplied by `N delta`.
    Aligned { n: f64, delta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityRow {
    pub ref_site: usize,
    pub x: usize,
    pub mean: f64,
    pub median: f64,
    pub p25: f64,
    pub p75: f64,
    pub p05: f64,
    pub p95: f64,
    pub n_replicates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityTable {
    pub rows: Vec<IdentityRow>,
    pub scale: IdentityScale,
}

impl IdentityTable {
    /// Rows rescaled by `N delta`; only valid on a raw table.
    pub fn aligned(&self, n: f64, delta: f64) -> IdentityTable {
        let c = n * delta;
        IdentityTable {
            rows: self
                .rows
                .iter()
                .map(|r| IdentityRow {
                    mean: r.mean * c,
                    median: r.median * c,
                    p25: r.p25 * c,
                    p75: r.p75 * c,
                    p05: r.p05 * c,
                    p95: r.p95 * c,
                    ..*r
                })
                .collect(),
            scale: IdentityScale::Aligned { n, delta },
        }
    }

    pub fn row(&self, ref_site: usize, x: usize) -> Option<&IdentityRow> {
        self.rows.iter().find(|r| r.ref_site == ref_site && r.x == x)
    }
}

/// Mean, median and type-7 percentile bands across replicates.
pub fn replicate_stats(samples: &[IdentitySample]) -> Result<IdentityTable, AnalysisError> {
    let first = samples
        .first()
        .ok_or_else(|| AnalysisError::Input("no replicates".into()))?;
    let len = first.values.first().map_or(0, Vec::len);
    if samples
        .iter()
        .any(|s| s.refs != first.refs || s.values.iter().any(|v| v.len() != len))
    {
        return Err(AnalysisError::Input("replicates disagree on reference sites or grid".into()));
    }
    let count = samples.len();
    let mut rows = Vec::with_capacity(first.refs.len() * len);
    let mut buf = vec![0.0; count];
    for (i, &ref_site) in first.refs.iter().enumerate() {
        for x in 0..len {
            for (b, s) in buf.iter_mut().zip(samples) {
                *b = s.values[i][x];
            }
            let mean = buf.iter().sum::<f64>() / count as f64;
            buf.sort_by(f64::total_cmp);
            let q = |p| quantile_sorted(&buf, p);
            rows.push(IdentityRow {
                ref_site,
                x,
                mean,
                median: q(0.5),
                p25: q(0.25),
                p75: q(0.75),
                p05: q(0.05),
                p95: q(0.95),
                n_replicates: count,
            });
        }
    }
    Ok(IdentityTable {
        rows,
        scale: IdentityScale::Raw,
    })
}

/// Exact drift of `<n, phi>` under the event dynamics:
/// `sum_x u sum_{z in B(x)} ((1 + r_x(nbar)) nbar - n(z)) phi(z)`.
pub fn event_drift(
    n: &[f64],
    phi: &[f64],
    spec: &GrowthSpec,
    params: &ModelParams,
) -> Result<f64, AnalysisError> {
    let mut total = 0.0;
    for x in 0..n.len() {
        let nbar = local_mean(n, x, params);
        let r = spec.eval_site(x, nbar).map_err(crate::error::OperatorError::from)?;
        let target = (1.0 + r) * nbar;
        total += params.ball(x).map(|z| (target - n[z]) * phi[z]).sum::<f64>();
    }
    Ok(params.u * total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QvConfig {
    pub params: ModelParams,
    pub spec: GrowthSpec,
    /// Frozen starting profile, all mass in the uniform pool.
    pub start: SiteFunction,
    pub phi: SiteFunction,
    pub horizon: f64,
    pub replicates: usize,
    pub seed: u64,
    /// Number of intervals of the mean-path quadrature.
    pub time_points: usize,
}

impl QvConfig {
    pub fn new(params: ModelParams, spec: GrowthSpec, start: SiteFunction, phi: SiteFunction) -> Self {
        QvConfig {
            params,
            spec,
            start,
            phi,
            horizon: 1.0,
            replicates: 2000,
            seed: 0,
            time_points: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QvReport {
    /// Sample variance of the compensated increment of `<n, phi>`.
    pub empirical_variance: f64,
    /// Time integral of the bracket integrand along the mean path.
    pub predicted: f64,
    /// Replicate average of the bracket integral along each path.
    pub predicted_per_path: f64,
    pub ratio: f64,
    pub replicates: usize,
}

/// Outcome of one bracket-diagnostic replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct QvReplicate {
    /// `<n_T, phi> - <n_0, phi> - int_0^T drift ds`.
    pub increment: f64,
    /// Bracket integrand integrated along this path.
    pub path_bracket: f64,
    /// Profiles at the quadrature times `k T / time_points`.
    pub profiles: Vec<SiteFunction>,
}

fn qv_integrand(n: &[f64], cfg: &QvConfig) -> Result<f64, AnalysisError> {
    let grid = WorkingGrid::unit(cfg.params.boundary);
    Ok(qv_formula(
        &SiteFunction(n.to_vec()),
        &cfg.phi,
        &cfg.params,
        &cfg.spec,
        &grid,
        1.0,
        1.0,
    )?)
}

/// Runs replicate `stream` of the bracket diagnostic.
pub fn qv_replicate(cfg: &QvConfig, stream: u64) -> Result<QvReplicate, AnalysisError> {
    let p = &cfg.params;
    let field = PopulationField::from_profile(&cfg.start, DEFAULT_TYPE_CAPACITY);
    let mut sim = Simulation::from_field(p.clone(), cfg.spec.clone(), field, cfg.seed, stream, cfg.horizon)?;
    let mut n = cfg.start.0.clone();
    let phi = &cfg.phi;
    let start_value: f64 = n.iter().zip(phi.iter()).map(|(a, b)| a * b).sum();
    let mut drift = event_drift(&n, phi, &cfg.spec, p)?;
    let mut bracket = qv_integrand(&n, cfg)?;
    let mut compensator = 0.0;
    let mut path_bracket = 0.0;
    let mut last = 0.0;
    let dt_obs = cfg.horizon / cfg.time_points as f64;
    let mut next_obs = 0usize;
    let mut profiles = Vec::with_capacity(cfg.time_points + 1);
    loop {
        let rec = sim.step()?;
        let t = rec.map_or(cfg.horizon, |r| r.time);
        while next_obs <= cfg.time_points && (next_obs as f64 * dt_obs < t || rec.is_none()) {
            profiles.push(SiteFunction(n.clone()));
            next_obs += 1;
        }
        compensator += drift * (t - last);
        path_bracket += bracket * (t - last);
        last = t;
        match rec {
            None => break,
            Some(r) if r.accepted => {
                for y in p.ball(r.center) {
                    n[y] = sim.field().total(y);
                }
                drift = event_drift(&n, phi, &cfg.spec, p)?;
                bracket = qv_integrand(&n, cfg)?;
            }
            Some(_) => {}
        }
    }
    let end_value: f64 = n.iter().zip(phi.iter()).map(|(a, b)| a * b).sum();
    Ok(QvReplicate {
        increment: end_value - start_value - compensator,
        path_bracket,
        profiles,
    })
}

/// Compares the empirical variance of the compensated increment of
/// `<n, phi>` with the integrated bracket. Replicate `k` uses stream `k`.
pub fn qv_diagnostic(cfg: &QvConfig) -> Result<QvReport, AnalysisError> {
    check_qv(cfg)?;
    let reps = (0..cfg.replicates)
        .map(|k| qv_replicate(cfg, k as u64))
        .collect::<Result<Vec<_>, _>>()?;
    qv_summarize(cfg, &reps)
}

fn check_qv(cfg: &QvConfig) -> Result<(), AnalysisError> {
    if cfg.replicates < 2 {
        return Err(AnalysisError::Input("need at least two replicates".into()));
    }
    if !(cfg.horizon > 0.0) || cfg.time_points == 0 {
        return Err(AnalysisError::Input("horizon and time_points must be positive".into()));
    }
    let len = cfg.params.grid_len;
    if cfg.start.len() != len || cfg.phi.len() != len {
        return Err(AnalysisError::Input("start and phi must cover the grid".into()));
    }
    Ok(())
}

/// Aggregates replicates produced by [`qv_replicate`], in index order.
pub fn qv_summarize(cfg: &QvConfig, reps: &[QvReplicate]) -> Result<QvReport, AnalysisError> {
    check_qv(cfg)?;
    let count = reps.len() as f64;
    let mean_inc = reps.iter().map(|r| r.increment).sum::<f64>() / count;
    let var = reps.iter().map(|r| (r.increment - mean_inc).powi(2)).sum::<f64>() / (count - 1.0);
    let per_path = reps.iter().map(|r| r.path_bracket).sum::<f64>() / count;
    let len = cfg.params.grid_len;
    let dt = cfg.horizon / cfg.time_points as f64;
    let mut predicted = 0.0;
    for k in 0..=cfg.time_points {
        let mut mean = vec![0.0; len];
        for r in reps {
            for (m, v) in mean.iter_mut().zip(r.profiles[k].iter()) {
                *m += v / count;
            }
        }
        let w = if k == 0 || k == cfg.time_points { 0.5 } else { 1.0 };
        predicted += w * dt * qv_integrand(&mean, cfg)?;
    }
    let ratio = if predicted > 0.0 {
        var / predicted
    } else if var == 0.0 {
        1.0
    } else {
        f64::INFINITY
    };
    Ok(QvReport {
        empirical_variance: var,
        predicted,
        predicted_per_path: per_path,
        ratio,
        replicates: reps.len(),
    })
}

/// Log-log slope of a quantity against `u`.
pub fn scaling_exponent(us: &[f64], values: &[f64]) -> f64 {
    loglog_slope(us, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Boundary;

    fn two_sites() -> PopulationField {
        PopulationField::uniform(2, 0.0, 4)
    }

    #[test]
    fn shared_type_gives_one() {
        let mut f = two_sites();
        f.set_type_mass(0, 1, 2.0);
        f.set_type_mass(1, 1, 5.0);
        assert_eq!(identity_point(&f, 0, 1).unwrap(), 1.0);
    }

    #[test]
    fn uniform_pool_gives_zero() {
        let mut f = PopulationField::uniform(2, 3.0, 4);
        f.set_type_mass(1, 0, 1.0);
        assert_eq!(identity_point(&f, 0, 1).unwrap(), 0.0);
        assert_eq!(identity_point(&f, 0, 0).unwrap(), 0.0);
    }

    #[test]
    fn mixed_types_direct_sum() {
        let mut f = two_sites();
        f.set_type_mass(0, 0, 1.0);
        f.set_type_mass(0, 1, 2.0);
        f.set_type_mass(1, 0, 3.0);
        f.set_type_mass(1, 1, 1.0);
        let p = identity_point(&f, 0, 1).unwrap();
        assert!((p - 5.0 / 12.0).abs() < 1e-16);
        assert_eq!(p, identity_point(&f, 1, 0).unwrap());
    }

    #[test]
    fn empty_site_is_error() {
        let f = two_sites();
        assert_eq!(identity_point(&f, 0, 1), Err(AnalysisError::EmptySite(0)));
        let z = SiteFunction::constant(2, 0.0);
        let one = SiteFunction::constant(2, 1.0);
        assert_eq!(identity_weighted(&f, &z, &one), Err(AnalysisError::ZeroDenominator));
    }

    #[test]
    fn weighted_reduces_to_point() {
        let mut f = PopulationField::uniform(3, 0.5, 5);
        f.set_type_mass(0, 0, 1.0);
        f.set_type_mass(0, 2, 0.3);
        f.set_type_mass(2, 2, 2.0);
        f.set_type_mass(2, 0, 0.1);
        let delta = |l| SiteFunction::from_fn(3, |i| if i == l { 1.0 } else { 0.0 });
        for l in 0..3 {
            for m in 0..3 {
                let a = identity_weighted(&f, &delta(l), &delta(m)).unwrap();
                let b = identity_point(&f, l, m).unwrap();
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn replicate_quantiles() {
        let samples: Vec<_> = [0.1, 0.2, 0.3, 0.4]
            .iter()
            .map(|&v| IdentitySample {
                refs: vec![0],
                values: vec![vec![v]],
            })
            .collect();
        let t = replicate_stats(&samples).unwrap();
        let r = t.rows[0];
        assert!((r.median - 0.25).abs() < 1e-15);
        assert!((r.mean - 0.25).abs() < 1e-15);
        assert!(r.p05 <= r.p25 && r.p25 <= r.median && r.p75 <= r.p95);
        assert_eq!(r.n_replicates, 4);
        let a = t.aligned(2.0, 1.0);
        assert_eq!(a.rows[0].median, 2.0 * r.median);
    }

    #[test]
    fn identical_replicates_zero_width() {
        let s = IdentitySample {
            refs: vec![1],
            values: vec![vec![0.3, 0.7]],
        };
        let t = replicate_stats(&[s.clone(), s.clone(), s]).unwrap();
        for (r, v) in t.rows.iter().zip([0.3, 0.7]) {
            assert_eq!(r.p05, v);
            assert_eq!(r.p95, v);
            assert_eq!(r.median, v);
            assert!((r.mean - v).abs() < 1e-15);
        }
    }

    #[test]
    fn event_drift_matches_operator_drift_on_ring() {
        let p = ModelParams {
            boundary: Boundary::Wrap,
            ..ModelParams::reference(21.2625)
        };
        let n = SiteFunction::from_fn(101, |i| 4.0 + (i as f64 * 0.2).sin());
        let phi = SiteFunction::from_fn(101, |i| (i as f64 * 0.05).cos());
        let spec = GrowthSpec::valley();
        let a = event_drift(&n, &phi, &spec, &p).unwrap();
        let b = crate::operators::population_drift(&n, &phi, &spec, &p).unwrap();
        assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn zero_test_function_has_zero_bracket() {
        let p = ModelParams {
            grid_len: 21,
            ..ModelParams::reference(21.2625)
        };
        let spec = GrowthSpec::LogisticConst { kappa: 8.0 };
        let mut cfg = QvConfig::new(
            p,
            spec,
            SiteFunction::constant(21, 5.0),
            SiteFunction::constant(21, 0.0),
        );
        cfg.replicates = 5;
        let rep = qv_diagnostic(&cfg).unwrap();
        assert_eq!(rep.empirical_variance, 0.0);
        assert_eq!(rep.predicted, 0.0);
    }
}
