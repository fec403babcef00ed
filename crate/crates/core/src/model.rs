//! Model parameters, grid geometry and growth functions.
//!
//! Sites are integer positions `0..grid_len`. Every event covers the ball of
//! `radius` sites around its centre, either clipped to the interval or wrapped
//! around a ring.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// How balls behave at the ends of the site interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Interval `{0, .., L-1}`; balls are truncated at the ends.
    #[default]
    Clip,
    /// Ring of `L` sites.
    Wrap,
}

/// Parameters of the reproduction / mutation dynamics on the site grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Impact fraction `u` in `(0, 1)`.
    pub u: f64,
    /// Mutation rate per unit time.
    pub mu: f64,
    /// Event radius in sites.
    pub radius: usize,
    /// Ceiling on the per-site population mass.
    pub n_max: f64,
    pub grid_len: usize,
    #[serde(default)]
    pub boundary: Boundary,
    /// Nominal spatial dimension; only enters operator constants.
    #[serde(default = "default_dim")]
    pub dim: u32,
}

fn default_dim() -> u32 {
    1
}

impl ModelParams {
    /// The parameter set of the reference valley experiment: `u = 0.04`,
    /// `mu = 1e-4`, `R = 4` on 101 sites with clipped boundaries.
    pub fn reference(n_max: f64) -> Self {
        Self {
            u: 0.04,
            mu: 1e-4,
            radius: 4,
            n_max,
            grid_len: 101,
            boundary: Boundary::Clip,
            dim: 1,
        }
    }

    /// Checks the structural invariants that do not involve the growth function.
    pub fn check(&self) -> Result<(), ModelError> {
        if !(self.u > 0.0 && self.u < 1.0) {
            return Err(ModelError::InvalidParam(format!("u must lie in (0,1), got {}", self.u)));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(ModelError::InvalidParam(format!("mu must be >= 0, got {}", self.mu)));
        }
        if self.radius < 1 {
            return Err(ModelError::InvalidParam("radius must be >= 1".into()));
        }
        if !(self.n_max > 0.0 && self.n_max.is_finite()) {
            return Err(ModelError::InvalidParam(format!("n_max must be > 0, got {}", self.n_max)));
        }
        if self.grid_len < 2 * self.radius + 1 {
            return Err(ModelError::InvalidParam(format!(
                "grid_len {} is smaller than a full ball (2R+1 = {})",
                self.grid_len,
                2 * self.radius + 1
            )));
        }
        if self.dim < 1 {
            return Err(ModelError::InvalidParam("dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Ball volume `V_R`, counted in sites (`2R + 1`).
    pub fn ball_volume(&self) -> f64 {
        (2 * self.radius + 1) as f64
    }

    /// Lineage / population diffusion constant `u V_R R^2 / (d + 2)`.
    pub fn diffusion_constant(&self) -> f64 {
        let r = self.radius as f64;
        self.u * self.ball_volume() * r * r / (self.dim as f64 + 2.0)
    }

    pub fn ball(&self, x: usize) -> Ball {
        Ball::new(x, self.radius, self.grid_len, self.boundary)
    }
}

/// Sites within distance `R` of a centre, in increasing offset order.
#[derive(Debug, Clone, Copy)]
pub struct Ball {
    next: isize,
    end: isize,
    grid_len: usize,
    wrap: bool,
}

impl Ball {
    pub fn new(x: usize, radius: usize, grid_len: usize, boundary: Boundary) -> Self {
        debug_assert!(x < grid_len);
        let (x, r, l) = (x as isize, radius as isize, grid_len as isize);
        match boundary {
            Boundary::Clip => Ball {
                next: (x - r).max(0),
                end: (x + r).min(l - 1) + 1,
                grid_len,
                wrap: false,
            },
            Boundary::Wrap => Ball {
                next: x - r,
                end: x + r + 1,
                grid_len,
                wrap: true,
            },
        }
    }

    /// Number of sites in the ball, `V(x)`.
    pub fn volume(&self) -> usize {
        (self.end - self.next).max(0) as usize
    }
}

impl Iterator for Ball {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        if self.next >= self.end {
            return None;
        }
        let i = self.next;
        self.next += 1;
        if self.wrap {
            Some(i.rem_euclid(self.grid_len as isize) as usize)
        } else {
            Some(i as usize)
        }
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.volume();
        (n, Some(n))
    }
}

impl ExactSizeIterator for Ball {}

/// Parametric growth function `r_x(n)`.
///
/// Every family is clamped from below at `-1`, so the offspring mass factor
/// `1 + r` is never negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum GrowthSpec {
    /// `max{ min{ a |x - c| / s, m } + b - n, -1 }`: a carrying-capacity valley
    /// centred at `c`.
    Valley {
        #[serde(default = "valley_a")]
        a: f64,
        #[serde(default = "valley_c")]
        c: f64,
        #[serde(default = "valley_s")]
        s: f64,
        #[serde(default = "valley_m")]
        m: f64,
        #[serde(default = "valley_b")]
        b: f64,
    },
    /// `max{ kappa - n, -1 }`, independent of position.
    LogisticConst { kappa: f64 },
    /// Per-site affine rates `max{ intercept[x] - slope[x] n, -1 }`.
    CustomTable { intercept: Vec<f64>, slope: Vec<f64> },
}

fn valley_a() -> f64 {
    14.0
}
fn valley_c() -> f64 {
    50.0
}
fn valley_s() -> f64 {
    50.0
}
fn valley_m() -> f64 {
    7.0
}
fn valley_b() -> f64 {
    1.0
}

impl Default for GrowthSpec {
    fn default() -> Self {
        GrowthSpec::valley()
    }
}

impl GrowthSpec {
    /// The valley family with its reference coefficients.
    pub fn valley() -> Self {
        GrowthSpec::Valley {
            a: valley_a(),
            c: valley_c(),
            s: valley_s(),
            m: valley_m(),
            b: valley_b(),
        }
    }

    /// Growth that vanishes identically on `grid_len` sites.
    pub fn zero(grid_len: usize) -> Self {
        GrowthSpec::CustomTable {
            intercept: vec![0.0; grid_len],
            slope: vec![0.0; grid_len],
        }
    }

    /// Evaluates `r_x(n)` at a (possibly fractional) position `x` in site units.
    ///
    /// Tabulated growth is only defined at integer sites present in the table.
    pub fn eval(&self, x: f64, n: f64) -> Result<f64, ModelError> {
        let raw = match self {
            GrowthSpec::Valley { a, c, s, m, b } => (a * (x - c).abs() / s).min(*m) + b - n,
            GrowthSpec::LogisticConst { kappa } => kappa - n,
            GrowthSpec::CustomTable { intercept, slope } => {
                let site = x.round();
                if (x - site).abs() > 1e-9 || site < 0.0 {
                    return Err(ModelError::MissingTableSite(x));
                }
                let i = site as usize;
                match (intercept.get(i), slope.get(i)) {
                    (Some(a), Some(b)) => a - b * n,
                    _ => return Err(ModelError::MissingTableSite(x)),
                }
            }
        };
        Ok(raw.max(-1.0))
    }

    /// `r_x(n)` at integer site `x`.
    #[inline]
    pub fn eval_site(&self, x: usize, n: f64) -> Result<f64, ModelError> {
        self.eval(x as f64, n)
    }

    /// Checks that a tabulated spec covers every site of the grid.
    pub fn check_grid(&self, grid_len: usize) -> Result<(), ModelError> {
        if let GrowthSpec::CustomTable { intercept, slope } = self {
            if intercept.len() < grid_len || slope.len() < grid_len {
                return Err(ModelError::MissingTableSite(intercept.len().min(slope.len()) as f64));
            }
        }
        Ok(())
    }
}

/// `r_x(n)` for the configured family. See [`GrowthSpec::eval_site`].
pub fn growth_eval(spec: &GrowthSpec, x: usize, n: f64) -> Result<f64, ModelError> {
    spec.eval_site(x, n)
}

/// Mean population mass over `ball(x)`.
pub fn local_mean(totals: &[f64], x: usize, params: &ModelParams) -> f64 {
    let ball = params.ball(x);
    let v = ball.volume() as f64;
    ball.map(|y| totals[y]).sum::<f64>() / v
}

/// Number of mass-grid intervals used by [`validate_assumptions`].
pub const MASS_SCAN_STEPS: usize = 2048;

/// Which growth bound failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    /// `r_x(n) < -1`.
    BelowMinusOne,
    /// `(1 + r_x(n)) n >= n_max`.
    OffspringAboveCeiling,
    /// `r_x` not strictly positive near `n = 0`.
    NoPositiveBirth,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub site: usize,
    pub mass: f64,
}

/// Outcome of scanning the growth function against the population bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub min_rate: f64,
    pub max_offspring: f64,
    pub max_offspring_site: usize,
    pub max_offspring_mass: f64,
    /// Smallest `r_x` over sites at the first positive scanned mass.
    pub min_rate_near_zero: f64,
    pub violation: Option<Violation>,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.violation.is_none()
    }
}

struct Scan {
    min_rate: (f64, usize, f64),
    max_offspring: (f64, usize, f64),
    near_zero: (f64, usize, f64),
}

fn scan(spec: &GrowthSpec, grid_len: usize, n_hi: f64, steps: usize) -> Result<Scan, ModelError> {
    let dn = n_hi / steps as f64;
    let mut out = Scan {
        min_rate: (f64::INFINITY, 0, 0.0),
        max_offspring: (f64::NEG_INFINITY, 0, 0.0),
        near_zero: (f64::INFINITY, 0, dn),
    };
    for x in 0..grid_len {
        for k in 0..=steps {
            let n = k as f64 * dn;
            let r = spec.eval_site(x, n)?;
            if r < out.min_rate.0 {
                out.min_rate = (r, x, n);
            }
            let off = (1.0 + r) * n;
            if off > out.max_offspring.0 {
                out.max_offspring = (off, x, n);
            }
            if k == 1 && r < out.near_zero.0 {
                out.near_zero = (r, x, n);
            }
        }
    }
    Ok(out)
}

/// Scans `n in {0, dn, .., n_max}` (with `dn = n_max / 2048`) at every site and
/// checks the lower growth bound, the offspring ceiling and positive birth at
/// small mass. Failures are reported, never raised.
pub fn validate_assumptions(
    spec: &GrowthSpec,
    params: &ModelParams,
) -> Result<AssumptionReport, ModelError> {
    spec.check_grid(params.grid_len)?;
    let s = scan(spec, params.grid_len, params.n_max, MASS_SCAN_STEPS)?;
    let violation = if s.min_rate.0 < -1.0 {
        Some(Violation {
            kind: ViolationKind::BelowMinusOne,
            site: s.min_rate.1,
            mass: s.min_rate.2,
        })
    } else if s.max_offspring.0 >= params.n_max {
        Some(Violation {
            kind: ViolationKind::OffspringAboveCeiling,
            site: s.max_offspring.1,
            mass: s.max_offspring.2,
        })
    } else if s.near_zero.0 <= 0.0 {
        Some(Violation {
            kind: ViolationKind::NoPositiveBirth,
            site: s.near_zero.1,
            mass: s.near_zero.2,
        })
    } else {
        None
    };
    Ok(AssumptionReport {
        min_rate: s.min_rate.0,
        max_offspring: s.max_offspring.0,
        max_offspring_site: s.max_offspring.1,
        max_offspring_mass: s.max_offspring.2,
        min_rate_near_zero: s.near_zero.0,
        violation,
    })
}

/// Default population ceiling: 5% above the largest offspring mass
/// `(1 + r_x(n)) n` found by a scan over `n in [0, 64]` (widened until the
/// maximum is interior).
pub fn default_n_max(spec: &GrowthSpec, grid_len: usize) -> Result<f64, ModelError> {
    spec.check_grid(grid_len)?;
    let mut n_hi = 64.0;
    loop {
        let s = scan(spec, grid_len, n_hi, MASS_SCAN_STEPS)?;
        if s.max_offspring.2 < n_hi || n_hi > 1e12 {
            return Ok(1.05 * s.max_offspring.0);
        }
        n_hi *= 2.0;
    }
}
