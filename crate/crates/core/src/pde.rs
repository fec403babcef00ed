//! Deterministic population dynamics: the reaction-diffusion limit, its
//! stationary profile and the pre-limit averaged approximation.

use serde::{Deserialize, Serialize};

use crate::error::PdeError;
use crate::model::{Boundary, GrowthSpec, ModelParams};
use crate::operators::{apply_growth_operator, apply_jump_operator, SiteFunction, WorkingGrid};

/// Whether the reaction term carries the `u V_R` factor of the diffusion term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReactionScale {
    /// `dn/dt = u V_R (R^2/(d+2) Lap n + r(n) n)`.
    WithUvr,
    /// `dn/dt = u V_R R^2/(d+2) Lap n + r(n) n`.
    #[default]
    WithoutUvr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdeConfig {
    pub dt: f64,
    pub tol_steady: f64,
    /// Dirichlet value at both ends under [`Boundary::Clip`].
    pub bc_value: f64,
    pub reaction_scale: ReactionScale,
    pub max_steps: usize,
    /// Keep every k-th state of a trajectory (the final state is always kept).
    pub record_every: usize,
}

impl PdeConfig {
    /// Explicit-Euler stability limit `0.9 (d+2) / (2 u V_R R^2)`.
    pub fn stable_dt(params: &ModelParams) -> f64 {
        0.9 / (2.0 * params.diffusion_constant())
    }

    pub fn for_params(params: &ModelParams) -> Self {
        PdeConfig {
            dt: 0.5 * Self::stable_dt(params),
            tol_steady: 1e-10,
            bc_value: 8.0,
            reaction_scale: ReactionScale::WithoutUvr,
            max_steps: 2_000_000,
            record_every: 1,
        }
    }

    fn reaction_factor(&self, params: &ModelParams) -> f64 {
        match self.reaction_scale {
            ReactionScale::WithUvr => params.u * params.ball_volume(),
            ReactionScale::WithoutUvr => 1.0,
        }
    }
}

/// States of a time-marching scheme at recorded times.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<SiteFunction>,
}

impl Trajectory {
    pub fn constant(state: SiteFunction, t0: f64, t1: f64) -> Self {
        Trajectory {
            times: vec![t0, t1],
            states: vec![state.clone(), state],
        }
    }

    pub fn last(&self) -> &SiteFunction {
        self.states.last().expect("empty trajectory")
    }

    /// Linear interpolation in time, clamped to the recorded range.
    pub fn at(&self, t: f64) -> SiteFunction {
        let n = self.times.len();
        assert!(n > 0, "empty trajectory");
        if t <= self.times[0] {
            return self.states[0].clone();
        }
        if t >= self.times[n - 1] {
            return self.states[n - 1].clone();
        }
        let k = self.times.partition_point(|&s| s <= t).max(1);
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let w = (t - t0) / (t1 - t0);
        self.states[k - 1]
            .iter()
            .zip(self.states[k].iter())
            .map(|(a, b)| a + w * (b - a))
            .collect::<Vec<_>>()
            .into()
    }
}

/// Right-hand side of the reaction-diffusion equation on the site grid.
/// Dirichlet end sites have zero time derivative.
pub fn reaction_diffusion_rhs(
    n: &SiteFunction,
    spec: &GrowthSpec,
    params: &ModelParams,
    cfg: &PdeConfig,
) -> Result<SiteFunction, PdeError> {
    let len = n.len();
    let diff = params.diffusion_constant();
    let rho = cfg.reaction_factor(params);
    let mut out = vec![0.0; len];
    let (lo, hi) = match params.boundary {
        Boundary::Clip => (1, len - 1),
        Boundary::Wrap => (0, len),
    };
    for (i, o) in out.iter_mut().enumerate().take(hi).skip(lo) {
        let left = n[(i + len - 1) % len];
        let right = n[(i + 1) % len];
        let lap = left + right - 2.0 * n[i];
        *o = diff * lap + rho * spec.eval_site(i, n[i])? * n[i];
    }
    Ok(out.into())
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn march(
    mut state: SiteFunction,
    total_time: f64,
    dt_max: f64,
    record_every: usize,
    mut rhs: impl FnMut(&SiteFunction) -> Result<SiteFunction, PdeError>,
    pin: impl Fn(&mut SiteFunction),
) -> Result<Trajectory, PdeError> {
    let steps = (total_time / dt_max).ceil().max(0.0) as usize;
    let dt = if steps > 0 { total_time / steps as f64 } else { 0.0 };
    pin(&mut state);
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![state.clone()],
    };
    let every = record_every.max(1);
    for step in 1..=steps {
        let d = rhs(&state)?;
        let before = max_abs(&state);
        for (s, v) in state.iter_mut().zip(d.iter()) {
            *s += dt * v;
        }
        pin(&mut state);
        let after = max_abs(&state);
        if !after.is_finite() || (after > 2.0 * before && after > 1e-300) {
            return Err(PdeError::Unstable {
                step,
                time: step as f64 * dt,
                max_abs: after,
            });
        }
        if step % every == 0 || step == steps {
            traj.times.push(step as f64 * dt);
            traj.states.push(state.clone());
        }
    }
    Ok(traj)
}

fn check_positive(n0: &SiteFunction, len: usize) -> Result<(), PdeError> {
    if n0.len() != len {
        return Err(PdeError::Input(format!("profile has {} sites, grid has {len}", n0.len())));
    }
    if n0.iter().any(|v| !(*v > 0.0)) {
        return Err(PdeError::Input("initial profile must be positive".into()));
    }
    Ok(())
}

/// Explicit-Euler trajectory of the reaction-diffusion equation over `[0, T]`.
pub fn evolve_reaction_diffusion(
    n0: &SiteFunction,
    spec: &GrowthSpec,
    params: &ModelParams,
    cfg: &PdeConfig,
    total_time: f64,
) -> Result<Trajectory, PdeError> {
    check_positive(n0, params.grid_len)?;
    let limit = PdeConfig::stable_dt(params);
    if cfg.dt > limit {
        return Err(PdeError::StepTooLarge { dt: cfg.dt, limit });
    }
    let bc = cfg.bc_value;
    let clip = params.boundary == Boundary::Clip;
    march(
        n0.clone(),
        total_time,
        cfg.dt,
        cfg.record_every,
        |n| reaction_diffusion_rhs(n, spec, params, cfg),
        |n| {
            if clip {
                let l = n.len();
                n[0] = bc;
                n[l - 1] = bc;
            }
        },
    )
}

/// Stationary profile found by time marching.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    pub profile: SiteFunction,
    /// Max-norm residual of the stationarity equation over non-pinned sites.
    pub residual: f64,
    pub steps: usize,
    pub converged: bool,
}

/// Marches from `n = bc_value` until `max |dn/dt| < tol_steady`. A
/// non-converged result is returned flagged rather than as an error.
pub fn steady_state(
    spec: &GrowthSpec,
    params: &ModelParams,
    cfg: &PdeConfig,
) -> Result<SteadyState, PdeError> {
    let limit = PdeConfig::stable_dt(params);
    if cfg.dt > limit {
        return Err(PdeError::StepTooLarge { dt: cfg.dt, limit });
    }
    let len = params.grid_len;
    let mut n = SiteFunction::constant(len, cfg.bc_value);
    let mut steps = 0;
    loop {
        let d = reaction_diffusion_rhs(&n, spec, params, cfg)?;
        let residual = max_abs(&d);
        if residual < cfg.tol_steady || steps >= cfg.max_steps {
            return Ok(SteadyState {
                profile: n,
                residual,
                steps,
                converged: residual < cfg.tol_steady,
            });
        }
        let before = max_abs(&n);
        for (s, v) in n.iter_mut().zip(d.iter()) {
            *s += cfg.dt * v;
        }
        steps += 1;
        let after = max_abs(&n);
        if !after.is_finite() || after > 2.0 * before {
            return Err(PdeError::Unstable {
                step: steps,
                time: steps as f64 * cfg.dt,
                max_abs: after,
            });
        }
    }
}

/// Explicit-Euler trajectory of `dm/dt = L m + R_m m` with the averaging
/// operators at scale `delta` on `grid`.
pub fn evolve_deterministic_m(
    m0: &SiteFunction,
    spec: &GrowthSpec,
    params: &ModelParams,
    grid: &WorkingGrid,
    delta: f64,
    dt: f64,
    total_time: f64,
) -> Result<Trajectory, PdeError> {
    if m0.iter().any(|v| !(*v > 0.0)) {
        return Err(PdeError::Input("initial profile must be positive".into()));
    }
    let limit = 1.8 * delta * delta / (params.u * params.ball_volume());
    if dt > limit {
        return Err(PdeError::StepTooLarge { dt, limit });
    }
    march(
        m0.clone(),
        total_time,
        dt,
        usize::MAX,
        |m| {
            let l = apply_jump_operator(m, params, grid, delta)?;
            let r = apply_growth_operator(m, m, spec, params, grid, delta)?;
            Ok(l.iter().zip(r.iter()).map(|(a, b)| a + b).collect::<Vec<_>>().into())
        },
        |_| {},
    )
}
