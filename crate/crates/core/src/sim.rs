//! Event-driven forward simulation.
//!
//! Candidate events arrive as a Poisson stream of total rate
//! `L (n_max + 1)` with uniformly chosen centres. A candidate at centre `x`
//! is accepted with probability `(nbar(x) + 1) / (n_max + 1)`, which thins the
//! stream to the density-dependent event rate `nbar + 1` per site. Mutation is
//! a deterministic flow and is applied lazily, whenever a site is read.
//!
//! Each replicate draws from its own ChaCha8 stream: the key is derived from
//! the master seed via `seed_from_u64` and the stream number is the replicate
//! index, so results do not depend on how replicates are scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::error::SimError;
use crate::field::{Eviction, Parent, PopulationField, TypeId, DEFAULT_TYPE_CAPACITY};
use crate::model::{validate_assumptions, GrowthSpec, ModelParams};
use crate::operators::SiteFunction;

/// Type masses below this fraction of `n_max` are folded into the uniform pool.
pub const FOLD_FRACTION: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Default)]
pub enum InitialState {
    /// All mass in the uniform pool.
    #[default]
    AllUniformPool,
    /// Site `x` monomorphic for type `x`.
    OneTypePerSite,
    /// An explicit starting field, e.g. read from a snapshot file.
    Field(Box<PopulationField>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub params: ModelParams,
    pub spec: GrowthSpec,
    pub t_end: f64,
    pub seed: u64,
    /// Replicate index, used as the generator stream.
    pub stream: u64,
    pub initial_mass: f64,
    pub initial_state: InitialState,
    pub type_capacity: usize,
    /// Refuse to run when the growth scan fails. Off only for degenerate
    /// test growth such as `r = 0`.
    pub strict_assumptions: bool,
    pub record_events: bool,
    /// Record the population profile every this many time units.
    pub observe_every: Option<f64>,
}

impl SimConfig {
    pub fn new(params: ModelParams, spec: GrowthSpec, t_end: f64, seed: u64) -> Self {
        SimConfig {
            params,
            spec,
            t_end,
            seed,
            stream: 0,
            initial_mass: 3.0,
            initial_state: InitialState::AllUniformPool,
            type_capacity: DEFAULT_TYPE_CAPACITY,
            strict_assumptions: true,
            record_events: false,
            observe_every: None,
        }
    }

    pub fn check(&self) -> Result<(), SimError> {
        self.params.check()?;
        self.spec.check_grid(self.params.grid_len)?;
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(SimError::Config(format!("t_end must be >= 0, got {}", self.t_end)));
        }
        if !(self.initial_mass > 0.0 && self.initial_mass <= self.params.n_max) {
            return Err(SimError::Config(format!(
                "initial mass {} outside (0, n_max]",
                self.initial_mass
            )));
        }
        if self.type_capacity == 0 {
            return Err(SimError::Config("type capacity must be positive".into()));
        }
        if self.strict_assumptions {
            let rep = validate_assumptions(&self.spec, &self.params)?;
            if let Some(v) = rep.violation {
                return Err(SimError::Model(crate::error::ModelError::Assumption(format!(
                    "{:?} at site {} mass {}",
                    v.kind, v.site, v.mass
                ))));
            }
        }
        Ok(())
    }
}

/// Outcome of one candidate event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    pub center: usize,
    pub accepted: bool,
    pub parent: Option<Parent>,
    /// Type id the offspring were assigned (a fresh id for uniform-pool parents).
    pub offspring_type: Option<TypeId>,
    pub eviction: Option<Eviction>,
    pub replaced_fraction: f64,
    pub added_mass: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EventCounts {
    pub candidates: u64,
    pub accepted: u64,
    pub evictions: u64,
}

pub struct Simulation {
    params: ModelParams,
    spec: GrowthSpec,
    field: PopulationField,
    rng: ChaCha8Rng,
    interarrival: Exp<f64>,
    time: f64,
    t_end: f64,
    counts: EventCounts,
}

impl Simulation {
    pub fn new(cfg: &SimConfig) -> Result<Self, SimError> {
        cfg.check()?;
        let p = &cfg.params;
        let field = match &cfg.initial_state {
            InitialState::AllUniformPool => {
                PopulationField::uniform(p.grid_len, cfg.initial_mass, cfg.type_capacity)
            }
            InitialState::OneTypePerSite => {
                if cfg.type_capacity < p.grid_len {
                    return Err(SimError::Config("type capacity below grid length".into()));
                }
                PopulationField::one_type_per_site(p.grid_len, cfg.initial_mass, cfg.type_capacity)
            }
            InitialState::Field(f) => {
                if f.len() != p.grid_len {
                    return Err(SimError::Config("initial field has wrong grid length".into()));
                }
                (**f).clone()
            }
        };
        Self::from_field(p.clone(), cfg.spec.clone(), field, cfg.seed, cfg.stream, cfg.t_end)
    }

    /// Starts from an arbitrary field at time 0 (site clocks are reset).
    pub fn from_field(
        params: ModelParams,
        spec: GrowthSpec,
        mut field: PopulationField,
        seed: u64,
        stream: u64,
        t_end: f64,
    ) -> Result<Self, SimError> {
        params.check()?;
        for x in 0..field.len() {
            field.set_last_touch(x, 0.0);
        }
        let field = field.with_fold_threshold(FOLD_FRACTION * params.n_max);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let rate = params.grid_len as f64 * (params.n_max + 1.0);
        Ok(Simulation {
            interarrival: Exp::new(rate).map_err(|e| SimError::Config(e.to_string()))?,
            params,
            spec,
            field,
            rng,
            time: 0.0,
            t_end,
            counts: EventCounts::default(),
        })
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn field(&self) -> &PopulationField {
        &self.field
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn counts(&self) -> EventCounts {
        self.counts
    }

    /// Processes the next candidate event. Returns `None` once the next
    /// candidate would fall after `t_end`; the clock then stands at `t_end`
    /// and every site is synced.
    pub fn step(&mut self) -> Result<Option<EventRecord>, SimError> {
        let next = self.time + self.interarrival.sample(&mut self.rng);
        if next > self.t_end {
            self.time = self.t_end;
            self.field.sync_all(self.t_end, self.params.mu);
            return Ok(None);
        }
        self.time = next;
        self.counts.candidates += 1;
        let p = &self.params;
        let x = self.rng.random_range(0..p.grid_len);
        let w: f64 = self.rng.random();
        let ball = p.ball(x);
        let nbar = self.field.ball_mass(ball) / ball.volume() as f64;
        let mut rec = EventRecord {
            time: next,
            center: x,
            accepted: false,
            parent: None,
            offspring_type: None,
            eviction: None,
            replaced_fraction: 0.0,
            added_mass: 0.0,
        };
        if w >= (nbar + 1.0) / (p.n_max + 1.0) {
            return Ok(Some(rec));
        }
        self.counts.accepted += 1;
        rec.accepted = true;
        self.field.sync_sites(ball, next, p.mu);
        let draw: f64 = self.rng.random();
        let parent = self
            .field
            .sample_parent(ball, draw)
            .ok_or(SimError::EmptyBall(x))?;
        let id = match parent {
            Parent::Type(id) => id,
            Parent::UniformPool => {
                let (id, ev) = self.field.allocate_type(next, p.mu);
                if ev.is_some() {
                    self.counts.evictions += 1;
                }
                rec.eviction = ev;
                id
            }
        };
        let (uprime, added, _) = self.field.apply_replacement(x, id, p, &self.spec)?;
        rec.parent = Some(parent);
        rec.offspring_type = Some(id);
        rec.replaced_fraction = uprime;
        rec.added_mass = added;
        for y in ball {
            let m = self.field.total(y);
            if m > p.n_max * (1.0 + 1e-12) {
                return Err(SimError::CeilingBreached {
                    site: y,
                    mass: m,
                    n_max: p.n_max,
                    time: next,
                });
            }
        }
        Ok(Some(rec))
    }

    /// Runs to `t_end`, optionally collecting the event log.
    pub fn run_to_end(&mut self, mut log: Option<&mut Vec<EventRecord>>) -> Result<(), SimError> {
        while let Some(rec) = self.step()? {
            if let Some(l) = log.as_deref_mut() {
                l.push(rec);
            }
        }
        Ok(())
    }

    pub fn into_field(self) -> PopulationField {
        self.field
    }
}

/// Population profile recorded during a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub time: f64,
    pub profile: SiteFunction,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub field: PopulationField,
    pub events: Vec<EventRecord>,
    pub observations: Vec<Observation>,
    pub counts: EventCounts,
}

/// Simulates one replicate from `cfg`.
pub fn run(cfg: &SimConfig) -> Result<SimOutput, SimError> {
    let mut sim = Simulation::new(cfg)?;
    let mut events = Vec::new();
    let mut observations = Vec::new();
    let mut profile = sim.field.totals();
    let mut next_obs = 0.0;
    let every = cfg.observe_every.filter(|e| *e > 0.0);
    loop {
        let rec = sim.step()?;
        if let Some(every) = every {
            // the profile is piecewise constant between accepted events
            let upto = rec.map_or(f64::INFINITY, |r| r.time);
            while next_obs < upto && next_obs <= cfg.t_end {
                observations.push(Observation {
                    time: next_obs,
                    profile: profile.clone(),
                });
                next_obs += every;
            }
        }
        match rec {
            Some(r) => {
                if r.accepted && every.is_some() {
                    for y in cfg.params.ball(r.center) {
                        profile[y] = sim.field.total(y);
                    }
                }
                if cfg.record_events {
                    events.push(r);
                }
            }
            None => break,
        }
    }
    Ok(SimOutput {
        counts: sim.counts,
        field: sim.into_field(),
        events,
        observations,
    })
}
