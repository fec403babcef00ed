//! Typed population state: per-site masses of explicit types plus a uniform
//! pool standing for the continuum of fresh mutant types.
//!
//! Each site stores its explicit type masses as `raw * scale`, so that the
//! uniform rescalings applied by reproduction events and by mutation cost
//! O(1) per site instead of O(types at the site).

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::model::{Ball, GrowthSpec, ModelParams};
use crate::operators::SiteFunction;

pub type TypeId = u32;

/// Default capacity of the type ledger.
pub const DEFAULT_TYPE_CAPACITY: usize = 2000;

/// Sites fold tiny type masses into the uniform pool after this many touches.
const COMPACT_EVERY: u32 = 64;
const MIN_SCALE: f64 = 1e-64;

#[derive(Debug, Clone)]
struct Site {
    uniform: f64,
    type_total: f64,
    scale: f64,
    raw: Vec<f64>,
    present: Vec<TypeId>,
    last_touch: f64,
    touches: u32,
}

impl Site {
    fn new(capacity: usize, uniform: f64) -> Self {
        Site {
            uniform,
            type_total: 0.0,
            scale: 1.0,
            raw: vec![0.0; capacity],
            present: Vec::new(),
            last_touch: 0.0,
            touches: 0,
        }
    }

    #[inline]
    fn total(&self) -> f64 {
        self.uniform + self.type_total
    }

    #[inline]
    fn mass(&self, id: TypeId) -> f64 {
        self.raw[id as usize] * self.scale
    }

    fn remove_present(&mut self, id: TypeId) {
        if let Some(pos) = self.present.iter().position(|&k| k == id) {
            self.present.swap_remove(pos);
        }
        self.raw[id as usize] = 0.0;
        if self.present.is_empty() {
            self.uniform += self.type_total;
            self.type_total = 0.0;
        }
    }
}

/// Bookkeeping of which type ids are in use.
///
/// An id is alive from allocation until its mass has vanished from every
/// site. Freed ids are reused lowest first.
#[derive(Debug, Clone)]
pub struct TypeLedger {
    capacity: usize,
    site_count: Vec<u32>,
    free: BinaryHeap<Reverse<TypeId>>,
    next_fresh: TypeId,
}

impl TypeLedger {
    pub fn new(capacity: usize) -> Self {
        TypeLedger {
            capacity,
            site_count: vec![0; capacity],
            free: BinaryHeap::new(),
            next_fresh: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn alive(&self) -> usize {
        self.next_fresh as usize - self.free.len()
    }

    pub fn is_full(&self) -> bool {
        self.alive() >= self.capacity
    }

    pub fn is_alive(&self, id: TypeId) -> bool {
        id < self.next_fresh && (self.site_count[id as usize] > 0 || !self.free.iter().any(|r| r.0 == id))
    }

    /// Alive ids in increasing order.
    pub fn alive_ids(&self) -> Vec<TypeId> {
        let mut freed: Vec<TypeId> = self.free.iter().map(|r| r.0).collect();
        freed.sort_unstable();
        let mut out = Vec::with_capacity(self.alive());
        let mut f = freed.iter().peekable();
        for id in 0..self.next_fresh {
            if f.peek() == Some(&&id) {
                f.next();
            } else {
                out.push(id);
            }
        }
        out
    }

    fn take(&mut self) -> Option<TypeId> {
        if let Some(Reverse(id)) = self.free.pop() {
            return Some(id);
        }
        if (self.next_fresh as usize) < self.capacity {
            self.next_fresh += 1;
            return Some(self.next_fresh - 1);
        }
        None
    }

    /// Marks `id` as in use, e.g. when a field is assembled by hand.
    fn claim(&mut self, id: TypeId) {
        assert!((id as usize) < self.capacity, "type id {id} beyond ledger capacity");
        if id >= self.next_fresh {
            for k in self.next_fresh..id {
                self.free.push(Reverse(k));
            }
            self.next_fresh = id + 1;
        } else if self.free.iter().any(|r| r.0 == id) {
            let rest: Vec<_> = self.free.drain().filter(|r| r.0 != id).collect();
            self.free.extend(rest);
        }
    }

    fn entered(&mut self, id: TypeId) {
        self.site_count[id as usize] += 1;
    }

    fn left(&mut self, id: TypeId) {
        let c = &mut self.site_count[id as usize];
        *c -= 1;
        if *c == 0 {
            self.free.push(Reverse(id));
        }
    }
}

/// Who an event's offspring descend from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parent {
    Type(TypeId),
    UniformPool,
}

/// A type removed to make room in a full ledger; its mass joined the uniform pool.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eviction {
    pub id: TypeId,
    pub mass: f64,
}

#[derive(Debug, Clone)]
pub struct PopulationField {
    sites: Vec<Site>,
    ledger: TypeLedger,
    fold_threshold: f64,
}

impl PopulationField {
    /// Every site holds `mass` in the uniform pool.
    pub fn uniform(grid_len: usize, mass: f64, capacity: usize) -> Self {
        Self::from_profile(&vec![mass; grid_len], capacity)
    }

    /// Site masses from `profile`, all in the uniform pool.
    pub fn from_profile(profile: &[f64], capacity: usize) -> Self {
        PopulationField {
            sites: profile.iter().map(|&m| Site::new(capacity, m)).collect(),
            ledger: TypeLedger::new(capacity),
            fold_threshold: 0.0,
        }
    }

    /// Site `x` entirely of type `x`.
    pub fn one_type_per_site(grid_len: usize, mass: f64, capacity: usize) -> Self {
        assert!(capacity >= grid_len, "ledger too small for one type per site");
        let mut f = Self::uniform(grid_len, 0.0, capacity);
        for x in 0..grid_len {
            f.set_type_mass(x, x as TypeId, mass);
        }
        f
    }

    /// Explicit type masses below `threshold` are folded into the uniform
    /// pool whenever a site is compacted.
    pub fn with_fold_threshold(mut self, threshold: f64) -> Self {
        self.fold_threshold = threshold;
        self
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn ledger(&self) -> &TypeLedger {
        &self.ledger
    }

    #[inline]
    pub fn total(&self, x: usize) -> f64 {
        self.sites[x].total()
    }

    pub fn totals(&self) -> SiteFunction {
        SiteFunction(self.sites.iter().map(Site::total).collect())
    }

    pub fn global_total(&self) -> f64 {
        self.sites.iter().map(Site::total).sum()
    }

    pub fn uniform_mass(&self, x: usize) -> f64 {
        self.sites[x].uniform
    }

    pub fn type_mass(&self, x: usize, id: TypeId) -> f64 {
        self.sites[x].raw.get(id as usize).map_or(0.0, |r| r * self.sites[x].scale)
    }

    pub fn last_touch(&self, x: usize) -> f64 {
        self.sites[x].last_touch
    }

    /// Explicit `(type, mass)` pairs at site `x`, in storage order.
    pub fn types_at(&self, x: usize) -> impl Iterator<Item = (TypeId, f64)> + '_ {
        let s = &self.sites[x];
        s.present.iter().map(move |&id| (id, s.mass(id)))
    }

    /// Overwrites the mass of type `id` at site `x`.
    pub fn set_type_mass(&mut self, x: usize, id: TypeId, mass: f64) {
        assert!(mass >= 0.0);
        self.ledger.claim(id);
        let s = &mut self.sites[x];
        let old = s.mass(id);
        let had = s.raw[id as usize] != 0.0;
        s.type_total += mass - old;
        if mass == 0.0 {
            if had {
                s.remove_present(id);
                self.ledger.left(id);
            }
            return;
        }
        s.raw[id as usize] = mass / s.scale;
        if !had {
            s.present.push(id);
            self.ledger.entered(id);
        }
    }

    pub fn set_uniform_mass(&mut self, x: usize, mass: f64) {
        assert!(mass >= 0.0);
        self.sites[x].uniform = mass;
    }

    pub fn set_last_touch(&mut self, x: usize, t: f64) {
        self.sites[x].last_touch = t;
    }

    /// Advances the mutation flow at site `x` to time `t`: explicit types decay
    /// by `exp(-mu dt)` and the lost mass joins the uniform pool. The site
    /// total is unchanged.
    #[inline]
    pub fn sync_site(&mut self, x: usize, t: f64, mu: f64) {
        let s = &mut self.sites[x];
        let dt = t - s.last_touch;
        debug_assert!(dt >= -1e-12, "sync backwards in time at site {x}");
        if dt > 0.0 && mu > 0.0 && s.type_total > 0.0 {
            let keep = (-mu * dt).exp();
            let lost = -(-mu * dt).exp_m1();
            s.uniform += s.type_total * lost;
            s.type_total *= keep;
            s.scale *= keep;
        }
        s.last_touch = s.last_touch.max(t);
        s.touches += 1;
        if s.touches >= COMPACT_EVERY || s.scale < MIN_SCALE {
            self.compact(x);
        }
    }

    pub fn sync_sites(&mut self, sites: impl Iterator<Item = usize>, t: f64, mu: f64) {
        for x in sites {
            self.sync_site(x, t, mu);
        }
    }

    pub fn sync_all(&mut self, t: f64, mu: f64) {
        for x in 0..self.sites.len() {
            self.sync_site(x, t, mu);
        }
    }

    /// Resets the site scale, folds masses below the threshold into the
    /// uniform pool and recomputes the cached explicit-type total.
    pub fn compact(&mut self, x: usize) {
        let threshold = self.fold_threshold;
        let s = &mut self.sites[x];
        let scale = s.scale;
        let mut kept = 0.0;
        let mut folded = 0.0;
        let mut i = 0;
        while i < s.present.len() {
            let id = s.present[i];
            let m = s.raw[id as usize] * scale;
            if m < threshold || m == 0.0 {
                folded += m;
                s.raw[id as usize] = 0.0;
                s.present.swap_remove(i);
                self.ledger.left(id);
            } else {
                s.raw[id as usize] = m;
                kept += m;
                i += 1;
            }
        }
        // keep the site total fixed while replacing the drifting cached sum
        let total = s.uniform + s.type_total;
        s.type_total = kept;
        s.uniform = (total - kept).max(0.0);
        debug_assert!(s.uniform + 1e-9 * total >= folded);
        s.scale = 1.0;
        s.touches = 0;
    }

    /// Mass of every alive type summed over sites (index = type id).
    pub fn global_masses(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.ledger.capacity];
        for s in &self.sites {
            for &id in &s.present {
                g[id as usize] += s.mass(id);
            }
        }
        g
    }

    pub fn global_mass(&self, id: TypeId) -> f64 {
        self.sites.iter().map(|s| s.mass(id)).sum()
    }

    /// Returns an unused type id, evicting the alive type of smallest global
    /// mass (lowest id on ties) when the ledger is full. The evicted mass is
    /// moved into the uniform pool at every site, so site totals are kept.
    pub fn allocate_type(&mut self, t: f64, mu: f64) -> (TypeId, Option<Eviction>) {
        if let Some(id) = self.ledger.take() {
            return (id, None);
        }
        self.sync_all(t, mu);
        if let Some(id) = self.ledger.take() {
            return (id, None);
        }
        let g = self.global_masses();
        let (victim, mass) = self
            .ledger
            .alive_ids()
            .into_iter()
            .map(|id| (id, g[id as usize]))
            .fold((TypeId::MAX, f64::INFINITY), |best, cand| {
                if cand.1 < best.1 {
                    cand
                } else {
                    best
                }
            });
        for s in &mut self.sites {
            let m = s.mass(victim);
            if s.raw[victim as usize] != 0.0 {
                s.uniform += m;
                s.type_total -= m;
                s.remove_present(victim);
                self.ledger.left(victim);
            }
        }
        let id = self.ledger.take().expect("eviction frees an id");
        debug_assert_eq!(id, victim);
        (id, Some(Eviction { id: victim, mass }))
    }

    /// Mass in the ball around `x` (sites must be synced).
    pub fn ball_mass(&self, ball: Ball) -> f64 {
        ball.map(|y| self.sites[y].total()).sum()
    }

    /// Picks a parent with probability proportional to its mass inside the
    /// ball. `draw` is a uniform variate on `[0, 1)`.
    ///
    /// Returns `None` when the ball carries no mass.
    pub fn sample_parent(&self, ball: Ball, draw: f64) -> Option<Parent> {
        let total = self.ball_mass(ball);
        if !(total > 0.0) {
            return None;
        }
        let mut u = draw * total;
        let mut last = None;
        for y in ball {
            let s = &self.sites[y];
            let n = s.total();
            if n <= 0.0 {
                continue;
            }
            last = Some(y);
            if u >= n {
                u -= n;
                continue;
            }
            return Some(Self::pick_within(s, u));
        }
        // rounding pushed the draw past the last site
        last.map(|y| {
            let s = &self.sites[y];
            Self::pick_within(s, s.total() * (1.0 - f64::EPSILON))
        })
    }

    fn pick_within(s: &Site, mut u: f64) -> Parent {
        if u < s.uniform {
            return Parent::UniformPool;
        }
        u -= s.uniform;
        for &id in &s.present {
            let m = s.mass(id);
            if u < m {
                return Parent::Type(id);
            }
            u -= m;
        }
        match s.present.last() {
            Some(&id) => Parent::Type(id),
            None => Parent::UniformPool,
        }
    }

    /// Reproduction event at centre `x` with offspring of type `parent`.
    ///
    /// Every site of the ball loses a fraction `u' = u / (nbar + 1)` of all its
    /// masses and gains `u' (1 + r_x(nbar)) nbar` of the parent type.
    /// Returns `(u', added mass per site, nbar)`. Ball sites must be synced.
    pub fn apply_replacement(
        &mut self,
        x: usize,
        parent: TypeId,
        params: &ModelParams,
        spec: &GrowthSpec,
    ) -> Result<(f64, f64, f64), crate::error::ModelError> {
        let ball = params.ball(x);
        let nbar = ball.map(|y| self.sites[y].total()).sum::<f64>() / ball.volume() as f64;
        let uprime = params.u / (nbar + 1.0);
        let r = spec.eval_site(x, nbar)?;
        let added = uprime * (1.0 + r) * nbar;
        let keep = 1.0 - uprime;
        let pid = parent as usize;
        for y in ball {
            let s = &mut self.sites[y];
            s.scale *= keep;
            s.type_total *= keep;
            s.uniform *= keep;
            if added > 0.0 {
                if s.raw[pid] == 0.0 {
                    s.present.push(parent);
                    self.ledger.site_count[pid] += 1;
                }
                s.raw[pid] += added / s.scale;
                s.type_total += added;
            }
        }
        if self.ledger.site_count[pid] == 0 {
            // offspring of zero mass: the freshly allocated id never took hold
            self.ledger.free.push(Reverse(parent));
        }
        Ok((uprime, added, nbar))
    }

    /// Largest site total.
    pub fn max_total(&self) -> (usize, f64) {
        self.sites
            .iter()
            .enumerate()
            .map(|(i, s)| (i, s.total()))
            .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
    }
}

impl PartialEq for PopulationField {
    fn eq(&self, other: &Self) -> bool {
        self.len() == other.len()
            && (0..self.len()).all(|x| {
                let mut a: Vec<_> = self.types_at(x).collect();
                let mut b: Vec<_> = other.types_at(x).collect();
                a.sort_by_key(|p| p.0);
                b.sort_by_key(|p| p.0);
                self.uniform_mass(x) == other.uniform_mass(x) && a == b
            })
    }
}
