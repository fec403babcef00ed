//! Cross-checks against independent reference computations.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slfv_core::analysis::{identity_numerator, identity_point, identity_weighted};
use slfv_core::field::{Parent, PopulationField};
use slfv_core::model::{Ball, Boundary, GrowthSpec, ModelParams};
use slfv_core::predict::{build_kernel, matrix_exponential, KernelConfig};
use slfv_core::sim::{run, InitialState, SimConfig, Simulation};
use slfv_core::SiteFunction;

/// Double-double number: `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Clone, Copy, Debug, Default)]
struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    fn from(v: f64) -> Dd {
        Dd { hi: v, lo: 0.0 }
    }

    fn add(self, o: Dd) -> Dd {
        let s = self.hi + o.hi;
        let bb = s - self.hi;
        let e = (self.hi - (s - bb)) + (o.hi - bb) + self.lo + o.lo;
        let hi = s + e;
        Dd { hi, lo: e - (hi - s) }
    }

    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p) + self.hi * o.lo + self.lo * o.hi;
        let hi = p + e;
        Dd { hi, lo: e - (hi - p) }
    }

    fn div_f64(self, d: f64) -> Dd {
        let q = self.hi / d;
        let r = self.add(Dd::from(q).mul(Dd::from(-d)));
        let q2 = r.hi / d;
        let hi = q + q2;
        Dd { hi, lo: q2 - (hi - q) }
    }
}

/// `exp(a)` as a 200-term Taylor series accumulated in double-double.
fn expm_series_oracle(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let ad: Vec<Dd> = a.iter().map(|&v| Dd::from(v)).collect();
    let idx = |i: usize, j: usize| i + j * n;
    let mut term = vec![Dd::default(); n * n];
    let mut sum = vec![Dd::default(); n * n];
    for i in 0..n {
        term[idx(i, i)] = Dd::from(1.0);
        sum[idx(i, i)] = Dd::from(1.0);
    }
    for k in 1..200 {
        let mut next = vec![Dd::default(); n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = Dd::default();
                for l in 0..n {
                    acc = acc.add(term[idx(i, l)].mul(ad[idx(l, j)]));
                }
                next[idx(i, j)] = acc.div_f64(k as f64);
            }
        }
        term = next;
        for (s, t) in sum.iter_mut().zip(&term) {
            *s = s.add(*t);
        }
    }
    DMatrix::from_iterator(n, n, sum.iter().map(|d| d.hi + d.lo))
}

fn random_generator(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut out = 0.0;
        for j in 0..n {
            if i != j {
                let r: f64 = rng.random();
                q[(i, j)] = r;
                out += r;
            }
        }
        q[(i, i)] = -out;
    }
    q
}

#[test]
fn matrix_exponential_matches_double_double_series() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let q = random_generator(&mut rng, 20);
        let e = matrix_exponential(&q, 1.0).unwrap();
        let oracle = expm_series_oracle(&q);
        assert!((&e - &oracle).amax() < 1e-10);
        for r in e.row_iter() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        assert!(e.iter().all(|v| *v >= -1e-14));
    }
}

#[test]
fn kernel_matches_two_walk_enumeration() {
    let len = 5;
    let c = 3.0;
    let mu = 0.01;
    let n = SiteFunction::constant(len, c);
    for t_max in 1..=3 {
        let cfg = KernelConfig {
            mu,
            t_max,
            rate_scale: 1.0,
            boundary: Boundary::Clip,
        };
        let (_, theta) = build_kernel(&n, &cfg).unwrap();
        // one-step probabilities from an independent series evaluation
        let q = slfv_core::operators::lineage_generator(&n, Boundary::Clip).unwrap();
        let p = expm_series_oracle(&q.0);
        for i in 0..len {
            for j in 0..len {
                let mut want = 0.0;
                for t in 1..=t_max {
                    // all pairs of paths of length t that end at the same site
                    let paths = len.pow(t as u32);
                    let walk = |start: usize, code: usize| {
                        let (mut at, mut code, mut w) = (start, code, 1.0);
                        for _ in 0..t {
                            let next = code % len;
                            code /= len;
                            w *= p[(at, next)];
                            at = next;
                        }
                        (at, w)
                    };
                    for a in 0..paths {
                        let (ea, wa) = walk(i, a);
                        for b in 0..paths {
                            let (eb, wb) = walk(j, b);
                            if ea == eb {
                                want += (-2.0 * mu * t as f64).exp() * wa * wb / (c + 1.0);
                            }
                        }
                    }
                }
                assert!((theta.get(i, j) - want).abs() < 1e-12, "t_max {t_max} ({i},{j})");
            }
        }
    }
}

#[test]
fn weighted_identity_matches_double_sum() {
    let mut f = PopulationField::uniform(3, 0.4, 6);
    let masses = [(0, 0, 1.0), (0, 1, 0.5), (1, 1, 2.0), (1, 3, 0.25), (2, 0, 0.7), (2, 3, 1.1)];
    for (x, k, m) in masses {
        f.set_type_mass(x, k, m);
    }
    let psi1 = SiteFunction(vec![0.2, 1.0, 0.5]);
    let psi2 = SiteFunction(vec![1.5, 0.0, 0.3]);
    let mut num = 0.0;
    for z1 in 0..3 {
        for z2 in 0..3 {
            for k in 0..6 {
                num += psi1[z1] * psi2[z2] * f.type_mass(z1, k) * f.type_mass(z2, k);
            }
        }
    }
    let n = f.totals();
    let want = num / (psi1.dot(&n) * psi2.dot(&n));
    assert!((identity_weighted(&f, &psi1, &psi2).unwrap() - want).abs() < 1e-15);

    // the numerator is bilinear
    let psi3 = SiteFunction(vec![0.1, 0.9, 2.0]);
    let sum = SiteFunction(psi1.iter().zip(psi3.iter()).map(|(a, b)| 2.0 * a + b).collect());
    let lhs = identity_numerator(&f, &sum, &psi2);
    let rhs = 2.0 * identity_numerator(&f, &psi1, &psi2) + identity_numerator(&f, &psi3, &psi2);
    assert!((lhs - rhs).abs() < 1e-14);
}

#[test]
fn mutation_decay_of_self_identity() {
    for t in [10.0, 125.0, 1000.0] {
        let mut f = PopulationField::one_type_per_site(11, 4.0, 11);
        f.sync_all(t, 1e-4);
        for l in 0..11 {
            let p = identity_point(&f, l, l).unwrap();
            assert!((p - (-2e-4 * t).exp()).abs() < 1e-10);
            assert!((f.total(l) - 4.0).abs() < 1e-12);
        }
    }
}

#[test]
fn parent_sampling_follows_mass() {
    let mut f = PopulationField::uniform(3, 0.0, 4);
    f.set_type_mass(0, 0, 0.25);
    f.set_type_mass(2, 1, 0.75);
    let ball = Ball::new(1, 1, 3, Boundary::Clip);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = 100_000;
    let mut hits = 0usize;
    for _ in 0..draws {
        if f.sample_parent(ball, rng.random()) == Some(Parent::Type(0)) {
            hits += 1;
        }
    }
    let se = (draws as f64 * 0.25 * 0.75).sqrt();
    assert!((hits as f64 - 0.25 * draws as f64).abs() < 4.0 * se);
}

#[test]
fn acceptance_rate_on_a_flat_fixed_point() {
    // logistic growth with capacity 3 keeps a flat field at 3 exactly
    let p = ModelParams::reference(21.2625);
    let cfg = SimConfig::new(p.clone(), GrowthSpec::LogisticConst { kappa: 3.0 }, 50.0, 3);
    let out = run(&cfg).unwrap();
    assert!(out.field.totals().iter().all(|v| (v - 3.0).abs() < 1e-12));
    let c = out.counts;
    let rate = 4.0 / (p.n_max + 1.0);
    let frac = c.accepted as f64 / c.candidates as f64;
    let se = (rate * (1.0 - rate) / c.candidates as f64).sqrt();
    assert!((frac - rate).abs() < 3.0 * se, "{frac} vs {rate}");
}

#[test]
fn zero_growth_conserves_mass() {
    for boundary in [Boundary::Clip, Boundary::Wrap] {
        let p = ModelParams {
            boundary,
            ..ModelParams::reference(21.2625)
        };
        let mut cfg = SimConfig::new(p, GrowthSpec::zero(101), 125.0, 9);
        cfg.strict_assumptions = false;
        let out = run(&cfg).unwrap();
        let total = out.field.global_total();
        assert!((total - 303.0).abs() / 303.0 < 1e-10);
    }
}

#[test]
fn valley_run_respects_bounds_and_is_deterministic() {
    let p = ModelParams::reference(21.2625);
    let mut cfg = SimConfig::new(p.clone(), GrowthSpec::valley(), 30.0, 77);
    cfg.stream = 4;
    let a = run(&cfg).unwrap();
    let b = run(&cfg).unwrap();
    assert_eq!(a.field, b.field);
    assert_eq!(a.counts, b.counts);
    assert!(a.field.totals().iter().all(|v| *v > 0.0 && *v <= p.n_max));
    cfg.stream = 5;
    let c = run(&cfg).unwrap();
    assert_ne!(a.counts, c.counts);
}

#[test]
fn zero_length_run_returns_initial_state() {
    let p = ModelParams::reference(21.2625);
    let mut cfg = SimConfig::new(p, GrowthSpec::valley(), 0.0, 1);
    cfg.initial_state = InitialState::OneTypePerSite;
    let out = run(&cfg).unwrap();
    assert_eq!(out.field, PopulationField::one_type_per_site(101, 3.0, 2000));
    assert_eq!(out.counts.candidates, 0);
}

#[test]
fn stepping_matches_batch_run() {
    let p = ModelParams::reference(21.2625);
    let cfg = SimConfig::new(p, GrowthSpec::valley(), 5.0, 21);
    let mut sim = Simulation::new(&cfg).unwrap();
    let mut log = Vec::new();
    sim.run_to_end(Some(&mut log)).unwrap();
    let mut rec_cfg = cfg.clone();
    rec_cfg.record_events = true;
    let out = run(&rec_cfg).unwrap();
    assert_eq!(out.events, log);
    assert_eq!(&out.field, sim.field());
}
