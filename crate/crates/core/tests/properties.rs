use granulite::cli::{parse_scenario, OutputSpec, ProbeKind, ProbeSpec, Scenario, SweepSpec};
use granulite::dsmc::checkpoint::Checkpoint;
use granulite::dsmc::{InitKind, ObservableSchedule, ParticleEnsemble};
use granulite::kinematics::{energy_loss, post_collision_n, post_collision_sigma, sigma_from_n, CollisionPair, Vec3};
use granulite::observables::{fit_exponential_rate, moments, spatial_mode, ModeField};
use granulite::restitution::{RestitutionModel, RestitutionSpec};
use proptest::prelude::*;

fn model() -> impl Strategy<Value = RestitutionModel> {
    prop_oneof![
        (0.05f64..=1.0).prop_map(|e0| RestitutionModel::constant(e0).unwrap()),
        (1e-3f64..10.0).prop_map(|a| RestitutionModel::viscoelastic(a).unwrap()),
        (0.01f64..5.0, 0.05f64..1.0, 0.01f64..0.9)
            .prop_map(|(a, g, m)| RestitutionModel::capped_power_law(a, g, m).unwrap()),
    ]
}

/// Laws for which `r e(r)` is increasing: for the capped law the cap must
/// engage before `r (1 - a r^γ)` peaks, where `e = γ/(1+γ)`.
fn structured_model() -> impl Strategy<Value = RestitutionModel> {
    prop_oneof![
        (1e-3f64..10.0).prop_map(|a| RestitutionModel::viscoelastic(a).unwrap()),
        (0.01f64..5.0, 0.05f64..1.0, 0.01f64..0.98).prop_map(|(a, g, u)| {
            let lo = g / (1.0 + g) + 0.01;
            RestitutionModel::capped_power_law(a, g, lo + u * (0.99 - lo)).unwrap()
        }),
    ]
}

fn vector(scale: f64) -> impl Strategy<Value = Vec3> {
    prop::array::uniform3(-scale..scale).prop_map(|[x, y, z]| Vec3::new(x, y, z))
}

fn unit() -> impl Strategy<Value = Vec3> {
    vector(1.0)
        .prop_filter("away from zero", |v| v.norm() > 1e-3)
        .prop_map(|v| v.normalize())
}

fn ensemble(max: usize) -> impl Strategy<Value = ParticleEnsemble> {
    prop::collection::vec((prop::array::uniform3(0.0f64..1.0), prop::array::uniform3(-3.0f64..3.0)), 2..max)
        .prop_map(|rows| {
            let (x, v): (Vec<_>, Vec<_>) = rows
                .into_iter()
                .map(|(x, v)| (Vec3::from(x), Vec3::from(v)))
                .unzip();
            ParticleEnsemble::new(x, v).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn restitution_lies_in_unit_interval(m in model(), r in 0.0f64..1e4) {
        let e = m.eval(r).unwrap();
        prop_assert!(e > 0.0 && e <= 1.0);
    }

    #[test]
    fn viscoelastic_root_solves_its_equation(a in 1e-3f64..10.0, r in 0.0f64..1e4) {
        let e = RestitutionModel::viscoelastic(a).unwrap().eval(r).unwrap();
        prop_assert!((e + a * r.powf(0.2) * e.powf(0.6) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn monotone_structure(m in structured_model(), r in 0.0f64..1e3, step in 1e-6f64..10.0) {
        let (r2, e1) = (r + step, m.eval(r).unwrap());
        let e2 = m.eval(r2).unwrap();
        prop_assert!(e2 <= e1);
        prop_assert!(r2 * e2 > r * e1);
    }

    #[test]
    fn checker_flags_a_late_cap(a in 0.01f64..5.0, g in 0.05f64..1.0, u in 0.0f64..0.9) {
        let e_min = u * (g / (1.0 + g) - 0.01).max(0.001);
        let m = RestitutionModel::capped_power_law(a, g, e_min).unwrap();
        let peak = (1.0 / (a * (1.0 + g))).powf(1.0 / g);
        let grid: Vec<f64> = (0..=400).map(|k| 4.0 * peak * k as f64 / 400.0).collect();
        prop_assert!(!m.check_assumptions(&grid).unwrap().r_e_increasing);
    }

    #[test]
    fn collisions_conserve_momentum_and_lose_energy(
        m in model(), v in vector(5.0), w in vector(5.0), sigma in unit(), lambda in 0.0f64..=1.0,
    ) {
        prop_assume!((v - w).norm() > 1e-9);
        let pair = CollisionPair::new(v, w).unwrap();
        let out = post_collision_sigma(&pair, &sigma, &m, lambda).unwrap();
        let drift = (out.v_prime + out.v_star_prime - v - w).norm();
        prop_assert!(drift <= 1e-13 * (1.0 + v.norm() + w.norm()));
        prop_assert!(out.delta_energy <= 0.0);
        if out.e_used < 1.0 && out.impact_speed > 0.0 {
            prop_assert!(out.delta_energy < 0.0);
        }
        let recomputed = out.v_prime.norm_squared() + out.v_star_prime.norm_squared() - v.norm_squared() - w.norm_squared();
        let loss = energy_loss(&pair, &sigma, out.e_used).unwrap();
        prop_assert!((recomputed - loss).abs() <= 1e-12 * (1.0 + v.norm_squared() + w.norm_squared()));
    }

    #[test]
    fn sigma_and_normal_forms_agree(m in model(), v in vector(5.0), w in vector(5.0), n in unit(), lambda in 0.0f64..=1.0) {
        let u = v - w;
        prop_assume!(u.norm() > 1e-6);
        let sigma = sigma_from_n(&u.normalize(), &n);
        prop_assume!(sigma.is_ok());
        let pair = CollisionPair::new(v, w).unwrap();
        let a = post_collision_n(&pair, &n, &m, lambda).unwrap();
        let b = post_collision_sigma(&pair, &sigma.unwrap(), &m, lambda).unwrap();
        for i in 0..3 {
            prop_assert!((a.v_prime[i] - b.v_prime[i]).abs() <= 1e-12);
            prop_assert!((a.v_star_prime[i] - b.v_star_prime[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn moments_average_by_mass_when_merged(a in ensemble(40), b in ensemble(40)) {
        let (na, nb) = (a.len() as f64, b.len() as f64);
        let merged = ParticleEnsemble::new(
            a.positions.iter().chain(&b.positions).copied().collect(),
            a.velocities.iter().chain(&b.velocities).copied().collect(),
        ).unwrap();
        let (ma, mb, m) = (moments(&a), moments(&b), moments(&merged));
        let mix = |x: f64, y: f64| (na * x + nb * y) / (na + nb);
        prop_assert!((m.mass - 1.0).abs() < 1e-12);
        prop_assert!((m.energy - mix(ma.energy, mb.energy)).abs() < 1e-10);
        for i in 0..3 {
            prop_assert!((m.momentum[i] - mix(ma.momentum[i], mb.momentum[i])).abs() < 1e-10);
        }
        let k0 = spatial_mode(&merged, [0, 0, 0], ModeField::Density);
        prop_assert!((k0.re - 1.0).abs() < 1e-12 && k0.im.abs() < 1e-12);
    }

    #[test]
    fn rate_fit_ignores_amplitude(rate in -5.0f64..-0.1, scale in 1e-3f64..1e3, noise in prop::collection::vec(-0.05f64..0.05, 12)) {
        let series: Vec<(f64, f64)> = noise.iter().enumerate()
            .map(|(i, n)| { let t = 0.1 * i as f64; (t, (rate * t + n).exp()) })
            .collect();
        let scaled: Vec<(f64, f64)> = series.iter().map(|(t, y)| (*t, scale * y)).collect();
        let a = fit_exponential_rate(&series, (0.0, 2.0)).unwrap();
        let b = fit_exponential_rate(&scaled, (0.0, 2.0)).unwrap();
        prop_assert!((a.rate - b.rate).abs() < 1e-9);
        prop_assert!((b.intercept - a.intercept - scale.ln()).abs() < 1e-9);
    }

    #[test]
    fn checkpoints_round_trip_byte_identically(e in ensemble(60), m in model(), lambda in 0.0f64..=1.0, seed: u64, step in 0u64..1_000_000) {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        let c = Checkpoint { lambda, model: m, seed, step, ensemble: e };
        c.write(&p1).unwrap();
        let back = Checkpoint::read(&p1).unwrap();
        prop_assert_eq!(&back, &c);
        back.write(&p2).unwrap();
        prop_assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}

fn restitution_spec() -> impl Strategy<Value = RestitutionSpec> {
    prop_oneof![
        Just(RestitutionSpec::Constant { e0: None }),
        (0.1f64..=1.0).prop_map(|e0| RestitutionSpec::Constant { e0: Some(e0) }),
        (1e-3f64..10.0).prop_map(|a| RestitutionSpec::Viscoelastic { a }),
        (0.01f64..5.0, 0.05f64..1.0, 0.01f64..0.9).prop_map(|(a, gamma, e_min)| RestitutionSpec::Capped { a, gamma, e_min }),
    ]
}

fn init_kind() -> impl Strategy<Value = InitKind> {
    prop_oneof![
        (0.01f64..10.0).prop_map(|theta| InitKind::Maxwellian { theta }),
        (0.01f64..10.0, 0.01f64..10.0, 0.0f64..=1.0)
            .prop_map(|(theta1, theta2, fraction)| InitKind::TwoTemperature { theta1, theta2, fraction }),
        (0.01f64..10.0, 0.0f64..0.99, prop::array::uniform3(1i64..4))
            .prop_map(|(theta, epsilon, k)| InitKind::Modulated { theta, epsilon, k }),
    ]
}

fn scenario() -> impl Strategy<Value = Scenario> {
    (
        (0.0f64..0.99, 2usize..1_000_000, prop::array::uniform3(1usize..32), prop::option::of(1e-4f64..0.1)),
        (0.0f64..100.0, any::<bool>(), any::<u64>(), restitution_spec(), init_kind()),
        (1e-3f64..10.0, prop::collection::vec(prop::array::uniform3(-4i64..5), 0..4)),
        prop::option::of((0.01f64..0.2, 2usize..32, prop::option::of(0.1f64..50.0))),
        prop::option::of(prop::collection::btree_set(1u32..999, 1..6)),
        ("[a-z]{1,8}", prop::option::of(0.01f64..10.0)),
    )
        .prop_map(|((lambda, n, cells, dt), (t_end, projection, seed, restitution, init), (period, modes), probe, sweep, (dir, ckpt))| {
            Scenario {
                name: dir.clone(),
                lambda,
                n_particles: n,
                cells,
                dt,
                t_end,
                thermostat: true,
                momentum_projection: projection,
                seed,
                restitution,
                init,
                schedule: ObservableSchedule {
                    modes,
                    ..ObservableSchedule::moments_every(period)
                },
                probe: probe.map(|(delta, replicas, duration)| ProbeSpec {
                    kind: ProbeKind::MeasureMu,
                    delta,
                    replicas,
                    duration,
                    window_collision_times: 20.0,
                }),
                sweep: sweep.map(|s| SweepSpec {
                    lambdas: s.into_iter().map(|k| k as f64 / 1000.0).collect(),
                }),
                output: OutputSpec {
                    dir: dir.into(),
                    checkpoint_period: ckpt,
                },
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn scenarios_round_trip(s in scenario()) {
        prop_assume!(s.validate().is_ok());
        let text = s.to_toml().unwrap();
        prop_assert_eq!(parse_scenario(&text).unwrap(), s);
    }
}
