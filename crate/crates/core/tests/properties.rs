//! Invariants over randomly drawn inputs.

use mfbsde::calculus::{
    contraction_constant, gamma, stochastic_exponential, tnorm_sq, validate_standard_data, GeneratorSpec, LawSummary, LinearGenerator,
    StandardData, TerminalFn, TerminalSpec, ThetaSpec,
};
use mfbsde::cli::ExperimentConfig;
use mfbsde::drivers::{make_combined_driver, make_donsker_driver, make_jump_driver, Atom, DonskerMode, DriverSpec, IncrementLaw, StepKernel};
use mfbsde::engine::{solve_mckean_vlasov, solve_mean_field, Backend, Instance, PicardSolver, Q_MAX};
use mfbsde::measures::{coupling_bound, w2_sq, EmpiricalMeasure};
use mfbsde::stability_lab::tail_mass;
use proptest::prelude::*;

fn kernel_strategy() -> impl Strategy<Value = StepKernel> {
    (prop::collection::vec((-2.0f64..2.0, 0.05f64..1.0), 1..6), 1.1f64..2.0, 0.0f64..1.0).prop_map(|(atoms, spread, extra)| {
        let total: f64 = atoms.iter().map(|a| a.1).sum::<f64>() * spread;
        let mut atoms: Vec<Atom> = atoms.into_iter().map(|(mark, p)| Atom { mark, prob: p / total }).collect();
        let mean: f64 = atoms.iter().map(|a| a.mark * a.prob).sum();
        let rest = 1.0 - atoms.iter().map(|a| a.prob).sum::<f64>();
        atoms.push(Atom { mark: -mean / rest, prob: rest });
        let law = IncrementLaw::new(atoms).unwrap();
        StepKernel::from_law(&law, law.second_moment() + extra)
    })
}

fn theta_strategy() -> impl Strategy<Value = ThetaSpec> {
    prop_oneof![Just(ThetaSpec::Identity), (-1.0f64..1.0).prop_map(ThetaSpec::Scaled), (0.01f64..3.0).prop_map(ThetaSpec::Clipped)]
}

fn driver_strategy() -> impl Strategy<Value = DriverSpec> {
    prop_oneof![
        (1usize..=3).prop_map(|k| make_donsker_driver(k, 1.0, DonskerMode::Rademacher).unwrap()),
        (1usize..=3, 0.2f64..2.0).prop_map(|(k, s)| make_jump_driver(k, 1.0, s).unwrap()),
        (0.1f64..0.9, 0.2f64..1.0).prop_map(|(share, p)| make_combined_driver(1, 1.0, share, p).unwrap()),
    ]
}

fn terminal_strategy() -> impl Strategy<Value = TerminalSpec> {
    let g = prop_oneof![
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0).prop_map(|(a2, a1, a0)| TerminalFn::Quadratic { a2, a1, a0 }),
        (0.1f64..2.0, 0.5f64..3.0).prop_map(|(amp, freq)| TerminalFn::Sine { amp, freq }),
    ];
    (g, -0.5f64..0.5).prop_map(|(g, coupling_scale)| TerminalSpec { g, coupling_scale, coupling_gamma: 1.0 })
}

fn generator_strategy(scale: f64) -> impl Strategy<Value = GeneratorSpec> {
    prop::array::uniform5(-scale..scale).prop_map(|[a, b, cu, e, c0]| GeneratorSpec::linear(a, b, cu, e, c0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gamma_is_lipschitz_in_the_jump_norm(
        k in kernel_strategy(),
        theta in theta_strategy(),
        seed in prop::collection::vec(-5.0f64..5.0, 14),
    ) {
        let n = k.len();
        let (u1, u2) = (&seed[..n], &seed[7..7 + n]);
        let d: Vec<f64> = u1.iter().zip(u2).map(|(a, b)| a - b).collect();
        let lhs = (gamma(u1, &theta, &k, 0.3).unwrap() - gamma(u2, &theta, &k, 0.3).unwrap()).powi(2);
        prop_assert!(lhs <= 2.0 * tnorm_sq(&d, &k).unwrap() * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn any_coupling_costs_at_least_w2(dim in 1usize..=2, n in 1usize..20, pts in prop::collection::vec(-3.0f64..3.0, 80)) {
        let (xs, ys) = (&pts[..n * dim], &pts[40..40 + n * dim]);
        let w = w2_sq(&EmpiricalMeasure::uniform(dim, xs.to_vec()).unwrap(), &EmpiricalMeasure::uniform(dim, ys.to_vec()).unwrap()).unwrap();
        prop_assert!(coupling_bound(xs, ys, dim).unwrap() >= w - 1e-12);
    }

    #[test]
    fn martingale_part_is_orthogonal(
        driver in driver_strategy(),
        terminal in terminal_strategy(),
        f in generator_strategy(0.05),
        players in 1usize..=2,
    ) {
        let sd = StandardData::new(driver, terminal, ThetaSpec::Clipped(1.0), f, 240.0).unwrap();
        let mut solver = PicardSolver::new(Instance::mean_field(&sd, players, &Backend::tree()).unwrap()).unwrap();
        solver.run(1e-12, Q_MAX).unwrap();
        for (i, sol) in solver.current.iter().enumerate() {
            let (lhs, rhs) = solver.instance.bracket_identity(sol, i).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn symmetric_players_get_the_same_value(
        driver in driver_strategy(),
        terminal in terminal_strategy(),
        f in generator_strategy(0.05),
    ) {
        let sd = StandardData::new(driver, terminal, ThetaSpec::Identity, f, 240.0).unwrap();
        let (sols, _) = solve_mean_field(&sd, 2, 1e-14, Q_MAX, &Backend::tree()).unwrap();
        prop_assert!((sols[0].y[0][0] - sols[1].y[0][0]).abs() < 1e-12);
    }

    #[test]
    fn picard_differences_shrink_geometrically(
        k in 2usize..=6,
        terminal in terminal_strategy(),
        coef in prop::array::uniform3(-5e-5f64..5e-5),
    ) {
        let f = GeneratorSpec::linear(coef[0], coef[1], 0.0, coef[2], 0.1);
        let sd = StandardData::new(make_donsker_driver(k, 1.0, DonskerMode::Rademacher).unwrap(), terminal, ThetaSpec::Identity, f, 240.0).unwrap();
        prop_assume!(validate_standard_data(&sd).passed());
        let (_, st) = solve_mckean_vlasov(&sd, 1e-26, Q_MAX, &Backend::tree()).unwrap();
        for w in st.deltas.windows(2).skip(1) {
            // below this level the differences are rounding noise
            if w[0] > 1e-24 {
                prop_assert!(w[1] <= st.rate_bound * w[0] * (1.0 + 1e-6), "{} after {}", w[1], w[0]);
            }
        }
    }

    #[test]
    fn tail_mass_decreases_with_the_radius(k in 1usize..=6, terminal in terminal_strategy(), r1 in 0.0f64..3.0, dr in 0.0f64..3.0) {
        let sd = StandardData::new(make_donsker_driver(k, 1.0, DonskerMode::Rademacher).unwrap(), terminal, ThetaSpec::Identity, GeneratorSpec::zero(), 240.0).unwrap();
        let (sol, _) = solve_mckean_vlasov(&sd, 1e-12, Q_MAX, &Backend::tree()).unwrap();
        prop_assert!(tail_mass(&sol, r1 + dr) <= tail_mass(&sol, r1));
    }

    #[test]
    fn contraction_constant_is_monotone(beta in 1.0f64..1000.0, db in 0.0f64..100.0, phi in 0.0f64..0.1, dp in 0.0f64..0.1) {
        let m = contraction_constant(beta, phi).unwrap();
        prop_assert!(contraction_constant(beta + db, phi).unwrap() <= m);
        prop_assert!(contraction_constant(beta, phi + dp).unwrap() >= m);
    }

    #[test]
    fn config_text_round_trips(
        seed in any::<u64>(),
        ks in prop::collection::vec(1usize..512, 1..4),
        beta in 1.0f64..1000.0,
        e in -1.0f64..1.0,
        particles in 1usize..100_000,
        reps in 1usize..50,
    ) {
        let cfg = ExperimentConfig {
            seed,
            ks,
            beta_hat: beta,
            generator: LinearGenerator { e, ..Default::default() },
            particles,
            reps,
            ..Default::default()
        };
        prop_assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn law_summary_ignores_order(mut v in prop::collection::vec(-1e3f64..1e3, 1..64), rot in 0usize..64) {
        let a = LawSummary::uniform(&v);
        let r = rot % v.len();
        v.rotate_left(r);
        v.reverse();
        prop_assert_eq!(LawSummary::uniform(&v), a);
    }

    #[test]
    fn stochastic_exponential_is_the_running_product(incs in prop::collection::vec(0.0f64..0.5, 1..20), beta in 0.0f64..10.0) {
        let clock: Vec<f64> = incs.iter().scan(0.0, |acc, d| { *acc += d; Some(*acc) }).collect();
        let e = stochastic_exponential(&clock, beta).unwrap();
        let mut prod = 1.0;
        for (j, d) in incs.iter().enumerate() {
            prod *= 1.0 + beta * d;
            prop_assert!((e[j] - prod).abs() <= 1e-12 * prod);
            prop_assert!(j == 0 || e[j] >= e[j - 1]);
        }
    }
}
