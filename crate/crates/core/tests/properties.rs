use proptest::prelude::*;

use sme_core::config::parse_config;
use sme_core::continuous::{gamma_continuous, ScheduleFns};
use sme_core::discrete::{gamma_bar, phi, DiscreteDynamics, NoiseMode, OptState, Optimizer, Regime};
use sme_core::numerics::{namespace, sym_sqrt, Matrix, RngStream, SymMatrix};
use sme_core::problem::generate_problem;
use sme_core::simulate::Welford;

fn psd(n: usize, entries: &[f64]) -> SymMatrix {
    let a = Matrix::from_fn(n, n, |i, j| entries[i * n + j]);
    SymMatrix::from_matrix(&a.matmul(&a.transpose()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sym_sqrt_squares_back(n in 1usize..7, entries in prop::collection::vec(-3.0f64..3.0, 36)) {
        let s = psd(n, &entries);
        let r = sym_sqrt(&s, 0.0).unwrap();
        let back = r.as_matrix().matmul(r.as_matrix());
        prop_assert!(back.max_abs_diff(s.as_matrix()) <= 1e-10 * s.norm_inf().max(1.0));
        prop_assert!(r.as_matrix().max_abs_diff(&r.as_matrix().transpose()) == 0.0);
    }

    #[test]
    fn welford_merge_equals_sequential(xs in prop::collection::vec(-1e3f64..1e3, 2..200), split in 0usize..200) {
        let split = split % xs.len();
        let mut all = Welford::default();
        xs.iter().for_each(|&x| all.push(x));
        let (mut a, mut b) = (Welford::default(), Welford::default());
        xs[..split].iter().for_each(|&x| a.push(x));
        xs[split..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        prop_assert_eq!(a.count, all.count);
        prop_assert!((a.mean - all.mean).abs() <= 1e-9 * (1.0 + all.mean.abs()));
        prop_assert!((a.variance() - all.variance()).abs() <= 1e-7 * (1.0 + all.variance()));
    }

    #[test]
    fn config_survives_serialization(
        adam in any::<bool>(),
        batch in any::<bool>(),
        order in 1u8..3,
        tau in 0.01f64..0.2,
        t_start in 0.5f64..2.0,
        sigma in 0.1f64..3.0,
        seed in 0u64..1000,
    ) {
        let text = format!(
            "[optimizer]\noptimizer = {}\nregime = {}\norder = {order}\nsigma = {sigma:?}\n\
             [problem]\nproblem_seed = {seed}\n[simulation]\ntau = {tau:?}\nt_start = {t_start:?}\n",
            if adam { "adam" } else { "rmsprop" },
            if batch { "batch-equivalent" } else { "balistic" },
        );
        let c = parse_config(&text).unwrap();
        prop_assert_eq!(parse_config(&c.serialize()).unwrap(), c);
    }

    #[test]
    fn second_momentum_stays_positive(adam in any::<bool>(), tau in 0.02f64..0.5, path in 0u64..1000) {
        let problem = generate_problem(3, 5, 6, 500);
        let opt = if adam { Optimizer::Adam } else { Optimizer::Rmsprop };
        let hyper = sme_core::discrete::Hyper::new(tau, 2.0);
        let dynamics = DiscreteDynamics::new(opt, Regime::Balistic, hyper, &problem, NoiseMode::Dataset { batch: 1 }).unwrap();
        let x0 = match opt {
            Optimizer::Rmsprop => OptState::rmsprop(vec![1.0, -0.5, 0.3], vec![0.5; 3]),
            Optimizer::Adam => OptState::adam(vec![1.0, -0.5, 0.3], vec![0.0; 3], vec![0.5; 3]),
        };
        let mut rng = RngStream::new(17, namespace::DISCRETE, path);
        for s in dynamics.run(&x0, &mut rng, 1).unwrap() {
            prop_assert!(s.u.iter().all(|&u| u > 0.0));
        }
    }

    #[test]
    fn clamp_is_identity_above_threshold(x in 0.0f64..10.0, c in 1e-6f64..1.0) {
        prop_assume!(x > c);
        prop_assert_eq!(phi(x, c).to_bits(), x.to_bits());
        prop_assert!(phi(x.min(c) - 1.0, c) > 0.0);
    }

    #[test]
    fn schedules_increase_towards_one(lambda in 0.1f64..3.0, tau in 0.005f64..0.25, k in 1usize..400) {
        // Beyond λt ≈ 20 the schedules equal 1 to machine precision.
        prop_assume!(lambda * tau < 0.5 && lambda * k as f64 * tau < 20.0);
        let s = ScheduleFns::new(lambda, lambda, tau);
        let t = k as f64 * tau;
        prop_assert_eq!(s.gamma2(0.0), 0.0);
        prop_assert!(s.gamma2(t) > s.gamma2(t - tau) && s.gamma2(t) <= 1.0);
        prop_assert!(s.gamma1(t) > s.gamma1(t - tau) && s.gamma1(t) <= 1.0);
        prop_assert!(gamma_bar(lambda, k, tau) > gamma_bar(lambda, k - 1, tau));
        let gap = (gamma_bar(lambda, k, tau) - gamma_continuous(2, t, lambda, tau)).abs();
        prop_assert!(gap <= 10.0 * (lambda * tau).powi(5) * t.max(1.0));
    }
}
