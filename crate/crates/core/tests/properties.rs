use bridgekit::autodiff::softplus;
use bridgekit::config::ExperimentConfig;
use bridgekit::forward::{sample_marginal, sample_step};
use bridgekit::metrics::{psnr, wilcoxon_signed_rank};
use bridgekit::nets::embedding::time_embedding;
use bridgekit::posterior::{bayes_oracle_1d, posterior_coeffs, posterior_sample};
use bridgekit::rng::Noise;
use bridgekit::sampler::{self_consistent_estimate, SamplerOptions};
use bridgekit::schedule::{build_schedule, ScheduleConfig, Variant};
use bridgekit::tensor::Tensor;
use bridgekit::training::{discriminator_loss, generator_loss};
use proptest::prelude::*;

fn variant() -> impl Strategy<Value = Variant> {
    prop_oneof![Just(Variant::SelfRdb), Just(Variant::RegularBridge)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_invariants_hold(steps in 2usize..400, gamma in 0.01f64..10.0, v in variant()) {
        let t = build_schedule(&ScheduleConfig::new(steps, gamma, v)).unwrap();
        let total: f64 = (1..=steps).map(|k| t.g(k)).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!((t.s2(steps) - 1.0).abs() < 1e-12);
        for k in 0..=steps {
            prop_assert_eq!(t.mu_x0(k) + t.mu_y(k), 1.0);
            prop_assert!(t.sigma2(k) >= 0.0);
        }
        for k in 1..=steps {
            prop_assert!(t.g(k) > 0.0);
            prop_assert!(t.transition_params(k).unwrap().sigma2_step >= -1e-12);
        }
        match v {
            Variant::SelfRdb => {
                prop_assert_eq!(t.sigma2(steps), gamma);
                for k in 1..=steps {
                    prop_assert!(t.sigma2(k) > t.sigma2(k - 1));
                }
            }
            Variant::RegularBridge => {
                for k in 0..=steps {
                    prop_assert!((t.sigma2(k) - t.sigma2(steps - k)).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn posterior_coefficients_sum_to_one(steps in 2usize..300, gamma in 0.05f64..5.0, v in variant(), frac in 0.0f64..1.0) {
        let table = build_schedule(&ScheduleConfig::new(steps, gamma, v)).unwrap();
        let t = 1 + ((steps - 1) as f64 * frac) as usize;
        let c = posterior_coeffs(&table, t).unwrap();
        prop_assert!((c.c_xt + c.c_y + c.c_x0 - 1.0).abs() < 1e-12);
        prop_assert!(c.v >= 0.0);
    }

    #[test]
    fn closed_form_matches_oracle(
        v in variant(), t in 1usize..=16, x_t in -3.0f64..3.0, y in -1.0f64..1.0, x0 in -1.0f64..1.0,
    ) {
        let table = build_schedule(&ScheduleConfig::new(16, 2.2, v)).unwrap();
        let c = posterior_coeffs(&table, t).unwrap();
        let (m, var) = bayes_oracle_1d(&table, t, x_t, y, x0).unwrap();
        prop_assert!((c.mean(x_t, y, x0) - m).abs() < 1e-9);
        prop_assert!((c.v - var).abs() < 1e-9);
    }

    #[test]
    fn noiseless_forward_mean_maps_to_previous_mean(
        v in variant(), t in 1usize..=32, y in -1.0f64..1.0, x0 in -1.0f64..1.0,
    ) {
        let table = build_schedule(&ScheduleConfig::new(32, 2.2, v)).unwrap();
        let x_t = table.mu_x0(t) * x0 + table.mu_y(t) * y;
        let m = posterior_coeffs(&table, t).unwrap().mean(x_t, y, x0);
        let expect = table.mu_x0(t - 1) * x0 + table.mu_y(t - 1) * y;
        prop_assert!((m - expect).abs() < 1e-12);
    }

    #[test]
    fn constant_inputs_are_fixed_by_the_posterior_mean(v in variant(), t in 1usize..=32, c in -1.0f64..1.0) {
        let table = build_schedule(&ScheduleConfig::new(32, 2.2, v)).unwrap();
        let x = Tensor::full(&[2, 3], c);
        let out = posterior_sample(&x, &x, &x, t, &table, &Noise::Zero).unwrap();
        prop_assert!(out.data().iter().all(|&o| (o - c).abs() < 1e-12));
    }

    #[test]
    fn zero_noise_forward_is_convex_path(v in variant(), t in 0usize..=32, a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let table = build_schedule(&ScheduleConfig::new(32, 2.2, v)).unwrap();
        let x0 = Tensor::full(&[1, 2], a);
        let y = Tensor::full(&[1, 2], b);
        let m = sample_marginal(&x0, &y, t, &table, &Noise::Zero).unwrap();
        let mut chained = x0.clone();
        for k in 1..=t {
            chained = sample_step(&chained, &y, k, &table, &Noise::Zero).unwrap();
        }
        let expect = table.mu_x0(t) * a + table.mu_y(t) * b;
        prop_assert!((m.data()[0] - expect).abs() < 1e-15);
        prop_assert!((chained.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn seeded_draws_are_reproducible(seed in any::<u64>(), t in 1usize..=8) {
        let table = build_schedule(&ScheduleConfig::new(8, 2.2, Variant::SelfRdb)).unwrap();
        let x = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1);
        let a = sample_marginal(&x, &x, t, &table, &Noise::Seeded(seed)).unwrap();
        let b = sample_marginal(&x, &x, t, &table, &Noise::Seeded(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn recursion_stops_within_budget(r_max in 1usize..10, rate in 0.0f64..0.95, c in 0.05f64..1.0) {
        let g = |_: &Tensor, _: usize, _: &Tensor, u: &Tensor| Ok(u.map(|v| rate * v + c));
        let x = Tensor::zeros(&[2, 3]);
        let opts = SamplerOptions { r_max, ..SamplerOptions::default() };
        let est = self_consistent_estimate(&g, &x, 1, &x, &opts).unwrap();
        prop_assert!(est.recursions >= 1 && est.recursions <= r_max);
        prop_assert_eq!(est.changes.len(), est.recursions);
        if est.recursions < r_max {
            prop_assert!(*est.changes.last().unwrap() < opts.rel_tol);
        }
    }

    #[test]
    fn losses_are_nonnegative(logit in -50.0f64..50.0, gap in 0.0f64..2.0, pen in 0.0f64..10.0) {
        let x0 = Tensor::full(&[2, 2], gap);
        let z = Tensor::zeros(&[2, 2]);
        let l = Tensor::full(&[2], logit);
        prop_assert!(generator_loss(&x0, &z, &l, 1.0).unwrap() >= 0.0);
        let p = Tensor::full(&[2], pen);
        let d = discriminator_loss(&l, &l, &p, 1.0).unwrap();
        prop_assert!((d - (softplus(-logit) + softplus(logit) + pen)).abs() < 1e-12);
    }

    #[test]
    fn psnr_is_symmetric(a in proptest::collection::vec(0.0f64..1.0, 16), b in proptest::collection::vec(0.0f64..1.0, 16)) {
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn wilcoxon_p_is_a_probability(d in proptest::collection::vec(-5.0f64..5.0, 5..40)) {
        let zeros = vec![0.0; d.len()];
        if let Ok(p) = wilcoxon_signed_rank(&d, &zeros) {
            prop_assert!((0.0..=1.0).contains(&p));
            let q = wilcoxon_signed_rank(&zeros, &d).unwrap();
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn time_embeddings_are_bounded(t in 0usize..100_000, half in 1usize..64) {
        let e = time_embedding(t, 2 * half).unwrap();
        prop_assert_eq!(e.len(), 2 * half);
        prop_assert!(e.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn config_text_round_trips(steps in 2usize..2000, lr in 1e-6f64..1.0, gamma in 0.01f64..10.0, seed in any::<u64>()) {
        let mut c = ExperimentConfig::default();
        c.set("T", &steps.to_string()).unwrap();
        c.set("lr", &format!("{lr:?}")).unwrap();
        c.set("gamma", &format!("{gamma:?}")).unwrap();
        c.set("seed", &seed.to_string()).unwrap();
        prop_assert_eq!(ExperimentConfig::from_text(&c.to_text()).unwrap(), c);
    }
}
