//! Randomized invariants over generated instances.

use nalgebra::DMatrix;
use proptest::prelude::*;

use morl_core::downstream::offline::{collect_offline, pevi, PeviConfig};
use morl_core::downstream::shared::{bonus, RidgeState};
use morl_core::envgen::{gen_behavior_policy, gen_dataset, gen_task_family};
use morl_core::harness::config::ExperimentConfig;
use morl_core::harness::sweep::{build_instance, run_upstream, upstream_rng};
use morl_core::io::MdpDocument;
use morl_core::linalg::inverse_norm;
use morl_core::mdp::{evaluate_policy, optimal_plan, tv_distance, DeterministicPolicy};
use morl_core::model::fit_all_steps;
use morl_core::seed::{derive_seed, rng_from_seed};
use morl_core::upstream::{empirical_covariance, penalty_table};

fn normalized(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tv_is_half_l1_symmetric_and_bounded(raw in prop::collection::vec((0.01f64..1.0, 0.01f64..1.0), 1..12)) {
        let p = normalized(&raw.iter().map(|x| x.0).collect::<Vec<_>>());
        let q = normalized(&raw.iter().map(|x| x.1).collect::<Vec<_>>());
        let half_l1: f64 = 0.5 * p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>();
        let tv = tv_distance(&p, &q).unwrap();
        prop_assert!((tv - half_l1).abs() < 1e-15);
        prop_assert_eq!(tv, tv_distance(&q, &p).unwrap());
        prop_assert!((0.0..=1.0).contains(&tv));
        prop_assert_eq!(tv_distance(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn inverse_norm_matches_explicit_inverse(
        entries in prop::collection::vec(-1.0f64..1.0, 9),
        x in prop::collection::vec(-2.0f64..2.0, 3),
        lambda in 0.05f64..5.0,
    ) {
        let a = DMatrix::from_row_slice(3, 3, &entries);
        let m = &a * a.transpose() + DMatrix::identity(3, 3) * lambda;
        let inv = m.clone().try_inverse().unwrap();
        let xv = nalgebra::DVector::from_column_slice(&x);
        let oracle = (xv.transpose() * inv * &xv)[(0, 0)].sqrt();
        let got = inverse_norm(&m, &x).unwrap();
        prop_assert!((got - oracle).abs() <= 1e-9 * oracle.max(1.0), "{} vs {}", got, oracle);
    }

    #[test]
    fn bonus_never_grows_when_data_is_added(
        stream in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2), 1..40),
        probe in prop::collection::vec(-1.0f64..1.0, 2),
        lambda in 0.1f64..3.0,
    ) {
        let mut state = RidgeState::new(2, lambda).unwrap();
        let mut last = bonus(&probe, &state).unwrap();
        for phi in &stream {
            state.add(phi);
            let b = bonus(&probe, &state).unwrap();
            prop_assert!(b <= last + 1e-12, "{} > {}", b, last);
            last = b;
        }
    }

    #[test]
    fn seeds_are_reproducible_and_label_separated(parent in any::<u64>(), idx in any::<u64>()) {
        prop_assert_eq!(derive_seed(parent, "a", idx), derive_seed(parent, "a", idx));
        prop_assert_ne!(derive_seed(parent, "a", idx), derive_seed(parent, "b", idx));
        prop_assert_ne!(derive_seed(parent, "a", idx), derive_seed(parent, "a", idx.wrapping_add(1)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn policy_values_lie_between_zero_and_optimal(
        seed in any::<u64>(),
        states in 2usize..7,
        actions in 2usize..4,
        horizon in 1usize..5,
        choice in prop::collection::vec(any::<usize>(), 24),
    ) {
        let fam = gen_task_family(states, actions, horizon, 2, 1, &mut rng_from_seed(seed)).unwrap();
        let task = &fam.tasks()[0];
        let acts: Vec<usize> = (0..horizon * states).map(|i| choice[i % choice.len()] % actions).collect();
        let pi = DeterministicPolicy::new(horizon, states, actions, acts).unwrap();
        let v = evaluate_policy(task.kernel(), task.reward(), &pi).unwrap();
        let (_, opt) = optimal_plan(task.kernel(), task.reward()).unwrap();
        for h in 0..horizon {
            for s in 0..states {
                prop_assert!(v.v(h, s) >= -1e-12);
                prop_assert!(v.v(h, s) <= opt.v(h, s) + 1e-12);
                prop_assert!(opt.v(h, s) <= (horizon - h) as f64 + 1e-12);
            }
        }
    }

    #[test]
    fn mdp_documents_round_trip_bit_exactly(seed in any::<u64>(), states in 2usize..6, horizon in 1usize..4) {
        let fam = gen_task_family(states, 2, horizon, 2, 1, &mut rng_from_seed(seed)).unwrap();
        let doc = MdpDocument::from_mdp(&fam.tasks()[0]);
        let back: MdpDocument = serde_json::from_str(&serde_json::to_string(&doc).unwrap()).unwrap();
        prop_assert_eq!(&back, &doc);
        let mdp = back.to_mdp().unwrap();
        prop_assert_eq!(mdp.kernel(), fam.tasks()[0].kernel());
    }

    #[test]
    fn penalties_lie_in_unit_interval_and_grow_with_alpha(
        seed in any::<u64>(),
        n in 5usize..200,
        alpha in 0.0f64..20.0,
        factor in 1.0f64..4.0,
        lambda in 0.1f64..10.0,
    ) {
        let mut rng = rng_from_seed(seed);
        let fam = gen_task_family(4, 2, 2, 2, 2, &mut rng).unwrap();
        let behaviors: Vec<_> = fam.tasks().iter().map(|m| gen_behavior_policy(m, 0.2, &mut rng).unwrap().0).collect();
        let data = gen_dataset(&fam, &behaviors, n, &mut rng).unwrap();
        let phi = fam.shared_phi();
        let cov: Vec<Vec<DMatrix<f64>>> = (0..2)
            .map(|t| (0..2).map(|h| empirical_covariance(phi, &data, t, h, lambda).unwrap()).collect())
            .collect();
        let lo = penalty_table(phi, &cov, alpha).unwrap();
        let hi = penalty_table(phi, &cov, alpha * factor).unwrap();
        for (a, b) in lo.b_hat.iter().zip(&hi.b_hat) {
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((0.0..=1.0).contains(x));
                prop_assert!(x <= y);
            }
        }
    }

    #[test]
    fn pevi_values_respect_the_clip(seed in any::<u64>(), n in 0usize..300, beta in 0.0f64..5.0, xi in 0.0f64..0.2) {
        let mut rng = rng_from_seed(seed);
        let fam = gen_task_family(4, 3, 3, 2, 1, &mut rng).unwrap();
        let target = &fam.tasks()[0];
        let (behavior, _) = gen_behavior_policy(target, 0.1, &mut rng).unwrap();
        let data = collect_offline(target, &behavior, n, &mut rng).unwrap();
        let (_, v) = pevi(&data, target.phi(), &PeviConfig { lambda_d: 1.0, beta, xi_down: xi }).unwrap();
        for h in 0..3 {
            for s in 0..4 {
                prop_assert!((0.0..=(3 - h) as f64).contains(&v.v(h, s)));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn selected_model_is_at_least_as_likely_as_the_truth(family_seed in 0u64..1000, seed in any::<u64>(), n in 10usize..400) {
        let cfg = ExperimentConfig { family_seed, ..ExperimentConfig::default() };
        let inst = build_instance(&cfg, 2).unwrap();
        let run = run_upstream(&cfg, &inst, n, &mut upstream_rng(seed, 2, n)).unwrap();
        prop_assert!(run.dominates_truth());
        let refit = fit_all_steps(&inst.class, &run.dataset).unwrap();
        prop_assert_eq!(refit.loglik(), run.output.learned.loglik());
    }
}
