//! Objective, conjugation and configuration invariants on a small model.

use graded_core::graded::{EgtReweighting, NormKind};
use graded_core::model::{conjugate_state, Batch, UtilitySource};
use graded_core::objective::{
    evaluate, objective_lower_bound, softplus_margin, sparsity_penalty, ObjectiveConfig, Regularizer,
};
use graded_core::routing::GateKind;
use graded_core::verify::toy_model;
use graded_core::Tensor;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg() -> Config {
    Config {
        cases: 32,
        rng_seed: RngSeed::Fixed(0x0b1),
        failure_persistence: None,
        ..Config::default()
    }
}

fn objective(lambda: f64, mu: f64, reg: Regularizer) -> ObjectiveConfig {
    ObjectiveConfig {
        lambda,
        mu_sp: mu,
        beta: None,
        regularizer: reg,
        learn_thresholds: false,
    }
}

fn reg() -> impl Strategy<Value = Regularizer> {
    prop_oneof![Just(Regularizer::Entropy), Just(Regularizer::GroupLasso)]
}

proptest! {
    #![proptest_config(cfg())]

    #[test]
    fn objective_parts_are_nonnegative_and_bounded_below(
        seed in any::<u64>(),
        lambda in 0.0f64..2.0,
        mu in 0.0f64..2.0,
        reg in reg(),
    ) {
        let (m, b) = toy_model(NormKind::LayerNorm, GateKind::SoftmaxGlobal, seed).unwrap();
        let c = objective(lambda, mu, reg);
        let bd = evaluate(&m, &b, &c, &UtilitySource::Detached).unwrap();
        prop_assert!(bd.lm > 0.0);
        prop_assert!(bd.total >= bd.lm - 1e-12);
        prop_assert!(objective_lower_bound(&m, &b, &c).unwrap() <= bd.total + 1e-12);
        prop_assert_eq!(evaluate(&m, &b, &objective(0.0, 0.0, reg), &UtilitySource::Detached).unwrap().total, bd.lm);
    }

    #[test]
    fn conjugation_leaves_the_objective_unchanged(seed in any::<u64>(), c in 0.5f64..2.0, reg in reg()) {
        let (m, b) = toy_model(NormKind::None, GateKind::SoftmaxPerDestination, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = EgtReweighting::new(
            &m.grading,
            m.grading.dims().iter().map(|&n| Tensor::eye(n).scale(c).add(&Tensor::randn(n, n, 0.2, &mut rng)).unwrap()).collect(),
        ).unwrap();
        let mc = m.conjugate(&d).unwrap();
        let bc = Batch::new(conjugate_state(&b.z0, &d).unwrap(), b.targets.clone(), b.seq_len).unwrap();
        let cfg = objective(0.5, 0.2, reg);
        let before = evaluate(&m, &b, &cfg, &UtilitySource::Detached).unwrap().total;
        let after = evaluate(&mc, &bc, &cfg, &UtilitySource::Detached).unwrap().total;
        prop_assert!((before - after).abs() < 1e-8);
    }

    #[test]
    fn penalty_signs(u in -20.0f64..20.0, beta in 0.1f64..10.0, a in prop::collection::vec(0.0f64..1.0, 1..8)) {
        prop_assert!(softplus_margin(u, beta) > 0.0);
        let dest: Vec<usize> = (0..a.len()).map(|i| i % 2).collect();
        prop_assert!(sparsity_penalty(&a, &dest, Regularizer::Entropy) <= 0.0);
        prop_assert!(sparsity_penalty(&a, &dest, Regularizer::GroupLasso) >= 0.0);
    }

    #[test]
    fn config_validation(lambda in -1.0f64..1.0, mu in -1.0f64..1.0, beta in -1.0f64..1.0) {
        let c = ObjectiveConfig { beta: Some(beta), ..objective(lambda, mu, Regularizer::Entropy) };
        prop_assert_eq!(c.validate().is_ok(), lambda >= 0.0 && mu >= 0.0 && beta > 0.0);
    }
}
