//! Gate masking, normalization and update invariants.

use graded_core::graded::{Edge, EdgeSet, GradedVector, Grading};
use graded_core::routing::{
    augment_logits, edge_destinations, gate, grid_destinations, morphic_update, routing_logits, scatter_to_grid,
    GateKind, RouterParams, RoutingConfig,
};
use graded_core::Tensor;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg() -> Config {
    Config {
        cases: 128,
        rng_seed: RngSeed::Fixed(0x7007),
        failure_persistence: None,
        ..Config::default()
    }
}

fn setting() -> impl Strategy<Value = (Grading, EdgeSet)> {
    (2usize..5, 1usize..4).prop_flat_map(|(n, d)| {
        let all: Vec<Edge> = (0..n).flat_map(|a| (0..n).map(move |b| Edge::new(a, b))).collect();
        let len = all.len();
        prop::sample::subsequence(all, 1..=len).prop_map(move |e| {
            let g = Grading::uniform(n, d).unwrap();
            let set = EdgeSet::new(&g, e).unwrap();
            (g, set)
        })
    })
}

fn kind() -> impl Strategy<Value = GateKind> {
    prop_oneof![
        Just(GateKind::SoftmaxGlobal),
        Just(GateKind::SoftmaxPerDestination),
        Just(GateKind::Logistic),
        Just(GateKind::HardArgmax),
    ]
}

proptest! {
    #![proptest_config(cfg())]

    #[test]
    fn gates_vanish_off_support_and_normalize_on_it(
        (g, e) in setting(),
        kind in kind(),
        t_sm in 0.05f64..3.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = g.len();
        let z = GradedVector::randn(&g, 4, 1.0, &mut rng);
        let router = RouterParams::init(&g, &e, 2, 1.0, &mut rng);
        let grid = scatter_to_grid(&e, n, &routing_logits(&router, &e, &z, 2).unwrap());
        let a = gate(&grid, &grid_destinations(n), kind, t_sm).unwrap();
        for t in 0..a.rows() {
            for c in 0..n * n {
                let edge = Edge::new(c / n, c % n);
                let v = a.get(t, c);
                if !e.contains(edge) {
                    prop_assert_eq!(v, 0.0);
                } else {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
            match kind {
                GateKind::SoftmaxGlobal | GateKind::HardArgmax => {
                    prop_assert!((a.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
                GateKind::SoftmaxPerDestination => {
                    for h in (0..n).filter(|&h| !e.incoming(h).is_empty()) {
                        let s: f64 = (0..n).map(|src| a.get(t, src * n + h)).sum();
                        prop_assert!((s - 1.0).abs() < 1e-12);
                    }
                }
                GateKind::Logistic => {}
            }
        }
    }

    #[test]
    fn augmentation_shifts_by_scaled_margin(
        (_, e) in setting(),
        beta in 0.1f64..5.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = e.len();
        let logits = Tensor::randn(3, k, 1.0, &mut rng);
        let util = Tensor::randn(3, k, 1.0, &mut rng);
        let tau: Vec<f64> = (0..k).map(|i| 0.1 * i as f64).collect();
        let aug = augment_logits(&logits, &util, beta, &tau).unwrap();
        for t in 0..3 {
            for (j, &tj) in tau.iter().enumerate() {
                let want = logits.get(t, j) + beta * (util.get(t, j) - tj);
                prop_assert!((aug.get(t, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn untargeted_grades_are_preserved((g, e) in setting(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = GradedVector::randn(&g, 3, 1.0, &mut rng);
        let cands: Vec<Tensor> = e.edges().iter().map(|x| Tensor::randn(3, g.dim(x.dst), 1.0, &mut rng)).collect();
        let logits = Tensor::randn(3, e.len(), 1.0, &mut rng);
        let alpha = gate(&logits, &edge_destinations(&e), GateKind::SoftmaxGlobal, 1.0).unwrap();
        let out = morphic_update(&e, &z, &cands, &alpha, None).unwrap();
        for h in 0..g.len() {
            if e.incoming(h).is_empty() {
                prop_assert_eq!(out.block(h), z.block(h));
            }
        }
    }

    #[test]
    fn config_rejects_bad_values(
        (_, e) in setting(),
        beta in -1.0f64..2.0,
        t_sm in -1.0f64..2.0,
        tau in -1.0f64..1.0,
    ) {
        let ok = beta > 0.0 && t_sm > 0.0 && tau >= 0.0;
        prop_assert_eq!(RoutingConfig::new(&e, beta, t_sm, tau, GateKind::SoftmaxGlobal, 2).is_ok(), ok);
    }
}
