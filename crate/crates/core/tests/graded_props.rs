//! Grading, block-map and parameter-sharing invariants.

use graded_core::graded::{
    assemble_dense, build_banded_lgt, compose_blocks, param_count_general, BlockMap, Edge, EdgeSet,
    EgtReweighting, GradeNorm, GradedVector, Grading, LayerBlocks, NormKind,
};
use graded_core::Tensor;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg() -> Config {
    Config {
        cases: 64,
        rng_seed: RngSeed::Fixed(0x67ad),
        failure_persistence: None,
        ..Config::default()
    }
}

fn grading() -> impl Strategy<Value = Grading> {
    prop::collection::vec(1usize..=6, 1..=5).prop_map(|dims| {
        let named: Vec<(String, usize)> = dims.iter().enumerate().map(|(i, &d)| (format!("g{i}"), d)).collect();
        Grading::new(&named).unwrap()
    })
}

/// A grading together with a non-empty admissible edge subset.
fn graded_edges() -> impl Strategy<Value = (Grading, Vec<Edge>)> {
    grading().prop_flat_map(|g| {
        let n = g.len();
        let all: Vec<Edge> = (0..n).flat_map(|a| (0..n).map(move |b| Edge::new(a, b))).collect();
        let len = all.len();
        (Just(g), prop::sample::subsequence(all, 1..=len))
    })
}

fn blocks(g: &Grading, edges: &[Edge], seed: u64) -> Vec<BlockMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    edges
        .iter()
        .map(|&e| BlockMap::new(e, Tensor::randn(g.dim(e.dst), g.dim(e.src), 1.0, &mut rng)))
        .collect()
}

proptest! {
    #![proptest_config(cfg())]

    #[test]
    fn dims_sum_to_ambient(g in grading()) {
        prop_assert_eq!(g.dims().iter().sum::<usize>(), g.ambient_dim());
        for h in 1..g.len() {
            prop_assert_eq!(g.offset(h), g.offset(h - 1) + g.dim(h - 1));
        }
    }

    #[test]
    fn reassembly_is_identity(g in grading(), seed in any::<u64>(), rows in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(rows, g.ambient_dim(), 3.0, &mut rng);
        let z = GradedVector::from_ambient(&g, &x).unwrap();
        prop_assert_eq!(z.to_ambient(), x);
        for h in 0..g.len() {
            let inc = GradedVector::include(&g, z.block(h), h).unwrap();
            for k in 0..g.len() {
                let p = inc.project(k).unwrap();
                if k == h {
                    prop_assert_eq!(p, z.block(h));
                } else {
                    prop_assert_eq!(p.norm(), 0.0);
                }
            }
        }
    }

    #[test]
    fn edge_set_holds_exactly_its_edges((g, edges) in graded_edges()) {
        let set = EdgeSet::new(&g, edges.iter().copied()).unwrap();
        prop_assert_eq!(set.len(), edges.len());
        for a in 0..g.len() {
            for b in 0..g.len() {
                prop_assert_eq!(set.contains(Edge::new(a, b)), edges.contains(&Edge::new(a, b)));
            }
        }
        prop_assert!(EdgeSet::new(&g, [Edge::new(0, g.len())]).is_err());
    }

    #[test]
    fn block_map_matches_dense((g, edges) in graded_edges(), seed in any::<u64>()) {
        let bs = blocks(&g, &edges, seed);
        let dense = assemble_dense(&g, &bs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let z = GradedVector::randn(&g, 2, 1.0, &mut rng);
        let want = z.to_ambient().matmul(&dense.transpose()).unwrap();
        let mut got = GradedVector::zeros(&g, 2);
        for b in &bs {
            let sum = got.block(b.edge.dst).add(&b.apply(&g, &z).unwrap()).unwrap();
            got.set_block(b.edge.dst, sum);
        }
        prop_assert!(got.to_ambient().max_abs_diff(&want) < 1e-12);
        for (i, j) in (0..g.ambient_dim()).flat_map(|i| (0..g.ambient_dim()).map(move |j| (i, j))) {
            let (src, dst) = (grade_of(&g, j), grade_of(&g, i));
            if !edges.contains(&Edge::new(src, dst)) {
                prop_assert_eq!(dense.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn composition_is_dense_product((g, e1) in graded_edges(), e2 in any::<prop::sample::Index>(), seed in any::<u64>()) {
        let n = g.len();
        let all: Vec<Edge> = (0..n).flat_map(|a| (0..n).map(move |b| Edge::new(a, b))).collect();
        let e2 = vec![all[e2.index(all.len())]];
        let phi = blocks(&g, &e1, seed);
        let psi = blocks(&g, &e2, seed ^ 7);
        let comp = assemble_dense(&g, &compose_blocks(&psi, &phi).unwrap()).unwrap();
        let dense = assemble_dense(&g, &psi).unwrap().matmul(&assemble_dense(&g, &phi).unwrap()).unwrap();
        prop_assert!(comp.max_abs_diff(&dense) < 1e-12 * (1.0 + dense.norm()));
    }

    #[test]
    fn lgt_blocks_share_kernels(n in 2usize..6, d in 1usize..5, seed in any::<u64>()) {
        let g = Grading::uniform(n, d).unwrap();
        let band: Vec<i64> = (-(n as i64 - 1).min(2)..=(n as i64 - 1).min(2)).collect();
        let (edges, bank) = build_banded_lgt(&g, &band, seed).unwrap();
        let layer = LayerBlocks::Banded(bank);
        let maps = layer.block_maps(&edges).unwrap();
        for a in &maps {
            for b in &maps {
                if a.edge.increment() == b.edge.increment() {
                    prop_assert_eq!(&a.weight, &b.weight);
                }
            }
        }
        prop_assert_eq!(layer.param_count(), param_count_general(&g, &band).unwrap());
    }

    #[test]
    fn geometric_reweighting_has_shared_ratios(n in 2usize..6, d in 1usize..5, c in 0.3f64..3.0) {
        let g = Grading::uniform(n, d).unwrap();
        let rw = EgtReweighting::scalar_geometric(&g, c).unwrap();
        prop_assert!(rw.ratio_residual(1, &Tensor::eye(d).scale(c)).unwrap() < 1e-12 * c.powi(n as i32));
        for h in 0..n {
            let id = rw.d(h).matmul(rw.d_inv(h)).unwrap();
            prop_assert!(id.max_abs_diff(&Tensor::eye(d)) < 1e-12);
        }
    }

    #[test]
    fn grade_norm_normalizes_each_grade(g in grading(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = GradedVector::randn(&g, 3, 4.0, &mut rng);
        let norm = GradeNorm::new(&g, NormKind::LayerNorm, 1e-9);
        for h in (0..g.len()).filter(|&h| g.dim(h) > 1) {
            for row in norm.apply_block(h, z.block(h)).data().chunks(g.dim(h)) {
                let mean = row.iter().sum::<f64>() / row.len() as f64;
                prop_assert!(mean.abs() < 1e-9);
            }
        }
    }
}

fn grade_of(g: &Grading, coord: usize) -> usize {
    (0..g.len()).rev().find(|&h| g.offset(h) <= coord).unwrap()
}
