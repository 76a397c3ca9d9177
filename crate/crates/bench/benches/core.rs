use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use graded_core::graded::{build_banded_lgt, GradedVector, Grading, LayerBlocks, NormKind};
use graded_core::model::UtilitySource;
use graded_core::objective::{evaluate, objective_and_gradient, ObjectiveConfig};
use graded_core::routing::{gate, grid_destinations, GateKind};
use graded_core::verify::toy_model;
use graded_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn block_maps(c: &mut Criterion) {
    let mut group = c.benchmark_group("banded_apply");
    for n in [4usize, 8, 16] {
        let g = Grading::uniform(n, 16).unwrap();
        let (edges, bank) = build_banded_lgt(&g, &[-1, 0, 1], 0).unwrap();
        let maps = LayerBlocks::Banded(bank).block_maps(&edges).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = GradedVector::randn(&g, 64, 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| {
                for m in &maps {
                    black_box(m.apply(&g, &z).unwrap());
                }
            })
        });
    }
    group.finish();
}

fn gates(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 8;
    let logits = Tensor::randn(256, n * n, 1.0, &mut rng);
    let dest = grid_destinations(n);
    let mut group = c.benchmark_group("gate");
    for kind in [GateKind::SoftmaxGlobal, GateKind::SoftmaxPerDestination, GateKind::Logistic] {
        group.bench_function(format!("{kind:?}"), |b| b.iter(|| black_box(gate(&logits, &dest, kind, 0.7).unwrap())));
    }
    group.finish();
}

fn objective(c: &mut Criterion) {
    let (model, batch) = toy_model(NormKind::LayerNorm, GateKind::SoftmaxGlobal, 3).unwrap();
    let cfg = ObjectiveConfig {
        lambda: 0.2,
        mu_sp: 0.05,
        ..ObjectiveConfig::default()
    };
    c.bench_function("objective_forward", |b| {
        b.iter(|| black_box(evaluate(&model, &batch, &cfg, &UtilitySource::Detached).unwrap()))
    });
    c.bench_function("objective_gradient", |b| {
        b.iter(|| black_box(objective_and_gradient(&model, &batch, &cfg, &UtilitySource::Detached).unwrap()))
    });
}

criterion_group!(benches, block_maps, gates, objective);
criterion_main!(benches);
