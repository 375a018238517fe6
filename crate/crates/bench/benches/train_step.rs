use binarygan_bench::{config, dataset};
use binarygan_core::harness::Trainer;
use binarygan_core::{Family, NeuronMode, ObjectiveKind};
use criterion::{criterion_group, criterion_main, Criterion};

fn steps(c: &mut Criterion) {
    let data = dataset(512);
    let mut group = c.benchmark_group("train step");
    group.sample_size(10);
    for (family, objective) in [
        (Family::Mlp, ObjectiveKind::Gan),
        (Family::Mlp, ObjectiveKind::WganGp),
        (Family::Cnn, ObjectiveKind::WganGp),
    ] {
        let cfg = config(family, objective, NeuronMode::Deterministic);
        let mut trainer = Trainer::new(&cfg, &data).unwrap();
        group.bench_function(format!("{} {}", family.tag(), objective.tag()), |b| {
            b.iter(|| trainer.step().unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, steps);
criterion_main!(benches);
