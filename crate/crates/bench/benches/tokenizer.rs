use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use karl_bench::fixture;
use karl_core::kc::{kc_one_pass, kc_oracle_search};
use karl_core::training::{Stage, Target, Trainer};

fn tokenizer(c: &mut Criterion) {
    let f = fixture().expect("fixture");
    let img = &f.images[0];
    let t_max = f.config.model.t_max;
    let grid = f.base.encode2d(img).unwrap();
    let cond = f.model.loss_table().discretize(0.05);

    c.bench_function("base_encode2d", |b| b.iter(|| f.base.encode2d(img).unwrap()));
    c.bench_function("encode_t_max", |b| {
        b.iter(|| f.model.encode(&grid, t_max, &cond).unwrap())
    });
    c.bench_function("reconstruct_eps_0.05", |b| {
        b.iter(|| {
            f.model
                .reconstruct(&f.base, img, t_max, 0.05, f.config.model.threshold)
                .unwrap()
        })
    });
    c.bench_function("kc_one_pass", |b| {
        b.iter(|| kc_one_pass(&f.model, &f.base, img, t_max, 0.05, f.config.model.threshold).unwrap())
    });
    let budgets = f.config.model.budget_grid.clone();
    c.bench_function("kc_oracle_search", |b| {
        b.iter(|| kc_oracle_search(&f.model, &f.base, img, 0.05, &budgets).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let f = fixture().expect("fixture");
    let batch: Vec<Target> = f.images.iter().map(|i| Target::new(&f.base, i).unwrap()).collect();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("iteration_batch_10", |b| {
        b.iter_batched(
            || Trainer::new(f.model.clone(), &f.base, f.config.train.clone()).unwrap(),
            |mut trainer| trainer.train_iteration(&batch, Stage::TokenSpace).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, tokenizer, training);
criterion_main!(benches);
