use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use flag_core::curse::gram_error_experiment;
use flag_core::data::{synth_slide, SyntheticSpec};
use flag_core::{AdamWConfig, AnyModel, FlagConfig, JointConfig, Method, ParamStore, Tape, Tensor, TrainExample, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn example(g: usize) -> TrainExample {
    let (slide, _) = synth_slide(&SyntheticSpec { g, ..Default::default() }).unwrap();
    TrainExample::from_slide(&slide, &slide.edge_condition(224.0).unwrap()).unwrap()
}

fn small_configs(cond_dim: usize) -> (JointConfig, FlagConfig) {
    let mut joint = JointConfig::default();
    joint.backbone.hidden = 32;
    joint.backbone.layers = 2;
    joint.backbone.heads = 4;
    joint.backbone.cond_dim = cond_dim;
    joint.backbone.time_freq_dim = 32;
    let mut flag = FlagConfig { backbone: joint.backbone.clone(), spot_batch: Some(8), ..Default::default() };
    flag.dit.hidden = 32;
    flag.dit.layers = 3;
    flag.dit.heads = 4;
    flag.dit.gene_dim = 32;
    flag.dit.align_layer = 2;
    flag.dit.time_freq_dim = 32;
    (joint, flag)
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 256] {
        let a = Tensor::new(vec![n, n], (0..n * n).map(|k| (k % 7) as f64 - 3.0).collect()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &a, |b, a| {
            b.iter(|| {
                let tape = Tape::inference();
                let x = tape.constant(a.clone());
                black_box(x.matmul(x).value().sum())
            })
        });
    }
    group.finish();
}

fn edges(c: &mut Criterion) {
    let (slide, _) = synth_slide(&SyntheticSpec { n: 256, ..Default::default() }).unwrap();
    c.bench_function("edge_condition_n256", |b| b.iter(|| black_box(slide.edge_condition(224.0).unwrap())));
    c.bench_function("knn_graph_n256", |b| b.iter(|| black_box(slide.knn_graph(8).unwrap())));
}

fn gram(c: &mut Criterion) {
    let n = 16;
    let id = Tensor::new(vec![n, n], (0..n * n).map(|k| f64::from(u8::from(k / n == k % n))).collect()).unwrap();
    c.bench_function("gram_error_n16_g256_100_trials", |b| {
        b.iter(|| black_box(gram_error_experiment(n, &[256], 100, &id, 0).unwrap()))
    });
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for g in [10, 100] {
        let ex = example(g);
        let (joint, flag) = small_configs(ex.cv.shape()[1]);
        for method in Method::ALL {
            let mut store = ParamStore::default();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let model = AnyModel::build(method, &joint, &flag, g, None, &mut store, &mut rng).unwrap();
            let mut trainer = Trainer::new(store, AdamWConfig::default(), 1);
            group.bench_function(BenchmarkId::new(method.name(), g), |b| {
                b.iter(|| trainer.step(|s, rng| model.loss(s, &[&ex], None, rng)).unwrap().0.total)
            });
        }
    }
    group.finish();
}

criterion_group!(benches, matmul, edges, gram, train_step);
criterion_main!(benches);
