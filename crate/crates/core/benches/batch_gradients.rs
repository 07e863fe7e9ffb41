use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use agpad::data::synth::{render_sample, Split, SynthConfig};
use agpad::model::{ModelConfig, ModelGraph};
use agpad::parallel::{map_indexed, Parallelism};

fn batch_gradients(c: &mut Criterion) {
    let model = ModelGraph::<f32>::new(ModelConfig::default(), 0).unwrap();
    let synth = SynthConfig::default();
    let batch: Vec<_> = (0..16)
        .map(|i| {
            let (img, kind) = render_sample(&synth, Split::Train, i * 61);
            (img, kind.label().class_index())
        })
        .collect();

    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for (name, par) in [("sequential", Parallelism::Sequential), ("parallel", Parallelism::Parallel)] {
        group.bench_with_input(BenchmarkId::new(name, batch.len()), &par, |b, &par| {
            b.iter(|| {
                map_indexed(par, batch.len(), |i| model.loss_and_grads(&batch[i].0, batch[i].1).unwrap().loss)
            })
        });
    }
    group.finish();
}

criterion_group!(benches, batch_gradients);
criterion_main!(benches);
