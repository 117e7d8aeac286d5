use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use coordloc::augment::{random_affine, AffineRanges};
use coordloc::encode::assemble_input;
use coordloc::models::network_name;
use coordloc::rng::stream;
use coordloc::synth::{gen_ecg_sample, gen_ellipse_sample};
use coordloc::{CoordMode, EncodingKind, Graph, NetworkSpec, NetworkState, Task, Tensor, Variant};

fn inputs(task: Task, batch: usize) -> Tensor<f32> {
    let mut rng = stream(1, &["inputs".into()]);
    let mut data = Vec::new();
    for i in 0..batch {
        let base = match task {
            Task::Image => gen_ellipse_sample(&mut rng, &format!("b{i}")).unwrap().0.pixels,
            Task::Ecg => {
                let w = gen_ecg_sample(&mut rng, &format!("b{i}")).unwrap().0;
                let leads = w.signal.iter().flatten().map(|&v| v as f32).collect();
                Tensor::new(vec![2, w.len()], leads).unwrap()
            }
        };
        let enc = assemble_input(&base, EncodingKind::IntensityWeighted, CoordMode::Integer).unwrap();
        data.extend_from_slice(enc.channels.data());
    }
    let spec = NetworkSpec::for_task(task, Variant::Full);
    let mut shape = vec![batch];
    shape.extend(&spec.input_shape);
    Tensor::new(shape, data).unwrap()
}

fn networks(c: &mut Criterion) {
    let mut group = c.benchmark_group("network");
    group.sample_size(10);
    for (task, batch) in [(Task::Image, 4), (Task::Ecg, 32)] {
        let x = inputs(task, batch);
        let targets = Tensor::new(vec![batch, task.target_dim()], vec![0.5; batch * task.target_dim()]).unwrap();
        for variant in [Variant::Full, Variant::Reduced] {
            let spec = NetworkSpec::for_task(task, variant);
            let mut net = NetworkState::<f32>::init(&spec, 0);
            let name = format!("{} {variant:?} batch {batch}", network_name(task));
            group.bench_function(BenchmarkId::new("predict", &name), |b| {
                b.iter(|| net.predict(black_box(&x)).unwrap())
            });
            group.bench_function(BenchmarkId::new("train step", &name), |b| {
                b.iter(|| {
                    let mut g = Graph::new();
                    let xv = g.constant(x.clone());
                    let t = g.constant(targets.clone());
                    let fwd = net.forward(&mut g, xv, true).unwrap();
                    let loss = g.mse_loss(fwd.output, t).unwrap();
                    g.backward(loss).unwrap();
                    net.collect_grads(&mut g, &fwd).unwrap();
                })
            });
        }
    }
    group.finish();
}

fn preprocessing(c: &mut Criterion) {
    let mut rng = stream(2, &["prep".into()]);
    let (sample, _) = gen_ellipse_sample(&mut rng, "e").unwrap();
    for kind in [EncodingKind::CoordConv, EncodingKind::IntensityWeighted] {
        c.bench_function(&format!("encode image {kind:?}"), |b| {
            b.iter(|| assemble_input(black_box(&sample.pixels), kind, CoordMode::Integer).unwrap())
        });
    }
    c.bench_function("random affine 256x256", |b| {
        let mut rng = stream(3, &["affine".into()]);
        b.iter(|| random_affine(black_box(&sample), &AffineRanges::default(), &mut rng).unwrap())
    });
}

criterion_group!(benches, networks, preprocessing);
criterion_main!(benches);
