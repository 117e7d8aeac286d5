use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use coordloc::ingest::Dataset;
use coordloc::models::NetworkSpec;
use coordloc::rng::stream;
use coordloc::synth::gen_dataset;
use coordloc::tensor::LayerKind;
use coordloc::train::{
    assign_folds, evaluate, run_experiment, split_for_fold, train_fold, Arm, ExperimentConfig, TrainLog, LOG_FILE,
};
use coordloc::{EncodingKind, Graph, NetworkState, Task, Tensor, Variant};

fn specs() -> Vec<NetworkSpec> {
    let mut out = Vec::new();
    for v in [Variant::Full, Variant::Reduced] {
        out.push(NetworkSpec::nimeshanet(v));
        out.push(NetworkSpec::lakshyanet(v));
    }
    out
}

fn random_input(spec: &NetworkSpec, batch: usize, scale: f64, seed: u64) -> Tensor<f64> {
    let mut rng = stream(seed, &["input".into()]);
    let mut shape = vec![batch];
    shape.extend(&spec.input_shape);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        })
        .collect::<Vec<f64>>();
    Tensor::new(shape, data).unwrap()
}

fn max_abs(t: &Tensor<f64>) -> f64 {
    t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Every parameter gets a gradient after one backward pass over a batch of
/// 8, except convolution biases feeding batch-norm: the batch mean removes
/// them, so their gradient is zero up to rounding.
#[test]
fn gradients_reach_every_parameter() {
    for spec in specs() {
        let mut net = NetworkState::<f64>::init(&spec, 3);
        let mut g = Graph::new();
        let x = g.constant(random_input(&spec, 8, 1.0, 1));
        let mut rng = stream(2, &["targets".into()]);
        let t: Vec<f64> = (0..8 * spec.outputs)
            .map(|_| rng.random_range(0.2..0.8) * spec.output_scale)
            .collect();
        let t = g.constant(Tensor::new(vec![8, spec.outputs], t).unwrap());
        let fwd = net.forward(&mut g, x, true).unwrap();
        let loss = g.mse_loss(fwd.output, t).unwrap();
        g.backward(loss).unwrap();
        net.collect_grads(&mut g, &fwd).unwrap();
        for (i, layer) in net.layers.iter().enumerate() {
            let name = &spec.layer_names()[i];
            let w = layer
                .weight
                .grad
                .as_ref()
                .unwrap_or_else(|| panic!("{name}: no weight gradient"));
            assert!(
                max_abs(w) > 0.0,
                "{}: {name} weight gradient is zero",
                spec.task.as_str()
            );
            if let Some(b) = &layer.bias {
                let b = b.grad.as_ref().unwrap_or_else(|| panic!("{name}: no bias gradient"));
                let pre_bn = matches!(layer.kind, LayerKind::Conv2d | LayerKind::Conv1d);
                if pre_bn {
                    assert!(
                        max_abs(b) <= 1e-9 * max_abs(w).max(1.0),
                        "{name}: bias gradient {}",
                        max_abs(b)
                    );
                } else {
                    assert!(max_abs(b) > 0.0, "{}: {name} bias gradient is zero", spec.task.as_str());
                }
            }
        }
    }
}

#[test]
fn outputs_stay_in_range_for_huge_inputs() {
    for spec in specs() {
        for scale in [1e6, -1e6] {
            let mut net = NetworkState::<f32>::init(&spec, 5);
            let x = random_input(&spec, 2, scale, 9).cast::<f32>();
            for training in [true, false] {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let out = net.forward(&mut g, xv, training).unwrap();
                let y = g.value(out.output);
                assert_eq!(y.shape(), [2, spec.outputs]);
                assert!(y
                    .data()
                    .iter()
                    .all(|v| v.is_finite() && (0.0..=spec.output_scale as f32).contains(v)));
            }
            let p = net.predict(&x).unwrap();
            assert!(p
                .data()
                .iter()
                .all(|v| v.is_finite() && (0.0..=spec.output_scale as f32).contains(v)));
        }
    }
}

#[test]
fn arms_of_a_fold_start_from_identical_weights() {
    for task in [Task::Image, Task::Ecg] {
        let full = NetworkSpec::for_task(task, Variant::Full);
        // both encodings feed the same channel count, so the whole network is shared
        let a = NetworkState::<f32>::init(&full, coordloc::train::init_seed(4, 2));
        let b = NetworkState::<f32>::init(&full, coordloc::train::init_seed(4, 2));
        assert_eq!(a, b);
        assert_ne!(a, NetworkState::<f32>::init(&full, coordloc::train::init_seed(4, 3)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn folds_never_split_a_base(bases in 5usize..80, k in 2usize..6, seed in any::<u64>()) {
        prop_assume!(bases >= k);
        let ids: Vec<String> = (0..bases).map(|i| format!("b{i:03}")).collect();
        let folds = assign_folds(&ids, k, seed).unwrap();
        let sizes = folds.fold_sizes();
        prop_assert_eq!(sizes.iter().sum::<usize>(), bases);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for id in &ids {
            prop_assert!(folds.fold_of(id).unwrap() < k);
        }
    }
}

fn small_dataset(task: Task, n: usize, aug: usize, dir: &std::path::Path) -> Dataset {
    let p = dir.join(task.as_str());
    gen_dataset(task, n, aug, 3, &p, false).unwrap();
    Dataset::open(&p).unwrap()
}

#[test]
fn splits_keep_augmented_variants_with_their_base() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(Task::Ecg, 12, 3, dir.path());
    let ids: Vec<&str> = ds.records.iter().map(|r| r.base_id.as_str()).collect();
    let folds = assign_folds(&ids, 5, 1).unwrap();
    for fold in 0..5 {
        let split = split_for_fold(&ds, &folds, fold).unwrap();
        let train: std::collections::BTreeSet<&str> =
            split.train.iter().map(|&i| ds.records[i].base_id.as_str()).collect();
        for &i in &split.test {
            assert!(!train.contains(ds.records[i].base_id.as_str()));
        }
        assert_eq!(split.train.len() + split.test.len(), ds.len());
    }
}

#[test]
fn evaluation_does_not_depend_on_sample_order() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(Task::Ecg, 20, 1, dir.path());
    let net = NetworkState::<f32>::init(&NetworkSpec::nimeshanet(Variant::Full), 1);
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut shuffled = idx.clone();
    shuffled.reverse();
    shuffled.rotate_left(7);
    let mode = coordloc::CoordMode::Integer;
    for enc in [EncodingKind::CoordConv, EncodingKind::IntensityWeighted] {
        let a = evaluate(&net, &ds, &idx, enc, mode, 8).unwrap();
        let b = evaluate(&net, &ds, &shuffled, enc, mode, 5).unwrap();
        assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn training_runs_are_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(Task::Ecg, 15, 1, dir.path());
    let mut cfg = ExperimentConfig::new(ds.dir());
    cfg.epochs = 2;
    cfg.seed = 8;
    let a = run_experiment(&cfg, &dir.path().join("a"), None).unwrap();
    let b = run_experiment(&cfg, &dir.path().join("b"), None).unwrap();
    let read = |p: &std::path::Path| std::fs::read(p).unwrap();
    assert_eq!(read(&a.log_path), read(&b.log_path));
    for entry in std::fs::read_dir(dir.path().join("a/checkpoints")).unwrap() {
        let p = entry.unwrap().path();
        assert_eq!(
            read(&p),
            read(&dir.path().join("b/checkpoints").join(p.file_name().unwrap()))
        );
    }
    let log = TrainLog::read(&dir.path().join("a").join(LOG_FILE)).unwrap();
    assert_eq!(log.rows.len(), 4 * 5 * 2);
    for arm in log.arms() {
        for fold in log.folds(&arm) {
            let epochs: Vec<usize> = log.curve(&arm, fold).iter().map(|r| r.epoch).collect();
            assert_eq!(epochs, [1, 2]);
        }
    }
}

#[test]
fn training_lowers_the_loss_on_ellipses() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(Task::Image, 10, 0, dir.path());
    let mut cfg = ExperimentConfig::new(ds.dir());
    cfg.batch_size = 4;
    let ids: Vec<&str> = ds.records.iter().map(|r| r.base_id.as_str()).collect();
    let folds = assign_folds(&ids, 5, cfg.seed).unwrap();
    let arm = Arm {
        encoding: EncodingKind::IntensityWeighted,
        variant: Variant::Reduced,
    };
    let (rows, _) = train_fold(&cfg, arm, 0, &ds, &folds).unwrap();
    assert_eq!(rows.len(), 15);
    assert!(
        rows[14].train_loss < rows[0].train_loss,
        "{} vs {}",
        rows[14].train_loss,
        rows[0].train_loss
    );
}
