//! Acceptance suite. Runs every criterion in order and prints one
//! PASS/FAIL line per criterion; exits non-zero if any fails.
//!
//! Positional arguments that are criterion numbers restrict the run, e.g.
//! `cargo test -p coordloc-cli --test acceptance -- 2 5`. Setting
//! `COORDLOC_ACCEPTANCE_FULL=1` runs the image experiment for real instead
//! of projecting its runtime.

use std::collections::{BTreeMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use coordloc::augment::{design_butterworth, EcgAugmentConfig, FilterKind};
use coordloc::encode::{recover_onehot_coords, IMAGE_EXTENT};
use coordloc::ingest::{
    extract_changepoints, extract_window, parse_annotations, parse_contour_dat, parse_wfdb_header, read_signal_adu,
    rhythm_events, write_annotations, write_contour_dat, write_signal, write_wfdb_header, Annotation,
    ContourAnnotation, Dataset, SignalSpec, WfdbRecord, RHYTHM,
};
use coordloc::models::{gradcheck_network, NetworkSpec};
use coordloc::rng::{stream, StreamRng};
use coordloc::stats::{
    bootstrap_diffs, bootstrap_mean_diff, instability_score, percentile_sorted, whittaker_smooth, Direction,
};
use coordloc::tensor::gradcheck::op_suite;
use coordloc::train::{assign_folds, train_fold, Arm, ExperimentConfig, TrainLog, LOG_FILE};
use coordloc::{EncodingKind, NetworkState, Task, Tensor, Variant};

// Criterion 1
const OP_SEEDS: u64 = 5;
const OP_TOL: f64 = 1e-4;
const NET_TOL: f64 = 1e-3;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
// Criterion 2
const POOL_REDUCTION: f64 = 0.75;
const POOL_REDUCTION_TOL: f64 = 0.01;
// Criterion 3
const ONEHOT_BUDGET: Duration = Duration::from_secs(10);
// Criterion 4
const ROUND_TRIPS: usize = 1000;
// Criterion 6
const FILTER_DESIGNS: usize = 1000;
const CUTOFF_DB: f64 = -3.0103;
const CUTOFF_TOL_DB: f64 = 0.1;
// Criterion 7
const WHITTAKER_TOL: f64 = 1e-10;
const WHITTAKER_LAMBDAS: [f64; 4] = [0.1, 1.0, 5.0, 100.0];
const BOOTSTRAP_RESAMPLES: usize = 20_000;
// Criterion 8
const EXPERIMENT_BUDGET: Duration = Duration::from_secs(60 * 60);
const IMAGE_BASES: usize = 200;
const IMAGE_AUGMENTS: usize = 20;
const ECG_BASES: usize = 200;
const ECG_AUGMENTS: usize = 10;
const R2_THRESHOLD: f64 = 0.5;
const MIN_GOOD_FOLDS: usize = 4;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

/// Artifacts of the experiment runs, shared by criteria 8 and 9.
#[derive(Default)]
struct State {
    ecg: Option<(u64, PathBuf)>,
    image: Option<(u64, PathBuf)>,
}

fn main() {
    let selected: HashSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).expect("artifact directory");
    let mut state = State::default();

    type Check = Box<dyn FnMut(&mut State) -> Verdict>;
    let root8 = root.clone();
    let root9 = root.clone();
    let criteria: Vec<(usize, &str, Check)> = vec![
        (1, "gradient fidelity", Box::new(|_| gradient_fidelity())),
        (2, "architecture conformance", Box::new(|_| architecture())),
        (3, "one-hot identity", Box::new(|_| onehot())),
        (4, "parser round-trips", Box::new(|_| round_trips())),
        (5, "window rules", Box::new(|_| window_rules())),
        (6, "filter correctness", Box::new(|_| filters())),
        (7, "statistics oracles", Box::new(|_| statistics())),
        (8, "desk-scale experiment", Box::new(move |s| experiment(s, &root8))),
        (9, "determinism", Box::new(move |s| determinism(s, &root9))),
    ];

    let mut failed = Vec::new();
    for (n, name, mut check) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        eprintln!("running criterion {n} ({name})");
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(|| check(&mut state))).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::new(false, format!("panicked: {msg}"))
        });
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!(
            "[{tag}] criterion {n} ({name}, {:.1} s): {}",
            start.elapsed().as_secs_f64(),
            v.detail
        );
        if !v.pass {
            failed.push(n);
        }
    }
    println!("artifacts: {}", root.display());
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}

fn gradient_fidelity() -> Verdict {
    let start = Instant::now();
    let mut worst_op: f64 = 0.0;
    let mut ops = 0;
    let mut bad = Vec::new();
    for seed in 0..OP_SEEDS {
        for c in op_suite(seed).expect("op suite runs") {
            ops += 1;
            worst_op = worst_op.max(c.max_rel_err);
            if !(c.max_rel_err < OP_TOL) {
                bad.push(format!("{} (seed {seed}): {:.2e}", c.name, c.max_rel_err));
            }
        }
    }
    let mut nets = Vec::new();
    for spec in [
        NetworkSpec::lakshyanet(Variant::Full),
        NetworkSpec::nimeshanet(Variant::Full),
        NetworkSpec::lakshyanet(Variant::Reduced),
        NetworkSpec::nimeshanet(Variant::Reduced),
    ] {
        let batch = if spec.task == Task::Image { 2 } else { 4 };
        let c = gradcheck_network(&spec, batch, 2, 0, NET_TOL).expect("network check runs");
        if !(c.max_rel_err < NET_TOL) {
            bad.push(format!("{}: {:.2e}", c.name, c.max_rel_err));
        }
        nets.push(format!("{} {:.1e}", c.name, c.max_rel_err));
    }
    let elapsed = start.elapsed();
    let in_time = elapsed < GRADCHECK_BUDGET;
    Verdict::new(
        bad.is_empty() && in_time,
        format!(
            "{ops} op checks, worst {worst_op:.1e} (< {OP_TOL:.0e}); networks [{}] (< {NET_TOL:.0e}); {:.0} s (< {} s){}",
            nets.join(", "),
            elapsed.as_secs_f64(),
            GRADCHECK_BUDGET.as_secs(),
            if bad.is_empty() { String::new() } else { format!("; failures: {}", bad.join("; ")) }
        ),
    )
}

fn architecture() -> Verdict {
    let table1 = [
        "16 × 128 × 128",
        "32 × 64 × 64",
        "64 × 32 × 32",
        "128 × 32 × 32",
        "128 × 1 × 1",
        "2",
    ];
    let table2 = ["16 × 250", "32 × 125", "64 × 62", "128 × 31", "128", "1"];
    let mut problems = Vec::new();
    let fmt = |s: &[usize]| s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" × ");
    for (spec, table, input) in [
        (NetworkSpec::lakshyanet(Variant::Full), &table1, "5 × 256 × 256"),
        (NetworkSpec::nimeshanet(Variant::Full), &table2, "3 × 500"),
    ] {
        if fmt(&spec.input_shape) != input {
            problems.push(format!("input {} != {input}", fmt(&spec.input_shape)));
        }
        let chain: Vec<String> = spec.shape_chain().iter().map(|r| fmt(&r.1)).collect();
        if chain != table.to_vec() {
            problems.push(format!("{} chain {chain:?}", spec.task.as_str()));
        }
    }
    // real forward passes agree with the declared chains
    for task in [Task::Image, Task::Ecg] {
        for variant in [Variant::Full, Variant::Reduced] {
            let spec = NetworkSpec::for_task(task, variant);
            let net = NetworkState::<f32>::init(&spec, 0);
            let mut shape = vec![1];
            shape.extend(&spec.input_shape);
            let out = net.predict(&Tensor::zeros(&shape)).expect("forward pass");
            if out.shape() != [1, spec.outputs] {
                problems.push(format!("{task:?}/{variant:?} output {:?}", out.shape()));
            }
            let pool = &net.layers[2 * spec.blocks.len()];
            let last = spec.shape_chain()[3].1.clone();
            let expect_pool: Vec<usize> = match task {
                Task::Image => vec![last[0], 1, last[1], last[2]],
                Task::Ecg => vec![last[0], last[1]],
            };
            if pool.weight.value.shape() != expect_pool {
                problems.push(format!(
                    "{task:?}/{variant:?} pool weights {:?}",
                    pool.weight.value.shape()
                ));
            }
        }
    }
    let full = NetworkSpec::lakshyanet(Variant::Full).pool_weights() as f64;
    let reduced = NetworkSpec::lakshyanet(Variant::Reduced).pool_weights() as f64;
    let reduction = 1.0 - reduced / full;
    if (reduction - POOL_REDUCTION).abs() > POOL_REDUCTION_TOL {
        problems.push(format!("pool reduction {reduction}"));
    }
    Verdict::new(
        problems.is_empty(),
        format!(
            "tables 1 and 2 reproduced cell for cell; reduced LakshyaNet pool {reduced} vs {full} weights = {:.1}% reduction (target {:.1} ± {:.1}%){}",
            100.0 * reduction,
            100.0 * POOL_REDUCTION,
            100.0 * POOL_REDUCTION_TOL,
            if problems.is_empty() { String::new() } else { format!("; mismatches: {}", problems.join("; ")) }
        ),
    )
}

fn onehot() -> Verdict {
    let n = IMAGE_EXTENT;
    let mut grid = Tensor::<f64>::zeros(&[n, n]);
    let mut wrong = 0usize;
    let start = Instant::now();
    for m in 0..n {
        for k in 0..n {
            grid.data_mut()[m * n + k] = 1.0;
            if recover_onehot_coords(&grid).expect("one-hot input") != (m, k) {
                wrong += 1;
            }
            grid.data_mut()[m * n + k] = 0.0;
        }
    }
    let elapsed = start.elapsed();
    Verdict::new(
        wrong == 0 && elapsed < ONEHOT_BUDGET,
        format!(
            "{} of {} positions recovered exactly in {:.2} s (< {} s)",
            n * n - wrong,
            n * n,
            elapsed.as_secs_f64(),
            ONEHOT_BUDGET.as_secs()
        ),
    )
}

fn word(rng: &mut StreamRng, alphabet: &[u8], lo: usize, hi: usize) -> String {
    let len = rng.random_range(lo..=hi);
    (0..len)
        .map(|_| alphabet[rng.random_range(0..alphabet.len())] as char)
        .collect()
}

const ALNUM: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";

fn random_f64(rng: &mut StreamRng) -> f64 {
    loop {
        let v = match rng.random_range(0..3) {
            0 => f64::from_bits(rng.random()),
            1 => rng.random_range(-1e4..1e4),
            _ => rng.random_range(0..300) as f64,
        };
        if v.is_finite() {
            return v;
        }
    }
}

fn random_header(rng: &mut StreamRng) -> WfdbRecord {
    let format = if rng.random_bool(0.5) { 212 } else { 16 };
    let file = format!("{}.dat", word(rng, ALNUM, 1, 10));
    let n = rng.random_range(1..=4);
    let signals = (0..n)
        .map(|_| SignalSpec {
            file_name: file.clone(),
            format,
            gain: if rng.random_bool(0.5) {
                rng.random_range(1e-3..1e5)
            } else {
                rng.random_range(1..100_000) as f64
            },
            baseline: rng.random_range(-4096..4096),
            units: word(rng, b"mVuVAZ", 1, 4),
            adc_resolution: rng.random_range(0..24),
            adc_zero: rng.random_range(-2048..2048),
            initial_value: rng.random_range(-2048..2048),
            checksum: rng.random_range(-32768..32768),
            block_size: rng.random_range(0..1024),
            description: (0..rng.random_range(0..4))
                .map(|_| word(rng, ALNUM, 1, 8))
                .collect::<Vec<_>>()
                .join(" "),
        })
        .collect::<Vec<_>>();
    WfdbRecord {
        name: word(rng, ALNUM, 1, 12),
        n_signals: n,
        fs: rng.random_range(1e-2..1e4),
        n_samples: rng.random_range(0..10_000_000),
        signals,
    }
}

fn random_adu(rng: &mut StreamRng, lo: i16, hi: i16) -> Vec<Vec<i16>> {
    let (n, len) = (rng.random_range(1..=4), rng.random_range(0..300));
    (0..n)
        .map(|_| (0..len).map(|_| rng.random_range(lo..=hi)).collect())
        .collect()
}

fn random_annotations(rng: &mut StreamRng) -> Vec<Annotation> {
    let mut sample = 0u64;
    (0..rng.random_range(0..40))
        .map(|_| {
            let delta = match rng.random_range(0..3) {
                0 => rng.random_range(0..8),
                1 => rng.random_range(0..0x400),
                _ => rng.random_range(0x400..1u64 << 24),
            };
            sample += delta;
            Annotation {
                sample,
                code: rng.random_range(1..59),
                subtype: rng.random(),
                chan: rng.random(),
                num: rng.random_range(0..0x400),
                aux: rng
                    .random_bool(0.4)
                    .then(|| (0..rng.random_range(0..40)).map(|_| rng.random()).collect()),
            }
        })
        .collect()
}

fn round_trips() -> Verdict {
    let mut rng = stream(2024, &["acceptance".into(), "round-trips".into()]);
    let mut failures: BTreeMap<&str, usize> = BTreeMap::new();
    for _ in 0..ROUND_TRIPS {
        let rec = random_header(&mut rng);
        if parse_wfdb_header(&write_wfdb_header(&rec)).ok().as_ref() != Some(&rec) {
            *failures.entry("header").or_default() += 1;
        }
        for (format, lo, hi) in [(212u16, -2048i16, 2047i16), (16, i16::MIN, i16::MAX)] {
            let adu = random_adu(&mut rng, lo, hi);
            let rec = WfdbRecord {
                name: "rt".into(),
                n_signals: adu.len(),
                fs: 250.0,
                n_samples: adu[0].len(),
                signals: vec![SignalSpec::new("rt.dat", format, 200.0, 0); adu.len()],
            };
            let bytes = write_signal(&adu, format).expect("encodable");
            let back = read_signal_adu(&bytes, &rec).ok();
            let ok = back.as_ref() == Some(&adu) && back.map(|b| write_signal(&b, format).ok()) == Some(Some(bytes));
            if !ok {
                *failures
                    .entry(if format == 212 { "format 212" } else { "format 16" })
                    .or_default() += 1;
            }
        }
        let anns = random_annotations(&mut rng);
        let bytes = write_annotations(&anns).expect("encodable");
        let parsed = parse_annotations(&bytes, None).ok();
        if parsed.as_ref() != Some(&anns) || parsed.map(|p| write_annotations(&p).ok()) != Some(Some(bytes)) {
            *failures.entry("annotations").or_default() += 1;
        }
        let points: Vec<(f64, f64)> = (0..rng.random_range(3..60))
            .map(|_| (random_f64(&mut rng), random_f64(&mut rng)))
            .collect();
        let ann = ContourAnnotation {
            points,
            source_image_id: word(&mut rng, ALNUM, 1, 10),
        };
        let ok = parse_contour_dat(write_contour_dat(&ann).as_bytes(), &ann.source_image_id).is_ok_and(|p| {
            p.points.len() == ann.points.len()
                && p.points
                    .iter()
                    .zip(&ann.points)
                    .all(|(a, b)| a.0.to_bits() == b.0.to_bits() && a.1.to_bits() == b.1.to_bits())
        });
        if !ok {
            *failures.entry("contour").or_default() += 1;
        }
    }
    Verdict::new(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{ROUND_TRIPS} instances each of WFDB headers, format 212 and 16 signals, annotation streams and contours round-trip bit-exactly")
        } else {
            format!("failures out of {ROUND_TRIPS}: {failures:?}")
        },
    )
}

fn window_rules() -> Verdict {
    const FS: f64 = 250.0;
    let s = |sec: f64| (sec * FS) as u64;
    let rhythm = |sample: u64, label: &str| Annotation {
        aux: Some(format!("{label}\0").into_bytes()),
        ..Annotation::new(sample, RHYTHM)
    };
    let record = |sec: f64| -> Vec<Vec<f64>> {
        let n = (sec * FS) as usize;
        vec![
            (0..n).map(|t| t as f64 + 1.0).collect(),
            (0..n).map(|t| -(t as f64) - 1.0).collect(),
        ]
    };
    let windows = |leads: &[Vec<f64>], anns: &[Annotation]| {
        let parsed = parse_annotations(&write_annotations(anns).unwrap(), Some(leads[0].len() as u64)).unwrap();
        let cps = extract_changepoints(&rhythm_events(&parsed));
        cps.iter()
            .enumerate()
            .map(|(i, &cp)| extract_window(leads, FS, cp, &cps[..i], "w").unwrap())
            .collect::<Vec<_>>()
    };
    let mut problems = Vec::new();

    let leads = record(120.0);
    let w = windows(&leads, &[rhythm(0, "(N"), rhythm(s(60.0), "(VT")]);
    if !(w.len() == 1 && w[0].changepoint_s == 10.0 && w[0].signal[0][0] == leads[0][s(50.0) as usize]) {
        problems.push("isolated changepoint".to_string());
    }
    for delta in [0.004, 1.0, 4.0, 7.5, 9.996] {
        let w = windows(
            &leads,
            &[
                rhythm(0, "(N"),
                rhythm(s(40.0), "(VT"),
                rhythm(s(40.0) + s(delta), "(VFL"),
            ],
        );
        if !(w.len() == 2 && w[1].changepoint_s == delta && w[1].signal[0][0] == leads[0][s(40.0) as usize]) {
            problems.push(format!("prior changepoint at {delta} s"));
        }
    }
    let short = record(60.0);
    let w = &windows(&short, &[rhythm(s(3.0), "(VF")])[0];
    let pad = s(7.0) as usize;
    let ok = w.changepoint_s == 10.0
        && w.valid == (pad, 5000)
        && (0..2).all(|l| {
            w.signal[l][..pad].iter().all(|&v| v == 0.0) && w.signal[l][pad..] == short[l][..s(13.0) as usize]
        });
    if !ok {
        problems.push("record start padding".into());
    }
    let w = &windows(&short, &[rhythm(0, "(N"), rhythm(s(55.0), "(ASYS")])[0];
    let keep = s(15.0) as usize;
    let ok = w.changepoint_s == 10.0
        && w.valid == (0, keep)
        && (0..2).all(|l| {
            w.signal[l][keep..].iter().all(|&v| v == 0.0) && w.signal[l][..keep] == short[l][s(45.0) as usize..]
        });
    if !ok {
        problems.push("record end padding".into());
    }
    Verdict::new(
        problems.is_empty(),
        if problems.is_empty() {
            "isolated changepoint -> 10.0 s; prior changepoint at Δ < 10 s -> Δ (5 cases); start and end padding exact"
                .to_string()
        } else {
            format!("mismatches: {}", problems.join(", "))
        },
    )
}

fn filters() -> Verdict {
    let cfg = EcgAugmentConfig::default();
    let fs = 250.0;
    let mut rng = stream(2024, &["acceptance".into(), "filters".into()]);
    let (mut worst, mut max_radius, mut bad) = (0.0f64, 0.0f64, 0usize);
    for i in 0..FILTER_DESIGNS {
        let kind = match i % 4 {
            0 => FilterKind::Lowpass {
                cutoff: rng.random_range(cfg.lowpass_hz.0..=cfg.lowpass_hz.1),
            },
            1 => FilterKind::Highpass {
                cutoff: rng.random_range(cfg.highpass_hz.0..=cfg.highpass_hz.1),
            },
            2 => FilterKind::Bandpass {
                low: cfg.bandpass_hz.0,
                high: cfg.bandpass_hz.1,
            },
            _ => FilterKind::Bandpass {
                low: rng.random_range(cfg.highpass_hz.0..=cfg.highpass_hz.1),
                high: rng.random_range(cfg.lowpass_hz.0..=cfg.lowpass_hz.1),
            },
        };
        let f = design_butterworth(kind, cfg.filter_order, fs).expect("valid design");
        let radius = f.sections.iter().map(|s| s.pole_radius()).fold(0.0, f64::max);
        max_radius = max_radius.max(radius);
        let mut ok = radius < 1.0 && f.is_stable();
        for c in kind.cutoffs() {
            let dev = (f.gain_db(c, fs) - CUTOFF_DB).abs();
            worst = worst.max(dev);
            ok &= dev <= CUTOFF_TOL_DB;
        }
        bad += usize::from(!ok);
    }
    Verdict::new(
        bad == 0,
        format!(
            "{} of {FILTER_DESIGNS} designs within {CUTOFF_DB:.2} ± {CUTOFF_TOL_DB} dB at every cutoff (worst deviation {worst:.1e} dB), largest pole radius {max_radius:.6}",
            FILTER_DESIGNS - bad
        ),
    )
}

fn exact_bootstrap(study: &[f64; 3], control: &[f64; 3]) -> Vec<f64> {
    let means = |g: &[f64; 3]| {
        let mut out = Vec::with_capacity(27);
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    out.push((g[i] + g[j] + g[k]) / 3.0);
                }
            }
        }
        out
    };
    let mut all = Vec::with_capacity(729);
    for s in means(study) {
        for c in means(control) {
            all.push(s - c);
        }
    }
    all
}

/// Smallest value whose empirical cumulative share reaches `q`, found by
/// counting rather than by rank arithmetic.
fn cdf_quantile(values: &[f64], q: f64) -> f64 {
    let mut support: Vec<f64> = values.to_vec();
    support.sort_by(f64::total_cmp);
    support.dedup();
    for v in support {
        let at_or_below = values.iter().filter(|&&x| x <= v).count();
        if at_or_below as f64 >= q * values.len() as f64 {
            return v;
        }
    }
    unreachable!()
}

fn statistics() -> Verdict {
    let mut problems = Vec::new();
    let study = [0.612, 0.744, 0.689];
    let control = [0.553, 0.581, 0.702];
    let exact = exact_bootstrap(&study, &control);
    let support: HashSet<u64> = exact.iter().map(|v| v.to_bits()).collect();
    let mut sorted = exact.clone();
    sorted.sort_by(f64::total_cmp);
    for q in [0.025, 0.05, 0.5, 0.95, 0.975] {
        if percentile_sorted(&sorted, q).to_bits() != cdf_quantile(&exact, q).to_bits() {
            problems.push(format!("exhaustive percentile {q}"));
        }
    }
    let diffs = bootstrap_diffs(&study, &control, BOOTSTRAP_RESAMPLES, 0).expect("bootstrap");
    let outside = diffs.iter().filter(|d| !support.contains(&d.to_bits())).count();
    if outside > 0 {
        problems.push(format!("{outside} resampled differences outside the exact support"));
    }
    let r = bootstrap_mean_diff(&study, &control, BOOTSTRAP_RESAMPLES, 0, Direction::StudyGreater).expect("bootstrap");
    let (lo, hi) = (cdf_quantile(&exact, 0.025), cdf_quantile(&exact, 0.975));
    if r.ci_low != lo || r.ci_high != hi {
        problems.push(format!("interval [{}, {}] vs exact [{lo}, {hi}]", r.ci_low, r.ci_high));
    }

    let mut rng = stream(2024, &["acceptance".into(), "whittaker".into()]);
    let mut worst: f64 = 0.0;
    for &lambda in &WHITTAKER_LAMBDAS {
        for n in 3..=50 {
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut d = DMatrix::<f64>::zeros(n - 2, n);
            for r in 0..n - 2 {
                d[(r, r)] = 1.0;
                d[(r, r + 1)] = -2.0;
                d[(r, r + 2)] = 1.0;
            }
            let a = DMatrix::<f64>::identity(n, n) + d.transpose() * &d * lambda;
            let oracle = a
                .lu()
                .solve(&DVector::from_column_slice(&y))
                .expect("positive definite");
            let z = whittaker_smooth(&y, lambda).expect("smoother");
            worst = z
                .iter()
                .zip(oracle.iter())
                .fold(worst, |m, (a, b)| m.max((a - b).abs()));
        }
    }
    if !(worst <= WHITTAKER_TOL) {
        problems.push(format!("smoother deviates by {worst:.2e}"));
    }

    let mut nonzero = 0;
    for _ in 0..1000 {
        let (a, b) = (rng.random_range(-10.0..10.0), rng.random_range(-1.0..1.0));
        let n = rng.random_range(3..40);
        let y: Vec<f64> = (0..n).map(|i| a + b * i as f64).collect();
        if instability_score(&y, rng.random_range(0.01..100.0)).expect("score") != 0.0 {
            nonzero += 1;
        }
    }
    if nonzero > 0 {
        problems.push(format!("{nonzero} affine curves scored above zero"));
    }
    Verdict::new(
        problems.is_empty(),
        format!(
            "n=3 bootstrap: {} resamples inside the 729-pair support, CI [{:.5}, {:.5}] equals exhaustive percentiles; smoother max deviation {worst:.1e} (<= {WHITTAKER_TOL:.0e}); 1000 affine curves score 0{}",
            diffs.len() - outside,
            r.ci_low,
            r.ci_high,
            if problems.is_empty() { String::new() } else { format!("; problems: {}", problems.join("; ")) }
        ),
    )
}

fn cli(args: &[&str], log: &Path) -> Result<(), String> {
    let log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(log)
        .map_err(|e| e.to_string())?;
    let status = Command::new(env!("CARGO_BIN_EXE_coordloc"))
        .args(args)
        .env("RUST_LOG", "info")
        .stdout(Stdio::from(log_file.try_clone().map_err(|e| e.to_string())?))
        .stderr(Stdio::from(log_file))
        .status()
        .map_err(|e| e.to_string())?;
    if status.success() {
        Ok(())
    } else {
        Err(format!(
            "coordloc {} exited with {status} (see {})",
            args.join(" "),
            log.display()
        ))
    }
}

struct RunOutcome {
    elapsed: Duration,
    good_folds: BTreeMap<String, usize>,
    report_complete: bool,
    direction: Vec<String>,
}

impl RunOutcome {
    fn r2_ok(&self) -> bool {
        self.good_folds.len() == 4 && self.good_folds.values().all(|&g| g >= MIN_GOOD_FOLDS)
    }
}

/// Generates the dataset, trains every arm and writes the report through
/// the command-line tool.
fn run_pipeline(
    task: Task,
    bases: usize,
    augments: usize,
    epochs: Option<usize>,
    seed: u64,
    dir: &Path,
) -> Result<RunOutcome, String> {
    let _ = std::fs::remove_dir_all(dir);
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let log = dir.join("pipeline.log");
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let (seed_s, bases_s, aug_s) = (seed.to_string(), bases.to_string(), augments.to_string());
    let start = Instant::now();
    cli(
        &[
            "synth",
            "--task",
            task.as_str(),
            "--n-base",
            &bases_s,
            "--augment",
            &aug_s,
            "--seed",
            &seed_s,
            "--out",
            &p("data"),
        ],
        &log,
    )?;
    let mut train = vec![
        "train",
        "--dataset",
        &p("data")[..],
        "--seed",
        &seed_s[..],
        "--out",
        &p("run")[..],
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    if let Some(e) = epochs {
        train.extend(["--epochs".to_string(), e.to_string()]);
    }
    cli(&train.iter().map(String::as_str).collect::<Vec<_>>(), &log)?;
    cli(
        &["report", "--log", &p("run"), "--out", &p("report"), "--seed", &seed_s],
        &log,
    )?;
    let elapsed = start.elapsed();

    let log = TrainLog::read(&dir.join("run").join(LOG_FILE)).map_err(|e| e.to_string())?;
    let good_folds = log
        .arms()
        .into_iter()
        .map(|arm| {
            let good = log
                .final_values(&arm, |r| r.test_r2)
                .iter()
                .filter(|&&v| v > R2_THRESHOLD)
                .count();
            (arm, good)
        })
        .collect();
    let csv = std::fs::read_to_string(dir.join("report/report.csv")).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(dir.join("report/report.txt")).map_err(|e| e.to_string())?;
    let report_complete = csv.lines().count() == 1 + 2 * 3
        && ["Test R²", "Train R²", "Instability"]
            .iter()
            .all(|m| csv.matches(m).count() == 2)
        && dir.join("report/r2_curves.svg").is_file();
    let direction = text
        .lines()
        .skip(1)
        .take_while(|l| !l.trim().is_empty())
        .map(|l| l.trim().to_string())
        .collect();
    Ok(RunOutcome {
        elapsed,
        good_folds,
        report_complete,
        direction,
    })
}

fn describe(task: Task, seed: u64, o: &RunOutcome) -> String {
    let folds: Vec<String> = o.good_folds.iter().map(|(a, g)| format!("{a} {g}/5")).collect();
    format!(
        "{} seed {seed}: {:.1} min, folds with test R² > {R2_THRESHOLD}: [{}], report {}; direction: {}",
        task.as_str(),
        o.elapsed.as_secs_f64() / 60.0,
        folds.join(", "),
        if o.report_complete { "complete" } else { "INCOMPLETE" },
        o.direction.join(" | ")
    )
}

/// Runs up to three seeds; returns the first passing one.
fn run_with_retries(task: Task, bases: usize, augments: usize, root: &Path) -> (bool, Option<(u64, PathBuf)>, String) {
    let mut notes = Vec::new();
    for seed in SEEDS {
        let dir = root.join(format!("{}-seed{seed}", task.as_str()));
        match run_pipeline(task, bases, augments, None, seed, &dir) {
            Ok(o) => {
                notes.push(describe(task, seed, &o));
                let pass = o.r2_ok() && o.report_complete && o.elapsed < EXPERIMENT_BUDGET;
                if pass || o.elapsed >= EXPERIMENT_BUDGET {
                    return (pass, Some((seed, dir)), notes.join("; "));
                }
            }
            Err(e) => notes.push(format!("{} seed {seed}: {e}", task.as_str())),
        }
    }
    (false, None, notes.join("; "))
}

/// Times generation and one training epoch per variant on a small image
/// set, then scales to the full experiment.
fn project_image_runtime(root: &Path) -> Result<Duration, String> {
    let (bases, augments) = (5, 4);
    let dir = root.join("image-probe");
    let _ = std::fs::remove_dir_all(&dir);
    let data = dir.join("data");
    let start = Instant::now();
    coordloc::synth::gen_dataset(Task::Image, bases, augments, 0, &data, false).map_err(|e| e.to_string())?;
    let n = (bases * (augments + 1)) as f64;
    let gen_per_sample = start.elapsed().as_secs_f64() / n;
    let ds = Dataset::open(&data).map_err(|e| e.to_string())?;
    let mut cfg = ExperimentConfig::new(&data);
    cfg.epochs = 1;
    let ids: Vec<&str> = ds.records.iter().map(|r| r.base_id.as_str()).collect();
    let folds = assign_folds(&ids, cfg.folds, cfg.seed).map_err(|e| e.to_string())?;
    let mut epoch_per_sample = 0.0;
    for variant in [Variant::Full, Variant::Reduced] {
        for encoding in [EncodingKind::CoordConv, EncodingKind::IntensityWeighted] {
            let t = Instant::now();
            train_fold(&cfg, Arm { encoding, variant }, 0, &ds, &folds).map_err(|e| e.to_string())?;
            epoch_per_sample += t.elapsed().as_secs_f64() / n;
        }
    }
    let total = (IMAGE_BASES * (IMAGE_AUGMENTS + 1)) as f64;
    let default = ExperimentConfig::new(&data);
    let secs = gen_per_sample * total + epoch_per_sample * total * default.epochs as f64 * default.folds as f64;
    Ok(Duration::from_secs_f64(secs))
}

fn experiment(state: &mut State, root: &Path) -> Verdict {
    let (ecg_pass, ecg_run, ecg_notes) = run_with_retries(Task::Ecg, ECG_BASES, ECG_AUGMENTS, root);
    state.ecg = ecg_run;
    let full_image = std::env::var("COORDLOC_ACCEPTANCE_FULL").is_ok_and(|v| v == "1");
    let (image_pass, image_notes) = if full_image {
        let (pass, run, notes) = run_with_retries(Task::Image, IMAGE_BASES, IMAGE_AUGMENTS, root);
        state.image = run;
        (pass, notes)
    } else {
        match project_image_runtime(root) {
            Ok(d) if d < EXPERIMENT_BUDGET => (
                false,
                format!(
                    "image: projected {:.1} min; run with COORDLOC_ACCEPTANCE_FULL=1 to execute it",
                    d.as_secs_f64() / 60.0
                ),
            ),
            Ok(d) => (
                false,
                format!(
                    "image: projected {:.1} h on this machine (budget {} min), not run",
                    d.as_secs_f64() / 3600.0,
                    EXPERIMENT_BUDGET.as_secs() / 60
                ),
            ),
            Err(e) => (false, format!("image probe failed: {e}")),
        }
    };
    Verdict::new(ecg_pass && image_pass, format!("{ecg_notes}; {image_notes}"))
}

fn same_files(a: &Path, b: &Path, files: &[&str]) -> Vec<String> {
    files
        .iter()
        .filter(|f| std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok() || !a.join(f).is_file())
        .map(|f| f.to_string())
        .collect()
}

const COMPARED: [&str; 7] = [
    "data/meta.json",
    "data/manifest.jsonl",
    "data/samples.f32",
    "run/train_log.csv",
    "report/report.csv",
    "report/report.txt",
    "report/r2_curves.svg",
];

fn determinism(state: &mut State, root: &Path) -> Verdict {
    let mut notes = Vec::new();
    let mut pass = true;
    // the ECG experiment at full scale, repeated with the seed criterion 8 settled on
    let (seed, first) = match state.ecg.clone() {
        Some(r) => r,
        None => {
            let dir = root.join("ecg-determinism-a");
            if let Err(e) = run_pipeline(Task::Ecg, ECG_BASES, ECG_AUGMENTS, None, 0, &dir) {
                return Verdict::new(false, format!("ecg run failed: {e}"));
            }
            (0, dir)
        }
    };
    let second = root.join(format!("ecg-seed{seed}-repeat"));
    match run_pipeline(Task::Ecg, ECG_BASES, ECG_AUGMENTS, None, seed, &second) {
        Ok(_) => {
            let diff = same_files(&first, &second, &COMPARED);
            pass &= diff.is_empty();
            notes.push(if diff.is_empty() {
                format!("ecg full scale (seed {seed}): dataset, train log and report byte-identical across two runs")
            } else {
                format!("ecg full scale: differing files {diff:?}")
            });
        }
        Err(e) => {
            pass = false;
            notes.push(format!("ecg repeat failed: {e}"));
        }
    }
    // the image experiment, at full scale only when criterion 8 ran it
    let (bases, augments, epochs, label) = match &state.image {
        Some(_) => (IMAGE_BASES, IMAGE_AUGMENTS, None, "full scale"),
        None => (10, 1, Some(2), "reduced scale (10 bases x 2, 2 epochs)"),
    };
    let seed = state.image.as_ref().map_or(0, |r| r.0);
    let dirs = [root.join("image-determinism-a"), root.join("image-determinism-b")];
    let first = match &state.image {
        Some((_, d)) => d.clone(),
        None => dirs[0].clone(),
    };
    let runs = if state.image.is_some() { &dirs[1..] } else { &dirs[..] };
    let mut failed = None;
    for d in runs {
        if let Err(e) = run_pipeline(Task::Image, bases, augments, epochs, seed, d) {
            failed = Some(e);
        }
    }
    match failed {
        Some(e) => {
            pass = false;
            notes.push(format!("image run failed: {e}"));
        }
        None => {
            let diff = same_files(&first, &dirs[1], &COMPARED);
            pass &= diff.is_empty();
            notes.push(if diff.is_empty() {
                format!("image {label}: byte-identical across two runs")
            } else {
                format!("image {label}: differing files {diff:?}")
            });
        }
    }
    Verdict::new(pass, notes.join("; "))
}
