//! Grouped k-fold cross-validation training with per-epoch R² logging.
//!
//! Arms are (encoding, variant) pairs. All arms of an experiment share the
//! fold assignment, the per-fold initial weights of same-shaped layers and
//! the batch order, so they differ only in the extra input channels and the
//! pooling layer.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encode::{assemble_input, CoordMode, EncodingKind};
use crate::ingest::{Dataset, Task};
use crate::models::{NetworkSpec, NetworkState, Variant};
use crate::rng::{derive_u64, stream};
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor};
use crate::{Error, Result};

pub const DEFAULT_FOLDS: usize = 5;
pub const LOG_HEADER: &str = "arm,fold,epoch,train_r2,test_r2,train_loss,wall_time_s";
pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Fold index for every base id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, base_id: &str) -> Option<usize> {
        self.folds.get(base_id).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.folds.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Shuffles the distinct base ids with a seeded stream and deals them into
/// `k` folds round-robin. Input order and duplicates do not matter.
pub fn assign_folds<S: AsRef<str>>(base_ids: &[S], k: usize, seed: u64) -> Result<FoldAssignment> {
    let distinct: BTreeSet<&str> = base_ids.iter().map(|s| s.as_ref()).collect();
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {k}")));
    }
    if distinct.len() < k {
        return Err(Error::Dataset(format!(
            "{} distinct base samples cannot fill {k} folds",
            distinct.len()
        )));
    }
    let mut ids: Vec<&str> = distinct.into_iter().collect();
    ids.shuffle(&mut stream(seed, &["folds".into(), k.into()]));
    let folds = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % k))
        .collect();
    Ok(FoldAssignment { k, folds })
}

/// Coefficient of determination averaged uniformly over output dimensions.
/// Values are row-major `[n, dims]`. Returns NaN, with a warning, when any
/// target dimension is constant.
pub fn r2_score(y_true: &[f64], y_pred: &[f64], dims: usize) -> Result<f64> {
    if dims == 0 || y_true.len() != y_pred.len() || !y_true.len().is_multiple_of(dims) {
        return Err(Error::shape(format!(
            "r2_score: {} targets and {} predictions for {dims} outputs",
            y_true.len(),
            y_pred.len()
        )));
    }
    let n = y_true.len() / dims;
    if n < 2 {
        return Err(Error::invalid("r2_score needs at least 2 samples"));
    }
    let mut total = 0.0;
    for d in 0..dims {
        let col = |v: &[f64], i: usize| v[i * dims + d];
        let mean = (0..n).map(|i| col(y_true, i)).sum::<f64>() / n as f64;
        let ss_tot: f64 = (0..n).map(|i| (col(y_true, i) - mean).powi(2)).sum();
        let ss_res: f64 = (0..n).map(|i| (col(y_true, i) - col(y_pred, i)).powi(2)).sum();
        if ss_tot == 0.0 {
            log::warn!("r2_score: target dimension {d} is constant; R² undefined");
            return Ok(f64::NAN);
        }
        total += 1.0 - ss_res / ss_tot;
    }
    Ok(total / dims as f64)
}

/// An (encoding, variant) combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Arm {
    pub encoding: EncodingKind,
    pub variant: Variant,
}

impl Arm {
    pub fn name(&self) -> String {
        format!("{}_{}", self.encoding.as_str(), self.variant.as_str())
    }
}

impl PartialOrd for EncodingKind {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for EncodingKind {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (*self as u8).cmp(&(*other as u8))
    }
}

impl PartialOrd for Variant {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Variant {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (*self as u8).cmp(&(*other as u8))
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        for variant in [Variant::Full, Variant::Reduced] {
            if let Some(enc) = s.strip_suffix(&format!("_{}", variant.as_str())) {
                return Ok(Arm {
                    encoding: enc.parse()?,
                    variant,
                });
            }
        }
        Err(Error::invalid(format!(
            "unknown arm '{s}' (expected <encoding>_<variant>)"
        )))
    }
}

fn default_seed() -> u64 {
    0
}
fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    15
}
fn default_folds() -> usize {
    DEFAULT_FOLDS
}
fn default_encodings() -> Vec<EncodingKind> {
    vec![EncodingKind::CoordConv, EncodingKind::IntensityWeighted]
}
fn default_variants() -> Vec<Variant> {
    vec![Variant::Full, Variant::Reduced]
}
fn default_true() -> bool {
    true
}

/// Experiment settings; serialised as JSON with these field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default = "default_encodings")]
    pub encodings: Vec<EncodingKind>,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub coord_mode: CoordMode,
    /// Writes measured seconds per epoch to the log; otherwise 0 so logs
    /// are byte-reproducible.
    #[serde(default)]
    pub log_wall_time: bool,
    #[serde(default = "default_true")]
    pub save_checkpoints: bool,
}

impl ExperimentConfig {
    pub fn new(dataset: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            dataset: dataset.into(),
            seed: default_seed(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            folds: default_folds(),
            optimizer: AdamConfig::default(),
            encodings: default_encodings(),
            variants: default_variants(),
            coord_mode: CoordMode::default(),
            log_wall_time: false,
            save_checkpoints: true,
        }
    }

    /// Lists every problem at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.batch_size < 1 {
            errs.push("batch_size must be at least 1".to_string());
        }
        if self.epochs < 1 {
            errs.push("epochs must be at least 1".to_string());
        }
        if self.folds < 2 {
            errs.push("folds must be at least 2".to_string());
        }
        if self.encodings.is_empty() {
            errs.push("encodings must not be empty".to_string());
        }
        if self.variants.is_empty() {
            errs.push("variants must not be empty".to_string());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            errs.push(format!("optimizer.lr must be positive, got {}", o.lr));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            errs.push("optimizer betas must lie in [0, 1)".to_string());
        }
        if !(o.eps > 0.0) {
            errs.push("optimizer.eps must be positive".to_string());
        }
        if self.dataset.as_os_str().is_empty() {
            errs.push("dataset path is empty".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Arms in a fixed order: variants outer, encodings inner.
    pub fn arms(&self) -> Vec<Arm> {
        let mut arms = Vec::new();
        for &variant in &self.variants {
            for &encoding in &self.encodings {
                let arm = Arm { encoding, variant };
                if !arms.contains(&arm) {
                    arms.push(arm);
                }
            }
        }
        arms
    }
}

/// One logged epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub arm: String,
    pub fold: usize,
    /// 1-based.
    pub epoch: usize,
    pub train_r2: f64,
    pub test_r2: f64,
    pub train_loss: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.arm, r.fold, r.epoch, r.train_r2, r.test_r2, r.train_loss, r.wall_time_s
            )
            .expect("string write");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == LOG_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header '{LOG_HEADER}'"),
                })
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = |m: &str| Error::Parse {
                line: i + 1,
                message: m.to_string(),
            };
            if f.len() != 7 {
                return Err(bad("expected 7 fields"));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(&format!("bad number '{s}'")));
            let int = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| bad(&format!("bad integer '{s}'")))
            };
            rows.push(LogRow {
                arm: f[0].to_string(),
                fold: int(f[1])?,
                epoch: int(f[2])?,
                train_r2: num(f[3])?,
                test_r2: num(f[4])?,
                train_loss: num(f[5])?,
                wall_time_s: num(f[6])?,
            });
        }
        Ok(TrainLog { rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?)
    }

    /// Arm names in order of first appearance.
    pub fn arms(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.arm) {
                out.push(r.arm.clone());
            }
        }
        out
    }

    pub fn folds(&self, arm: &str) -> Vec<usize> {
        let set: BTreeSet<usize> = self.rows.iter().filter(|r| r.arm == arm).map(|r| r.fold).collect();
        set.into_iter().collect()
    }

    /// Rows of one (arm, fold) sorted by epoch.
    pub fn curve(&self, arm: &str, fold: usize) -> Vec<&LogRow> {
        let mut rows: Vec<&LogRow> = self.rows.iter().filter(|r| r.arm == arm && r.fold == fold).collect();
        rows.sort_by_key(|r| r.epoch);
        rows
    }

    /// Checks that every listed arm has `folds` folds of epochs `1..=epochs`.
    pub fn check_complete(&self, arm: &str, folds: usize, epochs: usize) -> Result<()> {
        for fold in 0..folds {
            let got: Vec<usize> = self.curve(arm, fold).iter().map(|r| r.epoch).collect();
            if got != (1..=epochs).collect::<Vec<_>>() {
                return Err(Error::Incomplete(format!(
                    "arm {arm} fold {fold} has epochs {got:?}, expected 1..={epochs}"
                )));
            }
        }
        Ok(())
    }

    /// Final-epoch value of `metric` for every fold of `arm`.
    pub fn final_values(&self, arm: &str, metric: impl Fn(&LogRow) -> f64) -> Vec<f64> {
        self.folds(arm)
            .into_iter()
            .filter_map(|f| self.curve(arm, f).last().map(|r| metric(r)))
            .collect()
    }
}

/// Training and test sample indices of one fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits container indices by the fold of their base id.
pub fn split_for_fold(dataset: &Dataset, folds: &FoldAssignment, fold: usize) -> Result<Split> {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, rec) in dataset.records.iter().enumerate() {
        let f = folds
            .fold_of(&rec.base_id)
            .ok_or_else(|| Error::Dataset(format!("base id {} has no fold", rec.base_id)))?;
        if f == fold {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Dataset(format!("fold {fold} has an empty train or test split")));
    }
    let train_ids: BTreeSet<&str> = train.iter().map(|&i| dataset.records[i].base_id.as_str()).collect();
    if let Some(&i) = test
        .iter()
        .find(|&&i| train_ids.contains(dataset.records[i].base_id.as_str()))
    {
        return Err(Error::Dataset(format!(
            "base id {} crosses the fold boundary",
            dataset.records[i].base_id
        )));
    }
    Ok(Split { train, test })
}

/// Loads and encodes samples into one `[B, C, ...]` batch with targets.
pub fn load_batch(
    dataset: &Dataset,
    indices: &[usize],
    encoding: EncodingKind,
    mode: CoordMode,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let shape = dataset.meta.sample_shape.clone();
    let dims = dataset.task().target_dim();
    let mut data = Vec::new();
    let mut targets = Vec::with_capacity(indices.len() * dims);
    let mut enc_shape = Vec::new();
    let mut buf = vec![0.0f32; dataset.sample_len()];
    for &i in indices {
        dataset.read_into(i, &mut buf)?;
        let base = Tensor::new(shape.clone(), buf.clone())?;
        let enc = assemble_input(&base, encoding, mode)?;
        enc_shape = enc.channels.shape().to_vec();
        data.extend_from_slice(enc.channels.data());
        targets.extend(dataset.records[i].target.iter().map(|&t| t as f32));
    }
    let mut full = vec![indices.len()];
    full.extend(enc_shape);
    Ok((
        Tensor::new(full, data)?,
        Tensor::new(vec![indices.len(), dims], targets)?,
    ))
}

/// Eval-mode R² over `indices`, predicted in chunks of `chunk`.
pub fn evaluate(
    net: &NetworkState<f32>,
    dataset: &Dataset,
    indices: &[usize],
    encoding: EncodingKind,
    mode: CoordMode,
    chunk: usize,
) -> Result<f64> {
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for part in indices.chunks(chunk.max(1)) {
        let (x, y) = load_batch(dataset, part, encoding, mode)?;
        let p = net.predict(&x)?;
        truth.extend(y.data().iter().map(|&v| v as f64));
        pred.extend(p.data().iter().map(|&v| v as f64));
    }
    r2_score(&truth, &pred, dataset.task().target_dim())
}

/// Seed of the initial weights for a fold; shared by every arm.
pub fn init_seed(seed: u64, fold: usize) -> u64 {
    derive_u64(seed, &["init".into(), fold.into()])
}

/// Shuffled training order for one epoch; shared by every arm.
pub fn epoch_order(train: &[usize], seed: u64, fold: usize, epoch: usize) -> Vec<usize> {
    let mut order = train.to_vec();
    order.shuffle(&mut stream(seed, &["batches".into(), fold.into(), epoch.into()]));
    order
}

/// Trains one arm on one fold and logs every epoch.
pub fn train_fold(
    config: &ExperimentConfig,
    arm: Arm,
    fold: usize,
    dataset: &Dataset,
    folds: &FoldAssignment,
) -> Result<(Vec<LogRow>, NetworkState<f32>)> {
    let split = split_for_fold(dataset, folds, fold)?;
    let spec = NetworkSpec::for_task(dataset.task(), arm.variant);
    let mut net = NetworkState::<f32>::init(&spec, init_seed(config.seed, fold));
    let mut adam = AdamState::new(config.optimizer);
    let mut rows = Vec::with_capacity(config.epochs);
    let name = arm.name();
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let order = epoch_order(&split.train, config.seed, fold, epoch);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (x, y) = load_batch(dataset, batch, arm.encoding, config.coord_mode)?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let yv = g.constant(y);
            let fwd = net.forward(&mut g, xv, true)?;
            let loss = g.mse_loss(fwd.output, yv)?;
            let lv = g.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::invalid(format!(
                    "{name} fold {fold} epoch {epoch}: loss became {lv}"
                )));
            }
            loss_sum += lv * batch.len() as f64;
            g.backward(loss)?;
            net.collect_grads(&mut g, &fwd)?;
            drop(g);
            adam.step(&mut net.params_mut())?;
        }
        let train_r2 = evaluate(
            &net,
            dataset,
            &split.train,
            arm.encoding,
            config.coord_mode,
            config.batch_size,
        )?;
        let test_r2 = evaluate(
            &net,
            dataset,
            &split.test,
            arm.encoding,
            config.coord_mode,
            config.batch_size,
        )?;
        let wall = if config.log_wall_time {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        };
        let row = LogRow {
            arm: name.clone(),
            fold,
            epoch,
            train_r2,
            test_r2,
            train_loss: loss_sum / split.train.len() as f64,
            wall_time_s: wall,
        };
        log::info!(
            "{name} fold {fold} epoch {epoch}: loss {:.4} train R² {:.4} test R² {:.4}",
            row.train_loss,
            row.train_r2,
            row.test_r2
        );
        rows.push(row);
    }
    Ok((rows, net))
}

/// Outcome of [`run_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub log: TrainLog,
    pub log_path: PathBuf,
    /// Final-epoch test R² per arm, one value per fold.
    pub final_test_r2: BTreeMap<String, Vec<f64>>,
    /// (arm, fold) pairs trained in this call; the rest were resumed.
    pub trained: Vec<(String, usize)>,
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, text).map_err(|e| Error::file(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
}

/// Runs every arm over every fold, writing `config.json`, `train_log.csv`
/// and checkpoints into `out_dir`. Folds already complete in an existing
/// log are kept; the log is rewritten in canonical order after each fold.
/// `arm_filter` restricts the arms (matching encoding names or arm names).
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: &Path,
    arm_filter: Option<&[String]>,
) -> Result<ExperimentResult> {
    config.validate()?;
    let dataset = Dataset::open(&config.dataset)?;
    let mut arms = config.arms();
    if let Some(filter) = arm_filter {
        arms.retain(|a| filter.iter().any(|f| f == a.encoding.as_str() || *f == a.name()));
        if arms.is_empty() {
            return Err(Error::Config(vec![format!(
                "--arms {} matches no configured arm",
                filter.join(",")
            )]));
        }
    }
    let base_ids: Vec<&str> = dataset.records.iter().map(|r| r.base_id.as_str()).collect();
    let folds = assign_folds(&base_ids, config.folds, config.seed)?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    let cfg_path = out_dir.join(CONFIG_FILE);
    if cfg_path.exists() {
        let prev =
            ExperimentConfig::from_json(&std::fs::read_to_string(&cfg_path).map_err(|e| Error::file(&cfg_path, e))?)?;
        if prev != *config {
            return Err(Error::Config(vec![format!(
                "{} holds a different configuration; use a new output directory",
                out_dir.display()
            )]));
        }
    } else {
        write_atomic(&cfg_path, &config.to_json())?;
    }
    let log_path = out_dir.join(LOG_FILE);
    let mut done: BTreeMap<(String, usize), Vec<LogRow>> = BTreeMap::new();
    if log_path.exists() {
        for row in TrainLog::read(&log_path)?.rows {
            done.entry((row.arm.clone(), row.fold)).or_default().push(row);
        }
        done.retain(|_, rows| {
            rows.sort_by_key(|r| r.epoch);
            rows.iter().map(|r| r.epoch).eq(1..=config.epochs)
        });
    }
    if config.save_checkpoints {
        let d = out_dir.join(CHECKPOINT_DIR);
        std::fs::create_dir_all(&d).map_err(|e| Error::file(&d, e))?;
    }

    let all_arms = config.arms();
    let canonical = |done: &BTreeMap<(String, usize), Vec<LogRow>>| {
        let mut rows = Vec::new();
        for arm in &all_arms {
            for fold in 0..config.folds {
                if let Some(r) = done.get(&(arm.name(), fold)) {
                    rows.extend(r.iter().cloned());
                }
            }
        }
        TrainLog { rows }
    };
    let mut trained = Vec::new();
    for arm in &arms {
        for fold in 0..config.folds {
            let key = (arm.name(), fold);
            if done.contains_key(&key) {
                log::info!("{} fold {fold} already complete", key.0);
                continue;
            }
            let (rows, net) = train_fold(config, *arm, fold, &dataset, &folds)?;
            if config.save_checkpoints {
                net.save(&out_dir.join(CHECKPOINT_DIR).join(format!("{}_fold{fold}.cloc", key.0)))?;
            }
            done.insert(key.clone(), rows);
            write_atomic(&log_path, &canonical(&done).to_csv())?;
            trained.push(key);
        }
    }
    let log = canonical(&done);
    write_atomic(&log_path, &log.to_csv())?;
    let final_test_r2 = arms
        .iter()
        .map(|a| (a.name(), log.final_values(&a.name(), |r| r.test_r2)))
        .collect();
    Ok(ExperimentResult {
        log,
        log_path,
        final_test_r2,
        trained,
    })
}

/// Checks the task recorded in a container.
pub fn dataset_task(path: &Path) -> Result<Task> {
    Ok(Dataset::open(path)?.task())
}
