//! Bootstrap superiority tests and the smoothing-based instability score.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encode::EncodingKind;
use crate::models::Variant;
use crate::rng::stream;
use crate::train::{Arm, TrainLog};
use crate::{Error, Result};

pub const DEFAULT_RESAMPLES: usize = 20_000;
pub const DEFAULT_LAMBDA: f64 = 5.0;
pub const SIGNIFICANCE: f64 = 0.05;
/// Resamples drawn from one RNG stream.
const CHUNK: usize = 1024;

/// Which difference counts as an improvement for the study arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Higher is better (R²).
    StudyGreater,
    /// Lower is better (instability).
    StudyLess,
}

impl Direction {
    pub fn label(self) -> &'static str {
        match self {
            Direction::StudyGreater => "study > control",
            Direction::StudyLess => "study < control",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub mean_diff: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Add-one p-value `(opposing + 1) / (B + 1)`.
    pub p_one_sided: f64,
    /// True when no resample opposed the direction.
    pub p_below_resolution: bool,
    pub direction: Direction,
    pub resamples: usize,
}

impl BootstrapResult {
    /// `"<0.00005"`-style text when no resample opposed the direction,
    /// otherwise the p-value to 5 decimals.
    pub fn p_text(&self) -> String {
        if self.p_below_resolution {
            format!("<{}", format_sig(1.0 / self.resamples as f64))
        } else {
            format!("{:.5}", self.p_one_sided)
        }
    }

    pub fn significant(&self) -> bool {
        self.p_one_sided < SIGNIFICANCE
    }

    pub fn conclusion(&self) -> &'static str {
        if self.significant() {
            self.direction.label()
        } else {
            "not significant"
        }
    }
}

/// `1/B` rounded to one significant digit, written without exponent.
fn format_sig(v: f64) -> String {
    let digits = (-v.log10().floor()) as usize;
    let s = format!("{:.*}", digits, v);
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Nearest-rank percentile of an ascending slice: the value at
/// `ceil(q * n)` (1-based), clamped to the ends.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = (q * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// All resampled mean differences, sorted. Chunk `c` of `CHUNK`
/// resamples uses the stream `(seed, "bootstrap", c)`.
pub fn bootstrap_diffs(study: &[f64], control: &[f64], resamples: usize, seed: u64) -> Result<Vec<f64>> {
    if study.is_empty() || control.is_empty() {
        return Err(Error::invalid("bootstrap needs non-empty study and control groups"));
    }
    if resamples == 0 {
        return Err(Error::invalid("bootstrap needs at least one resample"));
    }
    if study.iter().chain(control).any(|v| !v.is_finite()) {
        return Err(Error::invalid("bootstrap inputs must be finite"));
    }
    let chunks = resamples.div_ceil(CHUNK);
    let mut diffs: Vec<f64> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = stream(seed, &["bootstrap".into(), c.into()]);
            let count = CHUNK.min(resamples - c * CHUNK);
            (0..count)
                .map(|_| {
                    let s: f64 = (0..study.len()).map(|_| study[rng.random_range(0..study.len())]).sum();
                    let k: f64 = (0..control.len())
                        .map(|_| control[rng.random_range(0..control.len())])
                        .sum();
                    s / study.len() as f64 - k / control.len() as f64
                })
                .collect::<Vec<_>>()
        })
        .collect();
    diffs.sort_by(f64::total_cmp);
    Ok(diffs)
}

/// Summarises sorted resampled differences: 95% percentile interval and
/// one-sided add-one p-value.
pub fn summarize(mean_diff: f64, sorted: &[f64], direction: Direction) -> BootstrapResult {
    let b = sorted.len();
    let opposing = match direction {
        Direction::StudyGreater => sorted.iter().filter(|&&d| d <= 0.0).count(),
        Direction::StudyLess => sorted.iter().filter(|&&d| d >= 0.0).count(),
    };
    BootstrapResult {
        mean_diff,
        ci_low: percentile_sorted(sorted, 0.025),
        ci_high: percentile_sorted(sorted, 0.975),
        p_one_sided: (opposing + 1) as f64 / (b + 1) as f64,
        p_below_resolution: opposing == 0,
        direction,
        resamples: b,
    }
}

/// Resamples each group with replacement `resamples` times and tests
/// whether the study mean beats the control mean in `direction`.
pub fn bootstrap_mean_diff(
    study: &[f64],
    control: &[f64],
    resamples: usize,
    seed: u64,
    direction: Direction,
) -> Result<BootstrapResult> {
    let diffs = bootstrap_diffs(study, control, resamples, seed)?;
    Ok(summarize(mean(study) - mean(control), &diffs, direction))
}

/// Whittaker-Henderson smoother: solves `(I + lambda D'D) z = y` with `D`
/// the second-difference operator, using a banded LDL' factorisation.
pub fn whittaker_smooth(y: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let n = y.len();
    if n < 3 {
        return Err(Error::invalid(format!("smoothing needs at least 3 points, got {n}")));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("smoothing input must be finite"));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    // Bands of D'D: diagonal, first and second off-diagonals.
    let mut d0 = vec![0.0; n];
    let mut d1 = vec![0.0; n - 1];
    let mut d2 = vec![0.0; n - 2];
    for r in 0..n - 2 {
        let coef = [1.0, -2.0, 1.0];
        for a in 0..3 {
            d0[r + a] += coef[a] * coef[a];
            if a < 2 {
                d1[r + a] += coef[a] * coef[a + 1];
            }
        }
        d2[r] += coef[0] * coef[2];
    }
    let a0: Vec<f64> = d0.iter().map(|v| 1.0 + lambda * v).collect();
    let a1: Vec<f64> = d1.iter().map(|v| lambda * v).collect();
    let a2: Vec<f64> = d2.iter().map(|v| lambda * v).collect();

    // LDL' with unit lower bandwidth 2: l1[i] = L(i, i-1), l2[i] = L(i, i-2).
    let mut d = vec![0.0; n];
    let mut l1 = vec![0.0; n];
    let mut l2 = vec![0.0; n];
    for i in 0..n {
        let mut di = a0[i];
        if i >= 1 {
            di -= l1[i] * l1[i] * d[i - 1];
        }
        if i >= 2 {
            di -= l2[i] * l2[i] * d[i - 2];
        }
        d[i] = di;
        if i + 2 < n {
            l2[i + 2] = a2[i] / di;
        }
        if i + 1 < n {
            let mut v = a1[i];
            if i >= 1 {
                v -= l2[i + 1] * l1[i] * d[i - 1];
            }
            l1[i + 1] = v / di;
        }
    }
    // Forward substitution L u = y, then D, then L' z = v.
    let mut u = vec![0.0; n];
    for i in 0..n {
        let mut v = y[i];
        if i >= 1 {
            v -= l1[i] * u[i - 1];
        }
        if i >= 2 {
            v -= l2[i] * u[i - 2];
        }
        u[i] = v;
    }
    for i in 0..n {
        u[i] /= d[i];
    }
    let mut z = vec![0.0; n];
    for i in (0..n).rev() {
        let mut v = u[i];
        if i + 1 < n {
            v -= l1[i + 1] * z[i + 1];
        }
        if i + 2 < n {
            v -= l2[i + 2] * z[i + 2];
        }
        z[i] = v;
    }
    Ok(z)
}

/// Sum of squared residuals between a curve and its smoothed version.
/// Affine curves (second differences at rounding level) score exactly 0.
pub fn instability_score(curve: &[f64], lambda: f64) -> Result<f64> {
    if is_affine(curve) {
        return Ok(0.0);
    }
    let z = whittaker_smooth(curve, lambda)?;
    Ok(curve.iter().zip(&z).map(|(y, z)| (y - z).powi(2)).sum())
}

/// Second differences no larger than a few ulps of the curve's magnitude.
fn is_affine(y: &[f64]) -> bool {
    let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 8.0 * f64::EPSILON * scale;
    y.windows(3).all(|w| (w[0] - 2.0 * w[1] + w[2]).abs() <= tol)
}

/// Per-model inputs to the superiority report, one value per fold.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ArmMetrics {
    pub test_r2: Vec<f64>,
    pub train_r2: Vec<f64>,
    pub instability: Vec<f64>,
}

/// A model compared under both encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelComparison {
    pub model: String,
    pub study: ArmMetrics,
    pub control: ArmMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub metric: String,
    pub result: BootstrapResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperiorityReport {
    pub rows: Vec<ReportRow>,
    pub resamples: usize,
    pub seed: u64,
}

pub const REPORT_HEADER: &str = "model,metric,mean_diff,ci_low,ci_high,p_one_sided,conclusion";

/// Tests test R², train R² (higher is better) and instability (lower is
/// better) for every model. Each row uses its own bootstrap stream.
pub fn superiority_report(models: &[ModelComparison], resamples: usize, seed: u64) -> Result<SuperiorityReport> {
    let mut rows = Vec::new();
    for (mi, m) in models.iter().enumerate() {
        let metrics: [(&str, &[f64], &[f64], Direction); 3] = [
            ("Test R²", &m.study.test_r2, &m.control.test_r2, Direction::StudyGreater),
            (
                "Train R²",
                &m.study.train_r2,
                &m.control.train_r2,
                Direction::StudyGreater,
            ),
            (
                "Instability",
                &m.study.instability,
                &m.control.instability,
                Direction::StudyLess,
            ),
        ];
        for (ki, (name, s, c, dir)) in metrics.into_iter().enumerate() {
            if s.is_empty() || c.is_empty() {
                return Err(Error::Incomplete(format!(
                    "{}: no {name} values for one of the arms",
                    m.model
                )));
            }
            let row_seed = crate::rng::derive_u64(seed, &["report".into(), mi.into(), ki.into()]);
            let result = bootstrap_mean_diff(s, c, resamples, row_seed, dir)?;
            rows.push(ReportRow {
                model: m.model.clone(),
                metric: name.to_string(),
                result,
            });
        }
    }
    Ok(SuperiorityReport { rows, resamples, seed })
}

impl SuperiorityReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            let b = &r.result;
            writeln!(
                s,
                "{},{},{:.5},{:.5},{:.5},{},{}",
                r.model,
                r.metric,
                b.mean_diff,
                b.ci_low,
                b.ci_high,
                b.p_text(),
                b.conclusion()
            )
            .expect("string write");
        }
        s
    }

    /// Aligned plain-text table with the same columns.
    pub fn to_text(&self) -> String {
        let header = ["Model", "Metric", "Mean diff", "95% CI", "p (one-sided)", "Conclusion"];
        let mut table: Vec<[String; 6]> = vec![header.map(String::from)];
        for r in &self.rows {
            let b = &r.result;
            table.push([
                r.model.clone(),
                r.metric.clone(),
                format!("{:.5}", b.mean_diff),
                format!("[{:.5}, {:.5}]", b.ci_low, b.ci_high),
                b.p_text(),
                b.conclusion().to_string(),
            ]);
        }
        let widths: Vec<usize> = (0..6)
            .map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in table.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, &w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                out.push_str(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
                out.push('\n');
            }
        }
        writeln!(out, "\nbootstrap resamples: {}, seed: {}", self.resamples, self.seed).expect("string write");
        out
    }
}

/// Builds per-model comparisons (intensity-weighted study arm against the
/// CoordConv control arm) from a complete training log. `network` names
/// the full model; reduced models get an "R.P." prefix.
pub fn comparisons_from_log(log: &TrainLog, network: &str, lambda: f64) -> Result<Vec<ModelComparison>> {
    let arms = log.arms();
    if arms.is_empty() {
        return Err(Error::Incomplete("training log has no rows".into()));
    }
    let folds = arms.iter().map(|a| log.folds(a).len()).max().unwrap_or(0);
    let epochs = log.rows.iter().map(|r| r.epoch).max().unwrap_or(0);
    for arm in &arms {
        log.check_complete(arm, folds, epochs)?;
    }
    let mut out = Vec::new();
    for variant in [Variant::Full, Variant::Reduced] {
        let study = Arm {
            encoding: EncodingKind::IntensityWeighted,
            variant,
        }
        .name();
        let control = Arm {
            encoding: EncodingKind::CoordConv,
            variant,
        }
        .name();
        match (arms.contains(&study), arms.contains(&control)) {
            (true, true) => {}
            (false, false) => continue,
            (has_study, _) => {
                let missing = if has_study { control } else { study };
                return Err(Error::Incomplete(format!("arm {missing} is missing from the log")));
            }
        }
        let metrics = |arm: &str| -> Result<ArmMetrics> {
            let instability = (0..folds)
                .map(|f| {
                    let curve: Vec<f64> = log.curve(arm, f).iter().map(|r| r.test_r2).collect();
                    instability_score(&curve, lambda)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ArmMetrics {
                test_r2: log.final_values(arm, |r| r.test_r2),
                train_r2: log.final_values(arm, |r| r.train_r2),
                instability,
            })
        };
        let model = match variant {
            Variant::Full => network.to_string(),
            Variant::Reduced => format!("R.P. {network}"),
        };
        out.push(ModelComparison {
            model,
            study: metrics(&study)?,
            control: metrics(&control)?,
        });
    }
    if out.is_empty() {
        return Err(Error::Incomplete(
            "no variant has both a coordconv and an intensity_weighted arm".into(),
        ));
    }
    Ok(out)
}
