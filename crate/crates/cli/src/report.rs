//! `report` command: superiority table and R² curve plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;

use coordloc::models::network_name;
use coordloc::stats::{comparisons_from_log, superiority_report, SuperiorityReport};
use coordloc::train::{ExperimentConfig, TrainLog, CONFIG_FILE, LOG_FILE};
use coordloc::{Error, Task};

pub struct ReportOptions {
    pub network: Option<String>,
    pub resamples: usize,
    pub seed: u64,
    pub lambda: f64,
    pub force: bool,
}

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";
pub const PLOT_SVG: &str = "r2_curves.svg";

fn log_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(LOG_FILE)
    } else {
        p.to_path_buf()
    }
}

/// Task of the run a log belongs to, read through its configuration.
fn task_of(log: &Path) -> Option<Task> {
    let cfg = log.parent()?.join(CONFIG_FILE);
    let cfg = ExperimentConfig::from_json(&std::fs::read_to_string(cfg).ok()?).ok()?;
    coordloc::train::dataset_task(&cfg.dataset).ok()
}

pub fn run(logs: &[PathBuf], out: &Path, opts: &ReportOptions) -> anyhow::Result<String> {
    if out.exists() && !opts.force {
        return Err(
            Error::InvalidArgument(format!("{} already exists (use --force to overwrite)", out.display())).into(),
        );
    }
    let mut log = TrainLog::default();
    let mut tasks = Vec::new();
    for p in logs {
        let path = log_path(p);
        if !path.is_file() {
            return Err(Error::Incomplete(format!("no training log at {}", path.display())).into());
        }
        log.rows.extend(TrainLog::read(&path)?.rows);
        tasks.extend(task_of(&path));
    }
    let network = match &opts.network {
        Some(n) => n.clone(),
        None => {
            tasks.dedup();
            match tasks[..] {
                [t] => network_name(t).to_string(),
                _ => {
                    log::warn!("could not determine the network from the run configuration; use --network");
                    "model".to_string()
                }
            }
        }
    };
    let comparisons = comparisons_from_log(&log, &network, opts.lambda)?;
    let report = superiority_report(&comparisons, opts.resamples, opts.seed)?;
    let text = render_text(&report, &comparisons);
    let svg = render_svg(&log, &format!("{network}: mean R² per epoch (band: fold range)"));

    let staging = out.with_file_name(format!(
        ".{}.partial",
        out.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    ));
    if staging.exists() {
        std::fs::remove_dir_all(&staging)?;
    }
    std::fs::create_dir_all(&staging).with_context(|| format!("creating {}", staging.display()))?;
    std::fs::write(staging.join(REPORT_CSV), report.to_csv())?;
    std::fs::write(staging.join(REPORT_TXT), &text)?;
    std::fs::write(staging.join(PLOT_SVG), svg)?;
    if out.exists() {
        std::fs::remove_dir_all(out).with_context(|| format!("removing {}", out.display()))?;
    }
    std::fs::rename(&staging, out).with_context(|| format!("creating {}", out.display()))?;
    Ok(format!(
        "{text}\nwrote {}, {} and {} to {}\n",
        REPORT_CSV,
        REPORT_TXT,
        PLOT_SVG,
        out.display()
    ))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn render_text(report: &SuperiorityReport, comparisons: &[coordloc::stats::ModelComparison]) -> String {
    let mut s = String::new();
    writeln!(s, "Direction of mean final test R² (intensity_weighted vs coordconv):").unwrap();
    for c in comparisons {
        let (st, ct) = (mean(&c.study.test_r2), mean(&c.control.test_r2));
        let verdict = if st >= ct {
            "intensity-weighted >= CoordConv"
        } else {
            "intensity-weighted < CoordConv"
        };
        writeln!(s, "  {}: {st:.5} vs {ct:.5} -> {verdict}", c.model).unwrap();
    }
    s.push('\n');
    s.push_str(&report.to_text());
    s
}

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

/// One polyline per (arm, split) tracing the fold mean, over a band from
/// the fold minimum to maximum.
pub fn render_svg(log: &TrainLog, title: &str) -> String {
    let (w, h) = (900.0, 560.0);
    let (left, right, top, bottom) = (70.0, 230.0, 50.0, 60.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let arms = log.arms();
    let epochs = log.rows.iter().map(|r| r.epoch).max().unwrap_or(1).max(2);

    type Series = Vec<(usize, f64, f64, f64)>;
    let mut series: Vec<(String, &str, Series)> = Vec::new();
    for arm in &arms {
        for split in ["train", "test"] {
            let mut pts = Vec::new();
            for e in 1..=epochs {
                let vals: Vec<f64> = log
                    .rows
                    .iter()
                    .filter(|r| &r.arm == arm && r.epoch == e)
                    .map(|r| if split == "train" { r.train_r2 } else { r.test_r2 })
                    .filter(|v| v.is_finite())
                    .collect();
                if !vals.is_empty() {
                    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    pts.push((e, mean(&vals), lo, hi));
                }
            }
            series.push((arm.clone(), split, pts));
        }
    }
    let all = series.iter().flat_map(|s| s.2.iter().flat_map(|p| [p.2, p.3]));
    let mut ymin = all.clone().fold(0.0f64, f64::min);
    let ymax = 1.0f64.max(all.fold(f64::NEG_INFINITY, f64::max));
    ymin = (ymin * 10.0).floor() / 10.0;
    let x = |e: usize| left + pw * (e - 1) as f64 / (epochs - 1) as f64;
    let y = |v: f64| top + ph * (ymax - v) / (ymax - ymin);

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="28" text-anchor="middle" font-size="15">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    )
    .unwrap();
    writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    let ticks = 5;
    for i in 0..=ticks {
        let v = ymin + (ymax - ymin) * i as f64 / ticks as f64;
        let yy = y(v);
        writeln!(
            s,
            r##"<line x1="{left}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="#dddddd"/>"##,
            left + pw
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.2}</text>"#,
            left - 6.0,
            yy + 4.0
        )
        .unwrap();
    }
    for e in 1..=epochs {
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{e}</text>"#,
            x(e),
            top + ph + 18.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">epoch</text>"#,
        left + pw / 2.0,
        h - 18.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">R²</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    )
    .unwrap();

    for (i, (arm, split, pts)) in series.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let color = COLORS[(i / 2) % COLORS.len()];
        let mut band: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", x(p.0), y(p.3))).collect();
        band.extend(pts.iter().rev().map(|p| format!("{:.2},{:.2}", x(p.0), y(p.2))));
        writeln!(
            s,
            r#"<polygon points="{}" fill="{color}" fill-opacity="0.12" stroke="none"/>"#,
            band.join(" ")
        )
        .unwrap();
        let line: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", x(p.0), y(p.1))).collect();
        let dash = if *split == "train" {
            r#" stroke-dasharray="6 4""#
        } else {
            ""
        };
        writeln!(
            s,
            r#"<polyline data-arm="{arm}" data-split="{split}" points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
            line.join(" ")
        )
        .unwrap();
        let ly = top + 14.0 + 20.0 * i as f64;
        let lx = left + pw + 16.0;
        writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"{dash}/>"#,
            lx + 28.0
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">{} ({split})</text>"#,
            lx + 34.0,
            ly + 4.0,
            escape(arm)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
