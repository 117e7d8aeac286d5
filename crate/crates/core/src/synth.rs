//! Synthetic datasets with exact ground truth.
//!
//! Images show a bright anti-aliased ellipse on a textured background; the
//! target is the analytic ellipse centre. ECG windows switch from a slow
//! Gaussian pulse train to a 4-7 Hz oscillation at a known time.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_ecg, augment_image, AffineRanges, EcgAugmentConfig};
use crate::encode::{IMAGE_EXTENT, WINDOW_SECONDS};
use crate::ingest::{normalize_image, resample_window, window_len, DatasetWriter, EcgWindow, ImageSample, Task};
use crate::rng::{stream, StreamRng};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Raw sample rate of synthetic ECG windows.
pub const SYNTH_FS: f64 = 250.0;
/// Sub-pixel grid used for anti-aliasing.
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipseSpec {
    /// Centre `(x, y)` in pixels.
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub rotation: f64,
    pub foreground: [f64; 3],
    pub background: [f64; 3],
    /// Amplitude, wave vector and phase of the background ripple.
    pub texture: (f64, (f64, f64), f64),
    pub noise_std: f64,
}

impl EllipseSpec {
    pub fn random(rng: &mut StreamRng) -> Self {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let center = (u(64.0, 192.0), u(64.0, 192.0));
        let semi_axes = (u(10.0, 60.0), u(10.0, 60.0));
        let rotation = u(0.0, PI);
        let background = [u(60.0, 110.0), u(50.0, 100.0), u(70.0, 120.0)];
        let foreground = [u(170.0, 230.0), u(150.0, 220.0), u(170.0, 240.0)];
        let angle = u(0.0, 2.0 * PI);
        let k = u(0.02, 0.08);
        let texture = (u(5.0, 15.0), (k * angle.cos(), k * angle.sin()), u(0.0, 2.0 * PI));
        let noise_std = u(2.0, 8.0);
        EllipseSpec {
            center,
            semi_axes,
            rotation,
            foreground,
            background,
            texture,
            noise_std,
        }
    }

    fn inside(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (c, s) = (self.rotation.cos(), self.rotation.sin());
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.semi_axes.0).powi(2) + (v / self.semi_axes.1).powi(2) <= 1.0
    }
}

/// Fractional ellipse coverage of each pixel (pixel centres at integer
/// coordinates), row-major `h x w`.
pub fn render_ellipse_mask(spec: &EllipseSpec, h: usize, w: usize) -> Vec<f64> {
    let mut mask = vec![0.0; h * w];
    let r = spec.semi_axes.0.max(spec.semi_axes.1) + 1.0;
    let rows =
        ((spec.center.1 - r).floor().max(0.0) as usize)..((spec.center.1 + r).ceil().min(h as f64 - 1.0) as usize + 1);
    let cols =
        ((spec.center.0 - r).floor().max(0.0) as usize)..((spec.center.0 + r).ceil().min(w as f64 - 1.0) as usize + 1);
    let step = 1.0 / SUPERSAMPLE as f64;
    let norm = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for i in rows {
        for j in cols.clone() {
            let mut hits = 0;
            for a in 0..SUPERSAMPLE {
                for b in 0..SUPERSAMPLE {
                    let y = i as f64 - 0.5 + (a as f64 + 0.5) * step;
                    let x = j as f64 - 0.5 + (b as f64 + 0.5) * step;
                    hits += spec.inside(x, y) as usize;
                }
            }
            mask[i * w + j] = hits as f64 * norm;
        }
    }
    mask
}

/// Renders the raw RGB image (values roughly in `[0, 255]`).
pub fn render_ellipse(spec: &EllipseSpec, rng: &mut StreamRng) -> Result<Tensor<f32>> {
    let n = IMAGE_EXTENT;
    let mask = render_ellipse_mask(spec, n, n);
    let (amp, (kx, ky), phase) = spec.texture;
    let noise = if spec.noise_std > 0.0 {
        Some(Normal::new(0.0, spec.noise_std).map_err(|e| Error::invalid(e.to_string()))?)
    } else {
        None
    };
    let mut data = vec![0.0f32; 3 * n * n];
    for c in 0..3 {
        for i in 0..n {
            for j in 0..n {
                let p = i * n + j;
                let bg = spec.background[c] + amp * (kx * j as f64 + ky * i as f64 + phase).sin();
                let mut v = bg * (1.0 - mask[p]) + spec.foreground[c] * mask[p];
                if let Some(d) = &noise {
                    v += d.sample(rng);
                }
                data[c * n * n + p] = v as f32;
            }
        }
    }
    Tensor::new(vec![3, n, n], data)
}

/// A normalised synthetic image whose target is the ellipse centre.
pub fn gen_ellipse_sample(rng: &mut StreamRng, base_id: &str) -> Result<(ImageSample, EllipseSpec)> {
    let spec = EllipseSpec::random(rng);
    let raw = render_ellipse(&spec, rng)?;
    let pixels = normalize_image(&raw)?.pixels;
    let sample = ImageSample {
        pixels,
        center: [spec.center.0, spec.center.1],
        base_id: base_id.to_string(),
        augment_index: 0,
    };
    Ok((sample, spec))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthEcgSpec {
    pub changepoint_s: f64,
    pub beat_rate_hz: f64,
    pub beat_phase_s: f64,
    pub pulse_width_s: f64,
    pub pulse_amp: f64,
    pub osc_freq_hz: f64,
    pub osc_amp: f64,
    pub osc_phase: f64,
    pub lead2_gain: f64,
    pub lead2_delay_s: f64,
    pub lead2_offset: f64,
    pub noise_std: f64,
}

impl SynthEcgSpec {
    pub fn random(rng: &mut StreamRng) -> Self {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let beat_rate_hz = u(1.0, 1.5);
        let pulse_amp = u(0.8, 1.2);
        SynthEcgSpec {
            changepoint_s: u(2.0, 18.0),
            beat_rate_hz,
            beat_phase_s: u(0.0, 1.0 / beat_rate_hz),
            pulse_width_s: u(0.05, 0.07),
            pulse_amp,
            osc_freq_hz: u(4.0, 7.0),
            osc_amp: pulse_amp * u(0.4, 0.8),
            osc_phase: u(0.0, 2.0 * PI),
            lead2_gain: u(0.5, 0.9),
            lead2_delay_s: u(0.0, 0.04),
            lead2_offset: u(-0.1, 0.1),
            noise_std: u(0.01, 0.05),
        }
    }

    /// Noise-free lead-1 value at time `t`.
    pub fn clean(&self, t: f64) -> f64 {
        if t < self.changepoint_s {
            let period = 1.0 / self.beat_rate_hz;
            let k = ((t - self.beat_phase_s) / period).round();
            // the two nearest pulses carry all the visible energy
            [k - 1.0, k, k + 1.0]
                .iter()
                .map(|&j| self.beat_phase_s + j * period)
                .filter(|&c| c < self.changepoint_s)
                .map(|c| self.pulse_amp * (-(t - c).powi(2) / (2.0 * self.pulse_width_s.powi(2))).exp())
                .sum()
        } else {
            self.osc_amp * (2.0 * PI * self.osc_freq_hz * (t - self.changepoint_s) + self.osc_phase).sin()
        }
    }
}

/// A raw (250 Hz) synthetic two-lead window and its generating spec.
pub fn gen_ecg_raw(rng: &mut StreamRng, base_id: &str) -> Result<(EcgWindow, SynthEcgSpec)> {
    let spec = SynthEcgSpec::random(rng);
    let fs = SYNTH_FS;
    let n = window_len(fs);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / fs;
        a.push(spec.clean(t) + noise.sample(rng));
        b.push(spec.lead2_gain * spec.clean(t - spec.lead2_delay_s) + spec.lead2_offset + noise.sample(rng));
    }
    let window = EcgWindow {
        signal: [a, b],
        fs,
        changepoint_s: spec.changepoint_s,
        base_id: base_id.to_string(),
        augment_index: 0,
        valid: (0, n),
    };
    debug_assert!(spec.changepoint_s <= WINDOW_SECONDS);
    Ok((window, spec))
}

/// A synthetic window resampled to 500 samples.
pub fn gen_ecg_sample(rng: &mut StreamRng, base_id: &str) -> Result<(EcgWindow, SynthEcgSpec)> {
    let (raw, spec) = gen_ecg_raw(rng, base_id)?;
    Ok((resample_window(&raw)?, spec))
}

/// Summary of a generated container.
#[derive(Debug, Clone, PartialEq)]
pub struct GenSummary {
    pub path: PathBuf,
    pub count: usize,
}

/// Bases generated and written per batch; bounds peak memory.
const GEN_CHUNK: usize = 8;

/// Generates `n_base` originals plus `augment_count` variants of each and
/// writes them to a container at `out`.
pub fn gen_dataset(
    task: Task,
    n_base: usize,
    augment_count: usize,
    seed: u64,
    out: &Path,
    force: bool,
) -> Result<GenSummary> {
    if n_base < 5 {
        return Err(Error::invalid(format!(
            "need at least 5 base samples for 5-fold grouping, got {n_base}"
        )));
    }
    let mut writer = DatasetWriter::create(out, task, force)?;
    let ids: Vec<usize> = (0..n_base).collect();
    for chunk in ids.chunks(GEN_CHUNK) {
        match task {
            Task::Image => {
                let batches: Vec<Result<Vec<ImageSample>>> = chunk
                    .par_iter()
                    .map(|&i| {
                        let id = format!("img{i:05}");
                        let mut rng = stream(seed, &["synth".into(), "image".into(), i.into()]);
                        let (base, _) = gen_ellipse_sample(&mut rng, &id)?;
                        let mut all = vec![base.clone()];
                        all.extend(augment_image(&base, augment_count, &AffineRanges::default(), seed)?);
                        Ok(all)
                    })
                    .collect();
                for b in batches {
                    for s in b? {
                        writer.push_image(&s)?;
                    }
                }
            }
            Task::Ecg => {
                let batches: Vec<Result<Vec<EcgWindow>>> = chunk
                    .par_iter()
                    .map(|&i| {
                        let id = format!("ecg{i:05}");
                        let mut rng = stream(seed, &["synth".into(), "ecg".into(), i.into()]);
                        let (raw, _) = gen_ecg_raw(&mut rng, &id)?;
                        let mut all = vec![resample_window(&raw)?];
                        for v in augment_ecg(&raw, augment_count, &EcgAugmentConfig::default(), seed)? {
                            all.push(resample_window(&v)?);
                        }
                        Ok(all)
                    })
                    .collect();
                for b in batches {
                    for w in b? {
                        writer.push_ecg(&w)?;
                    }
                }
            }
        }
    }
    let count = writer.len();
    let path = writer.finish()?;
    Ok(GenSummary { path, count })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn mask_centroid_matches_centre() {
        let mut rng = StreamRng::seed_from_u64(4);
        for _ in 0..10 {
            let spec = EllipseSpec::random(&mut rng);
            let m = render_ellipse_mask(&spec, 256, 256);
            let total: f64 = m.iter().sum();
            let cx = m.iter().enumerate().map(|(p, v)| (p % 256) as f64 * v).sum::<f64>() / total;
            let cy = m.iter().enumerate().map(|(p, v)| (p / 256) as f64 * v).sum::<f64>() / total;
            assert!((cx - spec.center.0).abs() < 0.5 && (cy - spec.center.1).abs() < 0.5);
        }
    }

    #[test]
    fn axis_aligned_ellipse_is_symmetric() {
        let spec = EllipseSpec {
            center: (128.0, 100.0),
            semi_axes: (30.0, 18.0),
            rotation: 0.0,
            foreground: [200.0; 3],
            background: [80.0; 3],
            texture: (0.0, (0.0, 0.0), 0.0),
            noise_std: 0.0,
        };
        let m = render_ellipse_mask(&spec, 256, 256);
        for i in 0..256usize {
            for j in 0..256usize {
                let mi = 200 - i as i64;
                let mj = 256 - j as i64;
                if (0..256).contains(&mi) && (0..256).contains(&mj) {
                    assert_eq!(m[i * 256 + j], m[mi as usize * 256 + mj as usize]);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_sample() {
        let a = gen_ellipse_sample(&mut StreamRng::seed_from_u64(2), "a").unwrap();
        let b = gen_ellipse_sample(&mut StreamRng::seed_from_u64(2), "a").unwrap();
        assert_eq!(a, b);
        let a = gen_ecg_sample(&mut StreamRng::seed_from_u64(2), "e").unwrap();
        let b = gen_ecg_sample(&mut StreamRng::seed_from_u64(2), "e").unwrap();
        assert_eq!(a, b);
        assert!((2.0..=18.0).contains(&a.1.changepoint_s));
        assert_eq!(a.0.signal[0].len(), 500);
    }
}
