//! Data augmentation.
//!
//! Images receive random scale/rotation/translation about the frame centre
//! with the target mapped through the same transform. ECG windows go
//! through shift, patch zeroing, noise, baseline wander, filtering and
//! amplitude scaling, in that order, at their original sample rate.
//!
//! Each variant draws from its own stream derived from
//! `(seed, base_id, augment_index)`, so results do not depend on thread
//! scheduling.

pub mod filter;

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encode::WINDOW_SECONDS;
use crate::ingest::{EcgWindow, ImageSample};
use crate::rng::{stream, StreamRng};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub use filter::{design_butterworth, FilterDesign, FilterKind, IirFilter, Sos};

/// Attempts made to draw parameters satisfying a constraint.
pub const MAX_ATTEMPTS: usize = 100;

/// Sampling ranges for [`random_affine`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineRanges {
    pub scale: (f64, f64),
    pub rotation_deg: (f64, f64),
    pub translate_px: (f64, f64),
}

impl Default for AffineRanges {
    fn default() -> Self {
        AffineRanges {
            scale: (0.9, 1.1),
            rotation_deg: (-15.0, 15.0),
            translate_px: (-20.0, 20.0),
        }
    }
}

/// Similarity transform about the image centre:
/// `p' = c + scale * R(rotation) * (p - c) + translate`, with points as
/// `(x, y)` = (column, row).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub scale: f64,
    pub rotation: f64,
    pub translate: (f64, f64),
}

impl AffineParams {
    pub fn identity() -> Self {
        AffineParams {
            scale: 1.0,
            rotation: 0.0,
            translate: (0.0, 0.0),
        }
    }

    fn forward(&self, c: (f64, f64), p: (f64, f64)) -> (f64, f64) {
        let (s, r) = (self.scale, self.rotation);
        let (dx, dy) = (p.0 - c.0, p.1 - c.1);
        (
            c.0 + s * (r.cos() * dx - r.sin() * dy) + self.translate.0,
            c.1 + s * (r.sin() * dx + r.cos() * dy) + self.translate.1,
        )
    }

    fn inverse(&self, c: (f64, f64), q: (f64, f64)) -> (f64, f64) {
        let (s, r) = (self.scale, self.rotation);
        let (dx, dy) = ((q.0 - c.0 - self.translate.0) / s, (q.1 - c.1 - self.translate.1) / s);
        (c.0 + r.cos() * dx + r.sin() * dy, c.1 - r.sin() * dx + r.cos() * dy)
    }
}

fn sample_zero_fill(plane: &[f32], h: usize, w: usize, x: f64, y: f64) -> f32 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let mut acc = 0.0f64;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let (xi, yi) = (x0 + dx, y0 + dy);
            if wx * wy == 0.0 || xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
                continue;
            }
            acc += wx * wy * plane[yi as usize * w + xi as usize] as f64;
        }
    }
    acc as f32
}

/// Warps the pixels and maps the target. Returns `None` when the target
/// leaves the frame.
pub fn apply_affine(sample: &ImageSample, params: &AffineParams) -> Result<Option<ImageSample>> {
    let &[3, h, w] = sample.pixels.shape() else {
        return Err(Error::shape(format!(
            "expected a 3xHxW image, got {:?}",
            sample.pixels.shape()
        )));
    };
    if !(params.scale > 0.0) {
        return Err(Error::invalid(format!("scale must be positive, got {}", params.scale)));
    }
    let c = (w as f64 / 2.0, h as f64 / 2.0);
    let (tx, ty) = params.forward(c, (sample.center[0], sample.center[1]));
    if !(tx >= 0.0 && ty >= 0.0 && tx < w as f64 && ty < h as f64) {
        return Ok(None);
    }
    let mut out = vec![0.0f32; 3 * h * w];
    for (dst, src) in out
        .chunks_exact_mut(h * w)
        .zip(sample.pixels.data().chunks_exact(h * w))
    {
        for i in 0..h {
            for j in 0..w {
                let (x, y) = params.inverse(c, (j as f64, i as f64));
                dst[i * w + j] = sample_zero_fill(src, h, w, x, y);
            }
        }
    }
    let max = (w.min(h) - 1) as f64;
    Ok(Some(ImageSample {
        pixels: Tensor::new(vec![3, h, w], out)?,
        center: [tx.min(max), ty.min(max)],
        base_id: sample.base_id.clone(),
        augment_index: sample.augment_index,
    }))
}

fn uniform(rng: &mut StreamRng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draws transforms until the target stays in frame. `None` after
/// [`MAX_ATTEMPTS`] failures.
pub fn random_affine(
    sample: &ImageSample,
    ranges: &AffineRanges,
    rng: &mut StreamRng,
) -> Result<Option<(ImageSample, AffineParams)>> {
    for _ in 0..MAX_ATTEMPTS {
        let params = AffineParams {
            scale: uniform(rng, ranges.scale),
            rotation: uniform(rng, ranges.rotation_deg).to_radians(),
            translate: (uniform(rng, ranges.translate_px), uniform(rng, ranges.translate_px)),
        };
        if let Some(s) = apply_affine(sample, &params)? {
            return Ok(Some((s, params)));
        }
    }
    Ok(None)
}

/// Produces up to `count` variants with `augment_index` 1..=count.
pub fn augment_image(sample: &ImageSample, count: usize, ranges: &AffineRanges, seed: u64) -> Result<Vec<ImageSample>> {
    let variants: Vec<Result<Option<ImageSample>>> = (1..=count)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(
                seed,
                &["augment-image".into(), sample.base_id.as_str().into(), k.into()],
            );
            Ok(random_affine(sample, ranges, &mut rng)?.map(|(mut s, _)| {
                s.augment_index = k as u32;
                s
            }))
        })
        .collect();
    let mut out = Vec::with_capacity(count);
    for (k, v) in variants.into_iter().enumerate() {
        match v? {
            Some(s) => out.push(s),
            None => log::warn!(
                "{}: variant {} skipped, target left the frame in every attempt",
                sample.base_id,
                k + 1
            ),
        }
    }
    Ok(out)
}

/// Ranges for the ECG perturbation stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcgAugmentConfig {
    pub max_shift_s: f64,
    pub patch_duration_s: (f64, f64),
    /// Half-width of the protected interval around the changepoint.
    pub guard_s: f64,
    pub noise_frac: (f64, f64),
    pub wander_freq_hz: (f64, f64),
    pub wander_amp_frac: (f64, f64),
    /// Use one wander phase for both leads.
    pub shared_wander_phase: bool,
    pub lowpass_hz: (f64, f64),
    pub highpass_hz: (f64, f64),
    pub bandpass_hz: (f64, f64),
    pub filter_order: usize,
    pub amplitude_scale: (f64, f64),
}

impl Default for EcgAugmentConfig {
    fn default() -> Self {
        EcgAugmentConfig {
            max_shift_s: 5.0,
            patch_duration_s: (1.0, 2.0),
            guard_s: 1.0,
            noise_frac: (0.01, 0.05),
            wander_freq_hz: (0.1, 0.5),
            wander_amp_frac: (0.01, 0.05),
            shared_wander_phase: true,
            lowpass_hz: (30.0, 50.0),
            highpass_hz: (0.5, 2.0),
            bandpass_hz: (0.5, 50.0),
            filter_order: 4,
            amplitude_scale: (0.8, 1.2),
        }
    }
}

/// Parameters drawn for one ECG variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcgAugmentParams {
    pub shift_s: f64,
    /// `(start_s, duration_s)`, absent when no placement was found.
    pub patch: Option<(f64, f64)>,
    pub noise_frac: f64,
    pub wander_freq_hz: f64,
    pub wander_amp_frac: f64,
    pub wander_phase: [f64; 2],
    pub filter: FilterKind,
    pub amplitude_scale: f64,
}

fn lead_range(x: &[f64]) -> f64 {
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if x.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

/// Shifts the window by `shift_s` (rounded to whole samples), zero-filling
/// the vacated part. Fails if the label would leave `[0, 20]`.
pub fn temporal_shift(window: &EcgWindow, shift_s: f64) -> Result<EcgWindow> {
    let k = (shift_s * window.fs).round() as i64;
    let label = window.changepoint_s + k as f64 / window.fs;
    if !(0.0..=WINDOW_SECONDS).contains(&label) {
        return Err(Error::invalid(format!(
            "shift of {shift_s} s moves the label to {label} s"
        )));
    }
    let n = window.len() as i64;
    let mut out = window.clone();
    for (dst, src) in out.signal.iter_mut().zip(&window.signal) {
        for (t, v) in dst.iter_mut().enumerate() {
            let s = t as i64 - k;
            *v = if (0..n).contains(&s) { src[s as usize] } else { 0.0 };
        }
    }
    let lo = (window.valid.0 as i64 + k).clamp(0, n) as usize;
    let hi = (window.valid.1 as i64 + k).clamp(0, n) as usize;
    out.valid = (lo, hi.max(lo));
    out.changepoint_s = label;
    Ok(out)
}

/// Zeroes both leads on `[start_s, start_s + duration_s)`. The patch must
/// lie inside the window and avoid `changepoint ± guard_s`.
pub fn zero_patch(window: &EcgWindow, start_s: f64, duration_s: f64, guard_s: f64) -> Result<EcgWindow> {
    let end = start_s + duration_s;
    let span = window.len() as f64 / window.fs;
    if start_s < 0.0 || end > span || duration_s <= 0.0 {
        return Err(Error::invalid(format!(
            "patch [{start_s}, {end}) s does not fit the window"
        )));
    }
    let cp = window.changepoint_s;
    if start_s <= cp + guard_s && end >= cp - guard_s {
        return Err(Error::invalid(format!(
            "patch [{start_s}, {end}) s overlaps the changepoint at {cp} s"
        )));
    }
    let a = (start_s * window.fs).round() as usize;
    let b = ((end * window.fs).round() as usize).min(window.len());
    let mut out = window.clone();
    for lead in out.signal.iter_mut() {
        lead[a..b].fill(0.0);
    }
    Ok(out)
}

/// Adds Gaussian noise with standard deviation `frac` times each lead's
/// range. Constant leads are left alone.
pub fn add_noise(window: &EcgWindow, frac: f64, rng: &mut StreamRng) -> Result<EcgWindow> {
    let mut out = window.clone();
    for lead in out.signal.iter_mut() {
        let std = frac * lead_range(lead);
        if std <= 0.0 {
            continue;
        }
        let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        for v in lead.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    Ok(out)
}

/// Adds `amp * sin(2 pi f t + phase)` with `amp = amp_frac * lead range`.
pub fn add_baseline_wander(window: &EcgWindow, freq: f64, amp_frac: f64, phase: [f64; 2]) -> EcgWindow {
    let mut out = window.clone();
    for (lead, phi) in out.signal.iter_mut().zip(phase) {
        let amp = amp_frac * lead_range(lead);
        if amp == 0.0 {
            continue;
        }
        for (t, v) in lead.iter_mut().enumerate() {
            *v += amp * (2.0 * PI * freq * t as f64 / window.fs + phi).sin();
        }
    }
    out
}

/// Causal filtering of both leads.
pub fn apply_filter(window: &EcgWindow, filter: &IirFilter) -> Result<EcgWindow> {
    let mut out = window.clone();
    for lead in out.signal.iter_mut() {
        *lead = filter.filter(lead)?;
    }
    Ok(out)
}

pub fn amplitude_scale(window: &EcgWindow, factor: f64) -> EcgWindow {
    let mut out = window.clone();
    for v in out.signal.iter_mut().flatten() {
        *v *= factor;
    }
    out
}

/// Runs the full six-step stack once with freshly drawn parameters.
pub fn augment_ecg_variant(
    window: &EcgWindow,
    cfg: &EcgAugmentConfig,
    rng: &mut StreamRng,
) -> Result<(EcgWindow, EcgAugmentParams)> {
    let mut shift_s = 0.0;
    let mut w = None;
    for _ in 0..MAX_ATTEMPTS {
        let s = uniform(rng, (-cfg.max_shift_s, cfg.max_shift_s));
        if let Ok(shifted) = temporal_shift(window, s) {
            shift_s = s;
            w = Some(shifted);
            break;
        }
    }
    let mut w = match w {
        Some(w) => w,
        None => {
            log::warn!("{}: no valid shift found, keeping the window in place", window.base_id);
            window.clone()
        }
    };

    let span = w.len() as f64 / w.fs;
    let mut patch = None;
    for _ in 0..MAX_ATTEMPTS {
        let dur = uniform(rng, cfg.patch_duration_s);
        let start = uniform(rng, (0.0, (span - dur).max(0.0)));
        if let Ok(p) = zero_patch(&w, start, dur, cfg.guard_s) {
            w = p;
            patch = Some((start, dur));
            break;
        }
    }
    if patch.is_none() {
        log::warn!(
            "{}: no patch placement avoids the changepoint, step skipped",
            window.base_id
        );
    }

    let noise_frac = uniform(rng, cfg.noise_frac);
    w = add_noise(&w, noise_frac, rng)?;

    let freq = uniform(rng, cfg.wander_freq_hz);
    let amp = uniform(rng, cfg.wander_amp_frac);
    let p0 = rng.random_range(0.0..2.0 * PI);
    let p1 = if cfg.shared_wander_phase {
        p0
    } else {
        rng.random_range(0.0..2.0 * PI)
    };
    w = add_baseline_wander(&w, freq, amp, [p0, p1]);

    let kind = match rng.random_range(0..3u8) {
        0 => FilterKind::Lowpass {
            cutoff: uniform(rng, cfg.lowpass_hz),
        },
        1 => FilterKind::Highpass {
            cutoff: uniform(rng, cfg.highpass_hz),
        },
        _ => FilterKind::Bandpass {
            low: cfg.bandpass_hz.0,
            high: cfg.bandpass_hz.1,
        },
    };
    w = apply_filter(&w, &design_butterworth(kind, cfg.filter_order, w.fs)?)?;

    let factor = uniform(rng, cfg.amplitude_scale);
    w = amplitude_scale(&w, factor);

    let params = EcgAugmentParams {
        shift_s,
        patch,
        noise_frac,
        wander_freq_hz: freq,
        wander_amp_frac: amp,
        wander_phase: [p0, p1],
        filter: kind,
        amplitude_scale: factor,
    };
    Ok((w, params))
}

/// Produces `count` variants with `augment_index` 1..=count.
pub fn augment_ecg(window: &EcgWindow, count: usize, cfg: &EcgAugmentConfig, seed: u64) -> Result<Vec<EcgWindow>> {
    (1..=count)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(seed, &["augment-ecg".into(), window.base_id.as_str().into(), k.into()]);
            let (mut w, _) = augment_ecg_variant(window, cfg, &mut rng)?;
            w.augment_index = k as u32;
            Ok(w)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn image_with_delta(x: usize, y: usize) -> ImageSample {
        let mut px = Tensor::<f32>::zeros(&[3, 256, 256]);
        for c in 0..3 {
            px.data_mut()[c * 65536 + y * 256 + x] = 1.0;
        }
        ImageSample {
            pixels: px,
            center: [x as f64, y as f64],
            base_id: "d".into(),
            augment_index: 0,
        }
    }

    fn argmax(s: &ImageSample) -> (f64, f64) {
        let plane = &s.pixels.data()[..65536];
        let i = (0..plane.len()).max_by(|&a, &b| plane[a].total_cmp(&plane[b])).unwrap();
        ((i % 256) as f64, (i / 256) as f64)
    }

    #[test]
    fn identity_and_translation() {
        let s = image_with_delta(100, 50);
        let out = apply_affine(&s, &AffineParams::identity()).unwrap().unwrap();
        assert_eq!(out, s);
        let t = AffineParams {
            translate: (10.0, -5.0),
            ..AffineParams::identity()
        };
        let out = apply_affine(&s, &t).unwrap().unwrap();
        assert_eq!(out.center, [110.0, 45.0]);
        assert_eq!(argmax(&out), (110.0, 45.0));
    }

    #[test]
    fn quarter_turn_about_centre() {
        let s = image_with_delta(192, 128);
        let r = AffineParams {
            rotation: PI / 2.0,
            ..AffineParams::identity()
        };
        let out = apply_affine(&s, &r).unwrap().unwrap();
        assert!((out.center[0] - 128.0).abs() < 1e-9 && (out.center[1] - 192.0).abs() < 1e-9);
        let (x, y) = argmax(&out);
        assert!((x - 128.0).abs() <= 1.0 && (y - 192.0).abs() <= 1.0);
    }

    #[test]
    fn out_of_frame_targets_are_rejected() {
        let s = image_with_delta(250, 10);
        let t = AffineParams {
            translate: (20.0, 0.0),
            ..AffineParams::identity()
        };
        assert!(apply_affine(&s, &t).unwrap().is_none());
    }

    fn window(label: f64) -> EcgWindow {
        let fs = 250.0;
        let n = 5000;
        EcgWindow {
            signal: [
                (0..n).map(|i| (i as f64 / 40.0).sin()).collect(),
                (0..n).map(|i| (i as f64 / 25.0).cos()).collect(),
            ],
            fs,
            changepoint_s: label,
            base_id: "w".into(),
            augment_index: 0,
            valid: (0, n),
        }
    }

    #[test]
    fn shifting() {
        let w = window(10.0);
        assert_eq!(temporal_shift(&w, 0.0).unwrap(), w);
        let s = temporal_shift(&w, 2.0).unwrap();
        assert_eq!(s.changepoint_s, 12.0);
        assert!(s.signal[0][..500].iter().all(|&v| v == 0.0));
        assert_eq!(s.signal[0][500], w.signal[0][0]);
        assert_eq!(s.valid, (500, 5000));
        assert!(temporal_shift(&window(4.0), -5.0).is_err());
    }

    #[test]
    fn patching() {
        let w = window(10.0);
        let p = zero_patch(&w, 2.0, 1.5, 1.0).unwrap();
        assert!(p.signal.iter().all(|l| l[500..875].iter().all(|&v| v == 0.0)));
        assert_eq!(p.signal[0][875], w.signal[0][875]);
        assert!(zero_patch(&w, 9.5, 1.5, 1.0).is_err());
    }

    #[test]
    fn wander_and_scale() {
        let w = window(10.0);
        assert_eq!(add_baseline_wander(&w, 0.3, 0.0, [0.0, 0.0]), w);
        assert_eq!(amplitude_scale(&w, 1.0), w);
        let s = amplitude_scale(&w, 1.2);
        assert_eq!(s.changepoint_s, 10.0);
        let mut flat = window(10.0);
        flat.signal[0] = vec![3.0; 5000];
        let mut rng = StreamRng::seed_from_u64(1);
        let noisy = add_noise(&flat, 0.05, &mut rng).unwrap();
        assert_eq!(noisy.signal[0], flat.signal[0]);
    }

    #[test]
    fn variants_keep_labels_in_range() {
        let w = window(1.5);
        let out = augment_ecg(&w, 20, &EcgAugmentConfig::default(), 9).unwrap();
        assert_eq!(out.len(), 20);
        for (k, v) in out.iter().enumerate() {
            assert_eq!(v.augment_index as usize, k + 1);
            assert!((0.0..=20.0).contains(&v.changepoint_s));
            assert_eq!(v.len(), 5000);
        }
        assert_eq!(out, augment_ecg(&w, 20, &EcgAugmentConfig::default(), 9).unwrap());
    }
}
