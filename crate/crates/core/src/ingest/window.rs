//! Changepoint-centred ECG windows and their resampling to 500 samples.

use crate::augment::filter::{design_butterworth, FilterKind};
use crate::encode::{WINDOW_SAMPLES, WINDOW_SECONDS};
use crate::{Error, Result};

use super::EcgWindow;

/// Seconds of signal kept before an isolated changepoint.
pub const LEAD_IN_SECONDS: f64 = 10.0;
/// Anti-aliasing cut-off applied before decimating to 25 Hz.
pub const ANTI_ALIAS_HZ: f64 = 10.0;
pub const ANTI_ALIAS_ORDER: usize = 8;

/// Number of samples in a full window at `fs`.
pub fn window_len(fs: f64) -> usize {
    (WINDOW_SECONDS * fs).round() as usize
}

/// Cuts a two-lead window around `changepoint` (a sample index).
///
/// The window normally spans 10 s either side of the changepoint. When an
/// earlier changepoint falls within the preceding 10 s, the window starts
/// at the latest such changepoint instead. Portions outside the record are
/// zero-filled and excluded from `valid`.
pub fn extract_window(
    leads: &[Vec<f64>],
    fs: f64,
    changepoint: u64,
    prior_changepoints: &[u64],
    base_id: &str,
) -> Result<EcgWindow> {
    let [a, b] = leads else {
        return Err(Error::shape(format!("expected 2 leads, got {}", leads.len())));
    };
    let n_rec = a.len().min(b.len());
    if changepoint as usize >= n_rec {
        return Err(Error::invalid(format!(
            "changepoint {changepoint} lies outside the record ({n_rec} samples)"
        )));
    }
    let len = window_len(fs);
    let lead_in = (LEAD_IN_SECONDS * fs).round() as i64;
    let cp = changepoint as i64;
    let prior = prior_changepoints
        .iter()
        .map(|&p| p as i64)
        .filter(|&p| p < cp && p > cp - lead_in)
        .max();
    let start = prior.unwrap_or(cp - lead_in);
    let label = (cp - start) as f64 / fs;
    if prior.is_some() {
        log::debug!(
            "{base_id}: changepoint at {cp} has an earlier one at {start}; label {label:.3} s (centred alternative {LEAD_IN_SECONDS:.3} s)"
        );
    }
    if !(0.0..=WINDOW_SECONDS).contains(&label) {
        return Err(Error::invalid(format!("{base_id}: label {label} s outside the window")));
    }

    let mut signal = [vec![0.0; len], vec![0.0; len]];
    let lo = start.max(0);
    let hi = (start + len as i64).min(n_rec as i64);
    for (dst, src) in signal.iter_mut().zip([a, b]) {
        for t in lo..hi {
            dst[(t - start) as usize] = src[t as usize];
        }
    }
    let valid = if hi > lo {
        ((lo - start) as usize, (hi - start) as usize)
    } else {
        (0, 0)
    };
    Ok(EcgWindow {
        signal,
        fs,
        changepoint_s: label,
        base_id: base_id.to_string(),
        augment_index: 0,
        valid,
    })
}

/// Zero-phase low-pass filters a 20 s window and decimates it to 500
/// samples (25 Hz). The label is unchanged.
pub fn resample_window(window: &EcgWindow) -> Result<EcgWindow> {
    let fs = window.fs;
    let target_fs = WINDOW_SAMPLES as f64 / WINDOW_SECONDS;
    if fs < target_fs {
        return Err(Error::invalid(format!("sample rate {fs} Hz is below {target_fs} Hz")));
    }
    let n = window_len(fs);
    if window.signal.iter().any(|l| l.len() != n) {
        return Err(Error::shape(format!(
            "window holds {} samples, expected {n} for 20 s at {fs} Hz",
            window.signal[0].len()
        )));
    }
    let step = fs / target_fs;
    let lp = design_butterworth(FilterKind::Lowpass { cutoff: ANTI_ALIAS_HZ }, ANTI_ALIAS_ORDER, fs)?;
    let mut signal = [Vec::new(), Vec::new()];
    for (dst, src) in signal.iter_mut().zip(&window.signal) {
        let smooth = lp.filtfilt(src)?;
        *dst = (0..WINDOW_SAMPLES)
            .map(|k| {
                let pos = k as f64 * step;
                let i = (pos.floor() as usize).min(n - 1);
                let f = pos - i as f64;
                if f == 0.0 || i + 1 >= n {
                    smooth[i]
                } else {
                    smooth[i] * (1.0 - f) + smooth[i + 1] * f
                }
            })
            .collect();
    }
    let map = |s: usize| ((s as f64 / step).ceil() as usize).min(WINDOW_SAMPLES);
    let valid = (map(window.valid.0), map(window.valid.1).max(map(window.valid.0)));
    Ok(EcgWindow {
        signal,
        fs: target_fs,
        changepoint_s: window.changepoint_s,
        base_id: window.base_id.clone(),
        augment_index: window.augment_index,
        valid,
    })
}
