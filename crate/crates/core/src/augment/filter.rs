//! Butterworth IIR design as second-order sections, plus causal and
//! zero-phase filtering.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Filter response type with its cutoff frequencies in Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum FilterKind {
    Lowpass { cutoff: f64 },
    Highpass { cutoff: f64 },
    Bandpass { low: f64, high: f64 },
}

impl FilterKind {
    pub fn cutoffs(&self) -> Vec<f64> {
        match *self {
            FilterKind::Lowpass { cutoff } | FilterKind::Highpass { cutoff } => vec![cutoff],
            FilterKind::Bandpass { low, high } => vec![low, high],
        }
    }
}

/// Parameters a filter was designed from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterDesign {
    pub kind: FilterKind,
    pub order: usize,
    pub fs: f64,
}

/// One biquad `(b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sos {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Sos {
    pub fn identity() -> Self {
        Sos {
            b0: 1.0,
            b1: 0.0,
            b2: 0.0,
            a1: 0.0,
            a2: 0.0,
        }
    }

    /// Largest pole magnitude of the section.
    pub fn pole_radius(&self) -> f64 {
        let disc = Complex64::new(self.a1 * self.a1 - 4.0 * self.a2, 0.0).sqrt();
        let r1 = ((-self.a1 + disc) / 2.0).norm();
        let r2 = ((-self.a1 - disc) / 2.0).norm();
        r1.max(r2)
    }

    pub fn is_stable(&self) -> bool {
        self.pole_radius() < 1.0
    }

    fn response(&self, z: Complex64) -> Complex64 {
        let zi = z.inv();
        let num = self.b0 + zi * (self.b1 + zi * self.b2);
        let den = 1.0 + zi * (self.a1 + zi * self.a2);
        num / den
    }

    /// Steady-state delay-line contents for a unit constant input.
    fn unit_steady_state(&self) -> [f64; 2] {
        let g = (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2);
        let z2 = self.b2 - self.a2 * g;
        [g - self.b0, z2]
    }

    fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }
}

/// Cascade of second-order sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IirFilter {
    pub sections: Vec<Sos>,
    pub design: Option<FilterDesign>,
}

impl IirFilter {
    pub fn from_sections(sections: Vec<Sos>) -> Self {
        IirFilter { sections, design: None }
    }

    pub fn is_stable(&self) -> bool {
        self.sections.iter().all(Sos::is_stable)
    }

    /// Complex frequency response at `f` Hz for sample rate `fs`.
    pub fn response(&self, f: f64, fs: f64) -> Complex64 {
        let z = Complex64::from_polar(1.0, 2.0 * PI * f / fs);
        self.sections.iter().map(|s| s.response(z)).product()
    }

    /// Magnitude response in dB.
    pub fn gain_db(&self, f: f64, fs: f64) -> f64 {
        20.0 * self.response(f, fs).norm().log10()
    }

    fn check_stable(&self) -> Result<()> {
        match self.sections.iter().position(|s| !s.is_stable()) {
            Some(i) => Err(Error::invalid(format!("filter section {i} is unstable"))),
            None => Ok(()),
        }
    }

    /// Causal direct-form-II-transposed filtering from zero initial state.
    pub fn filter(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_stable()?;
        let mut y = x.to_vec();
        for s in &self.sections {
            run_section(s, &mut y, [0.0, 0.0]);
        }
        Ok(y)
    }

    /// Zero-phase forward-backward filtering.
    ///
    /// The signal is extended at both ends by odd reflection and each pass
    /// starts from the steady state matching its first sample.
    pub fn filtfilt(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_stable()?;
        let pad = 3 * (2 * self.sections.len() + 1);
        if x.len() <= pad {
            return Err(Error::invalid(format!(
                "signal of {} samples too short for zero-phase filtering (needs > {pad})",
                x.len()
            )));
        }
        let n = x.len();
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

        self.steady_pass(&mut ext);
        ext.reverse();
        self.steady_pass(&mut ext);
        ext.reverse();
        Ok(ext[pad..pad + n].to_vec())
    }

    fn steady_pass(&self, x: &mut [f64]) {
        let mut level = x[0];
        for s in &self.sections {
            let [z1, z2] = s.unit_steady_state();
            run_section(s, x, [z1 * level, z2 * level]);
            level *= s.dc_gain();
        }
    }
}

fn run_section(s: &Sos, x: &mut [f64], state: [f64; 2]) {
    let [mut z1, mut z2] = state;
    for v in x.iter_mut() {
        let input = *v;
        let out = s.b0 * input + z1;
        z1 = s.b1 * input - s.a1 * out + z2;
        z2 = s.b2 * input - s.a2 * out;
        *v = out;
    }
}

/// Designs an order-`order` Butterworth filter via the bilinear transform
/// with frequency pre-warping. Band-pass designs have twice the order.
pub fn design_butterworth(kind: FilterKind, order: usize, fs: f64) -> Result<IirFilter> {
    if order == 0 {
        return Err(Error::invalid("filter order must be at least 1"));
    }
    if !(fs > 0.0 && fs.is_finite()) {
        return Err(Error::invalid(format!("sample rate must be positive, got {fs}")));
    }
    let nyquist = fs / 2.0;
    for c in kind.cutoffs() {
        if !(c > 0.0 && c < nyquist) {
            return Err(Error::invalid(format!("cutoff {c} Hz must lie in (0, {nyquist}) Hz")));
        }
    }
    if let FilterKind::Bandpass { low, high } = kind {
        if low >= high {
            return Err(Error::invalid(format!(
                "band-pass edges must satisfy low < high, got {low} >= {high}"
            )));
        }
    }

    let k = 2.0 * fs;
    let warp = |f: f64| k * (PI * f / fs).tan();
    let proto: Vec<Complex64> = (0..order)
        .map(|i| Complex64::from_polar(1.0, PI * (2 * i + order + 1) as f64 / (2 * order) as f64))
        .collect();

    // analog poles plus the digital zero locations and the normalisation point
    let (analog, zero_pair, norm_z): (Vec<Complex64>, [f64; 2], Complex64) = match kind {
        FilterKind::Lowpass { cutoff } => {
            let w = warp(cutoff);
            (
                proto.iter().map(|p| p * w).collect(),
                [-1.0, -1.0],
                Complex64::new(1.0, 0.0),
            )
        }
        FilterKind::Highpass { cutoff } => {
            let w = warp(cutoff);
            (
                proto.iter().map(|p| w / p).collect(),
                [1.0, 1.0],
                Complex64::new(-1.0, 0.0),
            )
        }
        FilterKind::Bandpass { low, high } => {
            let (w1, w2) = (warp(low), warp(high));
            let w0 = (w1 * w2).sqrt();
            let bw = w2 - w1;
            let poles = proto
                .iter()
                .flat_map(|p| {
                    let half = p * bw / 2.0;
                    let root = (half * half - w0 * w0).sqrt();
                    [half + root, half - root]
                })
                .collect();
            let centre = 2.0 * (w0 / k).atan();
            (poles, [1.0, -1.0], Complex64::from_polar(1.0, centre))
        }
    };

    let digital: Vec<Complex64> = analog.iter().map(|s| (k + s) / (k - s)).collect();
    let mut sections = Vec::new();
    for (p1, p2) in pair_poles(digital) {
        // a single real pole gets a first-order section with one zero
        let (b, a) = match p2 {
            Some(p2) => (
                [1.0, -(zero_pair[0] + zero_pair[1]), zero_pair[0] * zero_pair[1]],
                [-(p1 + p2).re, (p1 * p2).re],
            ),
            None => ([1.0, -zero_pair[0], 0.0], [-p1.re, 0.0]),
        };
        let mut s = Sos {
            b0: b[0],
            b1: b[1],
            b2: b[2],
            a1: a[0],
            a2: a[1],
        };
        let g = s.response(norm_z).norm();
        s.b0 /= g;
        s.b1 /= g;
        s.b2 /= g;
        sections.push(s);
    }
    let filter = IirFilter {
        sections,
        design: Some(FilterDesign { kind, order, fs }),
    };
    filter.check_stable()?;
    Ok(filter)
}

/// Groups poles into conjugate pairs; leftover real poles are paired with
/// each other, and a final odd one stands alone.
fn pair_poles(poles: Vec<Complex64>) -> Vec<(Complex64, Option<Complex64>)> {
    const IMAG_TOL: f64 = 1e-12;
    let mut complex: Vec<Complex64> = poles.iter().copied().filter(|p| p.im > IMAG_TOL).collect();
    let mut real: Vec<Complex64> = poles
        .iter()
        .filter(|p| p.im.abs() <= IMAG_TOL)
        .map(|p| Complex64::new(p.re, 0.0))
        .collect();
    complex.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    real.sort_by(|a, b| a.re.total_cmp(&b.re));
    let mut out: Vec<_> = complex.into_iter().map(|p| (p, Some(p.conj()))).collect();
    let mut it = real.into_iter();
    while let Some(a) = it.next() {
        out.push((a, it.next()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp(fc: f64, order: usize, fs: f64) -> IirFilter {
        design_butterworth(FilterKind::Lowpass { cutoff: fc }, order, fs).unwrap()
    }

    #[test]
    fn lowpass_dc_and_cutoff() {
        let f = lp(40.0, 4, 250.0);
        assert_eq!(f.sections.len(), 2);
        assert!((f.response(0.0, 250.0).norm() - 1.0).abs() < 1e-9);
        assert!((f.gain_db(40.0, 250.0) + 3.0103).abs() < 0.1);
        // frequency warping steepens the digital roll-off relative to the analog prototype
        let analog = 20.0 * (1.0 / (1.0f64 + 2f64.powi(8)).sqrt()).log10();
        assert!(f.gain_db(80.0, 250.0) < analog);
    }

    #[test]
    fn analog_rolloff_at_low_frequencies() {
        // far below Nyquist the warping is negligible
        let f = lp(10.0, 4, 10_000.0);
        let expected = 20.0 * (1.0 / (1.0f64 + 2f64.powi(8)).sqrt()).log10();
        assert!((f.gain_db(20.0, 10_000.0) - expected).abs() < 0.5);
    }

    #[test]
    fn highpass_and_bandpass_edges() {
        let hp = design_butterworth(FilterKind::Highpass { cutoff: 1.0 }, 4, 250.0).unwrap();
        assert!((hp.response(125.0, 250.0).norm() - 1.0).abs() < 1e-9);
        assert!(hp.response(0.0, 250.0).norm() < 1e-9);
        assert!((hp.gain_db(1.0, 250.0) + 3.0103).abs() < 0.1);

        let bp = design_butterworth(FilterKind::Bandpass { low: 0.5, high: 50.0 }, 4, 250.0).unwrap();
        assert_eq!(bp.sections.len(), 4);
        assert!((bp.gain_db(0.5, 250.0) + 3.0103).abs() < 0.1);
        assert!((bp.gain_db(50.0, 250.0) + 3.0103).abs() < 0.1);
        assert!(bp.is_stable());
    }

    #[test]
    fn odd_orders() {
        for order in [1, 3, 5] {
            let f = lp(20.0, order, 250.0);
            assert_eq!(f.sections.len(), order.div_ceil(2));
            assert!((f.gain_db(20.0, 250.0) + 3.0103).abs() < 0.1);
        }
        let bp = design_butterworth(FilterKind::Bandpass { low: 5.0, high: 20.0 }, 3, 250.0).unwrap();
        assert!((bp.gain_db(5.0, 250.0) + 3.0103).abs() < 0.1);
        assert!((bp.gain_db(20.0, 250.0) + 3.0103).abs() < 0.1);
    }

    #[test]
    fn rejects_bad_cutoffs() {
        assert!(design_butterworth(FilterKind::Lowpass { cutoff: 125.0 }, 4, 250.0).is_err());
        assert!(design_butterworth(FilterKind::Bandpass { low: 20.0, high: 10.0 }, 4, 250.0).is_err());
        assert!(design_butterworth(FilterKind::Highpass { cutoff: -1.0 }, 4, 250.0).is_err());
    }

    #[test]
    fn identity_section_and_constants() {
        let id = IirFilter::from_sections(vec![Sos::identity()]);
        let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        assert_eq!(id.filter(&x).unwrap(), x);

        let f = lp(40.0, 4, 250.0);
        let c = vec![2.5; 400];
        let y = f.filter(&c).unwrap();
        assert!((y[399] - 2.5).abs() < 1e-9);
        let z = f.filtfilt(&c).unwrap();
        assert!(z.iter().all(|v| (v - 2.5).abs() < 1e-9));
    }

    #[test]
    fn unstable_sections_are_rejected() {
        let bad = IirFilter::from_sections(vec![Sos {
            b0: 1.0,
            b1: 0.0,
            b2: 0.0,
            a1: 0.0,
            a2: 1.5,
        }]);
        assert!(!bad.is_stable());
        assert!(bad.filter(&[1.0, 2.0]).is_err());
    }
}
