//! WFDB header (`.hea`) and signal (`.dat`, formats 212 and 16) support.

use std::fmt::Write as _;

use crate::{Error, Result};

pub const DEFAULT_FS: f64 = 250.0;
pub const DEFAULT_GAIN: f64 = 200.0;

/// Per-signal header fields.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSpec {
    pub file_name: String,
    pub format: u16,
    /// ADC units per physical unit.
    pub gain: f64,
    pub baseline: i32,
    pub units: String,
    pub adc_resolution: u32,
    pub adc_zero: i32,
    pub initial_value: i32,
    pub checksum: i32,
    pub block_size: u32,
    pub description: String,
}

impl SignalSpec {
    /// A signal line with the usual MIT-BIH defaults.
    pub fn new(file_name: &str, format: u16, gain: f64, baseline: i32) -> Self {
        SignalSpec {
            file_name: file_name.to_string(),
            format,
            gain,
            baseline,
            units: "mV".to_string(),
            adc_resolution: if format == 212 { 12 } else { 16 },
            adc_zero: 0,
            initial_value: 0,
            checksum: 0,
            block_size: 0,
            description: String::new(),
        }
    }
}

/// Parsed record header.
#[derive(Debug, Clone, PartialEq)]
pub struct WfdbRecord {
    pub name: String,
    pub n_signals: usize,
    pub fs: f64,
    pub n_samples: usize,
    pub signals: Vec<SignalSpec>,
}

fn is_supported(format: u16) -> bool {
    matches!(format, 212 | 16)
}

fn field<'a>(fields: &[&'a str], i: usize, line: usize, what: &str) -> Result<&'a str> {
    fields.get(i).copied().ok_or_else(|| Error::Parse {
        line,
        message: format!("missing {what}"),
    })
}

fn num<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid {what} '{s}'"),
    })
}

/// Parses a header. Comment lines start with `#`.
pub fn parse_wfdb_header(text: &str) -> Result<WfdbRecord> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (ln, record_line) = lines.next().ok_or(Error::Parse {
        line: 0,
        message: "empty header".into(),
    })?;
    let f: Vec<&str> = record_line.split_whitespace().collect();
    let name = field(&f, 0, ln, "record name")?;
    if name.contains('/') {
        return Err(Error::invalid("multi-segment records are not supported"));
    }
    let n_signals: usize = num(field(&f, 1, ln, "signal count")?, ln, "signal count")?;
    // the frequency may carry a counter frequency and base counter, "250/1(0)"
    let fs = match f.get(2) {
        Some(s) => num::<f64>(s.split('/').next().unwrap_or(s), ln, "sampling frequency")?,
        None => DEFAULT_FS,
    };
    if !(fs > 0.0 && fs.is_finite()) {
        return Err(Error::Parse {
            line: ln,
            message: format!("sampling frequency must be positive, got {fs}"),
        });
    }
    let n_samples = match f.get(3) {
        Some(s) => num(s, ln, "sample count")?,
        None => 0,
    };
    if n_signals == 0 {
        return Err(Error::Parse {
            line: ln,
            message: "record has no signals".into(),
        });
    }

    let mut signals = Vec::with_capacity(n_signals);
    for _ in 0..n_signals {
        let (ln, line) = lines.next().ok_or(Error::Parse {
            line: ln,
            message: format!("expected {n_signals} signal lines"),
        })?;
        signals.push(parse_signal_line(line, ln)?);
    }
    Ok(WfdbRecord {
        name: name.to_string(),
        n_signals,
        fs,
        n_samples,
        signals,
    })
}

/// Splits off up to `n` whitespace-separated fields and returns the
/// trimmed remainder as free text.
fn split_fields(line: &str, n: usize) -> (Vec<&str>, &str) {
    let mut fields = Vec::with_capacity(n);
    let mut rest = line.trim_start();
    while fields.len() < n && !rest.is_empty() {
        let end = rest.find(char::is_whitespace).unwrap_or(rest.len());
        fields.push(&rest[..end]);
        rest = rest[end..].trim_start();
    }
    (fields, rest.trim_end())
}

fn parse_signal_line(line: &str, ln: usize) -> Result<SignalSpec> {
    let (fields, description) = split_fields(line, 8);
    let mut parts = fields.into_iter();
    let file_name = parts.next().ok_or(Error::Parse {
        line: ln,
        message: "missing file name".into(),
    })?;
    let fmt_field = parts.next().ok_or(Error::Parse {
        line: ln,
        message: "missing format".into(),
    })?;
    let fmt_digits: String = fmt_field.chars().take_while(char::is_ascii_digit).collect();
    if fmt_digits.len() != fmt_field.len() {
        return Err(Error::invalid(format!(
            "format modifiers are not supported: '{fmt_field}'"
        )));
    }
    let format: u16 = num(&fmt_digits, ln, "format")?;
    if !is_supported(format) {
        return Err(Error::UnsupportedFormat(format));
    }
    let mut spec = SignalSpec::new(file_name, format, DEFAULT_GAIN, 0);
    let rest: Vec<&str> = parts.collect();
    let mut explicit_baseline = None;
    if let Some(g) = rest.first() {
        let (gain_part, units) = match g.split_once('/') {
            Some((a, u)) => (a, Some(u)),
            None => (*g, None),
        };
        let (gain_str, base) = match gain_part.split_once('(') {
            Some((a, b)) => (
                a,
                Some(b.strip_suffix(')').ok_or(Error::Parse {
                    line: ln,
                    message: format!("bad gain field '{g}'"),
                })?),
            ),
            None => (gain_part, None),
        };
        let gain: f64 = num(gain_str, ln, "gain")?;
        spec.gain = if gain == 0.0 { DEFAULT_GAIN } else { gain };
        if let Some(b) = base {
            explicit_baseline = Some(num::<i32>(b, ln, "baseline")?);
        }
        if let Some(u) = units {
            spec.units = u.to_string();
        }
    }
    if let Some(s) = rest.get(1) {
        spec.adc_resolution = num(s, ln, "ADC resolution")?;
    }
    if let Some(s) = rest.get(2) {
        spec.adc_zero = num(s, ln, "ADC zero")?;
    }
    if let Some(s) = rest.get(3) {
        spec.initial_value = num(s, ln, "initial value")?;
    }
    if let Some(s) = rest.get(4) {
        spec.checksum = num(s, ln, "checksum")?;
    }
    if let Some(s) = rest.get(5) {
        spec.block_size = num(s, ln, "block size")?;
    }
    spec.description = description.to_string();
    spec.baseline = explicit_baseline.unwrap_or(spec.adc_zero);
    Ok(spec)
}

/// Writes a header with every optional signal field spelled out, so that
/// [`parse_wfdb_header`] recovers the record exactly.
pub fn write_wfdb_header(rec: &WfdbRecord) -> String {
    let mut out = format!("{} {} {} {}\n", rec.name, rec.n_signals, rec.fs, rec.n_samples);
    for s in &rec.signals {
        let _ = write!(
            out,
            "{} {} {}({})/{} {} {} {} {} {}",
            s.file_name,
            s.format,
            s.gain,
            s.baseline,
            s.units,
            s.adc_resolution,
            s.adc_zero,
            s.initial_value,
            s.checksum,
            s.block_size
        );
        if !s.description.is_empty() {
            let _ = write!(out, " {}", s.description);
        }
        out.push('\n');
    }
    out
}

fn common_format(rec: &WfdbRecord) -> Result<u16> {
    let first = rec
        .signals
        .first()
        .ok_or_else(|| Error::invalid("record has no signals"))?;
    for s in &rec.signals {
        if s.format != first.format || s.file_name != first.file_name {
            return Err(Error::invalid(
                "signals spread over several files or formats are not supported",
            ));
        }
    }
    if !is_supported(first.format) {
        return Err(Error::UnsupportedFormat(first.format));
    }
    Ok(first.format)
}

fn sign_extend_12(v: u16) -> i16 {
    ((v << 4) as i16) >> 4
}

/// Decodes raw ADC values, one vector per signal.
pub fn read_signal_adu(bytes: &[u8], rec: &WfdbRecord) -> Result<Vec<Vec<i16>>> {
    let format = common_format(rec)?;
    let n_sig = rec.n_signals;
    let flat: Vec<i16> = match format {
        212 => {
            if !bytes.len().is_multiple_of(3) {
                return Err(Error::Truncated(format!(
                    "format 212 payload of {} bytes is not a whole number of 3-byte groups",
                    bytes.len()
                )));
            }
            bytes
                .chunks_exact(3)
                .flat_map(|g| {
                    let s1 = g[0] as u16 | ((g[1] as u16 & 0x0F) << 8);
                    let s2 = g[2] as u16 | ((g[1] as u16 & 0xF0) << 4);
                    [sign_extend_12(s1), sign_extend_12(s2)]
                })
                .collect()
        }
        _ => {
            if !bytes.len().is_multiple_of(2) {
                return Err(Error::Truncated(format!(
                    "format 16 payload of {} bytes has an odd length",
                    bytes.len()
                )));
            }
            bytes
                .chunks_exact(2)
                .map(|b| i16::from_le_bytes([b[0], b[1]]))
                .collect()
        }
    };
    let available = flat.len() / n_sig;
    let frames = if rec.n_samples == 0 { available } else { rec.n_samples };
    if frames > available {
        return Err(Error::Truncated(format!(
            "header declares {frames} samples per signal but the payload holds {available}"
        )));
    }
    let mut out = vec![Vec::with_capacity(frames); n_sig];
    for frame in flat.chunks_exact(n_sig).take(frames) {
        for (lead, &v) in out.iter_mut().zip(frame) {
            lead.push(v);
        }
    }
    Ok(out)
}

/// Decodes a signal file into physical units: `(adu - baseline) / gain`.
pub fn read_signal(bytes: &[u8], rec: &WfdbRecord) -> Result<Vec<Vec<f64>>> {
    let adu = read_signal_adu(bytes, rec)?;
    Ok(adu
        .into_iter()
        .zip(&rec.signals)
        .map(|(lead, s)| {
            lead.into_iter()
                .map(|v| (v as f64 - s.baseline as f64) / s.gain)
                .collect()
        })
        .collect())
}

/// Encodes interleaved ADC values. Format 212 values must fit in 12 bits;
/// an odd total sample count is padded with a zero sample.
pub fn write_signal(adu: &[Vec<i16>], format: u16) -> Result<Vec<u8>> {
    let frames = adu.first().map_or(0, Vec::len);
    if adu.iter().any(|l| l.len() != frames) {
        return Err(Error::invalid("all signals must have the same length"));
    }
    let flat: Vec<i16> = (0..frames).flat_map(|t| adu.iter().map(move |l| l[t])).collect();
    match format {
        212 => {
            if let Some(v) = flat.iter().find(|v| !(-2048..=2047).contains(*v)) {
                return Err(Error::invalid(format!("sample {v} does not fit in 12 bits")));
            }
            let mut out = Vec::with_capacity(flat.len() * 3 / 2 + 3);
            for pair in flat.chunks(2) {
                let s1 = pair[0] as u16 & 0x0FFF;
                let s2 = pair.get(1).map_or(0, |&v| v as u16 & 0x0FFF);
                out.extend_from_slice(&[
                    (s1 & 0xFF) as u8,
                    ((s1 >> 8) | ((s2 >> 8) << 4)) as u8,
                    (s2 & 0xFF) as u8,
                ]);
            }
            Ok(out)
        }
        16 => Ok(flat.iter().flat_map(|v| v.to_le_bytes()).collect()),
        other => Err(Error::UnsupportedFormat(other)),
    }
}
