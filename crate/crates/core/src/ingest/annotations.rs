//! MIT-format annotation streams (`.atr`).

use crate::{Error, Result};

pub const RHYTHM: u8 = 28;
const SKIP: u8 = 59;
const NUM: u8 = 60;
const SUB: u8 = 61;
const CHN: u8 = 62;
const AUX: u8 = 63;
const MAX_INCREMENT: u64 = 0x3FF;

/// Rhythm labels whose onset counts as a changepoint.
pub const DANGEROUS_RHYTHMS: [&str; 6] = ["VF", "VFIB", "VFL", "VT", "ASYS", "HGEA"];

/// One decoded annotation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub sample: u64,
    pub code: u8,
    pub subtype: u8,
    pub chan: u8,
    pub num: u16,
    pub aux: Option<Vec<u8>>,
}

impl Annotation {
    pub fn new(sample: u64, code: u8) -> Self {
        Annotation {
            sample,
            code,
            subtype: 0,
            chan: 0,
            num: 0,
            aux: None,
        }
    }

    /// The auxiliary string with trailing NULs removed.
    pub fn aux_text(&self) -> Option<String> {
        self.aux
            .as_ref()
            .map(|a| String::from_utf8_lossy(a).trim_end_matches('\0').to_string())
    }
}

/// A rhythm-change annotation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RhythmEvent {
    pub sample_index: u64,
    pub label: String,
    pub is_dangerous: bool,
}

/// `true` for labels such as `"(VFIB"` naming a dangerous rhythm.
pub fn is_dangerous_label(label: &str) -> bool {
    let core = label.trim().trim_start_matches('(').trim_end_matches(')');
    DANGEROUS_RHYTHMS.contains(&core)
}

fn word(bytes: &[u8], pos: usize) -> Option<u16> {
    bytes.get(pos..pos + 2).map(|b| u16::from_le_bytes([b[0], b[1]]))
}

/// Decodes an annotation stream. When `n_samples` is given, annotations
/// past the end of the record are rejected.
pub fn parse_annotations(bytes: &[u8], n_samples: Option<u64>) -> Result<Vec<Annotation>> {
    let mut out: Vec<Annotation> = Vec::new();
    let mut pos = 0;
    let mut time: i64 = 0;
    let (mut chan, mut num) = (0u8, 0u16);
    loop {
        let w =
            word(bytes, pos).ok_or_else(|| Error::Truncated("annotation stream ends without a terminator".into()))?;
        pos += 2;
        if w == 0 {
            break;
        }
        let code = (w >> 10) as u8;
        let data = w & 0x3FF;
        match code {
            SKIP => {
                let b = bytes
                    .get(pos..pos + 4)
                    .ok_or_else(|| Error::Truncated("SKIP interval".into()))?;
                // PDP-11 long: high 16-bit word first, each word little-endian
                let hi = u16::from_le_bytes([b[0], b[1]]) as u32;
                let lo = u16::from_le_bytes([b[2], b[3]]) as u32;
                time += ((hi << 16) | lo) as i32 as i64;
                pos += 4;
            }
            NUM | SUB | CHN | AUX => {
                let last = out
                    .last_mut()
                    .ok_or_else(|| Error::InvalidAnnotation(format!("modifier code {code} before any annotation")))?;
                match code {
                    NUM => {
                        num = data;
                        last.num = data;
                    }
                    SUB => last.subtype = data as u8,
                    CHN => {
                        chan = data as u8;
                        last.chan = chan;
                    }
                    _ => {
                        let len = data as usize;
                        let payload = bytes
                            .get(pos..pos + len)
                            .ok_or_else(|| Error::Truncated(format!("AUX payload of {len} bytes")))?;
                        last.aux = Some(payload.to_vec());
                        pos += len + (len & 1);
                    }
                }
            }
            _ => {
                time += data as i64;
                if time < 0 {
                    return Err(Error::InvalidAnnotation(format!("negative annotation time {time}")));
                }
                if let Some(n) = n_samples {
                    if time as u64 >= n {
                        return Err(Error::InvalidAnnotation(format!(
                            "annotation at sample {time} lies past the record end ({n})"
                        )));
                    }
                }
                out.push(Annotation {
                    sample: time as u64,
                    code,
                    subtype: 0,
                    chan,
                    num,
                    aux: None,
                });
            }
        }
    }
    Ok(out)
}

/// Encodes annotations (sorted by sample) as an MIT stream.
pub fn write_annotations(anns: &[Annotation]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let push = |out: &mut Vec<u8>, code: u8, data: u16| {
        out.extend_from_slice(&(((code as u16) << 10) | (data & 0x3FF)).to_le_bytes());
    };
    let (mut prev, mut chan, mut num) = (0u64, 0u8, 0u16);
    for a in anns {
        if a.code == 0 || a.code >= SKIP {
            return Err(Error::InvalidAnnotation(format!(
                "code {} cannot be written as an annotation",
                a.code
            )));
        }
        if a.sample < prev {
            return Err(Error::InvalidAnnotation("annotations must be sorted by sample".into()));
        }
        if a.subtype as u16 > MAX_INCREMENT as u16 || a.num > MAX_INCREMENT as u16 {
            return Err(Error::InvalidAnnotation("subtype/num exceed 10 bits".into()));
        }
        let delta = a.sample - prev;
        if delta > MAX_INCREMENT {
            let d = u32::try_from(delta).map_err(|_| Error::InvalidAnnotation("interval exceeds 32 bits".into()))?;
            push(&mut out, SKIP, 0);
            out.extend_from_slice(&((d >> 16) as u16).to_le_bytes());
            out.extend_from_slice(&((d & 0xFFFF) as u16).to_le_bytes());
            push(&mut out, a.code, 0);
        } else {
            push(&mut out, a.code, delta as u16);
        }
        prev = a.sample;
        if a.subtype != 0 {
            push(&mut out, SUB, a.subtype as u16);
        }
        if a.chan != chan {
            push(&mut out, CHN, a.chan as u16);
            chan = a.chan;
        }
        if a.num != num {
            push(&mut out, NUM, a.num);
            num = a.num;
        }
        if let Some(aux) = &a.aux {
            if aux.len() > MAX_INCREMENT as usize {
                return Err(Error::InvalidAnnotation("AUX string longer than 1023 bytes".into()));
            }
            push(&mut out, AUX, aux.len() as u16);
            out.extend_from_slice(aux);
            if aux.len() % 2 == 1 {
                out.push(0);
            }
        }
    }
    out.extend_from_slice(&[0, 0]);
    Ok(out)
}

/// Extracts rhythm annotations carrying an AUX label.
pub fn rhythm_events(anns: &[Annotation]) -> Vec<RhythmEvent> {
    anns.iter()
        .filter(|a| a.code == RHYTHM)
        .filter_map(|a| {
            a.aux_text().map(|label| RhythmEvent {
                sample_index: a.sample,
                is_dangerous: is_dangerous_label(&label),
                label,
            })
        })
        .collect()
}

/// Samples at which a dangerous rhythm starts: every dangerous label that
/// differs from the label before it.
pub fn extract_changepoints(events: &[RhythmEvent]) -> Vec<u64> {
    let mut prev: Option<&str> = None;
    let mut out = Vec::new();
    for e in events {
        let label = e.label.trim();
        if e.is_dangerous && prev != Some(label) {
            out.push(e.sample_index);
        }
        prev = Some(label);
    }
    out
}
