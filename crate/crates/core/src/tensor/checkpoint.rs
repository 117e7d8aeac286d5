//! Versioned binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CLOC" | version: u16 | layer count: u32
//! per layer:
//!   kind tag: u8
//!   hyper: in, out, kernel, stride, padding, groups as u32
//!   weight: rank u8, dims u32 x rank, values f64 x n
//!   bias:   present u8, then as weight when present
//!   running stats: present u8, then channels u32, mean f64 x c, var f64 x c
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};

use super::{LayerHyper, LayerKind, LayerParams, Param, RunningStats, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"CLOC";
pub const VERSION: u16 = 1;

pub fn write_checkpoint<T: Scalar, W: Write>(out: &mut W, layers: &[LayerParams<T>]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(layers.len() as u32).to_le_bytes())?;
    for layer in layers {
        out.write_all(&[layer.kind.tag()])?;
        let h = &layer.hyper;
        for v in [h.in_channels, h.out_channels, h.kernel, h.stride, h.padding, h.groups] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        write_tensor(out, &layer.weight.value)?;
        match &layer.bias {
            Some(b) => {
                out.write_all(&[1])?;
                write_tensor(out, &b.value)?;
            }
            None => out.write_all(&[0])?,
        }
        match &layer.running {
            Some(r) => {
                out.write_all(&[1])?;
                out.write_all(&(r.mean.len() as u32).to_le_bytes())?;
                for v in r.mean.iter().chain(&r.var) {
                    out.write_all(&v.as_f64().to_le_bytes())?;
                }
            }
            None => out.write_all(&[0])?,
        }
    }
    Ok(())
}

fn write_tensor<T: Scalar, W: Write>(out: &mut W, t: &Tensor<T>) -> Result<()> {
    out.write_all(&[t.rank() as u8])?;
    for &d in t.shape() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        out.write_all(&v.as_f64().to_le_bytes())?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Checkpoint("unexpected end of file".into()),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn f64s<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        (0..n)
            .map(|_| Ok(T::from_f64_lossy(f64::from_le_bytes(self.bytes()?))))
            .collect()
    }

    fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let rank = self.u8()? as usize;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n > 1 << 28 {
            return Err(Error::Checkpoint(format!("implausible tensor shape {shape:?}")));
        }
        let data = self.f64s(n)?;
        Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Checkpoint(format!("bad presence flag {v}"))),
        }
    }
}

pub fn read_checkpoint<T: Scalar, R: Read>(input: R) -> Result<Vec<LayerParams<T>>> {
    let mut r = Reader { inner: input };
    if &r.bytes::<4>()? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a CLOC checkpoint".into()));
    }
    let version = u16::from_le_bytes(r.bytes()?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let tag = r.u8()?;
        let kind = LayerKind::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown layer tag {tag}")))?;
        let hyper = LayerHyper {
            in_channels: r.u32()?,
            out_channels: r.u32()?,
            kernel: r.u32()?,
            stride: r.u32()?,
            padding: r.u32()?,
            groups: r.u32()?,
        };
        let weight = Param::new(r.tensor()?);
        let bias = if r.flag()? { Some(Param::new(r.tensor()?)) } else { None };
        let running = if r.flag()? {
            let c = r.u32()?;
            let mean = r.f64s(c)?;
            let var = r.f64s(c)?;
            Some(RunningStats { mean, var })
        } else {
            None
        };
        let layer = LayerParams {
            kind,
            hyper,
            weight,
            bias,
            running,
        };
        layer
            .validate()
            .map_err(|e| Error::Checkpoint(format!("layer {}: {e}", layers.len())))?;
        layers.push(layer);
    }
    Ok(layers)
}
