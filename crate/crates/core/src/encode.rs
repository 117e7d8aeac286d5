//! CoordConv and intensity-weighted coordinate channels.
//!
//! Images gain two planes (row and column coordinate), ECG windows gain one
//! temporal channel. The intensity-weighted variant multiplies each
//! coordinate by the mean of the base channels at that position.

use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Image side length expected by the 2D network.
pub const IMAGE_EXTENT: usize = 256;
/// Samples per ECG window.
pub const WINDOW_SAMPLES: usize = 500;
/// ECG window length in seconds.
pub const WINDOW_SECONDS: f64 = 20.0;

/// Coordinate convention for the extra channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordMode {
    /// Row/column index for images, seconds for ECG windows.
    #[default]
    Integer,
    /// `2 i / extent - 1`.
    Normalized,
}

/// Which extra channels are appended to the base signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingKind {
    #[serde(rename = "coordconv")]
    CoordConv,
    IntensityWeighted,
}

impl EncodingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EncodingKind::CoordConv => "coordconv",
            EncodingKind::IntensityWeighted => "intensity_weighted",
        }
    }
}

impl std::str::FromStr for EncodingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coordconv" => Ok(EncodingKind::CoordConv),
            "intensity_weighted" | "iw" => Ok(EncodingKind::IntensityWeighted),
            other => Err(Error::invalid(format!("unknown encoding '{other}'"))),
        }
    }
}

/// Base channels followed by the extra coordinate channel(s).
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInput<T> {
    pub channels: Tensor<T>,
    pub encoding_kind: EncodingKind,
    pub mode: CoordMode,
}

fn coord_value(i: usize, extent: usize, mode: CoordMode) -> f64 {
    match mode {
        CoordMode::Integer => i as f64,
        CoordMode::Normalized => 2.0 * i as f64 / extent as f64 - 1.0,
    }
}

/// Returns the `(X, Y)` planes, each `h x w`. `X[i][j]` depends on the row
/// `i`, `Y[i][j]` on the column `j`.
pub fn coord_channels_2d<T: Scalar>(h: usize, w: usize, mode: CoordMode) -> Result<(Tensor<T>, Tensor<T>)> {
    if h == 0 || w == 0 {
        return Err(Error::invalid(format!(
            "coordinate grid must be non-empty, got {h}x{w}"
        )));
    }
    let mut x = Vec::with_capacity(h * w);
    let mut y = Vec::with_capacity(h * w);
    for i in 0..h {
        let xi = T::from_f64_lossy(coord_value(i, h, mode));
        for j in 0..w {
            x.push(xi);
            y.push(T::from_f64_lossy(coord_value(j, w, mode)));
        }
    }
    Ok((Tensor::new(vec![h, w], x)?, Tensor::new(vec![h, w], y)?))
}

/// Temporal coordinate for an `n`-sample window spanning `t_max` seconds.
///
/// Integer mode runs from 0 to `t_max` inclusive; normalized mode ignores
/// `t_max`.
pub fn coord_channel_1d<T: Scalar>(n: usize, t_max: f64, mode: CoordMode) -> Result<Tensor<T>> {
    if n < 2 {
        return Err(Error::invalid(format!(
            "temporal coordinate needs at least 2 samples, got {n}"
        )));
    }
    let data = (0..n)
        .map(|k| {
            T::from_f64_lossy(match mode {
                CoordMode::Integer => t_max * k as f64 / (n - 1) as f64,
                CoordMode::Normalized => 2.0 * k as f64 / n as f64 - 1.0,
            })
        })
        .collect();
    Tensor::new(vec![n], data)
}

/// Multiplies each coordinate plane by the per-pixel RGB mean.
pub fn intensity_weight_2d<T: Scalar>(
    image: &Tensor<T>,
    coords: (&Tensor<T>, &Tensor<T>),
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (cx, cy) = coords;
    let [3, h, w] = image.shape()[..] else {
        return Err(Error::shape(format!("expected a 3xHxW image, got {:?}", image.shape())));
    };
    if cx.shape() != [h, w] || cy.shape() != [h, w] {
        return Err(Error::shape(format!(
            "coordinate planes {:?}/{:?} do not match image {h}x{w}",
            cx.shape(),
            cy.shape()
        )));
    }
    let plane = h * w;
    let d = image.data();
    let three = T::from_f64_lossy(3.0);
    let mut ix = Vec::with_capacity(plane);
    let mut iy = Vec::with_capacity(plane);
    for p in 0..plane {
        let mean = (d[p] + d[plane + p] + d[2 * plane + p]) / three;
        ix.push(cx.data()[p] * mean);
        iy.push(cy.data()[p] * mean);
    }
    Ok((Tensor::new(vec![h, w], ix)?, Tensor::new(vec![h, w], iy)?))
}

/// Multiplies the temporal coordinate by the mean of the two leads.
pub fn intensity_weight_1d<T: Scalar>(signal: &Tensor<T>, coord: &Tensor<T>) -> Result<Tensor<T>> {
    let [2, n] = signal.shape()[..] else {
        return Err(Error::shape(format!("expected a 2xN signal, got {:?}", signal.shape())));
    };
    if coord.shape() != [n] {
        return Err(Error::shape(format!(
            "coordinate length {:?} does not match signal length {n}",
            coord.shape()
        )));
    }
    let (a, b) = signal.data().split_at(n);
    let two = T::from_f64_lossy(2.0);
    let data = coord
        .data()
        .iter()
        .zip(a.iter().zip(b))
        .map(|(&t, (&x, &y))| t * (x + y) / two)
        .collect();
    Tensor::new(vec![n], data)
}

/// Stacks `base` (3x256x256 image or 2x500 ECG window) with its extra
/// channels.
pub fn assemble_input<T: Scalar>(base: &Tensor<T>, kind: EncodingKind, mode: CoordMode) -> Result<EncodedInput<T>> {
    let mut data = base.data().to_vec();
    let shape = match base.shape() {
        &[3, h, w] if h == IMAGE_EXTENT && w == IMAGE_EXTENT => {
            let (x, y) = coord_channels_2d::<T>(h, w, mode)?;
            let (x, y) = match kind {
                EncodingKind::CoordConv => (x, y),
                EncodingKind::IntensityWeighted => intensity_weight_2d(base, (&x, &y))?,
            };
            data.extend_from_slice(x.data());
            data.extend_from_slice(y.data());
            vec![5, h, w]
        }
        &[2, n] if n == WINDOW_SAMPLES => {
            let t = coord_channel_1d::<T>(n, WINDOW_SECONDS, mode)?;
            let t = match kind {
                EncodingKind::CoordConv => t,
                EncodingKind::IntensityWeighted => intensity_weight_1d(base, &t)?,
            };
            data.extend_from_slice(t.data());
            vec![3, n]
        }
        other => {
            return Err(Error::shape(format!(
                "unsupported base shape {other:?}; expected [3, 256, 256] or [2, 500]"
            )))
        }
    };
    Ok(EncodedInput {
        channels: Tensor::new(shape, data)?,
        encoding_kind: kind,
        mode,
    })
}

/// Recovers the hot position of a one-hot `h x w` matrix from the sums of
/// its intensity-weighted normalized coordinate channels.
pub fn recover_onehot_coords<T: Scalar>(onehot: &Tensor<T>) -> Result<(usize, usize)> {
    let [h, w] = onehot.shape()[..] else {
        return Err(Error::shape(format!("expected a matrix, got {:?}", onehot.shape())));
    };
    // The image is a single channel here, so its "mean intensity" is itself.
    // Zero pixels add nothing to either sum and are skipped.
    let (mut sx, mut sy) = (0.0f64, 0.0f64);
    let mut ones = 0;
    for (p, &v) in onehot.data().iter().enumerate() {
        if v == T::zero() {
            continue;
        }
        if v != T::one() {
            return Err(Error::invalid("input is not one-hot"));
        }
        ones += 1;
        let v = v.as_f64();
        sx += coord_value(p / w, h, CoordMode::Normalized) * v;
        sy += coord_value(p % w, w, CoordMode::Normalized) * v;
    }
    if ones != 1 {
        return Err(Error::invalid("input is not one-hot"));
    }
    let m = h as f64 * (sx + 1.0) / 2.0;
    let n = w as f64 * (sy + 1.0) / 2.0;
    Ok((m.round() as usize, n.round() as usize))
}
