use std::path::Path;

use crate::tensor::Tensor;
use crate::{Error, Result};

use super::contour::{polygon_centroid, ContourAnnotation};
use super::ImageSample;

/// Floor on the standard deviation used by [`normalize_image`].
pub const NORMALIZE_EPS: f64 = 1e-8;

fn dims(pixels: &Tensor<f32>) -> Result<(usize, usize)> {
    match pixels.shape() {
        &[3, h, w] => Ok((h, w)),
        other => Err(Error::shape(format!("expected a 3xHxW image, got {other:?}"))),
    }
}

/// Result of [`normalize_image`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub pixels: Tensor<f32>,
    /// The image was constant and its standard deviation was floored.
    pub constant: bool,
}

/// Subtracts the global mean and divides by the global (population)
/// standard deviation, both taken over all channels of this image.
pub fn normalize_image(pixels: &Tensor<f32>) -> Result<Normalized> {
    dims(pixels)?;
    let n = pixels.len() as f64;
    let mean = pixels.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = pixels.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let constant = std < NORMALIZE_EPS;
    if constant {
        log::warn!("constant image: standard deviation floored at {NORMALIZE_EPS}");
    }
    let denom = std.max(NORMALIZE_EPS);
    let pixels = Tensor::new(
        pixels.shape().to_vec(),
        pixels
            .data()
            .iter()
            .map(|&v| ((v as f64 - mean) / denom) as f32)
            .collect(),
    )?;
    Ok(Normalized { pixels, constant })
}

/// Bilinear sample of one channel plane at fractional `(y, x)`; positions
/// outside the plane are clamped to the border.
fn sample_clamped(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, c: usize| plane[r * w + c] as f64;
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    (top * (1.0 - fy) + bot * fy) as f32
}

/// Scales the image so its longer side becomes `long_side`, returning the
/// resampled pixels and the scale factor. Output pixel `(i, j)` samples the
/// source at `(i / s, j / s)`, so a point `p` maps to `s * p`.
pub fn resample_isotropic(pixels: &Tensor<f32>, long_side: usize) -> Result<(Tensor<f32>, f64)> {
    let (h, w) = dims(pixels)?;
    if long_side == 0 {
        return Err(Error::invalid("target side must be positive"));
    }
    let s = long_side as f64 / h.max(w) as f64;
    let out_h = ((h as f64 * s).round() as usize).clamp(1, long_side);
    let out_w = ((w as f64 * s).round() as usize).clamp(1, long_side);
    if (out_h, out_w) == (h, w) {
        return Ok((pixels.clone(), s));
    }
    let mut out = Vec::with_capacity(3 * out_h * out_w);
    for plane in pixels.data().chunks_exact(h * w) {
        for i in 0..out_h {
            for j in 0..out_w {
                out.push(sample_clamped(plane, h, w, i as f64 / s, j as f64 / s));
            }
        }
    }
    Ok((Tensor::new(vec![3, out_h, out_w], out)?, s))
}

/// Zero-pads to `target x target`, splitting the padding as evenly as
/// possible (the extra pixel goes to the high side). Returns the padded
/// image and the `(row, column)` offset of the original.
pub fn pad_to_square(pixels: &Tensor<f32>, target: usize) -> Result<(Tensor<f32>, (usize, usize))> {
    let (h, w) = dims(pixels)?;
    if h > target || w > target {
        return Err(Error::invalid(format!("image {h}x{w} exceeds padding target {target}")));
    }
    let (top, left) = ((target - h) / 2, (target - w) / 2);
    let mut out = vec![0.0f32; 3 * target * target];
    for c in 0..3 {
        for i in 0..h {
            let src = &pixels.data()[(c * h + i) * w..(c * h + i + 1) * w];
            let dst = (c * target + top + i) * target + left;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    Ok((Tensor::new(vec![3, target, target], out)?, (top, left)))
}

/// Loads an image file as a 3xHxW tensor of RGB values in `[0, 255]`.
pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let mut data = vec![0.0f32; 3 * h * w];
    for (p, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + p] = px[c] as f32;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Runs normalise, resample and pad on a raw image and maps the contour
/// centroid into the final 256x256 frame. Targets are clipped to 255.
pub fn preprocess_image(
    raw: &Tensor<f32>,
    contour: &ContourAnnotation,
    base_id: &str,
    side: usize,
) -> Result<ImageSample> {
    let centroid = polygon_centroid(contour);
    if centroid.degenerate {
        log::warn!("{base_id}: zero-area contour, using the vertex mean");
    }
    let normalized = normalize_image(raw)?;
    let (resampled, s) = resample_isotropic(&normalized.pixels, side)?;
    let (padded, (top, left)) = pad_to_square(&resampled, side)?;
    let max = (side - 1) as f64;
    let center = [
        (centroid.x * s + left as f64).clamp(0.0, max),
        (centroid.y * s + top as f64).clamp(0.0, max),
    ];
    Ok(ImageSample {
        pixels: padded,
        center,
        base_id: base_id.to_string(),
        augment_index: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![3, h, w],
            (0..3 * h * w).map(|_| rng.random_range(0.0..255.0)).collect(),
        )
        .unwrap()
    }

    fn moments(t: &Tensor<f32>) -> (f64, f64) {
        let n = t.len() as f64;
        let m = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let v = t.data().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
        (m, v.sqrt())
    }

    #[test]
    fn normalisation_moments_and_affine_invariance() {
        let img = random_image(20, 30, 1);
        let out = normalize_image(&img).unwrap();
        let (m, s) = moments(&out.pixels);
        assert!(m.abs() < 1e-6, "mean {m}");
        assert!((s - 1.0).abs() < 1e-6, "std {s}");
        let shifted = img.map(|v| 3.0 * v + 7.0);
        let again = normalize_image(&shifted).unwrap();
        for (a, b) in out.pixels.data().iter().zip(again.pixels.data()) {
            assert!((a - b).abs() < 1e-4);
        }
        let flat = normalize_image(&Tensor::full(&[3, 4, 4], 9.0)).unwrap();
        assert!(flat.constant);
        assert!(flat.pixels.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resampling_dimensions() {
        let (r, s) = resample_isotropic(&Tensor::zeros(&[3, 512, 384]), 256).unwrap();
        assert_eq!(r.shape(), [3, 256, 192]);
        assert_eq!(s, 0.5);
        let img = random_image(256, 100, 2);
        let (r, s) = resample_isotropic(&img, 256).unwrap();
        assert_eq!(s, 1.0);
        assert_eq!(r, img);
        let (r, _) = resample_isotropic(&Tensor::full(&[3, 77, 130], 4.5), 256).unwrap();
        assert!(r.data().iter().all(|&v| (v - 4.5).abs() < 1e-5));
    }

    #[test]
    fn padding_split() {
        let (p, off) = pad_to_square(&Tensor::full(&[3, 256, 192], 1.0), 256).unwrap();
        assert_eq!(off, (0, 32));
        let (_, off) = pad_to_square(&Tensor::full(&[3, 191, 256], 1.0), 256).unwrap();
        assert_eq!(off, (32, 0));
        let row = &p.data()[..256];
        assert!(row[..32].iter().chain(&row[224..]).all(|&v| v == 0.0));
        assert!(row[32..224].iter().all(|&v| v == 1.0));
        assert!(pad_to_square(&Tensor::zeros(&[3, 300, 10]), 256).is_err());
    }

    #[test]
    fn preprocessing_moves_centroid() {
        let img = random_image(128, 64, 3);
        let contour = ContourAnnotation {
            points: vec![(10.0, 20.0), (30.0, 20.0), (30.0, 40.0), (10.0, 40.0)],
            source_image_id: "c".into(),
        };
        let s = preprocess_image(&img, &contour, "c", 256).unwrap();
        assert_eq!(s.pixels.shape(), [3, 256, 256]);
        // scale 2, horizontal offset (256 - 128) / 2
        assert_eq!(s.center, [20.0 * 2.0 + 64.0, 30.0 * 2.0]);
    }
}
