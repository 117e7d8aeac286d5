use crate::{Error, Result};

/// Points sampled along a hand-drawn nucleus boundary, in pixel coordinates
/// (`x` = column, `y` = row).
#[derive(Debug, Clone, PartialEq)]
pub struct ContourAnnotation {
    pub points: Vec<(f64, f64)>,
    pub source_image_id: String,
}

/// Parses a line-oriented `x,y` contour file. Blank lines are ignored.
pub fn parse_contour_dat(text: &[u8], source_image_id: &str) -> Result<ContourAnnotation> {
    let text = std::str::from_utf8(text).map_err(|e| Error::Parse {
        line: 0,
        message: e.to_string(),
    })?;
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [x, y] = fields[..] else {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 'x,y', got '{line}'"),
            });
        };
        let parse = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line: i + 1,
                    message: format!("'{s}' is not a finite number"),
                })
        };
        points.push((parse(x)?, parse(y)?));
    }
    if points.len() < 3 {
        return Err(Error::InvalidAnnotation(format!(
            "contour for '{source_image_id}' has {} points, need at least 3",
            points.len()
        )));
    }
    Ok(ContourAnnotation {
        points,
        source_image_id: source_image_id.to_string(),
    })
}

/// Serialises a contour in the format read by [`parse_contour_dat`].
/// Coordinates use the shortest representation that parses back exactly.
pub fn write_contour_dat(ann: &ContourAnnotation) -> String {
    ann.points.iter().map(|(x, y)| format!("{x:?},{y:?}\n")).collect()
}

/// `true` when every point lies inside `[0, w) x [0, h)`.
pub fn validate_sample(ann: &ContourAnnotation, image_h: usize, image_w: usize) -> bool {
    ann.points
        .iter()
        .all(|&(x, y)| x >= 0.0 && y >= 0.0 && x < image_w as f64 && y < image_h as f64)
}

/// Region centroid of a contour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Centroid {
    pub x: f64,
    pub y: f64,
    /// Set when the polygon had zero area and the vertex mean was used.
    pub degenerate: bool,
}

/// Area-weighted centroid of the closed polygon through the contour points.
pub fn polygon_centroid(ann: &ContourAnnotation) -> Centroid {
    let pts = &ann.points;
    let n = pts.len();
    // shift to the first vertex to limit cancellation for large coordinates
    let (ox, oy) = pts[0];
    let (mut a2, mut cx, mut cy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (x0, y0) = (pts[i].0 - ox, pts[i].1 - oy);
        let (x1, y1) = (pts[(i + 1) % n].0 - ox, pts[(i + 1) % n].1 - oy);
        let cross = x0 * y1 - x1 * y0;
        a2 += cross;
        cx += (x0 + x1) * cross;
        cy += (y0 + y1) * cross;
    }
    let scale = pts
        .iter()
        .map(|p| (p.0 - ox).abs().max((p.1 - oy).abs()))
        .fold(0.0, f64::max);
    if a2.abs() <= 1e-12 * scale * scale.max(1.0) {
        let inv = 1.0 / n as f64;
        return Centroid {
            x: pts.iter().map(|p| p.0).sum::<f64>() * inv,
            y: pts.iter().map(|p| p.1).sum::<f64>() * inv,
            degenerate: true,
        };
    }
    Centroid {
        x: ox + cx / (3.0 * a2),
        y: oy + cy / (3.0 * a2),
        degenerate: false,
    }
}
