//! Plain-text PPM (P3) heatmaps for per-cell grid quantities.
//!
//! P3 is deliberately low-tech: ASCII, no dependencies, viewable with any
//! image tool and diffable in review. Each grid cell becomes a square block
//! of pixels; the first grid row is drawn at the bottom so the image reads
//! like a plot with both axes increasing.

use std::fmt::Write as _;

/// Pixels per grid cell edge.
const BLOCK: usize = 32;
/// Cells without a usable value.
const GRAY: (u8, u8, u8) = (128, 128, 128);

/// Palette for a signed quantity: blue at -limit, white at zero, red at
/// +limit. `limit` must be positive.
fn diverging(v: f64, limit: f64) -> (u8, u8, u8) {
    let t = (v / limit).clamp(-1.0, 1.0);
    let ramp = |x: f64| (255.0 * x).round() as u8;
    if t < 0.0 {
        let a = 1.0 + t;
        (ramp(a), ramp(a), 255)
    } else {
        let a = 1.0 - t;
        (255, ramp(a), ramp(a))
    }
}

/// Palette for a non-negative quantity: white at zero, dark violet at limit.
fn sequential(v: f64, limit: f64) -> (u8, u8, u8) {
    let t = (v / limit).clamp(0.0, 1.0);
    let r = 255.0 - t * (255.0 - 84.0);
    let g = 255.0 - t * (255.0 - 39.0);
    let b = 255.0 - t * (255.0 - 143.0);
    (r.round() as u8, g.round() as u8, b.round() as u8)
}

pub enum Palette {
    /// Signed values, symmetric about zero.
    Diverging,
    /// Non-negative values.
    Sequential,
}

/// Render a `rows x cols` matrix of optional values to P3 text. `None`
/// renders gray. The color limit is the largest finite |value|, or 1 if the
/// matrix has no values at all.
pub fn render(values: &[Vec<Option<f64>>], palette: Palette) -> String {
    let rows = values.len();
    let cols = values.first().map_or(0, |r| r.len());
    let limit = values
        .iter()
        .flatten()
        .flatten()
        .map(|v| v.abs())
        .fold(0.0_f64, f64::max)
        .max(1e-300);
    let limit = if limit < 1e-12 { 1.0 } else { limit };

    let mut text = String::new();
    writeln!(text, "P3").unwrap();
    writeln!(text, "{} {}", cols * BLOCK, rows * BLOCK).unwrap();
    writeln!(text, "255").unwrap();
    // Image scans top-to-bottom; emit grid rows in reverse so row 0 is at
    // the bottom.
    for i in (0..rows).rev() {
        let row_px: Vec<(u8, u8, u8)> = (0..cols)
            .map(|j| match values[i][j] {
                Some(v) if v.is_finite() => match palette {
                    Palette::Diverging => diverging(v, limit),
                    Palette::Sequential => sequential(v, limit),
                },
                _ => GRAY,
            })
            .collect();
        let mut line = String::new();
        for &(r, g, b) in &row_px {
            for _ in 0..BLOCK {
                write!(line, "{r} {g} {b} ").unwrap();
            }
        }
        let line = line.trim_end();
        for _ in 0..BLOCK {
            writeln!(text, "{line}").unwrap();
        }
    }
    text
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_matches_dimensions() {
        let m = vec![vec![Some(1.0), None], vec![Some(-1.0), Some(0.0)]];
        let text = render(&m, Palette::Diverging);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("P3"));
        assert_eq!(lines.next(), Some("64 64"));
        assert_eq!(lines.next(), Some("255"));
        // 2 block-rows of 32 pixel lines each
        assert_eq!(text.lines().count(), 3 + 64);
    }

    #[test]
    fn diverging_endpoints() {
        assert_eq!(diverging(0.0, 1.0), (255, 255, 255));
        assert_eq!(diverging(1.0, 1.0), (255, 0, 0));
        assert_eq!(diverging(-1.0, 1.0), (0, 0, 255));
        // Out-of-range values clamp.
        assert_eq!(diverging(5.0, 1.0), (255, 0, 0));
    }

    #[test]
    fn sequential_endpoints() {
        assert_eq!(sequential(0.0, 1.0), (255, 255, 255));
        assert_eq!(sequential(1.0, 1.0), (84, 39, 143));
    }

    #[test]
    fn missing_cells_render_gray() {
        let m = vec![vec![None]];
        let text = render(&m, Palette::Sequential);
        assert!(text.contains("128 128 128"));
    }
}
