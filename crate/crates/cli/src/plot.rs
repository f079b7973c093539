//! Minimal scatter-plot rendering: projected embeddings straight onto an RGB
//! buffer, PNG-encoded with the projection settings recorded as text chunks.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use asdkit_core::{Error, Result};

/// One projected embedding, ready to draw.
pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
    pub machine_id: u32,
    pub anomalous: bool,
}

const WIDTH: usize = 640;
const HEIGHT: usize = 480;
const MARGIN: f64 = 24.0;

/// Machine-ID colors, cycled when there are more IDs than entries.
const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

/// Renders normals as filled disks and anomalies as crosses, one color per
/// machine ID, and stores each `metadata` pair as a PNG text chunk.
pub fn render_scatter(
    points: &[ScatterPoint],
    path: &Path,
    metadata: &[(&str, String)],
) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Tsne("nothing to plot".into()));
    }
    let err = |e: png::EncodingError| Error::Tsne(format!("{}: {e}", path.display()));

    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x_min = x_min.min(p.x);
        x_max = x_max.max(p.x);
        y_min = y_min.min(p.y);
        y_max = y_max.max(p.y);
    }
    // Degenerate extents (a single point, or a collapsed axis) still render.
    let x_span = (x_max - x_min).max(1e-12);
    let y_span = (y_max - y_min).max(1e-12);
    let to_px = |p: &ScatterPoint| -> (i64, i64) {
        let u = MARGIN + (p.x - x_min) / x_span * (WIDTH as f64 - 2.0 * MARGIN);
        // Image rows grow downward; flip so larger y plots higher.
        let v = MARGIN + (y_max - p.y) / y_span * (HEIGHT as f64 - 2.0 * MARGIN);
        (u.round() as i64, v.round() as i64)
    };

    let mut buf = vec![255u8; WIDTH * HEIGHT * 3];
    let mut put = |x: i64, y: i64, color: [u8; 3]| {
        if (0..WIDTH as i64).contains(&x) && (0..HEIGHT as i64).contains(&y) {
            let at = (y as usize * WIDTH + x as usize) * 3;
            buf[at..at + 3].copy_from_slice(&color);
        }
    };

    for p in points {
        let (cx, cy) = to_px(p);
        let color = PALETTE[p.machine_id as usize % PALETTE.len()];
        if p.anomalous {
            // A 9x9 cross reads as "marked" even at thumbnail size.
            for d in -4i64..=4 {
                put(cx + d, cy + d, color);
                put(cx + d, cy - d, color);
            }
        } else {
            for dy in -3i64..=3 {
                for dx in -3i64..=3 {
                    if dx * dx + dy * dy <= 9 {
                        put(cx + dx, cy + dy, color);
                    }
                }
            }
        }
    }

    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let file = BufWriter::new(File::create(path)?);
    let mut encoder = png::Encoder::new(file, WIDTH as u32, HEIGHT as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    for (key, value) in metadata {
        encoder.add_text_chunk(key.to_string(), value.clone()).map_err(err)?;
    }
    let mut writer = encoder.write_header().map_err(err)?;
    writer.write_image_data(&buf).map_err(err)?;
    Ok(())
}
