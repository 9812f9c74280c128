//! Spectrogram grid images with a shared color scale.

use image::{Rgb, RgbImage};
use m2s_add::ndarray::Array2;

use crate::font::{draw_text, text_width, GLYPH_H};

pub const PANEL_W: u32 = 320;
pub const PANEL_H: u32 = 200;
const LEFT: u32 = 110;
const TOP: u32 = 34;
const GAP: u32 = 28;
const BOTTOM: u32 = 56;
const SCALE: u32 = 2;
/// Displayed dynamic range below the loudest bin.
const RANGE_DB: f64 = 80.0;
const INK: Rgb<u8> = Rgb([20, 20, 20]);

/// Dark blue through teal and green to yellow.
fn colormap(t: f64) -> Rgb<u8> {
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let x = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let c = |k: usize| (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

pub struct Row<'a> {
    pub title: &'a str,
    /// `[frames, bins]` dB spectrograms, one per column.
    pub panels: Vec<Array2<f64>>,
    pub duration_s: f64,
}

/// Top-left pixel of panel `(row, col)`.
pub fn panel_origin(row: usize, col: usize) -> (u32, u32) {
    (LEFT + col as u32 * (PANEL_W + GAP), TOP + row as u32 * (PANEL_H + GAP + 10))
}

/// Renders `rows` as a grid of spectrogram panels (time right, frequency up)
/// sharing one color scale: the loudest bin of any panel down to
/// [`RANGE_DB`] below it.
pub fn render_grid(columns: &[&str], rows: &[Row<'_>], nyquist_hz: f64) -> RgbImage {
    let n_cols = columns.len() as u32;
    let n_rows = rows.len();
    let (_, bottom) = panel_origin(n_rows, 0);
    let width = LEFT + n_cols * PANEL_W + (n_cols - 1) * GAP + 20;
    let height = bottom + BOTTOM;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let vmax = rows
        .iter()
        .flat_map(|r| r.panels.iter())
        .flat_map(|p| p.iter())
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let vmin = vmax - RANGE_DB;
    for (c, title) in columns.iter().enumerate() {
        let (x, _) = panel_origin(0, c);
        let tx = x + PANEL_W.saturating_sub(text_width(title, SCALE)) / 2;
        draw_text(&mut img, tx, TOP - 8 - GLYPH_H * SCALE, title, SCALE, INK);
    }
    let khz = format!("{}", nyquist_hz / 1000.0);
    for (r, row) in rows.iter().enumerate() {
        let (_, y) = panel_origin(r, 0);
        draw_text(&mut img, 8, y + PANEL_H / 2, row.title, SCALE, INK);
        for (c, spec) in row.panels.iter().enumerate() {
            let (x0, y0) = panel_origin(r, c);
            let (frames, bins) = spec.dim();
            for px in 0..PANEL_W {
                let f = (px as usize * frames) / PANEL_W as usize;
                for py in 0..PANEL_H {
                    let b = ((PANEL_H - 1 - py) as usize * bins) / PANEL_H as usize;
                    let t = (spec[[f, b]] - vmin) / (vmax - vmin);
                    img.put_pixel(x0 + px, y0 + py, colormap(t));
                }
            }
            // frequency ticks (kHz) and time ticks (s)
            draw_text(&mut img, x0 - text_width(&khz, SCALE) - 4, y0, &khz, SCALE, INK);
            draw_text(&mut img, x0 - text_width("0", SCALE) - 4, y0 + PANEL_H - GLYPH_H * SCALE, "0", SCALE, INK);
            let dur = format!("{:.2}", row.duration_s);
            draw_text(&mut img, x0, y0 + PANEL_H + 3, "0", SCALE, INK);
            draw_text(&mut img, x0 + PANEL_W - text_width(&dur, SCALE), y0 + PANEL_H + 3, &dur, SCALE, INK);
        }
    }
    let legend = format!("X: TIME (S)   Y: FREQ (KHZ)   COLOR: {RANGE_DB} DB RANGE");
    draw_text(&mut img, LEFT, height - 8 - GLYPH_H * SCALE, &legend, SCALE, INK);
    img
}
