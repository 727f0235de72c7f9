//! Static raster output: attention panels and comparison bar charts, drawn
//! directly with the image crate and a small embedded 5×7 bitmap font.

use gapfill::model::AttentionVolume;
use image::{Rgb, RgbImage};

const GLYPH_W: u32 = 5;
const GLYPH_H: u32 = 7;

/// 5×7 glyphs; each byte is one row, low 5 bits used (MSB of the 5 on the left).
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        _ => [0x00; 7], // space and anything unknown
    }
}

pub fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, scale: u32, color: Rgb<u8>) {
    let mut cx = x;
    for c in text.chars() {
        let bits = glyph(c);
        for (row, rowbits) in bits.iter().enumerate() {
            for col in 0..GLYPH_W {
                if rowbits & (1 << (GLYPH_W - 1 - col)) != 0 {
                    for dy in 0..scale {
                        for dx in 0..scale {
                            let px = cx + col * scale + dx;
                            let py = y + row as u32 * scale + dy;
                            if px < img.width() && py < img.height() {
                                img.put_pixel(px, py, color);
                            }
                        }
                    }
                }
            }
        }
        cx += (GLYPH_W + 1) * scale;
    }
}

pub fn text_width(text: &str, scale: u32) -> u32 {
    text.chars().count() as u32 * (GLYPH_W + 1) * scale
}

/// Attention color code: black (no attention) to yellow (maximum attention).
fn black_to_yellow(v: f64) -> Rgb<u8> {
    let c = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([c, c, 0])
}

/// One panel per attention head: rows are query frames, columns key frames,
/// each cell the (upsampled) spatial attention map, normalized per panel to
/// its maximum before color mapping.
pub fn attention_panel(attn: &AttentionVolume, head: usize) -> RgbImage {
    let (_, tq, tk, h, w) = attn.scores.dim();
    let sep = 2u32;
    let width = tk as u32 * (w as u32 + sep) + sep;
    let height = tq as u32 * (h as u32 + sep) + sep;
    let mut img = RgbImage::from_pixel(width, height, Rgb([40, 40, 40]));

    let mut max = 0.0f64;
    for q in 0..tq {
        for k in 0..tk {
            for y in 0..h {
                for x in 0..w {
                    max = max.max(attn.scores[[head, q, k, y, x]]);
                }
            }
        }
    }
    if max <= 0.0 {
        max = 1.0;
    }

    for q in 0..tq {
        for k in 0..tk {
            let ox = sep + k as u32 * (w as u32 + sep);
            let oy = sep + q as u32 * (h as u32 + sep);
            for y in 0..h {
                for x in 0..w {
                    let v = attn.scores[[head, q, k, y, x]] / max;
                    img.put_pixel(ox + x as u32, oy + y as u32, black_to_yellow(v));
                }
            }
        }
    }
    img
}

/// Simple bar chart of one metric across methods.
pub fn bar_chart(title: &str, entries: &[(String, f64)]) -> RgbImage {
    let width = 120 + entries.len() as u32 * 110;
    let height = 320u32;
    let mut img = RgbImage::from_pixel(width.max(360), height, Rgb([255, 255, 255]));

    let fg = Rgb([20, 20, 20]);
    let axis_left = 70u32;
    let axis_bottom = height - 50;
    let axis_top = 50u32;

    draw_text(&mut img, 10, 12, title, 2, fg);

    let max_val = entries
        .iter()
        .map(|(_, v)| if v.is_finite() { *v } else { 0.0 })
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let scale_max = max_val * 1.15;

    // Axes.
    for y in axis_top..=axis_bottom {
        img.put_pixel(axis_left, y, fg);
    }
    for x in axis_left..(img.width() - 20) {
        img.put_pixel(x, axis_bottom, fg);
    }
    // Gridlines with tick labels.
    for tick in 1..=4u32 {
        let frac = tick as f64 / 4.0;
        let y = axis_bottom - ((axis_bottom - axis_top) as f64 * frac) as u32;
        for x in (axis_left..(img.width() - 20)).step_by(4) {
            img.put_pixel(x, y, Rgb([210, 210, 210]));
        }
        let label = format_value(scale_max * frac);
        draw_text(&mut img, 4, y.saturating_sub(3), &label, 1, fg);
    }

    let bar_w = 56u32;
    let slot = 110u32;
    for (i, (name, value)) in entries.iter().enumerate() {
        let x0 = axis_left + 30 + i as u32 * slot;
        let v = if value.is_finite() { *value } else { scale_max };
        let bar_h = ((axis_bottom - axis_top) as f64 * (v / scale_max))
            .round()
            .min((axis_bottom - axis_top) as f64) as u32;
        for y in (axis_bottom - bar_h)..axis_bottom {
            for x in x0..(x0 + bar_w) {
                img.put_pixel(x, y, Rgb([60, 100, 180]));
            }
        }
        let label = if value.is_finite() {
            format_value(*value)
        } else {
            "INF".to_string()
        };
        let lx = x0 + bar_w / 2 - text_width(&label, 1) / 2;
        draw_text(&mut img, lx, axis_bottom - bar_h - 12, &label, 1, fg);
        let nx = x0 + bar_w / 2 - text_width(name, 1).min(x0 + bar_w / 2) / 2;
        draw_text(&mut img, nx, axis_bottom + 8, name, 1, fg);
    }
    img
}

fn format_value(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 100.0 {
        format!("{v:.1}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.4}")
    }
}
