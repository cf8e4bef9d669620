//! PNG heatmaps with a fixed perceptually-uniform colormap, min/max and
//! axes extents annotated in the margin with a small bitmap font.

use image::{Rgb, RgbImage};
use pegp::grid::Field;
use pegp::io::fmt_g9;

/// Viridis anchors, linearly interpolated.
const VIRIDIS: [[u8; 3]; 16] = [
    [68, 1, 84],
    [72, 26, 108],
    [71, 47, 125],
    [65, 68, 135],
    [57, 86, 140],
    [49, 104, 142],
    [42, 120, 142],
    [35, 136, 142],
    [31, 152, 139],
    [34, 168, 132],
    [53, 183, 121],
    [84, 197, 104],
    [122, 209, 81],
    [165, 219, 54],
    [210, 226, 27],
    [253, 231, 37],
];

fn colormap(t: f64) -> Rgb<u8> {
    if t.is_nan() {
        return Rgb([128, 128, 128]);
    }
    let t = t.clamp(0.0, 1.0) * 15.0;
    let lo = t.floor() as usize;
    let hi = (lo + 1).min(15);
    let frac = t - lo as f64;
    let mix = |a: u8, b: u8| (a as f64 + frac * (b as f64 - a as f64)).round() as u8;
    Rgb([
        mix(VIRIDIS[lo][0], VIRIDIS[hi][0]),
        mix(VIRIDIS[lo][1], VIRIDIS[hi][1]),
        mix(VIRIDIS[lo][2], VIRIDIS[hi][2]),
    ])
}

/// 5x7 glyphs; each byte is one row, low 5 bits used.
fn glyph(c: char) -> [u8; 7] {
    match c {
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
        '.' => [0, 0, 0, 0, 0, 0x0C, 0x0C],
        '-' => [0, 0, 0, 0x1F, 0, 0, 0],
        '+' => [0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0],
        'e' => [0, 0, 0x0E, 0x11, 0x1F, 0x10, 0x0E],
        '=' => [0, 0, 0x1F, 0, 0x1F, 0, 0],
        'm' => [0, 0, 0x1A, 0x15, 0x15, 0x15, 0x15],
        'i' => [0x04, 0, 0x0C, 0x04, 0x04, 0x04, 0x0E],
        'n' => [0, 0, 0x16, 0x19, 0x11, 0x11, 0x11],
        'a' => [0, 0, 0x0E, 0x01, 0x0F, 0x11, 0x0F],
        'x' => [0, 0, 0x11, 0x0A, 0x04, 0x0A, 0x11],
        's' => [0, 0, 0x0F, 0x10, 0x0E, 0x01, 0x1E],
        't' => [0x08, 0x08, 0x1E, 0x08, 0x08, 0x09, 0x06],
        _ => [0; 7],
    }
}

fn draw_text(img: &mut RgbImage, x0: u32, y0: u32, text: &str) {
    let mut x = x0;
    for c in text.chars() {
        let g = glyph(c);
        for (row, bits) in g.iter().enumerate() {
            for col in 0..5u32 {
                if bits & (0x10 >> col) != 0 {
                    let (px, py) = (x + col, y0 + row as u32);
                    if px < img.width() && py < img.height() {
                        img.put_pixel(px, py, Rgb([0, 0, 0]));
                    }
                }
            }
        }
        x += 6;
    }
}

fn finite_min_max(panels: &[&pegp::nalgebra::DMatrix<f64>]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for m in panels {
        for &v in m.iter() {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo, lo + 1.0)
    } else {
        (lo, hi)
    }
}

/// Render one variable: the mean panel on the left and, when given, the
/// uncertainty panel on the right.
pub fn heatmap_png(
    field: &Field,
    values: &pegp::nalgebra::DMatrix<f64>,
    variance: Option<&pegp::nalgebra::DMatrix<f64>>,
) -> RgbImage {
    let g = &field.grid;
    let scale = 6u32;
    let (pw, ph) = (g.nt as u32 * scale, g.nx as u32 * scale);
    let gap = if variance.is_some() { 8 } else { 0 };
    let npanels = if variance.is_some() { 2 } else { 1 };
    let (ml, mt, mb) = (4u32, 4u32, 40u32);
    let width = ml + npanels * pw + gap + 4;
    let height = mt + ph + mb;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));

    let mut draw_panel = |x_off: u32, data: &pegp::nalgebra::DMatrix<f64>| {
        let (lo, hi) = finite_min_max(&[data]);
        for i in 0..g.nx {
            for j in 0..g.nt {
                let v = data[(i, j)];
                let c = colormap((v - lo) / (hi - lo));
                // space on the vertical axis, top = x_max; time horizontal
                let py0 = mt + (g.nx - 1 - i) as u32 * scale;
                let px0 = x_off + j as u32 * scale;
                for dy in 0..scale {
                    for dx in 0..scale {
                        img.put_pixel(px0 + dx, py0 + dy, c);
                    }
                }
            }
        }
        (lo, hi)
    };

    let (lo, hi) = draw_panel(ml, values);
    if let Some(var) = variance {
        draw_panel(ml + pw + gap, var);
    }

    let line1 = format!("min={} max={}", fmt_g9(lo), fmt_g9(hi));
    let line2 = format!(
        "x={}..{} m  t={}..{} s",
        trim_num(g.x_min),
        trim_num(g.x_max),
        trim_num(g.t_min),
        trim_num(g.t_max)
    );
    draw_text(&mut img, ml, mt + ph + 6, &line1);
    draw_text(&mut img, ml, mt + ph + 18, &line2);
    img
}

fn trim_num(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e9 {
        format!("{}", v as i64)
    } else {
        format!("{v:.1}")
    }
}
