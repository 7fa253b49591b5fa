//! Minimal static line charts drawn straight into an RGB buffer.
//!
//! Text uses a built-in 3x5 pixel font, upper case only.

use image::{Rgb, RgbImage};

const WIDTH: u32 = 480;
const HEIGHT: u32 = 320;
const LEFT: i32 = 48;
const RIGHT: i32 = 150;
const TOP: i32 = 28;
const BOTTOM: i32 = 36;
const SCALE: i32 = 2;

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const INK: Rgb<u8> = Rgb([30, 30, 30]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

pub const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([214, 39, 40]),
    Rgb([44, 160, 44]),
    Rgb([255, 127, 14]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    /// `(x, y)` with `y` in [0, 1].
    pub points: Vec<(f64, f64)>,
    /// Dashed lines distinguish a second metric drawn in the same color.
    pub dashed: bool,
    pub color: Rgb<u8>,
}

fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        'A' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'B' => [0b110, 0b101, 0b110, 0b101, 0b110],
        'C' => [0b011, 0b100, 0b100, 0b100, 0b011],
        'D' => [0b110, 0b101, 0b101, 0b101, 0b110],
        'E' => [0b111, 0b100, 0b110, 0b100, 0b111],
        'F' => [0b111, 0b100, 0b110, 0b100, 0b100],
        'G' => [0b011, 0b100, 0b101, 0b101, 0b011],
        'H' => [0b101, 0b101, 0b111, 0b101, 0b101],
        'I' => [0b111, 0b010, 0b010, 0b010, 0b111],
        'J' => [0b001, 0b001, 0b001, 0b101, 0b010],
        'K' => [0b101, 0b101, 0b110, 0b101, 0b101],
        'L' => [0b100, 0b100, 0b100, 0b100, 0b111],
        'M' => [0b101, 0b111, 0b111, 0b101, 0b101],
        'N' => [0b110, 0b101, 0b101, 0b101, 0b101],
        'O' => [0b010, 0b101, 0b101, 0b101, 0b010],
        'P' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'Q' => [0b010, 0b101, 0b101, 0b110, 0b011],
        'R' => [0b110, 0b101, 0b110, 0b101, 0b101],
        'S' => [0b011, 0b100, 0b010, 0b001, 0b110],
        'T' => [0b111, 0b010, 0b010, 0b010, 0b010],
        'U' => [0b101, 0b101, 0b101, 0b101, 0b111],
        'V' => [0b101, 0b101, 0b101, 0b101, 0b010],
        'W' => [0b101, 0b101, 0b111, 0b111, 0b101],
        'X' => [0b101, 0b101, 0b010, 0b101, 0b101],
        'Y' => [0b101, 0b101, 0b010, 0b010, 0b010],
        'Z' => [0b111, 0b001, 0b010, 0b100, 0b111],
        '.' => [0, 0, 0, 0, 0b010],
        '-' => [0, 0, 0b111, 0, 0],
        '_' => [0, 0, 0, 0, 0b111],
        '/' => [0b001, 0b001, 0b010, 0b100, 0b100],
        '%' => [0b101, 0b001, 0b010, 0b100, 0b101],
        '(' => [0b010, 0b100, 0b100, 0b100, 0b010],
        ')' => [0b010, 0b001, 0b001, 0b001, 0b010],
        _ => [0; 5],
    }
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn put(&mut self, x: i32, y: i32, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn rect(&mut self, x: i32, y: i32, w: i32, h: i32, c: Rgb<u8>) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.put(xx, yy, c);
            }
        }
    }

    fn line(&mut self, (x0, y0): (i32, i32), (x1, y1): (i32, i32), c: Rgb<u8>, dashed: bool) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err, mut n) = (x0, y0, dx + dy, 0);
        loop {
            if !dashed || (n / 5) % 2 == 0 {
                self.rect(x, y, 2, 2, c);
            }
            n += 1;
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn text(&mut self, x: i32, y: i32, s: &str, c: Rgb<u8>) {
        for (i, ch) in s.to_uppercase().chars().enumerate() {
            let g = glyph(ch);
            let ox = x + i as i32 * 4 * SCALE;
            for (row, bits) in g.iter().enumerate() {
                for col in 0..3 {
                    if bits & (0b100 >> col) != 0 {
                        self.rect(ox + col * SCALE, y + row as i32 * SCALE, SCALE, SCALE, c);
                    }
                }
            }
        }
    }

    fn text_width(s: &str) -> i32 {
        s.chars().count() as i32 * 4 * SCALE
    }
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Render a chart with a fixed [0, 1] y axis.
pub fn line_chart(title: &str, x_label: &str, series: &[Series]) -> RgbImage {
    let mut c = Canvas {
        img: RgbImage::from_pixel(WIDTH, HEIGHT, BG),
    };
    let (w, h) = (WIDTH as i32, HEIGHT as i32);
    let (x0, x1, y0, y1) = (LEFT, w - RIGHT, h - BOTTOM, TOP);
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let (mut lo, mut hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let px = |x: f64| x0 + ((x - lo) / (hi - lo) * f64::from(x1 - x0)).round() as i32;
    let py = |y: f64| y0 - (y.clamp(0.0, 1.0) * f64::from(y0 - y1)).round() as i32;

    for i in 0..=4 {
        let v = f64::from(i) / 4.0;
        c.line((x0, py(v)), (x1, py(v)), GRID, false);
        let label = fmt_tick(v);
        c.text(x0 - 6 - Canvas::text_width(&label), py(v) - 5, &label, INK);
    }
    let mut ticks: Vec<f64> = xs.clone();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for &t in &ticks {
        c.line((px(t), y0), (px(t), y0 + 4), INK, false);
        let label = fmt_tick(t);
        c.text(px(t) - Canvas::text_width(&label) / 2, y0 + 8, &label, INK);
    }
    c.line((x0, y0), (x1, y0), INK, false);
    c.line((x0, y0), (x0, y1), INK, false);
    c.text(x0, 8, title, INK);
    c.text((x0 + x1) / 2 - Canvas::text_width(x_label) / 2, h - 14, x_label, INK);

    for (si, s) in series.iter().enumerate() {
        let mut pts: Vec<(i32, i32)> = s.points.iter().map(|&(x, y)| (px(x), py(y))).collect();
        pts.sort();
        for pair in pts.windows(2) {
            c.line(pair[0], pair[1], s.color, s.dashed);
        }
        for &(x, y) in &pts {
            c.rect(x - 3, y - 3, 7, 7, s.color);
        }
        let ly = TOP + si as i32 * 16;
        let lx = x1 + 12;
        c.line((lx, ly + 4), (lx + 16, ly + 4), s.color, s.dashed);
        c.text(lx + 22, ly, &s.name, INK);
    }
    c.img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_has_fixed_size_and_draws_series() {
        let s = Series {
            name: "cc rank1".into(),
            points: vec![(0.0, 0.5), (0.1, 0.7)],
            dashed: false,
            color: PALETTE[1],
        };
        let img = line_chart("noise", "noise ratio", &[s]);
        assert_eq!(img.dimensions(), (WIDTH, HEIGHT));
        assert!(img.pixels().any(|p| *p == PALETTE[1]));
        let empty = line_chart("x", "y", &[]);
        assert!(!empty.pixels().any(|p| *p == PALETTE[1]));
    }
}
