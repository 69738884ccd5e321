//! Line charts rendered straight to SVG and PNG, no plotting library.
//!
//! The SVG side writes markup with text labels; the PNG side rasterizes
//! the same layout into an RGB buffer using a built-in 5x7 uppercase
//! font. Both are deterministic functions of the chart data, so plot
//! files can be diffed across runs like any other report artifact.

use anyhow::{Context, Result};
use std::fmt::Write as _;
use std::path::Path;

const WIDTH: u32 = 800;
const HEIGHT: u32 = 500;
const MARGIN_L: f64 = 72.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 46.0;
const MARGIN_B: f64 = 54.0;

const PALETTE: [(u8, u8, u8); 6] = [
    (0x1f, 0x77, 0xb4),
    (0xd6, 0x27, 0x28),
    (0x2c, 0xa0, 0x2c),
    (0xff, 0x7f, 0x0e),
    (0x94, 0x67, 0xbd),
    (0x7f, 0x7f, 0x7f),
];

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

impl Chart {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Chart {
            title: title.to_string(),
            x_label: x_label.to_string(),
            y_label: y_label.to_string(),
            series: Vec::new(),
        }
    }

    pub fn with_series(mut self, name: &str, points: Vec<(f64, f64)>) -> Self {
        self.series.push(Series { name: name.to_string(), points });
        self
    }

    fn ranges(&self) -> ([f64; 2], [f64; 2]) {
        let mut x = [f64::INFINITY, f64::NEG_INFINITY];
        let mut y = [f64::INFINITY, f64::NEG_INFINITY];
        for s in &self.series {
            for &(px, py) in &s.points {
                x[0] = x[0].min(px);
                x[1] = x[1].max(px);
                y[0] = y[0].min(py);
                y[1] = y[1].max(py);
            }
        }
        if !x[0].is_finite() {
            return ([0.0, 1.0], [0.0, 1.0]);
        }
        let widen = |r: [f64; 2], pad_frac: f64| -> [f64; 2] {
            if r[0] == r[1] {
                let pad = r[0].abs().max(1.0) * 0.1;
                [r[0] - pad, r[1] + pad]
            } else {
                let pad = (r[1] - r[0]) * pad_frac;
                [r[0] - pad, r[1] + pad]
            }
        };
        (widen(x, 0.0), widen(y, 0.05))
    }

    /// Writes `<stem>.svg` and `<stem>.png` next to each other.
    pub fn write_both(&self, dir: &Path, stem: &str) -> Result<()> {
        self.write_svg(&dir.join(format!("{stem}.svg")))?;
        self.write_png(&dir.join(format!("{stem}.png")))
    }

    pub fn write_svg(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_svg())
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    fn to_svg(&self) -> String {
        let (xr, yr) = self.ranges();
        let px = |v: f64| MARGIN_L + (v - xr[0]) / (xr[1] - xr[0]) * plot_w();
        let py = |v: f64| HEIGHT as f64 - MARGIN_B - (v - yr[0]) / (yr[1] - yr[0]) * plot_h();

        let mut s = String::new();
        let _ = writeln!(
            s,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
        );
        let _ = writeln!(s, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"#ffffff\"/>");
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>",
            WIDTH / 2,
            escape(&self.title)
        );

        for (tx, label) in ticks(xr) {
            let x = px(tx);
            let _ = writeln!(
                s,
                "<line x1=\"{x:.1}\" y1=\"{0:.1}\" x2=\"{x:.1}\" y2=\"{1:.1}\" stroke=\"#dddddd\"/>",
                MARGIN_T,
                HEIGHT as f64 - MARGIN_B
            );
            let _ = writeln!(
                s,
                "<text x=\"{x:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{label}</text>",
                HEIGHT as f64 - MARGIN_B + 16.0
            );
        }
        for (ty, label) in ticks(yr) {
            let y = py(ty);
            let _ = writeln!(
                s,
                "<line x1=\"{0:.1}\" y1=\"{y:.1}\" x2=\"{1:.1}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/>",
                MARGIN_L,
                WIDTH as f64 - MARGIN_R
            );
            let _ = writeln!(
                s,
                "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{label}</text>",
                MARGIN_L - 6.0,
                y + 4.0
            );
        }
        let _ = writeln!(
            s,
            "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"#333333\"/>",
            plot_w(),
            plot_h()
        );

        for (i, series) in self.series.iter().enumerate() {
            let (r, g, b) = PALETTE[i % PALETTE.len()];
            let color = format!("#{r:02x}{g:02x}{b:02x}");
            if !series.points.is_empty() {
                let pts: Vec<String> = series
                    .points
                    .iter()
                    .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                    .collect();
                let _ = writeln!(
                    s,
                    "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
                    pts.join(" ")
                );
            }
            let ly = MARGIN_T + 14.0 + 16.0 * i as f64;
            let lx = WIDTH as f64 - MARGIN_R - 150.0;
            let _ = writeln!(
                s,
                "<line x1=\"{lx:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"3\"/>",
                lx + 18.0
            );
            let _ = writeln!(
                s,
                "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
                lx + 24.0,
                ly + 4.0,
                escape(&series.name)
            );
        }

        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>",
            WIDTH / 2,
            HEIGHT as f64 - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            "<text x=\"18\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 18 {0})\">{1}</text>",
            HEIGHT / 2,
            escape(&self.y_label)
        );
        s.push_str("</svg>\n");
        s
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let (xr, yr) = self.ranges();
        let px = |v: f64| MARGIN_L + (v - xr[0]) / (xr[1] - xr[0]) * plot_w();
        let py = |v: f64| HEIGHT as f64 - MARGIN_B - (v - yr[0]) / (yr[1] - yr[0]) * plot_h();

        let mut img = image::RgbImage::from_pixel(WIDTH, HEIGHT, image::Rgb([255, 255, 255]));
        let grey = (221, 221, 221);
        let dark = (51, 51, 51);

        for (tx, label) in ticks(xr) {
            let x = px(tx);
            draw_line(&mut img, x, MARGIN_T, x, HEIGHT as f64 - MARGIN_B, grey, 1.0);
            let w = text_width(&label, 1);
            draw_text(
                &mut img,
                &label,
                x - w as f64 / 2.0,
                HEIGHT as f64 - MARGIN_B + 8.0,
                1,
                dark,
            );
        }
        for (ty, label) in ticks(yr) {
            let y = py(ty);
            draw_line(&mut img, MARGIN_L, y, WIDTH as f64 - MARGIN_R, y, grey, 1.0);
            let w = text_width(&label, 1);
            draw_text(&mut img, &label, MARGIN_L - 8.0 - w as f64, y - 3.0, 1, dark);
        }
        draw_rect(&mut img, MARGIN_L, MARGIN_T, plot_w(), plot_h(), dark);

        for (i, series) in self.series.iter().enumerate() {
            let (r, g, b) = PALETTE[i % PALETTE.len()];
            let color = (r, g, b);
            for w in series.points.windows(2) {
                draw_line(&mut img, px(w[0].0), py(w[0].1), px(w[1].0), py(w[1].1), color, 2.0);
            }
            if series.points.len() == 1 {
                let (x, y) = series.points[0];
                draw_line(&mut img, px(x) - 2.0, py(y), px(x) + 2.0, py(y), color, 2.0);
            }
            let ly = MARGIN_T + 10.0 + 14.0 * i as f64;
            let lx = WIDTH as f64 - MARGIN_R - 150.0;
            draw_line(&mut img, lx, ly, lx + 16.0, ly, color, 3.0);
            draw_text(&mut img, &series.name, lx + 22.0, ly - 4.0, 1, dark);
        }

        let tw = text_width(&self.title, 2);
        draw_text(&mut img, &self.title, (WIDTH as f64 - tw as f64) / 2.0, 14.0, 2, dark);
        let xw = text_width(&self.x_label, 1);
        draw_text(
            &mut img,
            &self.x_label,
            (WIDTH as f64 - xw as f64) / 2.0,
            HEIGHT as f64 - 22.0,
            1,
            dark,
        );
        draw_text(&mut img, &self.y_label, 6.0, MARGIN_T - 18.0, 1, dark);

        img.save(path).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn plot_w() -> f64 {
    WIDTH as f64 - MARGIN_L - MARGIN_R
}

fn plot_h() -> f64 {
    HEIGHT as f64 - MARGIN_T - MARGIN_B
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// About five round-number ticks across a range.
fn ticks(r: [f64; 2]) -> Vec<(f64, String)> {
    let span = r[1] - r[0];
    let raw = span / 4.0;
    let mag = 10f64.powf(raw.abs().log10().floor());
    let norm = raw / mag;
    let step = if norm < 1.5 {
        mag
    } else if norm < 3.5 {
        2.0 * mag
    } else if norm < 7.5 {
        5.0 * mag
    } else {
        10.0 * mag
    };
    let mut out = Vec::new();
    let mut t = (r[0] / step).ceil() * step;
    while t <= r[1] + step * 1e-9 {
        let v = if t.abs() < step * 1e-9 { 0.0 } else { t };
        out.push((v, fmt_num(v)));
        t += step;
    }
    out
}

/// Short human formatting: fixed up to three decimals, scientific for
/// extreme magnitudes.
pub fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if !(1e-3..1e6).contains(&a) {
        return format!("{v:.1e}");
    }
    let mut s = format!("{v:.3}");
    while s.contains('.') && (s.ends_with('0') || s.ends_with('.')) {
        s.pop();
    }
    s
}

fn put(img: &mut image::RgbImage, x: i64, y: i64, c: (u8, u8, u8)) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, image::Rgb([c.0, c.1, c.2]));
    }
}

fn draw_line(img: &mut image::RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, c: (u8, u8, u8), w: f64) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    let half = ((w / 2.0).ceil() as i64).max(0);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = x0 + (x1 - x0) * t;
        let y = y0 + (y1 - y0) * t;
        for dx in -half..=half {
            for dy in -half..=half {
                if dx * dx + dy * dy <= half * half {
                    put(img, x.round() as i64 + dx, y.round() as i64 + dy, c);
                }
            }
        }
    }
}

fn draw_rect(img: &mut image::RgbImage, x: f64, y: f64, w: f64, h: f64, c: (u8, u8, u8)) {
    draw_line(img, x, y, x + w, y, c, 1.0);
    draw_line(img, x, y + h, x + w, y + h, c, 1.0);
    draw_line(img, x, y, x, y + h, c, 1.0);
    draw_line(img, x + w, y, x + w, y + h, c, 1.0);
}

/// 5x7 uppercase glyphs, one byte of 5 bits per row.
fn glyph(ch: char) -> [u8; 7] {
    match ch.to_ascii_uppercase() {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
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
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
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
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '%' => [0x19, 0x1A, 0x02, 0x04, 0x08, 0x0B, 0x13],
        '/' => [0x01, 0x02, 0x02, 0x04, 0x08, 0x08, 0x10],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        ' ' => [0x00; 7],
        _ => [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F],
    }
}

fn text_width(s: &str, scale: u32) -> u32 {
    s.chars().count() as u32 * 6 * scale
}

fn draw_text(img: &mut image::RgbImage, s: &str, x: f64, y: f64, scale: u32, c: (u8, u8, u8)) {
    let mut cx = x.round() as i64;
    let cy = y.round() as i64;
    for ch in s.chars() {
        let rows = glyph(ch);
        for (ry, bits) in rows.iter().enumerate() {
            for rx in 0..5 {
                if bits & (0x10 >> rx) != 0 {
                    for sy in 0..scale as i64 {
                        for sx in 0..scale as i64 {
                            put(
                                img,
                                cx + rx as i64 * scale as i64 + sx,
                                cy + ry as i64 * scale as i64 + sy,
                                c,
                            );
                        }
                    }
                }
            }
        }
        cx += 6 * scale as i64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_chart() -> Chart {
        Chart::new("Loss over epochs", "epoch", "loss")
            .with_series("total", vec![(0.0, 2.0), (1.0, 1.2), (2.0, 0.9), (3.0, 0.85)])
            .with_series("cls", vec![(0.0, 1.5), (1.0, 0.8), (2.0, 0.6), (3.0, 0.55)])
    }

    #[test]
    fn svg_contains_series_and_labels() {
        let svg = demo_chart().to_svg();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains("Loss over epochs"));
        assert!(svg.contains("total"));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn both_files_appear_and_png_parses() {
        let dir = tempfile::tempdir().unwrap();
        demo_chart().write_both(dir.path(), "loss").unwrap();
        assert!(dir.path().join("loss.svg").exists());
        let img = image::open(dir.path().join("loss.png")).unwrap();
        assert_eq!(img.width(), WIDTH);
        assert_eq!(img.height(), HEIGHT);
    }

    #[test]
    fn empty_chart_still_renders_axes() {
        let dir = tempfile::tempdir().unwrap();
        let chart = Chart::new("Empty", "x", "y");
        chart.write_both(dir.path(), "empty").unwrap();
        assert!(chart.to_svg().contains("<rect"));
    }

    #[test]
    fn tick_values_are_round_and_cover_the_range() {
        let t = ticks([0.0, 1.0]);
        assert!(t.len() >= 3 && t.len() <= 7, "{t:?}");
        assert_eq!(t[0].0, 0.0);
        let t = ticks([-0.37, 12.4]);
        assert!(t.iter().all(|(v, _)| *v >= -0.37 && *v <= 12.4));
    }

    #[test]
    fn number_formatting_is_compact() {
        assert_eq!(fmt_num(0.0), "0");
        assert_eq!(fmt_num(0.5), "0.5");
        assert_eq!(fmt_num(3.0), "3");
        assert_eq!(fmt_num(0.125), "0.125");
        assert_eq!(fmt_num(2.5e7), "2.5e7");
    }
}
