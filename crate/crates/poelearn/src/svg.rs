//! Minimal SVG plotting: scatter and line charts with axes and a legend.
//!
//! Output is deterministic for identical inputs. Coordinates are written
//! with four decimals, which is below a pixel at the fixed 640 by 480
//! viewBox and keeps the files diffable.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 28.0;
const MARGIN_B: f64 = 44.0;

pub const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#7f7f7f",
];

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum SeriesKind {
    Scatter,
    Line,
}

pub struct Series {
    pub label: String,
    pub kind: SeriesKind,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn scatter(label: &str, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.to_string(),
            kind: SeriesKind::Scatter,
            points,
        }
    }

    pub fn line(label: &str, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.to_string(),
            kind: SeriesKind::Line,
            points,
        }
    }
}

pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Force 1:1 data aspect, for configuration or workspace views.
    pub equal_aspect: bool,
    pub log_y: bool,
}

impl Plot {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self {
            title: title.to_string(),
            x_label: x_label.to_string(),
            y_label: y_label.to_string(),
            series: Vec::new(),
            equal_aspect: false,
            log_y: false,
        }
    }

    pub fn push(&mut self, series: Series) {
        self.series.push(series);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()?)?;
        Ok(())
    }

    pub fn render(&self) -> Result<String> {
        let points: Vec<(f64, f64)> = self
            .series
            .iter()
            .flat_map(|s| s.points.iter())
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| if self.log_y { (x, y.max(1e-300).log10()) } else { (x, y) })
            .collect();
        if points.is_empty() {
            return Err(Error::Invalid("plot has no finite points".into()));
        }
        let (mut x0, mut x1) = min_max(points.iter().map(|p| p.0));
        let (mut y0, mut y1) = min_max(points.iter().map(|p| p.1));
        pad_range(&mut x0, &mut x1);
        pad_range(&mut y0, &mut y1);
        if self.equal_aspect {
            let span_x = (x1 - x0) / (WIDTH - MARGIN_L - MARGIN_R);
            let span_y = (y1 - y0) / (HEIGHT - MARGIN_T - MARGIN_B);
            let span = span_x.max(span_y);
            grow_to(&mut x0, &mut x1, span * (WIDTH - MARGIN_L - MARGIN_R));
            grow_to(&mut y0, &mut y1, span * (HEIGHT - MARGIN_T - MARGIN_B));
        }
        let sx = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * (WIDTH - MARGIN_L - MARGIN_R);
        let sy = |y: f64| HEIGHT - MARGIN_B - (y - y0) / (y1 - y0) * (HEIGHT - MARGIN_T - MARGIN_B);

        let mut svg = String::new();
        svg.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
             font-family=\"sans-serif\" font-size=\"12\">\n"
        ));
        svg.push_str(&format!(
            "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{:.4}\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
            WIDTH / 2.0,
            escape(&self.title)
        ));

        for (t, x) in ticks(x0, x1) {
            let px = sx(x);
            svg.push_str(&format!(
                "<line x1=\"{px:.4}\" y1=\"{:.4}\" x2=\"{px:.4}\" y2=\"{:.4}\" stroke=\"#dddddd\"/>\n",
                MARGIN_T,
                HEIGHT - MARGIN_B
            ));
            svg.push_str(&format!(
                "<text x=\"{px:.4}\" y=\"{:.4}\" text-anchor=\"middle\">{t}</text>\n",
                HEIGHT - MARGIN_B + 16.0
            ));
        }
        for (t, y) in ticks(y0, y1) {
            let py = sy(y);
            svg.push_str(&format!(
                "<line x1=\"{:.4}\" y1=\"{py:.4}\" x2=\"{:.4}\" y2=\"{py:.4}\" stroke=\"#dddddd\"/>\n",
                MARGIN_L,
                WIDTH - MARGIN_R
            ));
            let label = if self.log_y { format!("1e{t}") } else { t };
            svg.push_str(&format!(
                "<text x=\"{:.4}\" y=\"{:.4}\" text-anchor=\"end\">{label}</text>\n",
                MARGIN_L - 6.0,
                py + 4.0
            ));
        }
        svg.push_str(&format!(
            "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{:.4}\" height=\"{:.4}\" \
             fill=\"none\" stroke=\"black\"/>\n",
            WIDTH - MARGIN_L - MARGIN_R,
            HEIGHT - MARGIN_T - MARGIN_B
        ));
        svg.push_str(&format!(
            "<text x=\"{:.4}\" y=\"{:.4}\" text-anchor=\"middle\">{}</text>\n",
            (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
            HEIGHT - 8.0,
            escape(&self.x_label)
        ));
        svg.push_str(&format!(
            "<text x=\"14\" y=\"{:.4}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.4})\">{}</text>\n",
            (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
            (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
            escape(&self.y_label)
        ));

        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<(f64, f64)> = series
                .points
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|&(x, y)| {
                    let y = if self.log_y { y.max(1e-300).log10() } else { y };
                    (sx(x), sy(y))
                })
                .collect();
            match series.kind {
                SeriesKind::Line => {
                    let path: Vec<String> =
                        pts.iter().map(|(x, y)| format!("{x:.4},{y:.4}")).collect();
                    svg.push_str(&format!(
                        "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                        path.join(" ")
                    ));
                }
                SeriesKind::Scatter => {
                    for (x, y) in &pts {
                        svg.push_str(&format!(
                            "<circle cx=\"{x:.4}\" cy=\"{y:.4}\" r=\"2.5\" fill=\"{color}\" fill-opacity=\"0.7\"/>\n"
                        ));
                    }
                }
            }
            let ly = MARGIN_T + 14.0 + 16.0 * i as f64;
            let lx = WIDTH - MARGIN_R - 150.0;
            svg.push_str(&format!(
                "<rect x=\"{lx:.4}\" y=\"{:.4}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n",
                ly - 9.0
            ));
            svg.push_str(&format!(
                "<text x=\"{:.4}\" y=\"{ly:.4}\">{}</text>\n",
                lx + 14.0,
                escape(&series.label)
            ));
        }
        svg.push_str("</svg>\n");
        Ok(svg)
    }
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

fn pad_range(lo: &mut f64, hi: &mut f64) {
    let span = *hi - *lo;
    let pad = if span > 0.0 { 0.05 * span } else { 0.5 * lo.abs().max(1.0) };
    *lo -= pad;
    *hi += pad;
}

fn grow_to(lo: &mut f64, hi: &mut f64, span: f64) {
    let extra = span - (*hi - *lo);
    if extra > 0.0 {
        *lo -= extra / 2.0;
        *hi += extra / 2.0;
    }
}

/// About five round-number ticks covering [lo, hi].
fn ticks(lo: f64, hi: f64) -> Vec<(String, f64)> {
    let span = hi - lo;
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|&s| s >= raw)
        .unwrap_or(10.0 * mag);
    let mut out = Vec::new();
    let mut t = (lo / step).ceil() * step;
    while t <= hi + 1e-12 * span {
        // Snap to the grid so labels never read -0.
        let snapped = (t / step).round() * step;
        let v = if snapped == 0.0 { 0.0 } else { snapped };
        out.push((format_tick(v, step), v));
        t += step;
    }
    out
}

fn format_tick(v: f64, step: f64) -> String {
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    format!("{v:.decimals$}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
