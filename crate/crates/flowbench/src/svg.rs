//! Dependency-light SVG plotting: scatter, line, and heatmap primitives
//! with a shared axis frame. Output is plain text assembled in a fixed
//! order with fixed-precision coordinates, so identical inputs produce
//! byte-identical files.

use crate::error::{Error, Result};

pub const PALETTE: [&str; 4] = ["#3b6bb5", "#c23b3b", "#2e8b57", "#8a5cb8"];

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const MARGIN_LEFT: f64 = 72.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 42.0;
const MARGIN_BOTTOM: f64 = 52.0;

#[derive(Debug, Clone, Copy)]
pub struct Series<'a> {
    pub name: &'a str,
    pub points: &'a [(f64, f64)],
}

/// Multi-series line plot. With `log_y` the y axis is log10 and points with
/// non-positive y are dropped from the drawing (they have no position on
/// that axis).
pub fn line_plot(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series<'_>],
    log_y: bool,
) -> Result<String> {
    render_xy(title, x_label, y_label, series, log_y, Mark::Line)
}

/// Multi-series scatter plot on linear axes.
pub fn scatter_plot(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series<'_>],
) -> Result<String> {
    render_xy(title, x_label, y_label, series, false, Mark::Dot)
}

#[derive(Clone, Copy, PartialEq)]
enum Mark {
    Line,
    Dot,
}

fn render_xy(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series<'_>],
    log_y: bool,
    mark: Mark,
) -> Result<String> {
    let usable: Vec<(usize, Vec<(f64, f64)>)> = series
        .iter()
        .enumerate()
        .map(|(si, s)| {
            let pts: Vec<(f64, f64)> = s
                .points
                .iter()
                .copied()
                .filter(|(x, y)| x.is_finite() && y.is_finite() && (!log_y || *y > 0.0))
                .collect();
            (si, pts)
        })
        .collect();
    if usable.iter().all(|(_, pts)| pts.is_empty()) {
        return Err(Error::invalid("nothing to plot: no finite data points"));
    }

    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for (_, pts) in &usable {
        for &(x, y) in pts {
            let y = if log_y { y.log10() } else { y };
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    let (x_min, x_max) = pad_range(x_min, x_max);
    let (y_min, y_max) = pad_range(y_min, y_max);

    let mut svg = String::new();
    frame_open(&mut svg, title, x_label, y_label);
    let map = Mapping { x_min, x_max, y_min, y_max };
    draw_x_ticks(&mut svg, &map);
    if log_y {
        draw_log_y_ticks(&mut svg, &map);
    } else {
        draw_y_ticks(&mut svg, &map);
    }

    for (si, pts) in &usable {
        if pts.is_empty() {
            continue;
        }
        let color = PALETTE[si % PALETTE.len()];
        match mark {
            Mark::Line => {
                let mut attr = String::new();
                for &(x, y) in pts {
                    let y = if log_y { y.log10() } else { y };
                    let (px, py) = map.to_pixel(x, y);
                    if !attr.is_empty() {
                        attr.push(' ');
                    }
                    attr.push_str(&format!("{px:.2},{py:.2}"));
                }
                svg.push_str(&format!(
                    "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{attr}\"/>\n"
                ));
            }
            Mark::Dot => {
                for &(x, y) in pts {
                    let (px, py) = map.to_pixel(x, y);
                    svg.push_str(&format!(
                        "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"2\" fill=\"{color}\" fill-opacity=\"0.6\"/>\n"
                    ));
                }
            }
        }
    }

    draw_legend(&mut svg, series, mark);
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Row-major cell values over the rectangle [x0,x1] x [y0,y1]; row 0 is the
/// bottom row.
#[derive(Debug, Clone)]
pub struct HeatGrid {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
    pub cols: usize,
    pub rows: usize,
    pub values: Vec<f64>,
}

/// Heatmap of a scalar grid, colored from low to high over a fixed ramp.
pub fn heatmap(title: &str, x_label: &str, y_label: &str, grid: &HeatGrid) -> Result<String> {
    if grid.cols == 0 || grid.rows == 0 || grid.values.len() != grid.cols * grid.rows {
        return Err(Error::invalid(format!(
            "heat grid holds {} values for {} x {} cells",
            grid.values.len(),
            grid.cols,
            grid.rows
        )));
    }
    if !(grid.x1 > grid.x0 && grid.y1 > grid.y0) {
        return Err(Error::invalid("heat grid extent is empty"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in &grid.values {
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() {
        return Err(Error::invalid("heat grid has no finite values"));
    }
    let span = if hi > lo { hi - lo } else { 1.0 };

    let mut svg = String::new();
    frame_open(&mut svg, title, x_label, y_label);
    let map = Mapping { x_min: grid.x0, x_max: grid.x1, y_min: grid.y0, y_max: grid.y1 };
    draw_x_ticks(&mut svg, &map);
    draw_y_ticks(&mut svg, &map);

    let cw = (grid.x1 - grid.x0) / grid.cols as f64;
    let ch = (grid.y1 - grid.y0) / grid.rows as f64;
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let v = grid.values[row * grid.cols + col];
            let t = if v.is_finite() { (v - lo) / span } else { 0.0 };
            let color = ramp(t);
            let x = grid.x0 + col as f64 * cw;
            let y = grid.y0 + (row + 1) as f64 * ch;
            let (px, py) = map.to_pixel(x, y);
            let (px1, py1) = map.to_pixel(x + cw, y - ch);
            // a hairline of overlap hides antialiasing seams between cells
            svg.push_str(&format!(
                "<rect x=\"{px:.2}\" y=\"{py:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" fill=\"{color}\"/>\n",
                w = px1 - px + 0.5,
                h = py1 - py + 0.5,
            ));
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Moving average over a trailing window measured on the x axis: the value
/// at x is the mean of all points with x' in (x - window, x]. Inputs must
/// be sorted by x.
pub fn moving_average_by_x(points: &[(f64, f64)], window: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(points.len());
    let mut start = 0;
    let mut sum = 0.0;
    for (i, &(x, y)) in points.iter().enumerate() {
        sum += y;
        while points[start].0 <= x - window {
            sum -= points[start].1;
            start += 1;
        }
        out.push((x, sum / (i - start + 1) as f64));
    }
    out
}

struct Mapping {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Mapping {
    fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let px = MARGIN_LEFT
            + (x - self.x_min) / (self.x_max - self.x_min) * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT);
        let py = HEIGHT
            - MARGIN_BOTTOM
            - (y - self.y_min) / (self.y_max - self.y_min) * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM);
        (px, py)
    }
}

fn pad_range(min: f64, max: f64) -> (f64, f64) {
    if min < max {
        let pad = (max - min) * 0.04;
        (min - pad, max + pad)
    } else {
        let pad = min.abs().max(1.0) * 0.5;
        (min - pad, max + pad)
    }
}

fn frame_open(svg: &mut String, title: &str, x_label: &str, y_label: &str) {
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{x:.1}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{t}</text>\n",
        x = WIDTH / 2.0,
        t = escape(title)
    ));
    svg.push_str(&format!(
        "<text x=\"{x:.1}\" y=\"{y:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{t}</text>\n",
        x = (MARGIN_LEFT + WIDTH - MARGIN_RIGHT) / 2.0,
        y = HEIGHT - 12.0,
        t = escape(x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{y:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 18 {y:.1})\">{t}</text>\n",
        y = (MARGIN_TOP + HEIGHT - MARGIN_BOTTOM) / 2.0,
        t = escape(y_label)
    ));
    // plot frame
    svg.push_str(&format!(
        "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{w:.1}\" height=\"{h:.1}\" fill=\"none\" stroke=\"#444\"/>\n",
        x = MARGIN_LEFT,
        y = MARGIN_TOP,
        w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT,
        h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM,
    ));
}

fn draw_x_ticks(svg: &mut String, map: &Mapping) {
    for tick in nice_ticks(map.x_min, map.x_max) {
        let (px, _) = map.to_pixel(tick, map.y_min);
        let y0 = HEIGHT - MARGIN_BOTTOM;
        svg.push_str(&format!(
            "<line x1=\"{px:.2}\" y1=\"{y0:.1}\" x2=\"{px:.2}\" y2=\"{y1:.1}\" stroke=\"#444\"/>\n",
            y1 = y0 + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{px:.2}\" y=\"{ty:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{label}</text>\n",
            ty = y0 + 18.0,
            label = tick_label(tick)
        ));
    }
}

fn draw_y_ticks(svg: &mut String, map: &Mapping) {
    for tick in nice_ticks(map.y_min, map.y_max) {
        let (_, py) = map.to_pixel(map.x_min, tick);
        svg.push_str(&format!(
            "<line x1=\"{x0:.1}\" y1=\"{py:.2}\" x2=\"{x1:.1}\" y2=\"{py:.2}\" stroke=\"#444\"/>\n",
            x0 = MARGIN_LEFT - 5.0,
            x1 = MARGIN_LEFT
        ));
        svg.push_str(&format!(
            "<text x=\"{tx:.1}\" y=\"{ty:.2}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{label}</text>\n",
            tx = MARGIN_LEFT - 8.0,
            ty = py + 4.0,
            label = tick_label(tick)
        ));
    }
}

fn draw_log_y_ticks(svg: &mut String, map: &Mapping) {
    // map.y_* are log10 values; ticks at integer exponents
    let lo = map.y_min.ceil() as i64;
    let hi = map.y_max.floor() as i64;
    for e in lo..=hi {
        let (_, py) = map.to_pixel(map.x_min, e as f64);
        svg.push_str(&format!(
            "<line x1=\"{x0:.1}\" y1=\"{py:.2}\" x2=\"{x1:.1}\" y2=\"{py:.2}\" stroke=\"#444\"/>\n",
            x0 = MARGIN_LEFT - 5.0,
            x1 = MARGIN_LEFT
        ));
        svg.push_str(&format!(
            "<text x=\"{tx:.1}\" y=\"{ty:.2}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">1e{e}</text>\n",
            tx = MARGIN_LEFT - 8.0,
            ty = py + 4.0,
        ));
    }
}

fn draw_legend(svg: &mut String, series: &[Series<'_>], mark: Mark) {
    let named: Vec<(usize, &str)> = series
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.name.is_empty())
        .map(|(i, s)| (i, s.name))
        .collect();
    if named.len() < 2 {
        return;
    }
    let x = WIDTH - MARGIN_RIGHT - 150.0;
    for (slot, (si, name)) in named.iter().enumerate() {
        let y = MARGIN_TOP + 14.0 + slot as f64 * 16.0;
        let color = PALETTE[si % PALETTE.len()];
        match mark {
            Mark::Line => svg.push_str(&format!(
                "<line x1=\"{x:.1}\" y1=\"{ly:.1}\" x2=\"{x2:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                ly = y - 4.0,
                x2 = x + 18.0
            )),
            Mark::Dot => svg.push_str(&format!(
                "<circle cx=\"{cx:.1}\" cy=\"{cy:.1}\" r=\"3\" fill=\"{color}\"/>\n",
                cx = x + 9.0,
                cy = y - 4.0
            )),
        }
        svg.push_str(&format!(
            "<text x=\"{tx:.1}\" y=\"{y:.1}\" font-family=\"sans-serif\" font-size=\"11\">{name}</text>\n",
            tx = x + 24.0,
            name = escape(name)
        ));
    }
}

/// At most ~6 round ticks (1-2-5 ladder) covering [min, max].
fn nice_ticks(min: f64, max: f64) -> Vec<f64> {
    let span = max - min;
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let step = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    } * mag;
    let first = (min / step).ceil();
    let mut ticks = Vec::new();
    let mut k = first;
    while k * step <= max + step * 1e-9 {
        ticks.push(k * step);
        k += 1.0;
        if ticks.len() > 12 {
            break;
        }
    }
    ticks
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if (1e-3..1e5).contains(&a) {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    } else {
        format!("{v:.1e}")
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Five-stop ramp from dark blue through teal and green to yellow, t in
/// [0, 1].
fn ramp(t: f64) -> String {
    const STOPS: [(f64, f64, f64); 5] = [
        (68.0, 1.0, 84.0),
        (59.0, 82.0, 139.0),
        (33.0, 145.0, 140.0),
        (94.0, 201.0, 98.0),
        (253.0, 231.0, 37.0),
    ];
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let (r0, g0, b0) = STOPS[i];
    let (r1, g1, b1) = STOPS[i + 1];
    format!(
        "#{:02x}{:02x}{:02x}",
        (r0 + (r1 - r0) * f).round() as u8,
        (g0 + (g1 - g0) * f).round() as u8,
        (b0 + (b1 - b0) * f).round() as u8
    )
}
