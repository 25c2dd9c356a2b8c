//! Minimal SVG rendering: line plots and heatmaps.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;

const COLORS: &[&str] = &[
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Plot `log10(y)`; nonpositive values are dropped.
    pub log_y: bool,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-3 {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.05 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>
"#,
        (LEFT + W - RIGHT) / 2.0,
        esc(title)
    );
}

impl LinePlot {
    pub fn to_svg(&self) -> String {
        let tf = |y: f64| if self.log_y { y.log10() } else { y };
        let series: Vec<Vec<(f64, f64)>> = self
            .series
            .iter()
            .map(|s| {
                s.points
                    .iter()
                    .filter(|(x, y)| x.is_finite() && y.is_finite() && (!self.log_y || *y > 0.0))
                    .map(|&(x, y)| (x, tf(y)))
                    .collect()
            })
            .collect();
        let (x0, x1) = range(series.iter().flatten().map(|p| p.0));
        let (y0, y1) = range(series.iter().flatten().map(|p| p.1));
        let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

        let mut out = String::new();
        header(&mut out, &self.title);
        let _ = writeln!(
            out,
            r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            let ylab = if self.log_y { format!("1e{}", fmt_tick(yv)) } else { fmt_tick(yv) };
            let _ = writeln!(
                out,
                r##"<line x1="{0:.2}" y1="{1}" x2="{0:.2}" y2="{2}" stroke="#ddd"/><text x="{0:.2}" y="{3}" text-anchor="middle">{4}</text>"##,
                sx(xv),
                TOP,
                TOP + ph,
                TOP + ph + 16.0,
                fmt_tick(xv)
            );
            let _ = writeln!(
                out,
                r##"<line x1="{1}" y1="{0:.2}" x2="{2}" y2="{0:.2}" stroke="#ddd"/><text x="{3}" y="{4:.2}" text-anchor="end">{5}</text>"##,
                sy(yv),
                LEFT,
                LEFT + pw,
                LEFT - 6.0,
                sy(yv) + 4.0,
                ylab
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            H - 14.0,
            esc(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
            TOP + ph / 2.0,
            esc(&self.y_label)
        );
        for (k, (s, pts)) in self.series.iter().zip(&series).enumerate() {
            let color = COLORS[k % COLORS.len()];
            if !pts.is_empty() {
                let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
                let _ = writeln!(
                    out,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                    path.join(" ")
                );
            }
            let ly = TOP + 10.0 + 18.0 * k as f64;
            let _ = writeln!(
                out,
                r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="{color}" stroke-width="2"/><text x="{3}" y="{4}">{5}</text>"#,
                LEFT + pw + 10.0,
                ly,
                LEFT + pw + 30.0,
                LEFT + pw + 36.0,
                ly + 4.0,
                esc(&s.name)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

/// Grid of cells colored by value; `None` cells are hatched grey.
pub fn heatmap(title: &str, x_label: &str, y_label: &str, cols: &[String], rows: &[String], values: &[Vec<Option<f64>>]) -> String {
    let (lo, hi) = range(values.iter().flatten().flatten().copied());
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let (cw, rh) = (pw / cols.len().max(1) as f64, ph / rows.len().max(1) as f64);
    let mut out = String::new();
    header(&mut out, title);
    for (i, row) in values.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let (x, y) = (LEFT + j as f64 * cw, TOP + i as f64 * rh);
            match v {
                Some(v) => {
                    let f = (v - lo) / (hi - lo);
                    // white to dark blue
                    let c = |a: f64, b: f64| (a + (b - a) * f).round() as u8;
                    let _ = writeln!(
                        out,
                        r##"<rect x="{x:.2}" y="{y:.2}" width="{cw:.2}" height="{rh:.2}" fill="#{:02x}{:02x}{:02x}" stroke="white"/><text x="{:.2}" y="{:.2}" text-anchor="middle" fill="{}">{}</text>"##,
                        c(247.0, 8.0),
                        c(251.0, 48.0),
                        c(255.0, 107.0),
                        x + cw / 2.0,
                        y + rh / 2.0 + 4.0,
                        if f > 0.5 { "white" } else { "black" },
                        fmt_tick(*v)
                    );
                }
                None => {
                    let _ = writeln!(
                        out,
                        r##"<rect x="{x:.2}" y="{y:.2}" width="{cw:.2}" height="{rh:.2}" fill="#bbb" stroke="white"/><text x="{:.2}" y="{:.2}" text-anchor="middle">n/a</text>"##,
                        x + cw / 2.0,
                        y + rh / 2.0 + 4.0
                    );
                }
            }
        }
    }
    for (j, c) in cols.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            LEFT + (j as f64 + 0.5) * cw,
            TOP + ph + 16.0,
            esc(c)
        );
    }
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            TOP + (i as f64 + 0.5) * rh + 4.0,
            esc(r)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 14.0,
        esc(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        TOP + ph / 2.0,
        esc(y_label)
    );
    out.push_str("</svg>\n");
    out
}
