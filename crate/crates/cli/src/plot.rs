//! Minimal static SVG charts: a labelled scatter and step-function CDFs.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Axes {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Axes {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Self {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        let pad = |lo: f64, hi: f64| {
            let span = if hi > lo { hi - lo } else { 1.0 };
            (lo - 0.05 * span, hi + 0.05 * span)
        };
        let (x0, x1) = pad(x0, x1);
        let (y0, y1) = pad(y0, y1);
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }
}

fn frame(svg: &mut String, title: &str, x_label: &str, y_label: &str, axes: &Axes) {
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(svg, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title)).unwrap();
    let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
    writeln!(svg, r#"<path d="M{l},{t} L{l},{b} L{r},{b}" fill="none" stroke="black"/>"#).unwrap();
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = axes.x0 + f * (axes.x1 - axes.x0);
        let yv = axes.y0 + f * (axes.y1 - axes.y0);
        let (x, y) = (axes.px(xv), axes.py(yv));
        writeln!(svg, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{xv:.3}</text>"#, b + 16.0).unwrap();
        writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#, l - 6.0, y + 4.0).unwrap();
    }
    writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 16.0, escape(x_label)).unwrap();
    writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    )
    .unwrap();
}

/// One dot per labelled point.
pub fn scatter_svg(title: &str, x_label: &str, y_label: &str, points: &[(String, f64, f64)]) -> String {
    let axes = Axes::fit(points.iter().map(|(_, x, y)| (*x, *y)));
    let mut svg = String::new();
    frame(&mut svg, title, x_label, y_label, &axes);
    for (i, (label, x, y)) in points.iter().enumerate() {
        if !(x.is_finite() && y.is_finite()) {
            continue;
        }
        let (cx, cy) = (axes.px(*x), axes.py(*y));
        let color = COLORS[i % COLORS.len()];
        writeln!(svg, r#"<circle cx="{cx:.1}" cy="{cy:.1}" r="5" fill="{color}"/>"#).unwrap();
        writeln!(svg, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, cx + 8.0, cy - 6.0, escape(label)).unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

/// Step functions over integer x, one per series, with a legend.
pub fn cdf_svg(title: &str, series: &[Series]) -> String {
    let axes = Axes::fit(
        series
            .iter()
            .flat_map(|s| s.points.iter().copied())
            .chain([(0.0, 0.0), (0.0, 1.0)]),
    );
    let mut svg = String::new();
    frame(&mut svg, title, "distinct architectures (k)", "fraction of tasks with at most k", &axes);
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut d = String::new();
        let mut prev: Option<f64> = None;
        for &(x, y) in &s.points {
            let (px, py) = (axes.px(x), axes.py(y));
            match prev {
                None => write!(d, "M{:.1},{py:.1}", axes.px(x - 1.0)).unwrap(),
                Some(prev_y) => write!(d, " L{px:.1},{:.1}", axes.py(prev_y)).unwrap(),
            }
            write!(d, " L{px:.1},{py:.1}").unwrap();
            prev = Some(y);
        }
        writeln!(svg, r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="2"/>"#).unwrap();
        let ly = MARGIN + 16.0 * i as f64;
        writeln!(
            svg,
            r#"<text x="{:.1}" y="{ly:.1}" fill="{color}">{}</text>"#,
            W - MARGIN - 120.0,
            escape(&s.label)
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}
