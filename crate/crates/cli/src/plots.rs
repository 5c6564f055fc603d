//! Static SVG charts.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let widen = |(a, b): (f64, f64)| if b > a { (a, b) } else { (a - 0.5, a + 0.5) };
        Self { x: widen(x), y: widen(y) }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * MARGIN)
    }
}

fn open(svg: &mut String, title: &str) {
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = write!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(svg, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
}

fn axes(svg: &mut String, f: &Frame, xlabel: &str, ylabel: &str, yticks: usize) {
    let (x0, x1, y0, y1) = (MARGIN, W - MARGIN, H - MARGIN, MARGIN);
    let _ = write!(svg, r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>"#);
    for i in 0..=yticks {
        let v = f.y.0 + (f.y.1 - f.y.0) * i as f64 / yticks as f64;
        let y = f.py(v);
        let _ = write!(svg, r##"<line x1="{x0}" x2="{x1}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/>"##);
        let _ = write!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, x0 - 6.0, y + 4.0, tick(v));
    }
    let _ = write!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 14.0, escape(xlabel));
    let _ = write!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 || (v != 0.0 && v.abs() < 0.01) {
        format!("{v:.1e}")
    } else {
        format!("{:.2}", v)
    }
}

/// Bars in `[0, 1]` with optional interval whiskers; undefined values are
/// marked `n/a`.
pub fn bar_chart(title: &str, ylabel: &str, labels: &[String], values: &[Option<f64>], ci: &[Option<[f64; 2]>]) -> String {
    let f = Frame::new((0.0, labels.len().max(1) as f64), (0.0, 1.0));
    let mut svg = String::new();
    open(&mut svg, title);
    axes(&mut svg, &f, "marker", ylabel, 5);
    let slot = (W - 2.0 * MARGIN) / labels.len().max(1) as f64;
    for (i, label) in labels.iter().enumerate() {
        let cx = MARGIN + slot * (i as f64 + 0.5);
        match values.get(i).copied().flatten() {
            Some(v) => {
                let top = f.py(v.clamp(0.0, 1.0));
                let _ = write!(
                    svg,
                    r#"<rect x="{:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                    cx - slot * 0.3,
                    slot * 0.6,
                    f.py(0.0) - top,
                    PALETTE[i % PALETTE.len()]
                );
                let _ = write!(svg, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{v:.3}</text>"#, top - 6.0);
            }
            None => {
                let _ = write!(svg, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">n/a</text>"#, f.py(0.0) - 6.0);
            }
        }
        if let Some([lo, hi]) = ci.get(i).copied().flatten() {
            let (ylo, yhi) = (f.py(lo.clamp(0.0, 1.0)), f.py(hi.clamp(0.0, 1.0)));
            let _ = write!(
                svg,
                r#"<path d="M{cx:.1} {ylo:.1} L{cx:.1} {yhi:.1} M{:.1} {ylo:.1} L{:.1} {ylo:.1} M{:.1} {yhi:.1} L{:.1} {yhi:.1}" stroke="black"/>"#,
                cx - 6.0,
                cx + 6.0,
                cx - 6.0,
                cx + 6.0
            );
        }
        let _ = write!(svg, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, H - MARGIN + 16.0, escape(label));
    }
    svg.push_str("</svg>\n");
    svg
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
}

/// One polyline per series over a shared x axis.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, xs: &[f64], series: &[(String, Vec<f64>)]) -> String {
    let (x0, x1) = bounds(xs.iter().copied());
    let (y0, y1) = bounds(series.iter().flat_map(|(_, v)| v.iter().copied()));
    let f = Frame::new(if x0.is_finite() { (x0, x1) } else { (0.0, 1.0) }, if y0.is_finite() { (y0.min(0.0), y1) } else { (0.0, 1.0) });
    let mut svg = String::new();
    open(&mut svg, title);
    axes(&mut svg, &f, xlabel, ylabel, 5);
    for (k, (name, ys)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut d = String::new();
        for (x, y) in xs.iter().zip(ys).filter(|(_, y)| y.is_finite()) {
            let _ = write!(d, "{}{:.1} {:.1}", if d.is_empty() { "M" } else { " L" }, f.px(*x), f.py(*y));
        }
        let _ = write!(svg, r#"<path d="{d}" stroke="{color}" fill="none" stroke-width="1.5"/>"#);
        let ly = MARGIN + 16.0 * k as f64;
        let _ = write!(svg, r#"<text x="{}" y="{ly:.1}" fill="{color}" text-anchor="end">{}</text>"#, W - MARGIN, escape(name));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Scatter with an optional fitted line `y = slope x + intercept`.
pub fn scatter(title: &str, xlabel: &str, ylabel: &str, xs: &[f64], ys: &[f64], fit: Option<(f64, f64)>) -> String {
    let (lo, hi) = bounds(xs.iter().chain(ys).copied());
    let range = if lo.is_finite() { (lo.min(0.0), hi * 1.05) } else { (0.0, 1.0) };
    let f = Frame::new(range, range);
    let mut svg = String::new();
    open(&mut svg, title);
    axes(&mut svg, &f, xlabel, ylabel, 5);
    for (x, y) in xs.iter().zip(ys) {
        let _ = write!(svg, r#"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="{}" fill-opacity="0.7"/>"#, f.px(*x), f.py(*y), PALETTE[0]);
    }
    if let Some((slope, intercept)) = fit {
        let (a, b) = f.x;
        let _ = write!(
            svg,
            r#"<path d="M{:.1} {:.1} L{:.1} {:.1}" stroke="{}" stroke-dasharray="5 3"/>"#,
            f.px(a),
            f.py(slope * a + intercept),
            f.px(b),
            f.py(slope * b + intercept),
            PALETTE[1]
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let labels = vec!["A<1>".to_string(), "B".to_string()];
        let bar = bar_chart("AUPRC", "score", &labels, &[Some(0.8), None], &[Some([0.7, 0.9]), None]);
        assert!(bar.starts_with("<svg") && bar.trim_end().ends_with("</svg>"));
        assert!(bar.contains("A&lt;1&gt;") && bar.contains("n/a"));
        let line = line_chart("loss", "step", "loss", &[1.0, 2.0, 3.0], &[("total".into(), vec![3.0, 2.0, f64::NAN])]);
        assert!(line.contains("<path d=\"M"));
        let sc = scatter("counts", "pred", "ref", &[1.0, 2.0], &[2.0, 4.0], Some((2.0, 0.0)));
        assert_eq!(sc.matches("<circle").count(), 2);
        // degenerate inputs still render
        assert!(scatter("empty", "x", "y", &[], &[], None).contains("</svg>"));
    }
}
