//! Minimal deterministic SVG charts.
//!
//! Output depends only on the input values: numbers are printed with fixed
//! precision and series are drawn in the given order.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 48.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            points,
        }
    }

    /// Points `(i, y_i)`.
    pub fn indexed(name: impl Into<String>, ys: &[f64]) -> Self {
        Self::new(name, ys.iter().enumerate().map(|(i, &y)| (i as f64, y)).collect())
    }
}

/// One bar with an optional symmetric error bar.
#[derive(Debug, Clone, PartialEq)]
pub struct Bar {
    pub label: String,
    pub value: f64,
    pub err: f64,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(values: impl Iterator<Item = (f64, f64)>) -> Frame {
        let mut f = Frame {
            x0: f64::INFINITY,
            x1: f64::NEG_INFINITY,
            y0: f64::INFINITY,
            y1: f64::NEG_INFINITY,
        };
        for (x, y) in values.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            f.x0 = f.x0.min(x);
            f.x1 = f.x1.max(x);
            f.y0 = f.y0.min(y);
            f.y1 = f.y1.max(y);
        }
        if !f.x0.is_finite() {
            f = Frame {
                x0: 0.0,
                x1: 1.0,
                y0: 0.0,
                y1: 1.0,
            };
        }
        if f.x1 - f.x0 < 1e-12 {
            f.x0 -= 0.5;
            f.x1 += 0.5;
        }
        if f.y1 - f.y0 < 1e-12 {
            f.y0 -= 0.5;
            f.y1 += 0.5;
        }
        f
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }
}

fn header(s: &mut String, title: &str) {
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
}

fn axes(s: &mut String, f: &Frame, x_label: &str, y_label: &str, x_ticks: bool) {
    let (bx, by) = (LEFT, H - BOTTOM);
    let _ = writeln!(
        s,
        r#"<path d="M{bx:.1} {TOP:.1} L{bx:.1} {by:.1} L{:.1} {by:.1}" stroke="black" fill="none"/>"#,
        W - RIGHT
    );
    for i in 0..=4 {
        let frac = i as f64 / 4.0;
        let yv = f.y0 + frac * (f.y1 - f.y0);
        let y = f.py(yv);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            bx - 6.0,
            y + 4.0,
            tick(yv)
        );
        if x_ticks {
            let xv = f.x0 + frac * (f.x1 - f.x0);
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                f.px(xv),
                by + 16.0,
                tick(xv)
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (LEFT + W - RIGHT) / 2.0,
        H - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Line chart with a legend. An empty or all-empty series list yields the
/// axes only.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let frame = Frame::fit(series.iter().flat_map(|s| s.points.iter().copied()));
    let mut s = String::new();
    header(&mut s, title);
    axes(&mut s, &frame, x_label, y_label, true);
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        if !pts.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                pts.join(" ")
            );
        }
        let ly = TOP + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}" text-anchor="end">{}</text>"#,
            W - RIGHT - 4.0,
            ly + 10.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Bar chart with error bars; bars are laid out left to right.
pub fn bar_chart(title: &str, y_label: &str, bars: &[Bar]) -> String {
    let frame = {
        let mut f = Frame::fit(
            bars.iter()
                .flat_map(|b| [(0.0, b.value - b.err), (1.0, b.value + b.err)])
                .chain([(0.0, 0.0)]),
        );
        f.x0 = 0.0;
        f.x1 = bars.len().max(1) as f64;
        f
    };
    let mut s = String::new();
    header(&mut s, title);
    axes(&mut s, &frame, "", y_label, false);
    for (i, b) in bars.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let (xa, xb) = (frame.px(i as f64 + 0.15), frame.px(i as f64 + 0.85));
        let (ya, yb) = (frame.py(b.value.max(0.0)), frame.py(b.value.min(0.0)));
        let _ = writeln!(
            s,
            r#"<rect x="{xa:.2}" y="{ya:.2}" width="{:.2}" height="{:.2}" fill="{color}"/>"#,
            xb - xa,
            yb - ya
        );
        if b.err > 0.0 {
            let xm = (xa + xb) / 2.0;
            let _ = writeln!(
                s,
                r#"<path d="M{xm:.2} {:.2} L{xm:.2} {:.2}" stroke="black"/>"#,
                frame.py(b.value + b.err),
                frame.py(b.value - b.err)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.1}" text-anchor="middle">{}</text>"#,
            (xa + xb) / 2.0,
            H - BOTTOM + 16.0,
            escape(&b.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_series_draws_axes_only() {
        let svg = line_chart("empty", "x", "y", &[]);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(!svg.contains("polyline"));
        assert!(svg.contains("<path"));
        let svg = line_chart("empty", "x", "y", &[Series::new("a", vec![])]);
        assert!(!svg.contains("polyline"));
    }

    #[test]
    fn output_is_stable_and_escaped() {
        let s = [Series::indexed("a<b", &[1.0, 3.0, 2.0]), Series::indexed("c", &[0.5])];
        let a = line_chart("t & u", "x", "y", &s);
        assert_eq!(a, line_chart("t & u", "x", "y", &s));
        assert!(a.contains("t &amp; u") && a.contains("a&lt;b"));
        let bars = [
            Bar {
                label: "x".into(),
                value: 0.5,
                err: 0.1,
            },
            Bar {
                label: "y".into(),
                value: 0.7,
                err: 0.0,
            },
        ];
        let b = bar_chart("bars", "acc", &bars);
        assert_eq!(b.matches("<rect").count(), 3);
        assert_eq!(b, bar_chart("bars", "acc", &bars));
    }
}
