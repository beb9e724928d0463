//! Self-contained SVG charts.

use std::fmt::Write as _;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

/// Consecutive points that belong together, such as one fold.
pub struct Segment {
    pub label: String,
    pub start: usize,
    pub len: usize,
}

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(ch),
        }
    }
    out
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        (LEFT + WIDTH - RIGHT) / 2.0,
        escape(title)
    );
}

struct YAxis {
    lo: f64,
    hi: f64,
}

impl YAxis {
    fn new(lo: f64, hi: f64) -> Self {
        if !(lo.is_finite() && hi.is_finite()) {
            return Self { lo: 0.0, hi: 1.0 };
        }
        if hi - lo < 1e-12 {
            return Self {
                lo: lo - 0.5,
                hi: hi + 0.5,
            };
        }
        let pad = 0.05 * (hi - lo);
        Self {
            lo: lo - pad,
            hi: hi + pad,
        }
    }

    fn y(&self, v: f64) -> f64 {
        let plot = HEIGHT - TOP - BOTTOM;
        TOP + plot * (1.0 - (v - self.lo) / (self.hi - self.lo))
    }

    fn draw(&self, out: &mut String) {
        let right = WIDTH - RIGHT;
        let _ = writeln!(
            out,
            r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>
<line x1="{LEFT}" y1="{}" x2="{right}" y2="{}" stroke="black"/>"#,
            HEIGHT - BOTTOM,
            HEIGHT - BOTTOM,
            HEIGHT - BOTTOM
        );
        for k in 0..=5 {
            let v = self.lo + (self.hi - self.lo) * k as f64 / 5.0;
            let y = self.y(v);
            let _ = writeln!(
                out,
                r#"<line x1="{}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
                LEFT - 4.0,
                LEFT - 6.0,
                y + 4.0,
                tick(v)
            );
        }
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn legend(out: &mut String, names: &[&str]) {
    let x = WIDTH - RIGHT + 15.0;
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            x + 20.0,
            x + 26.0,
            y + 4.0,
            escape(name)
        );
    }
}

/// One polyline per series over a shared x axis, with a dashed marker
/// between consecutive segments.
pub fn line_chart(title: &str, x_label: &str, series: &[Series], segments: &[Segment]) -> String {
    let n = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let finite = series
        .iter()
        .flat_map(|s| s.values.iter().copied())
        .filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    let axis = YAxis::new(lo, hi);
    let plot_w = WIDTH - LEFT - RIGHT;
    let x = |i: f64| {
        if n <= 1 {
            LEFT + plot_w / 2.0
        } else {
            LEFT + plot_w * i / (n - 1) as f64
        }
    };

    let mut out = String::new();
    header(&mut out, title);
    axis.draw(&mut out);
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    for (k, seg) in segments.iter().enumerate() {
        let mid = x(seg.start as f64 + (seg.len.max(1) - 1) as f64 / 2.0);
        let _ = writeln!(
            out,
            r#"<text class="segment-label" x="{mid:.2}" y="{}" text-anchor="middle">{}</text>"#,
            HEIGHT - BOTTOM + 16.0,
            escape(&seg.label)
        );
        if k > 0 {
            let bx = x(seg.start as f64 - 0.5);
            let _ = writeln!(
                out,
                r##"<line class="fold-boundary" x1="{bx:.2}" y1="{TOP}" x2="{bx:.2}" y2="{}" stroke="#888" stroke-dasharray="4 3"/>"##,
                HEIGHT - BOTTOM
            );
        }
    }
    for (i, s) in series.iter().enumerate() {
        let points: Vec<String> = s
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(j, &v)| format!("{:.2},{:.2}", x(j as f64), axis.y(v)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline class="series" data-column="{}" fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            escape(&s.name),
            PALETTE[i % PALETTE.len()],
            points.join(" ")
        );
    }
    legend(
        &mut out,
        &series.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(),
    );
    out.push_str("</svg>\n");
    out
}

/// Bars with ± error whiskers, one group.
pub fn bar_chart(title: &str, group: &str, bars: &[(String, f64, f64)]) -> String {
    let top = bars
        .iter()
        .map(|b| b.1 + b.2)
        .filter(|v| v.is_finite())
        .fold(1.0f64, f64::max);
    let axis = YAxis { lo: 0.0, hi: top };
    let plot_w = WIDTH - LEFT - RIGHT;
    let slot = plot_w / bars.len().max(1) as f64;
    let bar_w = slot * 0.6;

    let mut out = String::new();
    header(&mut out, title);
    axis.draw(&mut out);
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 12.0,
        escape(group)
    );
    for (i, (name, mean, std)) in bars.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let cx = LEFT + slot * (i as f64 + 0.5);
        let m = if mean.is_finite() { *mean } else { 0.0 };
        let y = axis.y(m);
        let _ = writeln!(
            out,
            r#"<rect class="bar" data-variant="{}" x="{:.2}" y="{y:.2}" width="{bar_w:.2}" height="{:.2}" fill="{color}"/>"#,
            escape(name),
            cx - bar_w / 2.0,
            axis.y(0.0) - y
        );
        if std.is_finite() && *std > 0.0 {
            let (y1, y2) = (axis.y(m + std), axis.y((m - std).max(0.0)));
            let _ = writeln!(
                out,
                r#"<line x1="{cx:.2}" y1="{y1:.2}" x2="{cx:.2}" y2="{y2:.2}" stroke="black"/>"#
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{m:.3}</text>"#,
            axis.y(m + std.max(0.0)) - 5.0
        );
    }
    legend(
        &mut out,
        &bars.iter().map(|b| b.0.as_str()).collect::<Vec<_>>(),
    );
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn escapes_markup() {
        assert_eq!(escape(r#"a<b>&"c'"#), "a&lt;b&gt;&amp;&quot;c&apos;");
    }

    #[test]
    fn line_chart_has_one_polyline_per_series_and_boundaries_between_segments() {
        let series = [
            Series {
                name: "mi".into(),
                values: vec![1.0, 0.5, 0.2, 0.9, 0.1, f64::NAN],
            },
            Series {
                name: "total".into(),
                values: vec![2.0; 6],
            },
        ];
        let segments = [
            Segment {
                label: "fold 0".into(),
                start: 0,
                len: 3,
            },
            Segment {
                label: "fold 1".into(),
                start: 3,
                len: 3,
            },
        ];
        let svg = line_chart("t", "epoch", &series, &segments);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("class=\"fold-boundary\"").count(), 1);
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn constant_series_gets_a_nonempty_range() {
        let svg = line_chart(
            "t",
            "x",
            &[Series {
                name: "c".into(),
                values: vec![3.0],
            }],
            &[],
        );
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }
}
