//! Standalone SVG charts. Every chart carries its data as CSV inside an XML
//! comment, so the numbers survive without a plotting toolchain.

use std::fmt::Write as _;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLOURS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// A named series of `(x, y)` points.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn from_values(name: &str, values: &[f64]) -> Self {
        Self {
            name: name.to_string(),
            points: values.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mark {
    Line,
    Dots,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(series: &[Series], extra: &[(f64, f64)]) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|s| s.points.iter()).chain(extra).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    (x0, x1, y0, y1)
}

/// Renders the series on shared axes. `diagonal` adds the 45° reference line
/// used by QQ plots.
pub fn render(title: &str, x_label: &str, y_label: &str, series: &[Series], mark: Mark, diagonal: bool) -> String {
    let (x0, x1, y0, y1) = bounds(series, &[]);
    let (lo, hi) = (x0.min(y0), x1.max(y1));
    let (x0, x1, y0, y1) = if diagonal { (lo, hi, lo, hi) } else { (x0, x1, y0, y1) };
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    svg.push_str("<!-- data\nseries,x,y\n");
    for s in series {
        for (x, y) in &s.points {
            let _ = writeln!(svg, "{},{x},{y}", s.name.replace("--", "-"));
        }
    }
    svg.push_str("-->\n");
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<path d="M{m} {t} L{m} {b} L{r} {b}" stroke="black" fill="none"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    for (v, anchor_y) in [(y0, HEIGHT - MARGIN), (y1, MARGIN)] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="10">{:.3}</text>"#,
            MARGIN - 4.0,
            anchor_y + 4.0,
            v
        );
    }
    for (v, anchor_x) in [(x0, MARGIN), (x1, WIDTH - MARGIN)] {
        let _ = writeln!(
            svg,
            r#"<text x="{anchor_x}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="10">{:.3}</text>"#,
            HEIGHT - MARGIN + 14.0,
            v
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 8.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    if diagonal {
        let _ = writeln!(
            svg,
            r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#888" stroke-dasharray="4 3"/>"##,
            px(lo),
            py(lo),
            px(hi),
            py(hi)
        );
    }
    for (i, s) in series.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        let finite: Vec<&(f64, f64)> = s.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
        match mark {
            Mark::Line => {
                let mut d = String::new();
                for (j, (x, y)) in finite.iter().enumerate() {
                    let _ = write!(d, "{}{:.2} {:.2} ", if j == 0 { "M" } else { "L" }, px(*x), py(*y));
                }
                let _ = writeln!(svg, r#"<path d="{}" stroke="{colour}" fill="none" stroke-width="1.2"/>"#, d.trim_end());
            }
            Mark::Dots => {
                for (x, y) in finite {
                    let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="1.5" fill="{colour}"/>"#, px(*x), py(*y));
                }
            }
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{colour}">{}</text>"#,
            WIDTH - MARGIN - 120.0,
            MARGIN + 14.0 * i as f64,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeds_data_and_is_well_formed() {
        let svg = render(
            "load",
            "step",
            "scaled load",
            &[Series::from_values("actual", &[0.1, 0.5, 0.3]), Series::from_values("LSTM", &[0.2, 0.4, 0.3])],
            Mark::Line,
            false,
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("actual,1,0.5"));
        assert!(svg.contains("LSTM,2,0.3"));
        assert_eq!(svg.matches("<path").count(), 3);
    }

    #[test]
    fn qq_has_reference_line() {
        let pts = Series {
            name: "qq".into(),
            points: vec![(-1.0, -0.9), (0.0, 0.1), (1.0, 1.2)],
        };
        let svg = render("QQ", "normal", "sample", &[pts], Mark::Dots, true);
        assert!(svg.contains("<line"));
        assert_eq!(svg.matches("<circle").count(), 3);
    }

    #[test]
    fn constant_series_does_not_divide_by_zero() {
        let svg = render("flat", "x", "y", &[Series::from_values("c", &[0.5; 4])], Mark::Line, false);
        assert!(!svg.contains("NaN"));
    }
}
