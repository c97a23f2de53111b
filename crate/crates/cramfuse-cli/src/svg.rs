//! Minimal deterministic SVG line charts. Plots are pure functions of the
//! tabulated data: same rows in, same bytes out.

use std::fmt::Write as _;
use std::path::Path;

use cramfuse::error::{CramError, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 56.0;
const PALETTE: [&str; 4] = ["#1f6f8b", "#c0544c", "#5b8c5a", "#8c6bb1"];

/// One named polyline.
pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

fn fmt(v: f64) -> String {
    // fixed decimals keep the output bytes independent of float noise
    format!("{v:.3}")
}

/// Write a line chart of the series to `path`.
pub fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series<'_>],
) -> Result<()> {
    if series.iter().all(|s| s.points.is_empty()) {
        return Err(CramError::Config(format!("no data for plot '{title}'")));
    }
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in xs {
        x0 = x0.min(v);
        x1 = x1.max(v);
    }
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in ys {
        y0 = y0.min(v);
        y1 = y1.max(v);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * (WIDTH - MARGIN_L - MARGIN_R);
    let py = |y: f64| HEIGHT - MARGIN_B - (y - y0) / (y1 - y0) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         font-family=\"monospace\" font-size=\"13\">"
    );
    let _ = writeln!(out, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
        WIDTH / 2.0,
        title
    );
    // axes
    let _ = writeln!(
        out,
        "<line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\
         <line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"black\"/>",
        l = MARGIN_L,
        r = WIDTH - MARGIN_R,
        t = MARGIN_T,
        b = HEIGHT - MARGIN_B,
    );
    // axis extent labels and names
    let _ = writeln!(
        out,
        "<text x=\"{l}\" y=\"{yb}\" text-anchor=\"middle\">{x0t}</text>\
         <text x=\"{r}\" y=\"{yb}\" text-anchor=\"middle\">{x1t}</text>\
         <text x=\"{xm}\" y=\"{yb}\" text-anchor=\"middle\">{xl}</text>",
        l = MARGIN_L,
        r = WIDTH - MARGIN_R,
        yb = HEIGHT - MARGIN_B + 20.0,
        xm = (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        x0t = fmt(x0),
        x1t = fmt(x1),
        xl = x_label,
    );
    let _ = writeln!(
        out,
        "<text x=\"{xl}\" y=\"{b}\" text-anchor=\"end\">{y0t}</text>\
         <text x=\"{xl}\" y=\"{t}\" text-anchor=\"end\">{y1t}</text>\
         <text x=\"16\" y=\"{ym}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {ym})\">{yl}</text>",
        xl = MARGIN_L - 8.0,
        b = HEIGHT - MARGIN_B,
        t = MARGIN_T + 6.0,
        ym = (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        y0t = fmt(y0),
        y1t = fmt(y1),
        yl = y_label,
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> =
            s.points.iter().map(|&(x, y)| format!("{},{}", fmt(px(x)), fmt(py(y)))).collect();
        let _ = writeln!(
            out,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            pts.join(" ")
        );
        for &(x, y) in &s.points {
            let _ = writeln!(
                out,
                "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{color}\"/>",
                fmt(px(x)),
                fmt(py(y))
            );
        }
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>",
            WIDTH - MARGIN_R - 180.0,
            MARGIN_T + 16.0 * (i as f64 + 1.0),
            s.name
        );
    }
    let _ = writeln!(out, "</svg>");
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_is_deterministic_and_wellformed() {
        let dir = tempfile::tempdir().unwrap();
        let series = [Series { name: "ap", points: vec![(0.0, 0.5), (0.5, 0.8), (1.0, 0.7)] }];
        let a = dir.path().join("a.svg");
        let b = dir.path().join("b.svg");
        line_chart(&a, "t", "x", "y", &series).unwrap();
        line_chart(&b, "t", "x", "y", &series).unwrap();
        let sa = std::fs::read(&a).unwrap();
        assert_eq!(sa, std::fs::read(&b).unwrap());
        let text = String::from_utf8(sa).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.trim_end().ends_with("</svg>"));
        assert_eq!(text.matches("<circle").count(), 3);
    }

    #[test]
    fn empty_series_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let series = [Series { name: "ap", points: vec![] }];
        assert!(line_chart(&dir.path().join("x.svg"), "t", "x", "y", &series).is_err());
    }
}
