//! Minimal deterministic SVG line plots.
//!
//! Each series becomes one `<polyline>`; its exact data values are repeated
//! in a `data-points` attribute so plots can be checked against the CSV.

use std::collections::BTreeMap;
use std::fmt::Write;

use super::report::Report;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

impl Plot {
    fn bounds(&self) -> (f64, f64, f64, f64) {
        let pts = self
            .series
            .iter()
            .flat_map(|s| s.points.iter())
            .filter(|(x, y)| x.is_finite() && y.is_finite());
        let (mut x0, mut x1, mut y0, mut y1) = (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        );
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

    pub fn render(&self) -> String {
        let (x0, x1, y0, y1) = self.bounds();
        let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
        let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
        );
        let _ = writeln!(out, r#"<title>{}</title>"#, escape(&self.title));
        let _ = writeln!(
            out,
            r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
        );
        let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
        let _ = writeln!(
            out,
            r#"<g id="axes" stroke="black" stroke-width="1"><line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}"/><line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}"/></g>"#
        );
        let _ = writeln!(
            out,
            r#"<g font-family="sans-serif" font-size="11"><text x="{left}" y="{}">{x0:.3}</text><text x="{right}" y="{}" text-anchor="end">{x1:.3}</text><text x="4" y="{bottom}">{y0:.3}</text><text x="4" y="{}">{y1:.3}</text><text x="{}" y="{}" text-anchor="middle">{}</text><text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">{}</text><text x="{}" y="20" text-anchor="middle" font-size="13">{}</text></g>"#,
            bottom + 15.0,
            bottom + 15.0,
            top + 4.0,
            WIDTH / 2.0,
            HEIGHT - 10.0,
            escape(&self.x_label),
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(&self.y_label),
            WIDTH / 2.0,
            escape(&self.title),
        );
        for (i, s) in self.series.iter().enumerate() {
            let finite: Vec<_> = s
                .points
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .collect();
            let screen: Vec<String> = finite
                .iter()
                .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
                .collect();
            let data: Vec<String> = s
                .points
                .iter()
                .map(|(x, y)| format!("{x:?},{y:?}"))
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{}" stroke-width="1.5" data-series="{}" data-points="{}" points="{}"/>"#,
                PALETTE[i % PALETTE.len()],
                escape(&s.name),
                data.join(" "),
                screen.join(" "),
            );
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" fill="{}">{}</text>"#,
                right - 120.0,
                top + 12.0 * (i as f64 + 1.0),
                PALETTE[i % PALETTE.len()],
                escape(&s.name)
            );
        }
        out.push_str("</svg>\n");
        out
    }

    /// `data-points` of every polyline, parsed back.
    pub fn parse_points(svg: &str) -> Vec<(String, Vec<(f64, f64)>)> {
        let mut out = Vec::new();
        for line in svg.lines().filter(|l| l.starts_with("<polyline")) {
            let attr = |name: &str| -> String {
                let key = format!("{name}=\"");
                let start = line.find(&key).map(|i| i + key.len()).unwrap_or(0);
                let end = line[start..].find('"').map(|e| start + e).unwrap_or(start);
                line[start..end].to_string()
            };
            let pts = attr("data-points")
                .split_whitespace()
                .filter_map(|p| {
                    let (x, y) = p.split_once(',')?;
                    Some((x.parse().ok()?, y.parse().ok()?))
                })
                .collect();
            out.push((attr("data-series"), pts));
        }
        out
    }
}

/// Groups rows of `report` whose `row` column is one of `row_kinds` (any row
/// when empty) into series keyed by the values of `group_by`, plotting `y`
/// against `x`. Rows where either coordinate is missing are skipped.
pub fn series_from_report(
    report: &Report,
    row_kinds: &[&str],
    group_by: &[&str],
    x: &str,
    y: &str,
) -> Vec<Series> {
    let (Some(xc), Some(yc)) = (report.column(x), report.column(y)) else {
        return Vec::new();
    };
    let kind_col = report.column("row");
    let gcols: Vec<usize> = group_by.iter().filter_map(|g| report.column(g)).collect();
    let mut groups: BTreeMap<Vec<String>, Vec<(f64, f64)>> = BTreeMap::new();
    let mut order: Vec<Vec<String>> = Vec::new();
    for row in &report.rows {
        if let (false, Some(kc)) = (row_kinds.is_empty(), kind_col) {
            if !row_kinds.iter().any(|k| row[kc].as_str() == Some(k)) {
                continue;
            }
        }
        let (Some(xv), Some(yv)) = (row[xc].as_f64(), row[yc].as_f64()) else {
            continue;
        };
        let key: Vec<String> = gcols.iter().map(|&c| row[c].to_string()).collect();
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push((xv, yv));
    }
    order
        .into_iter()
        .map(|key| {
            let name = group_by
                .iter()
                .zip(&key)
                .map(|(g, v)| format!("{g}={v}"))
                .collect::<Vec<_>>()
                .join(" ");
            let points = groups.remove(&key).unwrap_or_default();
            Series {
                name: if name.is_empty() { y.to_string() } else { name },
                points,
            }
        })
        .collect()
}
