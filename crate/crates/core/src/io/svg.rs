//! Deterministic standalone SVG scatter plots and line charts.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::csv::Table;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];
const UNLABELED: &str = "#444444";
const SIZE: f64 = 480.0;
const MARGIN: f64 = 40.0;

/// Fill colour of a label; `None` (unconditional) is dark grey.
pub fn label_color(label: Option<usize>) -> &'static str {
    label.map_or(UNLABELED, |l| PALETTE[l % PALETTE.len()])
}

#[derive(Debug, Clone, Copy)]
struct Bounds {
    lo: f64,
    hi: f64,
}

impl Bounds {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Self { lo: -1.0, hi: 1.0 };
        }
        if hi - lo < 1e-12 {
            return Self { lo: lo - 1.0, hi: hi + 1.0 };
        }
        let pad = 0.05 * (hi - lo);
        Self { lo: lo - pad, hi: hi + pad }
    }

    fn map(&self, v: f64, from: f64, to: f64) -> f64 {
        from + (v - self.lo) / (self.hi - self.lo) * (to - from)
    }
}

fn open(out: &mut String, w: f64, h: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
}

fn axes(out: &mut String, x0: f64, y0: f64, w: f64, h: f64, bx: Bounds, by: Bounds) {
    let _ = writeln!(
        out,
        r#"<rect x="{x0:.2}" y="{y0:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="black"/>"#
    );
    let text = |out: &mut String, x: f64, y: f64, anchor: &str, v: f64| {
        let _ = writeln!(
            out,
            r#"<text x="{x:.2}" y="{y:.2}" font-size="10" font-family="sans-serif" text-anchor="{anchor}">{v:.3}</text>"#
        );
    };
    text(out, x0, y0 + h + 14.0, "start", bx.lo);
    text(out, x0 + w, y0 + h + 14.0, "end", bx.hi);
    text(out, x0 - 4.0, y0 + h, "end", by.lo);
    text(out, x0 - 4.0, y0 + 10.0, "end", by.hi);
}

/// Scatter plot of 2-D points, one colour per label.
pub fn scatter_svg(points: &[[f64; 2]], labels: &[Option<usize>]) -> Result<String> {
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("scatter coordinates".into()));
    }
    let bx = Bounds::of(points.iter().map(|p| p[0]));
    let by = Bounds::of(points.iter().map(|p| p[1]));
    let inner = SIZE - 2.0 * MARGIN;
    let mut out = String::new();
    open(&mut out, SIZE, SIZE);
    axes(&mut out, MARGIN, MARGIN, inner, inner, bx, by);
    for (i, p) in points.iter().enumerate() {
        let x = bx.map(p[0], MARGIN, MARGIN + inner);
        let y = by.map(p[1], MARGIN + inner, MARGIN);
        let color = label_color(labels.get(i).copied().flatten());
        let _ = writeln!(
            out,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="1.6" fill="{color}" fill-opacity="0.7"/>"#
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// One panel per column, each plotted against the first column.
pub fn line_chart_svg(table: &Table, columns: &[&str]) -> Result<String> {
    let xs = table
        .rows
        .iter()
        .map(|r| r.first().copied().unwrap_or(0.0))
        .collect::<Vec<_>>();
    let panel_h = 180.0;
    let width = 640.0;
    let height = MARGIN + columns.len() as f64 * (panel_h + MARGIN);
    let mut out = String::new();
    open(&mut out, width, height.max(2.0 * MARGIN));
    let bx = Bounds::of(xs.iter().copied());
    for (i, &name) in columns.iter().enumerate() {
        let ys = table
            .column(name)
            .ok_or_else(|| Error::arg(format!("no column `{name}`; have {}", table.columns.join(","))))?;
        let by = Bounds::of(ys.iter().copied());
        let (x0, y0, w) = (1.5 * MARGIN, MARGIN + i as f64 * (panel_h + MARGIN), width - 2.5 * MARGIN);
        axes(&mut out, x0, y0, w, panel_h, bx, by);
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" font-family="sans-serif">{name}</text>"#,
            x0,
            y0 - 6.0
        );
        let pts: Vec<String> = xs
            .iter()
            .zip(&ys)
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(&x, &y)| format!("{:.2},{:.2}", bx.map(x, x0, x0 + w), by.map(y, y0 + panel_h, y0)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            pts.join(" "),
            PALETTE[i % PALETTE.len()]
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn write(path: &Path, svg: &str) -> Result<()> {
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}
