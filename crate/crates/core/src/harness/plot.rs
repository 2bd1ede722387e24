//! Learning-curve CSV and a dependency-free SVG chart.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use super::train::CurveRow;
use crate::error::{Error, Result};

pub const CURVE_HEADER: &str = "epoch,train_loss,val_ce,val_sbert,lr,val_fense";

fn csv_error(e: csv::Error) -> Error {
    Error::format(format!("curve csv: {e}"))
}

fn write_rows<T: serde::Serialize>(rows: impl IntoIterator<Item = T>, header: &str) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv write");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf-8 csv");
    format!("{header}\n{body}")
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    write_rows(rows, CURVE_HEADER)
}

/// Reads a curve CSV by column name; `val_fense` may be absent.
pub fn parse_curve_csv(text: &str) -> Result<Vec<CurveRow>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<CurveRow>, _>>()
        .map_err(csv_error)
}

pub fn read_curve(path: impl AsRef<Path>) -> Result<Vec<CurveRow>> {
    parse_curve_csv(&std::fs::read_to_string(path)?)
}

/// One run in a combined chart. Runs sharing a `group` share a panel column.
#[derive(Clone, Debug)]
pub struct CurveSeries {
    pub label: String,
    pub group: String,
    pub rows: Vec<CurveRow>,
}

/// Long-format CSV over several runs: run label and group, then the curve columns.
pub fn combined_csv(series: &[CurveSeries]) -> String {
    let rows = series
        .iter()
        .flat_map(|c| c.rows.iter().map(move |r| (&c.label, &c.group, r)));
    write_rows(rows, &format!("run,group,{CURVE_HEADER}"))
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 240.0;
const MARGIN: f64 = 48.0;

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Grid of panels: one column per group, rows for validation CE and
/// validation sentence similarity, one polyline per run.
pub fn curves_svg(series: &[CurveSeries]) -> Result<String> {
    if series.iter().all(|s| s.rows.is_empty()) {
        return Err(Error::Contract("nothing to plot".into()));
    }
    let mut groups: Vec<&str> = Vec::new();
    for s in series {
        if !groups.contains(&s.group.as_str()) {
            groups.push(&s.group);
        }
    }
    let labels: Vec<&str> = series
        .iter()
        .map(|s| s.label.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let metrics: [(&str, fn(&CurveRow) -> f64); 2] = [("validation CE", |r| r.val_ce), ("validation SBERT", |r| r.val_sbert)];
    let cell_w = PANEL_W + 2.0 * MARGIN;
    let cell_h = PANEL_H + 2.0 * MARGIN;
    let width = cell_w * groups.len() as f64;
    let height = cell_h * metrics.len() as f64 + 24.0 * labels.len() as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let max_epoch = series
        .iter()
        .flat_map(|s| s.rows.iter().map(|r| r.epoch))
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    for (mi, (mname, metric)) in metrics.iter().enumerate() {
        let vals: Vec<f64> = series
            .iter()
            .flat_map(|s| s.rows.iter().map(metric))
            .filter(|v| v.is_finite())
            .collect();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        for (gi, g) in groups.iter().enumerate() {
            let x0 = gi as f64 * cell_w + MARGIN;
            let y0 = mi as f64 * cell_h + MARGIN;
            let _ = writeln!(
                svg,
                r#"<rect x="{x0}" y="{y0}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>"#
            );
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="middle">{} ({})</text>"#,
                x0 + PANEL_W / 2.0,
                y0 - 8.0,
                mname,
                xml_escape(g)
            );
            let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{hi:.3}</text>"#, x0 - 4.0, y0 + 10.0);
            let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{lo:.3}</text>"#, x0 - 4.0, y0 + PANEL_H);
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#,
                x0 + PANEL_W / 2.0,
                y0 + PANEL_H + 20.0
            );
            for s in series.iter().filter(|s| s.group == *g) {
                let color = COLORS[labels.iter().position(|l| *l == s.label).unwrap_or(0) % COLORS.len()];
                let pts: Vec<String> = s
                    .rows
                    .iter()
                    .filter(|r| metric(r).is_finite())
                    .map(|r| {
                        let x = x0 + PANEL_W * r.epoch as f64 / max_epoch;
                        let y = y0 + PANEL_H * (1.0 - (metric(r) - lo) / (hi - lo));
                        format!("{x:.2},{y:.2}")
                    })
                    .collect();
                let _ = writeln!(
                    svg,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                    pts.join(" ")
                );
            }
        }
    }
    for (i, l) in labels.iter().enumerate() {
        let y = cell_h * metrics.len() as f64 + 16.0 + 24.0 * i as f64;
        let color = COLORS[i % COLORS.len()];
        let _ = writeln!(
            svg,
            r#"<line x1="{MARGIN}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="3"/><text x="{}" y="{}">{}</text>"#,
            MARGIN + 24.0,
            MARGIN + 30.0,
            y + 4.0,
            xml_escape(l)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
