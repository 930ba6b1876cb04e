//! File writers: sorted-key JSON, `x,y` curves, per-sample risk tables and
//! attention heat-maps (CSV and SVG).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::data::StreamId;
use crate::error::{Error, Result};

/// Pretty JSON with object keys in sorted order, newline-terminated.
pub fn to_sorted_json<T: Serialize>(value: &T) -> Result<String> {
    // `serde_json::Value` keeps objects in a BTreeMap, so a round trip
    // through it sorts every level.
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_sorted_json(value)?)
}

pub fn curve_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("x,y\n");
    for (x, y) in points {
        let _ = writeln!(s, "{x},{y}");
    }
    s
}

/// One row of `risk_scores.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RiskRow {
    pub id: String,
    pub label: u8,
    pub pred: u8,
    pub prob: f64,
    pub kl_score: f64,
    pub mahalanobis: f64,
    pub kl_raw: f64,
    pub mahalanobis_cc: f64,
}

pub const RISK_HEADER: &str = "id,label,pred,prob,kl_score,mahalanobis,kl_raw,mahalanobis_cc";

pub fn risk_csv(rows: &[RiskRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(RISK_HEADER.split(','))
        .map_err(|e| Error::Data(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

/// Header row of token labels, then one row of weights per query token.
pub fn attention_csv(tokens: &[StreamId], matrix: &[f64]) -> String {
    let t = tokens.len();
    let mut s = tokens.iter().map(|k| k.label()).collect::<Vec<_>>().join(",");
    s.push('\n');
    for r in 0..t {
        let row: Vec<String> = matrix[r * t..(r + 1) * t].iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
        .replace('\'', "&apos;")
}

/// Linear blend from near-white to dark blue.
fn color(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let lo = [247.0, 251.0, 255.0];
    let hi = [8.0, 48.0, 107.0];
    let c: Vec<u8> = lo.iter().zip(hi).map(|(a, b)| (a + (b - a) * v).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Heat-map of a `T × T` attention matrix. Rows are queries, columns keys.
pub fn attention_svg(title: &str, caption: &str, tokens: &[StreamId], matrix: &[f64]) -> String {
    const CELL: usize = 70;
    const LEFT: usize = 60;
    const TOP: usize = 50;
    let t = tokens.len();
    let width = LEFT + t * CELL + 20;
    let height = TOP + t * CELL + 50;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif">"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, xml_escape(title));
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" font-size="14" text-anchor="middle">{}</text>"#,
        width / 2,
        xml_escape(title)
    );
    for (k, tok) in tokens.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#,
            LEFT + k * CELL + CELL / 2,
            TOP - 8,
            tok.label()
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="end">{}</text>"#,
            LEFT - 6,
            TOP + k * CELL + CELL / 2 + 4,
            tok.label()
        );
    }
    for r in 0..t {
        for c in 0..t {
            let v = matrix[r * t + c];
            let (x, y) = (LEFT + c * CELL, TOP + r * CELL);
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}" stroke="white"/>"#,
                color(v)
            );
            let ink = if v > 0.5 { "white" } else { "black" };
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" font-size="13" text-anchor="middle" fill="{ink}">{v:.3}</text>"#,
                x + CELL / 2,
                y + CELL / 2 + 5
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#,
        width / 2,
        TOP + t * CELL + 30,
        xml_escape(caption)
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sorted_json_orders_keys() {
        #[derive(Serialize)]
        struct S {
            zeta: u8,
            alpha: u8,
        }
        let s = to_sorted_json(&S { zeta: 1, alpha: 2 }).unwrap();
        assert!(s.find("alpha").unwrap() < s.find("zeta").unwrap());
    }

    #[test]
    fn attention_csv_layout() {
        let m = vec![0.25; 16];
        let s = attention_csv(&StreamId::ALL, &m);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "attn,pos,sit,inter");
        assert_eq!(lines.len(), 5);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 4));
    }

    #[test]
    fn color_endpoints() {
        assert_eq!(color(0.0), "#f7fbff");
        assert_eq!(color(1.0), "#08306b");
    }

    #[test]
    fn risk_csv_header_and_rows() {
        let rows = vec![RiskRow {
            id: "x".into(),
            label: 1,
            pred: 0,
            prob: 0.25,
            kl_score: 0.5,
            mahalanobis: 3.0,
            kl_raw: 0.0,
            mahalanobis_cc: 2.0,
        }];
        let s = risk_csv(&rows).unwrap();
        assert_eq!(s, format!("{RISK_HEADER}\nx,1,0,0.25,0.5,3.0,0.0,2.0\n"));
    }
}
