use std::fmt::Write as _;
use std::path::Path;

use super::{Quality, RdCurve};
use crate::codecnets::write_atomic;
use crate::error::{Error, Result};

pub const CSV_COLUMNS: [&str; 5] = ["sequence", "lambda", "bpp", "psnr", "ms_ssim"];

#[derive(Clone, Debug, PartialEq)]
pub struct RdRow {
    pub sequence: String,
    pub lambda: f64,
    pub bpp: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}

pub fn write_rd_csv(rows: &[RdRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.sequence.clone(),
            r.lambda.to_string(),
            r.bpp.to_string(),
            r.psnr.to_string(),
            r.ms_ssim.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::invalid(format!("csv: {e}")))?;
    write_atomic(path, &bytes)
}

pub fn read_rd_csv(path: &Path) -> Result<Vec<RdRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = r.headers().map_err(csv_err)?.clone();
    if headers.iter().collect::<Vec<_>>() != CSV_COLUMNS {
        return Err(Error::invalid(format!(
            "{}: expected columns {}",
            path.display(),
            CSV_COLUMNS.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let num = |k: usize| {
            rec[k].trim().parse::<f64>().map_err(|_| {
                Error::invalid(format!(
                    "{} row {}: bad {} `{}`",
                    path.display(),
                    i + 2,
                    CSV_COLUMNS[k],
                    &rec[k]
                ))
            })
        };
        rows.push(RdRow {
            sequence: rec[0].to_string(),
            lambda: num(1)?,
            bpp: num(2)?,
            psnr: num(3)?,
            ms_ssim: num(4)?,
        });
    }
    Ok(rows)
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

/// Line plot of quality against bpp, one polyline per labelled curve.
pub fn rd_svg(curves: &[(String, RdCurve)], quality: Quality) -> String {
    let (w, h, m) = (640.0, 440.0, 60.0);
    let pts = curves.iter().flat_map(|(_, c)| &c.points);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in pts {
        x0 = x0.min(p.bpp);
        x1 = x1.max(p.bpp);
        y0 = y0.min(p.quality(quality));
        y1 = y1.max(p.quality(quality));
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |lo: f64, hi: f64| {
        let d = ((hi - lo) * 0.05).max(1e-6);
        (lo - d, hi + d)
    };
    let (x0, x1) = pad(x0, x1);
    let (y0, y1) = pad(y0, y1);
    let sx = |v: f64| m + (v - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |v: f64| h - m - (v - y0) / (y1 - y0) * (h - 2.0 * m);
    let label = match quality {
        Quality::Psnr => "PSNR (dB)",
        Quality::MsSsim => "MS-SSIM",
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{xv:.3}</text>"#,
            sx(xv),
            h - m + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{yv:.2}</text>"#,
            m - 6.0,
            sy(yv) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">bpp</text>"#,
        w / 2.0,
        h - 14.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{label}</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (i, (name, c)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let line: Vec<String> = c
            .points
            .iter()
            .map(|p| format!("{:.1},{:.1}", sx(p.bpp), sy(p.quality(quality))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        for p in &line {
            let (x, y) = p.split_once(',').unwrap();
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            m + 10.0,
            m + 16.0 * (i as f64 + 1.0),
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
