//! Standard/adversarial accuracy fronts from λ and γ sweeps.

use std::fmt::Write as _;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FRONT_HEADER: &str = "method,knob,std_acc,adv_acc,dominated";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontRow {
    pub method: String,
    pub knob: f64,
    pub std_acc: f64,
    pub adv_acc: f64,
    pub dominated: bool,
}

/// `a` dominates `b` when it is at least as good on both accuracies and
/// strictly better on one.
pub fn dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 >= b.0 && a.1 >= b.1 && (a.0 > b.0 || a.1 > b.1)
}

/// Sets `dominated` on every row by pairwise comparison.
pub fn mark_dominated(rows: &mut [FrontRow]) {
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.std_acc, r.adv_acc)).collect();
    for (i, row) in rows.iter_mut().enumerate() {
        row.dominated = points
            .iter()
            .enumerate()
            .any(|(j, &p)| j != i && dominates(p, points[i]));
    }
}

pub fn write_front_csv(path: impl AsRef<Path>, rows: &[FrontRow]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(FRONT_HEADER.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_front_csv(path: impl AsRef<Path>) -> Result<Vec<FrontRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn color(method: &str) -> &'static str {
    match method {
        "ca_at" => "#c0392b",
        "vanilla_at" => "#2471a3",
        _ => "#555555",
    }
}

/// A standalone SVG scatter of the front (standard accuracy on x).
pub fn front_svg(rows: &[FrontRow]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const M: f64 = 60.0;
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for r in rows {
        x0 = x0.min(r.std_acc);
        x1 = x1.max(r.std_acc);
        y0 = y0.min(r.adv_acc);
        y1 = y1.max(r.adv_acc);
    }
    if rows.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |lo: f64, hi: f64| {
        let p = ((hi - lo) * 0.1).max(0.01);
        ((lo - p).max(0.0), (hi + p).min(1.0))
    };
    let (x0, x1) = pad(x0, x1);
    let (y0, y1) = pad(y0, y1);
    let sx = |v: f64| M + (v - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |v: f64| H - M - (v - y0) / (y1 - y0) * (H - 2.0 * M);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{M}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{M}" y1="{M}" x2="{M}" y2="{b}" stroke="black"/>"#,
        b = H - M,
        r = W - M
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = x0 + t * (x1 - x0);
        let yv = y0 + t * (y1 - y0);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.3}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#,
            sx(xv),
            H - M + 16.0,
            M - 6.0,
            sy(yv) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="13">standard accuracy</text>"#,
        W / 2.0,
        H - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" font-size="13" transform="rotate(-90 16 {:.1})">adversarial accuracy</text>"#,
        H / 2.0,
        H / 2.0
    );
    for r in rows {
        let fill = if r.dominated { "none" } else { color(&r.method) };
        let _ = writeln!(
            s,
            r#"<circle cx="{:.1}" cy="{:.1}" r="5" fill="{fill}" stroke="{}"/><text x="{:.1}" y="{:.1}">{} {}</text>"#,
            sx(r.std_acc),
            sy(r.adv_acc),
            color(&r.method),
            sx(r.std_acc) + 7.0,
            sy(r.adv_acc) - 5.0,
            if r.method == "ca_at" { "γ" } else { "λ" },
            r.knob
        );
    }
    let _ = writeln!(
        s,
        r##"<circle cx="{a}" cy="20" r="5" fill="#2471a3"/><text x="{b}" y="24">vanilla AT</text><circle cx="{c}" cy="20" r="5" fill="#c0392b"/><text x="{d}" y="24">CA-AT</text>"##,
        a = W - 200.0,
        b = W - 190.0,
        c = W - 110.0,
        d = W - 100.0
    );
    s.push_str("</svg>\n");
    s
}
