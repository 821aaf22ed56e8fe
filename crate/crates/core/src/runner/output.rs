//! CSV tables, SVG line plots and file hashing.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Fixed 17-significant-digit float format used in every CSV.
pub fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:.16e}")
    }
}

/// Column-oriented table written as RFC 4180 CSV with a header row.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_floats(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row.iter().map(|&v| fmt_float(v)).collect());
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> io::Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::CRLF)
            .from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.into_inner().map_err(|e| e.into_error())
    }
}

/// One named line. Non-finite entries are left out of the drawing.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Index of the last defined point before a truncation; drawn as a cross.
    pub marker: Option<usize>,
}

pub const SVG_WIDTH: f64 = 800.0;
pub const SVG_HEIGHT: f64 = 500.0;
const MAX_POINTS: usize = 2000;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn nice_bounds(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if hi - lo <= 1e-12 * lo.abs().max(hi.abs()).max(1e-300) {
        let pad = if lo == 0.0 { 1.0 } else { 0.05 * lo.abs() };
        return (lo - pad, hi + pad);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Self-contained line plot on a fixed 800x500 canvas. The output bytes depend
/// only on the input.
pub fn render_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String> {
    if series.is_empty() {
        return Err(Error::InvalidArgument("no series to plot".into()));
    }
    let finite = |v: &f64| v.is_finite();
    let xs = series
        .iter()
        .flat_map(|s| s.xs.iter().copied().filter(finite));
    let ys = series
        .iter()
        .flat_map(|s| s.ys.iter().copied().filter(finite));
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    let (y0, y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    let (x0, x1) = if x0 < x1 {
        (x0, x1)
    } else {
        nice_bounds(x0, x1)
    };
    let (y0, y1) = nice_bounds(y0, y1);

    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 50.0);
    let pw = SVG_WIDTH - left - right;
    let ph = SVG_HEIGHT - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_WIDTH}\" height=\"{SVG_HEIGHT}\" viewBox=\"0 0 {SVG_WIDTH} {SVG_HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(out, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(
        out,
        "<text x=\"{:.2}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
        SVG_WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        "<rect x=\"{left:.2}\" y=\"{top:.2}\" width=\"{pw:.2}\" height=\"{ph:.2}\" fill=\"none\" stroke=\"black\"/>"
    );
    for j in 0..=4 {
        let fx = x0 + (x1 - x0) * j as f64 / 4.0;
        let fy = y0 + (y1 - y0) * j as f64 / 4.0;
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            sx(fx),
            top + ph + 18.0,
            tick(fx)
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>",
            left - 6.0,
            sy(fy) + 4.0,
            tick(fy)
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
        left + pw / 2.0,
        SVG_HEIGHT - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">{}</text>",
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );

    for (j, s) in series.iter().enumerate() {
        let color = PALETTE[j % PALETTE.len()];
        let n = s.xs.len().min(s.ys.len());
        let ok = |k: usize| s.xs[k].is_finite() && s.ys[k].is_finite();
        let stride = (0..n)
            .filter(|&k| ok(k))
            .count()
            .div_ceil(MAX_POINTS)
            .max(1);
        // one polyline per run of defined points
        let mut k = 0;
        while k < n {
            if !ok(k) {
                k += 1;
                continue;
            }
            let run_start = k;
            while k < n && ok(k) {
                k += 1;
            }
            let mut idx: Vec<usize> = (run_start..k).step_by(stride).collect();
            if idx.last() != Some(&(k - 1)) {
                idx.push(k - 1);
            }
            let mut points = String::new();
            for i in idx {
                let _ = write!(points, "{:.2},{:.2} ", sx(s.xs[i]), sy(s.ys[i]));
            }
            let _ = writeln!(
                out,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.2\" points=\"{}\"><title>{}</title></polyline>",
                points.trim_end(),
                escape(&s.name)
            );
        }
        if let Some(m) = s.marker.filter(|&m| m < n && ok(m)) {
            let (cx, cy) = (sx(s.xs[m]), sy(s.ys[m]));
            let _ = writeln!(
                out,
                "<g stroke=\"red\" stroke-width=\"2\"><line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\"/><line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\"/></g>",
                cx - 6.0, cy - 6.0, cx + 6.0, cy + 6.0, cx - 6.0, cy + 6.0, cx + 6.0, cy - 6.0
            );
        }
    }
    for (j, s) in series.iter().take(12).enumerate() {
        let color = PALETTE[j % PALETTE.len()];
        let y = top + 14.0 + 14.0 * j as f64;
        let _ = writeln!(
            out,
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"{color}\"/><text x=\"{:.2}\" y=\"{:.2}\">{}</text>",
            left + pw - 120.0,
            left + pw - 100.0,
            left + pw - 95.0,
            y + 4.0,
            escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn tick(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 1e-3 && v.abs() < 1e4) {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

/// Output directory that keeps track of what it wrote.
#[derive(Debug)]
pub struct OutDir {
    root: Option<PathBuf>,
    written: Vec<PathBuf>,
}

impl OutDir {
    /// `None` discards every write (used by `check` without `--out`).
    pub fn new(root: Option<&Path>) -> io::Result<Self> {
        if let Some(r) = root {
            fs::create_dir_all(r)?;
        }
        Ok(Self {
            root: root.map(Path::to_path_buf),
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> io::Result<()> {
        let Some(root) = &self.root else {
            return Ok(());
        };
        let path = root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)
            .map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        self.written.push(PathBuf::from(rel));
        Ok(())
    }

    pub fn write_table(&mut self, rel: &str, table: &Table) -> io::Result<()> {
        let bytes = table.to_csv()?;
        self.write(rel, &bytes)
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_has_17_digits() {
        assert_eq!(fmt_float(1.0), "1.0000000000000000e0");
        assert_eq!(fmt_float(-0.1), "-1.0000000000000001e-1");
        assert_eq!(fmt_float(f64::NAN), "NaN");
        let v = 0.123_456_789_012_345_67;
        assert_eq!(fmt_float(v).parse::<f64>().unwrap(), v);
    }

    #[test]
    fn csv_has_header_and_crlf() {
        let mut t = Table::new(&["t", "x"]);
        t.push_floats(&[0.0, 1.5]);
        let s = String::from_utf8(t.to_csv().unwrap()).unwrap();
        assert_eq!(s, "t,x\r\n0.0000000000000000e0,1.5000000000000000e0\r\n");
    }

    #[test]
    fn svg_is_deterministic_and_sized() {
        let s = Series {
            name: "flat".into(),
            xs: vec![0.0, 0.5, 1.0],
            ys: vec![2.0; 3],
            marker: None,
        };
        let a = render_svg("t", "x", "y", std::slice::from_ref(&s)).unwrap();
        let b = render_svg("t", "x", "y", &[s]).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("width=\"800\" height=\"500\""));
        assert!(render_svg("t", "x", "y", &[]).is_err());
    }

    #[test]
    fn svg_marks_blow_up() {
        let s = Series {
            name: "beta".into(),
            xs: vec![0.0, 1.0, 2.0, 3.0],
            ys: vec![f64::NAN, f64::NAN, 2.0, 1.0],
            marker: Some(2),
        };
        let svg = render_svg("t", "x", "y", &[s]).unwrap();
        assert!(svg.contains("stroke=\"red\""));
        assert!(!svg.contains("NaN"));
    }
}
