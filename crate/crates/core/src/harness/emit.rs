//! CSV, gnuplot data and SVG output for summary rows.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{HarnessError, SummaryRow};
use crate::request::Method;
use crate::DEFAULT_DEADLINE_S;

pub const CSV_HEADER: [&str; 11] = [
    "environment",
    "algorithm",
    "total_requests",
    "task_type",
    "workers",
    "repetitions",
    "mean_response_s",
    "p95_response_s",
    "deadline_miss_fraction",
    "rejected_count",
    "per_server_dispatch_counts",
];

#[derive(Debug, Clone, PartialEq)]
pub struct EmitOptions {
    pub csv: bool,
    pub plot_data: bool,
    pub svg: bool,
    /// Drawn as a dashed line on SVG charts.
    pub deadline_s: f64,
    pub csv_name: String,
}

impl Default for EmitOptions {
    fn default() -> Self {
        EmitOptions {
            csv: true,
            plot_data: true,
            svg: false,
            deadline_s: DEFAULT_DEADLINE_S,
            csv_name: "summary.csv".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmittedFiles {
    pub csv: Option<PathBuf>,
    pub plot_data: Vec<PathBuf>,
    pub svg: Vec<PathBuf>,
}

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9}")).unwrap_or_default()
}

/// Writes a header line and one record per row.
pub fn write_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        let counts: Vec<String> = r.per_server_dispatch_counts.iter().map(u64::to_string).collect();
        w.write_record([
            r.environment.clone(),
            r.algorithm.clone(),
            r.total_requests.to_string(),
            r.task_type.to_string(),
            r.workers.map(|n| n.to_string()).unwrap_or_default(),
            r.repetitions.to_string(),
            num(r.mean_response_s),
            num(r.p95_response_s),
            format!("{:.9}", r.deadline_miss_fraction),
            r.rejected_count.to_string(),
            counts.join(";"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

struct Series {
    /// Sweep rows are keyed by worker count, matrix rows by request total.
    x_label: &'static str,
    xs: BTreeSet<u64>,
    columns: BTreeMap<String, BTreeMap<u64, f64>>,
}

fn group(rows: &[SummaryRow]) -> BTreeMap<(String, Method), Series> {
    let mut out: BTreeMap<(String, Method), Series> = BTreeMap::new();
    for r in rows {
        let x = r.workers.map(u64::from).unwrap_or(r.total_requests);
        let s = out.entry((r.environment.clone(), r.task_type)).or_insert_with(|| Series {
            x_label: if r.workers.is_some() { "workers" } else { "total_requests" },
            xs: BTreeSet::new(),
            columns: BTreeMap::new(),
        });
        s.xs.insert(x);
        let col = s.columns.entry(r.algorithm.clone()).or_default();
        if let Some(m) = r.mean_response_s {
            col.insert(x, m);
        }
    }
    out
}

fn file_stem(env: &str, method: Method) -> String {
    let safe: String = env
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}_{}", method.as_str().to_ascii_lowercase())
}

fn plot_data(series: &Series) -> String {
    let mut s = format!("# {}", series.x_label);
    for name in series.columns.keys() {
        s.push(' ');
        s.push_str(name);
    }
    s.push('\n');
    for x in &series.xs {
        let _ = write!(s, "{x}");
        for col in series.columns.values() {
            match col.get(x) {
                Some(v) => {
                    let _ = write!(s, " {v:.9}");
                }
                None => s.push_str(" NaN"),
            }
        }
        s.push('\n');
    }
    s
}

const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// A line chart of mean response time against the x key, one line per
/// algorithm, with the deadline as a dashed horizontal line.
pub fn render_svg(title: &str, x_label: &str, columns: &BTreeMap<String, BTreeMap<u64, f64>>, deadline_s: f64) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (70.0, 170.0, 40.0, 50.0);
    let xs: BTreeSet<u64> = columns.values().flat_map(|c| c.keys().copied()).collect();
    let x_min = xs.first().copied().unwrap_or(0) as f64;
    let x_max = (xs.last().copied().unwrap_or(1) as f64).max(x_min + 1.0);
    let y_max = columns
        .values()
        .flat_map(|c| c.values().copied())
        .fold(deadline_s, f64::max)
        * 1.05;
    let px = |x: f64| left + (x - x_min) / (x_max - x_min) * (w - left - right);
    let py = |y: f64| h - bottom - y / y_max * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let (x0, x1, y0, y1) = (px(x_min), px(x_max), py(0.0), py(y_max));
    let _ = writeln!(s, r#"<path d="M{x0:.1},{y1:.1} V{y0:.1} H{x1:.1}" fill="none" stroke="black"/>"#);
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = py(v);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, x0 - 6.0, y + 4.0);
    }
    for x in &xs {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="9">{x}</text>"#, px(*x as f64), y0 + 14.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, h - 12.0, escape(x_label));
    let _ = writeln!(s, r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">mean response (s)</text>"#, (y0 + y1) / 2.0, (y0 + y1) / 2.0);
    let yd = py(deadline_s);
    let _ = writeln!(s, r##"<line x1="{x0:.1}" y1="{yd:.1}" x2="{x1:.1}" y2="{yd:.1}" stroke="#444" stroke-dasharray="6,4"/>"##);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="10">deadline {deadline_s} s</text>"#, x1 + 4.0, yd + 4.0);
    for (i, (name, points)) in columns.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = points.iter().map(|(x, y)| format!("{:.1},{:.1}", px(*x as f64), py(*y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" "));
        let ly = top + 16.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#, w - right + 20.0, w - right + 40.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, w - right + 46.0, ly + 4.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes the requested outputs into `dir`, creating it if needed.
pub fn emit(rows: &[SummaryRow], dir: &Path, options: &EmitOptions) -> Result<EmittedFiles, HarnessError> {
    std::fs::create_dir_all(dir)?;
    let mut files = EmittedFiles::default();
    if options.csv {
        let path = dir.join(&options.csv_name);
        let mut buf = Vec::new();
        write_csv(rows, &mut buf)?;
        std::fs::write(&path, buf)?;
        files.csv = Some(path);
    }
    if options.plot_data || options.svg {
        for ((env, method), series) in group(rows) {
            let stem = file_stem(&env, method);
            if options.plot_data {
                let path = dir.join(format!("{stem}.dat"));
                std::fs::write(&path, plot_data(&series))?;
                files.plot_data.push(path);
            }
            if options.svg {
                let path = dir.join(format!("{stem}.svg"));
                let title = format!("{env} {method}");
                std::fs::write(&path, render_svg(&title, series.x_label, &series.columns, options.deadline_s))?;
                files.svg.push(path);
            }
        }
    }
    Ok(files)
}
