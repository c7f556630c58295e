//! CSV and text rendering of samples and results, aggregation over runs,
//! and scatter plots.

use std::fmt::Write as _;

use crate::metrics::MetricReport;
use crate::{Error, Point, Result};

/// Mean and sample standard deviation over runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// Uses `n - 1`; zero for a single run.
    pub sd: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                sd: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, sd, n }
    }
}

/// One table row: a (parameterisation, sampler) pair summarised over runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub parameterisation: String,
    pub sampler: String,
    pub ll: Summary,
    pub w2: Summary,
    pub gmm: Summary,
    pub oos_count: usize,
    pub runs: Vec<usize>,
}

/// Groups reports by parameterisation and sampler, in order of first
/// appearance.
pub fn aggregate(reports: &[MetricReport]) -> Vec<Aggregate> {
    let mut keys: Vec<(&str, &str)> = Vec::new();
    for r in reports {
        let k = (r.parameterisation.as_str(), r.sampler.as_str());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(p, s)| {
            let rows: Vec<&MetricReport> = reports
                .iter()
                .filter(|r| r.parameterisation == p && r.sampler == s)
                .collect();
            let col = |f: fn(&MetricReport) -> f64| {
                Summary::of(&rows.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            Aggregate {
                parameterisation: p.to_string(),
                sampler: s.to_string(),
                ll: col(|r| r.ll),
                w2: col(|r| r.w2),
                gmm: col(|r| r.gmm),
                oos_count: rows.iter().map(|r| r.oos_count).sum(),
                runs: rows.iter().map(|r| r.run_id).collect(),
            }
        })
        .collect()
}

pub fn table_csv(rows: &[Aggregate]) -> String {
    let mut out = String::from(
        "parameterisation,sampler,runs,LL_mean,LL_sd,W2_mean,W2_sd,GMM_mean,GMM_sd,oos_count\n",
    );
    for a in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            a.parameterisation,
            a.sampler,
            a.runs.len(),
            a.ll.mean,
            a.ll.sd,
            a.w2.mean,
            a.w2.sd,
            a.gmm.mean,
            a.gmm.sd,
            a.oos_count
        );
    }
    out
}

/// Fixed-width table with `mean ± sd` cells.
pub fn table_text(rows: &[Aggregate]) -> String {
    let mut out = format!(
        "{:<8} {:<12} {:>4} {:>15} {:>13} {:>19} {:>5}\n",
        "param", "sampler", "runs", "LL", "W2", "GMM", "oos"
    );
    for a in rows {
        let _ = writeln!(
            out,
            "{:<8} {:<12} {:>4} {:>15} {:>13} {:>19} {:>5}",
            a.parameterisation,
            a.sampler,
            a.runs.len(),
            format!("{:.2} ± {:.2}", a.ll.mean, a.ll.sd),
            format!("{:.2} ± {:.2}", a.w2.mean, a.w2.sd),
            format!("{:.5} ± {:.5}", a.gmm.mean, a.gmm.sd),
            a.oos_count
        );
    }
    out
}

pub fn results_csv(reports: &[MetricReport]) -> String {
    let mut out = format!("{}\n", MetricReport::CSV_HEADER);
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Parses [`results_csv`] output. Blank lines are skipped.
pub fn read_results_csv(text: &str) -> Result<Vec<MetricReport>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == MetricReport::CSV_HEADER => {}
        Some((_, h)) => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unexpected header `{h}`"),
            })
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty file".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| MetricReport::parse_csv_row(l, i + 1))
        .collect()
}

/// `x,y` CSV with round-trip precision.
pub fn points_csv(points: &[Point]) -> String {
    let mut out = String::with_capacity(points.len() * 40 + 4);
    out.push_str("x,y\n");
    for p in points {
        let _ = writeln!(out, "{},{}", p[0], p[1]);
    }
    out
}

/// Reads two-column CSV; a non-numeric first line is taken as a header.
pub fn parse_points_csv(text: &str) -> Result<Vec<Point>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: i + 1, msg };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(err(format!("expected 2 fields, found {}", fields.len())));
        }
        match (fields[0].parse::<f64>(), fields[1].parse::<f64>()) {
            (Ok(x), Ok(y)) => out.push([x, y]),
            _ if i == 0 => continue,
            _ => return Err(err(format!("non-numeric row `{line}`"))),
        }
    }
    Ok(out)
}

/// SVG scatter plot over `[-1.2, 1.2]^2`, one dot per point.
pub fn scatter_svg(points: &[Point], title: &str) -> String {
    const SIZE: f64 = 480.0;
    const HALF: f64 = 1.2;
    let px = |v: f64| (v + HALF) / (2.0 * HALF) * SIZE;
    let py = |v: f64| SIZE - px(v);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{h}" viewBox="0 -24 {SIZE} {h}">"#,
        h = SIZE + 24.0
    );
    let escaped = title
        .replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;");
    let _ = writeln!(
        out,
        r#"<text x="4" y="-8" font-family="sans-serif" font-size="14">{escaped}</text>"#
    );
    let _ = writeln!(
        out,
        r##"<rect x="0" y="0" width="{SIZE}" height="{SIZE}" fill="white" stroke="#888"/>"##
    );
    let _ = writeln!(
        out,
        r##"<path d="M0 {c:.1}H{SIZE}M{c:.1} 0V{SIZE}" stroke="#ccc"/>"##,
        c = SIZE / 2.0
    );
    out.push_str(r##"<g fill="#1f4e9a" fill-opacity="0.5">"##);
    out.push('\n');
    for p in points {
        if p[0].abs() > HALF || p[1].abs() > HALF {
            continue;
        }
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="1"/>"#,
            px(p[0]),
            py(p[1])
        );
    }
    out.push_str("</g>\n</svg>\n");
    out
}
