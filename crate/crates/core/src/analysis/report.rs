use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{AnalysisReport, BucketStats, IntensityRecord, RatioRecord};
use crate::error::{Result, SwepError};

pub const SCHEMA_VERSION: u32 = 1;

fn csv_err(path: &Path, e: csv::Error) -> SwepError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SwepError::io(path, io),
        other => SwepError::Parse {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    }
}

fn write_csv<R, F>(path: &Path, header: &[&str], rows: &[R], mut fields: F) -> Result<()>
where
    F: FnMut(&R) -> Vec<String>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(fields(r)).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| SwepError::io(path, e))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes `report.json`, `ratios.csv`, `intensity.csv` and `buckets.csv`
/// into `out_dir` and returns their paths.
pub fn emit_report(report: &AnalysisReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| SwepError::io(out_dir, e))?;
    let json_path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(report).map_err(|e| SwepError::Parse {
        path: json_path.clone(),
        message: e.to_string(),
    })?;
    fs::write(&json_path, json).map_err(|e| SwepError::io(&json_path, e))?;

    let ratios = out_dir.join("ratios.csv");
    write_csv(
        &ratios,
        &["step", "raw_ratio", "corrected_ratio", "method"],
        &report.word_change_ratio_series,
        |r: &RatioRecord| {
            vec![
                r.step.to_string(),
                r.raw_ratio.to_string(),
                r.corrected_ratio.to_string(),
                r.method.clone(),
            ]
        },
    )?;
    let intensity = out_dir.join("intensity.csv");
    write_csv(
        &intensity,
        &["example_id", "position", "token", "l2"],
        &report.intensity_records,
        |r: &IntensityRecord| {
            vec![
                r.example_id.clone(),
                r.position.to_string(),
                r.token.clone(),
                r.l2.to_string(),
            ]
        },
    )?;
    let buckets = out_dir.join("buckets.csv");
    write_csv(
        &buckets,
        &[
            "rank_lo",
            "rank_hi",
            "n_tokens",
            "n_occurrences",
            "knn_l2",
            "pre_post_l2",
            "mean_mu",
        ],
        &report.bucket_stats,
        |b: &BucketStats| {
            vec![
                b.bucket.lo.to_string(),
                b.bucket.hi.to_string(),
                b.n_tokens.to_string(),
                b.n_occurrences.to_string(),
                opt(b.knn_l2),
                opt(b.pre_post_l2),
                opt(b.mean_mu),
            ]
        },
    )?;
    Ok(vec![json_path, ratios, intensity, buckets])
}

pub fn read_report(path: &Path) -> Result<AnalysisReport> {
    let text = fs::read_to_string(path).map_err(|e| SwepError::io(path, e))?;
    let report: AnalysisReport = serde_json::from_str(&text).map_err(|e| SwepError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if report.schema_version != SCHEMA_VERSION {
        return Err(SwepError::Parse {
            path: path.to_path_buf(),
            message: format!("schema_version {} (expected {SCHEMA_VERSION})", report.schema_version),
        });
    }
    Ok(report)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Line plot of raw ratios against step, one line per method.
fn ratios_svg(series: &[RatioRecord]) -> String {
    let (w, h, pad) = (640.0, 360.0, 48.0);
    let mut methods: Vec<&str> = Vec::new();
    for r in series {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let max_step = series.iter().map(|r| r.step).max().unwrap_or(0).max(1) as f64;
    let max_y = series.iter().map(|r| r.raw_ratio).fold(0.0f64, f64::max).max(1e-3);
    let x = |s: usize| pad + (w - 2.0 * pad) * s as f64 / max_step;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * v / max_y;
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = write!(
        svg,
        r#"<line x1="{pad}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{b}" stroke="black"/>"#,
        b = h - pad,
        r = w - pad
    );
    let _ = write!(svg, r#"<text x="{}" y="{}">step</text>"#, w / 2.0, h - 12.0);
    let _ = write!(
        svg,
        r#"<text x="4" y="{}">{max_y:.3}</text><text x="4" y="{}">0</text>"#,
        pad,
        h - pad
    );
    for (i, m) in methods.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut pts: Vec<&RatioRecord> = series.iter().filter(|r| r.method == *m).collect();
        pts.sort_by_key(|r| r.step);
        let path: Vec<String> = pts
            .iter()
            .map(|r| format!("{:.1},{:.1}", x(r.step), y(r.raw_ratio)))
            .collect();
        let _ = write!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        for r in &pts {
            let _ = write!(
                svg,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                x(r.step),
                y(r.raw_ratio)
            );
        }
        let _ = write!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            w - pad - 140.0,
            pad + 16.0 * i as f64,
            escape(m)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Tokens of each example shaded by perturbation intensity.
fn intensity_html(records: &[IntensityRecord]) -> String {
    let max = records.iter().map(|r| r.l2).fold(0.0f64, f64::max).max(1e-12);
    let mut html = String::from("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>perturbation intensity</title></head><body style=\"font-family:monospace\">\n");
    let mut current: Option<&str> = None;
    for r in records {
        if current != Some(r.example_id.as_str()) {
            if current.is_some() {
                html.push_str("</p>\n");
            }
            let _ = write!(html, "<p><b>{}</b>: ", escape(&r.example_id));
            current = Some(&r.example_id);
        }
        let a = r.l2 / max;
        let _ = write!(
            html,
            r#"<span title="{:.4}" style="background:rgba(214,39,40,{a:.3});padding:1px 2px">{}</span> "#,
            r.l2,
            escape(&r.token)
        );
    }
    if current.is_some() {
        html.push_str("</p>\n");
    }
    html.push_str("</body></html>\n");
    html
}

/// Renders `report.json` in `dir` into `report.md`, `ratios.svg` and
/// `intensity.html`.
pub fn render_report(dir: &Path) -> Result<Vec<PathBuf>> {
    let report = read_report(&dir.join("report.json"))?;
    let mut md = String::from("# Perturbation analysis\n\n## Word-change ratio\n\n| step | method | raw | corrected |\n|---:|---|---:|---:|\n");
    for r in &report.word_change_ratio_series {
        let _ = writeln!(
            md,
            "| {} | {} | {:.4} | {:.4} |",
            r.step, r.method, r.raw_ratio, r.corrected_ratio
        );
    }
    md.push_str("\n## Frequency buckets\n\n| ranks | tokens | occurrences | k-NN l2 | pre/post l2 | mean mu |\n|---|---:|---:|---:|---:|---:|\n");
    for b in &report.bucket_stats {
        let _ = writeln!(
            md,
            "| ({}, {}] | {} | {} | {} | {} | {} |",
            b.bucket.lo,
            b.bucket.hi,
            b.n_tokens,
            b.n_occurrences,
            fmt_opt(b.knn_l2),
            fmt_opt(b.pre_post_l2),
            fmt_opt(b.mean_mu)
        );
    }
    let _ = writeln!(
        md,
        "\n{} intensity records; see intensity.html.",
        report.intensity_records.len()
    );
    let out = [
        (dir.join("report.md"), md),
        (dir.join("ratios.svg"), ratios_svg(&report.word_change_ratio_series)),
        (dir.join("intensity.html"), intensity_html(&report.intensity_records)),
    ];
    for (p, body) in &out {
        fs::write(p, body).map_err(|e| SwepError::io(p, e))?;
    }
    Ok(out.into_iter().map(|(p, _)| p).collect())
}
