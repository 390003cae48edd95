//! Report emission: per-replication and summary CSV, a JSON mirror, and
//! self-contained SVG figures. All text output is byte-deterministic for a
//! given report: fixed column order, fixed row order, and floats printed
//! with 17 significant digits in scientific notation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::{DiagRecord, ExperimentReport, RepRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
    Svg,
}

impl Format {
    pub fn parse_list(s: &str) -> Result<Vec<Format>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            out.push(match part {
                "csv" => Format::Csv,
                "json" => Format::Json,
                "svg" => Format::Svg,
                other => return Err(Error::Config(format!("unknown format: {other}"))),
            });
        }
        if out.is_empty() {
            return Err(Error::Config("empty format list".into()));
        }
        Ok(out)
    }
}

/// 17 significant digits: round-trips every f64 exactly.
fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn per_rep_csv(rows: &[RepRecord], scenario: &str) -> String {
    let mut s = String::from("scenario,rep,estimator,beta_hat,bias,ci_lo,ci_hi,covered\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            scenario,
            r.rep,
            r.estimator,
            fmt_float(r.beta_hat),
            fmt_float(r.bias),
            fmt_float(r.ci_lo),
            fmt_float(r.ci_hi),
            u8::from(r.covered),
        );
    }
    s
}

pub fn summary_csv(report: &ExperimentReport) -> String {
    let mut s = String::from("estimator,replications,mean_bias,sd_bias,coverage\n");
    for row in &report.summaries {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            row.estimator,
            row.replications,
            fmt_float(row.mean_bias),
            fmt_float(row.sd_bias),
            fmt_float(row.coverage),
        );
    }
    s
}

pub fn diagnostics_csv(diags: &[DiagRecord]) -> String {
    let mut s = String::from("rep,n,statistic,value\n");
    for d in diags {
        let _ = writeln!(s, "{},{},{},{}", d.rep, d.n, d.statistic, fmt_float(d.value));
    }
    s
}

pub fn errors_csv(report: &ExperimentReport) -> String {
    let mut s = String::from("rep,estimator,message\n");
    for e in &report.errors {
        // messages may contain commas; quote the field
        let _ = writeln!(s, "{},{},\"{}\"", e.rep, e.estimator, e.message.replace('"', "'"));
    }
    s
}

fn scenario_id(report: &ExperimentReport) -> String {
    serde_json::to_value(report.scenario)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_else(|| "unknown".into())
}

/// Parses a per-replication CSV back into records (the `report` subcommand).
pub fn read_per_rep_csv(text: &str) -> Result<Vec<RepRecord>> {
    let mut rows = Vec::new();
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Config("empty CSV".into()))?;
    if header != "scenario,rep,estimator,beta_hat,bias,ci_lo,ci_hi,covered" {
        return Err(Error::Config(format!("unexpected CSV header: {header}")));
    }
    for (i, line) in lines.enumerate() {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return Err(Error::Config(format!("row {}: expected 8 fields", i + 2)));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Config(format!("row {}: bad float {s}", i + 2)))
        };
        rows.push(RepRecord {
            rep: parts[1]
                .parse()
                .map_err(|_| Error::Config(format!("row {}: bad rep", i + 2)))?,
            estimator: parts[2].to_string(),
            beta_hat: parse_f(parts[3])?,
            bias: parse_f(parts[4])?,
            ci_lo: parse_f(parts[5])?,
            ci_hi: parse_f(parts[6])?,
            covered: parts[7] == "1",
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// SVG figures
// ---------------------------------------------------------------------------

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 160.0;
const MARGIN: f64 = 45.0;

fn svg_header(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" \
         viewBox=\"0 0 {w:.0} {h:.0}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

/// One histogram panel per estimator, stacked vertically, sharing an x-axis
/// range over all bias values.
pub fn bias_histogram_svg(report: &ExperimentReport) -> String {
    let estimators: Vec<String> = report.summaries.iter().map(|s| s.estimator.clone()).collect();
    if estimators.is_empty() || report.rows.is_empty() {
        return format!("{}</svg>\n", svg_header(PANEL_W, PANEL_H));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in &report.rows {
        lo = lo.min(r.bias);
        hi = hi.max(r.bias);
    }
    if !(hi > lo) {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let bins = 30usize;
    let total_h = MARGIN + estimators.len() as f64 * (PANEL_H + MARGIN);
    let mut s = svg_header(PANEL_W + 2.0 * MARGIN, total_h);

    for (k, est) in estimators.iter().enumerate() {
        let top = MARGIN + k as f64 * (PANEL_H + MARGIN);
        let mut counts = vec![0usize; bins];
        let mut m = 0usize;
        for r in report.rows.iter().filter(|r| &r.estimator == est) {
            let t = ((r.bias - lo) / (hi - lo) * bins as f64) as usize;
            counts[t.min(bins - 1)] += 1;
            m += 1;
        }
        let peak = counts.iter().copied().max().unwrap_or(1).max(1) as f64;
        let bw = PANEL_W / bins as f64;
        for (b, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let bh = c as f64 / peak * PANEL_H;
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" \
                 fill=\"steelblue\"/>",
                MARGIN + b as f64 * bw,
                top + PANEL_H - bh,
                bw - 0.5,
                bh
            );
        }
        // axis line and zero-bias marker
        let _ = writeln!(
            s,
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
            MARGIN,
            top + PANEL_H,
            MARGIN + PANEL_W,
            top + PANEL_H
        );
        if lo < 0.0 && hi > 0.0 {
            let xz = MARGIN + (0.0 - lo) / (hi - lo) * PANEL_W;
            let _ = writeln!(
                s,
                "<line x1=\"{xz:.2}\" y1=\"{:.2}\" x2=\"{xz:.2}\" y2=\"{:.2}\" \
                 stroke=\"firebrick\" stroke-dasharray=\"4 3\"/>",
                top,
                top + PANEL_H
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"13\">\
             {est} (bias over {m} replications)</text>",
            MARGIN,
            top - 8.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\">\
             {:.3}</text>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" \
             text-anchor=\"end\">{:.3}</text>",
            MARGIN,
            top + PANEL_H + 14.0,
            lo,
            MARGIN + PANEL_W,
            top + PANEL_H + 14.0,
            hi
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Scatter of exact versus spectrally predicted bias, with the y = x line.
pub fn eigen_scatter_svg(diags: &[DiagRecord]) -> String {
    let exact: Vec<(usize, f64)> = diags
        .iter()
        .filter(|d| d.statistic == "exact_bias")
        .map(|d| (d.rep, d.value))
        .collect();
    let predicted: Vec<(usize, f64)> = diags
        .iter()
        .filter(|d| d.statistic == "predicted_bias")
        .map(|d| (d.rep, d.value))
        .collect();
    let side = 360.0;
    let mut s = svg_header(side + 2.0 * MARGIN, side + 2.0 * MARGIN);
    let pairs: Vec<(f64, f64)> = exact
        .iter()
        .filter_map(|&(rep, e)| {
            predicted.iter().find(|&&(r, _)| r == rep).map(|&(_, p)| (e, p))
        })
        .collect();
    if pairs.is_empty() {
        s.push_str("</svg>\n");
        return s;
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &(e, p) in &pairs {
        lo = lo.min(e.min(p));
        hi = hi.max(e.max(p));
    }
    if !(hi > lo) {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let to_px = |v: f64| MARGIN + (v - lo) / (hi - lo) * side;
    let _ = writeln!(
        s,
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"gray\" \
         stroke-dasharray=\"5 4\"/>",
        to_px(lo),
        MARGIN + side - (to_px(lo) - MARGIN),
        to_px(hi),
        MARGIN + side - (to_px(hi) - MARGIN)
    );
    for &(e, p) in &pairs {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"steelblue\" \
             fill-opacity=\"0.7\"/>",
            to_px(e),
            MARGIN + side - (to_px(p) - MARGIN)
        );
    }
    let _ = writeln!(
        s,
        "<rect x=\"{MARGIN:.2}\" y=\"{MARGIN:.2}\" width=\"{side:.2}\" height=\"{side:.2}\" \
         fill=\"none\" stroke=\"black\"/>\n\
         <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"13\" \
         text-anchor=\"middle\">exact bias</text>\n\
         <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"13\" \
         text-anchor=\"middle\" transform=\"rotate(-90 {:.2} {:.2})\">predicted bias</text>",
        MARGIN + side / 2.0,
        MARGIN + side + 32.0,
        14.0,
        MARGIN + side / 2.0,
        14.0,
        MARGIN + side / 2.0,
    );
    s.push_str("</svg>\n");
    s
}

// ---------------------------------------------------------------------------
// File emission
// ---------------------------------------------------------------------------

pub fn write_report(report: &ExperimentReport, out_dir: &Path, formats: &[Format]) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let scenario = scenario_id(report);
    if formats.contains(&Format::Csv) {
        fs::write(out_dir.join("per_rep.csv"), per_rep_csv(&report.rows, &scenario))?;
        fs::write(out_dir.join("summary.csv"), summary_csv(report))?;
        if !report.diagnostics.is_empty() {
            fs::write(out_dir.join("diagnostics.csv"), diagnostics_csv(&report.diagnostics))?;
        }
        if !report.errors.is_empty() {
            fs::write(out_dir.join("errors.csv"), errors_csv(report))?;
        }
    }
    if formats.contains(&Format::Json) {
        let json = serde_json::to_string_pretty(report)?;
        fs::write(out_dir.join("report.json"), json)?;
    }
    if formats.contains(&Format::Svg) {
        fs::write(out_dir.join("bias_hist.svg"), bias_histogram_svg(report))?;
        if report.diagnostics.iter().any(|d| d.statistic == "exact_bias") {
            fs::write(out_dir.join("eigen_scatter.svg"), eigen_scatter_svg(&report.diagnostics))?;
        }
    }
    Ok(())
}

pub fn write_diagnostics(diags: &[DiagRecord], out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("diagnostics.csv"), diagnostics_csv(diags))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::ScenarioTag;
    use crate::harness::SummaryRow;

    fn toy_report() -> ExperimentReport {
        let rows = vec![
            RepRecord {
                rep: 1,
                estimator: "ols".into(),
                beta_hat: 1.5,
                bias: 0.5,
                ci_lo: 1.3,
                ci_hi: 1.7,
                covered: false,
            },
            RepRecord {
                rep: 2,
                estimator: "ols".into(),
                beta_hat: 1.0 + 1.0 / 3.0,
                bias: 1.0 / 3.0,
                ci_lo: 0.9,
                ci_hi: 1.8,
                covered: true,
            },
        ];
        let summaries = vec![SummaryRow {
            estimator: "ols".into(),
            replications: 2,
            mean_bias: 0.4166666666666667,
            sd_bias: 0.1178511301977579,
            coverage: 0.5,
        }];
        ExperimentReport {
            scenario: ScenarioTag::FixedConfounder,
            seed: 1,
            config_echo: "{}".into(),
            rows,
            errors: vec![],
            summaries,
            diagnostics: vec![],
        }
    }

    #[test]
    fn per_rep_csv_round_trips_floats_exactly() {
        let report = toy_report();
        let csv = per_rep_csv(&report.rows, "fixed_confounder");
        let back = read_per_rep_csv(&csv).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in report.rows.iter().zip(&back) {
            assert_eq!(a.beta_hat.to_bits(), b.beta_hat.to_bits());
            assert_eq!(a.bias.to_bits(), b.bias.to_bits());
            assert_eq!(a.covered, b.covered);
        }
    }

    #[test]
    fn empty_report_emits_headers_only() {
        let report = ExperimentReport {
            scenario: ScenarioTag::Eigen,
            seed: 0,
            config_echo: "{}".into(),
            rows: vec![],
            errors: vec![],
            summaries: vec![],
            diagnostics: vec![],
        };
        assert_eq!(
            per_rep_csv(&report.rows, "eigen"),
            "scenario,rep,estimator,beta_hat,bias,ci_lo,ci_hi,covered\n"
        );
        assert_eq!(summary_csv(&report), "estimator,replications,mean_bias,sd_bias,coverage\n");
    }

    #[test]
    fn write_report_is_byte_deterministic() {
        let report = toy_report();
        let dir = tempfile::tempdir().unwrap();
        let formats = [Format::Csv, Format::Json, Format::Svg];
        write_report(&report, dir.path(), &formats).unwrap();
        let first = std::fs::read(dir.path().join("per_rep.csv")).unwrap();
        let first_json = std::fs::read(dir.path().join("report.json")).unwrap();
        let first_svg = std::fs::read(dir.path().join("bias_hist.svg")).unwrap();
        write_report(&report, dir.path(), &formats).unwrap();
        assert_eq!(first, std::fs::read(dir.path().join("per_rep.csv")).unwrap());
        assert_eq!(first_json, std::fs::read(dir.path().join("report.json")).unwrap());
        assert_eq!(first_svg, std::fs::read(dir.path().join("bias_hist.svg")).unwrap());
    }

    #[test]
    fn format_list_parses() {
        assert_eq!(Format::parse_list("csv,json").unwrap(), vec![Format::Csv, Format::Json]);
        assert!(Format::parse_list("csv,png").is_err());
        assert!(Format::parse_list("").is_err());
    }

    #[test]
    fn scatter_svg_handles_pairs() {
        let diags = vec![
            DiagRecord { rep: 1, n: 100, statistic: "exact_bias".into(), value: 0.1 },
            DiagRecord { rep: 1, n: 100, statistic: "predicted_bias".into(), value: 0.12 },
            DiagRecord { rep: 2, n: 100, statistic: "exact_bias".into(), value: -0.05 },
            DiagRecord { rep: 2, n: 100, statistic: "predicted_bias".into(), value: -0.04 },
        ];
        let svg = eigen_scatter_svg(&diags);
        assert!(svg.starts_with("<svg"));
        assert!(svg.matches("<circle").count() == 2);
        assert!(svg.ends_with("</svg>\n"));
    }
}
