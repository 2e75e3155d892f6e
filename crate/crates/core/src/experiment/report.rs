//! Static report for a run directory: a CSV of curve summaries and one SVG
//! line plot per logged metric. Output depends only on the logs, so
//! regenerating it yields identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::{Error, Result};
use crate::jsonl;

use super::config::Stage;
use super::run::{read_manifest, stage_logs, CONFIG_FILE, MANIFEST_FILE};

/// One numeric series extracted from a log.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub source: String,
    pub metric: String,
    pub points: Vec<(f64, f64)>,
}

/// Files written by [`report`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub summary: PathBuf,
    pub plots: Vec<PathBuf>,
}

fn x_key(source: &str) -> &'static str {
    if source.contains("pretrain") || source.contains("sft") {
        "step"
    } else {
        "iter"
    }
}

fn curves_from(source: &str, records: &[Value]) -> Vec<Curve> {
    let xk = x_key(source);
    let mut names: Vec<String> = Vec::new();
    for r in records {
        if let Some(obj) = r.as_object() {
            for (k, v) in obj {
                if k != xk && k != "epoch" && v.is_number() && !names.contains(k) {
                    names.push(k.clone());
                }
            }
        }
    }
    names
        .into_iter()
        .map(|metric| {
            let points = records
                .iter()
                .filter_map(|r| Some((r.get(xk)?.as_f64()?, r.get(&metric)?.as_f64()?)))
                .filter(|(_, y)| y.is_finite())
                .collect();
            Curve {
                source: source.to_string(),
                metric,
                points,
            }
        })
        .filter(|c| !c.points.is_empty())
        .collect()
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-3 {
        format!("{v:.3e}")
    } else {
        format!("{v:.4}")
    }
}

/// SVG line plot with labelled axis extremes.
pub fn render_svg(title: &str, series: &[(&str, &[(f64, f64)])]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const L: f64 = 80.0;
    const R: f64 = 20.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let all = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        let pad = if y0 == 0.0 { 1.0 } else { y0.abs() * 0.05 };
        y0 -= pad;
        y1 += pad;
    }
    let sx = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
    let sy = |y: f64| H - B - (y - y0) / (y1 - y0) * (H - T - B);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        W / 2.0,
        title
    );
    let _ = writeln!(
        s,
        r#"<path d="M{L} {T} L{L} {} L{} {}" fill="none" stroke="black"/>"#,
        H - B,
        W - R,
        H - B
    );
    for (v, y) in [(y0, H - B), (y1, T)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#,
            L - 6.0,
            y + 4.0,
            fmt_num(v)
        );
    }
    for (v, x) in [(x0, L), (x1, W - R)] {
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            H - B + 16.0,
            fmt_num(v)
        );
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        if series.len() > 1 {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{c}">{name}</text>"#,
                L + 10.0,
                T + 14.0 * (i as f64 + 1.0)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Regenerates `report/` from the logs of a run directory.
///
/// Fails with the list of expected files when the directory holds no run,
/// and with the absent logs when a stage marked complete lost its log.
pub fn report(dir: &Path) -> Result<ReportFiles> {
    if !dir.join(MANIFEST_FILE).exists() || !dir.join(CONFIG_FILE).exists() {
        let mut expected = vec![dir.join(CONFIG_FILE), dir.join(MANIFEST_FILE)];
        expected.extend(Stage::ALL.iter().flat_map(|s| stage_logs(*s).iter().map(|f| dir.join(f))));
        return Err(Error::MissingArtifacts(expected));
    }
    let manifest = read_manifest(dir)?;
    let missing: Vec<PathBuf> = manifest
        .completed
        .iter()
        .flat_map(|s| stage_logs(*s).iter().map(|f| dir.join(f)))
        .filter(|p| !p.exists())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    let mut stages = manifest.completed.clone();
    stages.sort();
    let mut curves = Vec::new();
    for s in &stages {
        if *s == Stage::Eval {
            continue;
        }
        for f in stage_logs(*s) {
            let records: Vec<Value> = jsonl::read(&dir.join(f))?;
            let source = f.trim_end_matches(".jsonl").replace('/', "_").replace("_log", "").replace("_metrics", "");
            curves.extend(curves_from(&source, &records));
        }
    }

    let out = dir.join("report");
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut csv = String::from("source,metric,points,first,last,min,max\n");
    let mut plots = Vec::new();
    for c in &curves {
        let ys: Vec<f64> = c.points.iter().map(|p| p.1).collect();
        let min = ys.iter().copied().fold(f64::INFINITY, f64::min);
        let max = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            c.source,
            c.metric,
            ys.len(),
            ys[0],
            ys[ys.len() - 1],
            min,
            max
        );
        let name = format!("{}_{}", c.source, c.metric);
        let path = out.join(format!("{name}.svg"));
        write(&path, &render_svg(&name, &[(c.metric.as_str(), &c.points)]))?;
        plots.push(path);
    }
    // Overlay of the two granularities when the length study ran.
    let tw = curves.iter().find(|c| c.source == "length_study_token_wise" && c.metric == "mean_len");
    let se = curves.iter().find(|c| c.source == "length_study_sequence_at_eos" && c.metric == "mean_len");
    if let (Some(a), Some(b)) = (tw, se) {
        let path = out.join("length_study_mean_len.svg");
        write(
            &path,
            &render_svg(
                "mean response length",
                &[("token_wise", &a.points), ("sequence_at_eos", &b.points)],
            ),
        )?;
        plots.push(path);
    }
    let eval_csv = dir.join("eval/summary.csv");
    if eval_csv.exists() {
        let text = fs::read_to_string(&eval_csv).map_err(|e| Error::io(&eval_csv, e))?;
        write(&out.join("methods.csv"), &text)?;
    }
    let summary = out.join("summary.csv");
    write(&summary, &csv)?;
    Ok(ReportFiles { summary, plots })
}
