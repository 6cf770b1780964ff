//! Grouped bar charts (SVG) and the matching CSV from report files.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::ablate::AblationReport;
use super::eval::{EvalReport, MetricReport, SeedSummary};
use crate::error::{Error, Result};
use crate::metrics::MeanStd;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub label: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

fn push(rows: &mut Vec<PlotRow>, label: &str, metric: &str, v: Option<MeanStd>) {
    if let Some(m) = v {
        rows.push(PlotRow {
            label: label.to_string(),
            metric: metric.to_string(),
            mean: m.mean,
            std: m.std,
        });
    }
}

fn seed_rows(rows: &mut Vec<PlotRow>, label: &str, s: &SeedSummary) {
    push(rows, label, "ari", s.ari);
    push(rows, label, "ari_fg", s.ari_fg);
    push(rows, label, "mbo", s.mbo);
    push(rows, label, "miou", s.miou);
    push(rows, label, "fraction_last_better", s.fraction_last_better);
}

/// Extracts plottable values from any report JSON produced by the tool.
pub fn plot_rows(text: &str, label: &str) -> Result<Vec<PlotRow>> {
    let mut rows = Vec::new();
    if let Ok(r) = serde_json::from_str::<AblationReport>(text) {
        for c in &r.configs {
            seed_rows(&mut rows, &c.name, &c.eval);
            push(&mut rows, &c.name, "probe_top1", c.probe_top1);
            push(&mut rows, &c.name, "probe_r2", c.probe_r2);
        }
    } else if let Ok(r) = serde_json::from_str::<MetricReport>(text) {
        seed_rows(&mut rows, label, &r.summary);
    } else if let Ok(r) = serde_json::from_str::<EvalReport>(text) {
        seed_rows(&mut rows, label, &SeedSummary::from_reports(std::slice::from_ref(&r)));
    } else {
        return Err(Error::Config(format!("{label}: not a recognized report")));
    }
    Ok(rows)
}

fn first_seen<'a>(it: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for s in it {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f",
];

/// One bar group per metric, one bar per label, with ±std whiskers.
pub fn render_svg(rows: &[PlotRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Config("nothing to plot".into()));
    }
    let metrics = first_seen(rows.iter().map(|r| r.metric.as_str()));
    let labels = first_seen(rows.iter().map(|r| r.label.as_str()));
    let (bar, gap, left, top, plot_h) = (18.0, 24.0, 60.0, 20.0, 240.0);
    let group_w = bar * labels.len() as f64 + gap;
    let width = left + group_w * metrics.len() as f64 + 20.0;
    let legend_h = 18.0 * labels.len() as f64;
    let height = top + plot_h + 40.0 + legend_h;
    let lo = rows
        .iter()
        .map(|r| r.mean - r.std)
        .fold(0.0f64, f64::min)
        .min(0.0);
    let hi = rows.iter().map(|r| r.mean + r.std).fold(1.0f64, f64::max);
    let y = |v: f64| top + plot_h * (hi - v) / (hi - lo);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.1}" height="{height:.1}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for tick in 0..=4 {
        let v = lo + (hi - lo) * tick as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left:.1}" x2="{:.1}" y1="{yy:.1}" y2="{yy:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"##,
            width - 20.0,
            left - 6.0,
            y(v) + 4.0,
            yy = y(v)
        );
    }
    let _ = writeln!(
        s,
        r##"<line x1="{left:.1}" x2="{:.1}" y1="{z:.1}" y2="{z:.1}" stroke="#333"/>"##,
        width - 20.0,
        z = y(0.0)
    );
    for (mi, metric) in metrics.iter().enumerate() {
        let gx = left + gap / 2.0 + group_w * mi as f64;
        for (li, label) in labels.iter().enumerate() {
            let Some(r) = rows.iter().find(|r| r.metric == *metric && r.label == *label) else {
                continue;
            };
            let x = gx + bar * li as f64;
            let (y0, y1) = (y(r.mean.max(0.0)), y(r.mean.min(0.0)));
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{y0:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{label} {metric}: {:.4} ± {:.4}</title></rect>"#,
                bar - 2.0,
                y1 - y0,
                PALETTE[li % PALETTE.len()],
                r.mean,
                r.std
            );
            if r.std > 0.0 {
                let cx = x + (bar - 2.0) / 2.0;
                let _ = writeln!(
                    s,
                    r##"<line x1="{cx:.1}" x2="{cx:.1}" y1="{:.1}" y2="{:.1}" stroke="#222"/>"##,
                    y(r.mean + r.std),
                    y(r.mean - r.std)
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{metric}</text>"#,
            gx + bar * labels.len() as f64 / 2.0,
            top + plot_h + 16.0
        );
    }
    for (li, label) in labels.iter().enumerate() {
        let ly = top + plot_h + 36.0 + 18.0 * li as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{left:.1}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{:.1}">{label}</text>"#,
            ly - 10.0,
            PALETTE[li % PALETTE.len()],
            left + 18.0,
            ly
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn render_csv(rows: &[PlotRow]) -> String {
    let mut s = String::from("label,metric,mean,std\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.label, r.metric, r.mean, r.std);
    }
    s
}
