//! Static SVG charts: per-group AUC/FPR bars with the max-min gap marked,
//! and robustness deltas across disturbances.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Result};
use misleading_core::metrics::{robustness_delta, GroupMetrics, MetricsReport};
use plotters::prelude::*;
use plotters::style::text_anchor::{HPos, Pos, VPos};

const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

pub struct NamedReport {
    pub name: String,
    pub report: MetricsReport,
}

fn plot_err<E: std::fmt::Display>(e: E) -> anyhow::Error {
    anyhow!("plotting failed: {e}")
}

fn min_max(vals: &[f64]) -> Option<(f64, f64)> {
    let first = *vals.first()?;
    Some(vals.iter().fold((first, first), |(a, b), &v| (a.min(v), b.max(v))))
}

type Chart<'a, 'b> = ChartContext<'a, SVGBackend<'b>, Cartesian2d<plotters::coord::types::RangedCoordf64, plotters::coord::types::RangedCoordf64>>;

/// Writes one label under each integer x position.
fn draw_ticks(root: &DrawingArea<SVGBackend, plotters::coord::Shift>, chart: &Chart, labels: &[String], y_min: f64) -> Result<()> {
    let style = ("sans-serif", 13).into_font().color(&BLACK).pos(Pos::new(HPos::Center, VPos::Top));
    for (i, label) in labels.iter().enumerate() {
        let (x, y) = chart.backend_coord(&(i as f64, y_min));
        root.draw(&Text::new(label.clone(), (x, y + 8), style.clone()))
            .map_err(plot_err)?;
    }
    Ok(())
}

/// Grouped bars of one per-group metric, one series per report.
fn group_bars(
    reports: &[NamedReport],
    metric: fn(&GroupMetrics) -> Option<f64>,
    title: &str,
    y_desc: &str,
    path: &Path,
) -> Result<()> {
    let mut groups: Vec<String> = reports.iter().flat_map(|r| r.report.per_group.keys().cloned()).collect();
    groups.sort();
    groups.dedup();
    let n = groups.len();
    let s = reports.len();
    let width = 0.8 / s as f64;
    let gap_x0 = n as f64 - 0.5;
    let x_end = gap_x0 + 0.2 * (s as f64 + 1.0);
    let ymax = reports
        .iter()
        .flat_map(|r| r.report.per_group.values().filter_map(metric))
        .fold(0.0f64, f64::max)
        .max(1e-3)
        * 1.15;

    let root = SVGBackend::new(path, (160 + 90 * n.max(2) as u32, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(55)
        .build_cartesian_2d(-0.5f64..x_end, 0f64..ymax)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(0)
        .y_desc(y_desc)
        .draw()
        .map_err(plot_err)?;
    draw_ticks(&root, &chart, &groups, 0.0)?;

    for (si, r) in reports.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let vals: Vec<(usize, f64)> = groups
            .iter()
            .enumerate()
            .filter_map(|(gi, g)| r.report.per_group.get(g).and_then(metric).map(|v| (gi, v)))
            .collect();
        let bars = vals.iter().map(|&(gi, v)| {
            let x0 = gi as f64 - 0.4 + si as f64 * width;
            Rectangle::new([(x0, 0.0), (x0 + width * 0.9, v)], color.filled())
        });
        let values: Vec<f64> = vals.iter().map(|v| v.1).collect();
        let label = match min_max(&values) {
            Some((lo, hi)) => format!("{} (gap {:.4})", r.name, hi - lo),
            None => r.name.clone(),
        };
        chart
            .draw_series(bars)
            .map_err(plot_err)?
            .label(label)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
        if let Some((lo, hi)) = min_max(&values) {
            let x = gap_x0 + 0.2 * (si as f64 + 1.0);
            let marks = [
                PathElement::new(vec![(x, lo), (x, hi)], color.stroke_width(2)),
                PathElement::new(vec![(x - 0.05, lo), (x + 0.05, lo)], color.stroke_width(2)),
                PathElement::new(vec![(x - 0.05, hi), (x + 0.05, hi)], color.stroke_width(2)),
            ];
            chart.draw_series(marks).map_err(plot_err)?;
        }
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::UpperRight)
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Bars of ΔAUC, ΔF_FPR and ΔF_MAG for every perturbed report against the
/// clean one.
fn delta_chart(clean: &NamedReport, perturbed: &[&NamedReport], path: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for p in perturbed {
        let d = robustness_delta(&clean.report, &p.report)?;
        let tick = p.report.meta.perturbation.clone().unwrap_or_else(|| p.name.clone());
        rows.push((tick, [d.delta_auc, d.delta_f_fpr, d.delta_f_mag]));
    }
    let all: Vec<f64> = rows.iter().flat_map(|r| r.1.iter().flatten().copied()).collect();
    let (lo, hi) = min_max(&all).unwrap_or((0.0, 0.0));
    let pad = ((hi - lo) * 0.1).max(1e-3);
    let (lo, hi) = (lo.min(0.0) - pad, hi.max(0.0) + pad);
    let n = rows.len();

    let root = SVGBackend::new(path, (160 + 90 * n.max(2) as u32, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Change under disturbance", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(55)
        .build_cartesian_2d(-0.5f64..n as f64 - 0.5, lo..hi)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(0)
        .y_desc("perturbed - clean")
        .draw()
        .map_err(plot_err)?;
    let ticks: Vec<String> = rows.iter().map(|r| r.0.clone()).collect();
    draw_ticks(&root, &chart, &ticks, lo)?;
    for (k, name) in ["ΔAUC", "ΔF_FPR", "ΔF_MAG"].iter().enumerate() {
        let color = PALETTE[k];
        let bars = rows.iter().enumerate().filter_map(|(i, r)| {
            r.1[k].map(|v| {
                let x0 = i as f64 - 0.4 + k as f64 * 0.8 / 3.0;
                Rectangle::new([(x0, 0.0), (x0 + 0.24, v)], color.filled())
            })
        });
        chart
            .draw_series(bars)
            .map_err(plot_err)?
            .label(*name)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart
        .draw_series(std::iter::once(PathElement::new(vec![(-0.5, 0.0), (n as f64 - 0.5, 0.0)], BLACK)))
        .map_err(plot_err)?;
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Writes `auc_by_group.svg`, `fpr_by_group.svg` and, when there is a clean
/// report plus perturbed ones, `robustness_delta.svg`.
pub fn plot_reports(reports: &[NamedReport], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() || reports.iter().any(|r| r.report.per_group.is_empty()) {
        bail!("empty report: nothing to plot");
    }
    std::fs::create_dir_all(out_dir).map_err(|e| anyhow!("cannot create {}: {e}", out_dir.display()))?;
    let mut written = Vec::new();
    let auc = out_dir.join("auc_by_group.svg");
    group_bars(reports, |g| g.auc, "AUC by group", "AUC", &auc)?;
    written.push(auc);
    let fpr = out_dir.join("fpr_by_group.svg");
    group_bars(reports, |g| g.fpr, "False positive rate by group", "FPR", &fpr)?;
    written.push(fpr);

    let clean = reports.iter().find(|r| r.report.meta.perturbation.is_none());
    let perturbed: Vec<&NamedReport> = reports.iter().filter(|r| r.report.meta.perturbation.is_some()).collect();
    if let (Some(clean), false) = (clean, perturbed.is_empty()) {
        let delta = out_dir.join("robustness_delta.svg");
        delta_chart(clean, &perturbed, &delta)?;
        written.push(delta);
    }
    Ok(written)
}
