//! Loss curves and iterations-vs-metric figures rendered as SVG.
//!
//! Figures are first described as plain data ([`Figure`]) so their content
//! can be checked without rendering.

use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::train::StepLog;
use crate::metrics::MetricsReport;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Figure {
    /// File stem of the rendered figure.
    pub name: String,
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

/// One point of an iteration sweep: the metrics of a model decoded with
/// `num_iterations` passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationPoint {
    pub num_iterations: usize,
    pub report: MetricsReport,
}

impl Figure {
    /// Axis ranges covering every point, padded by 5% (a degenerate range
    /// is widened to unit width).
    pub fn ranges(&self) -> ((f64, f64), (f64, f64)) {
        let pts = self.series.iter().flat_map(|s| s.points.iter());
        let (mut x0, mut x1, mut y0, mut y1) = (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        );
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        let pad = |lo: f64, hi: f64| {
            if hi > lo {
                let m = 0.05 * (hi - lo);
                (lo - m, hi + m)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        };
        (pad(x0, x1), pad(y0, y1))
    }
}

/// Total, geometric and semantic loss against step.
pub fn loss_figure(logs: &[StepLog]) -> Result<Figure> {
    if logs.is_empty() {
        return Err(Error::Input("empty log: nothing to plot".into()));
    }
    let series = |name: &str, f: fn(&StepLog) -> f64| Series {
        name: name.into(),
        points: logs.iter().map(|l| (l.step as f64, f(l))).collect(),
    };
    Ok(Figure {
        name: "loss".into(),
        title: "Training loss".into(),
        x_label: "step".into(),
        y_label: "loss".into(),
        series: vec![
            series("total", |l| l.loss_total),
            series("geometric", |l| l.loss_geo),
            series("semantic", |l| l.loss_sem),
        ],
    })
}

type MetricFn = fn(&MetricsReport) -> f64;

/// One figure per metric with the metric plotted against the number of
/// decoder iterations.
pub fn iteration_figures(points: &[IterationPoint]) -> Result<Vec<Figure>> {
    if points.is_empty() {
        return Err(Error::Input("empty report list: nothing to plot".into()));
    }
    let mut pts = points.to_vec();
    pts.sort_by_key(|p| p.num_iterations);
    let metrics: [(&str, MetricFn); 5] = [
        ("rmse", |r| r.rmse),
        ("mae", |r| r.mae),
        ("rel", |r| r.rel),
        ("iou", |r| r.iou),
        ("map50", |r| r.map50),
    ];
    Ok(metrics
        .iter()
        .map(|(name, f)| Figure {
            name: format!("iterations_{name}"),
            title: format!("{name} vs decoder iterations"),
            x_label: "iterations".into(),
            y_label: name.to_string(),
            series: vec![Series {
                name: name.to_string(),
                points: pts
                    .iter()
                    .map(|p| (p.num_iterations as f64, f(&p.report)))
                    .collect(),
            }],
        })
        .collect())
}

fn draw_err(e: impl std::fmt::Display) -> Error {
    Error::Input(format!("plot rendering failed: {e}"))
}

pub fn render_svg(fig: &Figure, path: &Path) -> Result<()> {
    let ((x0, x1), (y0, y1)) = fig.ranges();
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(&fig.title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc(fig.x_label.as_str())
        .y_desc(fig.y_label.as_str())
        .draw()
        .map_err(draw_err)?;
    for (i, s) in fig.series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(
                s.points.iter().copied(),
                color.stroke_width(2),
            ))
            .map_err(draw_err)?
            .label(s.name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart
            .draw_series(s.points.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(draw_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)
}

/// Reads either a JSON array of [`IterationPoint`]s or a JSON-lines
/// training log and renders the matching figures into `out_dir`.
pub fn plot_file(input: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let figures = if text.trim_start().starts_with('[') {
        let points: Vec<IterationPoint> = serde_json::from_str(&text)?;
        iteration_figures(&points)?
    } else {
        let logs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<StepLog>, _>>()?;
        vec![loss_figure(&logs)?]
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    figures
        .iter()
        .map(|f| {
            let path = out_dir.join(format!("{}.svg", f.name));
            render_svg(f, &path)?;
            Ok(path)
        })
        .collect()
}
