//! Text tables and SVG charts for evaluation and sweep results.

use plotters::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use tsd_core::metrics::{BucketRow, FScoreReport};
use tsd_core::{Error, Result};

/// Renders rows as aligned columns; the first column is left aligned, the
/// rest right aligned.
pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let n = header.len();
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate().take(n) {
            if i > 0 {
                s.push_str("  ");
            }
            if i == 0 {
                s.push_str(&format!("{c:<w$}", w = width[i]));
            } else {
                s.push_str(&format!("{c:>w$}", w = width[i]));
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&line(width.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(|s| s.as_str()).collect()));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(|s| s.as_str()).collect()));
        out.push('\n');
    }
    out
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

/// Per-class and macro scores of one metric.
pub fn fscore_table(title: &str, rep: &FScoreReport) -> String {
    let mut rows: Vec<Vec<String>> = rep
        .per_class
        .iter()
        .map(|(c, s)| {
            vec![
                c.clone(),
                pct(s.precision),
                pct(s.recall),
                pct(s.f),
                s.counts.tp.to_string(),
                s.counts.fp.to_string(),
                s.counts.fn_.to_string(),
            ]
        })
        .collect();
    let t = rep.total;
    rows.push(vec![
        "macro".into(),
        String::new(),
        String::new(),
        pct(rep.macro_f),
        t.tp.to_string(),
        t.fp.to_string(),
        t.fn_.to_string(),
    ]);
    format!("{title}\n{}", table(&["class", "P", "R", "F", "TP", "FP", "FN"], &rows))
}

fn bucket_label(r: &BucketRow) -> String {
    format!("{}-{}s", r.lo, r.hi)
}

/// Macro-F per mean-duration group.
pub fn bucket_table(title: &str, rows: &[BucketRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                bucket_label(r),
                r.classes.len().to_string(),
                r.macro_f.map(pct).unwrap_or_else(|| "-".into()),
            ]
        })
        .collect();
    format!("{title}\n{}", table(&["duration", "classes", "F"], &body))
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::InvalidInput(format!("plot: {e}"))
}

/// Bar chart of segment and event macro-F per duration group.
pub fn bucket_chart(path: &Path, segment: &[BucketRow], event: &[BucketRow]) -> Result<()> {
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let n = segment.len().max(1);
    let labels: Vec<String> = segment.iter().map(bucket_label).collect();
    let mut chart = ChartBuilder::on(&root)
        .caption("F-score by mean event duration", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..n as f64, 0.0..100.0)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n)
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            if (x - i as f64 - 0.5).abs() < 1e-6 {
                labels.get(i).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .x_desc("mean event duration")
        .y_desc("F (%)")
        .draw()
        .map_err(plot_err)?;
    for (series, (rows, color, shift)) in [(segment, BLUE, 0.1), (event, RED, 0.5)].into_iter().enumerate() {
        let bars: Vec<Rectangle<(f64, f64)>> = rows
            .iter()
            .enumerate()
            .filter_map(|(i, r)| {
                r.macro_f
                    .map(|f| Rectangle::new([(i as f64 + shift, 0.0), (i as f64 + shift + 0.4, 100.0 * f)], color.filled()))
            })
            .collect();
        let name = if series == 0 { "segment" } else { "event" };
        chart
            .draw_series(bars)
            .map_err(plot_err)?
            .label(name)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// One trained-and-evaluated sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Parameter values in sweep order, e.g. `[("tau", 0.7)]`.
    pub values: Vec<(String, f64)>,
    pub segment_f: f64,
    pub event_f: f64,
}

/// Rows sorted by parameter values ascending.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut rows = rows.to_vec();
    rows.sort_by(|a, b| {
        let ka: Vec<f64> = a.values.iter().map(|v| v.1).collect();
        let kb: Vec<f64> = b.values.iter().map(|v| v.1).collect();
        ka.partial_cmp(&kb).unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut header: Vec<&str> = rows.first().map(|r| r.values.iter().map(|v| v.0.as_str()).collect()).unwrap_or_default();
    header.extend(["segment-F", "event-F"]);
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut cells: Vec<String> = r.values.iter().map(|v| format!("{}", v.1)).collect();
            cells.push(pct(r.segment_f));
            cells.push(pct(r.event_f));
            cells
        })
        .collect();
    table(&header, &body)
}

/// Heatmap of `metric(x, y)` over a two-parameter grid.
pub fn heatmap(path: &Path, title: &str, x: (&str, &[f64]), y: (&str, &[f64]), value: impl Fn(usize, usize) -> f64) -> Result<()> {
    let root = SVGBackend::new(path, (640, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let (nx, ny) = (x.1.len().max(1), y.1.len().max(1));
    let xs = x.1.to_vec();
    let ys = y.1.to_vec();
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..nx as f64, 0.0..ny as f64)
        .map_err(plot_err)?;
    let centre = |v: f64, axis: &[f64]| {
        let i = v.floor() as usize;
        if (v - i as f64 - 0.5).abs() < 1e-6 {
            axis.get(i).map(|a| format!("{a}")).unwrap_or_default()
        } else {
            String::new()
        }
    };
    chart
        .configure_mesh()
        .disable_mesh()
        .x_labels(2 * nx + 1)
        .y_labels(2 * ny + 1)
        .x_label_formatter(&|v| centre(*v, &xs))
        .y_label_formatter(&|v| centre(*v, &ys))
        .x_desc(x.0)
        .y_desc(y.0)
        .draw()
        .map_err(plot_err)?;
    let mut cells = Vec::new();
    let mut texts = Vec::new();
    for i in 0..x.1.len() {
        for j in 0..y.1.len() {
            let v = value(i, j).clamp(0.0, 1.0);
            let shade = RGBColor(255 - (200.0 * v) as u8, 255 - (120.0 * v) as u8, 255);
            cells.push(Rectangle::new([(i as f64, j as f64), (i as f64 + 1.0, j as f64 + 1.0)], shade.filled()));
            texts.push(Text::new(
                format!("{:.1}", 100.0 * v),
                (i as f64 + 0.4, j as f64 + 0.55),
                ("sans-serif", 14).into_font(),
            ));
        }
    }
    chart.draw_series(cells).map_err(plot_err)?;
    chart.draw_series(texts).map_err(plot_err)?;
    root.present().map_err(plot_err)
}
