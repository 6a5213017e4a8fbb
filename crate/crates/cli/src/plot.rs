//! Static SVG plots of ablation results: grouped bars for the heads axis,
//! metric-versus-value lines for the numeric axes.

use std::path::Path;

use anyhow::{anyhow, Result};
use plotters::prelude::*;

use crate::ablation::{AblationResult, Axis, AxisValue, Scores};

const METRICS: [(&str, RGBColor); 3] = [("Dice", BLUE), ("AJI", RED), ("PQ", GREEN)];

fn pick(s: &Scores, k: usize) -> f64 {
    [s.dice, s.aji, s.pq][k]
}

pub fn plot_ablation(res: &AblationResult, path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    match res.axis {
        Axis::Heads => bars(res, &root),
        Axis::Alpha | Axis::Distance => lines(res, &root),
    }?;
    root.present().map_err(|e| anyhow!("{e}"))?;
    Ok(())
}

fn bars(res: &AblationResult, root: &DrawingArea<SVGBackend, plotters::coord::Shift>) -> Result<()> {
    let n = res.rows.len();
    let labels: Vec<String> = res.rows.iter().map(|r| r.label.clone()).collect();
    let mut chart = ChartBuilder::on(root)
        .caption("Median test metrics by head configuration", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0f64..n as f64, 0f64..100f64)
        .map_err(|e| anyhow!("{e}"))?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n)
        .x_label_formatter(&|x| {
            let k = x.floor() as usize;
            if (x - k as f64 - 0.5).abs() < 1e-6 && k < labels.len() {
                labels[k].clone()
            } else {
                String::new()
            }
        })
        .y_desc("score")
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    for (m, (name, color)) in METRICS.iter().enumerate() {
        let rects: Vec<_> = res
            .rows
            .iter()
            .enumerate()
            .filter_map(|(k, r)| {
                r.median.map(|s| {
                    let x0 = k as f64 + 0.1 + m as f64 * 0.27;
                    Rectangle::new([(x0, 0.0), (x0 + 0.25, pick(&s, m))], color.filled())
                })
            })
            .collect();
        chart
            .draw_series(rects)
            .map_err(|e| anyhow!("{e}"))?
            .label(*name)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    Ok(())
}

fn lines(res: &AblationResult, root: &DrawingArea<SVGBackend, plotters::coord::Shift>) -> Result<()> {
    let xs: Vec<f64> = res
        .rows
        .iter()
        .map(|r| match r.value {
            AxisValue::Alpha(v) | AxisValue::Distance(v) => v,
            AxisValue::Heads(_) => 0.0,
        })
        .collect();
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.05).max(0.05);
    let (title, xdesc) = match res.axis {
        Axis::Alpha => ("Median test metrics by sampling ratio", "alpha"),
        _ => ("Median test metrics by band distance", "d"),
    };
    let mut chart = ChartBuilder::on(root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d((lo - pad)..(hi + pad), 0f64..100f64)
        .map_err(|e| anyhow!("{e}"))?;
    chart
        .configure_mesh()
        .x_desc(xdesc)
        .y_desc("score")
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    for (m, (name, color)) in METRICS.iter().enumerate() {
        let pts: Vec<(f64, f64)> = res
            .rows
            .iter()
            .zip(&xs)
            .filter_map(|(r, &x)| r.median.map(|s| (x, pick(&s, m))))
            .collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(|e| anyhow!("{e}"))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(|e| anyhow!("{e}"))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    Ok(())
}
