//! SVG figures from evaluation reports and inspection dumps.

use std::path::Path;

use anyhow::{anyhow, Result};
use plotters::prelude::*;

/// One labelled set of `(condition, error)` samples.
pub struct Curve {
    pub label: String,
    pub samples: Vec<(f64, f64)>,
}

fn binned(samples: &[(f64, f64)], lo: f64, hi: f64, bins: usize) -> Vec<(f64, f64)> {
    let width = (hi - lo) / bins as f64;
    let mut sum = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for &(x, y) in samples {
        let b = (((x - lo) / width) as usize).min(bins - 1);
        sum[b] += y;
        count[b] += 1;
    }
    (0..bins)
        .filter(|b| count[*b] > 0)
        .map(|b| (lo + (b as f64 + 0.5) * width, sum[b] / count[b] as f64))
        .collect()
}

fn plot_err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow!("plotting failed: {e:?}")
}

/// Mean error per condition bin, one line per curve.
pub fn error_curves(path: &Path, title: &str, x_desc: &str, y_desc: &str, curves: &[Curve], bins: usize) -> Result<()> {
    let all: Vec<(f64, f64)> = curves.iter().flat_map(|c| c.samples.iter().copied()).collect();
    if all.is_empty() {
        return Err(anyhow!("no samples to plot"));
    }
    let xmax = all.iter().map(|s| s.0).fold(0.0, f64::max).max(1e-9);
    let lines: Vec<Vec<(f64, f64)>> = curves.iter().map(|c| binned(&c.samples, 0.0, xmax, bins)).collect();
    let ymax = lines.iter().flatten().map(|s| s.1).fold(0.0, f64::max).max(1e-9) * 1.1;

    let root = SVGBackend::new(path, (800, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(44)
        .y_label_area_size(64)
        .build_cartesian_2d(0.0..xmax, 0.0..ymax)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .y_desc(y_desc)
        .draw()
        .map_err(plot_err)?;
    for (i, (curve, line)) in curves.iter().zip(lines).enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(line.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(curve.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        chart
            .draw_series(line.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Points projected onto the x-y plane, shaded by how many global-feature
/// channels each supplies, with the regressed saliency point marked.
pub fn saliency_overlay(path: &Path, title: &str, points: &[[f64; 3]], counts: &[usize], saliency: [f64; 3]) -> Result<()> {
    if points.is_empty() || points.len() != counts.len() {
        return Err(anyhow!("points and contribution counts must be nonempty and aligned"));
    }
    let xs = points.iter().map(|p| p[0]).chain([saliency[0]]);
    let ys = points.iter().map(|p| p[1]).chain([saliency[1]]);
    let (xlo, xhi) = xs.fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(v), b.max(v)));
    let (ylo, yhi) = ys.fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(v), b.max(v)));
    let pad = 0.05 * (xhi - xlo).max(yhi - ylo).max(1e-6);
    let max_count = counts.iter().copied().max().unwrap_or(0).max(1) as f64;

    let root = SVGBackend::new(path, (700, 700)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(xlo - pad..xhi + pad, ylo - pad..yhi + pad)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("x").y_desc("y").draw().map_err(plot_err)?;
    chart
        .draw_series(points.iter().zip(counts).map(|(p, &c)| {
            let w = c as f64 / max_count;
            let color = HSLColor(0.66 * (1.0 - w), 0.85, 0.45 + 0.1 * (1.0 - w));
            Circle::new((p[0], p[1]), 2 + (4.0 * w) as i32, color.filled())
        }))
        .map_err(plot_err)?;
    chart
        .draw_series([Cross::new((saliency[0], saliency[1]), 9, BLACK.stroke_width(3))])
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}
