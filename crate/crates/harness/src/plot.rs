//! SVG charts.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{HarnessError, Result};

fn plot_err<E: std::fmt::Display>(e: E) -> HarnessError {
    HarnessError::Plot(e.to_string())
}

/// Precision against recall, one line per named curve.
pub fn pr_curves(path: &Path, curves: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("precision-recall", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0f64..1f64, 0f64..1.05f64)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("recall").y_desc("precision").draw().map_err(plot_err)?;
    for (i, (name, pts)) in curves.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// mAP against base patch size.
pub fn sweep_curve(path: &Path, points: &[(f64, f64)]) -> Result<()> {
    let (lo, hi) = points.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let (lo, hi) = if lo < hi { (lo - 1.0, hi + 1.0) } else { (lo - 1.0, lo + 1.0) };
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("patch size sweep", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(lo..hi, 0f64..1.05f64)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("base patch size").y_desc("mAP").draw().map_err(plot_err)?;
    chart.draw_series(LineSeries::new(points.iter().copied(), BLUE.stroke_width(2))).map_err(plot_err)?;
    chart
        .draw_series(points.iter().map(|&p| Circle::new(p, 4, BLUE.filled())))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_svg_files() {
        let dir = tempfile::tempdir().unwrap();
        let pr = dir.path().join("pr.svg");
        pr_curves(&pr, &[("a".into(), vec![(0.0, 1.0), (0.5, 0.8), (1.0, 0.5)])]).unwrap();
        let sweep = dir.path().join("sweep.svg");
        sweep_curve(&sweep, &[(9.0, 0.4), (13.0, 0.6)]).unwrap();
        for p in [pr, sweep] {
            let text = std::fs::read_to_string(p).unwrap();
            assert!(text.starts_with("<svg") && text.contains("polyline"));
        }
    }
}
