use std::path::Path;

use anyhow::{anyhow, Result};
use plotters::prelude::*;

use grass_core::evalseg::{ArmStats, ObjectCounts};
use grass_core::trainer::EpochRecord;

const ARMS: [(&str, RGBColor); 3] = [
    ("original", RGBColor(90, 90, 90)),
    ("random resized crop", RGBColor(31, 119, 180)),
    ("guided crop", RGBColor(214, 39, 40)),
];

fn arm(c: &ObjectCounts, i: usize) -> ArmStats {
    [c.original, c.random_crop, c.guided_crop][i]
}

/// Two SVG line charts: mean classes per sample and single-class samples
/// per observed batch, one line per arm.
pub fn object_counts(out: &Path, records: &[EpochRecord]) -> Result<()> {
    let points: Vec<(usize, ObjectCounts)> = records
        .iter()
        .filter_map(|r| r.object_counts.map(|c| (r.epoch, c)))
        .collect();
    if points.is_empty() {
        return Ok(());
    }
    line_chart(
        &out.join("objects_mean.svg"),
        "Distinct classes per sample",
        &points,
        |s| s.mean_classes,
    )?;
    line_chart(
        &out.join("objects_single.svg"),
        "Single-class samples per batch",
        &points,
        |s| s.single_class as f64,
    )
}

fn line_chart(path: &Path, title: &str, points: &[(usize, ObjectCounts)], value: impl Fn(&ArmStats) -> f64) -> Result<()> {
    let err = |e: &dyn std::fmt::Display| anyhow!("plotting {}: {e}", path.display());
    let x0 = points.first().map_or(0, |p| p.0) as f64;
    let x1 = (points.last().map_or(1, |p| p.0) as f64).max(x0 + 1.0);
    let ys: Vec<f64> = points
        .iter()
        .flat_map(|(_, c)| (0..3).map(|i| value(&arm(c, i))))
        .collect();
    let y1 = ys.iter().copied().fold(0.0, f64::max) * 1.1 + 1e-9;

    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(x0..x1, 0.0..y1)
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .draw()
        .map_err(|e| err(&e))?;
    for (i, (name, color)) in ARMS.iter().enumerate() {
        chart
            .draw_series(LineSeries::new(
                points.iter().map(|(e, c)| (*e as f64, value(&arm(c, i)))),
                color.stroke_width(2),
            ))
            .map_err(|e| err(&e))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))?;
    Ok(())
}
