//! SVG figures drawn from saved reports; nothing here recomputes metrics.

use std::collections::BTreeMap;
use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::eval::MetricReport;
use crate::sweep::SweepEntry;

fn draw_err(e: impl std::fmt::Display) -> Error {
    Error::InvalidInput(format!("plot: {e}"))
}

/// Mean organ DSC of every case in `report`.
pub fn case_dsc(report: &MetricReport) -> Vec<f64> {
    report
        .cases
        .iter()
        .filter(|c| !c.dsc.is_empty())
        .map(|c| c.dsc.iter().sum::<f64>() / c.dsc.len() as f64)
        .collect()
}

/// One box per report over its per-case DSC values.
pub fn dsc_box_plot(reports: &[MetricReport], path: &Path) -> Result<()> {
    let groups: Vec<(String, Vec<f64>)> = reports
        .iter()
        .map(|r| (r.label.clone(), case_dsc(r)))
        .filter(|(_, v)| !v.is_empty())
        .collect();
    if groups.is_empty() {
        return Err(Error::InvalidInput("no per-case DSC values to plot".into()));
    }
    let n = groups.len() as i32;
    let width = 160 + 120 * groups.len() as u32;
    let root = SVGBackend::new(path, (width.max(480), 420)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let names: Vec<String> = groups.iter().map(|g| g.0.clone()).collect();
    let mut chart = ChartBuilder::on(&root)
        .caption("DSC per case", ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(-1..n, 0.0f32..1.0f32)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(groups.len() + 2)
        .x_label_formatter(&|i| {
            usize::try_from(*i)
                .ok()
                .and_then(|k| names.get(k))
                .cloned()
                .unwrap_or_default()
        })
        .y_desc("DSC")
        .draw()
        .map_err(draw_err)?;
    chart
        .draw_series(
            groups
                .iter()
                .enumerate()
                .map(|(i, (_, v))| Boxplot::new_vertical(i as i32, &Quartiles::new(v)).width(30)),
        )
        .map_err(draw_err)?;
    root.present().map_err(draw_err)
}

/// Test DSC against label percentage, one line per method label; seeds are averaged.
pub fn fraction_curve(entries: &[SweepEntry], path: &Path) -> Result<()> {
    let mut series: BTreeMap<&str, BTreeMap<u32, (f64, usize)>> = BTreeMap::new();
    for e in entries {
        let pct = (e.label_fraction * 100.0).round() as u32;
        let slot = series.entry(&e.label).or_default().entry(pct).or_default();
        slot.0 += e.average_dsc;
        slot.1 += 1;
    }
    if series.is_empty() {
        return Err(Error::InvalidInput("no sweep entries to plot".into()));
    }
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("DSC by percentage of labels", ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0u32..105u32, 0.0f64..1.0f64)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc("% of labels")
        .y_desc("DSC")
        .draw()
        .map_err(draw_err)?;
    for (k, (label, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(k).to_rgba();
        let line: Vec<(u32, f64)> = pts.iter().map(|(&p, &(s, n))| (p, s / n as f64)).collect();
        chart
            .draw_series(LineSeries::new(line.clone(), color.stroke_width(2)))
            .map_err(draw_err)?
            .label(*label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        chart
            .draw_series(line.into_iter().map(|p| Circle::new(p, 4, color.filled())))
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::CaseMetrics;

    fn report(label: &str, dsc: &[f64]) -> MetricReport {
        let cases = dsc
            .iter()
            .enumerate()
            .map(|(i, &d)| CaseMetrics {
                case_id: format!("c{i}"),
                dsc: vec![d, d / 2.0],
                hd95: vec![Some(1.0), None],
                assd: vec![Some(0.5), None],
            })
            .collect();
        MetricReport::from_cases(label, &["bg".into(), "a".into(), "b".into()], cases)
    }

    #[test]
    fn writes_svg_files() {
        let dir = tempfile::tempdir().unwrap();
        let r = [report("3D U-Net", &[0.5, 0.7, 0.9]), report("feature (3)", &[0.6, 0.8])];
        let d = case_dsc(&r[1]);
        assert!((d[0] - 0.45).abs() < 1e-12 && (d[1] - 0.6).abs() < 1e-12);
        let p = dir.path().join("box.svg");
        dsc_box_plot(&r, &p).unwrap();
        let svg = std::fs::read_to_string(&p).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("feature (3)"));
        let entries: Vec<SweepEntry> = [(0.1, 0.4), (1.0, 0.8)]
            .iter()
            .map(|&(f, d)| SweepEntry {
                label: "3D U-Net".into(),
                stem: format!("p{f}"),
                label_fraction: f,
                seed: 0,
                checkpoint: "x".into(),
                report: "x".into(),
                average_dsc: d,
                average_hd95: None,
                average_assd: None,
            })
            .collect();
        let p = dir.path().join("curve.svg");
        fraction_curve(&entries, &p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().contains("% of labels"));
    }
}
