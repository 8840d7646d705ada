use plotters::prelude::*;
use popform::novelty::MagnitudeBand;
use popform::{FrfRecord, SweepResult};

use crate::config::Stamp;
use crate::error::CliError;

const SIZE: (u32, u32) = (800, 500);
const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
];

fn plot_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Plot(e.to_string())
}

/// Puts the run stamp in an XML comment after the root element opens.
fn stamp_svg(svg: String, stamp: &Stamp) -> String {
    let comment = format!("<!-- {} -->\n", stamp.line());
    match svg.find('>') {
        Some(i) if svg.starts_with("<svg") => {
            let mut s = svg;
            s.insert_str(i + 1, &format!("\n{comment}"));
            s
        }
        _ => comment + &svg,
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    let span = if hi > lo { hi - lo } else { lo.abs().max(1.0) };
    (lo - 0.08 * span, hi + 0.08 * span)
}

/// Novelty index against frequency shift for one member: mean with the
/// 5-95% range, and the threshold as a horizontal line.
pub fn sweep_svg(member: &str, rows: &[&SweepResult], threshold: f64, stamp: &Stamp) -> Result<String, CliError> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let xs: Vec<f64> = rows.iter().map(|r| r.shift_pct).collect();
        let (x0, x1) = padded(
            xs.iter().copied().fold(f64::INFINITY, f64::min),
            xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        );
        let lo = rows.iter().map(|r| r.summary.q05).fold(threshold, f64::min);
        let hi = rows.iter().map(|r| r.summary.q95).fold(threshold, f64::max);
        let (y0, y1) = padded(lo, hi);
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("{member}: novelty index vs frequency shift"), ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(70)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc("shift (%)")
            .y_desc("negative log evidence")
            .draw()
            .map_err(plot_err)?;
        chart
            .draw_series(LineSeries::new([(x0, threshold), (x1, threshold)], RED.stroke_width(2)))
            .map_err(plot_err)?
            .label("threshold")
            .legend(|(x, y)| PathElement::new([(x, y), (x + 20, y)], RED));
        for r in rows {
            chart
                .draw_series(LineSeries::new(
                    [(r.shift_pct, r.summary.q05), (r.shift_pct, r.summary.q95)],
                    BLACK.mix(0.5),
                ))
                .map_err(plot_err)?;
        }
        let blue = PALETTE[0];
        chart
            .draw_series(LineSeries::new(rows.iter().map(|r| (r.shift_pct, r.summary.mean)), blue))
            .map_err(plot_err)?
            .label("mean index")
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 20, y)], blue));
        chart
            .draw_series(rows.iter().map(|r| Circle::new((r.shift_pct, r.summary.mean), 4, blue.filled())))
            .map_err(plot_err)?;
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(stamp_svg(svg, stamp))
}

/// FRF magnitude per component with its 95% band, plus the clean records.
pub fn band_svg(band: &MagnitudeBand, records: &[FrfRecord], stamp: &Stamp) -> Result<String, CliError> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let g = &band.grid;
        let (x0, x1) = (g[0], g[g.len() - 1]);
        let hi = band
            .components
            .iter()
            .flat_map(|c| c.upper.iter())
            .chain(records.iter().flat_map(|r| r.magnitude()).collect::<Vec<_>>().iter())
            .copied()
            .fold(0.0f64, f64::max);
        let mut chart = ChartBuilder::on(&root)
            .caption("FRF magnitude: form components with 95% bands", ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(70)
            .build_cartesian_2d(x0..x1, 0.0..hi * 1.05)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc("frequency (Hz)")
            .y_desc("|H|")
            .draw()
            .map_err(plot_err)?;
        for (k, c) in band.components.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            for edge in [&c.lower, &c.upper] {
                chart
                    .draw_series(LineSeries::new(g.iter().copied().zip(edge.iter().copied()), color.mix(0.5)))
                    .map_err(plot_err)?;
            }
            chart
                .draw_series(LineSeries::new(
                    g.iter().copied().zip(c.mean.iter().copied()),
                    color.stroke_width(2),
                ))
                .map_err(plot_err)?
                .label(format!("component {k}"))
                .legend(move |(x, y)| PathElement::new([(x, y), (x + 20, y)], color.stroke_width(2)));
        }
        for r in records {
            chart
                .draw_series(LineSeries::new(
                    r.frequency_hz.iter().copied().zip(r.magnitude()),
                    BLACK.mix(0.6),
                ))
                .map_err(plot_err)?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(stamp_svg(svg, stamp))
}
