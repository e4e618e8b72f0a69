//! Vector line charts of outperformance curves.

use plotters::prelude::*;

use crate::error::{Error, Result};

/// One labelled line.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub values: Vec<f64>,
}

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

fn plot_error(e: impl std::fmt::Display) -> Error {
    Error::Data(format!("plot rendering: {e}"))
}

/// Render `series` against the step index as an SVG document.
pub fn line_chart_svg(title: &str, y_label: &str, series: &[Series]) -> Result<String> {
    let len = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let finite = || {
        series
            .iter()
            .flat_map(|s| s.values.iter().copied())
            .filter(|v| v.is_finite())
    };
    let (mut lo, mut hi) = finite().fold((0.0_f64, 0.0_f64), |(a, b), v| (a.min(v), b.max(v)));
    if hi - lo < 1e-12 {
        lo -= 1.0;
        hi += 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (800, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_error)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(64)
            .build_cartesian_2d(0f64..(len.max(2) - 1) as f64, (lo - pad)..(hi + pad))
            .map_err(plot_error)?;
        chart
            .configure_mesh()
            .x_desc("month")
            .y_desc(y_label)
            .draw()
            .map_err(plot_error)?;
        for (i, s) in series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            chart
                .draw_series(LineSeries::new(
                    s.values.iter().enumerate().map(|(t, v)| (t as f64, *v)),
                    color.stroke_width(2),
                ))
                .map_err(plot_error)?
                .label(s.label.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_error)?;
        root.present().map_err(plot_error)?;
    }
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_an_svg_with_every_label() {
        let svg = line_chart_svg(
            "AE - PM",
            "value",
            &[
                Series {
                    label: "A".into(),
                    values: vec![0.0, 0.01, 0.03],
                },
                Series {
                    label: "mean".into(),
                    values: vec![0.0, -0.02, 0.01],
                },
            ],
        )
        .unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains(">\nA\n<") && svg.contains(">\nmean\n<"));
    }

    #[test]
    fn flat_and_empty_inputs_still_render() {
        assert!(line_chart_svg(
            "flat",
            "v",
            &[Series {
                label: "z".into(),
                values: vec![0.0; 4]
            }]
        )
        .is_ok());
        assert!(line_chart_svg("empty", "v", &[]).is_ok());
    }
}
