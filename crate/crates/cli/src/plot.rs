//! Minimal SVG line chart of per-step losses.

use std::fmt::Write;

use anyhow::{bail, Result};
use mlip::trainer::{LossBundle, MetricRecord};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 56.0;
const TICKS: usize = 5;

type Series = (&'static str, &'static str, fn(&LossBundle) -> f64);

const SERIES: [Series; 5] = [
    ("total", "#222222", |l| l.total),
    ("v2t", "#1f77b4", |l| l.l_v2t),
    ("t2v", "#ff7f0e", |l| l.l_t2v),
    ("spm", "#2ca02c", |l| l.l_spm),
    ("mip", "#d62728", |l| l.l_mip),
];

/// One polyline per loss term against the global step.
pub fn render(records: &[MetricRecord]) -> Result<String> {
    let steps: Vec<(usize, &LossBundle)> = records
        .iter()
        .filter_map(|r| match r {
            MetricRecord::Step { step, losses, .. } => Some((*step, losses)),
            _ => None,
        })
        .collect();
    if steps.is_empty() {
        bail!("log has no step records");
    }
    let x_max = steps.iter().map(|s| s.0).max().unwrap_or(0).max(1) as f64;
    let y_max = steps
        .iter()
        .flat_map(|(_, l)| SERIES.iter().map(move |s| (s.2)(l)))
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let (plot_w, plot_h) = (WIDTH - 2.0 * MARGIN, HEIGHT - 2.0 * MARGIN);
    let px = |x: f64| MARGIN + x / x_max * plot_w;
    let py = |y: f64| HEIGHT - MARGIN - y / y_max * plot_h;

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )?;
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
    writeln!(
        svg,
        r#"<path d="M{m} {t} V{b} H{r}" fill="none" stroke="black"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    )?;
    for k in 0..=TICKS {
        let f = k as f64 / TICKS as f64;
        let (x, y) = (px(f * x_max), py(f * y_max));
        writeln!(
            svg,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{:.0}</text>"#,
            HEIGHT - MARGIN + 16.0,
            f * x_max
        )?;
        writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#,
            MARGIN - 6.0,
            y + 4.0,
            f * y_max
        )?;
    }
    writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">step</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0
    )?;
    for (i, (name, color, get)) in SERIES.iter().enumerate() {
        let points: Vec<String> = steps
            .iter()
            .map(|(s, l)| format!("{:.2},{:.2}", px(*s as f64), py(get(l))))
            .collect();
        writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        )?;
        let ly = MARGIN + 16.0 * i as f64;
        writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            WIDTH - MARGIN - 70.0,
            WIDTH - MARGIN - 50.0
        )?;
        writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}">{name}</text>"#,
            WIDTH - MARGIN - 44.0,
            ly + 4.0
        )?;
    }
    writeln!(svg, "</svg>")?;
    Ok(svg)
}
