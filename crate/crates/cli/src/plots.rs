//! SVG line charts rendered from a finished trace.

use std::path::Path;

use anyhow::anyhow;
use plotters::prelude::*;
use wormflow_core::composition::SimTrace;
use wormflow_core::ib_wormhole::BetaCurve;

type Series = (String, Vec<(f64, f64)>);

fn chart(path: &Path, title: &str, y_label: &str, series: &[Series]) -> anyhow::Result<()> {
    let pts = series.iter().flat_map(|s| s.1.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !(x0.is_finite() && y0.is_finite()) {
        return Ok(());
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    let mut c = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(55)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(|e| anyhow!("{e}"))?;
    c.configure_mesh().x_desc("t").y_desc(y_label).draw().map_err(|e| anyhow!("{e}"))?;
    for (i, (name, data)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        c.draw_series(LineSeries::new(data.iter().copied(), color))
            .map_err(|e| anyhow!("{e}"))?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    c.configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    root.present().map_err(|e| anyhow!("{e}"))?;
    Ok(())
}

fn thin(n: usize) -> usize {
    (n / 2000).max(1)
}

fn path_series(trace: &SimTrace, pick: impl Fn(&wormflow_core::composition::TraceRow, usize) -> f64) -> Vec<Series> {
    let step = thin(trace.rows.len());
    let mut out = Vec::new();
    for (i, id) in trace.layout.source_ids.iter().enumerate() {
        for (j, p) in trace.layout.path_range(i).enumerate() {
            let data = trace.rows.iter().step_by(step).map(|r| (r.t, pick(r, p))).collect();
            out.push((format!("source {id} path {}", j + 1), data));
        }
    }
    out
}

pub fn network(trace: &SimTrace, out: &Path) -> anyhow::Result<()> {
    chart(&out.join("rates.svg"), "Path rates", "rate", &path_series(trace, |r, p| r.rates[p]))?;
    chart(&out.join("delays.svg"), "Path delays", "delay", &path_series(trace, |r, p| r.delays[p]))
}

pub fn plant(trace: &SimTrace, out: &Path) -> anyhow::Result<()> {
    let step = thin(trace.rows.len());
    let x = trace.rows.iter().step_by(step).filter_map(|r| r.plant.map(|p| (r.t, p.x))).collect();
    chart(&out.join("plant.svg"), "Plant state", "x", &[("x(t)".to_string(), x)])
}

pub fn beta(curve: &BetaCurve, out: &Path) -> anyhow::Result<()> {
    let mean = curve.xs.iter().zip(&curve.means).map(|(a, b)| (*a, *b)).collect();
    let fit = curve.xs.iter().zip(curve.fit()).map(|(a, b)| (*a, *b)).collect();
    chart(&out.join("beta.svg"), "Tunnel length", "beta", &[("estimate".into(), mean), ("fit".into(), fit)])
}
