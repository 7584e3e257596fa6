//! SVG figures from result CSVs.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use plotters::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PlotKind {
    /// Error against latency, one line per controller.
    Latency,
    /// Gain-grid heatmap.
    Gains,
    /// Position and reference over time from an episode log.
    Xyz,
    /// Learning curve.
    Curve,
}

struct Table {
    header: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
        let header = rd.headers()?.iter().map(str::to_string).collect();
        let rows = rd.records().collect::<std::result::Result<_, _>>()?;
        Ok(Self { header, rows })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("column {name:?} missing"))
    }

    /// Numeric column; unparsable cells (such as "crash") become `None`.
    fn numbers(&self, name: &str) -> Result<Vec<Option<f64>>> {
        let c = self.col(name)?;
        Ok(self.rows.iter().map(|r| r.get(c).and_then(|v| v.parse().ok())).collect())
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-9 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi + 0.05 * (hi - lo))
    }
}

type Svg<'a> = DrawingArea<SVGBackend<'a>, plotters::coord::Shift>;

fn lines(area: &Svg, title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let (x0, x1) = range(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
    let (y0, y1) = range(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0.min(0.0)..y1)?;
    chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw()?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    if series.len() > 1 {
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
    }
    Ok(())
}

fn latency(table: &Table, area: &Svg) -> Result<()> {
    let ctrl = table.col("controller")?;
    let lat = table.numbers("latency")?;
    let err = table.numbers("avg_error_cm")?;
    let mut groups: BTreeMap<String, BTreeMap<i64, Vec<f64>>> = BTreeMap::new();
    for (i, row) in table.rows.iter().enumerate() {
        let (Some(l), Some(e)) = (lat[i], err[i]) else { continue };
        let key = (l * 1e6).round() as i64;
        groups.entry(row[ctrl].to_string()).or_default().entry(key).or_default().push(e);
    }
    let series: Vec<(String, Vec<(f64, f64)>)> = groups
        .into_iter()
        .map(|(name, by_lat)| {
            let pts = by_lat
                .into_iter()
                .map(|(k, es)| (k as f64 * 1e-3, es.iter().sum::<f64>() / es.len() as f64))
                .collect();
            (name, pts)
        })
        .collect();
    lines(area, "Tracking error vs latency", "latency [ms]", "avg error [cm]", &series)
}

fn gains(table: &Table, area: &Svg) -> Result<()> {
    let p = table.numbers("scale_p")?;
    let d = table.numbers("scale_d")?;
    let e = table.numbers("error_m")?;
    let mut ps: Vec<f64> = p.iter().flatten().copied().collect();
    let mut ds: Vec<f64> = d.iter().flatten().copied().collect();
    for v in [&mut ps, &mut ds] {
        v.sort_by(f64::total_cmp);
        v.dedup();
    }
    if ps.is_empty() || ds.is_empty() {
        bail!("empty gain grid");
    }
    let e_max = e.iter().flatten().copied().fold(0.0f64, f64::max).max(1e-9);
    let mut chart = ChartBuilder::on(area)
        .caption("Position error over gain scales [m]", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0..ps.len(), 0..ds.len())?;
    let (ps_ref, ds_ref) = (&ps, &ds);
    chart
        .configure_mesh()
        .disable_mesh()
        .x_desc("P scale")
        .y_desc("D scale")
        .x_label_formatter(&|i| ps_ref.get(*i).map(|v| format!("{v}")).unwrap_or_default())
        .y_label_formatter(&|i| ds_ref.get(*i).map(|v| format!("{v}")).unwrap_or_default())
        .draw()?;
    let idx = |v: f64, axis: &[f64]| axis.iter().position(|a| *a == v);
    chart.draw_series((0..table.rows.len()).filter_map(|i| {
        let (pi, di, err) = (idx(p[i]?, &ps)?, idx(d[i]?, &ds)?, e[i]?);
        let shade = (255.0 * (1.0 - err / e_max)) as u8;
        Some(Rectangle::new([(pi, di), (pi + 1, di + 1)], RGBColor(255, shade, shade).filled()))
    }))?;
    Ok(())
}

fn xyz(table: &Table, area: &Svg) -> Result<()> {
    let t = table.numbers("t")?;
    let panels = area.split_evenly((3, 1));
    for (k, axis) in ["x", "y", "z"].iter().enumerate() {
        let pos = table.numbers(&format!("p{axis}"))?;
        let refs = table.numbers(&format!("r{axis}"))?;
        let pick = |v: &[Option<f64>]| -> Vec<(f64, f64)> { t.iter().zip(v).filter_map(|(a, b)| Some(((*a)?, (*b)?))).collect() };
        let series = vec![("flown".to_string(), pick(&pos)), ("reference".to_string(), pick(&refs))];
        lines(&panels[k], &format!("{axis}(t)"), "t [s]", &format!("{axis} [m]"), &series)?;
    }
    Ok(())
}

fn curve(table: &Table, area: &Svg) -> Result<()> {
    let steps = table.numbers("env_steps")?;
    let err = table.numbers("mean_pos_error_cm")?;
    let pts = steps.iter().zip(&err).filter_map(|(a, b)| Some(((*a)?, (*b)?))).collect();
    lines(area, "Learning curve", "env steps", "mean position error [cm]", &[("ppo".into(), pts)])
}

pub fn render(kind: PlotKind, input: &Path, output: &Path) -> Result<()> {
    let table = Table::read(input)?;
    let size = if kind == PlotKind::Xyz { (900, 900) } else { (900, 600) };
    let area = SVGBackend::new(output, size).into_drawing_area();
    area.fill(&WHITE)?;
    match kind {
        PlotKind::Latency => latency(&table, &area)?,
        PlotKind::Gains => gains(&table, &area)?,
        PlotKind::Xyz => xyz(&table, &area)?,
        PlotKind::Curve => curve(&table, &area)?,
    }
    area.present()?;
    Ok(())
}
