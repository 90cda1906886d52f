// SPDX-License-Identifier: MIT OR Apache-2.0

//! Figures (SVG with CSV sidecars) and tables from run records.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::config::{ExperimentConfig, ExperimentKind, FigureKind};
use super::record::{CellPayload, CellRecord, RunRecord};
use crate::backend::Position;
use crate::circuits::HeadRanking;
use crate::error::{Error, Result};
use crate::interventions::CellResult;
use crate::probing::ProbeCell;
use crate::stats::Interval;

/// One point of a curve: x, point estimate and interval bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    /// Horizontal coordinate (layer or k).
    pub x: f64,
    /// Estimate.
    pub y: f64,
    /// Lower bound.
    pub lower: f64,
    /// Upper bound.
    pub upper: f64,
}

impl Point {
    fn from_interval(x: f64, y: f64, i: Option<&Interval>) -> Self {
        let (lower, upper) = i.map_or((y, y), |i| (i.lower, i.upper));
        Self { x, y, lower, upper }
    }
}

/// A labelled curve.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    /// Legend label.
    pub label: String,
    /// Points sorted by x.
    pub points: Vec<Point>,
}

/// A horizontal reference line with an optional band.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    /// Legend label.
    pub label: String,
    /// Level.
    pub y: f64,
    /// Band bounds.
    pub band: Option<(f64, f64)>,
}

fn report_err(e: impl std::fmt::Display) -> Error {
    Error::Report(e.to_string())
}

fn patch_cells<'a>(rec: &'a RunRecord, pred: impl Fn(&str) -> bool) -> Vec<(&'a CellRecord, &'a CellResult)> {
    rec.latest()
        .into_iter()
        .filter(|c| pred(&c.group))
        .filter_map(|c| c.patch().filter(|r| r.is_complete()).map(|r| (c, r)))
        .collect()
}

fn single_residual(r: &CellResult) -> Option<(usize, Position)> {
    super::exec::sweep_sites(r)
}

fn reference_of(rec: &RunRecord, group: &str, label: &str) -> Option<Reference> {
    patch_cells(rec, |g| g == group).first().map(|(_, r)| Reference {
        label: label.into(),
        y: r.rate,
        band: r.interval.as_ref().map(|i| (i.lower, i.upper)),
    })
}

fn finish(mut by_label: BTreeMap<String, Vec<Point>>) -> Vec<Series> {
    by_label
        .iter_mut()
        .for_each(|(_, p)| p.sort_by(|a, b| a.x.total_cmp(&b.x)));
    by_label
        .into_iter()
        .map(|(label, points)| Series { label, points })
        .collect()
}

/// Per-layer rate curves for each sweep group and position.
pub fn sweep_series(rec: &RunRecord) -> Vec<Series> {
    let sweeping = |g: &str| g == "sweep" || g.starts_with("baseline:") || g == "steer";
    let mut by: BTreeMap<String, Vec<Point>> = BTreeMap::new();
    for (c, r) in patch_cells(rec, sweeping) {
        if let Some((layer, pos)) = single_residual(r) {
            by.entry(format!("{} i={pos}", c.group))
                .or_default()
                .push(Point::from_interval(layer as f64, r.rate, r.interval.as_ref()));
        }
    }
    finish(by)
}

/// Rate against head or layer count for each k-sweep group.
pub fn k_series(rec: &RunRecord) -> Vec<Series> {
    let ksweep = |g: &str| g == "topk" || g == "mlp" || g.starts_with("path:");
    let mut by: BTreeMap<String, Vec<Point>> = BTreeMap::new();
    for (c, r) in patch_cells(rec, ksweep) {
        by.entry(c.group.clone()).or_default().push(Point::from_interval(
            r.descriptor.sites.len() as f64,
            r.rate,
            r.interval.as_ref(),
        ));
    }
    finish(by)
}

/// Probe top-1 (and rhyme) accuracy per layer, plus unigram baselines.
pub fn probe_series(rec: &RunRecord) -> (Vec<Series>, Vec<Reference>) {
    let mut by: BTreeMap<String, Vec<Point>> = BTreeMap::new();
    let mut refs = Vec::new();
    for c in rec.latest() {
        let CellPayload::Probe(p) = &c.payload else {
            continue;
        };
        let axis = match p.cell {
            ProbeCell::Lookahead { k, .. } => format!("k={k}"),
            ProbeCell::Couplet { position, .. } => format!("i={position}"),
        };
        if p.baseline {
            refs.push(Reference {
                label: format!("unigram {axis}"),
                y: p.eval.top1.point,
                band: None,
            });
            continue;
        }
        let x = p.cell.layer() as f64;
        by.entry(format!("top-1 {axis}"))
            .or_default()
            .push(Point::from_interval(x, p.eval.top1.point, Some(&p.eval.top1)));
        if let Some(rh) = &p.eval.rhyme {
            by.entry(format!("rhyme {axis}"))
                .or_default()
                .push(Point::from_interval(x, rh.point, Some(rh)));
        }
    }
    (finish(by), refs)
}

fn ranking(rec: &RunRecord) -> Option<&HeadRanking> {
    rec.latest().into_iter().find_map(|c| match &c.payload {
        CellPayload::Ranking(r) => Some(r),
        _ => None,
    })
}

fn position_label(p: Position) -> String {
    match p {
        Position::LastWord => "Last Word".into(),
        Position::Relative(i) => format!("i={i}"),
        other => other.to_string(),
    }
}

fn fmt_cell(r: &CellResult) -> String {
    match &r.interval {
        Some(i) => {
            let (lo, hi) = i.percent_bounds();
            format!("{} [{lo}, {hi}]", (r.rate * 100.0).round() as i64)
        }
        None => format!("{}", (r.rate * 100.0).round() as i64),
    }
}

/// Markdown table of all-layers patching rates, one row per model.
pub fn all_layers_table(records: &[RunRecord]) -> Result<String> {
    let mut positions: Vec<Position> = Vec::new();
    let mut rows = Vec::new();
    for rec in records {
        let cells = patch_cells(rec, |g| g == "all_layers");
        if cells.is_empty() {
            continue;
        }
        let mut by_pos = BTreeMap::new();
        for (_, r) in cells {
            if let Some(s) = r.descriptor.sites.first() {
                if !positions.contains(&s.position) {
                    positions.push(s.position);
                }
                by_pos.insert(s.position, r);
            }
        }
        let family = rec
            .header
            .model
            .as_ref()
            .map_or_else(|| "?".to_string(), |m| m.family.to_string());
        rows.push((family, rec.model_id().to_string(), by_pos));
    }
    if rows.is_empty() {
        return Err(Error::Report("no all-layers cells in the given records".into()));
    }
    let conf = records
        .iter()
        .find_map(|r| {
            patch_cells(r, |g| g == "all_layers")
                .first()
                .and_then(|(_, c)| c.interval.as_ref().map(|i| i.confidence))
        })
        .unwrap_or(0.95);
    let ci = format!("[{}% CI]", (conf * 100.0).round() as i64);
    let mut out = String::from("| Family | Model |");
    for p in &positions {
        let _ = write!(out, " {} {ci} |", position_label(*p));
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---|".repeat(positions.len()));
    out.push('\n');
    for (family, model, by_pos) in rows {
        let _ = write!(out, "| {family} | {model} |");
        for p in &positions {
            let v = by_pos.get(p).map_or_else(|| "-".to_string(), |r| fmt_cell(r));
            let _ = write!(out, " {v} |");
        }
        out.push('\n');
    }
    Ok(out)
}

fn write_csv(path: &Path, series: &[Series], refs: &[Reference]) -> Result<()> {
    let mut s = String::from("series,x,y,lower,upper\n");
    for ser in series {
        for p in &ser.points {
            let _ = writeln!(s, "{},{},{},{},{}", ser.label, p.x, p.y, p.lower, p.upper);
        }
    }
    for r in refs {
        let (lo, hi) = r.band.unwrap_or((r.y, r.y));
        let _ = writeln!(s, "{},,{},{},{}", r.label, r.y, lo, hi);
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Draw curves with interval bands and reference lines to an SVG.
pub fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    series: &[Series],
    refs: &[Reference],
) -> Result<()> {
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.x));
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let (x0, x1) = if x0.is_finite() { (x0, x1.max(x0 + 1.0)) } else { (0.0, 1.0) };
    let root = SVGBackend::new(path, (900, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(report_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(x0..x1, 0.0f64..1.0)
        .map_err(report_err)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc("rate")
        .draw()
        .map_err(report_err)?;
    for (i, r) in refs.iter().enumerate() {
        let color = Palette99::pick(i + series.len()).to_rgba();
        if let Some((lo, hi)) = r.band {
            chart
                .draw_series(std::iter::once(Rectangle::new(
                    [(x0, lo), (x1, hi)],
                    color.mix(0.15).filled(),
                )))
                .map_err(report_err)?;
        }
        chart
            .draw_series(LineSeries::new([(x0, r.y), (x1, r.y)], color.stroke_width(1)))
            .map_err(report_err)?
            .label(r.label.clone())
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color));
    }
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let upper = s.points.iter().map(|p| (p.x, p.upper));
        let lower = s.points.iter().rev().map(|p| (p.x, p.lower));
        chart
            .draw_series(std::iter::once(Polygon::new(
                upper.chain(lower).collect::<Vec<_>>(),
                color.mix(0.2).filled(),
            )))
            .map_err(report_err)?;
        chart
            .draw_series(LineSeries::new(s.points.iter().map(|p| (p.x, p.y)), color.stroke_width(2)))
            .map_err(report_err)?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(s.points.iter().map(|p| Circle::new((p.x, p.y), 3, color.filled())))
            .map_err(report_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(report_err)?;
    root.present().map_err(report_err)
}

/// Head-score heatmap with the five highest heads starred.
pub fn heatmap(path: &Path, title: &str, r: &HeadRanking) -> Result<()> {
    let n_layers = r.grid.len();
    let n_heads = r.grid.first().map_or(0, Vec::len);
    if n_layers == 0 || n_heads == 0 {
        return Err(Error::Report("empty head ranking".into()));
    }
    let max = r.entries.first().map_or(1.0, |e| e.score).max(1e-12);
    let root = SVGBackend::new(path, (900, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(report_err)?;
    let l0 = r.layers.start;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0..n_heads, l0..l0 + n_layers)
        .map_err(report_err)?;
    chart
        .configure_mesh()
        .disable_mesh()
        .x_desc("head")
        .y_desc("layer")
        .draw()
        .map_err(report_err)?;
    let cells = r.grid.iter().enumerate().flat_map(|(li, row)| {
        row.iter().enumerate().map(move |(h, &v)| {
            let t = (v / max).clamp(0.0, 1.0);
            let c = RGBColor(255, (255.0 * (1.0 - t)) as u8, (255.0 * (1.0 - 0.7 * t)) as u8);
            Rectangle::new([(h, l0 + li), (h + 1, l0 + li + 1)], c.filled())
        })
    });
    chart.draw_series(cells).map_err(report_err)?;
    let style = TextStyle::from(("sans-serif", 18).into_font()).color(&BLACK);
    chart
        .draw_series(
            r.entries
                .iter()
                .take(5)
                .map(|e| Text::new("*", (e.head, e.layer), style.clone())),
        )
        .map_err(report_err)?;
    root.present().map_err(report_err)
}

/// Peak sweep rate per model as bars with interval whiskers.
pub fn summary_bars(path: &Path, title: &str, rows: &[(String, Point)]) -> Result<()> {
    let root = SVGBackend::new(path, (900, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(report_err)?;
    let n = rows.len().max(1);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(60)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..n as f64, 0.0f64..1.0)
        .map_err(report_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(0)
        .y_desc("peak rate")
        .draw()
        .map_err(report_err)?;
    for (i, (_, p)) in rows.iter().enumerate() {
        let x = i as f64;
        let color = Palette99::pick(i);
        chart
            .draw_series(std::iter::once(Rectangle::new(
                [(x + 0.2, 0.0), (x + 0.8, p.y)],
                color.filled(),
            )))
            .map_err(report_err)?;
        chart
            .draw_series(LineSeries::new([(x + 0.5, p.lower), (x + 0.5, p.upper)], BLACK))
            .map_err(report_err)?;
        let style = TextStyle::from(("sans-serif", 14).into_font())
            .color(&BLACK)
            .pos(plotters::style::text_anchor::Pos::new(
                plotters::style::text_anchor::HPos::Center,
                plotters::style::text_anchor::VPos::Bottom,
            ));
        chart
            .draw_series(std::iter::once(Text::new(
                rows[i].0.clone(),
                (x + 0.5, (p.upper + 0.02).min(0.98)),
                style,
            )))
            .map_err(report_err)?;
    }
    root.present().map_err(report_err)
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

struct Namer {
    dir: PathBuf,
    used: BTreeSet<String>,
}

impl Namer {
    fn stem(&mut self, base: &str) -> PathBuf {
        let mut name = sanitize(base);
        let mut i = 2;
        while !self.used.insert(name.clone()) {
            name = format!("{}_{i}", sanitize(base));
            i += 1;
        }
        self.dir.join(name)
    }
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn one_model(records: &[RunRecord], figure: FigureKind) -> Result<()> {
    let models: BTreeSet<&str> = records.iter().map(RunRecord::model_id).collect();
    if models.len() > 1 {
        return Err(Error::Report(format!(
            "{figure:?} figures show one model; records cover {}",
            models.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(())
}

fn curve_figure(
    namer: &mut Namer,
    rec: &RunRecord,
    name: &str,
    x_label: &str,
    series: &[Series],
    refs: &[Reference],
    files: &mut Vec<PathBuf>,
) -> Result<()> {
    let stem = namer.stem(&format!("{}_{}_{name}", rec.model_id(), rec.header.config.kind));
    let svg = with_ext(&stem, "svg");
    let csv = with_ext(&stem, "csv");
    let title = format!("{} {}", rec.model_id(), rec.header.config.kind);
    line_chart(&svg, &title, x_label, series, refs)?;
    write_csv(&csv, series, refs)?;
    files.extend([svg, csv]);
    Ok(())
}

fn peak(rec: &RunRecord) -> Option<Point> {
    patch_cells(rec, |g| g == "sweep" || g == "all_layers")
        .into_iter()
        .map(|(_, r)| Point::from_interval(0.0, r.rate, r.interval.as_ref()))
        .max_by(|a, b| a.y.total_cmp(&b.y))
}

/// Render the requested figures into `out_dir`, returning the files written.
pub fn render(records: &[RunRecord], figure: FigureKind, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::Report("no records to report".into()));
    }
    if matches!(
        figure,
        FigureKind::Sweep | FigureKind::Probe | FigureKind::Heads | FigureKind::KSweep
    ) {
        one_model(records, figure)?;
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut namer = Namer {
        dir: out_dir.to_path_buf(),
        used: BTreeSet::new(),
    };
    let mut files = Vec::new();
    let want = |f: FigureKind| figure == FigureKind::Auto || figure == f;
    for rec in records {
        let clean = reference_of(rec, "clean", "clean");
        if want(FigureKind::Sweep) {
            let s = sweep_series(rec);
            if !s.is_empty() {
                let refs: Vec<Reference> = clean.iter().cloned().collect();
                curve_figure(&mut namer, rec, "sweep", "layer", &s, &refs, &mut files)?;
            }
        }
        if want(FigureKind::KSweep) {
            let s = k_series(rec);
            if !s.is_empty() {
                let mut refs: Vec<Reference> = clean.iter().cloned().collect();
                refs.extend(reference_of(rec, "reference", "full residual"));
                curve_figure(&mut namer, rec, "ksweep", "k", &s, &refs, &mut files)?;
            }
        }
        if want(FigureKind::Probe) {
            let (s, refs) = probe_series(rec);
            if !s.is_empty() {
                curve_figure(&mut namer, rec, "probe", "layer", &s, &refs, &mut files)?;
            }
        }
        if want(FigureKind::Heads) {
            if let Some(r) = ranking(rec) {
                let stem = namer.stem(&format!("{}_heads", rec.model_id()));
                let svg = with_ext(&stem, "svg");
                heatmap(&svg, &format!("{} head scores", rec.model_id()), r)?;
                let csv = with_ext(&stem, "csv");
                let mut s = String::from("layer,head,score\n");
                for e in &r.entries {
                    let _ = writeln!(s, "{},{},{}", e.layer, e.head, e.score);
                }
                std::fs::write(&csv, s).map_err(|e| Error::io(&csv, e))?;
                files.extend([svg, csv]);
            }
        }
    }
    let has_all_layers = records
        .iter()
        .any(|r| r.header.config.kind == ExperimentKind::AllLayers);
    if figure == FigureKind::Table || (figure == FigureKind::Auto && has_all_layers) {
        let table = all_layers_table(records)?;
        let path = out_dir.join("all_layers.md");
        std::fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
        files.push(path);
    }
    if figure == FigureKind::Summary || (figure == FigureKind::Auto && records.len() > 1) {
        let rows: Vec<(String, Point)> = records
            .iter()
            .filter_map(|r| peak(r).map(|p| (r.model_id().to_string(), p)))
            .collect();
        if rows.is_empty() {
            if figure == FigureKind::Summary {
                return Err(Error::Report("no sweep cells to summarise".into()));
            }
        } else {
            let path = out_dir.join("summary.svg");
            summary_bars(&path, "peak corrupt-rhyme rate", &rows)?;
            let csv = out_dir.join("summary.csv");
            let mut s = String::from("model,peak,lower,upper\n");
            for (m, p) in &rows {
                let _ = writeln!(s, "{m},{},{},{}", p.y, p.lower, p.upper);
            }
            std::fs::write(&csv, s).map_err(|e| Error::io(&csv, e))?;
            files.extend([path, csv]);
        }
    }
    if files.is_empty() {
        return Err(Error::Report(format!(
            "records contain nothing to draw for {figure:?}"
        )));
    }
    Ok(files)
}

/// Load `config.report.records` and render into `config.out_dir`.
pub fn render_from_config(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let records = config
        .report
        .records
        .iter()
        .map(RunRecord::load)
        .collect::<Result<Vec<_>>>()?;
    render(&records, config.report.figure, &config.out_dir)
}
