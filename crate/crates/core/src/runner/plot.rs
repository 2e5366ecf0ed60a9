//! Static SVG charts from the CSV files the runner writes: loss curves as
//! line charts, ablation results as grouped bars of per-row medians.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::median;

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 380.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 70.0;
const TICKS: usize = 5;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Closed value interval shown on an axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    /// Smallest range covering `values`, widened when degenerate.
    pub fn covering(values: impl IntoIterator<Item = f64>) -> Range {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.into_iter().filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo > hi {
            return Range { min: 0.0, max: 1.0 };
        }
        if lo == hi {
            let pad = if lo == 0.0 { 1.0 } else { 0.1 * lo.abs() };
            return Range { min: lo - pad, max: hi + pad };
        }
        Range { min: lo, max: hi }
    }

    fn with_zero(self) -> Range {
        Range {
            min: self.min.min(0.0),
            max: self.max.max(0.0),
        }
    }

    fn frac(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub series: Vec<Series>,
}

impl LineChart {
    pub fn x_range(&self) -> Range {
        Range::covering(self.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)))
    }

    pub fn y_range(&self) -> Range {
        Range::covering(self.series.iter().flat_map(|s| s.points.iter().map(|p| p.1)))
    }

    pub fn to_svg(&self) -> String {
        let (xr, yr) = (self.x_range(), self.y_range());
        let mut svg = frame(&self.title, &self.x_label, yr);
        x_ticks(&mut svg, xr);
        for (k, s) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let pts: Vec<String> = s
                .points
                .iter()
                .filter(|p| p.1.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", px(xr.frac(x)), py(yr.frac(y))))
                .collect();
            if !pts.is_empty() {
                let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
            }
            legend(&mut svg, k, &s.name, color);
        }
        svg.push_str("</svg>\n");
        svg
    }
}

/// Grouped bars: one group per category, one bar per series.
#[derive(Clone, Debug, PartialEq)]
pub struct BarChart {
    pub title: String,
    pub categories: Vec<String>,
    pub series: Vec<(String, Vec<Option<f64>>)>,
}

impl BarChart {
    pub fn y_range(&self) -> Range {
        Range::covering(self.series.iter().flat_map(|s| s.1.iter().flatten().copied())).with_zero()
    }

    pub fn to_svg(&self) -> String {
        let yr = self.y_range();
        let mut svg = frame(&self.title, "", yr);
        let groups = self.categories.len().max(1) as f64;
        let slot = (WIDTH - LEFT - RIGHT) / groups;
        let bar = 0.8 * slot / self.series.len().max(1) as f64;
        for (g, cat) in self.categories.iter().enumerate() {
            let x0 = LEFT + g as f64 * slot;
            let _ = writeln!(
                svg,
                r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end" transform="rotate(-35 {:.2} {:.2})">{}</text>"#,
                x0 + slot / 2.0,
                HEIGHT - BOTTOM + 14.0,
                x0 + slot / 2.0,
                HEIGHT - BOTTOM + 14.0,
                escape(cat)
            );
            for (k, (_, values)) in self.series.iter().enumerate() {
                let Some(v) = values.get(g).copied().flatten() else { continue };
                let (a, b) = (py(yr.frac(0.0)), py(yr.frac(v)));
                let _ = writeln!(
                    svg,
                    r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                    x0 + 0.1 * slot + k as f64 * bar,
                    a.min(b),
                    bar,
                    (a - b).abs(),
                    PALETTE[k % PALETTE.len()]
                );
            }
        }
        for (k, (name, _)) in self.series.iter().enumerate() {
            legend(&mut svg, k, name, PALETTE[k % PALETTE.len()]);
        }
        svg.push_str("</svg>\n");
        svg
    }
}

fn px(f: f64) -> f64 {
    LEFT + f * (WIDTH - LEFT - RIGHT)
}

fn py(f: f64) -> f64 {
    HEIGHT - BOTTOM - f * (HEIGHT - TOP - BOTTOM)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick(v: f64) -> String {
    format!("{v:.4}").trim_end_matches('0').trim_end_matches('.').to_string()
}

fn frame(title: &str, x_label: &str, yr: Range) -> String {
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">"#);
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="24" font-size="14" text-anchor="middle">{}</text>"#, WIDTH / 2.0, escape(title));
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, HEIGHT - BOTTOM, TOP);
    let _ = writeln!(svg, r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" fill="none" stroke="black"/>"#);
    for k in 0..TICKS {
        let f = k as f64 / (TICKS - 1) as f64;
        let v = yr.min + f * (yr.max - yr.min);
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end" class="ytick">{}</text>"#, x0 - 4.0, py(f) + 3.0, tick(v));
    }
    if !x_label.is_empty() {
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, HEIGHT - 20.0, escape(x_label));
    }
    svg
}

fn x_ticks(svg: &mut String, xr: Range) {
    for k in 0..TICKS {
        let f = k as f64 / (TICKS - 1) as f64;
        let v = xr.min + f * (xr.max - xr.min);
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle" class="xtick">{}</text>"#, px(f), HEIGHT - BOTTOM + 14.0, tick(v));
    }
}

fn legend(svg: &mut String, k: usize, name: &str, color: &str) {
    let (x, y) = (WIDTH - RIGHT + 12.0, TOP + 16.0 * k as f64);
    let _ = writeln!(svg, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{color}"/>"#, y);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="11">{}</text>"#, x + 14.0, y + 9.0, escape(name));
}

/// A parsed CSV: header and rows with their 1-based file line numbers.
struct Table {
    header: Vec<String>,
    rows: Vec<(u64, Vec<String>)>,
}

fn read_table(path: &Path) -> Result<Option<Table>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Ok(None);
    }
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::format(path, format!("line {line}: {e}"))
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(Some(Table { header, rows }))
}

fn number(path: &Path, line: u64, field: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|_| Error::format(path, format!("line {line}: {field:?} is not a number")))
}

fn col(table: &Table, name: &str) -> Option<usize> {
    table.header.iter().position(|h| h == name)
}

/// Line chart of every numeric column against the first.
fn line_chart(path: &Path, table: &Table, title: &str) -> Result<LineChart> {
    let mut series: Vec<Series> = table.header[1..]
        .iter()
        .map(|h| Series {
            name: h.clone(),
            points: Vec::new(),
        })
        .collect();
    for (line, row) in &table.rows {
        let Some(x) = number(path, *line, &row[0])? else {
            return Err(Error::format(path, format!("line {line}: missing x value")));
        };
        for (s, field) in series.iter_mut().zip(&row[1..]) {
            if let Some(y) = number(path, *line, field)? {
                s.points.push((x, y));
            }
        }
    }
    Ok(LineChart {
        title: title.into(),
        x_label: table.header[0].clone(),
        series,
    })
}

/// Bars of per-(matrix, row) medians, one series per domain.
fn bar_chart(path: &Path, table: &Table, value: &str, title: &str) -> Result<BarChart> {
    let (m, r, d, v) = match (col(table, "matrix"), col(table, "row"), col(table, "domain"), col(table, value)) {
        (Some(m), Some(r), Some(d), Some(v)) => (m, r, d, v),
        _ => return Err(Error::format(path, format!("missing matrix, row, domain or {value} column"))),
    };
    let mut categories: Vec<String> = Vec::new();
    let mut domains: Vec<String> = Vec::new();
    let mut values: Vec<(usize, usize, f64)> = Vec::new();
    for (line, row) in &table.rows {
        let cat = format!("{}/{}", row[m], row[r]);
        let ci = categories.iter().position(|c| *c == cat).unwrap_or_else(|| {
            categories.push(cat);
            categories.len() - 1
        });
        let di = domains.iter().position(|x| *x == row[d]).unwrap_or_else(|| {
            domains.push(row[d].clone());
            domains.len() - 1
        });
        if let Some(x) = number(path, *line, &row[v])? {
            values.push((ci, di, x));
        }
    }
    let series = domains
        .iter()
        .enumerate()
        .map(|(di, name)| {
            let per_cat = (0..categories.len())
                .map(|ci| {
                    let vs: Vec<f64> = values.iter().filter(|e| e.0 == ci && e.1 == di).map(|e| e.2).collect();
                    median(&vs)
                })
                .collect();
            (name.clone(), per_cat)
        })
        .collect();
    Ok(BarChart {
        title: title.into(),
        categories,
        series,
    })
}

fn write_svg(path: PathBuf, svg: String) -> Result<PathBuf> {
    fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Renders `csv` into `out/<stem>.svg` (and `out/<stem>_rmsd.svg` for
/// ablation tables). Returns the written files.
pub fn cmd_plot(csv: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let stem = csv.file_stem().and_then(|s| s.to_str()).unwrap_or("chart").to_string();
    let main = out.join(format!("{stem}.svg"));
    let Some(table) = read_table(csv)? else {
        let empty = LineChart {
            title: stem,
            x_label: String::new(),
            series: Vec::new(),
        };
        return Ok(vec![write_svg(main, empty.to_svg())?]);
    };
    let (map_col, rmsd_col) = if col(&table, "median_mAP").is_some() {
        ("median_mAP", "median_RMSD")
    } else {
        ("mAP", "RMSD")
    };
    if col(&table, "matrix").is_some() {
        let map = bar_chart(csv, &table, map_col, "median mAP@0.5 per ablation row")?;
        let rmsd = bar_chart(csv, &table, rmsd_col, "median angle RMSD (rad) per ablation row")?;
        Ok(vec![
            write_svg(main, map.to_svg())?,
            write_svg(out.join(format!("{stem}_rmsd.svg")), rmsd.to_svg())?,
        ])
    } else {
        let chart = line_chart(csv, &table, &stem)?;
        Ok(vec![write_svg(main, chart.to_svg())?])
    }
}
