//! Static SVG rendering for the CSV artifacts the tool emits.
//!
//! The renderer recognizes each schema by its header row and picks a sensible
//! chart for it; a plain two-column numeric CSV becomes a single polyline.
//! With `--pca`, a latent export is projected to two dimensions and drawn as
//! a scatter plot colored by parameter value. All failures to make sense of
//! the input are usage errors (exit code 2).

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::eval::pca_top2;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 56.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Parsed CSV: header names plus all rows as strings.
struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn parse_csv(text: &str, origin: &Path) -> Result<Csv> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::config(format!("{}: empty file", origin.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: Vec<String> = line.split(',').map(str::to_string).collect();
        if row.len() != header.len() {
            return Err(Error::config(format!(
                "{}: row {} has {} fields, header has {}",
                origin.display(),
                i + 2,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::config(format!(
            "{}: no data rows",
            origin.display()
        )));
    }
    Ok(Csv { header, rows })
}

impl Csv {
    /// Parse one column as numbers; any unparseable cell is a usage error.
    fn numeric(&self, col: usize, origin: &Path) -> Result<Vec<f64>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row[col].parse::<f64>().map_err(|_| {
                    Error::config(format!(
                        "{}: row {}, column {:?}: {:?} is not a number",
                        origin.display(),
                        i + 2,
                        self.header[col],
                        row[col]
                    ))
                })
            })
            .collect()
    }

    fn header_is(&self, names: &[&str]) -> bool {
        self.header.len() == names.len()
            && self.header.iter().zip(names).all(|(a, b)| a == b)
    }
}

/// Read a CSV file and write the corresponding SVG chart.
pub fn render_file(input: &Path, out: &Path, pca: bool) -> Result<()> {
    let text = std::fs::read_to_string(input)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", input.display())))?;
    let svg = render_str(&text, input, pca)?;
    std::fs::write(out, svg)?;
    Ok(())
}

/// Pure rendering path, exposed for tests: CSV text in, SVG text out.
pub fn render_str(text: &str, origin: &Path, pca: bool) -> Result<String> {
    let csv = parse_csv(text, origin)?;
    if pca {
        return render_pca(&csv, origin);
    }
    if csv.header_is(&["t", "dim", "true", "predicted"]) {
        return render_trace(&csv, origin);
    }
    if csv.header_is(&["param", "value", "mse", "n"]) {
        let x = csv.numeric(1, origin)?;
        let y = csv.numeric(2, origin)?;
        return Ok(line_chart(
            &[Series {
                label: "mse".into(),
                points: zip_points(&x, &y),
                color: PALETTE[0].into(),
                dashed: false,
            }],
            &csv.header[1],
            "mse",
        ));
    }
    if csv.header_is(&["env", "regime", "seed", "episode", "return"]) {
        let x = csv.numeric(3, origin)?;
        let y = csv.numeric(4, origin)?;
        return Ok(line_chart(
            &[Series {
                label: "return".into(),
                points: zip_points(&x, &y),
                color: PALETTE[0].into(),
                dashed: false,
            }],
            "episode",
            "return",
        ));
    }
    if csv.header_is(&["iteration", "dataset_size", "mean_loss", "mean_return"]) {
        let x = csv.numeric(0, origin)?;
        let loss = csv.numeric(2, origin)?;
        let ret = csv.numeric(3, origin)?;
        // Returns and losses live on different scales; scale each series to
        // the frame independently and label both ranges.
        return Ok(line_chart_dual(
            &Series {
                label: "mean_return".into(),
                points: zip_points(&x, &ret),
                color: PALETTE[0].into(),
                dashed: false,
            },
            &Series {
                label: "mean_loss".into(),
                points: zip_points(&x, &loss),
                color: PALETTE[1].into(),
                dashed: true,
            },
            "iteration",
        ));
    }
    if csv.header.len() == 2 {
        let x = csv.numeric(0, origin)?;
        let y = csv.numeric(1, origin)?;
        return Ok(line_chart(
            &[Series {
                label: csv.header[1].clone(),
                points: zip_points(&x, &y),
                color: PALETTE[0].into(),
                dashed: false,
            }],
            &csv.header[0],
            &csv.header[1],
        ));
    }
    // Unknown wider schema: scatter the first two numeric non-constant
    // columns against each other.
    let mut numeric_cols = Vec::new();
    for c in 0..csv.header.len() {
        if let Ok(vals) = csv.numeric(c, origin) {
            let varies = vals.windows(2).any(|w| w[0] != w[1]);
            if varies || csv.rows.len() == 1 {
                numeric_cols.push((c, vals));
            }
            if numeric_cols.len() == 2 {
                break;
            }
        }
    }
    if numeric_cols.len() < 2 {
        return Err(Error::config(format!(
            "{}: no known schema and fewer than two varying numeric columns",
            origin.display()
        )));
    }
    let (cx, x) = &numeric_cols[0];
    let (cy, y) = &numeric_cols[1];
    Ok(scatter_chart(
        &zip_points(x, y),
        None,
        &csv.header[*cx],
        &csv.header[*cy],
    ))
}

fn render_trace(csv: &Csv, origin: &Path) -> Result<String> {
    let t = csv.numeric(0, origin)?;
    let dim = csv.numeric(1, origin)?;
    let truth = csv.numeric(2, origin)?;
    let pred = csv.numeric(3, origin)?;
    let mut dims: Vec<i64> = dim.iter().map(|d| *d as i64).collect();
    dims.sort_unstable();
    dims.dedup();
    let mut series = Vec::new();
    for (i, d) in dims.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()].to_string();
        let pick = |vals: &[f64]| -> Vec<(f64, f64)> {
            t.iter()
                .zip(dim.iter())
                .zip(vals.iter())
                .filter(|((_, dd), _)| **dd as i64 == *d)
                .map(|((tt, _), v)| (*tt, *v))
                .collect()
        };
        series.push(Series {
            label: format!("dim {d} true"),
            points: pick(&truth),
            color: color.clone(),
            dashed: false,
        });
        series.push(Series {
            label: format!("dim {d} predicted"),
            points: pick(&pred),
            color,
            dashed: true,
        });
    }
    Ok(line_chart(&series, "t", "state"))
}

fn render_pca(csv: &Csv, origin: &Path) -> Result<String> {
    // Expect the latent-export schema: param_value,ep,t,z0..zD.
    if csv.header.len() < 4
        || csv.header[0] != "param_value"
        || !csv.header[3..].iter().all(|h| h.starts_with('z'))
    {
        return Err(Error::config(format!(
            "{}: --pca expects a latent export (param_value,ep,t,z0..)",
            origin.display()
        )));
    }
    let labels = csv.numeric(0, origin)?;
    let zdim = csv.header.len() - 3;
    let n = csv.rows.len();
    let mut z = Array2::zeros((n, zdim));
    for j in 0..zdim {
        let col = csv.numeric(3 + j, origin)?;
        for i in 0..n {
            z[[i, j]] = col[i];
        }
    }
    let pca = pca_top2(&z.view())?;
    let points: Vec<(f64, f64)> = (0..n)
        .map(|i| (pca.projections[[i, 0]], pca.projections[[i, 1]]))
        .collect();
    Ok(scatter_chart(&points, Some(&labels), "pc1", "pc2"))
}

// ---------------------------------------------------------------------------
// Chart assembly
// ---------------------------------------------------------------------------

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
    color: String,
    dashed: bool,
}

fn zip_points(x: &[f64], y: &[f64]) -> Vec<(f64, f64)> {
    x.iter().zip(y.iter()).map(|(a, b)| (*a, *b)).collect()
}

fn finite(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    points
        .iter()
        .copied()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect()
}

/// Min and max with a padded degenerate case so a flat series still renders.
fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn to_screen(x: f64, y: f64, xr: (f64, f64), yr: (f64, f64)) -> (f64, f64) {
    let sx = MARGIN + (x - xr.0) / (xr.1 - xr.0) * (WIDTH - 2.0 * MARGIN);
    let sy = HEIGHT - MARGIN - (y - yr.0) / (yr.1 - yr.0) * (HEIGHT - 2.0 * MARGIN);
    (sx, sy)
}

fn svg_open() -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    )
}

fn axes_frame(xlabel: &str, ylabel: &str, xr: (f64, f64), yr: (f64, f64)) -> String {
    let x0 = MARGIN;
    let x1 = WIDTH - MARGIN;
    let y0 = HEIGHT - MARGIN;
    let y1 = MARGIN;
    format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n\
         <text x=\"{x0}\" y=\"{ty}\" font-size=\"12\">{xmin}</text>\n\
         <text x=\"{x1}\" y=\"{ty}\" font-size=\"12\" text-anchor=\"end\">{xmax}</text>\n\
         <text x=\"{tx}\" y=\"{y0}\" font-size=\"12\" text-anchor=\"end\">{ymin}</text>\n\
         <text x=\"{tx}\" y=\"{y1}\" font-size=\"12\" text-anchor=\"end\">{ymax}</text>\n\
         <text x=\"{cx}\" y=\"{ty}\" font-size=\"13\" text-anchor=\"middle\">{xlabel}</text>\n\
         <text x=\"16\" y=\"{cy}\" font-size=\"13\" transform=\"rotate(-90 16 {cy})\" \
         text-anchor=\"middle\">{ylabel}</text>\n",
        ty = HEIGHT - MARGIN + 24.0,
        tx = MARGIN - 6.0,
        cx = WIDTH / 2.0,
        cy = HEIGHT / 2.0,
        xmin = trim_float(xr.0),
        xmax = trim_float(xr.1),
        ymin = trim_float(yr.0),
        ymax = trim_float(yr.1),
    )
}

/// Compact numeric label.
fn trim_float(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 0.01 && v.abs() < 10000.0) {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.2e}")
    }
}

fn polyline(points: &[(f64, f64)], color: &str, dashed: bool, xr: (f64, f64), yr: (f64, f64)) -> String {
    let coords: Vec<String> = points
        .iter()
        .map(|&(x, y)| {
            let (sx, sy) = to_screen(x, y, xr, yr);
            format!("{sx:.2},{sy:.2}")
        })
        .collect();
    let dash = if dashed {
        " stroke-dasharray=\"6,4\""
    } else {
        ""
    };
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash} points=\"{}\"/>\n",
        coords.join(" ")
    )
}

fn line_chart(series: &[Series], xlabel: &str, ylabel: &str) -> String {
    let cleaned: Vec<(usize, Vec<(f64, f64)>)> = series
        .iter()
        .enumerate()
        .map(|(i, s)| (i, finite(&s.points)))
        .filter(|(_, p)| !p.is_empty())
        .collect();
    let xr = range(cleaned.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let yr = range(cleaned.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let mut svg = svg_open();
    svg.push_str(&axes_frame(xlabel, ylabel, xr, yr));
    for (li, (i, pts)) in cleaned.iter().enumerate() {
        let s = &series[*i];
        svg.push_str(&polyline(pts, &s.color, s.dashed, xr, yr));
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{y}\" font-size=\"12\" fill=\"{c}\">{t}</text>\n",
            x = WIDTH - MARGIN - 150.0,
            y = MARGIN + 14.0 * (li as f64 + 1.0),
            c = s.color,
            t = s.label
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Two series with independent vertical scales sharing one x axis.
fn line_chart_dual(a: &Series, b: &Series, xlabel: &str) -> String {
    let pa = finite(&a.points);
    let pb = finite(&b.points);
    let xr = range(pa.iter().chain(pb.iter()).map(|q| q.0));
    let mut svg = svg_open();
    let mut label_row = 0;
    for (s, pts) in [(a, &pa), (b, &pb)] {
        if pts.is_empty() {
            continue;
        }
        let yr = range(pts.iter().map(|q| q.1));
        svg.push_str(&polyline(pts, &s.color, s.dashed, xr, yr));
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{y}\" font-size=\"12\" fill=\"{c}\">{t} [{lo} .. {hi}]</text>\n",
            x = WIDTH - MARGIN - 220.0,
            y = MARGIN + 14.0 * (label_row as f64 + 1.0),
            c = s.color,
            t = s.label,
            lo = trim_float(yr.0),
            hi = trim_float(yr.1),
        ));
        label_row += 1;
    }
    let y0 = HEIGHT - MARGIN;
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{y0}\" x2=\"{w}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ty}\" font-size=\"13\" text-anchor=\"middle\">{xlabel}</text>\n",
        m = MARGIN,
        w = WIDTH - MARGIN,
        cx = WIDTH / 2.0,
        ty = HEIGHT - MARGIN + 24.0,
    ));
    svg.push_str("</svg>\n");
    svg
}

fn scatter_chart(
    points: &[(f64, f64)],
    labels: Option<&[f64]>,
    xlabel: &str,
    ylabel: &str,
) -> String {
    let kept: Vec<(usize, (f64, f64))> = points
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, (x, y))| x.is_finite() && y.is_finite())
        .collect();
    let xr = range(kept.iter().map(|(_, p)| p.0));
    let yr = range(kept.iter().map(|(_, p)| p.1));
    let (lmin, lmax) = labels
        .map(|l| range(l.iter().copied().filter(|v| v.is_finite())))
        .unwrap_or((0.0, 1.0));
    let mut svg = svg_open();
    svg.push_str(&axes_frame(xlabel, ylabel, xr, yr));
    for (i, (x, y)) in kept {
        let color = match labels {
            Some(l) => heat_color(l[i], lmin, lmax),
            None => PALETTE[0].to_string(),
        };
        let (sx, sy) = to_screen(x, y, xr, yr);
        svg.push_str(&format!(
            "<circle cx=\"{sx:.2}\" cy=\"{sy:.2}\" r=\"3\" fill=\"{color}\"/>\n"
        ));
    }
    if labels.is_some() {
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{y}\" font-size=\"12\">color: {lo} (blue) to {hi} (red)</text>\n",
            x = MARGIN,
            y = MARGIN - 8.0,
            lo = trim_float(lmin),
            hi = trim_float(lmax),
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Map a value in [lo, hi] onto a blue-to-red gradient.
fn heat_color(v: f64, lo: f64, hi: f64) -> String {
    let t = if hi > lo {
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.5
    };
    let r = (255.0 * t).round() as u8;
    let b = (255.0 * (1.0 - t)).round() as u8;
    let g = (96.0 * (1.0 - (2.0 * t - 1.0).abs())).round() as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}
