//! Report serialisation: JSON envelopes, CSV tables and static SVG plots.
//!
//! Everything here is a pure function of its inputs. No timestamps, no
//! hash-map iteration order, so identical inputs give identical bytes.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::decompose::RegressionSolution;
use crate::error::{Error, Result};
use crate::instrument::PatchGrid;
use crate::lens::{DynamicsReport, LensSite, MoverScore};

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// Stamped into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub model_sha256: String,
    pub seed: u64,
    pub config: serde_json::Value,
}

impl Provenance {
    pub fn new(model_sha256: String, seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            tool_version: TOOL_VERSION.to_string(),
            model_sha256,
            seed,
            config: serde_json::to_value(config)?,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report<T> {
    pub provenance: Provenance,
    pub result: T,
}

/// Writes files under one directory and remembers what it wrote.
pub struct ReportWriter {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl ReportWriter {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            written: Vec::new(),
        })
    }

    pub fn text(&mut self, name: &str, body: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        self.written.push(path.clone());
        Ok(path)
    }

    pub fn json<T: Serialize>(
        &mut self,
        name: &str,
        provenance: &Provenance,
        result: &T,
    ) -> Result<PathBuf> {
        #[derive(Serialize)]
        struct Borrowed<'a, T> {
            provenance: &'a Provenance,
            result: &'a T,
        }
        let mut body = serde_json::to_string_pretty(&Borrowed { provenance, result })?;
        body.push('\n');
        self.text(name, &body)
    }

    pub fn into_written(self) -> Vec<PathBuf> {
        self.written
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn dynamics_csv(report: &DynamicsReport) -> String {
    let mut out = String::from("layer,site,prob_X_mean,prob_X_var,prob_Y_mean,prob_Y_var\n");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.layer,
            r.site.name(),
            r.prob_x_mean,
            r.prob_x_var,
            r.prob_y_mean,
            r.prob_y_var
        );
    }
    out
}

/// Rows are layers, columns heads; blank cells are senders that are not
/// upstream of the receiver or had every prompt guarded.
pub fn grid_csv(cells: &[Vec<Option<f64>>]) -> String {
    let n_heads = cells.first().map_or(0, Vec::len);
    let mut out = String::from("layer");
    for h in 0..n_heads {
        let _ = write!(out, ",h{h}");
    }
    out.push('\n');
    for (l, row) in cells.iter().enumerate() {
        out.push_str(&l.to_string());
        for v in row {
            out.push(',');
            out.push_str(&cell(*v));
        }
        out.push('\n');
    }
    out
}

pub fn mover_csv(scores: &[MoverScore]) -> String {
    let mut out = String::from("layer,head,prompt,attention,projection\n");
    for s in scores {
        for (i, (a, p)) in s.points.iter().enumerate() {
            let _ = writeln!(out, "{},{},{i},{a},{p}", s.layer, s.head);
        }
    }
    out
}

/// One row per layer: `w^{l,0} … w^{l,H-1}, w^{l,r}` and the fit's APE.
pub fn coefficients_csv(solutions: &[RegressionSolution]) -> String {
    let n_heads = solutions.first().map_or(0, |s| s.w_head.len());
    let mut out = String::from("layer");
    for h in 0..n_heads {
        let _ = write!(out, ",w_{h}");
    }
    out.push_str(",w_r,ape\n");
    for s in solutions {
        out.push_str(&s.layer.to_string());
        for c in s.coefficients() {
            let _ = write!(out, ",{c:.4}");
        }
        let _ = writeln!(out, ",{:.4}", s.ape);
    }
    out
}

// --- SVG -----------------------------------------------------------------

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    s
}

struct Axes {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Axes {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for v in it.filter(|v| v.is_finite()) {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        let (x0, x1) = span(&mut xs.clone());
        let (y0, y1) = span(&mut ys.clone());
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }

    fn draw(&self, s: &mut String, xlabel: &str, ylabel: &str) {
        let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
        let _ = writeln!(
            s,
            r#"<path d="M{l} {t} L{l} {b} L{r} {b}" fill="none" stroke="black"/>"#
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let (xv, yv) = (
                self.x0 + f * (self.x1 - self.x0),
                self.y0 + f * (self.y1 - self.y0),
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                self.px(xv),
                b + 16.0,
                tick(xv)
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                l - 6.0,
                self.py(yv) + 4.0,
                tick(yv)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            W / 2.0,
            H - 12.0,
            escape(xlabel)
        );
        let _ = writeln!(
            s,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            escape(ylabel)
        );
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Named series of `(x, y)` points joined by lines.
pub fn line_chart_svg(
    title: &str,
    xlabel: &str,
    ylabel: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    let pts = series.iter().flat_map(|(_, p)| p.iter().copied());
    let axes = Axes::fit(pts.clone().map(|p| p.0), pts.map(|p| p.1));
    let mut s = svg_open(title);
    axes.draw(&mut s, xlabel, ylabel);
    for (i, (name, points)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let d: Vec<String> = points
            .iter()
            .enumerate()
            .map(|(j, &(x, y))| {
                format!(
                    "{}{:.1} {:.1}",
                    if j == 0 { 'M' } else { 'L' },
                    axes.px(x),
                    axes.py(y)
                )
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<path d="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
            d.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{colour}">{}</text>"#,
            W - MARGIN + 4.0 - 90.0,
            MARGIN + 14.0 * i as f64,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn scatter_svg(title: &str, xlabel: &str, ylabel: &str, points: &[(f64, f64)]) -> String {
    let axes = Axes::fit(points.iter().map(|p| p.0), points.iter().map(|p| p.1));
    let mut s = svg_open(title);
    axes.draw(&mut s, xlabel, ylabel);
    for &(x, y) in points {
        let _ = writeln!(
            s,
            r##"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="#1f77b4" fill-opacity="0.6"/>"##,
            axes.px(x),
            axes.py(y)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Diverging blue–white–red heatmap, symmetric around zero.
pub fn heatmap_svg(title: &str, cells: &[Vec<Option<f64>>]) -> String {
    let rows = cells.len();
    let cols = cells.first().map_or(0, Vec::len);
    let max = cells
        .iter()
        .flatten()
        .flatten()
        .fold(0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    let mut s = svg_open(title);
    let cw = (W - 2.0 * MARGIN) / cols.max(1) as f64;
    let ch = (H - 2.0 * MARGIN) / rows.max(1) as f64;
    for (l, row) in cells.iter().enumerate() {
        let y = MARGIN + l as f64 * ch;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{l}</text>"#,
            MARGIN - 6.0,
            y + ch / 2.0 + 4.0
        );
        for (h, v) in row.iter().enumerate() {
            let x = MARGIN + h as f64 * cw;
            let fill = match v {
                None => "#dddddd".to_string(),
                Some(v) => {
                    let f = (v / max).clamp(-1.0, 1.0);
                    let fade = |c: f64| (255.0 * (1.0 - f.abs()) + c * f.abs()).round() as u8;
                    let (r, g, b) = if f < 0.0 {
                        (fade(33.0), fade(102.0), fade(172.0))
                    } else {
                        (fade(178.0), fade(24.0), fade(43.0))
                    };
                    format!("#{r:02x}{g:02x}{b:02x}")
                }
            };
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{y:.1}" width="{cw:.1}" height="{ch:.1}" fill="{fill}" stroke="white"/>"#
            );
        }
    }
    for h in 0..cols {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{h}</text>"#,
            MARGIN + (h as f64 + 0.5) * cw,
            H - MARGIN + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">head</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">layer</text>"#,
        H / 2.0,
        H / 2.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="40" text-anchor="end">scale ±{}</text>"#,
        W - MARGIN,
        tick(max)
    );
    s.push_str("</svg>\n");
    s
}

/// Probability of X and Y at `r_post` per layer, as in a logit-lens plot.
pub fn dynamics_svg(report: &DynamicsReport) -> String {
    let series = report.series(LensSite::ResidPost);
    let pick = |f: fn(&(f64, f64)) -> f64| -> Vec<(f64, f64)> {
        series
            .iter()
            .enumerate()
            .map(|(l, p)| (l as f64, f(p)))
            .collect()
    };
    line_chart_svg(
        "decoded probability at resid_post",
        "layer",
        "mean probability",
        &[
            ("prob(X)".into(), pick(|p| p.0)),
            ("prob(Y)".into(), pick(|p| p.1)),
        ],
    )
}

pub fn grid_report(grid: &PatchGrid) -> (String, String) {
    (
        grid_csv(&grid.mean_delta),
        heatmap_svg(
            &format!("mean Δπ (%) into {}", grid.receiver),
            &grid.mean_delta,
        ),
    )
}
