use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use super::run::{read_metrics, CONFIG_FILE};
use crate::error::{Error, Result};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 24.0;
const BOTTOM: f64 = 52.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Mean eval-return curve of one run group; `std` is the population std
/// across runs at each step, and empty for a single run.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveGroup {
    pub label: String,
    pub runs: usize,
    pub steps: Vec<u64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Label of the run that wrote `metrics`: from the config echo beside it,
/// else the directory name.
fn group_label(metrics: &Path) -> String {
    let dir = metrics.parent().unwrap_or(Path::new("."));
    std::fs::read_to_string(dir.join(CONFIG_FILE))
        .ok()
        .and_then(|t| serde_json::from_str::<ExperimentConfig>(&t).ok())
        .map(|c| c.label())
        .unwrap_or_else(|| {
            dir.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| metrics.display().to_string())
        })
}

/// Groups metrics files by run label, in order of first appearance, and
/// averages each group over the eval steps every member reached.
pub fn curve_groups(inputs: &[PathBuf]) -> Result<Vec<CurveGroup>> {
    if inputs.is_empty() {
        return Err(Error::invalid("plot needs at least one metrics file"));
    }
    let mut groups: Vec<(String, Vec<Vec<(u64, f64)>>)> = Vec::new();
    for path in inputs {
        let rows = read_metrics(path)?;
        let curve: Vec<(u64, f64)> = rows.iter().map(|r| (r.env_step, r.eval_return_mean)).collect();
        let label = group_label(path);
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, runs)) => runs.push(curve),
            None => groups.push((label, vec![curve])),
        }
    }
    let mut out = Vec::new();
    for (label, runs) in groups {
        let steps: Vec<u64> = runs[0]
            .iter()
            .map(|&(s, _)| s)
            .filter(|s| runs.iter().all(|r| r.iter().any(|&(t, _)| t == *s)))
            .collect();
        let n = runs.len() as f64;
        let mut mean = Vec::with_capacity(steps.len());
        let mut std = Vec::new();
        for s in &steps {
            let v: Vec<f64> = runs
                .iter()
                .map(|r| r.iter().find(|&&(t, _)| t == *s).expect("common step").1)
                .collect();
            let m = v.iter().sum::<f64>() / n;
            mean.push(m);
            if runs.len() > 1 {
                std.push((v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt());
            }
        }
        out.push(CurveGroup {
            label,
            runs: runs.len(),
            steps,
            mean,
            std,
        });
    }
    Ok(out)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Evenly spaced round tick values covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let raw = (hi - lo) / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(t);
        t += step;
    }
    out
}

/// SVG 1.1 text with one mean curve per group and, for groups of several
/// runs, a translucent ±1 std band.
pub fn render_svg(groups: &[CurveGroup]) -> String {
    let points = groups.iter().flat_map(|g| {
        g.steps.iter().enumerate().map(move |(i, &s)| {
            let sd = g.std.get(i).copied().unwrap_or(0.0);
            (s as f64, g.mean[i] - sd, g.mean[i] + sd)
        })
    });
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, lo, hi) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        if lo.is_finite() && hi.is_finite() {
            y0 = y0.min(lo);
            y1 = y1.max(hi);
        }
    }
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    let pad = if y1 > y0 { 0.05 * (y1 - y0) } else { 1.0 };
    let (y0, y1) = (y0 - pad, y1 + pad);
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<g id="axes" stroke="black" stroke-width="1">"#);
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{b}"/>"#,
        b = TOP + ph,
        r = LEFT + pw
    );
    for t in ticks(x0, x1, 5) {
        let x = px(t);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{b}" x2="{x:.2}" y2="{b2}"/><text x="{x:.2}" y="{ty}" text-anchor="middle" stroke="none">{t}</text>"#,
            b = TOP + ph,
            b2 = TOP + ph + 4.0,
            ty = TOP + ph + 16.0
        );
    }
    for t in ticks(y0, y1, 5) {
        let y = py(t);
        let _ = writeln!(
            s,
            r#"<line x1="{l2}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}"/><text x="{tx}" y="{ty:.2}" text-anchor="end" stroke="none">{t:.3}</text>"#,
            l2 = LEFT - 4.0,
            tx = LEFT - 6.0,
            ty = y + 4.0
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(
        s,
        r#"<text x="{x}" y="{y}" text-anchor="middle">environment steps</text>"#,
        x = LEFT + pw / 2.0,
        y = HEIGHT - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{y}" text-anchor="middle" transform="rotate(-90 14 {y})">eval return</text>"#,
        y = TOP + ph / 2.0
    );

    for (k, g) in groups.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(s, r#"<g class="group" data-label="{}" data-runs="{}">"#, escape(&g.label), g.runs);
        if !g.std.is_empty() && g.steps.len() > 1 {
            let upper = g.steps.iter().zip(g.mean.iter().zip(&g.std));
            let mut pts: Vec<String> = upper
                .clone()
                .map(|(&x, (m, d))| format!("{:.2},{:.2}", px(x as f64), py(m + d)))
                .collect();
            pts.extend(
                upper
                    .rev()
                    .map(|(&x, (m, d))| format!("{:.2},{:.2}", px(x as f64), py(m - d))),
            );
            let _ = writeln!(
                s,
                r#"<polygon class="band" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                pts.join(" ")
            );
        }
        let pts: Vec<String> = g
            .steps
            .iter()
            .zip(&g.mean)
            .map(|(&x, &m)| format!("{:.2},{:.2}", px(x as f64), py(m)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="mean" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        let ly = TOP + 10.0 + 18.0 * k as f64;
        let lx = LEFT + pw + 16.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{x2}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{tx}" y="{ty}">{}</text>"#,
            escape(&g.label),
            x2 = lx + 20.0,
            tx = lx + 26.0,
            ty = ly + 4.0
        );
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(s, "</svg>");
    s
}

/// Reads the metrics files, groups them and writes the SVG to `out`.
pub fn emit_plot(inputs: &[PathBuf], out: &Path) -> Result<Vec<CurveGroup>> {
    let groups = curve_groups(inputs)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(out, render_svg(&groups))?;
    Ok(groups)
}
