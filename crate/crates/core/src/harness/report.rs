//! Aggregation of sessions into per-method curves, CSV/SVG output and the
//! measurements-to-target table.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize, Serializer};

use super::SessionLog;
use crate::error::{DalError, Result};
use crate::metrics::Metrics;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Number of acquired measurements.
    pub step: usize,
    pub mean: f64,
    /// Standard error of the mean: sample std (n - 1) over `sqrt(n)`; NaN
    /// for a single item.
    pub se: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub method: String,
    pub metric: String,
    pub points: Vec<CurvePoint>,
}

impl Curve {
    pub fn at(&self, step: usize) -> Option<&CurvePoint> {
        self.points.iter().find(|p| p.step == step)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub curves: Vec<Curve>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    method: &'a str,
    step: usize,
    metric: &'a str,
    mean: f64,
    se: f64,
}

impl Report {
    pub fn curve(&self, method: &str, metric: &str) -> Option<&Curve> {
        self.curves
            .iter()
            .find(|c| c.method == method && c.metric == metric)
    }

    /// Method labels in first-seen order.
    pub fn methods(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for c in &self.curves {
            if !out.contains(&c.method.as_str()) {
                out.push(&c.method);
            }
        }
        out
    }

    /// `method,step,metric,mean,se` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for c in &self.curves {
            for p in &c.points {
                w.serialize(CsvRow {
                    method: &c.method,
                    step: p.step,
                    metric: &c.metric,
                    mean: p.mean,
                    se: p.se,
                })
                .map_err(|e| DalError::Format(e.to_string()))?;
            }
        }
        let bytes = w.into_inner().map_err(|e| DalError::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| DalError::Format(e.to_string()))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn metric_value(m: &Metrics, name: &str) -> f64 {
    match name {
        "psnr" => m.psnr,
        "rmse" => m.rmse,
        _ => m.ssim,
    }
}

/// Groups sessions by `config.label` (first-seen order) and averages every
/// metric per step over the sessions that recorded it.
pub fn aggregate(sessions: &[SessionLog]) -> Result<Report> {
    if sessions.is_empty() {
        return Err(DalError::Empty("session list"));
    }
    let mut groups: Vec<(&str, Vec<&SessionLog>)> = Vec::new();
    for s in sessions {
        match groups.iter_mut().find(|(l, _)| *l == s.config.label) {
            Some((_, g)) => g.push(s),
            None => groups.push((&s.config.label, vec![s])),
        }
    }
    let mut curves = Vec::new();
    for (label, group) in groups {
        for (prefix, recon) in [("", false), ("recon_", true)] {
            let series: Vec<Vec<(usize, Metrics)>> = group
                .iter()
                .map(|s| if recon { s.recon_series() } else { s.metric_series() })
                .collect();
            let mut steps: Vec<usize> = series.iter().flatten().map(|(t, _)| *t).collect();
            steps.sort_unstable();
            steps.dedup();
            if steps.is_empty() {
                continue;
            }
            for name in ["psnr", "rmse", "ssim"] {
                let points = steps
                    .iter()
                    .map(|&t| {
                        let vals: Vec<f64> = series
                            .iter()
                            .filter_map(|s| s.iter().find(|(st, _)| *st == t))
                            .map(|(_, m)| metric_value(m, name))
                            .collect();
                        let (mean, se) = mean_se(&vals);
                        CurvePoint {
                            step: t,
                            mean,
                            se,
                            n: vals.len(),
                        }
                    })
                    .collect();
                curves.push(Curve {
                    method: label.to_string(),
                    metric: format!("{prefix}{name}"),
                    points,
                });
            }
        }
    }
    Ok(Report { curves })
}

/// A measurement count, or "more than the budget".
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Count {
    Reached(usize),
    Beyond(usize),
}

impl fmt::Display for Count {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Count::Reached(n) => write!(f, "{n}"),
            Count::Beyond(n) => write!(f, "> {n}"),
        }
    }
}

impl Serialize for Count {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TargetCount {
    pub method: String,
    pub count: Count,
    /// Crossings of the `mean + 2 SE` and `mean - 2 SE` curves.
    pub range: (Count, Count),
}

fn first_crossing(curve: &Curve, target: f64, shift: impl Fn(&CurvePoint) -> f64) -> Count {
    let budget = curve.points.last().map_or(0, |p| p.step);
    curve
        .points
        .iter()
        .find(|p| p.mean + shift(p) >= target)
        .map_or(Count::Beyond(budget), |p| Count::Reached(p.step))
}

/// Smallest measurement count at which each method's mean PSNR reaches
/// `target_psnr`.
pub fn measurements_to_target(report: &Report, target_psnr: f64) -> Result<Vec<TargetCount>> {
    let out: Vec<TargetCount> = report
        .methods()
        .into_iter()
        .filter_map(|m| report.curve(m, "psnr"))
        .map(|c| TargetCount {
            method: c.method.clone(),
            count: first_crossing(c, target_psnr, |_| 0.0),
            range: (
                first_crossing(c, target_psnr, |p| 2.0 * p.se),
                first_crossing(c, target_psnr, |p| -2.0 * p.se),
            ),
        })
        .collect();
    if out.is_empty() {
        return Err(DalError::invalid("report contains no PSNR curves"));
    }
    Ok(out)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Line plot of `metric` against measurement count with shaded 2 SE bands.
pub fn plot_svg(report: &Report, metric: &str) -> Result<String> {
    let curves: Vec<&Curve> = report.curves.iter().filter(|c| c.metric == metric).collect();
    if curves.is_empty() {
        return Err(DalError::invalid(format!("report has no '{metric}' curves")));
    }
    let band = |p: &CurvePoint| if p.se.is_finite() { 2.0 * p.se } else { 0.0 };
    let pts = curves.iter().flat_map(|c| c.points.iter());
    let x_max = pts.clone().map(|p| p.step).max().unwrap_or(1).max(1) as f64;
    let mut y_lo = pts.clone().map(|p| p.mean - band(p)).fold(f64::INFINITY, f64::min);
    let mut y_hi = pts.map(|p| p.mean + band(p)).fold(f64::NEG_INFINITY, f64::max);
    if !(y_hi > y_lo) {
        y_lo -= 1.0;
        y_hi += 1.0;
    }
    let (w, h, ml, mr, mt, mb) = (640.0, 400.0, 60.0, 150.0, 20.0, 45.0);
    let sx = |x: f64| ml + x / x_max * (w - ml - mr);
    let sy = |y: f64| mt + (y_hi - y) / (y_hi - y_lo) * (h - mt - mb);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    svg += &format!(
        "<line x1=\"{ml}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{b}\" stroke=\"black\"/>\n",
        b = h - mb,
        r = w - mr
    );
    for i in 0..=4 {
        let x = x_max * i as f64 / 4.0;
        let y = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        svg += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.0}</text>\n",
            sx(x),
            h - mb + 16.0,
            x
        );
        svg += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.3}</text>\n",
            ml - 6.0,
            sy(y) + 4.0,
            y
        );
    }
    svg += &format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">measurements</text>\n<text x=\"14\" y=\"{:.1}\" transform=\"rotate(-90 14 {:.1})\" text-anchor=\"middle\">{metric}</text>\n",
        (ml + w - mr) / 2.0,
        h - 8.0,
        (mt + h - mb) / 2.0,
        (mt + h - mb) / 2.0
    );
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let upper = c.points.iter().map(|p| format!("{:.2},{:.2}", sx(p.step as f64), sy(p.mean + band(p))));
        let lower = c.points.iter().rev().map(|p| format!("{:.2},{:.2}", sx(p.step as f64), sy(p.mean - band(p))));
        let poly: Vec<String> = upper.chain(lower).collect();
        svg += &format!(
            "<polygon points=\"{}\" fill=\"{color}\" fill-opacity=\"0.2\" stroke=\"none\"/>\n",
            poly.join(" ")
        );
        let line: Vec<String> = c
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.step as f64), sy(p.mean)))
            .collect();
        svg += &format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            line.join(" ")
        );
        let ly = mt + 16.0 * i as f64 + 8.0;
        svg += &format!(
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n<text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            w - mr + 10.0,
            w - mr + 30.0,
            w - mr + 35.0,
            ly + 4.0,
            xml_escape(&c.method)
        );
    }
    svg += "</svg>\n";
    Ok(svg)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
