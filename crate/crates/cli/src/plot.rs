//! Static SVG line plots.
//!
//! Output is plain text built from `polyline`, `rect`, `line` and `text`
//! elements, with coordinates printed to three decimals so reruns are
//! byte-identical.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use isekf::scenario::SimulationTrace;

use crate::error::{HarnessError, Result};
use crate::metrics::Window;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
/// Fraction of the data span added on each side of an axis.
const MARGIN: f64 = 0.05;

pub const PLOT_FILES: [&str; 7] = [
    "measurement_y1.svg",
    "measurement_y2.svg",
    "measurement_y3.svg",
    "state_px.svg",
    "state_py.svg",
    "state_theta.svg",
    "trajectory.svg",
];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub color: &'static str,
    /// Non-finite points split the line.
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct Figure {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Shaded x-intervals.
    pub spans: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
}

impl Axis {
    /// Data extent widened by 5% on both sides; a flat or empty extent gets
    /// unit padding.
    pub fn fit(values: impl Iterator<Item = f64>) -> Self {
        let (lo, hi) = values
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if !lo.is_finite() {
            return Axis { min: -1.0, max: 1.0 };
        }
        let span = hi - lo;
        if span <= 0.0 {
            return Axis { min: lo - 1.0, max: hi + 1.0 };
        }
        Axis {
            min: lo - MARGIN * span,
            max: hi + MARGIN * span,
        }
    }

    fn ticks(&self) -> Vec<f64> {
        let span = self.max - self.min;
        let raw = span / 5.0;
        let mag = 10f64.powf(raw.log10().floor());
        let step = [1.0, 2.0, 5.0, 10.0]
            .into_iter()
            .map(|m| m * mag)
            .find(|s| *s >= raw)
            .unwrap_or(10.0 * mag);
        let first = (self.min / step).ceil() as i64;
        let last = (self.max / step).floor() as i64;
        (first..=last).map(|i| i as f64 * step).collect()
    }
}

fn tick_label(v: f64) -> String {
    let s = format!("{:.4}", v);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Figure {
    pub fn to_svg(&self) -> String {
        let xa = Axis::fit(self.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
        let ya = Axis::fit(self.series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
        let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
        let sx = |x: f64| LEFT + (x - xa.min) / (xa.max - xa.min) * pw;
        let sy = |y: f64| TOP + (ya.max - y) / (ya.max - ya.min) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        for &(a, b) in &self.spans {
            let (x0, x1) = (sx(a.max(xa.min)), sx(b.min(xa.max)));
            if x1 > x0 {
                let _ = writeln!(
                    s,
                    r##"<rect class="outlier" x="{x0:.3}" y="{TOP:.3}" width="{:.3}" height="{ph:.3}" fill="#f4b183" fill-opacity="0.35"/>"##,
                    x1 - x0
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<rect x="{LEFT:.3}" y="{TOP:.3}" width="{pw:.3}" height="{ph:.3}" fill="none" stroke="black"/>"#
        );
        for t in xa.ticks() {
            let x = sx(t);
            let _ = writeln!(
                s,
                r#"<line x1="{x:.3}" y1="{:.3}" x2="{x:.3}" y2="{:.3}" stroke="black"/><text x="{x:.3}" y="{:.3}" text-anchor="middle">{}</text>"#,
                TOP + ph,
                TOP + ph + 5.0,
                TOP + ph + 18.0,
                tick_label(t)
            );
        }
        for t in ya.ticks() {
            let y = sy(t);
            let _ = writeln!(
                s,
                r#"<line x1="{:.3}" y1="{y:.3}" x2="{LEFT:.3}" y2="{y:.3}" stroke="black"/><text x="{:.3}" y="{:.3}" text-anchor="end">{}</text>"#,
                LEFT - 5.0,
                LEFT - 8.0,
                y + 4.0,
                tick_label(t)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.3}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            LEFT + pw / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.3}" y="{:.3}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="18" y="{:.3}" text-anchor="middle" transform="rotate(-90 18 {:.3})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );
        for series in &self.series {
            for run in series.points.split(|p| !(p.0.is_finite() && p.1.is_finite())) {
                if run.is_empty() {
                    continue;
                }
                let mut pts = String::new();
                for (i, &(x, y)) in run.iter().enumerate() {
                    if i > 0 {
                        pts.push(' ');
                    }
                    let _ = write!(pts, "{:.3},{:.3}", sx(x), sy(y));
                }
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{}" stroke-width="1.2" points="{pts}"/>"#,
                    series.color
                );
            }
        }
        for (i, series) in self.series.iter().enumerate() {
            let y = TOP + 10.0 + 18.0 * i as f64;
            let x = WIDTH - RIGHT + 12.0;
            let _ = writeln!(
                s,
                r#"<line x1="{x:.3}" y1="{y:.3}" x2="{:.3}" y2="{y:.3}" stroke="{}" stroke-width="2"/><text x="{:.3}" y="{:.3}">{}</text>"#,
                x + 20.0,
                series.color,
                x + 26.0,
                y + 4.0,
                escape(&series.label)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn color(label: &str) -> &'static str {
    match label {
        "truth" => "black",
        "is-ekf" => "#1f77b4",
        "ekf" => "#d62728",
        "lsigma-ekf" => "#2ca02c",
        _ => "#9467bd",
    }
}

/// The seven figures: measurements with outlier windows shaded, per-state
/// estimates against truth, and the x-y trajectory.
pub fn figures(trace: &SimulationTrace, windows: &[Window]) -> Vec<(&'static str, Figure)> {
    let dt = trace.dt;
    let spans: Vec<(f64, f64)> = windows
        .iter()
        .map(|w| ((w.first as f64 - 1.0) * dt, w.last as f64 * dt))
        .collect();
    let time: Vec<f64> = trace.records.iter().map(|r| r.t).collect();
    let mut out = Vec::with_capacity(7);

    let meas_names = ["GPS x (m)", "GPS y (m)", "compass heading (rad)"];
    for (i, name) in meas_names.iter().enumerate() {
        out.push((
            PLOT_FILES[i],
            Figure {
                title: format!("Measurement y{}", i + 1),
                x_label: "time (s)".into(),
                y_label: name.to_string(),
                series: vec![Series {
                    label: format!("y{}", i + 1),
                    color: "#555555",
                    points: time.iter().zip(&trace.records).map(|(&t, r)| (t, r.y[i])).collect(),
                }],
                spans: spans.clone(),
            },
        ));
    }

    let state_names = ["p_x (m)", "p_y (m)", "theta (rad)"];
    for (i, name) in state_names.iter().enumerate() {
        let mut series = vec![Series {
            label: "truth".into(),
            color: color("truth"),
            points: trace
                .records
                .iter()
                .map(|r| (r.t, r.truth.to_vector()[i]))
                .collect(),
        }];
        for (j, label) in trace.filter_labels.iter().enumerate() {
            series.push(Series {
                label: label.clone(),
                color: color(label),
                points: trace
                    .records
                    .iter()
                    .map(|r| (r.t, r.filters[j].estimate.as_ref().map_or(f64::NAN, |x| x[i])))
                    .collect(),
            });
        }
        out.push((
            PLOT_FILES[3 + i],
            Figure {
                title: format!("State estimate {name}"),
                x_label: "time (s)".into(),
                y_label: name.to_string(),
                series,
                spans: spans.clone(),
            },
        ));
    }

    let mut series = vec![Series {
        label: "truth".into(),
        color: color("truth"),
        points: trace.records.iter().map(|r| (r.truth.px, r.truth.py)).collect(),
    }];
    for (j, label) in trace.filter_labels.iter().enumerate() {
        series.push(Series {
            label: label.clone(),
            color: color(label),
            points: trace
                .records
                .iter()
                .map(|r| {
                    r.filters[j]
                        .estimate
                        .as_ref()
                        .map_or((f64::NAN, f64::NAN), |x| (x[0], x[1]))
                })
                .collect(),
        });
    }
    out.push((
        PLOT_FILES[6],
        Figure {
            title: "Trajectory".into(),
            x_label: "p_x (m)".into(),
            y_label: "p_y (m)".into(),
            series,
            spans: vec![],
        },
    ));
    out
}

/// Writes the seven SVG files into `outdir` and returns their paths.
pub fn render_plots(trace: &SimulationTrace, windows: &[Window], outdir: &Path) -> Result<Vec<PathBuf>> {
    if trace.is_empty() {
        return Err(HarnessError::invalid("trace", "cannot plot an empty trace"));
    }
    std::fs::create_dir_all(outdir).map_err(|e| HarnessError::io(outdir, e))?;
    figures(trace, windows)
        .into_iter()
        .map(|(name, fig)| {
            let path = outdir.join(name);
            std::fs::write(&path, fig.to_svg()).map_err(|e| HarnessError::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_margins() {
        let a = Axis::fit([0.0, 10.0].into_iter());
        assert_eq!(a, Axis { min: -0.5, max: 10.5 });
        let flat = Axis::fit([3.0, 3.0, f64::NAN].into_iter());
        assert_eq!(flat, Axis { min: 2.0, max: 4.0 });
    }

    #[test]
    fn ticks_inside_axis() {
        let a = Axis { min: -0.5, max: 70.5 };
        let t = a.ticks();
        assert!(t.len() >= 3 && t.len() <= 11);
        assert!(t.iter().all(|v| *v >= a.min && *v <= a.max));
    }

    #[test]
    fn nan_splits_polyline() {
        let fig = Figure {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![Series {
                label: "s".into(),
                color: "black",
                points: vec![(0.0, 0.0), (1.0, 1.0), (2.0, f64::NAN), (3.0, 0.0), (4.0, 1.0)],
            }],
            spans: vec![(1.0, 2.0)],
        };
        let svg = fig.to_svg();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches(r#"class="outlier""#).count(), 1);
        assert_eq!(svg, fig.to_svg());
    }
}
