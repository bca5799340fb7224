//! Error statistics over a simulation trace.

use isekf::filters::wrap_angle;
use isekf::scenario::{OutlierSchedule, SimulationTrace};
use isekf::Error;

/// Inclusive step range `first..=last`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub name: String,
    pub first: usize,
    pub last: usize,
}

impl Window {
    pub fn new(name: impl Into<String>, first: usize, last: usize) -> Self {
        Self {
            name: name.into(),
            first,
            last,
        }
    }

    /// The steps of an outlier segment `start < k <= end`.
    pub fn stage(name: impl Into<String>, start: usize, end: usize) -> Self {
        Self::new(name, start + 1, end)
    }

    pub fn contains(&self, k: usize) -> bool {
        (self.first..=self.last).contains(&k)
    }

    pub fn len(&self) -> usize {
        (self.last + 1).saturating_sub(self.first)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Outlier stages `stage1, stage2, ...` in schedule order.
pub fn stage_windows(schedule: &OutlierSchedule) -> Vec<Window> {
    schedule
        .segments()
        .iter()
        .enumerate()
        .map(|(i, s)| Window::stage(format!("stage{}", i + 1), s.start, s.end))
        .collect()
}

/// Stages interleaved with the outlier-free gaps so the windows tile
/// `0..=horizon` without overlap. Gaps are named `clean1, clean2, ...`.
pub fn partition_windows(schedule: &OutlierSchedule, horizon: usize) -> Vec<Window> {
    let mut out = Vec::new();
    let mut next = 0usize;
    let mut gap = 0usize;
    for w in stage_windows(schedule) {
        if w.first > horizon {
            break;
        }
        if w.first > next {
            gap += 1;
            out.push(Window::new(format!("clean{gap}"), next, w.first - 1));
        }
        let last = w.last.min(horizon);
        out.push(Window::new(w.name, w.first, last));
        next = last + 1;
    }
    if next <= horizon {
        gap += 1;
        out.push(Window::new(format!("clean{gap}"), next, horizon));
    }
    out
}

/// Per-component estimation errors `x_hat - truth` of one filter, heading
/// wrapped. `None` where the filter has failed.
pub fn errors(trace: &SimulationTrace, filter: usize) -> Vec<Option<[f64; 3]>> {
    trace
        .records
        .iter()
        .map(|rec| {
            rec.filters[filter].estimate.as_ref().map(|x| {
                [
                    x[0] - rec.truth.px,
                    x[1] - rec.truth.py,
                    wrap_angle(x[2] - rec.truth.theta),
                ]
            })
        })
        .collect()
}

/// Mean squared error per component over `window` (whole trace if `None`).
pub fn mean_squared_error(
    trace: &SimulationTrace,
    filter: &str,
    window: Option<&Window>,
) -> isekf::Result<[f64; 3]> {
    let idx = trace
        .filter_index(filter)
        .ok_or_else(|| Error::UndefinedMetric(format!("filter {filter:?} not in trace")))?;
    let mut sum = [0.0; 3];
    let mut count = 0usize;
    for (rec, err) in trace.records.iter().zip(errors(trace, idx)) {
        if window.is_some_and(|w| !w.contains(rec.k)) {
            continue;
        }
        let e = err.ok_or_else(|| {
            Error::UndefinedMetric(format!("filter {filter:?} has no estimate at step {}", rec.k))
        })?;
        for i in 0..3 {
            sum[i] += e[i] * e[i];
        }
        count += 1;
    }
    if count == 0 {
        let name = window.map_or("full horizon", |w| w.name.as_str());
        return Err(Error::UndefinedMetric(format!("window {name} holds no steps")));
    }
    Ok(sum.map(|s| s / count as f64))
}

/// Root-mean-square error per component (`px`, `py`, `theta`).
pub fn rmse(trace: &SimulationTrace, filter: &str, window: Option<&Window>) -> isekf::Result<[f64; 3]> {
    Ok(mean_squared_error(trace, filter, window)?.map(f64::sqrt))
}

/// `sqrt(rmse_x^2 + rmse_y^2)`.
pub fn position_rmse(per_state: &[f64; 3]) -> f64 {
    per_state[0].hypot(per_state[1])
}

/// Largest Euclidean position error of a filter inside `window`.
pub fn max_position_error(trace: &SimulationTrace, filter: &str, window: Option<&Window>) -> isekf::Result<f64> {
    let idx = trace
        .filter_index(filter)
        .ok_or_else(|| Error::UndefinedMetric(format!("filter {filter:?} not in trace")))?;
    let mut best: Option<f64> = None;
    for (rec, err) in trace.records.iter().zip(errors(trace, idx)) {
        if window.is_some_and(|w| !w.contains(rec.k)) {
            continue;
        }
        let e = err.ok_or_else(|| {
            Error::UndefinedMetric(format!("filter {filter:?} has no estimate at step {}", rec.k))
        })?;
        let norm = e[0].hypot(e[1]);
        best = Some(best.map_or(norm, |b: f64| b.max(norm)));
    }
    best.ok_or_else(|| Error::UndefinedMetric("window holds no steps".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowMetrics {
    pub window: Window,
    /// `None` if the filter failed before or inside the window.
    pub rmse: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterMetrics {
    pub label: String,
    pub rmse: Option<[f64; 3]>,
    pub windows: Vec<WindowMetrics>,
    /// Per component over the steps the filter produced.
    pub max_abs_error: [f64; 3],
    pub max_position_error: f64,
    /// Failed, or position error above the divergence threshold.
    pub divergent: bool,
    pub failed_at: Option<usize>,
    pub mean_step_nanos: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub filters: Vec<FilterMetrics>,
}

impl MetricsReport {
    pub fn filter(&self, label: &str) -> Option<&FilterMetrics> {
        self.filters.iter().find(|f| f.label == label)
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    /// Mean wall-clock per step of each filter, one line per filter.
    pub fn render_timing(&self) -> String {
        self.filters
            .iter()
            .map(|f| format!("{}: {:.2} us/step\n", f.label, f.mean_step_nanos / 1e3))
            .collect()
    }

    /// Plain-text table. Timing is left out so the text is deterministic.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for f in &self.filters {
            let fmt = |r: &Option<[f64; 3]>| match r {
                Some(r) => format!("{:.4} {:.4} {:.4} (pos {:.4})", r[0], r[1], r[2], position_rmse(r)),
                None => "n/a".to_string(),
            };
            out.push_str(&format!(
                "{}: rmse {} | max pos err {:.4} | divergent {}\n",
                f.label,
                fmt(&f.rmse),
                f.max_position_error,
                f.divergent,
            ));
            if let Some(k) = f.failed_at {
                out.push_str(&format!("  failed at step {k}\n"));
            }
            for w in &f.windows {
                out.push_str(&format!("  {:<8} [{}, {}] {}\n", w.window.name, w.window.first, w.window.last, fmt(&w.rmse)));
            }
        }
        out
    }
}

/// Full-horizon and per-window statistics of every filter in the trace.
/// Windows are the [`partition_windows`] of `schedule`.
pub fn compute_metrics(trace: &SimulationTrace, schedule: &OutlierSchedule, divergence_threshold: f64) -> MetricsReport {
    let Some(last) = trace.records.last() else {
        return MetricsReport::default();
    };
    let windows = partition_windows(schedule, last.k);
    let filters = trace
        .filter_labels
        .iter()
        .enumerate()
        .map(|(idx, label)| {
            let errs = errors(trace, idx);
            let mut max_abs = [0.0f64; 3];
            let mut max_pos = 0.0f64;
            for e in errs.iter().flatten() {
                for i in 0..3 {
                    max_abs[i] = max_abs[i].max(e[i].abs());
                }
                max_pos = max_pos.max(e[0].hypot(e[1]));
            }
            let failed_at = trace.failures.iter().find(|f| f.filter == idx).map(|f| f.k);
            let produced = errs.iter().filter(|e| e.is_some()).count();
            let nanos: u64 = trace
                .records
                .iter()
                .filter(|r| r.filters[idx].estimate.is_some())
                .map(|r| r.filters[idx].step_nanos)
                .sum();
            FilterMetrics {
                label: label.clone(),
                rmse: rmse(trace, label, None).ok(),
                windows: windows
                    .iter()
                    .map(|w| WindowMetrics {
                        window: w.clone(),
                        rmse: rmse(trace, label, Some(w)).ok(),
                    })
                    .collect(),
                max_abs_error: max_abs,
                max_position_error: max_pos,
                divergent: failed_at.is_some() || max_pos > divergence_threshold,
                failed_at,
                mean_step_nanos: if produced == 0 { 0.0 } else { nanos as f64 / produced as f64 },
            }
        })
        .collect();
    MetricsReport { filters }
}
