//! Unicycle localization testbed: truth propagation, a staged outlier
//! schedule on the GPS-x and compass channels, and lock-step simulation of
//! several filters on one seeded realization.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::filters::{update_with, dt_predict, Correction, FilterState, SystemModel};
use crate::linalg;
use crate::saturation::{BoundParams, TimeMode};

pub use crate::filters::wrap_angle;

const PROCESS_STREAM: u64 = 1;
const MEASUREMENT_STREAM: u64 = 2;
const OUTLIER_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotState {
    pub px: f64,
    pub py: f64,
    /// Heading in `(-pi, pi]`.
    pub theta: f64,
}

impl RobotState {
    pub fn new(px: f64, py: f64, theta: f64) -> Self {
        Self { px, py, theta: wrap_angle(theta) }
    }

    pub fn to_vector(self) -> DVector<f64> {
        DVector::from_vec(vec![self.px, self.py, self.theta])
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotInput {
    /// Forward speed, m/s.
    pub speed: f64,
    /// Heading rate, rad/s.
    pub turn_rate: f64,
}

/// Exact one-step unicycle map with the heading wrapped into `(-pi, pi]`.
pub fn robot_step(s: RobotState, u: RobotInput, dt: f64) -> RobotState {
    RobotState::new(
        s.px + u.speed * dt * s.theta.cos(),
        s.py + u.speed * dt * s.theta.sin(),
        s.theta + dt * u.turn_rate,
    )
}

/// `speed` constant, `turn_rate(k) = amplitude * sin(frequency * k)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputProfile {
    pub speed: f64,
    pub turn_amplitude: f64,
    pub turn_frequency: f64,
}

impl Default for InputProfile {
    fn default() -> Self {
        Self {
            speed: 1.0,
            turn_amplitude: 0.1,
            turn_frequency: 0.02,
        }
    }
}

impl InputProfile {
    /// Input applied on the transition from step `k` to `k + 1`.
    pub fn input_at(&self, k: usize) -> RobotInput {
        RobotInput {
            speed: self.speed,
            turn_rate: self.turn_amplitude * (self.turn_frequency * k as f64).sin(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OutlierKind {
    Constant(DVector<f64>),
    /// `scale * zeta` with `zeta` drawn fresh every step, uniform per component.
    Uniform(DMatrix<f64>),
}

/// Active on steps `start < k <= end`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierSegment {
    pub start: usize,
    pub end: usize,
    pub kind: OutlierKind,
}

impl OutlierSegment {
    pub fn contains(&self, k: usize) -> bool {
        k > self.start && k <= self.end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierSchedule {
    segments: Vec<OutlierSegment>,
    /// Routes outlier channels to measurement channels (`p x m`).
    d_map: DMatrix<f64>,
    /// Support `[lo, hi]` of each `zeta` component.
    zeta_range: (f64, f64),
}

impl OutlierSchedule {
    /// Segments are sorted by start; overlapping ranges are rejected.
    pub fn new(mut segments: Vec<OutlierSegment>, d_map: DMatrix<f64>, zeta_range: (f64, f64)) -> Result<Self> {
        let m = d_map.ncols();
        segments.sort_by_key(|s| s.start);
        for s in &segments {
            if s.end <= s.start {
                return Err(Error::InputDomain(format!("empty outlier segment ({}, {}]", s.start, s.end)));
            }
            match &s.kind {
                OutlierKind::Constant(v) => check_dim("outlier value", m, v.len())?,
                OutlierKind::Uniform(scale) => {
                    check_dim("outlier scale rows", m, scale.nrows())?;
                    check_dim("outlier scale cols", m, scale.ncols())?;
                }
            }
        }
        for w in segments.windows(2) {
            if w[1].start < w[0].end {
                return Err(Error::InputDomain(format!(
                    "outlier segments ({}, {}] and ({}, {}] overlap",
                    w[0].start, w[0].end, w[1].start, w[1].end
                )));
            }
        }
        if !(zeta_range.0 <= zeta_range.1) {
            return Err(Error::InputDomain("zeta range must satisfy lo <= hi".into()));
        }
        Ok(Self { segments, d_map, zeta_range })
    }

    /// No outliers at all.
    pub fn none(d_map: DMatrix<f64>) -> Self {
        Self { segments: Vec::new(), d_map, zeta_range: (0.0, 1.0) }
    }

    /// Corrupts GPS-x and compass: a small constant, small random, a large
    /// constant and a large random stage.
    pub fn four_stage() -> Self {
        let seg = |start, end, kind| OutlierSegment { start, end, kind };
        let v = |a: f64, b: f64| DVector::from_vec(vec![a, b]);
        Self::new(
            vec![
                seg(150, 200, OutlierKind::Constant(v(5.0, 1.0))),
                seg(350, 400, OutlierKind::Uniform(linalg::diag(&[2.0, 2.0]))),
                seg(450, 500, OutlierKind::Constant(v(100.0, 50.0))),
                seg(550, 600, OutlierKind::Uniform(linalg::diag(&[100.0, 50.0]))),
            ],
            Self::robot_d_map(),
            (0.0, 1.0),
        )
        .expect("built-in schedule is valid")
    }

    /// Outlier channel 1 to the x measurement, channel 2 to the heading.
    pub fn robot_d_map() -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0])
    }

    pub fn segments(&self) -> &[OutlierSegment] {
        &self.segments
    }

    pub fn d_map(&self) -> &DMatrix<f64> {
        &self.d_map
    }

    pub fn outlier_dim(&self) -> usize {
        self.d_map.ncols()
    }

    pub fn zeta_range(&self) -> (f64, f64) {
        self.zeta_range
    }

    pub fn outlier_at<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> DVector<f64> {
        let m = self.outlier_dim();
        match self.segments.iter().find(|s| s.contains(k)) {
            None => DVector::zeros(m),
            Some(OutlierSegment { kind: OutlierKind::Constant(v), .. }) => v.clone(),
            Some(OutlierSegment { kind: OutlierKind::Uniform(scale), .. }) => {
                let (lo, hi) = self.zeta_range;
                let zeta = DVector::from_fn(m, |_, _| if hi > lo { rng.random_range(lo..hi) } else { lo });
                scale * zeta
            }
        }
    }
}

/// Gaussian draw with covariance `chol_factor * chol_factor'`.
fn gaussian<R: Rng + ?Sized>(chol_factor: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let z = DVector::from_fn(chol_factor.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
    chol_factor * z
}

/// `y = (px, py, theta) + D d + v`, `v ~ N(0, R)` given `R`'s Cholesky factor.
/// Returns `(y, d)`; the heading entry of `y` is not wrapped.
pub fn measure<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    s: RobotState,
    schedule: &OutlierSchedule,
    k: usize,
    noise_factor: &DMatrix<f64>,
    noise_rng: &mut R1,
    outlier_rng: &mut R2,
) -> (DVector<f64>, DVector<f64>) {
    let d = schedule.outlier_at(k, outlier_rng);
    let y = s.to_vector() + schedule.d_map() * &d + gaussian(noise_factor, noise_rng);
    (y, d)
}

/// Filter-side unicycle model with the input for the current transition.
#[derive(Debug, Clone)]
pub struct RobotModel {
    pub dt: f64,
    pub input: RobotInput,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl RobotModel {
    pub fn new(dt: f64, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InputDomain(format!("sampling period {dt} must be > 0")));
        }
        check_dim("robot Q", 3, q.nrows())?;
        check_dim("robot R", 3, r.nrows())?;
        Ok(Self {
            dt,
            input: RobotInput { speed: 0.0, turn_rate: 0.0 },
            q,
            r,
        })
    }
}

impl SystemModel for RobotModel {
    fn state_dim(&self) -> usize {
        3
    }
    fn measurement_dim(&self) -> usize {
        3
    }
    fn transition(&self, x: &DVector<f64>) -> DVector<f64> {
        robot_step(RobotState::from_vector(x), self.input, self.dt).to_vector()
    }
    fn measure(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }
    fn process_noise(&self) -> &DMatrix<f64> {
        &self.q
    }
    fn measurement_noise(&self) -> &DMatrix<f64> {
        &self.r
    }
    fn transition_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let v = self.input.speed * self.dt;
        let (s, c) = x[2].sin_cos();
        Ok(DMatrix::from_row_slice(3, 3, &[1.0, 0.0, -v * s, 0.0, 1.0, v * c, 0.0, 0.0, 1.0]))
    }
    fn measurement_jacobian(&self, _x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(DMatrix::identity(3, 3))
    }
    fn angle_channels(&self) -> &[usize] {
        &[2]
    }
    fn normalize_state(&self, x: &mut DVector<f64>) {
        x[2] = wrap_angle(x[2]);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FilterSpec {
    IsEkf(BoundParams),
    Ekf,
    SigmaGate { ell: f64 },
}

impl FilterSpec {
    pub fn label(&self) -> &'static str {
        match self {
            FilterSpec::IsEkf(_) => "is-ekf",
            FilterSpec::Ekf => "ekf",
            FilterSpec::SigmaGate { .. } => "lsigma-ekf",
        }
    }

    fn correction(&self) -> Correction<'_> {
        match self {
            FilterSpec::IsEkf(p) => Correction::Saturated(p),
            FilterSpec::Ekf => Correction::Raw,
            FilterSpec::SigmaGate { ell } => Correction::Gated { ell: *ell },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    /// Last step index; steps `0..=horizon` are simulated.
    pub horizon: usize,
    pub dt: f64,
    /// Per-step process noise std on (px, py, theta).
    pub process_std: [f64; 3],
    /// Measurement noise std on (GPS x, GPS y, compass).
    pub measurement_std: [f64; 3],
    pub input: InputProfile,
    pub schedule: OutlierSchedule,
    pub initial_truth: RobotState,
    /// Initial estimate minus initial truth.
    pub initial_offset: [f64; 3],
    /// Initial covariance, i.e. the prior before the step-0 measurement.
    pub p0: DMatrix<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            horizon: 700,
            dt: 0.1,
            process_std: [0.005, 0.005, 0.02],
            measurement_std: [0.5, 0.5, 0.35],
            input: InputProfile::default(),
            schedule: OutlierSchedule::four_stage(),
            initial_truth: RobotState::new(0.0, 0.0, 0.0),
            initial_offset: [1.0, 1.0, 0.1],
            p0: DMatrix::identity(3, 3),
        }
    }
}

impl ScenarioConfig {
    pub fn process_noise(&self) -> DMatrix<f64> {
        linalg::diag(&self.process_std.map(|s| s * s))
    }

    pub fn measurement_noise(&self) -> DMatrix<f64> {
        linalg::diag(&self.measurement_std.map(|s| s * s))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::InputDomain(format!("dt = {} must be > 0", self.dt)));
        }
        if self.process_std.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::InputDomain("process noise std must be >= 0".into()));
        }
        if self.measurement_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InputDomain("measurement noise std must be > 0".into()));
        }
        check_dim("schedule measurement channels", 3, self.schedule.d_map().nrows())?;
        check_dim("initial covariance", 3, self.p0.nrows())?;
        FilterState::new(DVector::zeros(3), self.p0.clone()).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterRecord {
    /// `None` once the filter has failed.
    pub estimate: Option<DVector<f64>>,
    /// Per-channel clip levels `sqrt(sigma)` (saturated filters only).
    pub bounds: Option<DVector<f64>>,
    /// Wall-clock spent in this step's predict + update.
    pub step_nanos: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub t: f64,
    pub truth: RobotState,
    /// Input applied on the transition into this step (zero at `k = 0`).
    pub input: RobotInput,
    pub d: DVector<f64>,
    pub y: DVector<f64>,
    pub filters: Vec<FilterRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterFailure {
    pub filter: usize,
    pub k: usize,
    pub error: Error,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub dt: f64,
    pub filter_labels: Vec<String>,
    pub records: Vec<StepRecord>,
    pub failures: Vec<FilterFailure>,
}

impl SimulationTrace {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn filter_index(&self, label: &str) -> Option<usize> {
        self.filter_labels.iter().position(|l| l == label)
    }
}

/// Seeded lock-step simulation of truth, measurements and every filter.
///
/// Process noise, measurement noise and outliers draw from three independent
/// streams of one seed, so changing the filter set never changes the data.
/// Each filter starts from `truth + initial_offset` with covariance `p0` and
/// is corrected by the step-0 measurement before its first prediction. A
/// filter that fails is recorded and dropped for the remaining steps.
/// `horizon = 0` yields an empty trace.
pub fn simulate(cfg: &ScenarioConfig, filters: &[FilterSpec], seed: u64) -> Result<SimulationTrace> {
    cfg.validate()?;
    for f in filters {
        if let FilterSpec::IsEkf(p) = f {
            if p.mode() != TimeMode::Discrete || p.channels() != 3 {
                return Err(Error::InputDomain("robot IS-EKF needs 3 discrete-time bound channels".into()));
            }
        }
    }
    let mut trace = SimulationTrace {
        dt: cfg.dt,
        filter_labels: filters.iter().map(|f| f.label().to_string()).collect(),
        records: Vec::new(),
        failures: Vec::new(),
    };
    if cfg.horizon == 0 {
        return Ok(trace);
    }

    let stream = |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s);
        rng
    };
    let mut process_rng = stream(PROCESS_STREAM);
    let mut noise_rng = stream(MEASUREMENT_STREAM);
    let mut outlier_rng = stream(OUTLIER_STREAM);
    let process_factor = linalg::diag(&cfg.process_std);
    let noise_factor = linalg::diag(&cfg.measurement_std);

    let mut model = RobotModel::new(cfg.dt, cfg.process_noise(), cfg.measurement_noise())?;
    let guess = cfg.initial_truth.to_vector() + DVector::from_column_slice(&cfg.initial_offset);
    let mut states: Vec<Option<FilterState>> = filters
        .iter()
        .map(|f| {
            let st = FilterState::new(guess.clone(), cfg.p0.clone())?;
            Ok(Some(match f {
                FilterSpec::IsEkf(p) => st.with_saturation(p.initial_state()),
                _ => st,
            }))
        })
        .collect::<Result<_>>()?;

    let mut truth = cfg.initial_truth;
    let mut input = RobotInput { speed: 0.0, turn_rate: 0.0 };
    for k in 0..=cfg.horizon {
        if k > 0 {
            input = cfg.input.input_at(k - 1);
            let w = gaussian(&process_factor, &mut process_rng);
            let next = robot_step(truth, input, cfg.dt);
            truth = RobotState::new(next.px + w[0], next.py + w[1], next.theta + w[2]);
        }
        let (y, d) = measure(truth, &cfg.schedule, k, &noise_factor, &mut noise_rng, &mut outlier_rng);
        model.input = input;

        let mut records = Vec::with_capacity(filters.len());
        for (i, (spec, slot)) in filters.iter().zip(states.iter_mut()).enumerate() {
            let Some(st) = slot.as_ref() else {
                records.push(FilterRecord { estimate: None, bounds: None, step_nanos: 0 });
                continue;
            };
            let start = Instant::now();
            let result = if k == 0 {
                update_with(&model, st, &y, spec.correction())
            } else {
                dt_predict(&model, st).and_then(|pred| update_with(&model, &pred, &y, spec.correction()))
            };
            let step_nanos = start.elapsed().as_nanos() as u64;
            match result {
                Ok(out) => {
                    records.push(FilterRecord {
                        estimate: Some(out.state.x.clone()),
                        bounds: out.state.sat.as_ref().map(|s| s.bounds()),
                        step_nanos,
                    });
                    *slot = Some(out.state);
                }
                Err(error) => {
                    log::warn!("filter {} failed at step {k}: {error}", spec.label());
                    trace.failures.push(FilterFailure { filter: i, k, error });
                    records.push(FilterRecord { estimate: None, bounds: None, step_nanos });
                    *slot = None;
                }
            }
        }
        trace.records.push(StepRecord {
            k,
            t: k as f64 * cfg.dt,
            truth,
            input,
            d,
            y,
            filters: records,
        });
    }
    Ok(trace)
}
