//! Experiment and certification configs.
//!
//! Both are TOML documents. Every key is optional except where noted; unknown
//! keys are rejected. Defaults reproduce the localization experiment. See
//! `configs/paper.cfg` and `configs/linear.cfg` for annotated examples.

use std::path::{Path, PathBuf};

use isekf::scenario::{
    FilterSpec, InputProfile, OutlierKind, OutlierSchedule, OutlierSegment, RobotState, ScenarioConfig,
};
use isekf::stability::{BoundCheckSpec, CertificateCandidate, CertifyOptions, LinearSystem};
use isekf::{BoundParams, TimeMode};
use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::error::{HarnessError, Result};

pub const FILTER_LABELS: [&str; 3] = ["is-ekf", "ekf", "lsigma-ekf"];

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seed used when none is given on the command line.
    pub seed: u64,
    pub scenario: ScenarioSection,
    pub filters: FiltersSection,
    pub metrics: MetricsSection,
    pub output: OutputSection,
    pub batch: BatchSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            scenario: ScenarioSection::default(),
            filters: FiltersSection::default(),
            metrics: MetricsSection::default(),
            output: OutputSection::default(),
            batch: BatchSection::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub horizon: usize,
    pub dt: f64,
    pub process_std: [f64; 3],
    pub measurement_std: [f64; 3],
    pub initial_truth: [f64; 3],
    pub initial_offset: [f64; 3],
    pub input: InputSection,
    /// `"four-stage"`, `"none"` or `"custom"` (uses `stage`).
    pub schedule: String,
    pub zeta_range: [f64; 2],
    pub stage: Vec<StageSection>,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        let d = ScenarioConfig::default();
        Self {
            horizon: d.horizon,
            dt: d.dt,
            process_std: d.process_std,
            measurement_std: d.measurement_std,
            initial_truth: [d.initial_truth.px, d.initial_truth.py, d.initial_truth.theta],
            initial_offset: d.initial_offset,
            input: InputSection::default(),
            schedule: "four-stage".into(),
            zeta_range: [0.0, 1.0],
            stage: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct InputSection {
    pub speed: f64,
    pub turn_amplitude: f64,
    pub turn_frequency: f64,
}

impl Default for InputSection {
    fn default() -> Self {
        let d = InputProfile::default();
        Self {
            speed: d.speed,
            turn_amplitude: d.turn_amplitude,
            turn_frequency: d.turn_frequency,
        }
    }
}

/// One custom outlier stage, active on `start < k <= end`.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub start: usize,
    pub end: usize,
    /// `"constant"` (value is the outlier) or `"uniform"` (value is the
    /// diagonal scale of a uniform random vector).
    pub kind: String,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FiltersSection {
    pub enabled: Vec<String>,
    /// Diagonal of the initial covariance shared by all filters.
    pub p0: [f64; 3],
    #[serde(rename = "is-ekf")]
    pub is_ekf: IsEkfSection,
    #[serde(rename = "lsigma-ekf")]
    pub lsigma_ekf: LsigmaSection,
}

impl Default for FiltersSection {
    fn default() -> Self {
        Self {
            enabled: FILTER_LABELS.iter().map(|s| s.to_string()).collect(),
            p0: [1.0; 3],
            is_ekf: IsEkfSection::default(),
            lsigma_ekf: LsigmaSection::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct IsEkfSection {
    pub lambda1: [f64; 3],
    pub lambda2: [f64; 3],
    pub gamma1: [f64; 3],
    pub gamma2: [f64; 3],
    pub sigma0: [f64; 3],
    pub epsilon0: [f64; 3],
}

impl Default for IsEkfSection {
    fn default() -> Self {
        Self {
            lambda1: [0.5, 0.5, 0.1],
            lambda2: [0.1, 0.1, 0.1],
            gamma1: [100.0, 100.0, 0.005],
            gamma2: [9.0, 9.0, 9.0],
            sigma0: [1.0; 3],
            epsilon0: [1.0; 3],
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LsigmaSection {
    pub ell: f64,
}

impl Default for LsigmaSection {
    fn default() -> Self {
        Self { ell: 3.0 }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// A filter whose position error ever exceeds this (m) is flagged divergent.
    pub divergence_threshold: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            divergence_threshold: 20.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub csv: bool,
    pub svg: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            csv: true,
            svg: true,
        }
    }
}

/// Seeds used by the `sweep` command: `first_seed .. first_seed + count`.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BatchSection {
    pub first_seed: u64,
    pub count: u64,
    /// Worker threads; 0 picks the available parallelism.
    pub threads: usize,
}

impl Default for BatchSection {
    fn default() -> Self {
        Self {
            first_seed: 1,
            count: 20,
            threads: 0,
        }
    }
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    parse_toml(&text, path)
}

fn parse_toml<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    toml::from_str(text).map_err(|e| HarnessError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Reads and validates an experiment config.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = read_toml(path)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Same as [`parse_config`] for in-memory text.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = parse_toml(text, Path::new("<inline>"))?;
    cfg.validate()?;
    Ok(cfg)
}

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario_config()?;
        self.filter_specs()?;
        if !(self.metrics.divergence_threshold > 0.0) {
            return Err(HarnessError::invalid("metrics.divergence_threshold", "must be > 0"));
        }
        if self.batch.count == 0 {
            return Err(HarnessError::invalid("batch.count", "must be >= 1"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<OutlierSchedule> {
        let s = &self.scenario;
        let zeta = (s.zeta_range[0], s.zeta_range[1]);
        let field = |name: &str| format!("scenario.{name}");
        match s.schedule.as_str() {
            "four-stage" | "none" if !s.stage.is_empty() => Err(HarnessError::invalid(
                field("stage"),
                "stages are only allowed with schedule = \"custom\"",
            )),
            "four-stage" => {
                let p = OutlierSchedule::four_stage();
                OutlierSchedule::new(p.segments().to_vec(), p.d_map().clone(), zeta)
                    .map_err(|e| HarnessError::invalid(field("zeta_range"), e))
            }
            "none" => Ok(OutlierSchedule::none(OutlierSchedule::robot_d_map())),
            "custom" => {
                let mut segments = Vec::with_capacity(s.stage.len());
                for (i, st) in s.stage.iter().enumerate() {
                    if st.value.len() != 2 {
                        return Err(HarnessError::invalid(
                            format!("scenario.stage[{i}].value"),
                            "needs 2 entries (GPS-x, compass)",
                        ));
                    }
                    let kind = match st.kind.as_str() {
                        "constant" => OutlierKind::Constant(dv(&st.value)),
                        "uniform" => OutlierKind::Uniform(DMatrix::from_diagonal(&dv(&st.value))),
                        other => {
                            return Err(HarnessError::invalid(
                                format!("scenario.stage[{i}].kind"),
                                format!("unknown kind {other:?}, expected \"constant\" or \"uniform\""),
                            ))
                        }
                    };
                    segments.push(OutlierSegment { start: st.start, end: st.end, kind });
                }
                OutlierSchedule::new(segments, OutlierSchedule::robot_d_map(), zeta)
                    .map_err(|e| HarnessError::invalid(field("stage"), e))
            }
            other => Err(HarnessError::invalid(
                field("schedule"),
                format!("unknown schedule {other:?}, expected \"four-stage\", \"none\" or \"custom\""),
            )),
        }
    }

    pub fn scenario_config(&self) -> Result<ScenarioConfig> {
        let s = &self.scenario;
        let cfg = ScenarioConfig {
            horizon: s.horizon,
            dt: s.dt,
            process_std: s.process_std,
            measurement_std: s.measurement_std,
            input: InputProfile {
                speed: s.input.speed,
                turn_amplitude: s.input.turn_amplitude,
                turn_frequency: s.input.turn_frequency,
            },
            schedule: self.schedule()?,
            initial_truth: RobotState::new(s.initial_truth[0], s.initial_truth[1], s.initial_truth[2]),
            initial_offset: s.initial_offset,
            p0: DMatrix::from_diagonal(&dv(&self.filters.p0)),
        };
        if !(s.dt > 0.0) {
            return Err(HarnessError::invalid("scenario.dt", "must be > 0"));
        }
        if s.process_std.iter().any(|v| !(*v >= 0.0)) {
            return Err(HarnessError::invalid("scenario.process_std", "must be >= 0"));
        }
        if s.measurement_std.iter().any(|v| !(*v > 0.0)) {
            return Err(HarnessError::invalid("scenario.measurement_std", "must be > 0"));
        }
        if self.filters.p0.iter().any(|v| !(*v >= 0.0)) {
            return Err(HarnessError::invalid("filters.p0", "must be >= 0"));
        }
        cfg.validate().map_err(|e| HarnessError::invalid("scenario", e))?;
        Ok(cfg)
    }

    pub fn bound_params(&self) -> Result<BoundParams> {
        let f = &self.filters.is_ekf;
        BoundParams::new(
            TimeMode::Discrete,
            dv(&f.lambda1),
            dv(&f.lambda2),
            dv(&f.gamma1),
            dv(&f.gamma2),
            dv(&f.sigma0),
            dv(&f.epsilon0),
        )
        .map_err(|e| {
            let msg = e.to_string();
            let key = ["lambda1", "lambda2", "gamma1", "gamma2", "sigma0", "epsilon0", "sigma", "epsilon"]
                .into_iter()
                .find(|k| msg.contains(k))
                .map(|k| match k {
                    "sigma" => "sigma0",
                    "epsilon" => "epsilon0",
                    other => other,
                })
                .unwrap_or("parameters");
            HarnessError::invalid(format!("filters.is-ekf.{key}"), msg)
        })
    }

    /// Filters in the order given by `filters.enabled`.
    pub fn filter_specs(&self) -> Result<Vec<FilterSpec>> {
        let mut out = Vec::new();
        for name in &self.filters.enabled {
            let spec = match name.as_str() {
                "is-ekf" => FilterSpec::IsEkf(self.bound_params()?),
                "ekf" => FilterSpec::Ekf,
                "lsigma-ekf" => {
                    let ell = self.filters.lsigma_ekf.ell;
                    if !(ell > 0.0) || !ell.is_finite() {
                        return Err(HarnessError::invalid("filters.lsigma-ekf.ell", "must be > 0"));
                    }
                    FilterSpec::SigmaGate { ell }
                }
                other => {
                    return Err(HarnessError::invalid(
                        "filters.enabled",
                        format!("unknown filter {other:?}, expected one of {FILTER_LABELS:?}"),
                    ))
                }
            };
            if out.iter().any(|s: &FilterSpec| s.label() == spec.label()) {
                return Err(HarnessError::invalid("filters.enabled", format!("{name} listed twice")));
            }
            out.push(spec);
        }
        Ok(out)
    }
}

/// Linear system, bound parameters and candidate for `certify`.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CertifyConfig {
    pub system: SystemSection,
    pub bounds: BoundsSection,
    pub candidate: CandidateSection,
    /// Bound on the outlier norm.
    pub mu: f64,
    #[serde(default = "default_checkpoints")]
    pub checkpoints: usize,
    #[serde(default)]
    pub check: Option<CheckSection>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

fn default_checkpoints() -> usize {
    CertifyOptions::default().checkpoints
}

/// Matrices are lists of rows.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    /// `"continuous"` or `"discrete"`.
    pub mode: String,
    pub a: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
}

/// Per-channel bound parameters; `sigma0`/`epsilon0` default to 1.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BoundsSection {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub gamma1: Vec<f64>,
    pub gamma2: Vec<f64>,
    #[serde(default)]
    pub sigma0: Option<Vec<f64>>,
    #[serde(default)]
    pub epsilon0: Option<Vec<f64>>,
}

/// `gamma2` is taken from `[bounds]`.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CandidateSection {
    /// Diagonal of `W`.
    pub w: Vec<f64>,
    pub u: Vec<Vec<f64>>,
    pub alpha: f64,
    pub p0: Vec<Vec<f64>>,
}

/// Optional simulation of the error system against the bound, driven by a
/// constant outlier of norm `mu` along the first outlier channel.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CheckSection {
    pub e0: Vec<f64>,
    pub horizon: f64,
    #[serde(default = "default_ct_step")]
    pub ct_step: f64,
}

fn default_ct_step() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub w_grid: Vec<f64>,
    pub u_grid: Vec<f64>,
}

fn matrix(field: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(HarnessError::invalid(field, "rows have different lengths"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// A certification problem built from a [`CertifyConfig`].
#[derive(Debug, Clone)]
pub struct CertifyProblem {
    pub system: LinearSystem,
    pub params: BoundParams,
    pub candidate: CertificateCandidate,
    pub mu: f64,
    pub options: CertifyOptions,
    pub check: Option<BoundCheckSpec>,
    pub sweep: Option<SweepSection>,
}

pub fn parse_certify_config(path: &Path) -> Result<CertifyProblem> {
    read_toml::<CertifyConfig>(path)?.problem()
}

pub fn parse_certify_config_str(text: &str) -> Result<CertifyProblem> {
    parse_toml::<CertifyConfig>(text, Path::new("<inline>"))?.problem()
}

impl CertifyConfig {
    pub fn problem(&self) -> Result<CertifyProblem> {
        let mode = match self.system.mode.as_str() {
            "continuous" => TimeMode::Continuous,
            "discrete" => TimeMode::Discrete,
            other => {
                return Err(HarnessError::invalid(
                    "system.mode",
                    format!("{other:?}, expected \"continuous\" or \"discrete\""),
                ))
            }
        };
        let s = &self.system;
        let system = LinearSystem::new(
            mode,
            matrix("system.a", &s.a)?,
            matrix("system.c", &s.c)?,
            matrix("system.q", &s.q)?,
            matrix("system.r", &s.r)?,
            matrix("system.d", &s.d)?,
        )
        .map_err(|e| HarnessError::invalid("system", e))?;
        let b = &self.bounds;
        let p = b.lambda1.len();
        let ones = vec![1.0; p];
        let params = BoundParams::new(
            mode,
            dv(&b.lambda1),
            dv(&b.lambda2),
            dv(&b.gamma1),
            dv(&b.gamma2),
            dv(b.sigma0.as_deref().unwrap_or(&ones)),
            dv(b.epsilon0.as_deref().unwrap_or(&ones)),
        )
        .map_err(|e| HarnessError::invalid("bounds", e))?;
        let c = &self.candidate;
        let candidate = CertificateCandidate {
            w: DMatrix::from_diagonal(&dv(&c.w)),
            u: matrix("candidate.u", &c.u)?,
            alpha: c.alpha,
            gamma2: DMatrix::from_diagonal(&dv(&b.gamma2)),
            p0: matrix("candidate.p0", &c.p0)?,
        };
        candidate
            .validate(&system)
            .map_err(|e| HarnessError::invalid("candidate", e))?;
        if !(self.mu >= 0.0) {
            return Err(HarnessError::invalid("mu", "must be >= 0"));
        }
        if self.checkpoints == 0 {
            return Err(HarnessError::invalid("checkpoints", "must be >= 1"));
        }
        let check = self.check.as_ref().map(|c| BoundCheckSpec {
            e0: dv(&c.e0),
            horizon: c.horizon,
            ct_step: c.ct_step,
        });
        Ok(CertifyProblem {
            system,
            params,
            candidate,
            mu: self.mu,
            options: CertifyOptions {
                checkpoints: self.checkpoints,
                ..CertifyOptions::default()
            },
            check,
            sweep: self.sweep.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.filter_specs().unwrap().len(), 3);
    }

    #[test]
    fn missing_gamma2_defaults() {
        let cfg = parse_config_str("[filters.is-ekf]\nlambda1 = [0.4, 0.4, 0.2]\n").unwrap();
        assert_eq!(cfg.filters.is_ekf.gamma2, [9.0, 9.0, 9.0]);
        assert_eq!(cfg.filters.is_ekf.lambda1, [0.4, 0.4, 0.2]);
    }

    #[test]
    fn lambda_out_of_range_names_field() {
        let err = parse_config_str("[filters.is-ekf]\nlambda1 = [1.5, 0.5, 0.1]\n").unwrap_err();
        match err {
            HarnessError::Validation { field, .. } => assert_eq!(field, "filters.is-ekf.lambda1"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let err = parse_config_str("seed = 3\n[scenario]\nhorizonn = 5\n").unwrap_err();
        match err {
            HarnessError::Parse { message, .. } => {
                assert!(message.contains("horizonn"), "{message}");
                assert!(message.contains("line 3"), "{message}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_filter_rejected() {
        let err = parse_config_str("[filters]\nenabled = [\"ukf\"]\n").unwrap_err();
        assert!(matches!(err, HarnessError::Validation { ref field, .. } if field == "filters.enabled"));
    }

    #[test]
    fn custom_schedule() {
        let text = r#"
[scenario]
schedule = "custom"
[[scenario.stage]]
start = 10
end = 20
kind = "constant"
value = [1.0, 0.0]
"#;
        let cfg = parse_config_str(text).unwrap();
        let sched = cfg.schedule().unwrap();
        assert_eq!(sched.segments().len(), 1);
        assert!(parse_config_str(&text.replace("constant", "spike")).is_err());
    }

    #[test]
    fn certify_config_roundtrip() {
        let text = r#"
mu = 1.0
[system]
mode = "discrete"
a = [[0.5]]
c = [[1.0]]
q = [[0.01]]
r = [[10.0]]
d = [[1.0]]
[bounds]
lambda1 = [0.5]
lambda2 = [0.5]
gamma1 = [1.0]
gamma2 = [0.01]
[candidate]
w = [10.0]
u = [[100.0]]
alpha = 0.01
p0 = [[0.01]]
"#;
        let prob = parse_certify_config_str(text).unwrap();
        assert_eq!(prob.candidate.gamma2[(0, 0)], 0.01);
        assert_eq!(prob.options.checkpoints, 50);
        assert!(parse_certify_config_str(&text.replace("discrete", "hybrid")).is_err());
    }
}
