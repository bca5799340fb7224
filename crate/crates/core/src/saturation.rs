//! Saturation primitives and the adaptive double-layer bound dynamics.
//!
//! Per measurement channel `i` the bound state is the pair
//! `(sigma_i, epsilon_i)`. The innovation is clipped to `[-sqrt(sigma_i), sqrt(sigma_i)]`.
//!
//! Discrete time (`0 < lambda < 1`):
//!
//! ```text
//! sigma_i[k+1]   = lambda1_i * sigma_i[k]   + gamma1_i * epsilon_i[k] * exp(-epsilon_i[k])
//! epsilon_i[k+1] = lambda2_i * epsilon_i[k] + gamma2_i * innovation_i[k]^2
//! ```
//!
//! Continuous time (`lambda < 0`) uses the same right-hand sides as time
//! derivatives. In both cases the recursion is driven by the raw innovation,
//! never the clipped one.

use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};

/// Upper clamp applied to `epsilon` before evaluating `epsilon * exp(-epsilon)`.
pub const EPSILON_CLAMP: f64 = 1e12;

/// Floor for the discrete recursion; keeps `sigma` and `epsilon` strictly
/// positive when a long run of huge innovations drives `exp(-epsilon)` to zero.
pub const POSITIVITY_FLOOR: f64 = f64::MIN_POSITIVE;

/// `max(-bound, min(bound, r))`.
pub fn saturate(r: f64, bound: f64) -> Result<f64> {
    if !r.is_finite() {
        return Err(Error::InputDomain(format!("saturate: non-finite input {r}")));
    }
    if !(bound >= 0.0) {
        return Err(Error::InputDomain(format!(
            "saturate: bound must be non-negative, got {bound}"
        )));
    }
    Ok(r.clamp(-bound, bound))
}

/// The shaping term `epsilon * exp(-epsilon)`, never above `exp(-1)` for
/// non-negative input.
pub fn shaping(epsilon: f64) -> f64 {
    let e = epsilon.clamp(0.0, EPSILON_CLAMP);
    e * (-e).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TimeMode {
    Continuous,
    Discrete,
}

/// Per-channel bound state.
#[derive(Debug, Clone, PartialEq)]
pub struct SaturationState {
    pub sigma: DVector<f64>,
    pub epsilon: DVector<f64>,
}

impl SaturationState {
    pub fn new(sigma: DVector<f64>, epsilon: DVector<f64>) -> Result<Self> {
        check_dim("saturation state epsilon", sigma.len(), epsilon.len())?;
        if let Some(s) = sigma.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::InputDomain(format!(
                "initial sigma must be positive and finite, got {s}"
            )));
        }
        if let Some(e) = epsilon.iter().find(|e| !(**e > 0.0) || !e.is_finite()) {
            return Err(Error::InputDomain(format!(
                "initial epsilon must be positive and finite, got {e}"
            )));
        }
        Ok(Self { sigma, epsilon })
    }

    pub fn channels(&self) -> usize {
        self.sigma.len()
    }

    /// Per-channel clip levels `sqrt(sigma_i)`.
    pub fn bounds(&self) -> DVector<f64> {
        self.sigma.map(|s| s.max(0.0).sqrt())
    }
}

/// Time derivative of a [`SaturationState`].
#[derive(Debug, Clone, PartialEq)]
pub struct SaturationRate {
    pub sigma_dot: DVector<f64>,
    pub epsilon_dot: DVector<f64>,
}

/// Gains and initial values of the bound dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundParams {
    mode: TimeMode,
    pub lambda1: DVector<f64>,
    pub lambda2: DVector<f64>,
    pub gamma1: DVector<f64>,
    pub gamma2: DVector<f64>,
    pub sigma0: DVector<f64>,
    pub epsilon0: DVector<f64>,
}

impl BoundParams {
    /// Validates the mode-specific invariants: `lambda < 0` in continuous time,
    /// `0 < lambda < 1` in discrete time, `gamma > 0` and positive initial values.
    pub fn new(
        mode: TimeMode,
        lambda1: DVector<f64>,
        lambda2: DVector<f64>,
        gamma1: DVector<f64>,
        gamma2: DVector<f64>,
        sigma0: DVector<f64>,
        epsilon0: DVector<f64>,
    ) -> Result<Self> {
        let p = lambda1.len();
        check_dim("lambda2", p, lambda2.len())?;
        check_dim("gamma1", p, gamma1.len())?;
        check_dim("gamma2", p, gamma2.len())?;
        check_dim("sigma0", p, sigma0.len())?;
        check_dim("epsilon0", p, epsilon0.len())?;
        for (name, values) in [("lambda1", &lambda1), ("lambda2", &lambda2)] {
            for (i, &l) in values.iter().enumerate() {
                let ok = match mode {
                    TimeMode::Continuous => l < 0.0,
                    TimeMode::Discrete => l > 0.0 && l < 1.0,
                };
                if !ok {
                    let range = match mode {
                        TimeMode::Continuous => "< 0 in continuous time",
                        TimeMode::Discrete => "in (0, 1) in discrete time",
                    };
                    return Err(Error::InputDomain(format!(
                        "{name}[{i}] = {l} must be {range}"
                    )));
                }
            }
        }
        for (name, values) in [("gamma1", &gamma1), ("gamma2", &gamma2)] {
            if let Some((i, g)) = values
                .iter()
                .enumerate()
                .find(|(_, g)| !(**g > 0.0) || !g.is_finite())
            {
                return Err(Error::InputDomain(format!("{name}[{i}] = {g} must be > 0")));
            }
        }
        SaturationState::new(sigma0.clone(), epsilon0.clone())?;
        Ok(Self {
            mode,
            lambda1,
            lambda2,
            gamma1,
            gamma2,
            sigma0,
            epsilon0,
        })
    }

    /// Same values in every channel.
    pub fn uniform(
        mode: TimeMode,
        channels: usize,
        lambda1: f64,
        lambda2: f64,
        gamma1: f64,
        gamma2: f64,
        sigma0: f64,
        epsilon0: f64,
    ) -> Result<Self> {
        let v = |x| DVector::from_element(channels, x);
        Self::new(
            mode,
            v(lambda1),
            v(lambda2),
            v(gamma1),
            v(gamma2),
            v(sigma0),
            v(epsilon0),
        )
    }

    /// Discrete-time values of the robot localization experiment, with unit
    /// initial bound state.
    pub fn robot_defaults() -> Self {
        Self::new(
            TimeMode::Discrete,
            DVector::from_vec(vec![0.5, 0.5, 0.1]),
            DVector::from_vec(vec![0.1, 0.1, 0.1]),
            DVector::from_vec(vec![100.0, 100.0, 0.005]),
            DVector::from_vec(vec![9.0, 9.0, 9.0]),
            DVector::from_element(3, 1.0),
            DVector::from_element(3, 1.0),
        )
        .expect("robot defaults satisfy the discrete-time invariants")
    }

    pub fn mode(&self) -> TimeMode {
        self.mode
    }

    pub fn channels(&self) -> usize {
        self.lambda1.len()
    }

    pub fn initial_state(&self) -> SaturationState {
        SaturationState {
            sigma: self.sigma0.clone(),
            epsilon: self.epsilon0.clone(),
        }
    }

    /// `exp(-1) * sum(gamma1_i)`, the constant that bounds the shaping term's
    /// contribution in the stability analysis.
    pub fn rho(&self) -> f64 {
        (-1.0f64).exp() * self.gamma1.sum()
    }

    fn require_mode(&self, mode: TimeMode, op: &str) -> Result<()> {
        if self.mode == mode {
            Ok(())
        } else {
            Err(Error::InputDomain(format!(
                "{op} requires {mode:?} bound parameters, got {:?}",
                self.mode
            )))
        }
    }
}

/// Clips innovation channel `i` to `[-sqrt(sigma_i), sqrt(sigma_i)]`.
pub fn saturate_innovation(innov: &DVector<f64>, sat: &SaturationState) -> Result<DVector<f64>> {
    check_dim("saturate_innovation", sat.channels(), innov.len())?;
    let mut out = DVector::zeros(innov.len());
    for i in 0..innov.len() {
        out[i] = saturate(innov[i], sat.sigma[i].max(0.0).sqrt())?;
    }
    Ok(out)
}

fn check_step_inputs(sat: &SaturationState, innov: &DVector<f64>, params: &BoundParams) -> Result<()> {
    check_dim("bound params", sat.channels(), params.channels())?;
    check_dim("bound innovation", sat.channels(), innov.len())?;
    if !innov.iter().all(|v| v.is_finite()) {
        return Err(Error::InputDomain("non-finite innovation".into()));
    }
    Ok(())
}

/// One step of the discrete bound recursion, driven by the raw innovation.
pub fn bound_step_dt(
    sat: &SaturationState,
    innov: &DVector<f64>,
    params: &BoundParams,
) -> Result<SaturationState> {
    params.require_mode(TimeMode::Discrete, "bound_step_dt")?;
    check_step_inputs(sat, innov, params)?;
    let p = sat.channels();
    let mut sigma = DVector::zeros(p);
    let mut epsilon = DVector::zeros(p);
    for i in 0..p {
        sigma[i] = (params.lambda1[i] * sat.sigma[i] + params.gamma1[i] * shaping(sat.epsilon[i]))
            .max(POSITIVITY_FLOOR);
        epsilon[i] = (params.lambda2[i] * sat.epsilon[i] + params.gamma2[i] * innov[i] * innov[i])
            .clamp(POSITIVITY_FLOOR, EPSILON_CLAMP);
    }
    Ok(SaturationState { sigma, epsilon })
}

/// Right-hand side of the continuous bound dynamics.
pub fn bound_rhs_ct(
    sat: &SaturationState,
    innov: &DVector<f64>,
    params: &BoundParams,
) -> Result<SaturationRate> {
    params.require_mode(TimeMode::Continuous, "bound_rhs_ct")?;
    check_step_inputs(sat, innov, params)?;
    let p = sat.channels();
    let mut sigma_dot = DVector::zeros(p);
    let mut epsilon_dot = DVector::zeros(p);
    for i in 0..p {
        sigma_dot[i] = params.lambda1[i] * sat.sigma[i] + params.gamma1[i] * shaping(sat.epsilon[i]);
        epsilon_dot[i] = params.lambda2[i] * sat.epsilon[i] + params.gamma2[i] * innov[i] * innov[i];
    }
    Ok(SaturationRate {
        sigma_dot,
        epsilon_dot,
    })
}
