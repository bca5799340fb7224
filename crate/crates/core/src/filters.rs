//! Discrete- and continuous-time IS-EKF recursions with the plain EKF and the
//! `l`-sigma gated EKF as baselines.
//!
//! All three discrete filters share one measurement update ([`update_with`]);
//! they differ only in what is done to the innovation before it is multiplied
//! by the gain ([`Correction`]). The covariance recursion is therefore the
//! same for every filter given the same linearization points.
//!
//! Linearization points: in discrete time the state Jacobian is taken at the
//! filtered estimate and the measurement Jacobian at the prediction; in
//! continuous time both are taken at the current estimate.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, all_finite_mat, all_finite_vec, symmetrize};
use crate::ode::rk4_step;
use crate::saturation::{
    bound_rhs_ct, bound_step_dt, saturate_innovation, BoundParams, SaturationRate,
    SaturationState,
};

/// Default relative step of [`jacobian_fd`].
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Floor applied to `sigma` and `epsilon` after each continuous-time step.
pub const CT_POSITIVITY_FLOOR: f64 = 1e-12;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    if a > -PI && a <= PI {
        return a;
    }
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

/// The maps and noise statistics a filter needs.
///
/// In discrete time [`SystemModel::transition`] is the next-state map; in
/// continuous time it is the drift. Jacobians default to central finite
/// differences. Implementations must be pure.
pub trait SystemModel {
    fn state_dim(&self) -> usize;
    fn measurement_dim(&self) -> usize;
    fn transition(&self, x: &DVector<f64>) -> DVector<f64>;
    fn measure(&self, x: &DVector<f64>) -> DVector<f64>;
    fn process_noise(&self) -> &DMatrix<f64>;
    fn measurement_noise(&self) -> &DMatrix<f64>;

    fn transition_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        jacobian_fd(|z| self.transition(z), x, DEFAULT_FD_STEP)
    }

    fn measurement_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        jacobian_fd(|z| self.measure(z), x, DEFAULT_FD_STEP)
    }

    /// Measurement channels holding angles; their innovations are wrapped
    /// into `(-pi, pi]` before any saturation or gating.
    fn angle_channels(&self) -> &[usize] {
        &[]
    }

    /// Hook to bring an estimate back to its canonical range (angle wrapping).
    fn normalize_state(&self, _x: &mut DVector<f64>) {}
}

type VecMap = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type JacMap = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Closure-backed [`SystemModel`].
#[derive(Clone)]
pub struct NonlinearModel {
    n: usize,
    p: usize,
    f: VecMap,
    h: VecMap,
    jac_f: Option<JacMap>,
    jac_h: Option<JacMap>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    angle_channels: Vec<usize>,
}

impl std::fmt::Debug for NonlinearModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NonlinearModel")
            .field("n", &self.n)
            .field("p", &self.p)
            .field("q", &self.q)
            .field("r", &self.r)
            .field("analytic_jacobians", &(self.jac_f.is_some(), self.jac_h.is_some()))
            .finish()
    }
}

fn check_square(context: &'static str, m: &DMatrix<f64>, dim: usize) -> Result<()> {
    check_dim(context, dim, m.nrows())?;
    check_dim(context, dim, m.ncols())
}

fn check_symmetric(name: &str, m: &DMatrix<f64>) -> Result<()> {
    let asym = (m - m.transpose()).amax();
    if asym > 1e-12 * (1.0 + m.amax()) {
        return Err(Error::InputDomain(format!("{name} is not symmetric")));
    }
    Ok(())
}

impl NonlinearModel {
    /// Validates `Q >= 0` and `R > 0`.
    pub fn new<F, H>(
        n: usize,
        p: usize,
        f: F,
        h: H,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self>
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        H: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        check_square("process noise Q", &q, n)?;
        check_square("measurement noise R", &r, p)?;
        check_symmetric("Q", &q)?;
        check_symmetric("R", &r)?;
        if n > 0 && linalg::min_eigenvalue(&q)? < -1e-12 * (1.0 + q.amax()) {
            return Err(Error::InputDomain("Q must be positive semidefinite".into()));
        }
        linalg::cholesky(&r, "R")
            .map_err(|_| Error::InputDomain("R must be positive definite".into()))?;
        Ok(Self {
            n,
            p,
            f: Arc::new(f),
            h: Arc::new(h),
            jac_f: None,
            jac_h: None,
            q,
            r,
            angle_channels: Vec::new(),
        })
    }

    /// `x -> A x`, `x -> C x` with exact Jacobians.
    pub fn linear(a: DMatrix<f64>, c: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        check_square("state matrix A", &a, n)?;
        check_dim("output matrix C", n, c.ncols())?;
        let p = c.nrows();
        let (a1, c1) = (a.clone(), c.clone());
        Ok(Self::new(n, p, move |x| &a1 * x, move |x| &c1 * x, q, r)?
            .with_jacobians(move |_| a.clone(), move |_| c.clone()))
    }

    pub fn with_jacobians<JF, JH>(mut self, jac_f: JF, jac_h: JH) -> Self
    where
        JF: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        JH: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.jac_f = Some(Arc::new(jac_f));
        self.jac_h = Some(Arc::new(jac_h));
        self
    }

    pub fn with_angle_channels(mut self, channels: Vec<usize>) -> Self {
        self.angle_channels = channels;
        self
    }
}

impl SystemModel for NonlinearModel {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn measurement_dim(&self) -> usize {
        self.p
    }
    fn transition(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.f)(x)
    }
    fn measure(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.h)(x)
    }
    fn process_noise(&self) -> &DMatrix<f64> {
        &self.q
    }
    fn measurement_noise(&self) -> &DMatrix<f64> {
        &self.r
    }
    fn transition_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        match &self.jac_f {
            Some(j) => Ok(j(x)),
            None => jacobian_fd(|z| self.transition(z), x, DEFAULT_FD_STEP),
        }
    }
    fn measurement_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        match &self.jac_h {
            Some(j) => Ok(j(x)),
            None => jacobian_fd(|z| self.measure(z), x, DEFAULT_FD_STEP),
        }
    }
    fn angle_channels(&self) -> &[usize] {
        &self.angle_channels
    }
}

/// Central-difference Jacobian with per-coordinate step `h_rel * max(1, |x_i|)`.
pub fn jacobian_fd<F>(map: F, x: &DVector<f64>, h_rel: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    if !(h_rel > 0.0) {
        return Err(Error::InputDomain(format!("finite-difference step {h_rel} must be > 0")));
    }
    let f0 = map(x);
    if !all_finite_vec(&f0) {
        return Err(Error::non_finite("map is non-finite at the expansion point", x.as_slice()));
    }
    let mut jac = DMatrix::zeros(f0.len(), x.len());
    let mut probe = x.clone();
    for j in 0..x.len() {
        let step = h_rel * x[j].abs().max(1.0);
        probe[j] = x[j] + step;
        let plus = map(&probe);
        probe[j] = x[j] - step;
        let minus = map(&probe);
        probe[j] = x[j];
        if !all_finite_vec(&plus) || !all_finite_vec(&minus) {
            return Err(Error::non_finite(
                format!("map is non-finite near coordinate {j}"),
                x.as_slice(),
            ));
        }
        check_dim("jacobian_fd output", f0.len(), plus.len())?;
        jac.set_column(j, &((plus - minus) / (2.0 * step)));
    }
    Ok(jac)
}

/// Estimate, covariance-like matrix and (for saturated filters) bound state.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
    pub sat: Option<SaturationState>,
    /// Discrete step index.
    pub k: usize,
    /// Continuous time.
    pub t: f64,
}

impl FilterState {
    pub fn new(x: DVector<f64>, p: DMatrix<f64>) -> Result<Self> {
        check_square("initial covariance", &p, x.len())?;
        let st = Self {
            x,
            p: symmetrize(&p),
            sat: None,
            k: 0,
            t: 0.0,
        };
        st.validate()?;
        Ok(st)
    }

    pub fn with_saturation(mut self, sat: SaturationState) -> Self {
        self.sat = Some(sat);
        self
    }

    /// Finite entries, symmetric `P`, and `lambda_min(P) >= -1e-9 * |P|`.
    pub fn validate(&self) -> Result<()> {
        if !all_finite_vec(&self.x) || !all_finite_mat(&self.p) {
            return Err(Error::non_finite("filter state has non-finite entries", self.x.as_slice()));
        }
        check_symmetric("P", &self.p)?;
        let ev = linalg::sym_eigenvalues(&self.p)?;
        let norm = ev.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let min = ev.iter().copied().fold(f64::INFINITY, f64::min);
        if ev.len() > 0 && min < -1e-9 * norm {
            return Err(Error::Numerical {
                reason: format!("P lost positive semidefiniteness (lambda_min = {min:e})"),
                offending: Some(self.x.as_slice().to_vec()),
                condition: None,
            });
        }
        Ok(())
    }

    fn saturation(&self) -> Result<&SaturationState> {
        self.sat
            .as_ref()
            .ok_or_else(|| Error::InputDomain("saturated update on a state without bound state".into()))
    }
}

/// Treatment of the innovation before it enters the state correction.
#[derive(Debug, Clone, Copy)]
pub enum Correction<'a> {
    /// Plain EKF.
    Raw,
    /// Element-wise saturation with adaptive bounds advanced by the raw innovation.
    Saturated(&'a BoundParams),
    /// Channel `i` is zeroed when `|innovation_i| > ell * sqrt(S_ii)`.
    Gated { ell: f64 },
}

/// Everything computed by one measurement update.
#[derive(Debug, Clone)]
pub struct UpdateOutcome {
    pub state: FilterState,
    /// Raw innovation `y - h(x_pred)` (angle channels wrapped).
    pub innovation: DVector<f64>,
    /// Innovation actually multiplied by the gain.
    pub applied: DVector<f64>,
    pub gain: DMatrix<f64>,
    pub innovation_cov: DMatrix<f64>,
}

fn wrapped_innovation<M: SystemModel + ?Sized>(model: &M, y: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("measurement", model.measurement_dim(), y.len())?;
    let predicted = model.measure(x);
    check_dim("measurement map output", model.measurement_dim(), predicted.len())?;
    let mut innov = y - predicted;
    for &i in model.angle_channels() {
        innov[i] = wrap_angle(innov[i]);
    }
    if !all_finite_vec(&innov) {
        return Err(Error::non_finite("non-finite innovation", x.as_slice()));
    }
    Ok(innov)
}

/// Time update: `x = f(x)`, `P = A P A' + Q` with `A` at the filtered estimate.
pub fn dt_predict<M: SystemModel + ?Sized>(model: &M, st: &FilterState) -> Result<FilterState> {
    check_dim("filter state", model.state_dim(), st.x.len())?;
    let a = model.transition_jacobian(&st.x)?;
    check_square("state Jacobian", &a, model.state_dim())?;
    let mut x = model.transition(&st.x);
    if !all_finite_vec(&x) {
        return Err(Error::non_finite("state map returned non-finite values", st.x.as_slice()));
    }
    model.normalize_state(&mut x);
    let p = symmetrize(&(&a * &st.p * a.transpose() + model.process_noise()));
    if !all_finite_mat(&p) {
        return Err(Error::non_finite("predicted covariance is non-finite", st.x.as_slice()));
    }
    Ok(FilterState {
        x,
        p,
        sat: st.sat.clone(),
        k: st.k + 1,
        t: st.t,
    })
}

/// Measurement update shared by every discrete filter.
pub fn update_with<M: SystemModel + ?Sized>(
    model: &M,
    st: &FilterState,
    y: &DVector<f64>,
    correction: Correction<'_>,
) -> Result<UpdateOutcome> {
    check_dim("filter state", model.state_dim(), st.x.len())?;
    let c = model.measurement_jacobian(&st.x)?;
    check_dim("measurement Jacobian rows", model.measurement_dim(), c.nrows())?;
    check_dim("measurement Jacobian cols", model.state_dim(), c.ncols())?;
    let innovation = wrapped_innovation(model, y, &st.x)?;

    let pct = &st.p * c.transpose();
    let s = symmetrize(&(&c * &pct + model.measurement_noise()));
    // K = P C' S^-1, computed as (S^-1 C P)'
    let gain = linalg::spd_solve(&s, &pct.transpose(), "innovation covariance")?.transpose();

    let mut sat_next = st.sat.clone();
    let applied = match correction {
        Correction::Raw => innovation.clone(),
        Correction::Saturated(params) => {
            let sat = st.saturation()?;
            let clipped = saturate_innovation(&innovation, sat)?;
            sat_next = Some(bound_step_dt(sat, &innovation, params)?);
            clipped
        }
        Correction::Gated { ell } => {
            if !(ell > 0.0) {
                return Err(Error::InputDomain(format!("gate width ell = {ell} must be > 0")));
            }
            DVector::from_fn(innovation.len(), |i, _| {
                if innovation[i].abs() > ell * s[(i, i)].sqrt() {
                    0.0
                } else {
                    innovation[i]
                }
            })
        }
    };

    let mut x = &st.x + &gain * &applied;
    model.normalize_state(&mut x);
    let p = symmetrize(&(&st.p - &gain * &s * gain.transpose()));
    if !all_finite_vec(&x) || !all_finite_mat(&p) {
        return Err(Error::non_finite("update produced non-finite values", st.x.as_slice()));
    }
    Ok(UpdateOutcome {
        state: FilterState {
            x,
            p,
            sat: sat_next,
            k: st.k,
            t: st.t,
        },
        innovation,
        applied,
        gain,
        innovation_cov: s,
    })
}

/// Saturated measurement update; the bound state advances with the raw innovation.
pub fn dt_update<M: SystemModel + ?Sized>(
    model: &M,
    st: &FilterState,
    y: &DVector<f64>,
    params: &BoundParams,
) -> Result<FilterState> {
    Ok(update_with(model, st, y, Correction::Saturated(params))?.state)
}

/// Predict, then saturated update (which also advances the bounds).
pub fn dt_isekf_step<M: SystemModel + ?Sized>(
    model: &M,
    st: &FilterState,
    y: &DVector<f64>,
    params: &BoundParams,
) -> Result<FilterState> {
    dt_update(model, &dt_predict(model, st)?, y, params)
}

pub fn ekf_step<M: SystemModel + ?Sized>(model: &M, st: &FilterState, y: &DVector<f64>) -> Result<FilterState> {
    Ok(update_with(model, &dt_predict(model, st)?, y, Correction::Raw)?.state)
}

/// EKF with per-channel `ell`-sigma innovation rejection.
pub fn sigma_gate_step<M: SystemModel + ?Sized>(
    model: &M,
    st: &FilterState,
    y: &DVector<f64>,
    ell: f64,
) -> Result<FilterState> {
    Ok(update_with(model, &dt_predict(model, st)?, y, Correction::Gated { ell })?.state)
}

/// Right-hand side of the coupled continuous-time IS-EKF system.
#[derive(Debug, Clone)]
pub struct CtDerivative {
    pub x_dot: DVector<f64>,
    pub p_dot: DMatrix<f64>,
    pub sat_rate: SaturationRate,
}

/// `x' = f(x) + K sat(y - h(x))`, `K = P C' R^-1`,
/// `P' = A P + P A' + Q - K R K'`, plus the bound dynamics.
pub fn ct_isekf_derivative<M: SystemModel + ?Sized>(
    model: &M,
    st: &FilterState,
    y: &DVector<f64>,
    params: &BoundParams,
) -> Result<CtDerivative> {
    let n = model.state_dim();
    check_dim("filter state", n, st.x.len())?;
    let sat = st.saturation()?;
    let a = model.transition_jacobian(&st.x)?;
    let c = model.measurement_jacobian(&st.x)?;
    let innovation = wrapped_innovation(model, y, &st.x)?;
    let r = model.measurement_noise();
    let gain = linalg::spd_solve(r, &(&c * &st.p), "R")?.transpose();
    let x_dot = model.transition(&st.x) + &gain * saturate_innovation(&innovation, sat)?;
    let p_dot = symmetrize(
        &(&a * &st.p + &st.p * a.transpose() + model.process_noise() - &gain * r * gain.transpose()),
    );
    if !all_finite_vec(&x_dot) || !all_finite_mat(&p_dot) {
        return Err(Error::non_finite("continuous-time derivative is non-finite", st.x.as_slice()));
    }
    Ok(CtDerivative {
        x_dot,
        p_dot,
        sat_rate: bound_rhs_ct(sat, &innovation, params)?,
    })
}

fn pack(st: &FilterState, sat: &SaturationState) -> DVector<f64> {
    let mut v = Vec::with_capacity(st.x.len() + st.p.len() + 2 * sat.channels());
    v.extend_from_slice(st.x.as_slice());
    v.extend_from_slice(st.p.as_slice());
    v.extend_from_slice(sat.sigma.as_slice());
    v.extend_from_slice(sat.epsilon.as_slice());
    DVector::from_vec(v)
}

fn unpack(v: &DVector<f64>, n: usize, p: usize, t: f64, k: usize) -> FilterState {
    let s = v.as_slice();
    let (x, rest) = s.split_at(n);
    let (pm, rest) = rest.split_at(n * n);
    let (sigma, epsilon) = rest.split_at(p);
    FilterState {
        x: DVector::from_column_slice(x),
        p: DMatrix::from_column_slice(n, n, pm),
        sat: Some(SaturationState {
            sigma: DVector::from_column_slice(sigma),
            epsilon: DVector::from_column_slice(epsilon),
        }),
        k,
        t,
    }
}

/// Classical RK4 integration of the continuous-time IS-EKF over `[st.t, st.t + horizon]`.
///
/// The measurement is sampled once per step at the step's start time and held
/// for all four stages. After each step `P` is re-symmetrized and `sigma`,
/// `epsilon` are floored at [`CT_POSITIVITY_FLOOR`]. Returns the initial state
/// followed by the state after every step.
pub fn ct_isekf_integrate<M, Y>(
    model: &M,
    st: &FilterState,
    mut y_provider: Y,
    dt: f64,
    horizon: f64,
    params: &BoundParams,
) -> Result<Vec<FilterState>>
where
    M: SystemModel + ?Sized,
    Y: FnMut(f64) -> DVector<f64>,
{
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InputDomain(format!("integration step {dt} must be > 0")));
    }
    if !(horizon >= 0.0) {
        return Err(Error::InputDomain(format!("horizon {horizon} must be >= 0")));
    }
    let n = model.state_dim();
    let p = model.measurement_dim();
    check_dim("bound channels", p, params.channels())?;
    st.saturation()?;
    let steps = ((horizon / dt) - 1e-9).ceil().max(0.0) as usize;
    let t0 = st.t;
    let mut out = Vec::with_capacity(steps + 1);
    out.push(st.clone());
    let mut cur = st.clone();
    for i in 0..steps {
        let t = t0 + i as f64 * dt;
        let h = dt.min(t0 + horizon - t);
        let y = y_provider(t);
        let mut rhs = |tau: f64, v: &DVector<f64>| -> Result<DVector<f64>> {
            let s = unpack(v, n, p, tau, cur.k);
            let d = ct_isekf_derivative(model, &s, &y, params)?;
            let rate = SaturationState {
                sigma: d.sat_rate.sigma_dot,
                epsilon: d.sat_rate.epsilon_dot,
            };
            Ok(pack(
                &FilterState {
                    x: d.x_dot,
                    p: d.p_dot,
                    sat: None,
                    k: 0,
                    t: tau,
                },
                &rate,
            ))
        };
        let v = rk4_step(&mut rhs, t, &pack(&cur, cur.saturation()?), h)?;
        if !all_finite_vec(&v) {
            return Err(Error::non_finite(
                format!("integration step at t = {t} produced non-finite state"),
                cur.x.as_slice(),
            ));
        }
        let mut next = unpack(&v, n, p, t + h, cur.k + 1);
        next.p = symmetrize(&next.p);
        model.normalize_state(&mut next.x);
        if let Some(sat) = next.sat.as_mut() {
            sat.sigma.apply(|s| *s = s.max(CT_POSITIVITY_FLOOR));
            sat.epsilon.apply(|e| *e = e.max(CT_POSITIVITY_FLOOR));
        }
        out.push(next.clone());
        cur = next;
    }
    Ok(out)
}
