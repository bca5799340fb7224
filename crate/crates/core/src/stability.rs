//! Certificates for the saturated observer on linear systems.
//!
//! For `x' = A x` (or `x+ = A x`) observed through `y = C x + D d` with an
//! outlier `d` bounded by `mu`, the saturated observer error is bounded when
//! a block matrix built from the Riccati trajectory stays positive
//! semidefinite: [`build_s`] in continuous time, [`build_z`] in discrete
//! time. [`certify`] checks that condition along the trajectory from `P0` to
//! the algebraic Riccati solution and returns the closed-form transient and
//! asymptotic error bounds; [`bound_trajectory_check`] simulates the error
//! system against them.
//!
//! The PSD condition is checked at sampled checkpoints plus the fixed point,
//! so a certificate is "trajectory-sampled", not a proof over the continuum.

use std::fmt::Write as _;

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, all_finite_mat, symmetrize};
use crate::ode::rk4_step;
use crate::saturation::{bound_rhs_ct, bound_step_dt, saturate_innovation, BoundParams, SaturationState, TimeMode};

/// Rank tolerance of the Hautus tests.
pub const HAUTUS_TOL: f64 = 1e-8;
/// Margin applied to `max lambda(P_filt^-1)` when choosing `eps_cov`.
pub const EPS_COV_MARGIN: f64 = 1.01;
/// Slack allowed by [`bound_trajectory_check`].
pub const BOUND_SLACK: f64 = 1e-9;

const RICCATI_TOL: f64 = 1e-12;
const CARE_MAX_STEPS: usize = 5_000_000;
const DARE_MAX_STEPS: usize = 1_000_000;
/// ODE steps between closed-loop stability probes in `solve_care`.
const NEWTON_PROBE_INTERVAL: usize = 1000;
const NEWTON_MAX_ITERS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub mode: TimeMode,
}

impl LinearSystem {
    /// Checks shapes, finiteness, `Q >= 0` and `R > 0`. Stabilizability and
    /// detectability are checked by the Riccati solvers.
    pub fn new(
        mode: TimeMode,
        a: DMatrix<f64>,
        c: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        d: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        check_dim("A columns", n, a.ncols())?;
        check_dim("C columns", n, c.ncols())?;
        let p = c.nrows();
        check_dim("Q rows", n, q.nrows())?;
        check_dim("Q columns", n, q.ncols())?;
        check_dim("R rows", p, r.nrows())?;
        check_dim("R columns", p, r.ncols())?;
        check_dim("D rows", p, d.nrows())?;
        for (name, m) in [("A", &a), ("C", &c), ("Q", &q), ("R", &r), ("D", &d)] {
            if !all_finite_mat(m) {
                return Err(Error::InputDomain(format!("{name} has non-finite entries")));
            }
        }
        if n > 0 && linalg::min_eigenvalue(&q)? < -1e-12 * (1.0 + q.amax()) {
            return Err(Error::InputDomain("Q must be positive semidefinite".into()));
        }
        linalg::cholesky(&r, "R").map_err(|_| Error::InputDomain("R must be positive definite".into()))?;
        Ok(Self {
            q: symmetrize(&q),
            r: symmetrize(&r),
            a,
            c,
            d,
            mode,
        })
    }

    /// Scalar system with a scalar outlier channel.
    pub fn scalar(mode: TimeMode, a: f64, c: f64, q: f64, r: f64, d: f64) -> Result<Self> {
        let s = |v| DMatrix::from_element(1, 1, v);
        Self::new(mode, s(a), s(c), s(q), s(r), s(d))
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn outlier_dim(&self) -> usize {
        self.d.ncols()
    }

    /// `(A, Q^{1/2})` stabilizable. `Q` has the same column space as its
    /// square root, so it is used directly.
    pub fn is_stabilizable(&self) -> Result<bool> {
        hautus(&self.a, &self.q, self.mode)
    }

    pub fn is_detectable(&self) -> Result<bool> {
        hautus(&self.a.transpose(), &self.c.transpose(), self.mode)
    }

    /// Stabilizable and detectable, or a certification error naming the failed test.
    pub fn check_assumptions(&self) -> Result<()> {
        if !self.is_stabilizable()? {
            return Err(Error::Certification("(A, Q^1/2) is not stabilizable".into()));
        }
        if !self.is_detectable()? {
            return Err(Error::Certification("(A, C) is not detectable".into()));
        }
        Ok(())
    }

    fn c_rinv(&self) -> Result<DMatrix<f64>> {
        // C' R^-1
        Ok(linalg::spd_solve(&self.r, &self.c, "R")?.transpose())
    }

    /// `C' R^-1 C`.
    fn info_gain(&self) -> Result<DMatrix<f64>> {
        Ok(symmetrize(&(self.c_rinv()? * &self.c)))
    }
}

/// Hautus test on the modes that must be controllable through `b`.
fn hautus(a: &DMatrix<f64>, b: &DMatrix<f64>, mode: TimeMode) -> Result<bool> {
    let n = a.nrows();
    if n == 0 {
        return Ok(true);
    }
    if !all_finite_mat(a) || !all_finite_mat(b) {
        return Err(Error::numerical("Hautus test input has non-finite entries"));
    }
    let eig = a.complex_eigenvalues();
    let m = b.ncols();
    for lam in eig.iter() {
        let unstable = match mode {
            TimeMode::Continuous => lam.re >= -HAUTUS_TOL,
            TimeMode::Discrete => lam.norm() >= 1.0 - HAUTUS_TOL,
        };
        if !unstable {
            continue;
        }
        let pencil = DMatrix::<Complex<f64>>::from_fn(n, n + m, |i, j| {
            if j < n {
                Complex::new(a[(i, j)], 0.0) - if i == j { *lam } else { Complex::new(0.0, 0.0) }
            } else {
                Complex::new(b[(i, j - n)], 0.0)
            }
        });
        let sv = pencil.svd(false, false).singular_values;
        let max = sv.iter().fold(0.0_f64, |acc, v| acc.max(*v));
        let min = sv.iter().fold(f64::INFINITY, |acc, v| acc.min(*v));
        if min <= HAUTUS_TOL * max.max(1.0) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// `A P + P A' + Q - P C' R^-1 C P`.
pub fn care_residual(sys: &LinearSystem, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let g = sys.info_gain()?;
    Ok(symmetrize(&(&sys.a * p + p * sys.a.transpose() + &sys.q - p * g * p)))
}

/// `A P A' + Q - A P C' (C P C' + R)^-1 C P A' - P`.
pub fn dare_residual(sys: &LinearSystem, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(dt_riccati_step(sys, p)?.next_pred - p)
}

fn ct_step_size(sys: &LinearSystem, g: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let na = sys.a.norm();
    let ng = g.norm();
    let scale = 2.0 * na + 2.0 * p.norm() * ng + (sys.q.norm() * ng).sqrt();
    if scale > 0.0 {
        0.5 / scale
    } else {
        1.0
    }
}

/// Adaptive-step RK4 solution of the Riccati ODE from `p0` until
/// `|P'| <= tol * (1 + |P|)`. Returns the visited `(t, P)` samples when
/// `record` is set, otherwise just the last one.
fn integrate_ct_riccati(
    sys: &LinearSystem,
    p0: &DMatrix<f64>,
    tol: f64,
    max_steps: usize,
    record: bool,
) -> Result<Vec<(f64, DMatrix<f64>)>> {
    integrate_ct_riccati_until(sys, p0, max_steps, record, |_, p, d| d.norm() <= tol * (1.0 + p.norm()))
}

fn integrate_ct_riccati_until<S>(
    sys: &LinearSystem,
    p0: &DMatrix<f64>,
    max_steps: usize,
    record: bool,
    mut stop: S,
) -> Result<Vec<(f64, DMatrix<f64>)>>
where
    S: FnMut(usize, &DMatrix<f64>, &DVector<f64>) -> bool,
{
    let n = sys.state_dim();
    let g = sys.info_gain()?;
    let mut rhs = |_t: f64, v: &DVector<f64>| -> Result<DVector<f64>> {
        let p = DMatrix::from_column_slice(n, n, v.as_slice());
        let d = &sys.a * &p + &p * sys.a.transpose() + &sys.q - &p * &g * &p;
        Ok(DVector::from_column_slice(d.as_slice()))
    };
    let mut p = symmetrize(p0);
    let mut t = 0.0;
    let mut out = vec![(t, p.clone())];
    for step in 0..max_steps {
        let d = rhs(t, &DVector::from_column_slice(p.as_slice()))?;
        if stop(step, &p, &d) {
            if !record {
                out = vec![(t, p)];
            }
            return Ok(out);
        }
        let h = ct_step_size(sys, &g, &p);
        let v = rk4_step(&mut rhs, t, &DVector::from_column_slice(p.as_slice()), h)?;
        p = symmetrize(&DMatrix::from_column_slice(n, n, v.as_slice()));
        t += h;
        if !all_finite_mat(&p) {
            return Err(Error::Certification(format!("Riccati ODE diverged at t = {t}")));
        }
        if record {
            out.push((t, p.clone()));
        }
    }
    Err(Error::Certification(format!(
        "Riccati ODE did not converge within {max_steps} steps"
    )))
}

fn is_hurwitz(m: &DMatrix<f64>) -> bool {
    m.complex_eigenvalues().iter().all(|z| z.re < 0.0)
}

/// Solves `M X + X M' + F = 0` through the Kronecker form.
fn solve_lyapunov(m: &DMatrix<f64>, f: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let op = eye.kronecker(m) + m.kronecker(&eye);
    let rhs = -DVector::from_column_slice(f.as_slice());
    let x = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::numerical("singular Lyapunov operator"))?;
    Ok(symmetrize(&DMatrix::from_column_slice(n, n, x.as_slice())))
}

/// Stabilizing solution of `A P + P A' + Q - P C' R^-1 C P = 0`.
///
/// The Riccati ODE is integrated from `P = 0` until `|P'|` meets the
/// tolerance, or earlier once `A - P C' R^-1 C` is Hurwitz; from such a
/// point Newton-Kleinman iterations converge quadratically, which matters
/// for stiff systems with slow closed-loop modes.
pub fn solve_care(sys: &LinearSystem) -> Result<DMatrix<f64>> {
    if sys.mode != TimeMode::Continuous {
        return Err(Error::InputDomain("solve_care needs a continuous-time system".into()));
    }
    sys.check_assumptions()?;
    let n = sys.state_dim();
    let g = sys.info_gain()?;
    let converged = |p: &DMatrix<f64>, d: f64| d <= RICCATI_TOL * (1.0 + p.norm());
    let mut traj = integrate_ct_riccati_until(sys, &DMatrix::zeros(n, n), CARE_MAX_STEPS, false, |step, p, d| {
        converged(p, d.norm())
            || (step > 0 && step % NEWTON_PROBE_INTERVAL == 0 && is_hurwitz(&(&sys.a - p * &g)))
    })?;
    let mut p = traj.pop().expect("non-empty").1;
    for _ in 0..NEWTON_MAX_ITERS {
        let res = care_residual(sys, &p)?;
        if converged(&p, res.norm()) {
            return Ok(p);
        }
        let closed = &sys.a - &p * &g;
        let next = solve_lyapunov(&closed, &(&sys.q + &p * &g * &p))?;
        if !all_finite_mat(&next) {
            return Err(Error::Certification("Newton-Kleinman iteration diverged".into()));
        }
        if (&next - &p).norm() <= f64::EPSILON * (1.0 + p.norm()) {
            return Ok(next);
        }
        p = next;
    }
    Ok(p)
}

/// One step of the discrete Riccati recursion.
#[derive(Debug, Clone)]
pub struct RiccatiStep {
    /// `P_{k|k-1}`.
    pub pred: DMatrix<f64>,
    /// `P_{k|k}`.
    pub filt: DMatrix<f64>,
    /// `K_k = P_{k|k-1} C' (C P_{k|k-1} C' + R)^-1`.
    pub gain: DMatrix<f64>,
    /// `P_{k+1|k} = A P_{k|k} A' + Q`.
    pub next_pred: DMatrix<f64>,
}

pub fn dt_riccati_step(sys: &LinearSystem, pred: &DMatrix<f64>) -> Result<RiccatiStep> {
    let pct = pred * sys.c.transpose();
    let s = symmetrize(&(&sys.c * &pct + &sys.r));
    let gain = linalg::spd_solve(&s, &pct.transpose(), "innovation covariance")?.transpose();
    let filt = symmetrize(&(pred - &gain * &s * gain.transpose()));
    let next_pred = symmetrize(&(&sys.a * &filt * sys.a.transpose() + &sys.q));
    Ok(RiccatiStep {
        pred: pred.clone(),
        filt,
        gain,
        next_pred,
    })
}

/// Riccati recursion from `p0` until successive predictions differ by at
/// most `tol * (1 + |P|)` (Frobenius), or `max_steps`.
pub fn dt_riccati_trajectory(
    sys: &LinearSystem,
    p0: &DMatrix<f64>,
    tol: f64,
    max_steps: usize,
) -> Result<(Vec<RiccatiStep>, bool)> {
    let mut out = Vec::new();
    let mut pred = symmetrize(p0);
    for _ in 0..max_steps {
        let step = dt_riccati_step(sys, &pred)?;
        if !all_finite_mat(&step.next_pred) {
            return Err(Error::Certification("Riccati recursion diverged".into()));
        }
        let converged = (&step.next_pred - &pred).norm() <= tol * (1.0 + pred.norm());
        pred = step.next_pred.clone();
        out.push(step);
        if converged {
            return Ok((out, true));
        }
    }
    Ok((out, false))
}

/// Fixed point of the discrete Riccati recursion, iterated from `P = 0`.
pub fn solve_dare(sys: &LinearSystem) -> Result<DMatrix<f64>> {
    if sys.mode != TimeMode::Discrete {
        return Err(Error::InputDomain("solve_dare needs a discrete-time system".into()));
    }
    sys.check_assumptions()?;
    let n = sys.state_dim();
    let (traj, converged) = dt_riccati_trajectory(sys, &DMatrix::zeros(n, n), RICCATI_TOL, DARE_MAX_STEPS)?;
    if !converged {
        return Err(Error::Certification(format!(
            "Riccati recursion did not converge within {DARE_MAX_STEPS} steps"
        )));
    }
    Ok(traj.last().expect("non-empty").next_pred.clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertificateCandidate {
    /// Diagonal, positive.
    pub w: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub alpha: f64,
    /// Diagonal, positive; must equal the bound parameters' `gamma2`.
    pub gamma2: DMatrix<f64>,
    /// Initial Riccati matrix (`P_0`, or `P_{0|-1}` in discrete time).
    pub p0: DMatrix<f64>,
}

impl CertificateCandidate {
    pub fn validate(&self, sys: &LinearSystem) -> Result<()> {
        let (n, p, m) = (sys.state_dim(), sys.output_dim(), sys.outlier_dim());
        check_dim("W rows", p, self.w.nrows())?;
        check_dim("W columns", p, self.w.ncols())?;
        check_dim("U rows", m, self.u.nrows())?;
        check_dim("U columns", m, self.u.ncols())?;
        check_dim("Gamma2 rows", p, self.gamma2.nrows())?;
        check_dim("Gamma2 columns", p, self.gamma2.ncols())?;
        check_dim("P0 rows", n, self.p0.nrows())?;
        check_dim("P0 columns", n, self.p0.ncols())?;
        for (name, mat) in [("W", &self.w), ("Gamma2", &self.gamma2)] {
            let off_diag = DMatrix::from_fn(p, p, |i, j| if i == j { 0.0 } else { mat[(i, j)] });
            if off_diag.amax() != 0.0 || mat.diagonal().iter().any(|v| !(*v > 0.0)) {
                return Err(Error::InputDomain(format!("{name} must be diagonal positive definite")));
            }
        }
        if m > 0 {
            linalg::cholesky(&self.u, "U").map_err(|_| Error::InputDomain("U must be positive definite".into()))?;
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InputDomain(format!("alpha = {} must be > 0", self.alpha)));
        }
        Ok(())
    }
}

/// `S_t` for the continuous-time observer at Riccati matrix `p_t`.
pub fn build_s(sys: &LinearSystem, cand: &CertificateCandidate, p_t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, p, m) = (sys.state_dim(), sys.output_dim(), sys.outlier_dim());
    let p_inv = linalg::spd_inverse(p_t, "P_t")?;
    let r_inv = linalg::spd_inverse(&sys.r, "R")?;
    let c = &sys.c;
    let ct = c.transpose();
    let mmat = &p_inv * &sys.q * &p_inv + &ct * (&r_inv - &cand.gamma2) * c;
    let b11 = mmat - &p_inv * cand.alpha;
    let b12 = -&ct * (&r_inv + &cand.w);
    let b13 = &ct * (&cand.gamma2 - &r_inv) * &sys.d;
    let b22 = &cand.w * 2.0;
    let b23 = &cand.w * &sys.d;
    Ok(assemble(n, p, m, &b11, &b12, &b13, &b22, &b23, &cand.u))
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    n: usize,
    p: usize,
    m: usize,
    b11: &DMatrix<f64>,
    b12: &DMatrix<f64>,
    b13: &DMatrix<f64>,
    b22: &DMatrix<f64>,
    b23: &DMatrix<f64>,
    b33: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n + p + m, n + p + m);
    out.view_mut((0, 0), (n, n)).copy_from(b11);
    out.view_mut((0, n), (n, p)).copy_from(b12);
    out.view_mut((0, n + p), (n, m)).copy_from(b13);
    out.view_mut((n, 0), (p, n)).copy_from(&b12.transpose());
    out.view_mut((n, n), (p, p)).copy_from(b22);
    out.view_mut((n, n + p), (p, m)).copy_from(b23);
    out.view_mut((n + p, 0), (m, n)).copy_from(&b13.transpose());
    out.view_mut((n + p, n), (m, p)).copy_from(&b23.transpose());
    out.view_mut((n + p, n + p), (m, m)).copy_from(b33);
    symmetrize(&out)
}

/// `(eps_cov I + A' Q^-1 A)^-1`.
pub fn q_bar(a: &DMatrix<f64>, q: &DMatrix<f64>, eps_cov: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let qinv_a = linalg::cholesky(q, "Q")
        .map_err(|_| Error::Certification("Q must be invertible for the discrete certificate".into()))?
        .solve(a);
    let inner = symmetrize(&(DMatrix::identity(n, n) * eps_cov + a.transpose() * qinv_a));
    linalg::spd_inverse(&inner, "eps I + A' Q^-1 A")
}

/// `Z_k` together with the `T` blocks it is built from.
#[derive(Debug, Clone)]
pub struct ZBlocks {
    pub z: DMatrix<f64>,
    pub t1: DMatrix<f64>,
    pub t2: DMatrix<f64>,
    pub t3: DMatrix<f64>,
    pub t4: DMatrix<f64>,
    pub t5: DMatrix<f64>,
    pub t6: DMatrix<f64>,
}

/// `Z_k` for the discrete-time observer at `(P_{k|k-1}, P_{k|k})`.
pub fn build_z(
    sys: &LinearSystem,
    cand: &CertificateCandidate,
    p_pred: &DMatrix<f64>,
    p_filt: &DMatrix<f64>,
    eps_cov: f64,
) -> Result<ZBlocks> {
    if linalg::inverse(&sys.a, "A").is_err() {
        return Err(Error::Certification("A must be invertible for the discrete certificate".into()));
    }
    let (n, p, m) = (sys.state_dim(), sys.output_dim(), sys.outlier_dim());
    let qb = q_bar(&sys.a, &sys.q, eps_cov)?;
    let pf_inv = linalg::spd_inverse(p_filt, "P_{k|k}")?;
    let pp_inv = linalg::spd_inverse(p_pred, "P_{k|k-1}")?;
    let r_inv = linalg::spd_inverse(&sys.r, "R")?;
    let c = &sys.c;
    let ct = c.transpose();
    let d = &sys.d;
    let ctri = &ct * &r_inv;
    let g = &ctri * c;
    let diff = p_filt - &qb;
    let g2 = &cand.gamma2;

    let t1 = &g + &pf_inv * &qb * &pf_inv - &pf_inv * &qb * &g - &g * &qb * &pf_inv - &g * &diff * &g - &ct * g2 * c;
    let t2 = -&ctri + &pf_inv * &qb * &ctri + &g * &diff * &ctri;
    let t3 = (&t2 + &ct * g2) * d;
    let rcdcr = &r_inv * c * &diff * &ctri;
    let t4 = -&rcdcr;
    let t5 = &t4 * d;
    let t6 = symmetrize(&(d.transpose() * (&rcdcr + g2) * d));

    let z = assemble(
        n,
        p,
        m,
        &(&t1 - &pp_inv * cand.alpha),
        &(&t2 - &ct * &cand.w),
        &t3,
        &(&t4 + &cand.w * 2.0),
        &(&t5 + &cand.w * d),
        &cand.u,
    );
    Ok(ZBlocks { z, t1, t2, t3, t4, t5, t6 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsdReport {
    pub psd: bool,
    pub min_eigenvalue: f64,
}

/// `lambda_min(M) >= -tol * (1 + |M|)` on the symmetric part of `m`.
pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> Result<PsdReport> {
    let ev = linalg::sym_eigenvalues(m)?;
    let min = ev.iter().copied().fold(f64::INFINITY, f64::min);
    let norm = ev.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    Ok(PsdReport {
        psd: ev.is_empty() || min >= -tol * (1.0 + norm),
        min_eigenvalue: if ev.is_empty() { 0.0 } else { min },
    })
}

/// Which bound family a certificate uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundVariant {
    /// `alpha` below the `lambda1`, `lambda2` ceiling; bounds carry `rho`.
    Standard,
    /// `alpha` below the `lambda1`, `lambda2 + gamma1` ceiling; bounds drop `rho`.
    RhoFree,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertifyOptions {
    /// Checkpoints along the Riccati trajectory, geometrically spaced.
    pub checkpoints: usize,
    pub psd_tol: f64,
    /// Force a variant instead of taking the strongest whose ceiling holds.
    pub variant: Option<BoundVariant>,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            checkpoints: 50,
            psd_tol: 1e-10,
            variant: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Checkpoint {
    /// Time (continuous) or step index (discrete); `f64::INFINITY` for the fixed point.
    pub time: f64,
    pub min_eigenvalue: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityCertificate {
    pub mode: TimeMode,
    pub variant: BoundVariant,
    pub p_inf: DMatrix<f64>,
    pub alpha: f64,
    pub mu: f64,
    pub c1: f64,
    pub c3: f64,
    pub rho: f64,
    /// `eps_cov` used in `Q_bar` (discrete time only).
    pub eps_cov: Option<f64>,
    pub checkpoints: Vec<Checkpoint>,
    /// The PSD condition was verified at samples, not over the continuum.
    pub trajectory_sampled: bool,
}

impl StabilityCertificate {
    /// `c1 mu^2 + rho` (or `c1 mu^2` for the rho-free variant).
    pub fn drive(&self) -> f64 {
        let base = self.c1 * self.mu * self.mu;
        match self.variant {
            BoundVariant::Standard => base + self.rho,
            BoundVariant::RhoFree => base,
        }
    }

    /// `c2 = lambda_min(P_t^-1)`.
    pub fn c2(p_t: &DMatrix<f64>) -> Result<f64> {
        let top = linalg::max_eigenvalue(p_t)?;
        if !(top > 0.0) {
            return Err(Error::numerical("P_t must be positive definite"));
        }
        Ok(1.0 / top)
    }

    /// Bound on `|e|` at `time` (step index in discrete time) given
    /// the initial Lyapunov value `v0` and the Riccati matrix at that time.
    pub fn transient_bound(&self, time: f64, v0: f64, p_t: &DMatrix<f64>) -> Result<f64> {
        let decay = match self.mode {
            TimeMode::Continuous => (-self.alpha * time).exp(),
            TimeMode::Discrete => (1.0 - self.alpha).powf(time),
        };
        let v = decay * v0 + (1.0 - decay) / self.alpha * self.drive();
        Ok((v / Self::c2(p_t)?).sqrt())
    }

    pub fn asymptotic_bound(&self) -> f64 {
        (self.drive() / (self.alpha * self.c3)).sqrt()
    }

    /// `e0' P0^-1 e0 + sum(sigma0) + sum(epsilon0)`.
    pub fn initial_lyapunov(e0: &DVector<f64>, p0: &DMatrix<f64>, sat: &SaturationState) -> Result<f64> {
        let x = linalg::spd_solve(p0, &DMatrix::from_column_slice(e0.len(), 1, e0.as_slice()), "P0")?;
        Ok(e0.dot(&x.column(0)) + sat.sigma.sum() + sat.epsilon.sum())
    }

    /// Plain-text summary of constants, bounds and checkpoint eigenvalues.
    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode: {:?}", self.mode);
        let _ = writeln!(s, "variant: {:?}", self.variant);
        let _ = writeln!(s, "status: {}", if self.trajectory_sampled { "trajectory-sampled" } else { "proven" });
        let _ = writeln!(s, "alpha: {:.6e}", self.alpha);
        let _ = writeln!(s, "mu: {:.6e}", self.mu);
        let _ = writeln!(s, "c1: {:.6e}", self.c1);
        let _ = writeln!(s, "c3: {:.6e}", self.c3);
        let _ = writeln!(s, "rho: {:.6e}", self.rho);
        if let Some(e) = self.eps_cov {
            let _ = writeln!(s, "eps_cov: {e:.6e}");
        }
        let _ = writeln!(s, "asymptotic_bound: {:.6e}", self.asymptotic_bound());
        let _ = writeln!(s, "p_inf:");
        for i in 0..self.p_inf.nrows() {
            let row: Vec<String> = self.p_inf.row(i).iter().map(|v| format!("{v:.6e}")).collect();
            let _ = writeln!(s, "  [{}]", row.join(", "));
        }
        let _ = writeln!(s, "checkpoints (time, min eigenvalue):");
        for c in &self.checkpoints {
            let _ = writeln!(s, "  {:>14} {:.6e}", if c.time.is_finite() { format!("{:.6e}", c.time) } else { "inf".into() }, c.min_eigenvalue);
        }
        s
    }
}

fn alpha_ceilings(params: &BoundParams) -> (f64, f64) {
    let mut thm = f64::NEG_INFINITY;
    let mut cor = f64::NEG_INFINITY;
    for i in 0..params.channels() {
        thm = thm.max(params.lambda1[i]).max(params.lambda2[i]);
        cor = cor.max(params.lambda1[i]).max(params.lambda2[i] + params.gamma1[i]);
    }
    match params.mode() {
        TimeMode::Continuous => (-thm, -cor),
        TimeMode::Discrete => (1.0 - thm, 1.0 - cor),
    }
}

/// Geometrically spaced picks from `0..len` (always including both ends).
fn geometric_indices(len: usize, count: usize) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let mut idx = vec![0];
    if count >= 2 && len > 1 {
        let last = (len - 1) as f64;
        for i in 1..count {
            let v = last.powf(i as f64 / (count - 1) as f64).round() as usize;
            idx.push(v.min(len - 1));
        }
    }
    idx.push(len - 1);
    idx.sort_unstable();
    idx.dedup();
    idx
}

/// Index of the first sample at or after each geometrically spaced time.
fn geometric_time_indices(times: &[f64], count: usize) -> Vec<usize> {
    let Some(&t_end) = times.last() else {
        return Vec::new();
    };
    let t_first = times.get(1).copied().unwrap_or(t_end);
    let mut idx = vec![0, times.len() - 1];
    if count >= 2 && t_end > t_first && t_first > 0.0 {
        for i in 0..count - 1 {
            let target = t_first * (t_end / t_first).powf(i as f64 / (count - 2).max(1) as f64);
            idx.push(times.partition_point(|t| *t < target).min(times.len() - 1));
        }
    }
    idx.sort_unstable();
    idx.dedup();
    idx
}

/// Checks the PSD condition along the Riccati trajectory and returns the
/// error-bound constants.
///
/// Discrete time: `eps_cov` is `1.01 * max lambda(P_{k|k}^-1)` and `c1` is
/// `max lambda(T6_k + U)`, both taken over every step of the trajectory up to
/// convergence and the fixed point; the PSD condition on `Z_k` is checked at
/// the checkpoints.
pub fn certify(
    sys: &LinearSystem,
    cand: &CertificateCandidate,
    params: &BoundParams,
    mu: f64,
    opts: &CertifyOptions,
) -> Result<StabilityCertificate> {
    if params.mode() != sys.mode {
        return Err(Error::InputDomain("bound parameters and system use different time modes".into()));
    }
    check_dim("bound channels", sys.output_dim(), params.channels())?;
    cand.validate(sys)?;
    if !(mu >= 0.0) || !mu.is_finite() {
        return Err(Error::InputDomain(format!("mu = {mu} must be finite and >= 0")));
    }
    let gamma_mismatch = (0..params.channels())
        .map(|i| (cand.gamma2[(i, i)] - params.gamma2[i]).abs() / params.gamma2[i])
        .fold(0.0_f64, f64::max);
    if gamma_mismatch > 1e-12 {
        return Err(Error::InputDomain("candidate Gamma2 differs from the bound parameters' gamma2".into()));
    }

    let (thm_ceiling, cor_ceiling) = alpha_ceilings(params);
    let ceiling_text = |v: BoundVariant| match (sys.mode, v) {
        (TimeMode::Continuous, BoundVariant::Standard) => "-max(lambda1, lambda2)",
        (TimeMode::Continuous, BoundVariant::RhoFree) => "-max(lambda1, lambda2 + gamma1)",
        (TimeMode::Discrete, BoundVariant::Standard) => "1 - max(lambda1, lambda2)",
        (TimeMode::Discrete, BoundVariant::RhoFree) => "1 - max(lambda1, lambda2 + gamma1)",
    };
    let variant = match opts.variant {
        Some(v) => {
            let ceiling = if v == BoundVariant::Standard { thm_ceiling } else { cor_ceiling };
            if cand.alpha > ceiling {
                return Err(Error::Certification(format!(
                    "alpha condition violated: alpha = {} > {} = {ceiling}",
                    cand.alpha,
                    ceiling_text(v)
                )));
            }
            v
        }
        None if cand.alpha <= cor_ceiling => BoundVariant::RhoFree,
        None if cand.alpha <= thm_ceiling => BoundVariant::Standard,
        None => {
            return Err(Error::Certification(format!(
                "alpha condition violated: alpha = {} > {} = {thm_ceiling}",
                cand.alpha,
                ceiling_text(BoundVariant::Standard)
            )))
        }
    };

    linalg::cholesky(&cand.p0, "P0")
        .map_err(|_| Error::Certification("P0 must be positive definite for the certificate".into()))?;
    let rho = params.rho();
    let mut checkpoints = Vec::new();
    let check = |m: &DMatrix<f64>, time: f64, cps: &mut Vec<Checkpoint>| -> Result<()> {
        let rep = is_psd(m, opts.psd_tol)?;
        cps.push(Checkpoint { time, min_eigenvalue: rep.min_eigenvalue });
        if !rep.psd {
            let name = if sys.mode == TimeMode::Continuous { "S_t" } else { "Z_k" };
            let at = if time.is_finite() { format!("{time}") } else { "the fixed point".into() };
            return Err(Error::Certification(format!(
                "{name} is not positive semidefinite at {at} (lambda_min = {:.3e})",
                rep.min_eigenvalue
            )));
        }
        Ok(())
    };

    match sys.mode {
        TimeMode::Continuous => {
            let p_inf = solve_care(sys)?;
            let c3 = StabilityCertificate::c2(&p_inf)
                .map_err(|_| Error::Certification("P_inf is singular".into()))?;
            let traj = integrate_ct_riccati(sys, &cand.p0, 1e-10, CARE_MAX_STEPS, true)?;
            let times: Vec<f64> = traj.iter().map(|(t, _)| *t).collect();
            for i in geometric_time_indices(&times, opts.checkpoints) {
                check(&build_s(sys, cand, &traj[i].1)?, traj[i].0, &mut checkpoints)?;
            }
            check(&build_s(sys, cand, &p_inf)?, f64::INFINITY, &mut checkpoints)?;
            let c1 = linalg::max_eigenvalue(&(&cand.u + sys.d.transpose() * &cand.gamma2 * &sys.d))?;
            Ok(StabilityCertificate {
                mode: sys.mode,
                variant,
                p_inf,
                alpha: cand.alpha,
                mu,
                c1,
                c3,
                rho,
                eps_cov: None,
                checkpoints,
                trajectory_sampled: true,
            })
        }
        TimeMode::Discrete => {
            if linalg::inverse(&sys.a, "A").is_err() {
                return Err(Error::Certification("A must be invertible for the discrete certificate".into()));
            }
            let p_inf = solve_dare(sys)?;
            let c3 = StabilityCertificate::c2(&p_inf)
                .map_err(|_| Error::Certification("P_inf is singular".into()))?;
            let (mut traj, converged) = dt_riccati_trajectory(sys, &cand.p0, RICCATI_TOL, DARE_MAX_STEPS)?;
            if !converged {
                return Err(Error::Certification("Riccati recursion from P0 did not converge".into()));
            }
            traj.push(dt_riccati_step(sys, &p_inf)?);
            let mut top = 0.0_f64;
            for s in &traj {
                let inv = linalg::spd_inverse(&s.filt, "P_{k|k}")?;
                top = top.max(linalg::max_eigenvalue(&inv)?);
            }
            let eps_cov = EPS_COV_MARGIN * top;
            let fixed = traj.len() - 1;
            let mut c1 = f64::NEG_INFINITY;
            for s in &traj {
                let blocks = build_z(sys, cand, &s.pred, &s.filt, eps_cov)?;
                c1 = c1.max(linalg::max_eigenvalue(&(&blocks.t6 + &cand.u))?);
            }
            for i in geometric_indices(fixed, opts.checkpoints) {
                let blocks = build_z(sys, cand, &traj[i].pred, &traj[i].filt, eps_cov)?;
                check(&blocks.z, i as f64, &mut checkpoints)?;
            }
            let blocks = build_z(sys, cand, &traj[fixed].pred, &traj[fixed].filt, eps_cov)?;
            check(&blocks.z, f64::INFINITY, &mut checkpoints)?;
            Ok(StabilityCertificate {
                mode: sys.mode,
                variant,
                p_inf,
                alpha: cand.alpha,
                mu,
                c1,
                c3,
                rho,
                eps_cov: Some(eps_cov),
                checkpoints,
                trajectory_sampled: true,
            })
        }
    }
}

/// Simulation setup for [`bound_trajectory_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheckSpec {
    pub e0: DVector<f64>,
    /// Final time (continuous) or number of steps (discrete).
    pub horizon: f64,
    /// RK4 step for the continuous-time error system.
    pub ct_step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheckReport {
    pub times: Vec<f64>,
    pub error_norms: Vec<f64>,
    pub bounds: Vec<f64>,
    /// `max |e| / bound` over all samples.
    pub max_ratio: f64,
}

impl BoundCheckReport {
    pub fn final_error_norm(&self) -> f64 {
        self.error_norms.last().copied().unwrap_or(0.0)
    }
}

/// Simulates the saturated observer's error system driven by `d_signal` and
/// checks `|e| <= transient_bound + 1e-9` at every sample.
///
/// Continuous time: `e' = A e - K sat(C e - D d)`, `K = P C' R^-1`, integrated
/// jointly with the Riccati ODE and the bound dynamics by RK4.
/// Discrete time: `e+ = A e - A K_k sat(C e - D d)` with the gain sequence of
/// the Riccati recursion from `P0`. The bounds are advanced with the
/// innovation `-(C e - D d)`.
pub fn bound_trajectory_check<F>(
    sys: &LinearSystem,
    cand: &CertificateCandidate,
    params: &BoundParams,
    cert: &StabilityCertificate,
    spec: &BoundCheckSpec,
    mut d_signal: F,
) -> Result<BoundCheckReport>
where
    F: FnMut(f64) -> DVector<f64>,
{
    let (n, p, m) = (sys.state_dim(), sys.output_dim(), sys.outlier_dim());
    check_dim("initial error", n, spec.e0.len())?;
    let sat0 = params.initial_state();
    let v0 = StabilityCertificate::initial_lyapunov(&spec.e0, &cand.p0, &sat0)?;
    let mut report = BoundCheckReport {
        times: Vec::new(),
        error_norms: Vec::new(),
        bounds: Vec::new(),
        max_ratio: 0.0,
    };
    let mut d_checked = |t: f64| -> Result<DVector<f64>> {
        let d = d_signal(t);
        check_dim("disturbance", m, d.len())?;
        if d.norm() > cert.mu * (1.0 + 1e-12) {
            return Err(Error::InputDomain(format!("|d({t})| = {} exceeds mu = {}", d.norm(), cert.mu)));
        }
        Ok(d)
    };
    let record = |t: f64, e: &DVector<f64>, p_t: &DMatrix<f64>, rep: &mut BoundCheckReport| -> Result<()> {
        let bound = cert.transient_bound(t, v0, p_t)?;
        let norm = e.norm();
        rep.times.push(t);
        rep.error_norms.push(norm);
        rep.bounds.push(bound);
        let ratio = if bound > 0.0 { norm / bound } else if norm == 0.0 { 0.0 } else { f64::INFINITY };
        rep.max_ratio = rep.max_ratio.max(ratio);
        if norm > bound + BOUND_SLACK {
            return Err(Error::BoundViolation { time: t, error_norm: norm, bound });
        }
        Ok(())
    };

    match sys.mode {
        TimeMode::Discrete => {
            let steps = spec.horizon.max(0.0).round() as usize;
            let mut e = spec.e0.clone();
            let mut sat = sat0;
            let mut pred = symmetrize(&cand.p0);
            for k in 0..=steps {
                let step = dt_riccati_step(sys, &pred)?;
                record(k as f64, &e, &pred, &mut report)?;
                if k == steps {
                    break;
                }
                let d = d_checked(k as f64)?;
                let arg = &sys.c * &e - &sys.d * &d;
                let clipped = saturate_innovation(&arg, &sat)?;
                sat = bound_step_dt(&sat, &(-&arg), params)?;
                e = &sys.a * (&e - &step.gain * clipped);
                pred = step.next_pred;
            }
        }
        TimeMode::Continuous => {
            if !(spec.ct_step > 0.0) {
                return Err(Error::InputDomain("ct_step must be > 0".into()));
            }
            let steps = ((spec.horizon / spec.ct_step) - 1e-9).ceil().max(0.0) as usize;
            let ctri = sys.c_rinv()?;
            let g = sys.info_gain()?;
            let unpack = |v: &DVector<f64>| {
                let s = v.as_slice();
                (
                    DVector::from_column_slice(&s[..n]),
                    DMatrix::from_column_slice(n, n, &s[n..n + n * n]),
                    SaturationState {
                        sigma: DVector::from_column_slice(&s[n + n * n..n + n * n + p]),
                        epsilon: DVector::from_column_slice(&s[n + n * n + p..]),
                    },
                )
            };
            let mut state: Vec<f64> = spec.e0.iter().copied().collect();
            state.extend_from_slice(symmetrize(&cand.p0).as_slice());
            state.extend_from_slice(sat0.sigma.as_slice());
            state.extend_from_slice(sat0.epsilon.as_slice());
            let mut v = DVector::from_vec(state);
            let mut failure: Option<Error> = None;
            for i in 0..=steps {
                let t = i as f64 * spec.ct_step;
                let (e, pt, _) = unpack(&v);
                record(t.min(spec.horizon), &e, &pt, &mut report)?;
                if i == steps {
                    break;
                }
                let h = spec.ct_step.min(spec.horizon - t);
                let mut rhs = |tau: f64, y: &DVector<f64>| -> Result<DVector<f64>> {
                    let (e, pt, sat) = unpack(y);
                    let d = d_checked(tau)?;
                    let arg = &sys.c * &e - &sys.d * &d;
                    let clipped = saturate_innovation(&arg, &sat)?;
                    let gain = &pt * &ctri;
                    let e_dot = &sys.a * &e - gain * clipped;
                    let p_dot = &sys.a * &pt + &pt * sys.a.transpose() + &sys.q - &pt * &g * &pt;
                    let rate = bound_rhs_ct(&sat, &(-&arg), params)?;
                    let mut out: Vec<f64> = e_dot.iter().copied().collect();
                    out.extend_from_slice(p_dot.as_slice());
                    out.extend_from_slice(rate.sigma_dot.as_slice());
                    out.extend_from_slice(rate.epsilon_dot.as_slice());
                    Ok(DVector::from_vec(out))
                };
                match rk4_step(&mut rhs, t, &v, h) {
                    Ok(next) => v = next,
                    Err(err) => {
                        failure = Some(err);
                        break;
                    }
                }
                let len = v.len();
                for j in n + n * n..len {
                    v[j] = v[j].max(1e-12);
                }
            }
            if let Some(err) = failure {
                return Err(err);
            }
        }
    }
    Ok(report)
}

/// Candidate grid `W = w I`, `U = u I` around a base candidate; returns the
/// certificate with the smallest asymptotic bound, with every attempt's outcome.
pub fn candidate_sweep(
    sys: &LinearSystem,
    base: &CertificateCandidate,
    params: &BoundParams,
    mu: f64,
    w_grid: &[f64],
    u_grid: &[f64],
    opts: &CertifyOptions,
) -> (Option<(CertificateCandidate, StabilityCertificate)>, Vec<(f64, f64, Result<f64>)>) {
    let (p, m) = (sys.output_dim(), sys.outlier_dim());
    let jobs: Vec<(f64, f64)> = w_grid.iter().flat_map(|&w| u_grid.iter().map(move |&u| (w, u))).collect();
    let results: Vec<(CertificateCandidate, Result<StabilityCertificate>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(w, u)| {
                scope.spawn(move || {
                    let cand = CertificateCandidate {
                        w: DMatrix::identity(p, p) * w,
                        u: DMatrix::identity(m, m) * u,
                        ..base.clone()
                    };
                    let cert = certify(sys, &cand, params, mu, opts);
                    (cand, cert)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("certify does not panic")).collect()
    });
    let mut best: Option<(CertificateCandidate, StabilityCertificate)> = None;
    let mut log = Vec::with_capacity(results.len());
    for ((w, u), (cand, cert)) in jobs.iter().zip(results) {
        match cert {
            Ok(c) => {
                log.push((*w, *u, Ok(c.asymptotic_bound())));
                if best.as_ref().map_or(true, |(_, b)| c.asymptotic_bound() < b.asymptotic_bound()) {
                    best = Some((cand, c));
                }
            }
            Err(e) => log.push((*w, *u, Err(e))),
        }
    }
    (best, log)
}

/// Relative residuals of `P_f^-1 = P_p^-1 + C'R^-1C`, `P_f^-1 K = C'R^-1`
/// and `K' P_f^-1 K = R^-1 C P_f C' R^-1` for one Kalman update.
pub fn gain_identity_residuals(c: &DMatrix<f64>, r: &DMatrix<f64>, p_pred: &DMatrix<f64>) -> Result<[f64; 3]> {
    let n = p_pred.nrows();
    let p = c.nrows();
    let sys = LinearSystem::new(
        TimeMode::Discrete,
        DMatrix::identity(n, n),
        c.clone(),
        DMatrix::zeros(n, n),
        r.clone(),
        DMatrix::zeros(p, 0),
    )?;
    let step = dt_riccati_step(&sys, p_pred)?;
    let pf_inv = linalg::spd_inverse(&step.filt, "P_{k|k}")?;
    let pp_inv = linalg::spd_inverse(p_pred, "P_{k|k-1}")?;
    let ctri = sys.c_rinv()?;
    let rel = |lhs: DMatrix<f64>, rhs: DMatrix<f64>| (&lhs - &rhs).norm() / rhs.norm().max(1.0);
    Ok([
        rel(pf_inv.clone(), &pp_inv + &ctri * c),
        rel(&pf_inv * &step.gain, ctri.clone()),
        rel(step.gain.transpose() * &pf_inv * &step.gain, ctri.transpose() * &step.filt * &ctri),
    ])
}

/// Relative residual of
/// `A^-T [P^-1 - P^-1 (P^-1 + A'Q^-1A)^-1 P^-1] A^-1 = (A P A' + Q)^-1`.
pub fn inversion_lemma_residual(a: &DMatrix<f64>, q: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<f64> {
    let a_inv = linalg::inverse(a, "A")?;
    let p_inv = linalg::spd_inverse(p, "P")?;
    let inner = linalg::spd_inverse(&(&p_inv + a.transpose() * linalg::spd_solve(q, a, "Q")?), "P^-1 + A'Q^-1A")?;
    let lhs = a_inv.transpose() * (&p_inv - &p_inv * inner * &p_inv) * &a_inv;
    let rhs = linalg::spd_inverse(&(a * p * a.transpose() + q), "A P A' + Q")?;
    Ok((lhs - &rhs).norm() / rhs.norm().max(1.0))
}
