//! Fixed-step classical Runge-Kutta integration over flat state vectors.

use nalgebra::DVector;

use crate::error::Result;

/// One classical fourth-order Runge-Kutta step of `dy/dt = rhs(t, y)`.
pub fn rk4_step<F>(rhs: &mut F, t: f64, y: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let k1 = rhs(t, y)?;
    let k2 = rhs(t + 0.5 * h, &(y + &k1 * (0.5 * h)))?;
    let k3 = rhs(t + 0.5 * h, &(y + &k2 * (0.5 * h)))?;
    let k4 = rhs(t + h, &(y + &k3 * h))?;
    Ok(y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}
