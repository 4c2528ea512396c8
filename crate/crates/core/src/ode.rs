//! Fixed-step explicit integrators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Vector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    /// One forward-Euler step per substep.
    Euler,
    /// Classical fourth-order Runge-Kutta.
    #[default]
    Rk4,
}

pub fn step(method: Integrator, f: &impl Fn(f64, &Vector) -> Vector, t: f64, x: &Vector, h: f64) -> Vector {
    match method {
        Integrator::Euler => x + f(t, x) * h,
        Integrator::Rk4 => {
            let k1 = f(t, x);
            let k2 = f(t + 0.5 * h, &(x + &k1 * (0.5 * h)));
            let k3 = f(t + 0.5 * h, &(x + &k2 * (0.5 * h)));
            let k4 = f(t + h, &(x + &k3 * h));
            x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
        }
    }
}

/// Integrates `x' = f(t, x)` from `t0` over `span` using `substeps` equal steps.
pub fn integrate(
    method: Integrator,
    f: impl Fn(f64, &Vector) -> Vector,
    t0: f64,
    x0: &Vector,
    span: f64,
    substeps: usize,
) -> Result<Vector> {
    let n = substeps.max(1);
    let h = span / n as f64;
    let mut x = x0.clone();
    for i in 0..n {
        x = step(method, &f, t0 + i as f64 * h, &x, h);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence {
                time: t0 + (i + 1) as f64 * h,
                what: "integrated state is not finite".into(),
            });
        }
    }
    Ok(x)
}
