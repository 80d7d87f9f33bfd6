//! Derivative and recovery checks, independent of the analytic code paths.
//!
//! These run in the test suites and behind the CLI selftest: central
//! finite differences for gradients and Hessians, a clip-distance probe
//! that tells FD tests whether a point is safely away from the recovery
//! kinks, and a numerical curvature-growth spot check.

use nalgebra::{DMatrix, DVector};

use crate::dual_core::{DualVector, DELTA_STAB};
use crate::error::Result;
use crate::model::SystemModel;
use crate::risk::{reg_risk_hess, RegParams, SampleWindow};

/// Central finite-difference gradient of a scalar function.
pub fn fd_gradient(
    f: &dyn Fn(&DVector<f64>) -> Result<f64>,
    x: &DVector<f64>,
    step: f64,
) -> Result<DVector<f64>> {
    let mut g = DVector::zeros(x.len());
    for c in 0..x.len() {
        let mut hi = x.clone();
        let mut lo = x.clone();
        hi[c] += step;
        lo[c] -= step;
        g[c] = (f(&hi)? - f(&lo)?) / (2.0 * step);
    }
    Ok(g)
}

/// Central finite-difference Jacobian of a vector function; for a
/// gradient input this approximates the Hessian.
pub fn fd_jacobian(
    g: &dyn Fn(&DVector<f64>) -> Result<DVector<f64>>,
    x: &DVector<f64>,
    step: f64,
) -> Result<DMatrix<f64>> {
    let n = x.len();
    let mut jac = DMatrix::zeros(n, n);
    for c in 0..n {
        let mut hi = x.clone();
        let mut lo = x.clone();
        hi[c] += step;
        lo[c] -= step;
        let dg = (g(&hi)? - g(&lo)?) / (2.0 * step);
        jac.set_column(c, &dg);
    }
    Ok(jac)
}

/// Smallest distance from any unconstrained recovery optimizer to its
/// clip bound at (mu, h). Zero whenever a sign-branch boundary (mu or h
/// nonpositive) is active, since derivatives jump there. FD tests demand
/// a healthy margin before trusting central differences.
pub fn recovery_clip_margin(mu: &DualVector, h: &[f64], model: &SystemModel) -> f64 {
    let mu_t = mu.budget_mult();
    let p_cap = model.success().power_cap();
    let mut margin = f64::INFINITY;
    for i in 0..model.agent_count() {
        let mu_i = mu.agent(i);
        if mu_i <= 0.0 || mu_t <= 0.0 || h[i] <= 0.0 {
            return 0.0;
        }
        let p_raw = (mu_i * h[i] / mu_t).ln() / h[i];
        margin = margin.min(p_raw.abs().min((p_raw - p_cap).abs()));
        let plant = model.plant(i);
        let g = plant.gain_gap();
        let lo = plant.stability_threshold() + DELTA_STAB;
        let y_raw =
            (plant.a_open() * plant.a_open() - 1.0 + (plant.noise_var() * g / mu_i).sqrt()) / g;
        margin = margin.min((y_raw - lo).abs().min((y_raw - 1.0).abs()));
    }
    margin
}

/// Numerical growth rate of the risk's third derivative against the
/// self-concordance budget: max over coordinates of
/// |d3 R / d mu_c^3| / (2 (d2 R / d mu_c^2)^{3/2}), with the third
/// derivative taken by central differences of the Hessian diagonal.
/// Values at or below 1 are consistent with a self-concordant risk along
/// the axes; this is a diagnostic, not an assertion.
pub fn self_concordance_ratio(
    mu: &DualVector,
    window: &SampleWindow,
    reg: &RegParams,
    model: &SystemModel,
    step: f64,
) -> Result<f64> {
    let x = mu.as_vector();
    let base = reg_risk_hess(mu, window, reg, model)?;
    let mut worst: f64 = 0.0;
    for c in 0..x.len() {
        let mut hi = x.clone();
        let mut lo = x.clone();
        hi[c] += step;
        lo[c] -= step;
        let h_hi = reg_risk_hess(&DualVector::from_vector(hi)?, window, reg, model)?;
        let h_lo = reg_risk_hess(&DualVector::from_vector(lo)?, window, reg, model)?;
        let d3 = (h_hi[(c, c)] - h_lo[(c, c)]) / (2.0 * step);
        let d2 = base[(c, c)];
        if d2 > 0.0 {
            worst = worst.max(d3.abs() / (2.0 * d2.powf(1.5)));
        }
    }
    Ok(worst)
}
