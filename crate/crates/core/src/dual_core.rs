//! Per-sample dual loss of the power-allocation Lagrangian.
//!
//! For dual variables mu = [mu_1 .. mu_m; mu_t] and one channel draw h, the
//! loss is the inner maximum of the sampled Lagrangian over powers and
//! target success rates:
//!
//! ```text
//! f(mu, h) = sum_i J_i(y_i(mu))
//!          + sum_i mu_i [ q(h_i, p_i(h_i, mu)) - y_i(mu) ]
//!          + mu_t [ p_max - sum_i p_i(h_i, mu) ]
//! ```
//!
//! where each p_i maximizes mu_i q(h_i, p) - mu_t p over [0, p0] and each
//! y_i maximizes J_i(y) - mu_i y over the valid success-rate interval. Both
//! maximizations have closed forms for the negative-exponential success
//! model; a derivative-bisection fallback with identical semantics lives in
//! `oracle` and certifies them in tests. As a pointwise maximum of affine
//! functions of mu, f is convex, its gradient is the constraint-slack
//! vector at the recovered primal point (envelope form), and its Hessian
//! follows by differentiating the recoveries where they are interior;
//! clipped coordinates contribute zero.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{PlantParams, SystemModel};

/// Clearance kept above the stability threshold when clipping recovered
/// targets, so the performance function stays finite.
pub const DELTA_STAB: f64 = 1e-6;

/// The m+1 dual variables: one per success-rate constraint plus the budget
/// multiplier. Finite by construction; the nonnegative orthant is the
/// intended region but is enforced softly by the barrier in `risk`, so
/// every operation accepts small negative coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct DualVector(DVector<f64>);

impl DualVector {
    pub fn new(per_agent: &[f64], budget_mult: f64) -> Result<Self> {
        let mut v = DVector::zeros(per_agent.len() + 1);
        v.as_mut_slice()[..per_agent.len()].copy_from_slice(per_agent);
        v[per_agent.len()] = budget_mult;
        Self::from_vector(v)
    }

    /// Wrap a raw vector [mu_1 .. mu_m, mu_t]. Needs length >= 2 and all
    /// coordinates finite.
    pub fn from_vector(v: DVector<f64>) -> Result<Self> {
        if v.len() < 2 {
            return Err(Error::Dimension { expected: 2, got: v.len() });
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical("dual vector has non-finite coordinates".into()));
        }
        Ok(Self(v))
    }

    /// All-ones vector for m agents, a generic interior starting point.
    pub fn ones(agents: usize) -> Self {
        Self(DVector::from_element(agents + 1, 1.0))
    }

    pub fn agent_count(&self) -> usize {
        self.0.len() - 1
    }

    pub fn agent(&self, i: usize) -> f64 {
        self.0[i]
    }

    /// The budget multiplier mu_t.
    pub fn budget_mult(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }
}

/// Where a 1-D recovery landed relative to its feasible interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clip {
    Interior,
    Lower,
    Upper,
}

/// Maximizer of mu_i q(h, p) - mu_t p over [0, p_cap] for the
/// negative-exponential q. Total over all sign combinations; the clipped
/// branch is chosen when the unconstrained optimizer sits exactly on a
/// bound.
pub(crate) fn power_argmax(mu_i: f64, mu_t: f64, h: f64, p_cap: f64) -> (f64, Clip) {
    if h <= 0.0 {
        // q is identically zero; only the -mu_t p term is left.
        return if mu_t < 0.0 { (p_cap, Clip::Upper) } else { (0.0, Clip::Lower) };
    }
    if mu_i <= 0.0 {
        if mu_t >= 0.0 {
            return (0.0, Clip::Lower);
        }
        // Convex objective: the maximum is at an endpoint.
        let at_cap = mu_i * -(-h * p_cap).exp_m1() - mu_t * p_cap;
        return if at_cap > 0.0 { (p_cap, Clip::Upper) } else { (0.0, Clip::Lower) };
    }
    if mu_t <= 0.0 {
        // No power penalty (or a reward): unbounded incentive, cap binds.
        return (p_cap, Clip::Upper);
    }
    let ratio = mu_i * h / mu_t;
    if ratio <= 1.0 {
        // Slope mu_i h - mu_t at the origin is nonpositive.
        return (0.0, Clip::Lower);
    }
    let p = ratio.ln() / h;
    if p >= p_cap {
        (p_cap, Clip::Upper)
    } else {
        (p, Clip::Interior)
    }
}

/// Maximizer of J(y) - mu_i y over [y_min + DELTA_STAB, 1]. Stationarity
/// gives y = (a_open^2 - 1 + sqrt(W g / mu_i)) / g with g the gain gap.
pub(crate) fn target_argmax(mu_i: f64, plant: &PlantParams) -> (f64, Clip) {
    let lo = plant.stability_threshold() + DELTA_STAB;
    if mu_i <= 0.0 {
        // J is increasing, so an unpenalized (or rewarded) target saturates.
        return (1.0, Clip::Upper);
    }
    let g = plant.gain_gap();
    let ao2 = plant.a_open() * plant.a_open();
    let y = (ao2 - 1.0 + (plant.noise_var() * g / mu_i).sqrt()) / g;
    if y >= 1.0 {
        (1.0, Clip::Upper)
    } else if y <= lo {
        (lo, Clip::Lower)
    } else {
        (y, Clip::Interior)
    }
}

/// Recovered primal point for one channel draw: per-agent powers and
/// target success rates with their clip states. `boundary_hits` counts
/// recoveries whose unconstrained optimizer landed exactly on a clip
/// bound (the one-sided, clipped branch is used there).
#[derive(Debug, Clone)]
pub struct PrimalRecovery {
    pub powers: Vec<f64>,
    pub targets: Vec<f64>,
    pub power_clips: Vec<Clip>,
    pub target_clips: Vec<Clip>,
    pub boundary_hits: usize,
}

fn check_channel(h: &[f64], model: &SystemModel) -> Result<()> {
    if h.len() != model.agent_count() {
        return Err(Error::Dimension { expected: model.agent_count(), got: h.len() });
    }
    if !h.iter().all(|x| x.is_finite() && *x >= 0.0) {
        return Err(Error::Domain("channel gains must be finite and nonnegative".into()));
    }
    Ok(())
}

fn check_mu(mu: &DualVector, model: &SystemModel) -> Result<()> {
    if mu.agent_count() != model.agent_count() {
        return Err(Error::Dimension { expected: model.agent_count(), got: mu.agent_count() });
    }
    Ok(())
}

/// Solve all 2m inner maximizations for one channel draw.
pub fn recover_all(mu: &DualVector, h: &[f64], model: &SystemModel) -> Result<PrimalRecovery> {
    check_mu(mu, model)?;
    check_channel(h, model)?;
    let m = model.agent_count();
    let p_cap = model.success().power_cap();
    let mu_t = mu.budget_mult();
    let mut out = PrimalRecovery {
        powers: Vec::with_capacity(m),
        targets: Vec::with_capacity(m),
        power_clips: Vec::with_capacity(m),
        target_clips: Vec::with_capacity(m),
        boundary_hits: 0,
    };
    for i in 0..m {
        let mu_i = mu.agent(i);
        let (p, pc) = power_argmax(mu_i, mu_t, h[i], p_cap);
        if pc != Clip::Interior && mu_i > 0.0 && mu_t > 0.0 && h[i] > 0.0 {
            let ratio = mu_i * h[i] / mu_t;
            if ratio == 1.0 || (ratio > 1.0 && ratio.ln() / h[i] == p_cap) {
                out.boundary_hits += 1;
            }
        }
        let (y, yc) = target_argmax(mu_i, model.plant(i));
        if yc != Clip::Interior && mu_i > 0.0 {
            let plant = model.plant(i);
            let g = plant.gain_gap();
            let raw = (plant.a_open() * plant.a_open() - 1.0
                + (plant.noise_var() * g / mu_i).sqrt())
                / g;
            if raw == 1.0 || raw == plant.stability_threshold() + DELTA_STAB {
                out.boundary_hits += 1;
            }
        }
        out.powers.push(p);
        out.power_clips.push(pc);
        out.targets.push(y);
        out.target_clips.push(yc);
    }
    Ok(out)
}

/// Power allocated to one agent under channel gain `h_gain`.
pub fn recover_power(agent: usize, h_gain: f64, mu: &DualVector, model: &SystemModel) -> Result<f64> {
    check_mu(mu, model)?;
    if agent >= model.agent_count() {
        return Err(Error::Dimension { expected: model.agent_count(), got: agent });
    }
    if !(h_gain.is_finite() && h_gain >= 0.0) {
        return Err(Error::Domain(format!("channel gain {h_gain} must be nonnegative")));
    }
    Ok(power_argmax(mu.agent(agent), mu.budget_mult(), h_gain, model.success().power_cap()).0)
}

/// Target success rate of one agent; depends on mu only.
pub fn recover_target(agent: usize, mu: &DualVector, model: &SystemModel) -> Result<f64> {
    check_mu(mu, model)?;
    if agent >= model.agent_count() {
        return Err(Error::Dimension { expected: model.agent_count(), got: agent });
    }
    Ok(target_argmax(mu.agent(agent), model.plant(agent)).0)
}

/// Value, gradient, and optionally the Hessian of f(mu, h) in one pass.
pub(crate) fn eval_sample(
    mu: &DualVector,
    h: &[f64],
    model: &SystemModel,
    hess: Option<&mut DMatrix<f64>>,
) -> Result<(f64, DVector<f64>)> {
    let rec = recover_all(mu, h, model)?;
    let m = model.agent_count();
    let mu_t = mu.budget_mult();
    let mut value = 0.0;
    let mut grad = DVector::zeros(m + 1);
    let mut power_sum = 0.0;
    for i in 0..m {
        let y = rec.targets[i];
        let p = rec.powers[i];
        let q = model.success().prob(h[i], p);
        value += model.plant(i).perf(y)?;
        let slack = q - y;
        grad[i] = slack;
        value += mu.agent(i) * slack;
        power_sum += p;
    }
    let budget_slack = model.budget() - power_sum;
    grad[m] = budget_slack;
    value += mu_t * budget_slack;

    if let Some(hess) = hess {
        hess.fill(0.0);
        for i in 0..m {
            let mu_i = mu.agent(i);
            if rec.power_clips[i] == Clip::Interior {
                // Interior power: q = 1 - mu_t/(mu_i h), p = ln(mu_i h/mu_t)/h.
                let hg = h[i];
                hess[(i, i)] += mu_t / (mu_i * mu_i * hg);
                hess[(i, m)] -= 1.0 / (mu_i * hg);
                hess[(m, i)] -= 1.0 / (mu_i * hg);
                hess[(m, m)] += 1.0 / (hg * mu_t);
            }
            if rec.target_clips[i] == Clip::Interior {
                // d grad_i / d mu_i = -dy/dmu_i = (1/2) sqrt(W/g) mu_i^{-3/2}.
                let plant = model.plant(i);
                let g = plant.gain_gap();
                hess[(i, i)] += 0.5 * (plant.noise_var() / g).sqrt() * mu_i.powf(-1.5);
            }
        }
    }
    Ok((value, grad))
}

/// Dual loss f(mu, h) for one channel draw.
pub fn dual_loss(mu: &DualVector, h: &[f64], model: &SystemModel) -> Result<f64> {
    eval_sample(mu, h, model, None).map(|(v, _)| v)
}

/// Envelope gradient of f: component i is q(h_i, p_i) - y_i, component
/// m+1 is the budget slack p_max - sum_i p_i.
pub fn dual_loss_grad(mu: &DualVector, h: &[f64], model: &SystemModel) -> Result<DVector<f64>> {
    eval_sample(mu, h, model, None).map(|(_, g)| g)
}

/// Analytic Hessian of f. Symmetric PSD: each interior power contributes a
/// rank-one block, each interior target a positive diagonal entry, and
/// clipped recoveries contribute nothing.
pub fn dual_loss_hess(mu: &DualVector, h: &[f64], model: &SystemModel) -> Result<DMatrix<f64>> {
    let n = model.agent_count() + 1;
    let mut hess = DMatrix::zeros(n, n);
    eval_sample(mu, h, model, Some(&mut hess))?;
    Ok(hess)
}

/// Sampled Lagrangian at an explicit feasible primal point (p', y'). By
/// definition of the inner maximum this never exceeds dual_loss at the
/// same (mu, h).
pub fn sample_lagrangian(
    mu: &DualVector,
    h: &[f64],
    powers: &[f64],
    targets: &[f64],
    model: &SystemModel,
) -> Result<f64> {
    check_mu(mu, model)?;
    check_channel(h, model)?;
    let m = model.agent_count();
    if powers.len() != m || targets.len() != m {
        return Err(Error::Dimension { expected: m, got: powers.len().min(targets.len()) });
    }
    let p_cap = model.success().power_cap();
    let mut value = 0.0;
    let mut power_sum = 0.0;
    for i in 0..m {
        if !(0.0..=p_cap).contains(&powers[i]) {
            return Err(Error::Domain(format!("power {} outside [0, {p_cap}]", powers[i])));
        }
        value += model.plant(i).perf(targets[i])?;
        value += mu.agent(i) * (model.success().prob(h[i], powers[i]) - targets[i]);
        power_sum += powers[i];
    }
    Ok(value + mu.budget_mult() * (model.budget() - power_sum))
}

/// Total control performance sum_i J_i(y_i(mu)) at the recovered targets.
/// Channel-independent because the targets depend on mu alone.
pub fn control_performance(mu: &DualVector, model: &SystemModel) -> Result<f64> {
    check_mu(mu, model)?;
    let mut total = 0.0;
    for i in 0..model.agent_count() {
        let (y, _) = target_argmax(mu.agent(i), model.plant(i));
        total += model.plant(i).perf(y)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ChannelSchedule, DriftMode, SuccessKind, SuccessModel};
    use crate::rng::{stream, StreamKind};
    use rand::Rng;

    fn model_m1(p_cap: f64, budget: f64) -> SystemModel {
        SystemModel::new(
            vec![PlantParams::new(1.1, 0.0, 1.0).unwrap()],
            SuccessModel::new(SuccessKind::NegExp, p_cap).unwrap(),
            ChannelSchedule::new(1, 1.0, 0.0, DriftMode::Linear).unwrap(),
            budget,
        )
        .unwrap()
    }

    #[test]
    fn power_nonpositive_slope_stays_at_origin() {
        assert_eq!(power_argmax(1.0, 1.0, 1.0, 10.0), (0.0, Clip::Lower));
    }

    #[test]
    fn power_interior_log_ratio() {
        let (p, c) = power_argmax(2.0, 1.0, 1.0, 10.0);
        assert_eq!(c, Clip::Interior);
        assert!((p - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn power_cap_binds() {
        assert_eq!(power_argmax(2.0, 1.0, 1.0, 0.5), (0.5, Clip::Upper));
    }

    #[test]
    fn power_edge_cases() {
        // Zero budget multiplier: unbounded incentive, cap binds.
        assert_eq!(power_argmax(2.0, 0.0, 1.0, 3.0), (3.0, Clip::Upper));
        // Dead channel transmits nothing.
        assert_eq!(power_argmax(2.0, 1.0, 0.0, 3.0), (0.0, Clip::Lower));
        // Nonpositive agent multiplier with a power price: stay silent.
        assert_eq!(power_argmax(-1.0, 1.0, 1.0, 3.0), (0.0, Clip::Lower));
        // Negative price and negative incentive: endpoint comparison.
        let (p, _) = power_argmax(-0.1, -2.0, 1.0, 3.0);
        assert_eq!(p, 3.0);
        let (p, _) = power_argmax(-10.0, -0.1, 1.0, 3.0);
        assert_eq!(p, 0.0);
    }

    #[test]
    fn target_touches_upper_clip_exactly() {
        let plant = PlantParams::new(1.1, 0.0, 1.0).unwrap();
        let (y, c) = target_argmax(1.21, &plant);
        assert_eq!(y, 1.0);
        assert_eq!(c, Clip::Upper);
    }

    #[test]
    fn target_interior_stationarity() {
        let plant = PlantParams::new(1.1, 0.0, 1.0).unwrap();
        let (y, c) = target_argmax(4.84, &plant);
        assert_eq!(c, Clip::Interior);
        assert!((y - 0.71 / 1.21).abs() < 1e-15);
        // Stationarity: J'(y) = mu.
        assert!((plant.perf_deriv(y).unwrap() - 4.84).abs() < 1e-10);
    }

    #[test]
    fn target_saturates_for_vanishing_multiplier() {
        let plant = PlantParams::new(1.1, 0.0, 1.0).unwrap();
        assert_eq!(target_argmax(1e-12, &plant).0, 1.0);
        assert_eq!(target_argmax(0.0, &plant).0, 1.0);
        assert_eq!(target_argmax(-1.0, &plant).0, 1.0);
    }

    #[test]
    fn target_lower_clip_keeps_clearance() {
        let plant = PlantParams::new(1.1, 0.0, 1.0).unwrap();
        let (y, c) = target_argmax(1e12, &plant);
        assert_eq!(c, Clip::Lower);
        assert!((y - (plant.stability_threshold() + DELTA_STAB)).abs() < 1e-18);
        assert!(plant.perf(y).is_ok());
    }

    #[test]
    fn loss_matches_clipped_substitution() {
        // Forced p = 0 (low channel incentive) and y at the upper clip.
        let model = model_m1(10.0, 4.0);
        let mu = DualVector::new(&[1.0], 1.0).unwrap();
        let h = [1.0];
        let (p, _) = power_argmax(1.0, 1.0, 1.0, 10.0);
        assert_eq!(p, 0.0);
        let (y, _) = target_argmax(1.0, model.plant(0));
        assert_eq!(y, 1.0);
        let f = dual_loss(&mu, &h, &model).unwrap();
        let expected = model.plant(0).perf(1.0).unwrap() + 1.0 * (0.0 - 1.0) + 1.0 * 4.0;
        assert!((f - expected).abs() < 1e-15);
    }

    #[test]
    fn grad_at_fully_clipped_point() {
        let model = model_m1(10.0, 4.0);
        let mu = DualVector::new(&[1.0], 1.0).unwrap();
        let g = dual_loss_grad(&mu, &[1.0], &model).unwrap();
        assert_eq!(g[0], -1.0);
        assert_eq!(g[1], 4.0);
    }

    #[test]
    fn hess_zero_when_fully_clipped() {
        let model = model_m1(10.0, 4.0);
        let mu = DualVector::new(&[1.0], 1.0).unwrap();
        let hess = dual_loss_hess(&mu, &[1.0], &model).unwrap();
        assert_eq!(hess, DMatrix::zeros(2, 2));
    }

    fn random_model(rng: &mut impl Rng) -> SystemModel {
        let m = rng.random_range(1..5);
        let plants: Vec<_> = (0..m)
            .map(|_| {
                let a_closed: f64 = rng.random_range(0.0..0.8);
                let a_open = rng.random_range(a_closed + 0.15..1.5);
                PlantParams::new(a_open, a_closed, rng.random_range(0.5..2.0)).unwrap()
            })
            .collect();
        SystemModel::new(
            plants,
            SuccessModel::new(SuccessKind::NegExp, rng.random_range(0.5..8.0)).unwrap(),
            ChannelSchedule::new(m, 1.0, 0.0, DriftMode::Linear).unwrap(),
            rng.random_range(0.5..8.0),
        )
        .unwrap()
    }

    fn random_mu(rng: &mut impl Rng, m: usize, lo: f64, hi: f64) -> DualVector {
        let v: Vec<f64> = (0..m).map(|_| rng.random_range(lo..hi)).collect();
        DualVector::new(&v, rng.random_range(lo..hi)).unwrap()
    }

    #[test]
    fn loss_is_convex_along_random_segments() {
        let mut rng = stream(21, StreamKind::Probe, 0, 0);
        for _ in 0..1000 {
            let model = random_model(&mut rng);
            let m = model.agent_count();
            let mu_a = random_mu(&mut rng, m, 1e-3, 6.0);
            let mu_b = random_mu(&mut rng, m, 1e-3, 6.0);
            let h: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..4.0)).collect();
            let mid = DualVector::from_vector(0.5 * (mu_a.as_vector() + mu_b.as_vector())).unwrap();
            let fa = dual_loss(&mu_a, &h, &model).unwrap();
            let fb = dual_loss(&mu_b, &h, &model).unwrap();
            let fm = dual_loss(&mid, &h, &model).unwrap();
            assert!(fm <= 0.5 * (fa + fb) + 1e-9, "convexity violated: {fm} vs {}", 0.5 * (fa + fb));
        }
    }

    #[test]
    fn loss_dominates_lagrangian_at_feasible_points() {
        let mut rng = stream(22, StreamKind::Probe, 0, 0);
        for _ in 0..500 {
            let model = random_model(&mut rng);
            let m = model.agent_count();
            let mu = random_mu(&mut rng, m, 1e-3, 5.0);
            let h: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..4.0)).collect();
            let powers: Vec<f64> =
                (0..m).map(|_| rng.random_range(0.0..model.success().power_cap())).collect();
            let targets: Vec<f64> = (0..m)
                .map(|i| {
                    let lo = model.plant(i).stability_threshold() + DELTA_STAB;
                    rng.random_range(lo..1.0)
                })
                .collect();
            let lag = sample_lagrangian(&mu, &h, &powers, &targets, &model).unwrap();
            let f = dual_loss(&mu, &h, &model).unwrap();
            assert!(lag <= f + 1e-12, "inner max violated: {lag} > {f}");
        }
    }

    #[test]
    fn hessian_is_symmetric_psd_at_random_points() {
        let mut rng = stream(23, StreamKind::Probe, 0, 0);
        for _ in 0..100 {
            let model = random_model(&mut rng);
            let m = model.agent_count();
            let mu = random_mu(&mut rng, m, 1e-2, 5.0);
            let h: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..4.0)).collect();
            let hess = dual_loss_hess(&mu, &h, &model).unwrap();
            for i in 0..=m {
                for j in 0..=m {
                    assert!((hess[(i, j)] - hess[(j, i)]).abs() < 1e-12);
                }
            }
            let eigs = hess.symmetric_eigenvalues();
            assert!(eigs.iter().all(|e| *e >= -1e-10), "negative eigenvalue: {eigs}");
        }
    }

    #[test]
    fn dual_vector_validates() {
        assert!(DualVector::new(&[], 1.0).is_err());
        assert!(DualVector::new(&[f64::NAN], 1.0).is_err());
        assert!(DualVector::new(&[1.0], f64::INFINITY).is_err());
        let mu = DualVector::new(&[0.5, 2.0], 3.0).unwrap();
        assert_eq!(mu.agent_count(), 2);
        assert_eq!(mu.agent(1), 2.0);
        assert_eq!(mu.budget_mult(), 3.0);
    }

    #[test]
    fn dimension_mismatches_are_rejected() {
        let model = model_m1(10.0, 4.0);
        let mu = DualVector::new(&[1.0, 1.0], 1.0).unwrap();
        assert!(dual_loss(&mu, &[1.0, 1.0], &model).is_err());
        let mu1 = DualVector::new(&[1.0], 1.0).unwrap();
        assert!(dual_loss(&mu1, &[1.0, 2.0], &model).is_err());
        assert!(dual_loss(&mu1, &[-0.5], &model).is_err());
    }

    #[test]
    fn control_performance_sums_recovered_targets() {
        let model = model_m1(10.0, 4.0);
        let mu = DualVector::new(&[4.84], 1.0).unwrap();
        let y = recover_target(0, &mu, &model).unwrap();
        let expected = model.plant(0).perf(y).unwrap();
        assert!((control_performance(&mu, &model).unwrap() - expected).abs() < 1e-15);
    }
}
