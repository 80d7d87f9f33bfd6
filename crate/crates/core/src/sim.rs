//! Closed-loop simulation and the experiment driver.
//!
//! The tracker operates on channel samples alone; this module closes the
//! loop. Each epoch the control loops are simulated slot by slot (channel
//! draw, powered transmission, Bernoulli packet success, state update
//! with process noise), constraint satisfaction is estimated from an
//! independent Monte Carlo gradient, and optionally a reference solve
//! prices how far the tracked iterate sits from the window optimum.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dual_core::{control_performance, recover_power, recover_target, DualVector};
use crate::error::{Error, Result};
use crate::model::SystemModel;
use crate::newton_tracker::{EpochOutcome, Tracker, TrackerConfig, TrackerState};
use crate::oracle::{expected_grad_proxy, expected_loss_proxy, solve_epoch_optimum, ORACLE_GRAD_TOL};
use crate::risk::{reg_risk, windowed_loss, RegParams, SampleWindow};
use crate::rng::{sample_exp, stream, StreamKind};

/// States beyond this magnitude freeze: the plant has diverged and
/// further updates would only overflow.
pub const STATE_FREEZE: f64 = 1e150;

/// Sample count for the per-epoch constraint-slack estimate.
pub const VIOLATION_PROXY_SAMPLES: usize = 4096;

/// XOR mask deriving the proxy seed from the experiment seed, so
/// constraint estimates never share draws with the tracker's batches.
pub const PROXY_SEED_MASK: u64 = 0xA5A5_5A5A_D00D_F00D;

/// How transmissions are decided during plant simulation.
#[derive(Debug, Clone)]
pub enum TransmitPolicy {
    /// Power from the dual iterate's recovery map; success probability
    /// follows from the channel draw.
    DualRecovery(DualVector),
    /// Per-agent success rates imposed directly, bypassing the channel.
    /// Used to validate the variance model.
    FixedRate(Vec<f64>),
}

/// Per-agent outcome of one epoch of closed-loop simulation.
#[derive(Debug, Clone)]
pub struct PlantStats {
    /// Fraction of slots whose transmission was acknowledged.
    pub success_rate: Vec<f64>,
    /// Mean squared state over the second half of the epoch's slots,
    /// past the mixing transient.
    pub state_m2: Vec<f64>,
    /// Mean power actually spent per slot.
    pub mean_power: Vec<f64>,
    /// True once the state magnitude passed the freeze threshold.
    pub diverged: Vec<bool>,
    /// Post-update state per agent and slot.
    pub trajectories: Vec<Vec<f64>>,
}

/// Simulate every plant for `slots` control slots under the epoch's
/// channel law, advancing `states` in place. Per slot and agent the
/// stream yields, in order: channel gain (dual policy only), the success
/// uniform, the process noise. A frozen plant keeps its state but still
/// accumulates statistics.
pub fn simulate_epoch_plants(
    model: &SystemModel,
    policy: &TransmitPolicy,
    epoch: u64,
    slots: usize,
    states: &mut [f64],
    seed: u64,
) -> Result<PlantStats> {
    let m = model.agent_count();
    if states.len() != m {
        return Err(Error::Dimension { expected: m, got: states.len() });
    }
    if slots == 0 {
        return Err(Error::Domain("slot count must be at least 1".into()));
    }
    match policy {
        TransmitPolicy::DualRecovery(mu) => {
            if mu.agent_count() != m {
                return Err(Error::Dimension { expected: m, got: mu.agent_count() });
            }
        }
        TransmitPolicy::FixedRate(rates) => {
            if rates.len() != m {
                return Err(Error::Dimension { expected: m, got: rates.len() });
            }
            if !rates.iter().all(|r| r.is_finite() && (0.0..=1.0).contains(r)) {
                return Err(Error::Domain("fixed rates must lie in [0, 1]".into()));
            }
        }
    }
    let mean = model.schedule().mean_at(epoch)?;
    let noise: Vec<Normal<f64>> = model
        .plants()
        .iter()
        .map(|p| Normal::new(0.0, p.noise_var().sqrt()).expect("noise_var is positive"))
        .collect();
    let mut rng = stream(seed, StreamKind::Plant, epoch, 0);
    let mut successes = vec![0usize; m];
    let mut sum_sq = vec![0.0f64; m];
    let mut sum_power = vec![0.0f64; m];
    let mut diverged = vec![false; m];
    let mut trajectories = vec![Vec::with_capacity(slots); m];
    // The second moment is measured past the mixing transient.
    let tail_start = slots / 2;
    for slot in 0..slots {
        for i in 0..m {
            let (power, success_prob) = match policy {
                TransmitPolicy::DualRecovery(mu) => {
                    let h = sample_exp(&mut rng, mean);
                    let p = recover_power(i, h, mu, model)?;
                    (p, model.success().prob(h, p))
                }
                TransmitPolicy::FixedRate(rates) => (0.0, rates[i]),
            };
            let acked = rng.random::<f64>() < success_prob;
            let w = noise[i].sample(&mut rng);
            if !diverged[i] {
                let gain =
                    if acked { model.plant(i).a_closed() } else { model.plant(i).a_open() };
                let next = gain * states[i] + w;
                if next.abs() > STATE_FREEZE {
                    diverged[i] = true;
                } else {
                    states[i] = next;
                }
            }
            if acked {
                successes[i] += 1;
            }
            sum_power[i] += power;
            if slot >= tail_start {
                sum_sq[i] += states[i] * states[i];
            }
            trajectories[i].push(states[i]);
        }
    }
    let t = slots as f64;
    let tail = (slots - tail_start) as f64;
    Ok(PlantStats {
        success_rate: successes.iter().map(|s| *s as f64 / t).collect(),
        state_m2: sum_sq.iter().map(|s| s / tail).collect(),
        mean_power: sum_power.iter().map(|s| s / t).collect(),
        diverged,
        trajectories,
    })
}

/// Stability margin 1 - omega(y_i) per agent at the iterate's recovered
/// targets; positive means the closed loop is mean-square stable.
pub fn stability_margins(mu: &DualVector, model: &SystemModel) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(model.agent_count());
    for i in 0..model.agent_count() {
        let y = recover_target(i, mu, model)?;
        let plant = model.plant(i);
        let omega = y * plant.a_closed() * plant.a_closed()
            + (1.0 - y) * plant.a_open() * plant.a_open();
        out.push(1.0 - omega);
    }
    Ok(out)
}

/// Expected constraint slacks at an iterate, estimated by Monte Carlo.
/// The expected dual-loss gradient is exactly the slack vector (success
/// margin per agent, then budget margin), so both headline numbers are
/// read off the estimated mean gradient.
#[derive(Debug, Clone)]
pub struct ViolationMetrics {
    /// Expected total power minus the budget, sign intact: positive
    /// means the budget is exceeded.
    pub power_violation: f64,
    /// Euclidean norm of the per-agent success-margin slack y_i -
    /// E[q_i], overshoot and slack alike.
    pub y_violation_norm: f64,
    /// Raw slack vector (agents then budget), sign intact.
    pub slacks: DVector<f64>,
    /// Monte Carlo standard error per slack coordinate.
    pub std_error: DVector<f64>,
}

pub fn violation_metrics(
    mu: &DualVector,
    model: &SystemModel,
    epoch: u64,
    count: usize,
    seed: u64,
) -> Result<ViolationMetrics> {
    let proxy = expected_grad_proxy(mu, model, epoch, count, seed)?;
    let m = model.agent_count();
    let power_violation = -proxy.mean[m];
    let y_violation_norm = proxy.mean.rows(0, m).norm();
    Ok(ViolationMetrics {
        power_violation,
        y_violation_norm,
        slacks: proxy.mean,
        std_error: proxy.std_error,
    })
}

/// Data-driven estimates of the constants the tracking analysis uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantEstimates {
    /// Gradient Lipschitz estimate rho for the windowed loss.
    pub grad_lipschitz: f64,
    /// Bound on the barrier slope magnitude over nonnegative iterates,
    /// 2 / eps.
    pub barrier_slope: f64,
    /// Estimated sup gap between the windowed loss and its expectation.
    pub window_gap: f64,
    /// Estimated epoch-to-epoch sup drift of the loss values.
    pub loss_drift: f64,
    /// Same for the loss gradients.
    pub grad_drift: f64,
}

impl ConstantEstimates {
    /// Multiplier on the target accuracy in the violation bound:
    /// 1 + rho + beta kappa.
    pub fn violation_factor(&self, reg: &RegParams) -> f64 {
        1.0 + self.grad_lipschitz + reg.beta * self.barrier_slope
    }

    /// Estimate every constant from two consecutive windows. Probe count
    /// trades accuracy for time; the estimates are diagnostics, not
    /// correctness inputs.
    pub fn estimate(
        model: &SystemModel,
        previous: &SampleWindow,
        current: &SampleWindow,
        reg: &RegParams,
        probes: usize,
        seed: u64,
    ) -> Result<Self> {
        let grad_lipschitz = crate::newton_tracker::estimate_lipschitz(current, model, probes, seed)?;
        let (loss_drift, grad_drift) =
            crate::newton_tracker::estimate_drift(previous, current, model, probes, seed)?;
        let epoch = current.newest_epoch().ok_or(Error::EmptyWindow)?;
        let mut rng = stream(seed, StreamKind::Probe, 2, 0);
        let coords = model.agent_count() + 1;
        let mut window_gap: f64 = 0.0;
        for _ in 0..probes.min(16) {
            let v: Vec<f64> = (0..coords).map(|_| rng.random_range(0.1..3.0)).collect();
            let mu = DualVector::from_vector(DVector::from_vec(v))
                .expect("probe coordinates are finite");
            let windowed = windowed_loss(&mu, current, model)?;
            let proxy = expected_loss_proxy(&mu, model, epoch, 20_000, seed ^ PROXY_SEED_MASK)?;
            window_gap = window_gap.max((windowed - proxy.mean).abs() + 2.0 * proxy.std_error);
        }
        Ok(Self {
            grad_lipschitz,
            barrier_slope: 2.0 / reg.eps,
            window_gap,
            loss_drift,
            grad_drift,
        })
    }
}

/// Bound on the expected constraint violation implied by a duality-gap
/// estimate `delta_hat` and the accuracy budget: sqrt(2 delta (gap + C
/// vhat)).
pub fn violation_bound(delta_hat: f64, window_gap: f64, c_hat: f64, v_hat: f64) -> f64 {
    (2.0 * delta_hat.max(0.0) * (window_gap + c_hat * v_hat).max(0.0)).sqrt()
}

/// Bound on the gap between the recovered primal objective and the
/// optimum: (1 + C) delta (1/alpha + 2 vhat (sqrt(2/alpha) + K)), with
/// `k_hat` bounding the dual iterate norms.
pub fn primal_gap_bound(delta_hat: f64, c_hat: f64, alpha: f64, v_hat: f64, k_hat: f64) -> f64 {
    (1.0 + c_hat)
        * delta_hat.max(0.0)
        * (1.0 / alpha + 2.0 * v_hat * ((2.0 / alpha).sqrt() + k_hat))
}

/// Closed-loop stability verdict assembled from realized epoch traces.
///
/// Per agent and epoch the realized mixing factor is the success-rate
/// blend of the squared gains. The contraction test is per epoch, but the
/// second-moment test compares the run-long mean against the bound: a
/// single-epoch tail estimate carries too much sampling noise (and heavy
/// tails when the gain's fourth moment is large) to serve as a watermark,
/// so epoch-level excursions are reported only as diagnostics.
#[derive(Debug, Clone)]
pub struct StabilityReport {
    /// Largest realized mixing factor per agent across epochs.
    pub max_omega: Vec<f64>,
    /// 2 W / (1 - max omega) per agent; infinite once omega reaches 1.
    pub m2_bound: Vec<f64>,
    /// Measured second moment per agent averaged over epochs.
    pub mean_m2: Vec<f64>,
    /// Largest measured second moment per agent across epochs.
    pub max_m2: Vec<f64>,
    /// (epoch, agent) pairs whose realized mixing factor reached 1.
    pub omega_failures: Vec<(u64, usize)>,
    /// (epoch, agent) pairs whose second moment exceeded the bound; noisy,
    /// informational only.
    pub m2_exceedances: Vec<(u64, usize)>,
}

impl StabilityReport {
    pub fn stable(&self) -> bool {
        self.omega_failures.is_empty()
            && self.mean_m2.iter().zip(&self.m2_bound).all(|(m2, bound)| m2 <= bound)
    }
}

pub fn stability_check(traces: &[EpochTrace], model: &SystemModel) -> Result<StabilityReport> {
    let m = model.agent_count();
    if traces.is_empty() {
        return Err(Error::Domain("stability check needs at least one epoch trace".into()));
    }
    let mut max_omega = vec![f64::NEG_INFINITY; m];
    let mut mean_m2 = vec![0.0; m];
    let mut max_m2 = vec![f64::NEG_INFINITY; m];
    let mut omega_failures = Vec::new();
    for t in traces {
        if t.success_rate.len() != m || t.state_m2.len() != m {
            return Err(Error::Dimension { expected: m, got: t.success_rate.len() });
        }
        for i in 0..m {
            let plant = model.plant(i);
            let r = t.success_rate[i];
            let omega = r * plant.a_closed() * plant.a_closed()
                + (1.0 - r) * plant.a_open() * plant.a_open();
            if omega >= 1.0 {
                omega_failures.push((t.epoch, i));
            }
            max_omega[i] = max_omega[i].max(omega);
            mean_m2[i] += t.state_m2[i] / traces.len() as f64;
            max_m2[i] = max_m2[i].max(t.state_m2[i]);
        }
    }
    let m2_bound: Vec<f64> = (0..m)
        .map(|i| {
            if max_omega[i] < 1.0 {
                2.0 * model.plant(i).noise_var() / (1.0 - max_omega[i])
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let mut m2_exceedances = Vec::new();
    for t in traces {
        for i in 0..m {
            if t.state_m2[i] > m2_bound[i] {
                m2_exceedances.push((t.epoch, i));
            }
        }
    }
    Ok(StabilityReport { max_omega, m2_bound, mean_m2, max_m2, omega_failures, m2_exceedances })
}

/// Experiment dimensions and switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExperimentConfig {
    pub epochs: usize,
    pub slots_per_epoch: usize,
    pub seed: u64,
    /// Solve each epoch's window to high accuracy for reference columns.
    pub oracle: bool,
}

impl ExperimentConfig {
    pub fn new(epochs: usize, slots_per_epoch: usize, seed: u64, oracle: bool) -> Result<Self> {
        if epochs == 0 || slots_per_epoch == 0 {
            return Err(Error::InvalidModel("epochs and slots_per_epoch must be at least 1".into()));
        }
        Ok(Self { epochs, slots_per_epoch, seed, oracle })
    }
}

/// One epoch's record: the iterate, its certificates, reference values
/// when the oracle ran, constraint estimates, and the closed-loop
/// measurements.
#[derive(Debug, Clone)]
pub struct EpochTrace {
    pub epoch: u64,
    /// Iterate coordinates, agents then budget multiplier.
    pub mu: Vec<f64>,
    /// Reference optimum of the same window, when solved.
    pub mu_star: Option<Vec<f64>>,
    /// Window risk of the iterate minus the reference optimum's.
    pub reg_risk_subopt: Option<f64>,
    pub grad_norm: f64,
    pub decrement: f64,
    /// Sum of per-agent performance at the iterate's targets.
    pub j_sum: f64,
    /// Same at the reference optimum.
    pub j_opt: Option<f64>,
    /// Expected total power minus the budget, sign intact.
    pub power_violation: f64,
    /// Norm of the per-agent success-margin slacks.
    pub y_violation_norm: f64,
    pub n_used: usize,
    pub m_used: usize,
    pub backtracks: usize,
    pub unconverged: bool,
    pub success_rate: Vec<f64>,
    pub state_m2: Vec<f64>,
}

/// Full experiment output.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub traces: Vec<EpochTrace>,
    pub final_state: TrackerState,
    /// Per agent: some epoch froze this plant.
    pub diverged: Vec<bool>,
}

fn record_epoch(
    model: &SystemModel,
    exp: &ExperimentConfig,
    outcome: &EpochOutcome,
    reg: &RegParams,
    states: &mut [f64],
    diverged: &mut [bool],
) -> Result<EpochTrace> {
    let epoch = outcome.state.epoch;
    let mu = &outcome.state.mu;
    let policy = TransmitPolicy::DualRecovery(mu.clone());
    let stats =
        simulate_epoch_plants(model, &policy, epoch, exp.slots_per_epoch, states, exp.seed)?;
    for (flag, hit) in diverged.iter_mut().zip(&stats.diverged) {
        *flag |= *hit;
    }
    let violations = violation_metrics(
        mu,
        model,
        epoch,
        VIOLATION_PROXY_SAMPLES,
        exp.seed ^ PROXY_SEED_MASK,
    )?;
    let (mu_star, reg_risk_subopt, j_opt) = if exp.oracle {
        let sol = solve_epoch_optimum(&outcome.window, reg, model, ORACLE_GRAD_TOL)?;
        let iterate_risk = reg_risk(mu, &outcome.window, reg, model)?;
        (
            Some(sol.mu.as_vector().iter().copied().collect::<Vec<f64>>()),
            Some(iterate_risk - sol.value),
            Some(control_performance(&sol.mu, model)?),
        )
    } else {
        (None, None, None)
    };
    Ok(EpochTrace {
        epoch,
        mu: mu.as_vector().iter().copied().collect(),
        mu_star,
        reg_risk_subopt,
        grad_norm: outcome.state.last_grad_norm,
        decrement: outcome.state.last_decrement,
        j_sum: control_performance(mu, model)?,
        j_opt,
        power_violation: violations.power_violation,
        y_violation_norm: violations.y_violation_norm,
        n_used: outcome.state.n_used,
        m_used: outcome.state.m_used,
        backtracks: outcome.state.backtracks_used,
        unconverged: outcome.unconverged,
        success_rate: stats.success_rate,
        state_m2: stats.state_m2,
    })
}

/// Run the full pipeline: initialize the tracker on epoch 0, then for
/// each epoch advance the tracker, simulate the plants under the fresh
/// iterate, estimate constraint slacks on an independent stream, and
/// optionally solve the window to reference accuracy.
pub fn run_experiment(
    model: &SystemModel,
    tracker_cfg: TrackerConfig,
    exp: &ExperimentConfig,
) -> Result<ExperimentOutput> {
    let m = model.agent_count();
    let reg = tracker_cfg.reg;
    let mut states = vec![0.0f64; m];
    let mut diverged = vec![false; m];
    let (mut tracker, first) = Tracker::initialize(model, tracker_cfg, exp.seed)?;
    log::debug!(
        "initialized in {} inner iterations, grad norm {:.3e}",
        first.init_iterations,
        first.state.last_grad_norm
    );
    let mut traces = Vec::with_capacity(exp.epochs);
    traces.push(record_epoch(model, exp, &first, &reg, &mut states, &mut diverged)?);
    for _ in 1..exp.epochs {
        let outcome = tracker.run_epoch(model)?;
        log::debug!(
            "epoch {}: grad norm {:.3e}, {} backtracks{}",
            outcome.state.epoch,
            outcome.state.last_grad_norm,
            outcome.state.backtracks_used,
            if outcome.unconverged { ", unconverged" } else { "" }
        );
        traces.push(record_epoch(model, exp, &outcome, &reg, &mut states, &mut diverged)?);
    }
    Ok(ExperimentOutput { traces, final_state: tracker.state().clone(), diverged })
}
