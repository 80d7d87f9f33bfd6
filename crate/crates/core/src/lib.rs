//! Power allocation for control loops sharing a fading wireless channel.
//!
//! m independent scalar plants close their loops over a shared medium: a
//! packet that arrives lets plant i run its stabilizing gain, a lost one
//! leaves the open-loop dynamics in charge, and the arrival probability
//! grows with the transmit power spent against the current channel gain.
//! A shared budget caps the expected total power, so the loops compete.
//!
//! The allocation that minimizes total control cost subject to the
//! per-plant success-rate requirements and the budget is found in the
//! dual domain: for a dual vector mu the per-sample Lagrangian maximum
//! has closed-form primal recoveries ([`dual_core`]), the dual function
//! is estimated by windowed sample averages with ridge and barrier
//! regularization ([`risk`]), and a single damped Newton step per epoch
//! tracks the moving minimizer as the channel statistics drift
//! ([`newton_tracker`]). Brute-force and Monte Carlo references
//! ([`oracle`]) certify every closed form, and [`sim`] closes the loop
//! with an actual plant simulation and the experiment driver.
//!
//! Everything is deterministic given a seed: random draws come from
//! counter-keyed streams ([`rng`]) addressed by purpose, epoch, and
//! attempt, never from shared mutable state.

pub mod check;
pub mod dual_core;
pub mod error;
pub mod model;
pub mod newton_tracker;
pub mod oracle;
pub mod risk;
pub mod rng;
pub mod sim;

pub use dual_core::{
    control_performance, dual_loss, dual_loss_grad, dual_loss_hess, recover_all, recover_power,
    recover_target, sample_lagrangian, Clip, DualVector, PrimalRecovery, DELTA_STAB,
};
pub use error::{Error, Result};
pub use model::{
    ChannelSchedule, DriftMode, PlantParams, SuccessKind, SuccessModel, SystemModel,
};
pub use newton_tracker::{
    check_tracking_conditions, decrement_diagnostics, estimate_drift, estimate_lipschitz,
    minimize_risk, newton_direction, newton_step, ConditionInputs, ConditionReport, Damping,
    DecrementReport, EpochOutcome, Minimized, NewtonStep, Tracker, TrackerConfig, TrackerState,
};
pub use oracle::{
    bisect_power, bisect_target, expected_grad_proxy, expected_loss_proxy, grid_recover,
    solve_epoch_optimum, GradProxy, OracleSolution, ProxyEstimate,
};
pub use risk::{
    log_eps, log_eps_d1, log_eps_d2, reg_risk, reg_risk_full, reg_risk_grad, reg_risk_hess,
    windowed_loss, windowed_loss_grad, Batch, RegParams, RiskEval, SampleWindow,
};
pub use rng::{sample_exp, stream, StreamKind};
pub use sim::{
    primal_gap_bound, run_experiment, simulate_epoch_plants, stability_check, stability_margins,
    violation_bound, violation_metrics, ConstantEstimates, EpochTrace, ExperimentConfig,
    ExperimentOutput, PlantStats, StabilityReport, TransmitPolicy, ViolationMetrics,
};
