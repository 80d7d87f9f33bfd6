//! Subcommand drivers. Each returns the text it wants printed so tests
//! can assert on output without capturing stdout.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use rand::Rng;

use powertrack_core::check::{fd_gradient, fd_jacobian, recovery_clip_margin};
use powertrack_core::{
    bisect_power, bisect_target, check_tracking_conditions, decrement_diagnostics, dual_loss,
    dual_loss_grad, expected_loss_proxy, grid_recover, recover_all, recover_power, recover_target,
    reg_risk, reg_risk_grad, reg_risk_hess, run_experiment, sample_lagrangian,
    solve_epoch_optimum, stream, windowed_loss, Batch, ChannelSchedule, ConditionInputs,
    ConstantEstimates, DriftMode, DualVector, EpochOutcome, PlantParams, RegParams, SampleWindow,
    StreamKind, SuccessKind, SuccessModel, SystemModel, Tracker, TrackerConfig,
};

use crate::config::{load_config, Config};
use crate::trace::write_trace_csv;
use crate::CliError;

/// Command-line overrides layered on top of the config file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub no_oracle: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut Config) {
        if let Some(seed) = self.seed {
            cfg.experiment.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            cfg.experiment.epochs = epochs;
        }
        if self.no_oracle {
            cfg.experiment.oracle = false;
        }
    }
}

fn sig(x: f64) -> String {
    format!("{x:.16e}")
}

/// Run the experiment in the config and write the CSV trace. Returns a
/// short summary.
pub fn cmd_simulate(config_path: &Path, out: &Path, ov: &Overrides) -> Result<String, CliError> {
    let mut cfg = load_config(config_path)?;
    ov.apply(&mut cfg);
    let (model, tracker_cfg, exp) = cfg.build()?;
    let output = run_experiment(&model, tracker_cfg, &exp)?;
    write_trace_csv(out, &output.traces, model.agent_count())?;
    let unconverged = output.traces.iter().filter(|t| t.unconverged).count();
    let backtracks: usize = output.traces.iter().map(|t| t.backtracks).sum();
    let mut s = String::new();
    let _ = writeln!(
        s,
        "wrote {}: {} epochs, {} agents, seed {}",
        out.display(),
        output.traces.len(),
        model.agent_count(),
        exp.seed
    );
    let last = output.traces.last().expect("at least one epoch");
    let _ = writeln!(
        s,
        "final grad norm {:.3e}, {} backtracks total, {} unconverged epochs",
        last.grad_norm, backtracks, unconverged
    );
    let diverged: Vec<usize> = output
        .diverged
        .iter()
        .enumerate()
        .filter_map(|(i, d)| d.then_some(i))
        .collect();
    if diverged.is_empty() {
        let _ = writeln!(s, "no plant diverged");
    } else {
        let _ = writeln!(s, "DIVERGED plants: {diverged:?}");
    }
    Ok(s)
}

/// Tracker outcomes plus the oracle view of each epoch, collected for
/// diagnosis.
struct Calibration {
    outcomes: Vec<EpochOutcome>,
    pre_subopt: Vec<f64>,
    post_subopt: Vec<f64>,
}

fn calibrate(
    model: &SystemModel,
    tracker_cfg: TrackerConfig,
    seed: u64,
    epochs: usize,
) -> Result<Calibration, CliError> {
    let reg = tracker_cfg.reg;
    let (mut tracker, first) = Tracker::initialize(model, tracker_cfg, seed)?;
    let mut outcomes = vec![first];
    for _ in 1..epochs {
        outcomes.push(tracker.run_epoch(model)?);
    }
    let mut pre_subopt = Vec::with_capacity(outcomes.len());
    let mut post_subopt = Vec::with_capacity(outcomes.len());
    for o in &outcomes {
        let sol = solve_epoch_optimum(&o.window, &reg, model, 1e-10)?;
        pre_subopt.push(reg_risk(&o.pre_mu, &o.window, &reg, model)? - sol.value);
        post_subopt.push(reg_risk(&o.state.mu, &o.window, &reg, model)? - sol.value);
    }
    Ok(Calibration { outcomes, pre_subopt, post_subopt })
}

/// Evaluate the tracking conditions and step-quality bounds on a short
/// calibration run and render the report.
pub fn cmd_diagnose(config_path: &Path, ov: &Overrides) -> Result<String, CliError> {
    let mut cfg = load_config(config_path)?;
    ov.apply(&mut cfg);
    let (model, tracker_cfg, exp) = cfg.build()?;
    // A handful of epochs is enough to estimate constants; --epochs
    // overrides for longer calibrations.
    let epochs = if ov.epochs.is_some() { exp.epochs } else { exp.epochs.min(12) };
    let reg = tracker_cfg.reg;
    let cal = calibrate(&model, tracker_cfg, exp.seed, epochs)?;

    // Constants come from the last two windows; a single-epoch run has
    // no drift to measure, so the drift estimates default to zero.
    let (window_gap, loss_drift, grad_drift, delta_hat) = if cal.outcomes.len() >= 2 {
        let prev = &cal.outcomes[cal.outcomes.len() - 2].window;
        let cur = &cal.outcomes[cal.outcomes.len() - 1].window;
        let est = ConstantEstimates::estimate(&model, prev, cur, &reg, 24, exp.seed ^ 0x517E)?;
        (est.window_gap, est.loss_drift, est.grad_drift, est.grad_lipschitz)
    } else {
        let w = &cal.outcomes[0].window;
        let est = ConstantEstimates::estimate(&model, w, w, &reg, 24, exp.seed ^ 0x517E)?;
        (est.window_gap, 0.0, 0.0, est.grad_lipschitz)
    };
    let inputs = ConditionInputs {
        delta: delta_hat,
        alpha: reg.alpha,
        v_hat: reg.v_hat,
        curvature_const: reg.curvature_const(),
        window_gap,
        loss_drift,
        grad_drift,
    };
    let report = check_tracking_conditions(inputs);

    let mut qualifying = 0usize;
    let (mut low_ok, mut high_ok, mut quad_ok) = (0usize, 0usize, 0usize);
    for (i, o) in cal.outcomes.iter().enumerate() {
        let d = decrement_diagnostics(cal.pre_subopt[i], cal.post_subopt[i], o.state.last_decrement);
        if d.qualifies {
            qualifying += 1;
            low_ok += d.sandwich_low_ok as usize;
            high_ok += d.sandwich_high_ok as usize;
            quad_ok += d.quadratic_ok as usize;
        }
    }
    let first_pass =
        cal.outcomes.iter().filter(|o| o.state.backtracks_used == 0 && !o.unconverged).count();
    let within =
        cal.post_subopt.iter().filter(|s| **s <= reg.v_hat).count();

    let noiseless_cap = 1.0 / 144.0;
    let mut s = String::new();
    let _ = writeln!(s, "calibration: {epochs} epochs, seed {}, m = {}", exp.seed, model.agent_count());
    let _ = writeln!(
        s,
        "condition 1 (warm start stays in the Newton region): lhs {:.4e} vs 1/4: {}",
        report.cond1_lhs,
        if report.cond1_ok { "holds" } else { "FAILS" }
    );
    let _ = writeln!(
        s,
        "condition 2 (one step restores accuracy): lhs {:.4e} vs v_hat {:.4e}: {}",
        report.cond2_lhs,
        report.cond2_rhs,
        if report.cond2_ok { "holds" } else { "FAILS" }
    );
    if reg.v_hat > noiseless_cap {
        let _ = writeln!(
            s,
            "note: v_hat {:.4e} exceeds 1/144 = {:.4e}, so condition 2 cannot hold even with zero drift and zero sampling error",
            reg.v_hat, noiseless_cap
        );
    }
    let _ = writeln!(
        s,
        "these are sufficient conditions; the run itself reached v_hat accuracy at {within}/{epochs} epochs, first-pass exit at {first_pass}/{epochs}"
    );
    let _ = writeln!(
        s,
        "step quality ({} epochs in the decrement region): lower sandwich {}/{}, upper {}/{}, quadratic {}/{}",
        qualifying, low_ok, qualifying, high_ok, qualifying, quad_ok, qualifying
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "alpha={}", sig(reg.alpha));
    let _ = writeln!(s, "beta={}", sig(reg.beta));
    let _ = writeln!(s, "eps={}", sig(reg.eps));
    let _ = writeln!(s, "v_hat={}", sig(reg.v_hat));
    let _ = writeln!(s, "c={}", sig(reg.curvature_const()));
    let _ = writeln!(s, "exit_threshold={}", sig(reg.exit_threshold()));
    let _ = writeln!(s, "delta_hat={}", sig(delta_hat));
    let _ = writeln!(s, "window_gap={}", sig(window_gap));
    let _ = writeln!(s, "loss_drift={}", sig(loss_drift));
    let _ = writeln!(s, "grad_drift={}", sig(grad_drift));
    let _ = writeln!(s, "barrier_slope={}", sig(2.0 / reg.eps));
    let _ = writeln!(s, "cond1_lhs={}", sig(report.cond1_lhs));
    let _ = writeln!(s, "cond1_ok={}", report.cond1_ok);
    let _ = writeln!(s, "cond2_lhs={}", sig(report.cond2_lhs));
    let _ = writeln!(s, "cond2_rhs={}", sig(report.cond2_rhs));
    let _ = writeln!(s, "cond2_ok={}", report.cond2_ok);
    let _ = writeln!(s, "v_hat_noiseless_cap={}", sig(noiseless_cap));
    let _ = writeln!(s, "v_hat_exceeds_cap={}", reg.v_hat > noiseless_cap);
    let _ = writeln!(s, "epochs={epochs}");
    let _ = writeln!(s, "subopt_within_vhat={within}");
    let _ = writeln!(s, "first_pass_exits={first_pass}");
    let _ = writeln!(s, "sandwich_qualifying={qualifying}");
    let _ = writeln!(s, "sandwich_low_pass={low_ok}");
    let _ = writeln!(s, "sandwich_high_pass={high_ok}");
    let _ = writeln!(s, "quadratic_pass={quad_ok}");
    Ok(s)
}

/// Solve one epoch's sampled problem to reference accuracy, standalone.
pub fn cmd_oracle(config_path: &Path, epoch: u64, ov: &Overrides) -> Result<String, CliError> {
    let mut cfg = load_config(config_path)?;
    ov.apply(&mut cfg);
    let (model, tracker_cfg, exp) = cfg.build()?;
    let reg = tracker_cfg.reg;
    let samples =
        model.schedule().sample_channel(epoch, tracker_cfg.initial_batch, exp.seed, 0)?;
    let mut window = SampleWindow::new(1)?;
    window.push(Batch::new(epoch, samples)?)?;
    let sol = solve_epoch_optimum(&window, &reg, &model, 1e-10)?;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "epoch {epoch}: solved {} samples to grad norm {:.3e} in {} iterations",
        tracker_cfg.initial_batch, sol.grad_norm, sol.iterations
    );
    let _ = writeln!(
        s,
        "starts agree: {} (value spread {:.3e}, point spread {:.3e})",
        sol.starts_agree, sol.value_spread, sol.mu_spread
    );
    for (i, c) in sol.mu.as_vector().iter().enumerate() {
        if i < model.agent_count() {
            let _ = writeln!(s, "mu_star_{}={}", i + 1, sig(*c));
        } else {
            let _ = writeln!(s, "mu_star_tilde={}", sig(*c));
        }
    }
    let _ = writeln!(s, "value={}", sig(sol.value));
    let _ = writeln!(s, "grad_norm={}", sig(sol.grad_norm));
    for i in 0..model.agent_count() {
        let y = recover_target(i, &sol.mu, &model)?;
        let _ = writeln!(s, "y_{}={}", i + 1, sig(y));
    }
    Ok(s)
}

fn selftest_model() -> SystemModel {
    SystemModel::new(
        vec![
            PlantParams::new(1.1, 0.0, 1.0).unwrap(),
            PlantParams::new(1.3, 0.5, 1.2).unwrap(),
            PlantParams::new(1.5, 0.2, 0.8).unwrap(),
        ],
        SuccessModel::new(SuccessKind::NegExp, 5.0).unwrap(),
        ChannelSchedule::new(3, 1.0, 0.0, DriftMode::Linear).unwrap(),
        5.0,
    )
    .unwrap()
}

/// Draw a dual point and channel row comfortably away from recovery
/// kinks, so finite differences see a smooth function.
fn interior_point(
    rng: &mut impl Rng,
    model: &SystemModel,
    rows: usize,
) -> (DualVector, Vec<Vec<f64>>) {
    let m = model.agent_count();
    loop {
        let coords: Vec<f64> = (0..=m).map(|_| rng.random_range(0.3..3.0)).collect();
        let mu = DualVector::new(&coords[..m], coords[m]).expect("finite coords");
        let h_rows: Vec<Vec<f64>> =
            (0..rows).map(|_| (0..m).map(|_| rng.random_range(0.2..3.0)).collect()).collect();
        if h_rows.iter().all(|h| recovery_clip_margin(&mu, h, model) > 0.02) {
            return (mu, h_rows);
        }
    }
}

/// Built-in cross-checks of the analytic paths against finite
/// differences and brute force. Returns the report; fails with exit
/// code 3 if any check fails.
pub fn cmd_selftest() -> Result<String, CliError> {
    let model = selftest_model();
    let reg = RegParams::new(1.0, 1.0, 1e-3, 0.03).unwrap();
    let mut rng = stream(0xC3EC, StreamKind::Probe, 0, 0);
    let mut s = String::new();
    let mut failures = 0usize;
    let mut check = |s: &mut String, name: &str, pass: bool, detail: String| {
        if pass {
            let _ = writeln!(s, "ok   {name} ({detail})");
        } else {
            let _ = writeln!(s, "FAIL {name} ({detail})");
            failures += 1;
        }
    };

    // Per-sample envelope gradient vs central differences.
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (mu, h_rows) = interior_point(&mut rng, &model, 1);
        let h = &h_rows[0];
        let f = |x: &DVector<f64>| -> powertrack_core::Result<f64> {
            dual_loss(&DualVector::from_vector(x.clone())?, h, &model)
        };
        let fd = fd_gradient(&f, mu.as_vector(), 1e-6)?;
        let analytic = dual_loss_grad(&mu, h, &model)?;
        worst = worst.max((fd - &analytic).norm() / analytic.norm().max(1.0));
    }
    check(&mut s, "dual loss gradient vs finite differences", worst < 1e-5, format!("max rel err {worst:.2e}"));

    // Windowed risk gradient and Hessian vs finite differences.
    let (mu, h_rows) = interior_point(&mut rng, &model, 4);
    let mut window = SampleWindow::new(1)?;
    window.push(Batch::new(0, h_rows)?)?;
    let value_of = |x: &DVector<f64>| -> powertrack_core::Result<f64> {
        reg_risk(&DualVector::from_vector(x.clone())?, &window, &reg, &model)
    };
    let fd = fd_gradient(&value_of, mu.as_vector(), 1e-6)?;
    let analytic = reg_risk_grad(&mu, &window, &reg, &model)?;
    let gerr = (fd - &analytic).norm() / analytic.norm().max(1.0);
    check(&mut s, "risk gradient vs finite differences", gerr < 1e-5, format!("rel err {gerr:.2e}"));

    let grad_of = |x: &DVector<f64>| -> powertrack_core::Result<DVector<f64>> {
        reg_risk_grad(&DualVector::from_vector(x.clone())?, &window, &reg, &model)
    };
    let fd_h = fd_jacobian(&grad_of, mu.as_vector(), 1e-5)?;
    let hess = reg_risk_hess(&mu, &window, &reg, &model)?;
    let herr = (&fd_h - &hess).abs().max() / hess.abs().max().max(1.0);
    check(&mut s, "risk Hessian vs finite differences", herr < 1e-4, format!("rel err {herr:.2e}"));

    // Closed-form recoveries vs bisection and grid oracles.
    let p_cap = model.success().power_cap();
    let mut worst_p = 0.0f64;
    let mut worst_y = 0.0f64;
    for _ in 0..2000 {
        let coords: Vec<f64> = (0..4).map(|_| rng.random_range(-0.5..4.0)).collect();
        let mu = DualVector::new(&coords[..3], coords[3]).expect("finite coords");
        let h = rng.random_range(0.0..4.0);
        for agent in 0..3 {
            let p = recover_power(agent, h, &mu, &model)?;
            let b = bisect_power(mu.agent(agent), mu.budget_mult(), h, p_cap);
            worst_p = worst_p.max((p - b).abs());
            let y = recover_target(agent, &mu, &model)?;
            let yb = bisect_target(mu.agent(agent), model.plant(agent))?;
            worst_y = worst_y.max((y - yb).abs());
        }
    }
    check(&mut s, "power recovery vs bisection", worst_p < 1e-6, format!("max err {worst_p:.2e}"));
    check(&mut s, "target recovery vs bisection", worst_y < 1e-6, format!("max err {worst_y:.2e}"));

    let mut worst_grid = 0.0f64;
    let resolution = 1_000;
    for _ in 0..100 {
        let coords: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..4.0)).collect();
        let mu = DualVector::new(&coords[..3], coords[3]).expect("finite coords");
        let h = rng.random_range(0.0..4.0);
        for agent in 0..3 {
            let p = recover_power(agent, h, &mu, &model)?;
            let g = grid_recover(agent, h, &mu, &model, resolution)?;
            worst_grid = worst_grid.max((p - g).abs());
        }
    }
    let spacing = p_cap / resolution as f64;
    check(
        &mut s,
        "power recovery vs grid search",
        worst_grid <= spacing + 1e-12,
        format!("max err {worst_grid:.2e} vs spacing {spacing:.2e}"),
    );

    // The sampled envelope value agrees with the recovered maximizer.
    let (mu, h_rows) = interior_point(&mut rng, &model, 1);
    let rec = recover_all(&mu, &h_rows[0], &model)?;
    let lag = sample_lagrangian(&mu, &h_rows[0], &rec.powers, &rec.targets, &model)?;
    let loss = dual_loss(&mu, &h_rows[0], &model)?;
    let lag_err = (lag - loss).abs();
    check(&mut s, "envelope value vs recovered maximizer", lag_err < 1e-12, format!("err {lag_err:.2e}"));

    // Monte Carlo proxy reproduces the windowed mean bit for bit.
    let samples = model.schedule().sample_channel(0, 200, 7, 0)?;
    let mut w = SampleWindow::new(1)?;
    w.push(Batch::new(0, samples)?)?;
    let direct = windowed_loss(&mu, &w, &model)?;
    let proxy = expected_loss_proxy(&mu, &model, 0, 200, 7)?;
    check(
        &mut s,
        "expectation proxy matches batch mean exactly",
        proxy.mean == direct,
        format!("{} vs {}", sig(proxy.mean), sig(direct)),
    );

    if failures > 0 {
        let _ = writeln!(s, "{failures} check(s) failed");
        // The report still goes to the caller for printing.
        print!("{s}");
        return Err(CliError::Selftest(failures));
    }
    let _ = writeln!(s, "all checks passed");
    Ok(s)
}
