//! Windowed regularized empirical risk over the dual loss.
//!
//! The tracker works with the last M batches of channel samples. Batch j
//! contributes its own empirical mean loss; the window averages those
//! batch means (never the pooled samples, so unequal batch sizes keep
//! equal batch weights), and two regularizers are added:
//!
//! ```text
//! R(mu) = (1/M) sum_j mean_{h in batch j} f(mu, h)
//!       + (alpha vhat / 2) ||mu||^2
//!       - beta vhat sum_c log_eps(mu_c)
//! ```
//!
//! log_eps is the log barrier below, smoothed so the risk is finite and
//! twice differentiable for every finite mu; the quadratic term makes the
//! risk strongly convex with modulus alpha*vhat. All sums use a fixed
//! pairwise reduction tree over sample-index order, so evaluation is
//! bit-reproducible no matter how it is scheduled.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::dual_core::{eval_sample, DualVector};
use crate::error::{Error, Result};
use crate::model::SystemModel;

/// One epoch's channel samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    epoch: u64,
    samples: Vec<Vec<f64>>,
}

impl Batch {
    pub fn new(epoch: u64, samples: Vec<Vec<f64>>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyWindow);
        }
        let m = samples[0].len();
        if m == 0 || !samples.iter().all(|s| s.len() == m) {
            return Err(Error::Dimension { expected: m.max(1), got: 0 });
        }
        Ok(Self { epoch, samples })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn agent_dim(&self) -> usize {
        self.samples[0].len()
    }
}

/// Ring of at most `max_window` batches with strictly increasing epoch
/// tags and a common agent dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWindow {
    batches: VecDeque<Batch>,
    max_window: usize,
}

impl SampleWindow {
    pub fn new(max_window: usize) -> Result<Self> {
        if max_window == 0 {
            return Err(Error::InvalidModel("window size must be at least 1".into()));
        }
        Ok(Self { batches: VecDeque::new(), max_window })
    }

    /// Append a batch, evicting the oldest when full. Returns the evicted
    /// batch, if any.
    pub fn push(&mut self, batch: Batch) -> Result<Option<Batch>> {
        if let Some(last) = self.batches.back() {
            if batch.epoch() <= last.epoch() {
                return Err(Error::InvalidModel(format!(
                    "batch epochs must increase: {} after {}",
                    batch.epoch(),
                    last.epoch()
                )));
            }
            if batch.agent_dim() != last.agent_dim() {
                return Err(Error::Dimension { expected: last.agent_dim(), got: batch.agent_dim() });
            }
        }
        self.batches.push_back(batch);
        Ok(if self.batches.len() > self.max_window {
            self.batches.pop_front()
        } else {
            None
        })
    }

    /// Window holding only the newest `count` batches (all of them when
    /// fewer are present). Capacity shrinks to the requested count.
    pub fn suffix(&self, count: usize) -> SampleWindow {
        let count = count.max(1);
        let skip = self.batches.len().saturating_sub(count);
        SampleWindow {
            batches: self.batches.iter().skip(skip).cloned().collect(),
            max_window: count,
        }
    }

    pub fn batches(&self) -> impl Iterator<Item = &Batch> {
        self.batches.iter()
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn max_window(&self) -> usize {
        self.max_window
    }

    pub fn newest_epoch(&self) -> Option<u64> {
        self.batches.back().map(|b| b.epoch())
    }

    pub fn total_samples(&self) -> usize {
        self.batches.iter().map(|b| b.len()).sum()
    }
}

/// Regularization weights: quadratic strength alpha, barrier strength
/// beta, barrier threshold eps, and the target statistical accuracy vhat.
/// Zero alpha or beta disables that regularizer (solvers additionally
/// require alpha > 0 for their exit certificates).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegParams {
    pub alpha: f64,
    pub beta: f64,
    pub eps: f64,
    pub v_hat: f64,
}

impl RegParams {
    pub fn new(alpha: f64, beta: f64, eps: f64, v_hat: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha >= 0.0) || !(beta.is_finite() && beta >= 0.0) {
            return Err(Error::InvalidModel(format!(
                "alpha and beta must be nonnegative, got {alpha}, {beta}"
            )));
        }
        if !(eps.is_finite() && 0.0 < eps && eps < 1.0) {
            return Err(Error::InvalidModel(format!("eps must lie in (0, 1), got {eps}")));
        }
        if !(v_hat.is_finite() && v_hat > 0.0) {
            return Err(Error::InvalidModel(format!("v_hat must be positive, got {v_hat}")));
        }
        Ok(Self { alpha, beta, eps, v_hat })
    }

    /// Curvature constant c = alpha + beta/eps^2 bounding the regularizer
    /// Hessian.
    pub fn curvature_const(&self) -> f64 {
        self.alpha + self.beta / (self.eps * self.eps)
    }

    /// Gradient-norm threshold sqrt(2 alpha) * vhat whose satisfaction
    /// certifies suboptimality at most vhat under strong convexity.
    pub fn exit_threshold(&self) -> f64 {
        (2.0 * self.alpha).sqrt() * self.v_hat
    }
}

/// Log barrier smoothed below `eps`: ln x on [eps, inf), and the
/// second-order Taylor polynomial of ln around eps below (negative x
/// included). C2 at the seam.
pub fn log_eps(x: f64, eps: f64) -> f64 {
    if x >= eps {
        x.ln()
    } else {
        let t = x - eps;
        eps.ln() + t / eps - t * t / (2.0 * eps * eps)
    }
}

/// First derivative of log_eps in x.
pub fn log_eps_d1(x: f64, eps: f64) -> f64 {
    if x >= eps {
        1.0 / x
    } else {
        1.0 / eps - (x - eps) / (eps * eps)
    }
}

/// Second derivative of log_eps in x. Always negative, so the barrier
/// term -log_eps is convex everywhere.
pub fn log_eps_d2(x: f64, eps: f64) -> f64 {
    if x >= eps {
        -1.0 / (x * x)
    } else {
        -1.0 / (eps * eps)
    }
}

/// Fixed-shape pairwise reduction over indices [lo, hi): leaves in index
/// order, splits at the midpoint. The tree shape depends only on the
/// index count, making sums independent of evaluation scheduling.
fn pairwise_sum<T>(
    lo: usize,
    hi: usize,
    leaf: &mut dyn FnMut(usize) -> Result<T>,
    merge: &dyn Fn(T, T) -> T,
) -> Result<T> {
    debug_assert!(lo < hi);
    if hi - lo == 1 {
        return leaf(lo);
    }
    let mid = lo + (hi - lo) / 2;
    let a = pairwise_sum(lo, mid, leaf, merge)?;
    let b = pairwise_sum(mid, hi, leaf, merge)?;
    Ok(merge(a, b))
}

fn window_mean<T: Clone>(
    window: &SampleWindow,
    model: &SystemModel,
    per_sample: &dyn Fn(&[f64]) -> Result<T>,
    merge: &dyn Fn(T, T) -> T,
    scale: &dyn Fn(T, f64) -> T,
) -> Result<T> {
    if window.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let batches: Vec<&Batch> = window.batches().collect();
    for b in &batches {
        if b.agent_dim() != model.agent_count() {
            return Err(Error::Dimension { expected: model.agent_count(), got: b.agent_dim() });
        }
    }
    let mut batch_mean = |j: usize| -> Result<T> {
        let samples = batches[j].samples();
        let sum = pairwise_sum(0, samples.len(), &mut |i| per_sample(&samples[i]), merge)?;
        Ok(scale(sum, 1.0 / samples.len() as f64))
    };
    let total = pairwise_sum(0, batches.len(), &mut batch_mean, merge)?;
    Ok(scale(total, 1.0 / batches.len() as f64))
}

/// Windowed empirical loss: mean over batches of the per-batch mean dual
/// loss. No regularization.
pub fn windowed_loss(mu: &DualVector, window: &SampleWindow, model: &SystemModel) -> Result<f64> {
    window_mean(
        window,
        model,
        &|h| eval_sample(mu, h, model, None).map(|(v, _)| v),
        &|a, b| a + b,
        &|v, c| v * c,
    )
}

/// Gradient of the windowed empirical loss (no regularization).
pub fn windowed_loss_grad(
    mu: &DualVector,
    window: &SampleWindow,
    model: &SystemModel,
) -> Result<DVector<f64>> {
    window_mean(
        window,
        model,
        &|h| eval_sample(mu, h, model, None).map(|(_, g)| g),
        &|a, b| a + b,
        &|v, c| v * c,
    )
}

fn quad_term(mu: &DVector<f64>, reg: &RegParams) -> f64 {
    0.5 * reg.alpha * reg.v_hat * mu.norm_squared()
}

fn barrier_term(mu: &DVector<f64>, reg: &RegParams) -> f64 {
    -reg.beta * reg.v_hat * mu.iter().map(|x| log_eps(*x, reg.eps)).sum::<f64>()
}

/// Regularized windowed risk R(mu).
pub fn reg_risk(
    mu: &DualVector,
    window: &SampleWindow,
    reg: &RegParams,
    model: &SystemModel,
) -> Result<f64> {
    Ok(windowed_loss(mu, window, model)? + quad_term(mu.as_vector(), reg)
        + barrier_term(mu.as_vector(), reg))
}

/// Gradient of the regularized windowed risk.
pub fn reg_risk_grad(
    mu: &DualVector,
    window: &SampleWindow,
    reg: &RegParams,
    model: &SystemModel,
) -> Result<DVector<f64>> {
    let mut g = windowed_loss_grad(mu, window, model)?;
    let v = mu.as_vector();
    for c in 0..v.len() {
        g[c] += reg.alpha * reg.v_hat * v[c] - reg.beta * reg.v_hat * log_eps_d1(v[c], reg.eps);
    }
    Ok(g)
}

/// Value, gradient, and Hessian of the regularized windowed risk.
#[derive(Debug, Clone)]
pub struct RiskEval {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

/// Full evaluation in one sweep over the window.
pub fn reg_risk_full(
    mu: &DualVector,
    window: &SampleWindow,
    reg: &RegParams,
    model: &SystemModel,
) -> Result<RiskEval> {
    let n = model.agent_count() + 1;
    let (value, grad, mut hess) = window_mean(
        window,
        model,
        &|h| {
            let mut hs = DMatrix::zeros(n, n);
            let (v, g) = eval_sample(mu, h, model, Some(&mut hs))?;
            Ok((v, g, hs))
        },
        &|mut a: (f64, DVector<f64>, DMatrix<f64>), b| {
            a.0 += b.0;
            a.1 += b.1;
            a.2 += b.2;
            a
        },
        &|mut t, c| {
            t.0 *= c;
            t.1 *= c;
            t.2 *= c;
            t
        },
    )?;
    let v = mu.as_vector();
    let mut grad = grad;
    let mut value = value;
    // Same association order as reg_risk, so the two agree bit for bit.
    value += quad_term(v, reg);
    value += barrier_term(v, reg);
    for c in 0..n {
        grad[c] += reg.alpha * reg.v_hat * v[c] - reg.beta * reg.v_hat * log_eps_d1(v[c], reg.eps);
        // Barrier curvature -d2 log_eps is +1/x^2 or +1/eps^2, both
        // positive, so the diagonal gains at least alpha*vhat.
        hess[(c, c)] +=
            reg.alpha * reg.v_hat - reg.beta * reg.v_hat * log_eps_d2(v[c], reg.eps);
    }
    Ok(RiskEval { value, grad, hess })
}

/// Hessian of the regularized windowed risk.
pub fn reg_risk_hess(
    mu: &DualVector,
    window: &SampleWindow,
    reg: &RegParams,
    model: &SystemModel,
) -> Result<DMatrix<f64>> {
    reg_risk_full(mu, window, reg, model).map(|e| e.hess)
}
