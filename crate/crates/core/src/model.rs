//! Problem data: plant dynamics, control-performance functions, the packet
//! success model, and the drifting channel distribution.
//!
//! Each of the m agents closes a scalar control loop over a shared fading
//! channel. A transmission with power p under channel gain h succeeds with
//! probability q(h, p); on success the plant contracts with its closed-loop
//! gain, on a drop it evolves open loop. The channel gain is exponential
//! with a mean that drifts slowly across epochs.

use crate::error::{Error, Result};
use crate::rng::{sample_exp, stream, StreamKind};

/// Scalar switched plant: gain `a_closed` on packet success, `a_open` on a
/// drop, plus zero-mean disturbance of variance `noise_var`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantParams {
    a_open: f64,
    a_closed: f64,
    noise_var: f64,
}

impl PlantParams {
    /// Requires `noise_var > 0`, `|a_closed| < 1`, and
    /// `a_open^2 > a_closed^2` (closing the loop must contract the state,
    /// otherwise the performance function is degenerate).
    pub fn new(a_open: f64, a_closed: f64, noise_var: f64) -> Result<Self> {
        if !(a_open.is_finite() && a_closed.is_finite() && noise_var.is_finite()) {
            return Err(Error::InvalidModel("plant parameters must be finite".into()));
        }
        if noise_var <= 0.0 {
            return Err(Error::InvalidModel(format!(
                "noise_var must be positive, got {noise_var}"
            )));
        }
        if a_closed.abs() >= 1.0 {
            return Err(Error::InvalidModel(format!(
                "|a_closed| must be < 1, got {a_closed}"
            )));
        }
        if a_open * a_open <= a_closed * a_closed {
            return Err(Error::InvalidModel(format!(
                "a_open^2 must exceed a_closed^2, got {a_open} vs {a_closed}"
            )));
        }
        Ok(Self { a_open, a_closed, noise_var })
    }

    pub fn a_open(&self) -> f64 {
        self.a_open
    }

    pub fn a_closed(&self) -> f64 {
        self.a_closed
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    /// a_open^2 - a_closed^2, the variance-contraction gap between the two
    /// loop modes. Positive by construction.
    pub fn gain_gap(&self) -> f64 {
        self.a_open * self.a_open - self.a_closed * self.a_closed
    }

    /// Success rate that makes the switched variance recursion marginally
    /// stable: the root of y a_closed^2 + (1-y) a_open^2 = 1, clamped to
    /// [0, 1). Zero for open-loop-stable plants.
    pub fn stability_threshold(&self) -> f64 {
        let ao2 = self.a_open * self.a_open;
        if ao2 <= 1.0 {
            0.0
        } else {
            (ao2 - 1.0) / self.gain_gap()
        }
    }

    /// Denominator 1 - a_open^2 + y (a_open^2 - a_closed^2) of the
    /// asymptotic-variance expression; positive exactly on the valid
    /// success-rate domain.
    fn variance_margin(&self, y: f64) -> f64 {
        1.0 - self.a_open * self.a_open + y * self.gain_gap()
    }

    /// Control performance J(y) = -W / (1 - [y a_closed^2 + (1-y) a_open^2]),
    /// the negative asymptotic state variance at success rate y. Finite,
    /// negative, increasing, and concave on (stability_threshold, 1].
    pub fn perf(&self, y: f64) -> Result<f64> {
        if !(y.is_finite() && y <= 1.0) {
            return Err(Error::Domain(format!("success rate {y} outside (y_min, 1]")));
        }
        let d = self.variance_margin(y);
        if d <= 0.0 {
            return Err(Error::Domain(format!(
                "success rate {y} at or below the stability threshold {}",
                self.stability_threshold()
            )));
        }
        Ok(-self.noise_var / d)
    }

    /// dJ/dy = W (a_open^2 - a_closed^2) / d(y)^2. Positive on the domain.
    pub fn perf_deriv(&self, y: f64) -> Result<f64> {
        let d = self.variance_margin(y);
        if !(y.is_finite() && y <= 1.0) || d <= 0.0 {
            return Err(Error::Domain(format!("success rate {y} outside (y_min, 1]")));
        }
        Ok(self.noise_var * self.gain_gap() / (d * d))
    }
}

/// Packet success probability family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuccessKind {
    /// q(h, p) = 1 - exp(-h p).
    NegExp,
}

/// Success function plus the per-transmission power cap p0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuccessModel {
    kind: SuccessKind,
    p_max_per_agent: f64,
}

impl SuccessModel {
    pub fn new(kind: SuccessKind, p_max_per_agent: f64) -> Result<Self> {
        if !(p_max_per_agent.is_finite() && p_max_per_agent > 0.0) {
            return Err(Error::InvalidModel(format!(
                "p_max_per_agent must be positive, got {p_max_per_agent}"
            )));
        }
        Ok(Self { kind, p_max_per_agent })
    }

    pub fn kind(&self) -> SuccessKind {
        self.kind
    }

    /// Per-transmission power cap.
    pub fn power_cap(&self) -> f64 {
        self.p_max_per_agent
    }

    /// Success probability of one transmission. Mathematically in
    /// [0, 1); rounds to exactly 1 once h p exceeds roughly 37.
    pub fn prob(&self, h: f64, p: f64) -> f64 {
        match self.kind {
            SuccessKind::NegExp => -(-h * p).exp_m1(),
        }
    }
}

/// How the channel mean moves across epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DriftMode {
    /// u_k = mean_init + drift_rate * k. Errors once the mean hits zero.
    Linear,
    /// Triangle wave between min and max, starting from mean_init and
    /// moving by drift_rate per epoch, reflecting at the bounds.
    Bounce { min: f64, max: f64 },
}

/// Exponential channel whose mean drifts by `drift_rate` per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSchedule {
    agents: usize,
    mean_init: f64,
    drift_rate: f64,
    drift_mode: DriftMode,
}

impl ChannelSchedule {
    pub fn new(agents: usize, mean_init: f64, drift_rate: f64, drift_mode: DriftMode) -> Result<Self> {
        if agents == 0 {
            return Err(Error::InvalidModel("agent count must be at least 1".into()));
        }
        if !(mean_init.is_finite() && mean_init > 0.0) {
            return Err(Error::InvalidModel(format!(
                "mean_init must be positive, got {mean_init}"
            )));
        }
        if !drift_rate.is_finite() {
            return Err(Error::InvalidModel("drift_rate must be finite".into()));
        }
        if let DriftMode::Bounce { min, max } = drift_mode {
            if !(min.is_finite() && max.is_finite() && 0.0 < min && min < max) {
                return Err(Error::InvalidModel(format!(
                    "bounce bounds must satisfy 0 < min < max, got [{min}, {max}]"
                )));
            }
            if !(min <= mean_init && mean_init <= max) {
                return Err(Error::InvalidModel(format!(
                    "mean_init {mean_init} outside bounce bounds [{min}, {max}]"
                )));
            }
        }
        Ok(Self { agents, mean_init, drift_rate, drift_mode })
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn drift_rate(&self) -> f64 {
        self.drift_rate
    }

    pub fn drift_mode(&self) -> DriftMode {
        self.drift_mode
    }

    pub fn mean_init(&self) -> f64 {
        self.mean_init
    }

    /// Channel mean u_k at the given epoch.
    pub fn mean_at(&self, epoch: u64) -> Result<f64> {
        let k = epoch as f64;
        let mean = match self.drift_mode {
            DriftMode::Linear => self.mean_init + self.drift_rate * k,
            DriftMode::Bounce { min, max } => {
                let period = 2.0 * (max - min);
                let x = (self.mean_init - min + self.drift_rate * k).rem_euclid(period);
                min + x.min(period - x)
            }
        };
        if mean <= 0.0 || !mean.is_finite() {
            return Err(Error::InvalidSchedule(format!(
                "channel mean {mean} at epoch {epoch} is not positive"
            )));
        }
        Ok(mean)
    }

    /// Draw `count` i.i.d. channel vectors for the epoch. `draw` separates
    /// re-draws of the same epoch (backtracking); the sequence for a given
    /// key extends deterministically when a larger count is requested.
    pub fn sample_channel(
        &self,
        epoch: u64,
        count: usize,
        seed: u64,
        draw: u64,
    ) -> Result<Vec<Vec<f64>>> {
        if count == 0 {
            return Err(Error::Domain("sample count must be at least 1".into()));
        }
        let mean = self.mean_at(epoch)?;
        let mut rng = stream(seed, StreamKind::ChannelBatch, epoch, draw);
        Ok((0..count)
            .map(|_| (0..self.agents).map(|_| sample_exp(&mut rng, mean)).collect())
            .collect())
    }
}

/// Full problem instance: m plants, the success model, the channel
/// schedule, and the shared expected-power budget.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    plants: Vec<PlantParams>,
    success: SuccessModel,
    schedule: ChannelSchedule,
    budget: f64,
}

impl SystemModel {
    pub fn new(
        plants: Vec<PlantParams>,
        success: SuccessModel,
        schedule: ChannelSchedule,
        budget: f64,
    ) -> Result<Self> {
        if plants.is_empty() {
            return Err(Error::InvalidModel("at least one plant required".into()));
        }
        if plants.len() != schedule.agents() {
            return Err(Error::InvalidModel(format!(
                "{} plants but schedule covers {} agents",
                plants.len(),
                schedule.agents()
            )));
        }
        if !(budget.is_finite() && budget > 0.0) {
            return Err(Error::InvalidModel(format!("budget must be positive, got {budget}")));
        }
        if budget > plants.len() as f64 * success.power_cap() {
            log::warn!(
                "budget {budget} exceeds {} x power cap {}; the budget constraint is vacuous",
                plants.len(),
                success.power_cap()
            );
        }
        Ok(Self { plants, success, schedule, budget })
    }

    pub fn agent_count(&self) -> usize {
        self.plants.len()
    }

    pub fn plants(&self) -> &[PlantParams] {
        &self.plants
    }

    pub fn plant(&self, agent: usize) -> &PlantParams {
        &self.plants[agent]
    }

    pub fn success(&self) -> &SuccessModel {
        &self.success
    }

    pub fn schedule(&self) -> &ChannelSchedule {
        &self.schedule
    }

    /// Total expected transmit power budget p_max.
    pub fn budget(&self) -> f64 {
        self.budget
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plant(a_open: f64, a_closed: f64, w: f64) -> PlantParams {
        PlantParams::new(a_open, a_closed, w).unwrap()
    }

    #[test]
    fn rejects_bad_plants() {
        assert!(PlantParams::new(1.1, 0.0, 0.0).is_err());
        assert!(PlantParams::new(1.1, 1.0, 1.0).is_err());
        assert!(PlantParams::new(0.5, 0.5, 1.0).is_err());
        assert!(PlantParams::new(0.3, 0.5, 1.0).is_err());
        assert!(PlantParams::new(f64::NAN, 0.0, 1.0).is_err());
    }

    #[test]
    fn perf_closed_loop_baseline() {
        // Fully closed loop with a_closed = 0 leaves only the noise term.
        let p = plant(1.1, 0.0, 1.0);
        assert_eq!(p.perf(1.0).unwrap(), -1.0);
    }

    #[test]
    fn perf_matches_direct_substitution() {
        let p = plant(1.1, 0.5, 1.0);
        let expected = -1.0 / (1.0 - (0.8 * 0.25 + 0.2 * 1.21));
        let got = p.perf(0.8).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - -1.792_114_695_340_501_8).abs() < 1e-12);
    }

    #[test]
    fn perf_blows_up_at_the_threshold() {
        let p = plant(1.1, 0.5, 1.0);
        let y = p.stability_threshold() + 1e-9;
        assert!(p.perf(y).unwrap().abs() > 1e8);
        assert!(p.perf(p.stability_threshold()).is_err());
        assert!(p.perf(1.0 + 1e-9).is_err());
    }

    #[test]
    fn threshold_values() {
        assert!((plant(1.1, 0.0, 1.0).stability_threshold() - 0.21 / 1.21).abs() < 1e-12);
        assert_eq!(plant(0.9, 0.0, 1.0).stability_threshold(), 0.0);
        assert!((plant(1.5, 0.8, 1.0).stability_threshold() - 1.25 / 1.61).abs() < 1e-12);
    }

    #[test]
    fn threshold_is_the_marginal_stability_root() {
        for p in [plant(1.1, 0.0, 1.0), plant(1.5, 0.8, 1.0), plant(1.2, 0.6, 2.0)] {
            let y = p.stability_threshold();
            let bracket = y * p.a_closed() * p.a_closed() + (1.0 - y) * p.a_open() * p.a_open();
            assert!((bracket - 1.0).abs() < 1e-12);
            assert!(y < 1.0);
        }
    }

    #[test]
    fn perf_is_monotone_and_concave() {
        let p = plant(1.3, 0.4, 1.5);
        let lo = p.stability_threshold() + 1e-3;
        let mut rng = stream(42, StreamKind::Probe, 0, 0);
        for _ in 0..500 {
            let a = lo + (1.0 - lo) * rand::Rng::random::<f64>(&mut rng);
            let b = lo + (1.0 - lo) * rand::Rng::random::<f64>(&mut rng);
            let (ja, jb) = (p.perf(a).unwrap(), p.perf(b).unwrap());
            if a < b {
                assert!(ja < jb);
            }
            let mid = p.perf(0.5 * (a + b)).unwrap();
            assert!(mid >= 0.5 * (ja + jb) - 1e-12);
        }
    }

    #[test]
    fn success_prob_monotone_and_zero_at_origin() {
        let s = SuccessModel::new(SuccessKind::NegExp, 5.0).unwrap();
        for h in [0.0, 0.3, 1.0, 4.0] {
            assert_eq!(s.prob(h, 0.0), 0.0);
            let mut prev = -1.0;
            for step in 0..50 {
                let p = step as f64 * 0.2;
                let q = s.prob(h, p);
                assert!((0.0..=1.0).contains(&q));
                assert!(q >= prev);
                prev = q;
            }
        }
        // Monotone in h as well.
        for p in [0.1, 1.0, 5.0] {
            assert!(s.prob(0.5, p) <= s.prob(1.5, p));
        }
    }

    #[test]
    fn sampler_is_deterministic() {
        let sched = ChannelSchedule::new(3, 1.0, 0.0, DriftMode::Linear).unwrap();
        let a = sched.sample_channel(4, 3, 99, 0).unwrap();
        let b = sched.sample_channel(4, 3, 99, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|v| v.len() == 3));
        let c = sched.sample_channel(4, 3, 99, 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sampler_mean_matches_schedule() {
        let sched = ChannelSchedule::new(1, 1.7, 0.0, DriftMode::Linear).unwrap();
        let batch = sched.sample_channel(0, 1_000_000, 7, 0).unwrap();
        let mean: f64 = batch.iter().map(|v| v[0]).sum::<f64>() / batch.len() as f64;
        assert!((mean - 1.7).abs() / 1.7 < 0.01, "sample mean {mean}");
    }

    #[test]
    fn linear_drift_errors_at_nonpositive_mean() {
        let sched = ChannelSchedule::new(1, 1.0, -0.1, DriftMode::Linear).unwrap();
        assert!(sched.mean_at(5).is_ok());
        assert!(sched.mean_at(10).is_err());
        assert!(sched.sample_channel(10, 5, 1, 0).is_err());
    }

    #[test]
    fn bounce_reflects_and_stays_positive() {
        let sched =
            ChannelSchedule::new(1, 1.0, 0.02, DriftMode::Bounce { min: 0.5, max: 2.0 }).unwrap();
        assert_eq!(sched.mean_at(0).unwrap(), 1.0);
        assert!((sched.mean_at(50).unwrap() - 2.0).abs() < 1e-12);
        assert!((sched.mean_at(51).unwrap() - 1.98).abs() < 1e-12);
        let mut seen_low = false;
        for k in 0..50_000 {
            let u = sched.mean_at(k).unwrap();
            assert!(u >= 0.5 - 1e-12 && u <= 2.0 + 1e-12);
            if u < 0.52 {
                seen_low = true;
            }
        }
        assert!(seen_low);
    }

    #[test]
    fn bounce_validates_bounds() {
        assert!(ChannelSchedule::new(1, 1.0, 0.1, DriftMode::Bounce { min: 0.0, max: 2.0 }).is_err());
        assert!(ChannelSchedule::new(1, 3.0, 0.1, DriftMode::Bounce { min: 0.5, max: 2.0 }).is_err());
        assert!(ChannelSchedule::new(1, 1.0, 0.1, DriftMode::Bounce { min: 2.0, max: 2.0 }).is_err());
    }

    #[test]
    fn system_model_checks_shapes() {
        let plants = vec![plant(1.1, 0.0, 1.0), plant(1.2, 0.3, 1.0)];
        let success = SuccessModel::new(SuccessKind::NegExp, 5.0).unwrap();
        let sched = ChannelSchedule::new(2, 1.0, 0.0, DriftMode::Linear).unwrap();
        assert!(SystemModel::new(plants.clone(), success, sched.clone(), 4.0).is_ok());
        assert!(SystemModel::new(vec![], success, sched.clone(), 4.0).is_err());
        assert!(SystemModel::new(plants.clone(), success, sched.clone(), -1.0).is_err());
        let sched3 = ChannelSchedule::new(3, 1.0, 0.0, DriftMode::Linear).unwrap();
        assert!(SystemModel::new(plants, success, sched3, 4.0).is_err());
    }
}
