//! Online moment accumulators and the closed-form scale estimate
//! sigma^2 = V[R] + V[gamma] * E[G^2], with its floors and variants.
//!
//! All accumulators use f64 throughout; variance is computed with the
//! population convention (m2 / count), which makes the small closed-form
//! tests exact.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TdScaleError};

/// Welford-style count/mean/M2 accumulator, mergeable across workers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningMoments {
    pub count: u64,
    pub mean: f64,
    /// Sum of squared deviations from the running mean.
    pub m2: f64,
}

impl RunningMoments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_slice(xs: &[f64]) -> Result<Self> {
        let mut m = Self::new();
        for &x in xs {
            m.update(x)?;
        }
        Ok(m)
    }

    /// Observe one value. Rejects NaN/inf, which would poison the stream.
    pub fn update(&mut self, x: f64) -> Result<()> {
        if !x.is_finite() {
            return Err(TdScaleError::NonFinite(x));
        }
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        let delta2 = x - self.mean;
        self.m2 += delta * delta2;
        Ok(())
    }

    /// Chan et al. parallel merge: result is as if both streams were
    /// observed by a single accumulator.
    pub fn merge(&self, other: &Self) -> Self {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let count = self.count + other.count;
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = count as f64;
        let delta = other.mean - self.mean;
        RunningMoments {
            count,
            mean: self.mean + delta * nb / n,
            m2: self.m2 + other.m2 + delta * delta * na * nb / n,
        }
    }

    /// Population variance m2/count; error when nothing was observed.
    pub fn variance(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(TdScaleError::EmptyStats("variance of empty moments"));
        }
        Ok((self.m2 / self.count as f64).max(0.0))
    }

    pub fn std(&self) -> Result<f64> {
        Ok(self.variance()?.sqrt())
    }

    /// E[X^2] = V[X] + E[X]^2.
    pub fn second_moment(&self) -> Result<f64> {
        Ok(self.variance()? + self.mean * self.mean)
    }
}

/// One episode's per-transition rewards and discounts. The final discount
/// is zero iff the episode truly terminated; a time-out sets `truncated`
/// and keeps the in-episode discount on the last transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub rewards: Vec<f64>,
    pub discounts: Vec<f64>,
    pub truncated: bool,
}

impl EpisodeTrace {
    pub fn new(rewards: Vec<f64>, discounts: Vec<f64>, truncated: bool) -> Result<Self> {
        let trace = EpisodeTrace { rewards, discounts, truncated };
        trace.validate()?;
        Ok(trace)
    }

    /// Convenience constructor for a complete episode with a constant
    /// in-episode discount and a terminal zero.
    pub fn terminated(rewards: Vec<f64>, gamma: f64) -> Result<Self> {
        let n = rewards.len();
        let mut discounts = vec![gamma; n];
        if let Some(last) = discounts.last_mut() {
            *last = 0.0;
        }
        Self::new(rewards, discounts, false)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rewards.is_empty() || self.rewards.len() != self.discounts.len() {
            return Err(TdScaleError::InvalidTrace(format!(
                "rewards ({}) and discounts ({}) must have equal positive length",
                self.rewards.len(),
                self.discounts.len()
            )));
        }
        for &g in &self.discounts {
            if !(0.0..=1.0).contains(&g) {
                return Err(TdScaleError::InvalidDiscount(g));
            }
        }
        if !self.truncated && *self.discounts.last().unwrap() != 0.0 {
            return Err(TdScaleError::InvalidTrace(
                "terminated episode must end with discount 0".into(),
            ));
        }
        for &r in &self.rewards {
            if !r.is_finite() {
                return Err(TdScaleError::NonFinite(r));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Backward recursion G_t = R_t + gamma_t * G_{t+1}, with G beyond the
/// end taken as zero. For truncated traces the results are lower bounds
/// on the true returns (the tail past the cut is missing).
pub fn compute_returns(trace: &EpisodeTrace) -> Vec<f64> {
    let n = trace.len();
    let mut returns = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        acc = trace.rewards[t] + trace.discounts[t] * acc;
        returns[t] = acc;
    }
    returns
}

/// Per-objective bundle of reward, discount and return moments; the
/// source of every scale estimate.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReturnStats {
    pub r: RunningMoments,
    pub g: RunningMoments,
    pub gamma: RunningMoments,
    pub episodes: u64,
}

impl ReturnStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Ingest one episode. Rewards and discounts always enter their
    /// moments; per-timestep returns enter `g` only for complete
    /// episodes, since truncated tails only lower-bound the true G.
    pub fn accumulate_episode(&mut self, trace: &EpisodeTrace) -> Result<()> {
        trace.validate()?;
        for (&r, &gamma) in trace.rewards.iter().zip(&trace.discounts) {
            self.r.update(r)?;
            self.gamma.update(gamma)?;
        }
        if !trace.truncated {
            for g in compute_returns(trace) {
                self.g.update(g)?;
            }
        }
        self.episodes += 1;
        Ok(())
    }

    pub fn merge(&self, other: &Self) -> Self {
        ReturnStats {
            r: self.r.merge(&other.r),
            g: self.g.merge(&other.g),
            gamma: self.gamma.merge(&other.gamma),
            episodes: self.episodes + other.episodes,
        }
    }

    /// sigma^2 = V[R] + V[gamma] E[G^2], kept in components for
    /// diagnostics.
    pub fn sigma_squared(&self) -> Result<ScaleEstimate> {
        if self.r.count == 0 {
            return Err(TdScaleError::EmptyStats("sigma_squared on empty stats"));
        }
        let var_r = self.r.variance()?;
        let var_gamma = self.gamma.variance()?;
        // No complete episode yet: no return statistics, E[G^2] = 0.
        let e_g2 = if self.g.count > 0 { self.g.second_moment()? } else { 0.0 };
        Ok(ScaleEstimate::new(var_r, var_gamma, e_g2))
    }

    /// Target-network variant sigma^2 = V[R] + V[gamma](E[G^2] + dV^2);
    /// reduces to the plain sigma when delta_v2 = 0.
    pub fn sigma_with_target_gap(&self, delta_v2: f64) -> Result<f64> {
        let est = self.sigma_squared()?;
        Ok((est.var_r + est.var_gamma * (est.e_g2 + delta_v2)).sqrt())
    }
}

/// sigma with its three components kept separate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleEstimate {
    pub sigma: f64,
    pub var_r: f64,
    pub var_gamma: f64,
    pub e_g2: f64,
}

impl ScaleEstimate {
    pub fn new(var_r: f64, var_gamma: f64, e_g2: f64) -> Self {
        ScaleEstimate {
            sigma: (var_r + var_gamma * e_g2).sqrt(),
            var_r,
            var_gamma,
            e_g2,
        }
    }

    /// Effective divisor max(sigma, sigma_v, sigma_batch). sigma_v is the
    /// value-initialization noise floor, strictly positive, so the result
    /// never reaches zero.
    pub fn effective(&self, sigma_v: f64, sigma_batch: f64) -> f64 {
        debug_assert!(sigma_v > 0.0, "sigma_v floor must be positive");
        self.sigma.max(sigma_v).max(sigma_batch)
    }
}

/// One transition as seen inside a batch: reward, discount, and the
/// partial (within-batch n-step) return starting at that transition.
#[derive(Debug, Clone, Copy)]
pub struct BatchTransition {
    pub reward: f64,
    pub discount: f64,
    pub partial_return: f64,
}

/// The scale formula applied to just the current batch. Partial returns
/// are generally truncated before episode end, so this underestimates the
/// true scale; it exists to bound the first outlier reward.
pub fn sigma_batch(transitions: &[BatchTransition]) -> Result<f64> {
    if transitions.is_empty() {
        return Err(TdScaleError::EmptyStats("sigma_batch on empty batch"));
    }
    let mut r = RunningMoments::new();
    let mut gamma = RunningMoments::new();
    let mut g = RunningMoments::new();
    for t in transitions {
        r.update(t.reward)?;
        gamma.update(t.discount)?;
        g.update(t.partial_return)?;
    }
    Ok((r.variance()? + gamma.variance()? * g.second_moment()?).sqrt())
}

/// V[gamma] for fixed-length episodes with a constant in-episode discount
/// and terminal zero: ((T-1)/T^2) * gamma^2, approximately 1/T for
/// gamma near 1.
pub fn var_gamma_closed_form(gamma_cst: f64, episode_len: u64) -> Result<f64> {
    if episode_len == 0 {
        return Err(TdScaleError::InvalidParam("episode length must be >= 1".into()));
    }
    let t = episode_len as f64;
    Ok((t - 1.0) / (t * t) * gamma_cst * gamma_cst)
}

/// Brownian-motion approximation V[G] ~ V[R] / (1 - gamma_bar), valid for
/// returns with no sequential structure (shuffled rewards).
pub fn brownian_var_g(var_r: f64, gamma_bar: f64) -> Result<f64> {
    if gamma_bar >= 1.0 {
        return Err(TdScaleError::InvalidParam(format!(
            "horizon diverges at gamma_bar = {gamma_bar}"
        )));
    }
    Ok(var_r / (1.0 - gamma_bar))
}
