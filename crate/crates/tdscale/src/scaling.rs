//! Uniform interface over error/target scaling strategies: return-based
//! scaling, the simple "false friend" normalisations, Pop-Art, the signed
//! hyperbolic transform, reward clipping and error-based scaling.

use std::collections::VecDeque;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TdScaleError};
use crate::stats::ReturnStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalerKind {
    ReturnBased,
    RewardStd,
    ReturnStd,
    Horizon,
    RewardClip,
    PopArt,
    SignedHyperbolic,
    ErrorBased,
    None,
}

impl ScalerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScalerKind::ReturnBased => "return_based",
            ScalerKind::RewardStd => "reward_std",
            ScalerKind::ReturnStd => "return_std",
            ScalerKind::Horizon => "horizon",
            ScalerKind::RewardClip => "reward_clip",
            ScalerKind::PopArt => "popart",
            ScalerKind::SignedHyperbolic => "signed_hyperbolic",
            ScalerKind::ErrorBased => "error_based",
            ScalerKind::None => "none",
        }
    }
}

impl FromStr for ScalerKind {
    type Err = TdScaleError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "return_based" => ScalerKind::ReturnBased,
            "reward_std" => ScalerKind::RewardStd,
            "return_std" => ScalerKind::ReturnStd,
            "horizon" => ScalerKind::Horizon,
            "reward_clip" => ScalerKind::RewardClip,
            "popart" => ScalerKind::PopArt,
            "signed_hyperbolic" => ScalerKind::SignedHyperbolic,
            "error_based" => ScalerKind::ErrorBased,
            "none" => ScalerKind::None,
            other => return Err(TdScaleError::Config(format!("unknown scaler `{other}`"))),
        })
    }
}

/// Pop-Art statistics: EMA first/second moments of the targets, with the
/// derived scale clamped to [lower, upper]. No debiasing; the step size
/// and bounds are fixed at construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopArtState {
    pub mu: f64,
    pub nu: f64,
    pub sigma: f64,
    pub step_size: f64,
    pub lower: f64,
    pub upper: f64,
}

impl PopArtState {
    pub fn new(step_size: f64, lower: f64, upper: f64) -> Result<Self> {
        if step_size <= 0.0 {
            return Err(TdScaleError::InvalidParam("popart step_size must be positive".into()));
        }
        if lower <= 0.0 || upper < lower {
            return Err(TdScaleError::InvalidParam(
                "popart bounds must satisfy 0 < lower <= upper".into(),
            ));
        }
        Ok(PopArtState { mu: 0.0, nu: 1.0, sigma: 1.0, step_size, lower, upper })
    }

    /// Paper defaults: step size 0.001, scale bounded to [0.001, 1000].
    pub fn with_defaults() -> Self {
        Self::new(0.001, 0.001, 1000.0).unwrap()
    }
}

/// The last-layer rescaling that keeps unnormalized head outputs
/// identical across a statistics update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PopArtCorrection {
    pub old_sigma: f64,
    pub new_sigma: f64,
    pub old_mu: f64,
    pub new_mu: f64,
}

impl PopArtCorrection {
    pub fn scale_ratio(&self) -> f64 {
        self.old_sigma / self.new_sigma
    }

    pub fn shift(&self) -> f64 {
        (self.old_mu - self.new_mu) / self.new_sigma
    }
}

/// One EMA step over a new target. Returns the correction needed to
/// preserve the head's unnormalized predictions.
pub fn popart_observe(state: &mut PopArtState, target: f64) -> Result<PopArtCorrection> {
    if !target.is_finite() {
        return Err(TdScaleError::NonFinite(target));
    }
    let old_sigma = state.sigma;
    let old_mu = state.mu;
    let beta = state.step_size;
    state.mu = (1.0 - beta) * state.mu + beta * target;
    state.nu = (1.0 - beta) * state.nu + beta * target * target;
    state.sigma = (state.nu - state.mu * state.mu)
        .max(0.0)
        .sqrt()
        .clamp(state.lower, state.upper);
    Ok(PopArtCorrection {
        old_sigma,
        new_sigma: state.sigma,
        old_mu,
        new_mu: state.mu,
    })
}

/// Rewrite the last-layer weights so that
/// sigma'*(w'.phi + b') + mu' == sigma*(w.phi + b) + mu for every phi.
pub fn popart_preserve(correction: &PopArtCorrection, w: &[f64], b: f64) -> (Vec<f64>, f64) {
    let ratio = correction.old_sigma / correction.new_sigma;
    let w2 = w.iter().map(|wi| wi * ratio).collect();
    let b2 = (correction.old_sigma * b + correction.old_mu - correction.new_mu)
        / correction.new_sigma;
    (w2, b2)
}

/// Windowed moments over recent TD errors, the comparator behind the
/// noise-amplification figure.
#[derive(Debug, Clone, Default)]
pub struct ErrorScalerState {
    window: usize,
    buf: VecDeque<f64>,
    sum: f64,
    sum_sq: f64,
}

impl ErrorScalerState {
    pub fn new(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(TdScaleError::InvalidParam("error scaler window must be > 0".into()));
        }
        Ok(ErrorScalerState { window, ..Default::default() })
    }

    pub fn observe(&mut self, delta: f64) -> Result<()> {
        if !delta.is_finite() {
            return Err(TdScaleError::NonFinite(delta));
        }
        if self.buf.len() == self.window {
            let old = self.buf.pop_front().unwrap();
            self.sum -= old;
            self.sum_sq -= old * old;
        }
        self.buf.push_back(delta);
        self.sum += delta;
        self.sum_sq += delta * delta;
        Ok(())
    }

    pub fn std(&self) -> f64 {
        let n = self.buf.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.sum / n as f64;
        ((self.sum_sq / n as f64) - mean * mean).max(0.0).sqrt()
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}

/// Mutable state owned by one scaler instance. Only Pop-Art and the
/// error-based scaler carry state; everything else is stateless.
#[derive(Debug, Clone)]
pub enum ScalerState {
    Stateless,
    PopArt(PopArtState),
    ErrorWindow(ErrorScalerState),
}

impl ScalerState {
    pub fn for_kind(kind: ScalerKind, error_window: usize) -> Result<Self> {
        Ok(match kind {
            ScalerKind::PopArt => ScalerState::PopArt(PopArtState::with_defaults()),
            ScalerKind::ErrorBased => {
                ScalerState::ErrorWindow(ErrorScalerState::new(error_window)?)
            }
            _ => ScalerState::Stateless,
        })
    }
}

/// Everything a scaler may consult when rescaling one TD error.
pub struct ScaleContext<'a> {
    pub stats: &'a ReturnStats,
    pub gamma: f64,
    pub sigma_v: f64,
    pub sigma_batch: f64,
}

/// Rescale a raw TD error according to the chosen strategy. Pop-Art and
/// the signed hyperbolic transform act on targets, not errors, so they
/// pass deltas through unchanged here; so does reward clipping, which
/// acts on rewards.
pub fn scale_error(
    kind: ScalerKind,
    state: &ScalerState,
    delta: f64,
    ctx: &ScaleContext,
) -> Result<f64> {
    match (kind, state) {
        (ScalerKind::None, ScalerState::Stateless) => Ok(delta),
        (ScalerKind::RewardClip, ScalerState::Stateless) => Ok(delta),
        (ScalerKind::PopArt, ScalerState::PopArt(_)) => Ok(delta),
        (ScalerKind::SignedHyperbolic, ScalerState::Stateless) => Ok(delta),
        (ScalerKind::ReturnBased, ScalerState::Stateless) => {
            let est = ctx.stats.sigma_squared()?;
            Ok(delta / est.effective(ctx.sigma_v, ctx.sigma_batch))
        }
        (ScalerKind::RewardStd, ScalerState::Stateless) => {
            let std = ctx.stats.r.std().unwrap_or(0.0);
            Ok(delta / std.max(ctx.sigma_v))
        }
        (ScalerKind::ReturnStd, ScalerState::Stateless) => {
            let std = ctx.stats.g.std().unwrap_or(0.0);
            Ok(delta / std.max(ctx.sigma_v))
        }
        (ScalerKind::Horizon, ScalerState::Stateless) => Ok(delta * (1.0 - ctx.gamma)),
        (ScalerKind::ErrorBased, ScalerState::ErrorWindow(w)) => {
            Ok(delta / w.std().max(ctx.sigma_v))
        }
        (kind, _) => Err(TdScaleError::ScalerMismatch(kind.as_str())),
    }
}

/// Cap rewards to [-1, 1].
pub fn clip_reward(r: f64) -> f64 {
    r.clamp(-1.0, 1.0)
}

/// f(x) = sign(x) (sqrt(|x|+1) - 1), a squashing transform for bootstrap
/// targets.
pub fn signed_hyperbolic(x: f64) -> f64 {
    x.signum() * ((x.abs() + 1.0).sqrt() - 1.0)
}

pub fn signed_hyperbolic_inv(y: f64) -> f64 {
    let a = y.abs() + 1.0;
    y.signum() * (a * a - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::EpisodeTrace;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn stats_11() -> ReturnStats {
        let mut s = ReturnStats::new();
        s.accumulate_episode(&EpisodeTrace::new(vec![1.0, 1.0], vec![1.0, 0.0], false).unwrap())
            .unwrap();
        s
    }

    fn ctx(stats: &ReturnStats) -> ScaleContext<'_> {
        ScaleContext { stats, gamma: 0.99, sigma_v: 1e-2, sigma_batch: 0.0 }
    }

    #[test]
    fn kind_round_trips_through_strings() {
        for kind in [
            ScalerKind::ReturnBased,
            ScalerKind::RewardStd,
            ScalerKind::ReturnStd,
            ScalerKind::Horizon,
            ScalerKind::RewardClip,
            ScalerKind::PopArt,
            ScalerKind::SignedHyperbolic,
            ScalerKind::ErrorBased,
            ScalerKind::None,
        ] {
            assert_eq!(kind.as_str().parse::<ScalerKind>().unwrap(), kind);
        }
        assert!("whitening".parse::<ScalerKind>().is_err());
    }

    #[test]
    fn return_based_divides_by_sigma() {
        let stats = stats_11();
        let sigma = 0.625f64.sqrt();
        let scaled =
            scale_error(ScalerKind::ReturnBased, &ScalerState::Stateless, 2.0 * sigma, &ctx(&stats))
                .unwrap();
        assert_relative_eq!(scaled, 2.0, max_relative = 1e-12);
    }

    #[test]
    fn none_is_identity_and_horizon_shrinks() {
        let stats = stats_11();
        assert_eq!(
            scale_error(ScalerKind::None, &ScalerState::Stateless, 3.25, &ctx(&stats)).unwrap(),
            3.25
        );
        let scaled =
            scale_error(ScalerKind::Horizon, &ScalerState::Stateless, 100.0, &ctx(&stats))
                .unwrap();
        assert_abs_diff_eq!(scaled, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn mismatched_state_is_error() {
        let stats = stats_11();
        let err = scale_error(
            ScalerKind::ErrorBased,
            &ScalerState::Stateless,
            1.0,
            &ctx(&stats),
        );
        assert!(err.is_err());
    }

    #[test]
    fn return_based_scale_invariance_at_argument_level() {
        // scale_error(c*delta, stats-of-c*rewards) == scale_error(delta, stats)
        let gamma = 0.95;
        let rewards = vec![0.3, -0.7, 1.2, 0.1];
        for c in [0.01, 3.0, 1e4] {
            let mut base = ReturnStats::new();
            base.accumulate_episode(&EpisodeTrace::terminated(rewards.clone(), gamma).unwrap())
                .unwrap();
            let mut scaled = ReturnStats::new();
            scaled
                .accumulate_episode(
                    &EpisodeTrace::terminated(rewards.iter().map(|r| c * r).collect(), gamma)
                        .unwrap(),
                )
                .unwrap();
            let delta = 0.42;
            let a = scale_error(
                ScalerKind::ReturnBased,
                &ScalerState::Stateless,
                delta,
                &ScaleContext { stats: &base, gamma, sigma_v: 1e-9, sigma_batch: 0.0 },
            )
            .unwrap();
            let b = scale_error(
                ScalerKind::ReturnBased,
                &ScalerState::Stateless,
                c * delta,
                &ScaleContext { stats: &scaled, gamma, sigma_v: 1e-9, sigma_batch: 0.0 },
            )
            .unwrap();
            assert_relative_eq!(a, b, max_relative = 1e-9);
        }
    }

    #[test]
    fn clip_reward_cases() {
        assert_eq!(clip_reward(7.0), 1.0);
        assert_eq!(clip_reward(-0.5), -0.5);
        assert_eq!(clip_reward(-3.0), -1.0);
        assert_eq!(clip_reward(clip_reward(42.0)), clip_reward(42.0));
    }

    #[test]
    fn signed_hyperbolic_known_points() {
        assert_abs_diff_eq!(signed_hyperbolic(3.0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(signed_hyperbolic(-8.0), -2.0, epsilon = 1e-12);
        assert_eq!(signed_hyperbolic(0.0), 0.0);
        assert_abs_diff_eq!(signed_hyperbolic_inv(1.0), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn popart_single_observe_example() {
        let mut state = PopArtState::with_defaults();
        let corr = popart_observe(&mut state, 100.0).unwrap();
        assert_abs_diff_eq!(state.mu, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(state.nu, 10.999, epsilon = 1e-12);
        assert_relative_eq!(state.sigma, (10.999f64 - 0.01).sqrt(), max_relative = 1e-12);
        assert_relative_eq!(state.sigma, 3.3150, max_relative = 1e-4);
        assert_eq!(corr.old_sigma, 1.0);
        assert_eq!(corr.new_sigma, state.sigma);
    }

    #[test]
    fn popart_clamps_at_both_bounds() {
        let mut state = PopArtState::with_defaults();
        // constant stream: variance collapses, sigma hits the lower bound
        for _ in 0..20_000 {
            popart_observe(&mut state, 5.0).unwrap();
        }
        assert_eq!(state.sigma, state.lower);
        assert_abs_diff_eq!(state.mu, 5.0, epsilon = 1e-4);

        let mut wild = PopArtState::with_defaults();
        for i in 0..20_000 {
            let t = if i % 2 == 0 { 1e8 } else { -1e8 };
            popart_observe(&mut wild, t).unwrap();
        }
        assert_eq!(wild.sigma, wild.upper);
    }

    #[test]
    fn popart_preserve_identity_and_example() {
        let id = PopArtCorrection { old_sigma: 2.0, new_sigma: 2.0, old_mu: 0.5, new_mu: 0.5 };
        let (w, b) = popart_preserve(&id, &[1.0, -2.0], 0.25);
        assert_eq!(w, vec![1.0, -2.0]);
        assert_eq!(b, 0.25);

        // after one observe, prediction at phi must be preserved
        let mut state = PopArtState::with_defaults();
        let w0 = vec![0.7, -0.3, 1.1];
        let b0 = 0.4;
        let corr = popart_observe(&mut state, 100.0).unwrap();
        let (w1, b1) = popart_preserve(&corr, &w0, b0);
        for phi in [[0.0, 0.0, 0.0], [1.0, 2.0, -1.0], [-5.0, 0.25, 3.0]] {
            let dot0: f64 = w0.iter().zip(&phi).map(|(w, p)| w * p).sum();
            let dot1: f64 = w1.iter().zip(&phi).map(|(w, p)| w * p).sum();
            let before = corr.old_sigma * (dot0 + b0) + corr.old_mu;
            let after = corr.new_sigma * (dot1 + b1) + corr.new_mu;
            assert_relative_eq!(before, after, max_relative = 1e-10);
        }
    }

    #[test]
    fn popart_preserve_halves_weights_when_sigma_doubles() {
        let corr = PopArtCorrection { old_sigma: 1.0, new_sigma: 2.0, old_mu: 0.0, new_mu: 0.0 };
        let (w, b) = popart_preserve(&corr, &[4.0], 1.0);
        assert_eq!(w, vec![2.0]);
        assert_eq!(b, 0.5);
    }

    #[test]
    fn error_scaler_window_behaviour() {
        let mut s = ErrorScalerState::new(100).unwrap();
        for _ in 0..500 {
            s.observe(3.0).unwrap();
        }
        assert_eq!(s.len(), 100);
        assert_abs_diff_eq!(s.std(), 0.0, epsilon = 1e-9);

        let mut one = ErrorScalerState::new(1).unwrap();
        one.observe(7.0).unwrap();
        one.observe(-2.0).unwrap();
        assert_eq!(one.std(), 0.0);
    }

    #[test]
    fn error_scaler_floors_at_sigma_v() {
        let stats = stats_11();
        let mut s = ErrorScalerState::new(16).unwrap();
        for _ in 0..16 {
            s.observe(0.5).unwrap();
        }
        let scaled = scale_error(
            ScalerKind::ErrorBased,
            &ScalerState::ErrorWindow(s),
            0.5,
            &ctx(&stats),
        )
        .unwrap();
        assert_relative_eq!(scaled, 0.5 / 1e-2, max_relative = 1e-12);
    }

    #[test]
    fn error_scaler_tracks_gaussian_std() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let normal = Normal::new(0.0, 2.0).unwrap();
        let mut s = ErrorScalerState::new(100).unwrap();
        for _ in 0..100 {
            s.observe(normal.sample(&mut rng)).unwrap();
        }
        assert!((s.std() - 2.0).abs() / 2.0 < 0.3);
    }
}
