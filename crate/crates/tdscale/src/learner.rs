//! n-step Q-learning with target networks, pluggable error scalers,
//! SGD/Adam, multi-head training with bandit head selection, and the
//! deterministic experiment driver.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::MdpSpec;
use crate::error::{Result, TdScaleError};
use crate::scaling::{
    popart_observe, popart_preserve, scale_error, signed_hyperbolic, signed_hyperbolic_inv,
    ScaleContext, ScalerKind, ScalerState,
};
use crate::stats::{sigma_batch, BatchTransition, EpisodeTrace, RunningMoments};
use crate::values::{FeatureMap, HeadSpec, MultiHeadGradient, MultiHeadValue, Trunk};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    /// Appendix-table defaults: eta 2e-4, beta1 0.9, beta2 0.999,
    /// eps 1e-6.
    pub fn adam_default() -> Self {
        OptimizerKind::Adam { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-6 }
    }
}

/// First/second moment estimates plus the step counter for bias
/// correction.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One optimizer step on a flat parameter vector; `gradient` is the
/// gradient of the loss (descent direction is its negative). Adam uses
/// bias-corrected moments with eps added inside the denominator.
pub fn optimizer_step(
    kind: &OptimizerKind,
    state: &mut AdamState,
    params: &mut [f64],
    gradient: &[f64],
) -> Result<()> {
    if params.len() != gradient.len() {
        return Err(TdScaleError::ShapeMismatch { expected: params.len(), got: gradient.len() });
    }
    match *kind {
        OptimizerKind::Sgd { lr } => {
            for (p, g) in params.iter_mut().zip(gradient) {
                *p -= lr * g;
            }
        }
        OptimizerKind::Adam { lr, beta1, beta2, eps } => {
            if state.m.len() != params.len() {
                *state = AdamState::new(params.len());
            }
            state.t += 1;
            let bc1 = 1.0 - beta1.powi(state.t as i32);
            let bc2 = 1.0 - beta2.powi(state.t as i32);
            for i in 0..params.len() {
                let g = gradient[i];
                state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
                state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
                let m_hat = state.m[i] / bc1;
                let v_hat = state.v[i] / bc2;
                params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}

/// n-step bootstrapped target: sum of discounted rewards plus the
/// discounted bootstrap; a zero discount anywhere truncates the tail.
pub fn n_step_target(rewards: &[f64], discounts: &[f64], bootstrap: f64) -> Result<f64> {
    if rewards.len() != discounts.len() {
        return Err(TdScaleError::ShapeMismatch { expected: rewards.len(), got: discounts.len() });
    }
    let mut target = 0.0;
    let mut weight = 1.0;
    for (r, g) in rewards.iter().zip(discounts) {
        target += weight * r;
        weight *= g;
    }
    Ok(target + weight * bootstrap)
}

pub fn td_error(target: f64, prediction: f64) -> f64 {
    target - prediction
}

/// Sliding-window episode-return means with epsilon-greedy head
/// selection; fitness is the undiscounted, unclipped episode return.
#[derive(Debug, Clone)]
pub struct BanditState {
    windows: Vec<VecDeque<f64>>,
    pub pulls: Vec<u64>,
    pub window: usize,
    pub epsilon: f64,
}

impl BanditState {
    pub fn new(num_heads: usize, window: usize, epsilon: f64) -> Result<Self> {
        if num_heads == 0 {
            return Err(TdScaleError::InvalidParam("bandit needs at least one head".into()));
        }
        Ok(BanditState {
            windows: vec![VecDeque::new(); num_heads],
            pulls: vec![0; num_heads],
            window,
            epsilon,
        })
    }

    pub fn window_mean(&self, head: usize) -> Option<f64> {
        let w = &self.windows[head];
        if w.is_empty() {
            None
        } else {
            Some(w.iter().sum::<f64>() / w.len() as f64)
        }
    }

    /// Untried heads are picked first; afterwards epsilon-greedy over
    /// window means, ties toward the lowest index.
    pub fn select_head(&mut self, rng: &mut ChaCha8Rng) -> usize {
        let n = self.windows.len();
        let pick = if let Some(untried) = (0..n).find(|&h| self.pulls[h] == 0) {
            untried
        } else if rng.gen::<f64>() < self.epsilon {
            rng.gen_range(0..n)
        } else {
            let mut best = 0;
            for h in 1..n {
                if self.window_mean(h).unwrap_or(f64::NEG_INFINITY)
                    > self.window_mean(best).unwrap_or(f64::NEG_INFINITY)
                {
                    best = h;
                }
            }
            best
        };
        self.pulls[pick] += 1;
        pick
    }

    pub fn update(&mut self, head: usize, episode_return: f64) {
        let w = &mut self.windows[head];
        if w.len() == self.window {
            w.pop_front();
        }
        w.push_back(episode_return);
    }
}

/// One n-step experience segment with raw (untransformed) rewards.
#[derive(Debug, Clone)]
pub struct Segment {
    /// n+1 states; the last is the bootstrap state.
    pub states: Vec<usize>,
    /// n actions.
    pub actions: Vec<usize>,
    /// n raw rewards.
    pub rewards: Vec<f64>,
    /// Index of the terminal transition within the segment, if any.
    pub terminal: Option<usize>,
}

impl Segment {
    /// Per-transition discounts for one head: the head's gamma in
    /// episode, zero on the terminal transition and beyond.
    pub fn discounts(&self, gamma: f64) -> Vec<f64> {
        (0..self.rewards.len())
            .map(|k| match self.terminal {
                Some(term) if k >= term => 0.0,
                _ => gamma,
            })
            .collect()
    }
}

/// Plain uniform FIFO buffer of n-step segments.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    buf: VecDeque<Segment>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { buf: VecDeque::with_capacity(capacity.min(1 << 20)), capacity }
    }

    pub fn push(&mut self, segment: Segment) {
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(segment);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn sample<'a>(&'a self, batch: usize, rng: &mut ChaCha8Rng) -> Vec<&'a Segment> {
        (0..batch).map(|_| &self.buf[rng.gen_range(0..self.buf.len())]).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub n_step: usize,
    pub target_update_interval: usize,
    pub optimizer: OptimizerKind,
    pub scaler: ScalerKind,
    pub epsilon_greedy: f64,
    /// Value-initialization noise floor for the scale.
    pub sigma_v: f64,
    /// Use sigma^2 = V[R] + V[gamma](E[G^2] + dV^2) with the measured
    /// online/target gap.
    pub use_target_gap: bool,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Environment steps between learner updates.
    pub update_period: usize,
    pub error_window: usize,
    pub bandit_window: usize,
    pub bandit_epsilon: f64,
    /// Updates between metrics rows.
    pub metrics_interval: usize,
    /// Initialize head biases to E[G] after the first episodes.
    pub bias_init: bool,
    /// Episodes to collect before any learner update.
    pub warmup_episodes: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            n_step: 5,
            target_update_interval: 400,
            optimizer: OptimizerKind::adam_default(),
            scaler: ScalerKind::ReturnBased,
            epsilon_greedy: 0.05,
            sigma_v: 1e-2,
            use_target_gap: false,
            batch_size: 32,
            replay_capacity: 100_000,
            update_period: 1,
            error_window: 10_000,
            bandit_window: 50,
            bandit_epsilon: 0.1,
            metrics_interval: 100,
            bias_init: false,
            warmup_episodes: 1,
        }
    }
}

/// Per-head measurements for one metrics row.
#[derive(Debug, Clone, Serialize)]
pub struct HeadMetrics {
    pub unscaled_loss: f64,
    pub scaled_loss: f64,
    pub sigma: f64,
    pub var_r: f64,
    pub var_gamma: f64,
    pub e_g2: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub update: u64,
    pub env_steps: u64,
    pub episodes: u64,
    pub selected_head: usize,
    pub episode_return_mean: f64,
    pub heads: Vec<HeadMetrics>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    /// Fixed column order: run counters, then per-head blocks.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let heads = self.rows.first().map(|r| r.heads.len()).unwrap_or(0);
        out.push_str("update,env_steps,episodes,selected_head,episode_return_mean");
        for h in 0..heads {
            for col in ["unscaled_loss", "scaled_loss", "sigma", "var_r", "var_gamma", "e_g2", "rmse"] {
                out.push_str(&format!(",head{h}_{col}"));
            }
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}",
                row.update, row.env_steps, row.episodes, row.selected_head, row.episode_return_mean
            ));
            for h in &row.heads {
                out.push_str(&format!(
                    ",{},{},{},{},{},{},{}",
                    h.unscaled_loss, h.scaled_loss, h.sigma, h.var_r, h.var_gamma, h.e_g2, h.rmse
                ));
            }
            out.push('\n');
        }
        out
    }
}

/// Per-batch result of one training step.
#[derive(Debug, Clone)]
pub struct StepMetrics {
    /// mean(delta^2) per head.
    pub unscaled_loss: Vec<f64>,
    /// mean(scaled delta^2) per head.
    pub scaled_loss: Vec<f64>,
    /// Effective divisor used per head.
    pub sigma_eff: Vec<f64>,
}

/// Optimizer states for the trunk and every head.
#[derive(Debug, Clone)]
pub struct OptimStates {
    trunk_w: AdamState,
    trunk_b: AdamState,
    heads: Vec<(AdamState, AdamState)>,
}

impl OptimStates {
    pub fn new(mh: &MultiHeadValue) -> Self {
        let (tw, tb) = match &mh.trunk {
            Trunk::Identity => (0, 0),
            Trunk::Hidden { w, b, .. } => (w.len(), b.len()),
        };
        OptimStates {
            trunk_w: AdamState::new(tw),
            trunk_b: AdamState::new(tb),
            heads: mh
                .heads
                .iter()
                .map(|h| (AdamState::new(h.w.len()), AdamState::new(h.b.len())))
                .collect(),
        }
    }
}

/// One batched multi-head update. For every head: transform rewards,
/// form the n-step target from the target network, guard the scale with
/// the batch-local sigma, scale the error, and accumulate gradients with
/// the 1/sqrt(n) trunk factor. One optimizer step at the end.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    mh: &mut MultiHeadValue,
    target: &MultiHeadValue,
    batch: &[&Segment],
    config: &LearnerConfig,
    optim: &mut OptimStates,
) -> Result<StepMetrics> {
    let n_heads = mh.heads.len();
    let trunk_scale = 1.0 / (n_heads as f64).sqrt();
    let mut grad = MultiHeadGradient::zeros(mh);
    let mut unscaled = vec![0.0; n_heads];
    let mut scaled = vec![0.0; n_heads];
    let mut sigmas = vec![0.0; n_heads];

    for h in 0..n_heads {
        let spec = mh.heads[h].spec;
        let gamma = spec.discount;

        // Batch-local scale over within-segment partial returns.
        let mut batch_transitions = Vec::new();
        for seg in batch {
            let rewards: Vec<f64> =
                seg.rewards.iter().map(|&r| spec.transform_reward(r)).collect();
            let discounts = seg.discounts(gamma);
            let mut partial = 0.0;
            let mut partials = vec![0.0; rewards.len()];
            for k in (0..rewards.len()).rev() {
                partial = rewards[k] + discounts[k] * partial;
                partials[k] = partial;
            }
            for k in 0..rewards.len() {
                batch_transitions.push(BatchTransition {
                    reward: rewards[k],
                    discount: discounts[k],
                    partial_return: partials[k],
                });
            }
        }
        let sb = sigma_batch(&batch_transitions)?;

        let delta_v2 = if config.use_target_gap {
            mean_squared_gap(mh, target, h)
        } else {
            0.0
        };

        let is_popart = mh.heads[h].scaler_kind == ScalerKind::PopArt;
        let is_signed_hyp = mh.heads[h].scaler_kind == ScalerKind::SignedHyperbolic;

        let mut deltas = Vec::with_capacity(batch.len());
        for seg in batch {
            let rewards: Vec<f64> =
                seg.rewards.iter().map(|&r| spec.transform_reward(r)).collect();
            let discounts = seg.discounts(gamma);
            let boot_state = *seg.states.last().unwrap();
            let boot_action = target.greedy_action(h, boot_state);

            if is_popart {
                // Pop-Art head: q is the normalized output, unnormalized
                // prediction is sigma*q + mu. Targets are observed into
                // the EMA statistics, weights corrected to preserve
                // outputs, then the error is formed in normalized space.
                let (t_now, pred_raw, pred_norm) = {
                    // the bootstrap is unnormalized with the target
                    // network's own frozen statistics
                    let t_st = popart_of(&target.heads[h].scaler)?;
                    let boot_raw = t_st.sigma * target.predict(h, boot_state, boot_action)
                        + t_st.mu;
                    let t = n_step_target(&rewards, &discounts, boot_raw)?;
                    let st = popart_of(&mh.heads[h].scaler)?;
                    let q = mh.predict(h, seg.states[0], seg.actions[0]);
                    (t, st.sigma * q + st.mu, q)
                };
                let corr = {
                    let st = popart_of_mut(&mut mh.heads[h].scaler)?;
                    popart_observe(st, t_now)?
                };
                let width = mh.trunk_width();
                for a in 0..mh.num_actions {
                    let (w2, b2) = popart_preserve(
                        &corr,
                        &mh.heads[h].w[a * width..(a + 1) * width],
                        mh.heads[h].b[a],
                    );
                    mh.heads[h].w[a * width..(a + 1) * width].copy_from_slice(&w2);
                    mh.heads[h].b[a] = b2;
                }
                let st = popart_of(&mh.heads[h].scaler)?;
                let norm_target = (t_now - st.mu) / st.sigma;
                // prediction in the new normalized space is unchanged in
                // unnormalized terms
                let pred_norm_new = (pred_raw - st.mu) / st.sigma;
                let raw_delta = td_error(t_now, pred_raw);
                let norm_delta = td_error(norm_target, pred_norm_new);
                let _ = pred_norm;
                deltas.push((seg, raw_delta, norm_delta));
                sigmas[h] = st.sigma;
                continue;
            }

            let boot = if is_signed_hyp {
                signed_hyperbolic_inv(target.predict(h, boot_state, boot_action))
            } else {
                target.predict(h, boot_state, boot_action)
            };
            let mut t = n_step_target(&rewards, &discounts, boot)?;
            if is_signed_hyp {
                t = signed_hyperbolic(t);
            }
            let pred = mh.predict(h, seg.states[0], seg.actions[0]);
            let delta = td_error(t, pred);
            deltas.push((seg, delta, delta));
        }

        if !is_popart {
            // Recent-error statistics are updated on the raw errors of
            // this batch before scaling them.
            if let ScalerState::ErrorWindow(w) = &mut mh.heads[h].scaler {
                for (_, delta, _) in &deltas {
                    w.observe(*delta)?;
                }
            }
            // Target-gap variant folds dV^2 into the stats-side sigma by
            // replacing the estimate's E[G^2] component.
            let ctx = ScaleContext {
                stats: &mh.heads[h].stats,
                gamma,
                sigma_v: config.sigma_v,
                sigma_batch: sb,
            };
            let sigma_eff = match mh.heads[h].scaler_kind {
                ScalerKind::ReturnBased => {
                    let mut est = mh.heads[h].stats.sigma_squared()?;
                    if delta_v2 > 0.0 {
                        est = crate::stats::ScaleEstimate::new(
                            est.var_r,
                            est.var_gamma,
                            est.e_g2 + delta_v2,
                        );
                    }
                    est.effective(config.sigma_v, sb)
                }
                _ => 1.0,
            };
            sigmas[h] = sigma_eff;
            for (seg, delta, _) in &deltas {
                let scaled_delta = match mh.heads[h].scaler_kind {
                    ScalerKind::ReturnBased => {
                        // sigma-before-update ordering: the divisor is
                        // never below this batch's own scale
                        debug_assert!(sigma_eff >= sb);
                        delta / sigma_eff
                    }
                    _ => scale_error(mh.heads[h].scaler_kind, &mh.heads[h].scaler, *delta, &ctx)?,
                };
                unscaled[h] += delta * delta;
                scaled[h] += scaled_delta * scaled_delta;
                // loss gradient of 0.5*scaled_delta^2 w.r.t. prediction
                grad.accumulate(
                    mh,
                    h,
                    seg.states[0],
                    seg.actions[0],
                    -scaled_delta / batch.len() as f64,
                    trunk_scale,
                );
            }
        } else {
            for (seg, raw_delta, norm_delta) in &deltas {
                unscaled[h] += raw_delta * raw_delta;
                scaled[h] += norm_delta * norm_delta;
                grad.accumulate(
                    mh,
                    h,
                    seg.states[0],
                    seg.actions[0],
                    -norm_delta / batch.len() as f64,
                    trunk_scale,
                );
            }
        }
        unscaled[h] /= batch.len() as f64;
        scaled[h] /= batch.len() as f64;
    }

    if let Trunk::Hidden { w, b, .. } = &mut mh.trunk {
        optimizer_step(&config.optimizer, &mut optim.trunk_w, w, &grad.trunk_w)?;
        optimizer_step(&config.optimizer, &mut optim.trunk_b, b, &grad.trunk_b)?;
    }
    for (h, (gw, gb)) in grad.heads.iter().enumerate() {
        let (sw, sb_state) = &mut optim.heads[h];
        optimizer_step(&config.optimizer, sw, &mut mh.heads[h].w, gw)?;
        optimizer_step(&config.optimizer, sb_state, &mut mh.heads[h].b, gb)?;
    }

    Ok(StepMetrics { unscaled_loss: unscaled, scaled_loss: scaled, sigma_eff: sigmas })
}

fn popart_of(state: &ScalerState) -> Result<&crate::scaling::PopArtState> {
    match state {
        ScalerState::PopArt(s) => Ok(s),
        _ => Err(TdScaleError::ScalerMismatch("popart")),
    }
}

fn popart_of_mut(state: &mut ScalerState) -> Result<&mut crate::scaling::PopArtState> {
    match state {
        ScalerState::PopArt(s) => Ok(s),
        _ => Err(TdScaleError::ScalerMismatch("popart")),
    }
}

/// Mean squared online/target prediction difference over all probe
/// states, for one head.
pub fn mean_squared_gap(mh: &MultiHeadValue, target: &MultiHeadValue, head: usize) -> f64 {
    let n = mh.features.num_states();
    let mut acc = 0.0;
    let mut count = 0;
    for s in 0..n {
        for a in 0..mh.num_actions {
            let d = mh.predict(head, s, a) - target.predict(head, s, a);
            acc += d * d;
            count += 1;
        }
    }
    acc / count as f64
}

/// Copy online parameters into the target network.
pub fn sync_target(mh: &MultiHeadValue, target: &mut MultiHeadValue) {
    target.trunk = mh.trunk.clone();
    for (t, o) in target.heads.iter_mut().zip(&mh.heads) {
        t.w = o.w.clone();
        t.b = o.b.clone();
        // A Pop-Art target's outputs live in the normalization space of
        // the weights it was copied from, so the stats travel with them.
        t.scaler = o.scaler.clone();
    }
}

/// Everything run_training needs to know about one experiment.
#[derive(Debug, Clone)]
pub struct TrainingSetup {
    pub env: MdpSpec,
    pub heads: Vec<HeadSpec>,
    /// None: identity trunk over one-hot features (tabular heads);
    /// Some(h): shared rectifier trunk of width h.
    pub trunk_hidden: Option<usize>,
    pub config: LearnerConfig,
    /// Optional ground-truth state values per head for RMSE reporting.
    pub oracle_values: Option<Vec<Vec<f64>>>,
}

/// Final state of one training run: the metrics log plus the trained
/// online network for post-hoc policy and value inspection.
#[derive(Debug, Clone)]
pub struct TrainingResult {
    pub log: MetricsLog,
    pub values: MultiHeadValue,
    pub env_steps: u64,
    pub episodes: u64,
}

/// Deterministic experiment driver: acting with bandit head selection,
/// FIFO replay of n-step segments, periodic training and target syncs,
/// metrics rows at a fixed cadence.
pub fn run_training(setup: &TrainingSetup, budget_updates: u64, seed: u64) -> Result<TrainingResult> {
    if budget_updates == 0 {
        return Err(TdScaleError::InvalidParam("budget must be >= 1".into()));
    }
    let config = &setup.config;
    let mut env = setup.env.build()?;
    let num_states = env.num_states();
    let num_actions = env.num_actions();
    let features = FeatureMap::OneHot { num_states };

    let mut env_rng = ChaCha8Rng::seed_from_u64(split_seed(seed, 0x0e71));
    let mut policy_rng = ChaCha8Rng::seed_from_u64(split_seed(seed, 0x9011));
    let mut replay_rng = ChaCha8Rng::seed_from_u64(split_seed(seed, 0x4e91));
    let mut bandit_rng = ChaCha8Rng::seed_from_u64(split_seed(seed, 0xba4d));
    let mut init_rng = ChaCha8Rng::seed_from_u64(split_seed(seed, 0x1417));

    let mut mh = MultiHeadValue::new(
        features,
        num_actions,
        setup.trunk_hidden,
        &setup.heads,
        config.scaler,
        config.error_window,
        &mut init_rng,
    )?;
    let mut target = mh.clone();
    let mut optim = OptimStates::new(&mh);
    let mut bandit = BanditState::new(mh.heads.len(), config.bandit_window, config.bandit_epsilon)?;
    let mut replay = ReplayBuffer::new(config.replay_capacity);

    let mut log = MetricsLog::default();
    let mut updates: u64 = 0;
    let mut env_steps: u64 = 0;
    let mut episodes: u64 = 0;
    let mut bias_initialized = !config.bias_init;

    // interval accumulators
    let mut acc_unscaled = vec![RunningMoments::new(); mh.heads.len()];
    let mut acc_scaled = vec![RunningMoments::new(); mh.heads.len()];
    let mut acc_returns = RunningMoments::new();
    let mut last_sigmas = vec![0.0; mh.heads.len()];
    let mut selected_head;

    'outer: loop {
        // one acting episode
        selected_head = bandit.select_head(&mut bandit_rng);
        let mut state = env.reset(&mut env_rng);
        let timeout = env.timeout();
        let mut ep_states = vec![state];
        let mut ep_actions: Vec<usize> = Vec::new();
        let mut ep_rewards: Vec<f64> = Vec::new();
        let mut terminal_step: Option<usize> = None;
        for t in 0..timeout {
            let action = if policy_rng.gen::<f64>() < config.epsilon_greedy {
                policy_rng.gen_range(0..num_actions)
            } else {
                mh.greedy_action(selected_head, state)
            };
            let tr = env.step(state, action, &mut env_rng)?;
            ep_actions.push(action);
            ep_rewards.push(tr.reward);
            ep_states.push(tr.next_state);
            env_steps += 1;
            state = tr.next_state;

            // emit full n-step segments as the window slides
            if ep_rewards.len() >= config.n_step {
                let k = ep_rewards.len() - config.n_step;
                replay.push(Segment {
                    states: ep_states[k..].to_vec(),
                    actions: ep_actions[k..].to_vec(),
                    rewards: ep_rewards[k..].to_vec(),
                    terminal: tr.terminated.then_some(config.n_step - 1),
                });
            }

            let done = tr.terminated;
            if done || t + 1 == timeout {
                if done {
                    terminal_step = Some(ep_rewards.len() - 1);
                }
                break;
            }

            // periodic training
            if episodes >= config.warmup_episodes as u64
                && env_steps % config.update_period as u64 == 0
                && replay.len() >= config.batch_size
            {
                if !bias_initialized {
                    mh.init_value_bias()?;
                    sync_target(&mh, &mut target);
                    bias_initialized = true;
                }
                let batch = replay.sample(config.batch_size, &mut replay_rng);
                let metrics = train_step(&mut mh, &target, &batch, config, &mut optim)?;
                updates += 1;
                for h in 0..mh.heads.len() {
                    acc_unscaled[h].update(metrics.unscaled_loss[h])?;
                    acc_scaled[h].update(metrics.scaled_loss[h])?;
                }
                last_sigmas = metrics.sigma_eff;
                if updates % config.target_update_interval as u64 == 0 {
                    sync_target(&mh, &mut target);
                }
                if updates % config.metrics_interval as u64 == 0 || updates == budget_updates {
                    log.rows.push(metrics_row(
                        &mh,
                        setup,
                        updates,
                        env_steps,
                        episodes,
                        selected_head,
                        &mut acc_unscaled,
                        &mut acc_scaled,
                        &mut acc_returns,
                        &last_sigmas,
                    ));
                }
                if updates >= budget_updates {
                    break 'outer;
                }
            }
        }

        // episode bookkeeping: stats per head over transformed rewards,
        // segment tail flush, bandit fitness on raw undiscounted return
        episodes += 1;
        let truncated = terminal_step.is_none();
        let raw_return: f64 = ep_rewards.iter().sum();
        acc_returns.update(raw_return)?;
        bandit.update(selected_head, raw_return);

        for head in &mut mh.heads {
            let rewards: Vec<f64> =
                ep_rewards.iter().map(|&r| head.spec.transform_reward(r)).collect();
            let mut discounts = vec![head.spec.discount; rewards.len()];
            if !truncated {
                *discounts.last_mut().unwrap() = 0.0;
            }
            head.stats
                .accumulate_episode(&EpisodeTrace::new(rewards, discounts, truncated)?)?;
        }

        // shorter tail segments so terminal transitions train too
        if !truncated && ep_rewards.len() >= 1 {
            let n = ep_rewards.len();
            let lo = n.saturating_sub(config.n_step - 1);
            for k in lo..n {
                replay.push(Segment {
                    states: ep_states[k..].to_vec(),
                    actions: ep_actions[k..].to_vec(),
                    rewards: ep_rewards[k..].to_vec(),
                    terminal: Some(n - 1 - k),
                });
            }
        }
    }

    // ensure the log always has at least one row
    if log.rows.is_empty() {
        log.rows.push(metrics_row(
            &mh,
            setup,
            updates,
            env_steps,
            episodes,
            selected_head,
            &mut acc_unscaled,
            &mut acc_scaled,
            &mut acc_returns,
            &last_sigmas,
        ));
    }
    Ok(TrainingResult { log, values: mh, env_steps, episodes })
}

#[allow(clippy::too_many_arguments)]
fn metrics_row(
    mh: &MultiHeadValue,
    setup: &TrainingSetup,
    updates: u64,
    env_steps: u64,
    episodes: u64,
    selected_head: usize,
    acc_unscaled: &mut [RunningMoments],
    acc_scaled: &mut [RunningMoments],
    acc_returns: &mut RunningMoments,
    sigmas: &[f64],
) -> MetricsRow {
    let heads = (0..mh.heads.len())
        .map(|h| {
            let est = mh.heads[h].stats.sigma_squared().ok();
            let rmse = setup
                .oracle_values
                .as_ref()
                .map(|ov| relative_value_rmse(mh, h, &ov[h]))
                .unwrap_or(f64::NAN);
            let m = HeadMetrics {
                unscaled_loss: acc_unscaled[h].mean,
                scaled_loss: acc_scaled[h].mean,
                sigma: sigmas.get(h).copied().unwrap_or(0.0),
                var_r: est.map(|e| e.var_r).unwrap_or(0.0),
                var_gamma: est.map(|e| e.var_gamma).unwrap_or(0.0),
                e_g2: est.map(|e| e.e_g2).unwrap_or(0.0),
                rmse,
            };
            acc_unscaled[h] = RunningMoments::new();
            acc_scaled[h] = RunningMoments::new();
            m
        })
        .collect();
    let row = MetricsRow {
        update: updates,
        env_steps,
        episodes,
        selected_head,
        episode_return_mean: if acc_returns.count > 0 { acc_returns.mean } else { f64::NAN },
        heads,
    };
    *acc_returns = RunningMoments::new();
    row
}

/// Root-mean-squared error of greedy state values against an oracle
/// table, normalized by the oracle's own standard deviation (a constant
/// predictor scores 1).
pub fn relative_value_rmse(mh: &MultiHeadValue, head: usize, oracle: &[f64]) -> f64 {
    let mut err = 0.0;
    let mut oracle_m = RunningMoments::new();
    for (s, &v_star) in oracle.iter().enumerate() {
        let a = mh.greedy_action(head, s);
        // Pop-Art heads emit normalized outputs; compare unnormalized.
        let v = match &mh.heads[head].scaler {
            ScalerState::PopArt(st) => st.sigma * mh.predict(head, s, a) + st.mu,
            _ => mh.predict(head, s, a),
        };
        err += (v - v_star) * (v - v_star);
        oracle_m.update(v_star).unwrap();
    }
    let rmse = (err / oracle.len() as f64).sqrt();
    let denom = oracle_m.std().unwrap_or(0.0);
    if denom > 1e-9 {
        rmse / denom
    } else {
        rmse
    }
}

/// Ground-truth state values for the uncontrolled positional
/// environments (closed-form discounted sums of expected rewards).
pub fn oracle_state_values(spec: &MdpSpec, gamma: f64) -> Option<Vec<f64>> {
    match spec {
        MdpSpec::ConstantNegative { theta, horizon } => {
            let t = *horizon;
            Some(
                (0..t)
                    .map(|s| {
                        let remaining = t - s;
                        if gamma == 1.0 {
                            -theta * remaining as f64
                        } else {
                            -theta * (1.0 - gamma.powi(remaining as i32)) / (1.0 - gamma)
                        }
                    })
                    .collect(),
            )
        }
        MdpSpec::Spike { horizon, base_mean, .. } => {
            let t = *horizon;
            Some(
                (0..t)
                    .map(|s| {
                        let remaining = t - s;
                        if gamma == 1.0 {
                            base_mean * remaining as f64
                        } else {
                            base_mean * (1.0 - gamma.powi(remaining as i32)) / (1.0 - gamma)
                        }
                    })
                    .collect(),
            )
        }
        MdpSpec::RandomChain { len, .. } => {
            // needs the sampled reward table
            let env = spec.build().ok()?;
            let table = env.reward_table().to_vec();
            let mut values = vec![0.0; *len];
            let mut acc = 0.0;
            for s in (0..*len).rev() {
                acc = table[s] + gamma * acc;
                values[s] = acc;
            }
            Some(values)
        }
        _ => None,
    }
}

/// Splitmix-style derivation of per-component seeds from a root seed.
pub fn split_seed(root: u64, label: u64) -> u64 {
    let mut z = root ^ label.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use crate::values::ValueKind;

    #[test]
    fn n_step_target_cases() {
        // one-step reduction
        assert_abs_diff_eq!(n_step_target(&[2.0], &[0.9], 10.0).unwrap(), 11.0);
        // gamma = 0 everywhere: pure regression
        assert_eq!(n_step_target(&[3.0, 4.0], &[0.0, 0.0], 100.0).unwrap(), 3.0);
        // five ones, gamma 1, bootstrap 10
        assert_eq!(n_step_target(&[1.0; 5], &[1.0; 5], 10.0).unwrap(), 15.0);
        assert!(n_step_target(&[1.0], &[0.9, 0.9], 0.0).is_err());
    }

    #[test]
    fn td_error_linearity() {
        assert_eq!(td_error(2.0, 0.5), 1.5);
        assert_eq!(td_error(1.0, 1.0), 0.0);
        let c = 17.0;
        assert_eq!(td_error(c * 2.0, c * 0.5), c * td_error(2.0, 0.5));
    }

    #[test]
    fn sgd_step() {
        let kind = OptimizerKind::Sgd { lr: 1e-3 };
        let mut st = AdamState::default();
        let mut p = vec![1.0];
        optimizer_step(&kind, &mut st, &mut p, &[2.0]).unwrap();
        assert_abs_diff_eq!(p[0], 1.0 - 0.002, epsilon = 1e-15);
    }

    #[test]
    fn adam_steady_state_update_magnitudes() {
        // constant gradient fixed point: |update| -> lr * g/(|g| + eps)
        let lr = 2e-4;
        let eps = 1e-6;
        let kind = OptimizerKind::Adam { lr, beta1: 0.9, beta2: 0.999, eps };
        for (g, expected) in [(1.0, lr * 1.0 / (1.0 + eps)), (1e-8, lr * 1e-8 / (1e-8 + eps))] {
            let mut st = AdamState::new(1);
            let mut p = vec![0.0];
            let mut last = 0.0;
            for _ in 0..20_000 {
                let before = p[0];
                optimizer_step(&kind, &mut st, &mut p, &[g]).unwrap();
                last = (p[0] - before).abs();
            }
            assert_relative_eq!(last, expected, max_relative = 0.05);
        }
        // large-gradient regime lands within 5% of lr itself
        let mut st = AdamState::new(1);
        let mut p = vec![0.0];
        let mut last = 0.0;
        for _ in 0..20_000 {
            let before = p[0];
            optimizer_step(&kind, &mut st, &mut p, &[100.0 * eps]).unwrap();
            last = (p[0] - before).abs();
        }
        assert!((last - lr).abs() / lr < 0.05);
    }

    #[test]
    fn adam_shape_mismatch() {
        let kind = OptimizerKind::adam_default();
        let mut st = AdamState::new(2);
        let mut p = vec![0.0, 0.0];
        assert!(optimizer_step(&kind, &mut st, &mut p, &[1.0]).is_err());
    }

    #[test]
    fn bandit_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // single head is always selected
        let mut single = BanditState::new(1, 10, 0.5).unwrap();
        for _ in 0..5 {
            assert_eq!(single.select_head(&mut rng), 0);
        }
        // greedy argmax with zero exploration
        let mut b = BanditState::new(2, 10, 0.0).unwrap();
        b.pulls = vec![1, 1];
        b.update(0, 10.0);
        b.update(1, 0.0);
        for _ in 0..5 {
            assert_eq!(b.select_head(&mut rng), 0);
        }
    }

    #[test]
    fn bandit_uniform_at_full_exploration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = 4;
        let mut b = BanditState::new(k, 10, 1.0).unwrap();
        b.pulls = vec![1; k];
        let n = 10_000;
        let mut counts = vec![0usize; k];
        for _ in 0..n {
            counts[b.select_head(&mut rng)] += 1;
        }
        // chi-squared test, 3 dof, alpha = 0.001 -> critical value 16.27
        let expected = n as f64 / k as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 16.27, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn bandit_window_slides() {
        let mut b = BanditState::new(1, 2, 0.0).unwrap();
        b.update(0, 1.0);
        b.update(0, 3.0);
        b.update(0, 5.0);
        assert_eq!(b.window_mean(0), Some(4.0));
    }

    #[test]
    fn segment_discounts_truncate_at_terminal() {
        let seg = Segment {
            states: vec![0, 1, 2, 3],
            actions: vec![0; 3],
            rewards: vec![1.0; 3],
            terminal: Some(1),
        };
        assert_eq!(seg.discounts(0.9), vec![0.9, 0.0, 0.0]);
    }

    #[test]
    fn replay_fifo_eviction() {
        let mut rb = ReplayBuffer::new(2);
        for i in 0..3 {
            rb.push(Segment {
                states: vec![i, i],
                actions: vec![0],
                rewards: vec![i as f64],
                terminal: None,
            });
        }
        assert_eq!(rb.len(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for seg in rb.sample(16, &mut rng) {
            assert!(seg.rewards[0] >= 1.0);
        }
    }

    fn simple_setup(scaler: ScalerKind) -> TrainingSetup {
        TrainingSetup {
            env: MdpSpec::Chain { len: 5, goal_reward: 1.0, timeout: 30 },
            heads: vec![HeadSpec { clip: false, discount: 0.9 }],
            trunk_hidden: None,
            config: LearnerConfig {
                scaler,
                optimizer: OptimizerKind::Sgd { lr: 0.1 },
                epsilon_greedy: 0.3,
                batch_size: 8,
                target_update_interval: 20,
                metrics_interval: 50,
                ..Default::default()
            },
            oracle_values: None,
        }
    }

    #[test]
    fn smoke_run_emits_finite_row() {
        let result = run_training(&simple_setup(ScalerKind::None), 1, 3).unwrap();
        assert_eq!(result.log.rows.len(), 1);
        let row = &result.log.rows[0];
        assert!(row.heads[0].unscaled_loss.is_finite());
    }

    #[test]
    fn chain_learns_optimal_policy() {
        // learn off-policy from pure exploration, then inspect the
        // greedy policy of the returned network
        let mut setup = simple_setup(ScalerKind::ReturnBased);
        setup.config.epsilon_greedy = 1.0;
        setup.config.warmup_episodes = 2;
        let result = run_training(&setup, 3_000, 7).unwrap();
        for s in 0..5 {
            assert_eq!(result.values.greedy_action(0, s), 1, "state {s} should move right");
        }
    }

    #[test]
    fn run_training_deterministic() {
        let mut setup = simple_setup(ScalerKind::ReturnBased);
        setup.config.epsilon_greedy = 1.0;
        let a = run_training(&setup, 200, 42).unwrap();
        let b = run_training(&setup, 200, 42).unwrap();
        assert_eq!(a.log.to_csv(), b.log.to_csv());
        assert_eq!(a.values.heads[0].w, b.values.heads[0].w);
        let c = run_training(&setup, 200, 43).unwrap();
        assert_ne!(a.log.to_csv(), c.log.to_csv());
    }

    #[test]
    fn sync_target_idempotent_and_zeroes_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mh = MultiHeadValue::new(
            FeatureMap::OneHot { num_states: 4 },
            2,
            Some(8),
            &[HeadSpec { clip: false, discount: 0.9 }],
            ScalerKind::None,
            10,
            &mut rng,
        )
        .unwrap();
        let mut target = mh.clone();
        for w in &mut mh.heads[0].w {
            *w += 0.5;
        }
        assert!(mean_squared_gap(&mh, &target, 0) > 0.0);
        sync_target(&mh, &mut target);
        assert_eq!(mean_squared_gap(&mh, &target, 0), 0.0);
        let snapshot = target.heads[0].w.clone();
        sync_target(&mh, &mut target);
        assert_eq!(target.heads[0].w, snapshot);
    }

    #[test]
    fn huge_first_reward_is_bounded_by_batch_sigma() {
        // a first-ever reward of 1e6 in the batch must produce a scaled
        // error bounded independently of its magnitude
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut mh = MultiHeadValue::new(
            FeatureMap::OneHot { num_states: 3 },
            1,
            None,
            &[HeadSpec { clip: false, discount: 0.99 }],
            ScalerKind::ReturnBased,
            10,
            &mut rng,
        )
        .unwrap();
        // stale stats: tiny rewards seen so far
        let trace = EpisodeTrace::terminated(vec![0.01, 0.0, 0.02], 0.99).unwrap();
        mh.heads[0].stats.accumulate_episode(&trace).unwrap();
        let target = mh.clone();
        let mut optim = OptimStates::new(&mh);

        let mut segments: Vec<Segment> = (0..31)
            .map(|_| Segment {
                states: vec![0, 1],
                actions: vec![0],
                rewards: vec![0.0],
                terminal: None,
            })
            .collect();
        segments.push(Segment {
            states: vec![1, 2],
            actions: vec![0],
            rewards: vec![1e6],
            terminal: None,
        });
        let refs: Vec<&Segment> = segments.iter().collect();
        let config = LearnerConfig {
            scaler: ScalerKind::ReturnBased,
            optimizer: OptimizerKind::Sgd { lr: 1.0 },
            batch_size: 32,
            ..Default::default()
        };
        let metrics = train_step(&mut mh, &target, &refs, &config, &mut optim).unwrap();
        // |scaled delta| <= |delta| / sigma_batch, far below 1e6
        let max_scaled = metrics.scaled_loss[0].sqrt() * (32f64).sqrt();
        assert!(metrics.sigma_eff[0] >= 1e5, "sigma_eff {}", metrics.sigma_eff[0]);
        assert!(max_scaled < 100.0, "scaled magnitude {max_scaled}");
        assert!(metrics.unscaled_loss[0] > 1e9);
    }

    #[test]
    fn identical_heads_receive_identical_updates() {
        let spec = HeadSpec { clip: false, discount: 0.9 };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut mh = MultiHeadValue::new(
            FeatureMap::OneHot { num_states: 4 },
            2,
            None,
            &[spec, spec],
            ScalerKind::None,
            10,
            &mut rng,
        )
        .unwrap();
        let trace = EpisodeTrace::terminated(vec![1.0, 2.0], 0.9).unwrap();
        for head in &mut mh.heads {
            head.stats.accumulate_episode(&trace).unwrap();
        }
        let target = mh.clone();
        let mut optim = OptimStates::new(&mh);
        let seg = Segment {
            states: vec![0, 1],
            actions: vec![1],
            rewards: vec![2.0],
            terminal: None,
        };
        let refs = vec![&seg; 4];
        let config = LearnerConfig {
            scaler: ScalerKind::None,
            optimizer: OptimizerKind::Sgd { lr: 0.1 },
            ..Default::default()
        };
        train_step(&mut mh, &target, &refs, &config, &mut optim).unwrap();
        assert_eq!(mh.heads[0].w, mh.heads[1].w);
        assert_eq!(mh.heads[0].b, mh.heads[1].b);
    }

    #[test]
    fn single_head_none_scaler_is_classic_q_learning() {
        // hand-computed one-step tabular Q update
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mh = MultiHeadValue::new(
            FeatureMap::OneHot { num_states: 2 },
            1,
            None,
            &[HeadSpec { clip: false, discount: 0.5 }],
            ScalerKind::None,
            10,
            &mut rng,
        )
        .unwrap();
        mh.heads[0].w = vec![1.0, 3.0]; // Q(0)=1, Q(1)=3
        mh.heads[0].b = vec![0.0];
        let target = mh.clone();
        let mut optim = OptimStates::new(&mh);
        let seg = Segment { states: vec![0, 1], actions: vec![0], rewards: vec![2.0], terminal: None };
        let refs = vec![&seg];
        let config = LearnerConfig {
            scaler: ScalerKind::None,
            optimizer: OptimizerKind::Sgd { lr: 0.1 },
            n_step: 1,
            ..Default::default()
        };
        train_step(&mut mh, &target, &refs, &config, &mut optim).unwrap();
        // delta = 2 + 0.5*3 - 1 = 2.5; Q(0) += 0.1 * 2.5
        assert_abs_diff_eq!(mh.heads[0].w[0], 1.25, epsilon = 1e-12);
    }

    #[test]
    fn oracle_values_constant_negative() {
        let spec = MdpSpec::ConstantNegative { theta: 3.0, horizon: 100 };
        let v = oracle_state_values(&spec, 1.0).unwrap();
        assert_eq!(v[0], -300.0);
        assert_eq!(v[99], -3.0);
    }

    #[test]
    fn relative_rmse_of_constant_predictor_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mh = MultiHeadValue::new(
            FeatureMap::OneHot { num_states: 4 },
            1,
            None,
            &[HeadSpec { clip: false, discount: 1.0 }],
            ScalerKind::None,
            10,
            &mut rng,
        )
        .unwrap();
        // zero predictor vs oracle with mean zero: rmse equals std
        let oracle = vec![-2.0, -1.0, 1.0, 2.0];
        assert_relative_eq!(relative_value_rmse(&mh, 0, &oracle), 1.0, max_relative = 1e-9);
    }

    // keep ValueKind referenced; the standalone ValueFn path is covered
    // in values::tests
    #[allow(dead_code)]
    fn _touch(_: ValueKind) {}
}
