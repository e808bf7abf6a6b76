//! Value-function representations with hand-derived gradients: tabular,
//! linear, a one-hidden-layer network, and the multi-head shared-trunk
//! architecture with per-head statistics and scalers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TdScaleError};
use crate::scaling::{ScalerKind, ScalerState};
use crate::stats::ReturnStats;

/// State-to-feature-vector map over a flat state space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    /// One-hot indicator per state.
    OneHot { num_states: usize },
    /// Single normalized coordinate in [-1, 1] plus a constant 1.
    Coord { num_states: usize },
}

impl FeatureMap {
    pub fn dim(&self) -> usize {
        match self {
            FeatureMap::OneHot { num_states } => *num_states,
            FeatureMap::Coord { .. } => 2,
        }
    }

    pub fn num_states(&self) -> usize {
        match self {
            FeatureMap::OneHot { num_states } | FeatureMap::Coord { num_states } => *num_states,
        }
    }

    pub fn features(&self, state: usize) -> Vec<f64> {
        match self {
            FeatureMap::OneHot { num_states } => {
                let mut phi = vec![0.0; *num_states];
                phi[state] = 1.0;
                phi
            }
            FeatureMap::Coord { num_states } => {
                let n = (*num_states).max(2) as f64;
                vec![2.0 * state as f64 / (n - 1.0) - 1.0, 1.0]
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Tabular,
    Linear,
    SmallNet,
}

pub const SMALLNET_HIDDEN: usize = 64;

/// A Q-function over flat (state, action) pairs with a flat parameter
/// vector.
///
/// Parameter layouts:
/// - Tabular: `params[s * A + a]`
/// - Linear: for each action `a`: weights (dim) then bias, i.e.
///   `params[a * (d + 1) .. (a + 1) * (d + 1)]`
/// - SmallNet: `W1` (h x d, row-major), `b1` (h), then per action
///   `w2_a` (h) and `b2_a`
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueFn {
    pub kind: ValueKind,
    pub features: FeatureMap,
    pub num_actions: usize,
    pub hidden: usize,
    pub params: Vec<f64>,
}

impl ValueFn {
    pub fn zeros(kind: ValueKind, features: FeatureMap, num_actions: usize) -> Self {
        let hidden = if kind == ValueKind::SmallNet { SMALLNET_HIDDEN } else { 0 };
        let n = Self::param_len(kind, &features, num_actions, hidden);
        ValueFn { kind, features, num_actions, hidden, params: vec![0.0; n] }
    }

    /// Random initialization. SmallNet weights are scaled so the
    /// prediction noise at init is around 1e-2 (the sigma_V floor made
    /// measurable); tabular and linear start at zero.
    pub fn init(kind: ValueKind, features: FeatureMap, num_actions: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut vf = Self::zeros(kind, features, num_actions);
        if kind == ValueKind::SmallNet {
            let d = features.dim();
            let h = vf.hidden;
            let w1_std = (1.0 / d as f64).sqrt();
            let w2_std = 1e-2 * (2.0 * d as f64 / h as f64).sqrt();
            for i in 0..h * d {
                vf.params[i] = w1_std * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
            let out = h * d + h;
            for a in 0..num_actions {
                for j in 0..h {
                    vf.params[out + a * (h + 1) + j] =
                        w2_std * rng.sample::<f64, _>(rand_distr::StandardNormal);
                }
            }
        }
        vf
    }

    fn param_len(kind: ValueKind, features: &FeatureMap, num_actions: usize, hidden: usize) -> usize {
        match kind {
            ValueKind::Tabular => features.num_states() * num_actions,
            ValueKind::Linear => num_actions * (features.dim() + 1),
            ValueKind::SmallNet => hidden * features.dim() + hidden + num_actions * (hidden + 1),
        }
    }

    pub fn predict(&self, state: usize, action: usize) -> f64 {
        match self.kind {
            ValueKind::Tabular => self.params[state * self.num_actions + action],
            ValueKind::Linear => {
                let phi = self.features.features(state);
                let d = phi.len();
                let base = action * (d + 1);
                let w = &self.params[base..base + d];
                let b = self.params[base + d];
                dot(w, &phi) + b
            }
            ValueKind::SmallNet => {
                let (z, _) = self.hidden_activations(state);
                let h = self.hidden;
                let out = h * self.features.dim() + h;
                let base = out + action * (h + 1);
                dot(&self.params[base..base + h], &z) + self.params[base + h]
            }
        }
    }

    /// Rectifier hidden layer: (activations, preactivation mask).
    fn hidden_activations(&self, state: usize) -> (Vec<f64>, Vec<bool>) {
        let phi = self.features.features(state);
        let d = phi.len();
        let h = self.hidden;
        let mut z = vec![0.0; h];
        let mut active = vec![false; h];
        for j in 0..h {
            let pre = dot(&self.params[j * d..(j + 1) * d], &phi) + self.params[h * d + j];
            if pre > 0.0 {
                z[j] = pre;
                active[j] = true;
            }
        }
        (z, active)
    }

    /// d predict / d params, same layout as `params`.
    pub fn gradient(&self, state: usize, action: usize) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        match self.kind {
            ValueKind::Tabular => grad[state * self.num_actions + action] = 1.0,
            ValueKind::Linear => {
                let phi = self.features.features(state);
                let d = phi.len();
                let base = action * (d + 1);
                grad[base..base + d].copy_from_slice(&phi);
                grad[base + d] = 1.0;
            }
            ValueKind::SmallNet => {
                let phi = self.features.features(state);
                let d = phi.len();
                let h = self.hidden;
                let (z, active) = self.hidden_activations(state);
                let out = h * d + h;
                let base = out + action * (h + 1);
                // output layer
                grad[base..base + h].copy_from_slice(&z);
                grad[base + h] = 1.0;
                // hidden layer, through the rectifier mask
                for j in 0..h {
                    if active[j] {
                        let w2 = self.params[base + j];
                        for (i, &p) in phi.iter().enumerate() {
                            grad[j * d + i] = w2 * p;
                        }
                        grad[h * d + j] = w2;
                    }
                }
            }
        }
        grad
    }

    /// Shift output biases so that the mean prediction over all states
    /// and actions equals E[G] from the given statistics.
    pub fn init_value_bias(&mut self, stats: &ReturnStats) -> Result<()> {
        if stats.g.count == 0 {
            return Err(TdScaleError::EmptyStats("init_value_bias needs return statistics"));
        }
        let e_g = stats.g.mean;
        match self.kind {
            ValueKind::Tabular => {
                for p in &mut self.params {
                    *p = e_g;
                }
            }
            ValueKind::Linear => {
                let d = self.features.dim();
                let probe_mean = self.mean_prediction();
                for a in 0..self.num_actions {
                    self.params[a * (d + 1) + d] += e_g - probe_mean;
                }
            }
            ValueKind::SmallNet => {
                let h = self.hidden;
                let out = h * self.features.dim() + h;
                let probe_mean = self.mean_prediction();
                for a in 0..self.num_actions {
                    self.params[out + a * (h + 1) + h] += e_g - probe_mean;
                }
            }
        }
        Ok(())
    }

    fn mean_prediction(&self) -> f64 {
        let n = self.features.num_states();
        let mut acc = 0.0;
        for s in 0..n {
            for a in 0..self.num_actions {
                acc += self.predict(s, a);
            }
        }
        acc / (n * self.num_actions) as f64
    }

    /// Standard deviation of predictions over all (state, action) probes;
    /// the measurement protocol behind the sigma_V floor.
    pub fn measure_sigma_v(&self) -> f64 {
        let n = self.features.num_states();
        let mut m = crate::stats::RunningMoments::new();
        for s in 0..n {
            for a in 0..self.num_actions {
                m.update(self.predict(s, a)).unwrap();
            }
        }
        m.std().unwrap_or(0.0)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One value objective: clipped or raw rewards, and a discount.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub clip: bool,
    pub discount: f64,
}

impl HeadSpec {
    /// The 10-head layout: 5 discounts, each with clipped and unclipped
    /// rewards.
    pub fn ten_heads() -> Vec<HeadSpec> {
        let mut heads = Vec::new();
        for &clip in &[false, true] {
            for &discount in &[0.0, 0.9, 0.99, 0.999, 1.0] {
                heads.push(HeadSpec { clip, discount });
            }
        }
        heads
    }

    pub fn transform_reward(&self, r: f64) -> f64 {
        if self.clip {
            crate::scaling::clip_reward(r)
        } else {
            r
        }
    }
}

/// One head: a linear Q layer over trunk features, its own return
/// statistics and scaler state.
#[derive(Debug, Clone)]
pub struct Head {
    pub spec: HeadSpec,
    /// Per action: weights over trunk output, then bias.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub stats: ReturnStats,
    pub scaler_kind: ScalerKind,
    pub scaler: ScalerState,
}

/// Shared feature trunk. Identity passes raw features straight to the
/// heads (one-hot features make each head tabular); Hidden is a
/// rectifier layer whose gradient receives each head's contribution
/// scaled by 1/sqrt(n).
#[derive(Debug, Clone)]
pub enum Trunk {
    Identity,
    Hidden { w: Vec<f64>, b: Vec<f64>, hidden: usize },
}

#[derive(Debug, Clone)]
pub struct MultiHeadValue {
    pub features: FeatureMap,
    pub num_actions: usize,
    pub trunk: Trunk,
    pub heads: Vec<Head>,
}

impl MultiHeadValue {
    pub fn new(
        features: FeatureMap,
        num_actions: usize,
        trunk_hidden: Option<usize>,
        specs: &[HeadSpec],
        scaler_kind: ScalerKind,
        error_window: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(TdScaleError::InvalidParam("need at least one head".into()));
        }
        let d = features.dim();
        let trunk = match trunk_hidden {
            None => Trunk::Identity,
            Some(h) => {
                let std = (1.0 / d as f64).sqrt();
                let w = (0..h * d)
                    .map(|_| std * rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                Trunk::Hidden { w, b: vec![0.0; h], hidden: h }
            }
        };
        let width = match &trunk {
            Trunk::Identity => d,
            Trunk::Hidden { hidden, .. } => *hidden,
        };
        let heads = specs
            .iter()
            .map(|&spec| {
                Ok(Head {
                    spec,
                    w: vec![0.0; num_actions * width],
                    b: vec![0.0; num_actions],
                    stats: ReturnStats::new(),
                    scaler_kind,
                    scaler: ScalerState::for_kind(scaler_kind, error_window)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MultiHeadValue { features, num_actions, trunk, heads })
    }

    pub fn trunk_width(&self) -> usize {
        match &self.trunk {
            Trunk::Identity => self.features.dim(),
            Trunk::Hidden { hidden, .. } => *hidden,
        }
    }

    /// Trunk output for one state: (features-or-activations, rectifier
    /// mask for the Hidden trunk).
    pub fn trunk_forward(&self, state: usize) -> (Vec<f64>, Vec<bool>) {
        let phi = self.features.features(state);
        match &self.trunk {
            Trunk::Identity => {
                let n = phi.len();
                (phi, vec![true; n])
            }
            Trunk::Hidden { w, b, hidden } => {
                let d = phi.len();
                let mut z = vec![0.0; *hidden];
                let mut active = vec![false; *hidden];
                for j in 0..*hidden {
                    let pre = dot(&w[j * d..(j + 1) * d], &phi) + b[j];
                    if pre > 0.0 {
                        z[j] = pre;
                        active[j] = true;
                    }
                }
                (z, active)
            }
        }
    }

    /// One Q-vector per head, from the shared trunk features.
    pub fn head_forward(&self, state: usize) -> Vec<Vec<f64>> {
        let (z, _) = self.trunk_forward(state);
        let width = z.len();
        self.heads
            .iter()
            .map(|head| {
                (0..self.num_actions)
                    .map(|a| dot(&head.w[a * width..(a + 1) * width], &z) + head.b[a])
                    .collect()
            })
            .collect()
    }

    pub fn predict(&self, head: usize, state: usize, action: usize) -> f64 {
        let (z, _) = self.trunk_forward(state);
        let width = z.len();
        let h = &self.heads[head];
        dot(&h.w[action * width..(action + 1) * width], &z) + h.b[action]
    }

    /// Greedy action; ties break toward the lowest index.
    pub fn greedy_action(&self, head: usize, state: usize) -> usize {
        let q = &self.head_forward(state)[head];
        let mut best = 0;
        for (a, &v) in q.iter().enumerate().skip(1) {
            if v > q[best] {
                best = a;
            }
        }
        best
    }

    /// Shift head output biases toward E[G] of that head's statistics.
    pub fn init_value_bias(&mut self) -> Result<()> {
        let probes: Vec<usize> = (0..self.features.num_states()).collect();
        let width = self.trunk_width();
        for i in 0..self.heads.len() {
            if self.heads[i].stats.g.count == 0 {
                return Err(TdScaleError::EmptyStats("init_value_bias needs return statistics"));
            }
            let e_g = self.heads[i].stats.g.mean;
            let mut mean = 0.0;
            for &s in &probes {
                let (z, _) = self.trunk_forward(s);
                for a in 0..self.num_actions {
                    mean += dot(&self.heads[i].w[a * width..(a + 1) * width], &z)
                        + self.heads[i].b[a];
                }
            }
            mean /= (probes.len() * self.num_actions) as f64;
            for a in 0..self.num_actions {
                self.heads[i].b[a] += e_g - mean;
            }
        }
        Ok(())
    }
}

/// Accumulated gradients for one optimizer step over a multi-head value:
/// trunk gradients carry each head's contribution times 1/sqrt(n).
#[derive(Debug, Clone)]
pub struct MultiHeadGradient {
    pub trunk_w: Vec<f64>,
    pub trunk_b: Vec<f64>,
    /// Per head: (dw, db) in head layout.
    pub heads: Vec<(Vec<f64>, Vec<f64>)>,
}

impl MultiHeadGradient {
    pub fn zeros(mh: &MultiHeadValue) -> Self {
        let (tw, tb) = match &mh.trunk {
            Trunk::Identity => (0, 0),
            Trunk::Hidden { w, b, .. } => (w.len(), b.len()),
        };
        MultiHeadGradient {
            trunk_w: vec![0.0; tw],
            trunk_b: vec![0.0; tb],
            heads: mh
                .heads
                .iter()
                .map(|h| (vec![0.0; h.w.len()], vec![0.0; h.b.len()]))
                .collect(),
        }
    }

    /// Accumulate `coeff * d predict(head, state, action) / d params`.
    /// The trunk contribution is additionally scaled by `trunk_scale`
    /// (the 1/sqrt(n) rule).
    pub fn accumulate(
        &mut self,
        mh: &MultiHeadValue,
        head: usize,
        state: usize,
        action: usize,
        coeff: f64,
        trunk_scale: f64,
    ) {
        let (z, active) = mh.trunk_forward(state);
        let width = z.len();
        let (hw, hb) = &mut self.heads[head];
        for j in 0..width {
            hw[action * width + j] += coeff * z[j];
        }
        hb[action] += coeff;
        if let Trunk::Hidden { .. } = mh.trunk {
            let phi = mh.features.features(state);
            let d = phi.len();
            let w2 = &mh.heads[head].w[action * width..(action + 1) * width];
            for j in 0..width {
                if active[j] {
                    let c = coeff * trunk_scale * w2[j];
                    for (i, &p) in phi.iter().enumerate() {
                        self.trunk_w[j * d + i] += c * p;
                    }
                    self.trunk_b[j] += c;
                }
            }
        }
    }
}
