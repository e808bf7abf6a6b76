//! Strict TOML configuration: unknown keys are hard errors, every value
//! is validated with a per-key diagnostic, and missing values fall back
//! to the documented defaults.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TdScaleError};
use crate::learner::{LearnerConfig, OptimizerKind};
use crate::scaling::ScalerKind;

/// Raw deserialization targets: everything optional, nothing validated.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    scaler: Option<String>,
    threads: Option<usize>,
    popart: Option<RawPopArt>,
    learner: Option<RawLearner>,
    noise: Option<RawNoise>,
    spike: Option<RawSpike>,
    scale_band: Option<RawScaleBand>,
    multihead: Option<RawMultihead>,
    bias_init: Option<RawBiasInit>,
    oracle: Option<RawOracle>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPopArt {
    step_size: Option<f64>,
    lower: Option<f64>,
    upper: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLearner {
    n_step: Option<usize>,
    target_update_interval: Option<usize>,
    batch_size: Option<usize>,
    replay_capacity: Option<usize>,
    update_period: Option<usize>,
    epsilon_greedy: Option<f64>,
    sigma_v: Option<f64>,
    error_window: Option<usize>,
    bandit_window: Option<usize>,
    bandit_epsilon: Option<f64>,
    metrics_interval: Option<usize>,
    optimizer: Option<String>,
    learning_rate: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNoise {
    steps: Option<u64>,
    error_window: Option<usize>,
    sigma_v: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpike {
    pre_spike_steps: Option<u64>,
    post_spike_steps: Option<u64>,
    base_mean: Option<f64>,
    base_std: Option<f64>,
    spike_reward: Option<f64>,
    discount: Option<f64>,
    update_period: Option<usize>,
    popart_upper: Option<f64>,
    learning_rate: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScaleBand {
    budget_updates: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMultihead {
    budget_updates: Option<u64>,
    trunk_hidden: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBiasInit {
    budget_updates: Option<u64>,
    metrics_interval: Option<usize>,
    learning_rate: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOracle {
    samples: Option<u64>,
}

/// Pop-Art EMA parameters.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PopArtParams {
    pub step_size: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Noise-amplification preset parameters.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct NoiseParams {
    pub steps: u64,
    pub error_window: usize,
    pub sigma_v: f64,
}

/// Spike-stability preset parameters.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SpikeParams {
    pub pre_spike_steps: u64,
    pub post_spike_steps: u64,
    pub base_mean: f64,
    pub base_std: f64,
    pub spike_reward: f64,
    pub discount: f64,
    pub update_period: usize,
    pub popart_upper: f64,
    pub learning_rate: f64,
}

/// Everything the presets need, fully defaulted and validated.
#[derive(Debug, Clone, Serialize)]
pub struct HarnessConfig {
    pub scaler: ScalerKind,
    pub threads: Option<usize>,
    pub popart: PopArtParams,
    pub learner: LearnerConfig,
    pub noise: NoiseParams,
    pub spike: SpikeParams,
    pub scale_band_budget: u64,
    pub multihead_budget: u64,
    pub multihead_trunk_hidden: usize,
    pub bias_init_budget: u64,
    pub bias_init_metrics_interval: usize,
    pub bias_init_learning_rate: f64,
    pub oracle_samples: u64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            scaler: ScalerKind::ReturnBased,
            threads: None,
            popart: PopArtParams { step_size: 1e-3, lower: 1e-3, upper: 1e3 },
            learner: LearnerConfig::default(),
            noise: NoiseParams { steps: 1_000_000, error_window: 10_000, sigma_v: 1.0 },
            spike: SpikeParams {
                pre_spike_steps: 5_000_000,
                post_spike_steps: 50_000,
                base_mean: 30.0,
                base_std: 200.0,
                spike_reward: -1e6,
                discount: 0.99,
                update_period: 16,
                popart_upper: 1e6,
                learning_rate: 30.0,
            },
            scale_band_budget: 2_000,
            multihead_budget: 20_000,
            multihead_trunk_hidden: 32,
            bias_init_budget: 20_000,
            bias_init_metrics_interval: 10,
            bias_init_learning_rate: 5.0,
            oracle_samples: 20_000,
        }
    }
}

fn check_positive(errors: &mut Vec<String>, key: &str, value: f64) {
    if !(value > 0.0) || !value.is_finite() {
        errors.push(format!("{key}: {value} → must be positive"));
    }
}

fn check_unit(errors: &mut Vec<String>, key: &str, value: f64) {
    if !(0.0..=1.0).contains(&value) || !value.is_finite() {
        errors.push(format!("{key}: {value} → must be in [0, 1]"));
    }
}

fn check_nonzero(errors: &mut Vec<String>, key: &str, value: usize) {
    if value == 0 {
        errors.push(format!("{key}: 0 → must be at least 1"));
    }
}

/// Parse and validate configuration text. Unknown keys, type mismatches
/// and out-of-range values all land in the error list with one
/// diagnostic per key.
pub fn validate_config(text: &str) -> std::result::Result<HarnessConfig, Vec<String>> {
    let raw: RawConfig = match toml::from_str(text) {
        Ok(raw) => raw,
        Err(e) => return Err(vec![e.to_string()]),
    };
    let mut cfg = HarnessConfig::default();
    let mut errors = Vec::new();

    if let Some(s) = &raw.scaler {
        match s.parse::<ScalerKind>() {
            Ok(kind) => cfg.scaler = kind,
            Err(e) => errors.push(format!("scaler: {e}")),
        }
    }
    if let Some(t) = raw.threads {
        if t == 0 {
            errors.push("threads: 0 → must be at least 1".into());
        } else {
            cfg.threads = Some(t);
        }
    }
    if let Some(p) = &raw.popart {
        if let Some(v) = p.step_size {
            check_positive(&mut errors, "popart.step_size", v);
            cfg.popart.step_size = v;
        }
        if let Some(v) = p.lower {
            check_positive(&mut errors, "popart.lower", v);
            cfg.popart.lower = v;
        }
        if let Some(v) = p.upper {
            check_positive(&mut errors, "popart.upper", v);
            cfg.popart.upper = v;
        }
        if cfg.popart.lower > cfg.popart.upper {
            errors.push(format!(
                "popart.lower: {} → must not exceed popart.upper ({})",
                cfg.popart.lower, cfg.popart.upper
            ));
        }
    }
    if let Some(l) = &raw.learner {
        let lc = &mut cfg.learner;
        if let Some(v) = l.n_step {
            check_nonzero(&mut errors, "learner.n_step", v);
            lc.n_step = v;
        }
        if let Some(v) = l.target_update_interval {
            check_nonzero(&mut errors, "learner.target_update_interval", v);
            lc.target_update_interval = v;
        }
        if let Some(v) = l.batch_size {
            check_nonzero(&mut errors, "learner.batch_size", v);
            lc.batch_size = v;
        }
        if let Some(v) = l.replay_capacity {
            check_nonzero(&mut errors, "learner.replay_capacity", v);
            lc.replay_capacity = v;
        }
        if let Some(v) = l.update_period {
            check_nonzero(&mut errors, "learner.update_period", v);
            lc.update_period = v;
        }
        if let Some(v) = l.epsilon_greedy {
            check_unit(&mut errors, "learner.epsilon_greedy", v);
            lc.epsilon_greedy = v;
        }
        if let Some(v) = l.sigma_v {
            check_positive(&mut errors, "learner.sigma_v", v);
            lc.sigma_v = v;
        }
        if let Some(v) = l.error_window {
            check_nonzero(&mut errors, "learner.error_window", v);
            lc.error_window = v;
        }
        if let Some(v) = l.bandit_window {
            check_nonzero(&mut errors, "learner.bandit_window", v);
            lc.bandit_window = v;
        }
        if let Some(v) = l.bandit_epsilon {
            check_unit(&mut errors, "learner.bandit_epsilon", v);
            lc.bandit_epsilon = v;
        }
        if let Some(v) = l.metrics_interval {
            check_nonzero(&mut errors, "learner.metrics_interval", v);
            lc.metrics_interval = v;
        }
        let lr = l.learning_rate.unwrap_or(2e-4);
        if let Some(v) = l.learning_rate {
            check_positive(&mut errors, "learner.learning_rate", v);
        }
        match l.optimizer.as_deref() {
            None => {
                if l.learning_rate.is_some() {
                    lc.optimizer =
                        OptimizerKind::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-6 };
                }
            }
            Some("adam") => {
                lc.optimizer = OptimizerKind::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-6 };
            }
            Some("sgd") => {
                lc.optimizer = OptimizerKind::Sgd { lr };
            }
            Some(other) => {
                errors.push(format!("learner.optimizer: {other} → must be `adam` or `sgd`"));
            }
        }
    }
    if let Some(n) = &raw.noise {
        if let Some(v) = n.steps {
            if v < 10_000 {
                errors.push(format!("noise.steps: {v} → must be at least 10000"));
            }
            cfg.noise.steps = v;
        }
        if let Some(v) = n.error_window {
            check_nonzero(&mut errors, "noise.error_window", v);
            cfg.noise.error_window = v;
        }
        if let Some(v) = n.sigma_v {
            check_positive(&mut errors, "noise.sigma_v", v);
            cfg.noise.sigma_v = v;
        }
    }
    if let Some(s) = &raw.spike {
        if let Some(v) = s.pre_spike_steps {
            if v == 0 {
                errors.push("spike.pre_spike_steps: 0 → must be at least 1".into());
            }
            cfg.spike.pre_spike_steps = v;
        }
        if let Some(v) = s.post_spike_steps {
            if v == 0 {
                errors.push("spike.post_spike_steps: 0 → must be at least 1".into());
            }
            cfg.spike.post_spike_steps = v;
        }
        if let Some(v) = s.base_mean {
            cfg.spike.base_mean = v;
        }
        if let Some(v) = s.base_std {
            if v < 0.0 {
                errors.push(format!("spike.base_std: {v} → must be non-negative"));
            }
            cfg.spike.base_std = v;
        }
        if let Some(v) = s.spike_reward {
            cfg.spike.spike_reward = v;
        }
        if let Some(v) = s.discount {
            check_unit(&mut errors, "spike.discount", v);
            cfg.spike.discount = v;
        }
        if let Some(v) = s.update_period {
            check_nonzero(&mut errors, "spike.update_period", v);
            cfg.spike.update_period = v;
        }
        if let Some(v) = s.popart_upper {
            check_positive(&mut errors, "spike.popart_upper", v);
            cfg.spike.popart_upper = v;
        }
        if let Some(v) = s.learning_rate {
            check_positive(&mut errors, "spike.learning_rate", v);
            cfg.spike.learning_rate = v;
        }
    }
    if let Some(b) = &raw.scale_band {
        if let Some(v) = b.budget_updates {
            if v == 0 {
                errors.push("scale_band.budget_updates: 0 → must be at least 1".into());
            }
            cfg.scale_band_budget = v;
        }
    }
    if let Some(m) = &raw.multihead {
        if let Some(v) = m.budget_updates {
            if v == 0 {
                errors.push("multihead.budget_updates: 0 → must be at least 1".into());
            }
            cfg.multihead_budget = v;
        }
        if let Some(v) = m.trunk_hidden {
            check_nonzero(&mut errors, "multihead.trunk_hidden", v);
            cfg.multihead_trunk_hidden = v;
        }
    }
    if let Some(b) = &raw.bias_init {
        if let Some(v) = b.budget_updates {
            if v == 0 {
                errors.push("bias_init.budget_updates: 0 → must be at least 1".into());
            }
            cfg.bias_init_budget = v;
        }
        if let Some(v) = b.metrics_interval {
            check_nonzero(&mut errors, "bias_init.metrics_interval", v);
            cfg.bias_init_metrics_interval = v;
        }
        if let Some(v) = b.learning_rate {
            check_positive(&mut errors, "bias_init.learning_rate", v);
            cfg.bias_init_learning_rate = v;
        }
    }
    if let Some(o) = &raw.oracle {
        if let Some(v) = o.samples {
            if v < 1_000 {
                errors.push(format!("oracle.samples: {v} → must be at least 1000"));
            }
            cfg.oracle_samples = v;
        }
    }

    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(errors)
    }
}

/// Read and validate a configuration file; `None` means defaults.
pub fn validate_config_file(path: Option<&std::path::Path>) -> Result<HarnessConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)?,
        None => String::new(),
    };
    validate_config(&text).map_err(|errors| TdScaleError::Config(errors.join("; ")))
}
