//! The eight named experiment presets. Each writes CSV time series and
//! a JSON summary, returns Err on any machine-checked invariant
//! violation, and is fully deterministic given its seed.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{fan_out, thread_cap, HarnessConfig, OutputSink};
use crate::env::{
    gen_scenario, MdpSpec, RegressionSpec, ScenarioKind, ScenarioParams, SpikeTrigger,
};
use crate::error::{Result, TdScaleError};
use crate::learner::{
    oracle_state_values, relative_value_rmse, run_training, split_seed, sync_target, train_step,
    LearnerConfig, OptimStates, OptimizerKind, ReplayBuffer, Segment, TrainingSetup,
};
use crate::oracle::{
    brownian_shuffle_check, dominance_reports, empirical_delta_variance, false_friend_ratio,
    noise_amplification_run, random_mdp_suite, scenario_scale_ratio, smooth_td_variance,
    suite_delta_sigma_ratios, transient_value_table, OracleReport,
};
use crate::scaling::{ScalerKind, ScalerState};
use crate::stats::EpisodeTrace;
use crate::values::{FeatureMap, HeadSpec, MultiHeadValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresetName {
    Scenarios,
    ScaleBand,
    NoiseAmplif,
    AdamScatter,
    SpikeStability,
    MultiheadBalance,
    BiasInit,
    OracleSuite,
}

impl PresetName {
    pub const ALL: [PresetName; 8] = [
        PresetName::Scenarios,
        PresetName::ScaleBand,
        PresetName::NoiseAmplif,
        PresetName::AdamScatter,
        PresetName::SpikeStability,
        PresetName::MultiheadBalance,
        PresetName::BiasInit,
        PresetName::OracleSuite,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PresetName::Scenarios => "scenarios",
            PresetName::ScaleBand => "scale-band",
            PresetName::NoiseAmplif => "noise-amplif",
            PresetName::AdamScatter => "adam-scatter",
            PresetName::SpikeStability => "spike-stability",
            PresetName::MultiheadBalance => "multihead-balance",
            PresetName::BiasInit => "bias-init",
            PresetName::OracleSuite => "oracle-suite",
        }
    }
}

impl FromStr for PresetName {
    type Err = TdScaleError;

    fn from_str(s: &str) -> Result<Self> {
        PresetName::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| TdScaleError::UnknownPreset(s.to_string()))
    }
}

/// Run one preset end to end: compute, write artifacts and manifest.
pub fn run_preset(
    name: PresetName,
    config: &HarnessConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<()> {
    let mut sink = OutputSink::new(out_dir)?;
    match name {
        PresetName::Scenarios => preset_scenarios(config, seed, &mut sink)?,
        PresetName::ScaleBand => preset_scale_band(config, seed, &mut sink)?,
        PresetName::NoiseAmplif => preset_noise_amplif(config, seed, &mut sink)?,
        PresetName::AdamScatter => preset_adam_scatter(config, seed, &mut sink)?,
        PresetName::SpikeStability => preset_spike_stability(config, seed, &mut sink)?,
        PresetName::MultiheadBalance => preset_multihead(config, seed, &mut sink)?,
        PresetName::BiasInit => preset_bias_init(config, seed, &mut sink)?,
        PresetName::OracleSuite => preset_oracle_suite(config, seed, &mut sink)?,
    }
    sink.finish(name.as_str(), seed, config)
}

// ---------------------------------------------------------------------
// scenarios

#[derive(Debug, Serialize)]
pub struct ScenarioRecord {
    pub kind: String,
    pub sigma_ratio: f64,
    pub oracle_std_ratio: f64,
    /// sigma_ratio / oracle_std_ratio; 1.0 means the scale maps the
    /// variant exactly onto the reference.
    pub map_factor: f64,
    pub invariant_ok: bool,
    pub false_friend: String,
    pub false_friend_ratio: f64,
    /// Smooth-approximator TD-error variance ratio (shuffle clause).
    pub smooth_var_ratio: f64,
}

/// Transient-regime TD-error variance of one trace (the criterion-3
/// construction applied to scenario traces).
fn transient_td_variance(trace: &EpisodeTrace, gamma: f64, samples: u64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    empirical_delta_variance(
        std::slice::from_ref(trace),
        |_| transient_value_table(trace, gamma, &mut rng),
        samples,
    )
}

/// Scenario records for all six kinds; the discount scenario uses the
/// long-horizon variant discount 0.999.
pub fn scenario_records(samples: u64, seed: u64) -> Result<Vec<ScenarioRecord>> {
    let mut records = Vec::new();
    for (i, kind) in ScenarioKind::ALL.into_iter().enumerate() {
        let mut params = ScenarioParams::default();
        if kind == ScenarioKind::Discount {
            params.gamma_var = 0.999;
        }
        let sc = gen_scenario(kind, &params, seed)?;
        let invariant_ok = sc.check_invariant(&params).is_ok();
        if !invariant_ok {
            return Err(TdScaleError::InvalidTrace(format!(
                "scenario invariant violated for {kind:?}"
            )));
        }
        let sigma_ratio = scenario_scale_ratio(&sc)?;
        let v_ref =
            transient_td_variance(&sc.reference, sc.gamma_ref, samples, split_seed(seed, i as u64))?;
        let v_var = transient_td_variance(
            &sc.variant,
            sc.gamma_var,
            samples,
            split_seed(seed, 100 + i as u64),
        )?;
        let oracle_std_ratio = (v_var / v_ref).sqrt();
        let smooth_var_ratio =
            smooth_td_variance(&sc.variant, 5)? / smooth_td_variance(&sc.reference, 5)?;
        let (friend, friend_ratio) = match kind {
            ScenarioKind::Offset => (
                ScalerKind::RewardStd.as_str(),
                false_friend_ratio(ScalerKind::RewardStd, &sc)?,
            ),
            ScenarioKind::Shuffle => (
                ScalerKind::ReturnStd.as_str(),
                false_friend_ratio(ScalerKind::ReturnStd, &sc)?,
            ),
            ScenarioKind::Discount => (
                ScalerKind::Horizon.as_str(),
                false_friend_ratio(ScalerKind::Horizon, &sc)?,
            ),
            _ => ("none", f64::NAN),
        };
        records.push(ScenarioRecord {
            kind: format!("{kind:?}"),
            sigma_ratio,
            oracle_std_ratio,
            map_factor: sigma_ratio / oracle_std_ratio,
            invariant_ok,
            false_friend: friend.to_string(),
            false_friend_ratio: friend_ratio,
            smooth_var_ratio,
        });
    }
    Ok(records)
}

fn preset_scenarios(config: &HarnessConfig, seed: u64, sink: &mut OutputSink) -> Result<()> {
    let records = scenario_records(config.oracle_samples, seed)?;
    let mut csv = String::from(
        "kind,sigma_ratio,oracle_std_ratio,map_factor,invariant_ok,false_friend,false_friend_ratio,smooth_var_ratio\n",
    );
    for r in &records {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.kind,
            r.sigma_ratio,
            r.oracle_std_ratio,
            r.map_factor,
            r.invariant_ok,
            r.false_friend,
            r.false_friend_ratio,
            r.smooth_var_ratio
        )
        .unwrap();
    }
    sink.write("scenarios.csv", &csv)?;
    #[derive(Serialize)]
    struct Summary {
        schema_version: u32,
        records: Vec<ScenarioRecord>,
    }
    sink.write_json(
        "summary.json",
        &Summary { schema_version: super::SUMMARY_SCHEMA_VERSION, records },
    )
}

// ---------------------------------------------------------------------
// scale-band

#[derive(Debug, Serialize)]
pub struct BandRecord {
    pub task: usize,
    pub reward_scale: f64,
    pub len: usize,
    pub gamma: f64,
    pub unscaled_loss_mean: f64,
    pub scaled_loss_mean: f64,
}

/// Early-learning loss means per suite task, with and without scaling.
pub fn scale_band_records(
    config: &HarnessConfig,
    seed: u64,
    threads: usize,
) -> Result<Vec<BandRecord>> {
    let tasks = random_mdp_suite();
    let results = fan_out(tasks, threads, |task| -> Result<BandRecord> {
        let setup = TrainingSetup {
            env: task.spec(),
            heads: vec![HeadSpec { clip: false, discount: task.gamma }],
            trunk_hidden: None,
            config: LearnerConfig {
                scaler: ScalerKind::ReturnBased,
                metrics_interval: 50,
                bias_init: true,
                warmup_episodes: 3,
                ..LearnerConfig::default()
            },
            oracle_values: None,
        };
        let result = run_training(&setup, config.scale_band_budget, split_seed(seed, task.index as u64))?;
        let rows = &result.log.rows;
        let mean = |f: &dyn Fn(&crate::learner::MetricsRow) -> f64| {
            rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64
        };
        Ok(BandRecord {
            task: task.index,
            reward_scale: task.reward_scale,
            len: task.len,
            gamma: task.gamma,
            unscaled_loss_mean: mean(&|r| r.heads[0].unscaled_loss),
            scaled_loss_mean: mean(&|r| r.heads[0].scaled_loss),
        })
    });
    results.into_iter().collect()
}

fn orders_of_magnitude(values: impl Iterator<Item = f64>) -> f64 {
    let mut min = f64::INFINITY;
    let mut max = 0.0f64;
    for v in values {
        if v > 0.0 {
            min = min.min(v);
            max = max.max(v);
        }
    }
    (max / min).log10()
}

fn preset_scale_band(config: &HarnessConfig, seed: u64, sink: &mut OutputSink) -> Result<()> {
    let threads = thread_cap(config.threads);
    let records = scale_band_records(config, seed, threads)?;
    let mut csv =
        String::from("task,reward_scale,len,gamma,unscaled_loss_mean,scaled_loss_mean\n");
    for r in &records {
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.task, r.reward_scale, r.len, r.gamma, r.unscaled_loss_mean, r.scaled_loss_mean
        )
        .unwrap();
    }
    sink.write("scale_band.csv", &csv)?;
    #[derive(Serialize)]
    struct Summary {
        schema_version: u32,
        unscaled_span_orders: f64,
        scaled_span_orders: f64,
        records: Vec<BandRecord>,
    }
    sink.write_json(
        "summary.json",
        &Summary {
            schema_version: super::SUMMARY_SCHEMA_VERSION,
            unscaled_span_orders: orders_of_magnitude(
                records.iter().map(|r| r.unscaled_loss_mean),
            ),
            scaled_span_orders: orders_of_magnitude(records.iter().map(|r| r.scaled_loss_mean)),
            records,
        },
    )
}

// ---------------------------------------------------------------------
// noise-amplif

#[derive(Debug, Serialize)]
pub struct NoiseSummary {
    pub schema_version: u32,
    pub steps: u64,
    pub none_rb_bitwise_equal: bool,
    pub none_monotone_blocks: bool,
    pub eb_spike_over_trailing_min: f64,
    pub eb_last_fifth_spike: f64,
}

fn preset_noise_amplif(config: &HarnessConfig, seed: u64, sink: &mut OutputSink) -> Result<()> {
    let spec = RegressionSpec::default();
    let n = &config.noise;
    let threads = thread_cap(config.threads);
    let runs = fan_out(
        vec![ScalerKind::None, ScalerKind::ReturnBased, ScalerKind::ErrorBased],
        threads,
        |scaler| noise_amplification_run(&spec, scaler, n.steps, n.error_window, n.sigma_v, seed),
    );
    let mut runs = runs.into_iter();
    let none = runs.next().unwrap()?;
    let rb = runs.next().unwrap()?;
    let eb = runs.next().unwrap()?;

    let bitwise = none.loss == rb.loss && none.scale == rb.scale;
    let blocks = none.block_means(1_000);
    let monotone = blocks.windows(2).all(|p| p[1] <= p[0]);
    let mut trailing_min = f64::INFINITY;
    let mut spike = 0.0f64;
    let mut last_fifth_spike = 0.0f64;
    let start = (n.steps / 10) as usize;
    let last_fifth = (n.steps as usize) * 4 / 5;
    for (i, &l) in eb.loss.iter().enumerate().skip(start) {
        trailing_min = trailing_min.min(l.max(1e-300));
        let ratio = l / trailing_min;
        spike = spike.max(ratio);
        if i >= last_fifth {
            last_fifth_spike = last_fifth_spike.max(ratio);
        }
    }

    let mut csv = String::from("step,loss_none,loss_return_based,loss_error_based,scale_error_based\n");
    for i in (0..none.loss.len()).step_by(100) {
        writeln!(csv, "{},{},{},{},{}", i, none.loss[i], rb.loss[i], eb.loss[i], eb.scale[i])
            .unwrap();
    }
    sink.write("noise_amplif.csv", &csv)?;
    sink.write_json(
        "summary.json",
        &NoiseSummary {
            schema_version: super::SUMMARY_SCHEMA_VERSION,
            steps: n.steps,
            none_rb_bitwise_equal: bitwise,
            none_monotone_blocks: monotone,
            eb_spike_over_trailing_min: spike,
            eb_last_fifth_spike: last_fifth_spike,
        },
    )
}

// ---------------------------------------------------------------------
// adam-scatter

#[derive(Debug, Serialize)]
pub struct AdamPoint {
    pub gradient: f64,
    pub loss_scale: f64,
    pub update_magnitude: f64,
    pub oracle_update: f64,
}

/// Steady-state Adam update magnitude for one constant gradient.
pub fn adam_steady_state(gradient: f64, steps: u64) -> f64 {
    let kind = OptimizerKind::adam_default();
    let mut state = crate::learner::AdamState::new(1);
    let mut params = vec![0.0];
    let mut last = 0.0;
    for _ in 0..steps {
        let before = params[0];
        crate::learner::optimizer_step(&kind, &mut state, &mut params, &[gradient]).unwrap();
        last = (params[0] - before).abs();
    }
    last
}

pub fn adam_scatter_points() -> Vec<AdamPoint> {
    let (lr, eps) = (2e-4, 1e-6);
    // half-decade sweep from 1e-10 to 1e4, covering both sides of the
    // eps knee and the 100*eps full-rate clause
    (-20..=8)
        .map(|e| {
            let g = 10f64.powf(e as f64 / 2.0);
            let update = adam_steady_state(g, 20_000);
            AdamPoint {
                gradient: g,
                loss_scale: g * g,
                update_magnitude: update,
                oracle_update: lr * g / (g + eps),
            }
        })
        .collect()
}

fn preset_adam_scatter(_config: &HarnessConfig, _seed: u64, sink: &mut OutputSink) -> Result<()> {
    let points = adam_scatter_points();
    let mut csv = String::from("gradient,loss_scale,update_magnitude,oracle_update\n");
    for p in &points {
        writeln!(csv, "{},{},{},{}", p.gradient, p.loss_scale, p.update_magnitude, p.oracle_update)
            .unwrap();
    }
    sink.write("adam_scatter.csv", &csv)?;
    #[derive(Serialize)]
    struct Summary {
        schema_version: u32,
        eta: f64,
        eps: f64,
        points: Vec<AdamPoint>,
    }
    sink.write_json(
        "summary.json",
        &Summary { schema_version: super::SUMMARY_SCHEMA_VERSION, eta: 2e-4, eps: 1e-6, points },
    )
}

// ---------------------------------------------------------------------
// spike-stability

#[derive(Debug, Serialize)]
pub struct SpikeRunSummary {
    pub scaler: String,
    /// max |log10(sigma_{t+1}/sigma_t)| over updates after warm-up.
    pub max_log10_sigma_step: f64,
    /// Same, restricted to updates at or after the spike.
    pub max_log10_sigma_step_post_spike: f64,
    pub sigma_before_spike: f64,
    pub sigma_peak: f64,
    pub rmse_pre_spike: f64,
    pub rmse_post_spike: f64,
    pub updates: u64,
}

/// One spike-stability run with the given scaler; records the per-update
/// scale trajectory and pre/post-spike value RMSE.
pub fn spike_run(
    config: &HarnessConfig,
    scaler: ScalerKind,
    seed: u64,
) -> Result<(SpikeRunSummary, String)> {
    let sp = &config.spike;
    let total_steps = sp.pre_spike_steps + sp.post_spike_steps;
    let spec = MdpSpec::Spike {
        horizon: 100,
        base_mean: sp.base_mean,
        base_std: sp.base_std,
        spike_reward: sp.spike_reward,
        trigger: SpikeTrigger::AtGlobalStep(sp.pre_spike_steps),
    };
    let mut env = spec.build()?;
    let num_states = env.num_states();
    // The return-based arm trains with plain SGD so update magnitudes
    // stay proportional to the scaled error; the Pop-Art arm uses its
    // customary Adam setup, since large SGD steps in normalized space
    // diverge while the output statistics are still adapting.
    let optimizer = match scaler {
        ScalerKind::PopArt => {
            OptimizerKind::Adam { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-6 }
        }
        _ => OptimizerKind::Sgd { lr: sp.learning_rate },
    };
    let lc = LearnerConfig {
        scaler,
        optimizer,
        update_period: sp.update_period,
        ..LearnerConfig::default()
    };
    let mut env_rng = ChaCha8Rng::seed_from_u64(split_seed(seed, 0x0e71));
    let mut replay_rng = ChaCha8Rng::seed_from_u64(split_seed(seed, 0x4e91));
    let mut init_rng = ChaCha8Rng::seed_from_u64(split_seed(seed, 0x1417));
    let mut mh = MultiHeadValue::new(
        FeatureMap::OneHot { num_states },
        1,
        None,
        &[HeadSpec { clip: false, discount: sp.discount }],
        scaler,
        lc.error_window,
        &mut init_rng,
    )?;
    if let ScalerState::PopArt(st) = &mut mh.heads[0].scaler {
        st.step_size = config.popart.step_size;
        st.lower = config.popart.lower;
        st.upper = sp.popart_upper;
    }
    let mut target = mh.clone();
    let mut optim = OptimStates::new(&mh);
    let mut replay = ReplayBuffer::new(lc.replay_capacity);
    let oracle = oracle_state_values(&spec, sp.discount)
        .ok_or_else(|| TdScaleError::InvalidParam("spike oracle values unavailable".into()))?;

    let sigma_of = |mh: &MultiHeadValue| -> f64 {
        match &mh.heads[0].scaler {
            ScalerState::PopArt(st) => st.sigma,
            _ => mh.heads[0]
                .stats
                .sigma_squared()
                .map(|e| e.sigma.max(lc.sigma_v))
                .unwrap_or(lc.sigma_v),
        }
    };

    let mut env_steps: u64 = 0;
    let mut updates: u64 = 0;
    let mut episodes: u64 = 0;
    let warmup_updates = ((total_steps / sp.update_period as u64) as f64 * 0.05) as u64;
    let mut prev_sigma = sigma_of(&mh);
    let mut max_step = 0.0f64;
    let mut max_step_post = 0.0f64;
    let mut sigma_before_spike = f64::NAN;
    let mut sigma_peak = 0.0f64;
    let mut rmse_pre = f64::NAN;
    let mut rmse_post = f64::NAN;
    let rmse_at = sp.pre_spike_steps + 10_000;
    let mut csv = String::from("update,env_step,sigma\n");

    'outer: while env_steps < total_steps {
        let mut state = env.reset(&mut env_rng);
        let timeout = env.timeout();
        let mut ep_states = vec![state];
        let mut ep_rewards: Vec<f64> = Vec::new();
        let mut truncated = true;
        for _t in 0..timeout {
            let tr = env.step(state, 0, &mut env_rng)?;
            ep_rewards.push(tr.reward);
            ep_states.push(tr.next_state);
            env_steps += 1;
            state = tr.next_state;
            if ep_rewards.len() >= lc.n_step {
                let k = ep_rewards.len() - lc.n_step;
                replay.push(Segment {
                    states: ep_states[k..].to_vec(),
                    actions: vec![0; lc.n_step],
                    rewards: ep_rewards[k..].to_vec(),
                    terminal: tr.terminated.then_some(lc.n_step - 1),
                });
            }
            if env_steps == sp.pre_spike_steps {
                sigma_before_spike = sigma_of(&mh);
                rmse_pre = relative_value_rmse(&mh, 0, &oracle);
            }
            if env_steps == rmse_at {
                rmse_post = relative_value_rmse(&mh, 0, &oracle);
            }
            if episodes >= 1
                && env_steps % sp.update_period as u64 == 0
                && replay.len() >= lc.batch_size
            {
                let batch = replay.sample(lc.batch_size, &mut replay_rng);
                train_step(&mut mh, &target, &batch, &lc, &mut optim)?;
                updates += 1;
                if updates % lc.target_update_interval as u64 == 0 {
                    sync_target(&mh, &mut target);
                }
                let sigma = sigma_of(&mh);
                sigma_peak = sigma_peak.max(sigma);
                let step_ratio = (sigma / prev_sigma).log10().abs();
                if updates > warmup_updates {
                    max_step = max_step.max(step_ratio);
                    if env_steps >= sp.pre_spike_steps {
                        max_step_post = max_step_post.max(step_ratio);
                    }
                }
                prev_sigma = sigma;
                if updates % 200 == 0 || step_ratio > 0.05 {
                    writeln!(csv, "{updates},{env_steps},{sigma}").unwrap();
                }
            }
            if tr.terminated {
                truncated = false;
                break;
            }
            if env_steps >= total_steps {
                break 'outer;
            }
        }
        episodes += 1;
        // shorter tail segments so terminal transitions train too
        if !truncated {
            let n = ep_rewards.len();
            let lo = n.saturating_sub(lc.n_step - 1);
            for k in lo..n {
                replay.push(Segment {
                    states: ep_states[k..].to_vec(),
                    actions: vec![0; n - k],
                    rewards: ep_rewards[k..].to_vec(),
                    terminal: Some(n - 1 - k),
                });
            }
        }
        let mut discounts = vec![sp.discount; ep_rewards.len()];
        if !truncated {
            *discounts.last_mut().unwrap() = 0.0;
        }
        mh.heads[0]
            .stats
            .accumulate_episode(&EpisodeTrace::new(ep_rewards, discounts, truncated)?)?;
    }

    let summary = SpikeRunSummary {
        scaler: scaler.as_str().to_string(),
        max_log10_sigma_step: max_step,
        max_log10_sigma_step_post_spike: max_step_post,
        sigma_before_spike,
        sigma_peak,
        rmse_pre_spike: rmse_pre,
        rmse_post_spike: rmse_post,
        updates,
    };
    Ok((summary, csv))
}

fn preset_spike_stability(config: &HarnessConfig, seed: u64, sink: &mut OutputSink) -> Result<()> {
    let threads = thread_cap(config.threads);
    let runs = fan_out(vec![ScalerKind::ReturnBased, ScalerKind::PopArt], threads, |scaler| {
        spike_run(config, scaler, seed)
    });
    let mut summaries = Vec::new();
    for run in runs {
        let (summary, csv) = run?;
        sink.write(&format!("sigma_{}.csv", summary.scaler), &csv)?;
        summaries.push(summary);
    }
    #[derive(Serialize)]
    struct Summary {
        schema_version: u32,
        runs: Vec<SpikeRunSummary>,
    }
    sink.write_json(
        "summary.json",
        &Summary { schema_version: super::SUMMARY_SCHEMA_VERSION, runs: summaries },
    )
}

// ---------------------------------------------------------------------
// multihead-balance

#[derive(Debug, Serialize)]
pub struct HeadRecord {
    pub head: usize,
    pub clip: bool,
    pub discount: f64,
    pub unscaled_loss_mean: f64,
    pub scaled_loss_mean: f64,
}

/// The multi-scale gridworld: reward tiles of 0.01, 1 and 1000 in three
/// corners, all terminal.
pub fn multiscale_grid() -> MdpSpec {
    MdpSpec::Grid {
        width: 5,
        height: 5,
        tiles: vec![(4, 4, 1000.0, true), (0, 4, 1.0, true), (4, 0, 0.01, true)],
        timeout: 50,
        slip: 0.2,
    }
}

pub fn multihead_records(config: &HarnessConfig, seed: u64) -> Result<Vec<HeadRecord>> {
    let setup = TrainingSetup {
        env: multiscale_grid(),
        heads: HeadSpec::ten_heads(),
        trunk_hidden: Some(config.multihead_trunk_hidden),
        config: LearnerConfig {
            scaler: ScalerKind::ReturnBased,
            metrics_interval: 100,
            epsilon_greedy: 0.3,
            ..LearnerConfig::default()
        },
        oracle_values: None,
    };
    let result = run_training(&setup, config.multihead_budget, seed)?;
    let rows = &result.log.rows;
    Ok(setup
        .heads
        .iter()
        .enumerate()
        .map(|(h, spec)| HeadRecord {
            head: h,
            clip: spec.clip,
            discount: spec.discount,
            unscaled_loss_mean: rows.iter().map(|r| r.heads[h].unscaled_loss).sum::<f64>()
                / rows.len() as f64,
            scaled_loss_mean: rows.iter().map(|r| r.heads[h].scaled_loss).sum::<f64>()
                / rows.len() as f64,
        })
        .collect())
}

fn preset_multihead(config: &HarnessConfig, seed: u64, sink: &mut OutputSink) -> Result<()> {
    let records = multihead_records(config, seed)?;
    let mut csv = String::from("head,clip,discount,unscaled_loss_mean,scaled_loss_mean\n");
    for r in &records {
        writeln!(
            csv,
            "{},{},{},{},{}",
            r.head, r.clip, r.discount, r.unscaled_loss_mean, r.scaled_loss_mean
        )
        .unwrap();
    }
    sink.write("multihead.csv", &csv)?;
    #[derive(Serialize)]
    struct Summary {
        schema_version: u32,
        unscaled_span_orders: f64,
        scaled_span_orders: f64,
        records: Vec<HeadRecord>,
    }
    sink.write_json(
        "summary.json",
        &Summary {
            schema_version: super::SUMMARY_SCHEMA_VERSION,
            unscaled_span_orders: orders_of_magnitude(
                records.iter().map(|r| r.unscaled_loss_mean),
            ),
            scaled_span_orders: orders_of_magnitude(records.iter().map(|r| r.scaled_loss_mean)),
            records,
        },
    )
}

// ---------------------------------------------------------------------
// bias-init

#[derive(Debug, Serialize)]
pub struct BiasInitSummary {
    pub schema_version: u32,
    pub threshold: f64,
    /// First update count at which relative RMSE < threshold.
    pub bias_init_updates: Option<u64>,
    pub zero_init_updates: Option<u64>,
}

/// Run the ConstantNegative task once with and once without value-bias
/// initialization; returns (summary, per-row rmse csv).
pub fn bias_init_runs(config: &HarnessConfig, seed: u64) -> Result<(BiasInitSummary, String)> {
    let spec = MdpSpec::ConstantNegative { theta: 3.0, horizon: 100 };
    // gamma < 1 keeps the shared bias coupled to interior bootstrap
    // targets; at gamma == 1 the bias gradient cancels on non-terminal
    // segments and the head start is washed out by value iteration.
    let gamma = 0.99;
    let oracle =
        oracle_state_values(&spec, gamma).expect("closed-form values exist for this task");
    let run = |bias_init: bool| -> Result<crate::learner::MetricsLog> {
        let setup = TrainingSetup {
            env: spec.clone(),
            heads: vec![HeadSpec { clip: false, discount: gamma }],
            trunk_hidden: None,
            config: LearnerConfig {
                scaler: ScalerKind::ReturnBased,
                optimizer: OptimizerKind::Sgd { lr: config.bias_init_learning_rate },
                metrics_interval: config.bias_init_metrics_interval,
                bias_init,
                ..LearnerConfig::default()
            },
            oracle_values: Some(vec![oracle.clone()]),
        };
        Ok(run_training(&setup, config.bias_init_budget, seed)?.log)
    };
    let with_bias = run(true)?;
    let without = run(false)?;
    let first_crossing = |log: &crate::learner::MetricsLog| {
        log.rows.iter().find(|r| r.heads[0].rmse < 0.5).map(|r| r.update)
    };
    let mut csv = String::from("update,rmse_bias_init,rmse_zero_init\n");
    for (a, b) in with_bias.rows.iter().zip(&without.rows) {
        writeln!(csv, "{},{},{}", a.update, a.heads[0].rmse, b.heads[0].rmse).unwrap();
    }
    Ok((
        BiasInitSummary {
            schema_version: super::SUMMARY_SCHEMA_VERSION,
            threshold: 0.5,
            bias_init_updates: first_crossing(&with_bias),
            zero_init_updates: first_crossing(&without),
        },
        csv,
    ))
}

fn preset_bias_init(config: &HarnessConfig, seed: u64, sink: &mut OutputSink) -> Result<()> {
    let (summary, csv) = bias_init_runs(config, seed)?;
    sink.write("bias_init.csv", &csv)?;
    sink.write_json("summary.json", &summary)
}

// ---------------------------------------------------------------------
// oracle-suite

fn reports_csv(rows: &[OracleReport]) -> String {
    let mut csv = String::from("quantity,oracle,artifact,relative_error,samples\n");
    for r in rows {
        writeln!(csv, "{},{},{},{},{}", r.quantity, r.oracle, r.artifact, r.relative_error, r.samples)
            .unwrap();
    }
    csv
}

pub fn oracle_suite_reports(config: &HarnessConfig, seed: u64) -> Result<Vec<OracleReport>> {
    let mut rows = suite_delta_sigma_ratios(config.oracle_samples, seed)?;
    rows.extend(dominance_reports()?);
    // closed-form V[gamma] against the two-pass oracle
    let trace = crate::env::reference_trace();
    let moments = crate::oracle::exact_sequence_moments(std::slice::from_ref(&trace))?;
    rows.push(OracleReport::new(
        "var_gamma_closed_form",
        moments.var_gamma,
        crate::stats::var_gamma_closed_form(crate::env::REFERENCE_GAMMA, trace.len() as u64)?,
        trace.len() as u64,
    ));
    rows.push(brownian_shuffle_check(
        &trace.rewards,
        0.95,
        200_000,
        split_seed(seed, 0xb0),
    )?);
    Ok(rows)
}

fn preset_oracle_suite(config: &HarnessConfig, seed: u64, sink: &mut OutputSink) -> Result<()> {
    let rows = oracle_suite_reports(config, seed)?;
    sink.write("oracle_reports.csv", &reports_csv(&rows))?;
    #[derive(Serialize)]
    struct Summary {
        schema_version: u32,
        reports: Vec<OracleReport>,
    }
    sink.write_json(
        "summary.json",
        &Summary { schema_version: super::SUMMARY_SCHEMA_VERSION, reports: rows },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_names_round_trip() {
        for p in PresetName::ALL {
            assert_eq!(p.as_str().parse::<PresetName>().unwrap(), p);
        }
        assert!(matches!(
            "frobnicate".parse::<PresetName>(),
            Err(TdScaleError::UnknownPreset(_))
        ));
    }

    #[test]
    fn scenario_records_map_within_factor_three() {
        let records = scenario_records(5_000, 0).unwrap();
        assert_eq!(records.len(), 6);
        for r in &records {
            assert!(r.invariant_ok);
            assert!(
                r.map_factor > 1.0 / 3.0 && r.map_factor < 3.0,
                "{}: map {}",
                r.kind,
                r.map_factor
            );
        }
    }

    #[test]
    fn adam_scatter_knee() {
        let points = adam_scatter_points();
        let (eta, eps) = (2e-4, 1e-6);
        for p in &points {
            if p.gradient >= 100.0 * eps {
                assert!((p.update_magnitude - eta).abs() / eta < 0.05, "{p:?}");
            }
            assert!(
                (p.update_magnitude - p.oracle_update).abs() / p.oracle_update < 0.05,
                "{p:?}"
            );
        }
        // below eps: proportional to the gradient
        let small: Vec<&AdamPoint> =
            points.iter().filter(|p| p.gradient < eps / 10.0).collect();
        for p in small {
            let slope = p.update_magnitude / (eta * p.gradient / eps);
            assert!((0.8..1.25).contains(&slope), "{p:?} slope {slope}");
        }
    }

    #[test]
    fn scenarios_preset_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = HarnessConfig::default();
        cfg.oracle_samples = 2_000;
        run_preset(PresetName::Scenarios, &cfg, 1, dir.path()).unwrap();
        assert!(dir.path().join("scenarios.csv").exists());
        assert!(dir.path().join("summary.json").exists());
        assert!(dir.path().join("manifest.json").exists());
    }

    #[test]
    fn preset_outputs_reproducible() {
        let mut cfg = HarnessConfig::default();
        cfg.oracle_samples = 2_000;
        let read = |dir: &Path| std::fs::read_to_string(dir.join("scenarios.csv")).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        run_preset(PresetName::Scenarios, &cfg, 9, d1.path()).unwrap();
        run_preset(PresetName::Scenarios, &cfg, 9, d2.path()).unwrap();
        assert_eq!(read(d1.path()), read(d2.path()));
    }
}
