//! PPO: rollouts under optional advice, GAE and the weighted clipped
//! surrogate update.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::advising::AdviceRecord;
use crate::env::{Action, GridState, GridWorld, Observation, Pos};
use crate::error::{Error, Result};
use crate::policy::{
    log_softmax, sample_action, softmax, ActorCritic, ActorCriticGrads, ActorCriticOptimizer, NetWorkspace,
};
use crate::rng::{Rng, RngStreams};

/// Upper bound applied to every importance weight.
pub const MAX_WEIGHT: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoHyper {
    pub horizon: usize,
    pub learning_rate: f64,
    pub clip: f64,
    pub batch_size: usize,
    pub minibatch_size: usize,
    pub sgd_epochs: usize,
    pub vf_clip: f64,
    pub vf_coeff: f64,
    /// Initial KL penalty coefficient.
    pub kl_coeff: f64,
    /// Per-iteration KL the penalty coefficient is adapted towards; 0 keeps
    /// the coefficient fixed.
    pub kl_target: f64,
    pub entropy_coeff: f64,
    pub gae_lambda: f64,
    pub discount: f64,
    pub num_envs: usize,
    /// Standardise advantages over each batch before the policy loss.
    pub normalize_advantages: bool,
}

impl Default for PpoHyper {
    fn default() -> Self {
        Self {
            horizon: 128,
            learning_rate: 0.0005,
            clip: 0.2,
            batch_size: 256,
            minibatch_size: 128,
            sgd_epochs: 4,
            vf_clip: 10.0,
            vf_coeff: 0.5,
            kl_coeff: 0.5,
            kl_target: 0.0,
            entropy_coeff: 0.01,
            gae_lambda: 0.8,
            discount: 0.99,
            num_envs: 2,
            normalize_advantages: false,
        }
    }
}

impl PpoHyper {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("horizon", self.horizon as f64),
            ("learning_rate", self.learning_rate),
            ("clip", self.clip),
            ("batch_size", self.batch_size as f64),
            ("minibatch_size", self.minibatch_size as f64),
            ("sgd_epochs", self.sgd_epochs as f64),
            ("vf_clip", self.vf_clip),
            ("discount", self.discount),
            ("num_envs", self.num_envs as f64),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, format!("must be positive, got {v}")));
            }
        }
        for (field, v) in [
            ("vf_coeff", self.vf_coeff),
            ("kl_coeff", self.kl_coeff),
            ("kl_target", self.kl_target),
            ("entropy_coeff", self.entropy_coeff),
            ("gae_lambda", self.gae_lambda),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, format!("must be non-negative, got {v}")));
            }
        }
        if !self.batch_size.is_multiple_of(self.minibatch_size) {
            return Err(Error::config("minibatch_size", "must divide batch_size"));
        }
        if self.horizon * self.num_envs != self.batch_size {
            return Err(Error::config(
                "batch_size",
                format!("{} != horizon {} x num_envs {}", self.batch_size, self.horizon, self.num_envs),
            ));
        }
        Ok(())
    }
}

/// Next KL coefficient given the mean KL of the last update: grow by half
/// above twice the target, halve below half of it.
pub fn adapt_kl_coeff(coeff: f64, observed_kl: f64, target: f64) -> f64 {
    if target <= 0.0 {
        coeff
    } else if observed_kl > 2.0 * target {
        coeff * 1.5
    } else if observed_kl < 0.5 * target {
        coeff * 0.5
    } else {
        coeff
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: usize,
    pub next_obs: Observation,
    pub reward: f64,
    pub done: bool,
    /// Whether the executed action came from the teacher.
    pub advised: bool,
    pub behavior_log_prob: f64,
    pub student_log_prob: f64,
    /// Student distribution at collection time, for the KL penalty.
    pub student_dist: Vec<f64>,
    /// Absent when no teacher takes part in the run.
    pub teacher_log_prob: Option<f64>,
    /// Full teacher distribution, kept only when a loss needs it.
    pub teacher_dist: Option<Vec<f64>>,
    /// Teacher critics at `obs`, when a teacher is present.
    pub value_src: Option<f32>,
    pub value_new: Option<f32>,
    pub agent_pos: Pos,
    pub episode_step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    pub episode_return: f64,
    pub length: usize,
}

/// Transitions from `num_envs` environments, stored time-major: entry
/// `t * num_envs + e` is step `t` of environment `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub transitions: Vec<Transition>,
    pub num_envs: usize,
    /// Student value estimates at each `obs`.
    pub values: Vec<f32>,
    pub advantages: Option<Vec<f64>>,
    pub returns: Option<Vec<f64>>,
    pub step_offset: u64,
    pub episodes: Vec<EpisodeStats>,
    pub advice: Vec<AdviceRecord>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.reward).collect()
    }

    pub fn dones(&self) -> Vec<bool> {
        self.transitions.iter().map(|t| t.done).collect()
    }

    /// Indices of the final transition of each environment.
    pub fn last_indices(&self) -> impl Iterator<Item = usize> + '_ {
        let n = self.len();
        n.saturating_sub(self.num_envs)..n
    }

    /// Student GAE: fills `advantages` and `returns` from `values`,
    /// bootstrapping the unfinished tail with `value_fn`.
    pub fn compute_gae(&mut self, value_fn: impl Fn(&Observation) -> Result<f32>, hyper: &PpoHyper) -> Result<()> {
        let rewards = self.rewards();
        self.compute_gae_with_rewards(&rewards, value_fn, hyper)
    }

    /// As [`RolloutBatch::compute_gae`] with rewards replaced by `rewards`.
    pub fn compute_gae_with_rewards(
        &mut self,
        rewards: &[f64],
        value_fn: impl Fn(&Observation) -> Result<f32>,
        hyper: &PpoHyper,
    ) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Usage("GAE on an empty batch".into()));
        }
        let bootstrap = self
            .last_indices()
            .map(|i| value_fn(&self.transitions[i].next_obs).map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        let values: Vec<f64> = self.values.iter().map(|&v| v as f64).collect();
        let (adv, ret) = gae(
            rewards,
            &values,
            &bootstrap,
            &self.dones(),
            self.num_envs,
            hyper.discount,
            hyper.gae_lambda,
        )?;
        self.advantages = Some(adv);
        self.returns = Some(ret);
        Ok(())
    }
}

/// Generalized advantage estimation over time-major interleaved
/// environments. `bootstrap[e]` is the value after the last step of
/// environment `e`. Returns `(advantages, returns)`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    bootstrap: &[f64],
    dones: &[bool],
    num_envs: usize,
    discount: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if n == 0 {
        return Err(Error::Usage("GAE on an empty batch".into()));
    }
    if values.len() != n || dones.len() != n || bootstrap.len() != num_envs || !n.is_multiple_of(num_envs) {
        return Err(Error::Shape {
            expected: n,
            actual: values.len(),
            context: "GAE inputs",
        });
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = vec![0.0; num_envs];
    let mut next_value = bootstrap.to_vec();
    for i in (0..n).rev() {
        let e = i % num_envs;
        let live = if dones[i] { 0.0 } else { 1.0 };
        let delta = rewards[i] + discount * live * next_value[e] - values[i];
        adv[i] = delta + discount * lambda * live * next_adv[e];
        next_adv[e] = adv[i];
        next_value[e] = values[i];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Zero-mean, unit-variance copy (unchanged when fewer than two samples).
pub fn normalize(xs: &[f64]) -> Vec<f64> {
    if xs.len() < 2 {
        return xs.to_vec();
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    xs.iter().map(|x| (x - mean) / std).collect()
}

/// What an advisor decided for one state.
#[derive(Debug, Clone, Default)]
pub struct AdviceDecision {
    pub advise: bool,
    /// Teacher action and its log-probability, when one was sampled.
    pub teacher_action: Option<(usize, f64)>,
    /// Teacher distribution at the state, when a teacher is present.
    pub teacher_dist: Option<Vec<f64>>,
    pub value_src: Option<f32>,
    pub value_new: Option<f32>,
    /// Whether to emit an [`AdviceRecord`] for this decision.
    pub record: bool,
    /// Whether the full teacher distribution should be kept on the transition.
    pub keep_dist: bool,
}

/// Hook consulted at every environment step of a rollout.
pub trait Advisor {
    fn decide(&mut self, obs: &Observation, global_step: u64, rng: &mut Rng) -> Result<AdviceDecision>;
}

/// The environments stepped by one trainer.
#[derive(Debug, Clone)]
pub struct EnvPool {
    pub world: GridWorld,
    states: Vec<GridState>,
    observations: Vec<Observation>,
    returns: Vec<f64>,
}

impl EnvPool {
    pub fn new(world: GridWorld, num_envs: usize, rng: &mut Rng) -> Self {
        let mut states = Vec::with_capacity(num_envs);
        let mut observations = Vec::with_capacity(num_envs);
        for _ in 0..num_envs {
            let (s, o) = world.reset(rng);
            states.push(s);
            observations.push(o);
        }
        Self {
            world,
            states,
            observations,
            returns: vec![0.0; num_envs],
        }
    }

    pub fn num_envs(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[GridState] {
        &self.states
    }
}

/// Roll out `horizon` steps in every environment. Student actions are
/// sampled at every step from the student stream; advice decisions and
/// teacher actions use the advising stream.
pub fn collect_rollout(
    pool: &mut EnvPool,
    student: &ActorCritic,
    mut advisor: Option<&mut (dyn Advisor + '_)>,
    horizon: usize,
    global_step: u64,
    streams: &mut RngStreams,
) -> Result<RolloutBatch> {
    let num_envs = pool.num_envs();
    let mut transitions = Vec::with_capacity(horizon * num_envs);
    let mut values = Vec::with_capacity(horizon * num_envs);
    let mut episodes = Vec::new();
    let mut advice = Vec::new();
    let mut ws = NetWorkspace::new();
    let mut step = global_step;

    for _ in 0..horizon {
        for e in 0..num_envs {
            let obs = pool.observations[e].clone();
            student.forward_with(obs.as_slice(), &mut ws)?;
            let dist = softmax(ws.logits())?;
            let value = ws.value();
            let (student_action, _) = sample_action(&dist, &mut streams.student);

            let decision = match advisor.as_deref_mut() {
                Some(a) => a.decide(&obs, step, &mut streams.advising)?,
                None => AdviceDecision::default(),
            };
            let (action, advised) = match (decision.advise, decision.teacher_action) {
                (true, Some((a, _))) => (a, true),
                (true, None) => return Err(Error::Usage("advisor advised without a teacher action".into())),
                _ => (student_action, false),
            };
            let state = &pool.states[e];
            if decision.record {
                advice.push(AdviceRecord {
                    global_step: step,
                    episode_step: state.step_count,
                    x: state.agent_pos.x,
                    y: state.agent_pos.y,
                    student_action,
                    teacher_action: decision.teacher_action.map(|(a, _)| a).unwrap_or(student_action),
                    value_src: decision.value_src.map(f64::from),
                    value_new: decision.value_new.map(f64::from),
                    issued: advised,
                });
            }

            let student_log_prob = dist[action].ln();
            let teacher_log_prob = decision.teacher_dist.as_ref().map(|d| d[action].ln());
            let behavior_log_prob = if advised {
                teacher_log_prob.or(decision.teacher_action.map(|(_, lp)| lp)).unwrap()
            } else {
                student_log_prob
            };

            let agent_pos = state.agent_pos;
            let episode_step = state.step_count;
            let outcome = pool.world.step(state, Action::from_index(action).unwrap())?;
            pool.returns[e] += outcome.reward;
            let next_obs = outcome.observation.clone();
            if outcome.done {
                episodes.push(EpisodeStats {
                    episode_return: pool.returns[e],
                    length: outcome.state.step_count,
                });
                pool.returns[e] = 0.0;
                let (s, o) = pool.world.reset(&mut streams.environment);
                pool.states[e] = s;
                pool.observations[e] = o;
            } else {
                pool.states[e] = outcome.state;
                pool.observations[e] = outcome.observation;
            }

            transitions.push(Transition {
                obs,
                action,
                next_obs,
                reward: outcome.reward,
                done: outcome.done,
                advised,
                behavior_log_prob,
                student_log_prob,
                student_dist: dist,
                teacher_log_prob,
                teacher_dist: if decision.keep_dist { decision.teacher_dist } else { None },
                value_src: decision.value_src,
                value_new: decision.value_new,
                agent_pos,
                episode_step,
            });
            values.push(value);
            step += 1;
        }
    }

    Ok(RolloutBatch {
        transitions,
        num_envs,
        values,
        advantages: None,
        returns: None,
        step_offset: global_step,
        episodes,
        advice,
    })
}

/// Extra cross-entropy term pulling the student toward the teacher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillTerm {
    pub coeff: f64,
}

/// Inputs to the loss for one sample.
#[derive(Debug, Clone, Copy)]
pub struct LossSample<'a> {
    pub obs: &'a [f32],
    pub action: usize,
    pub old_log_prob: f64,
    /// Full distribution the sample was collected under.
    pub old_dist: &'a [f64],
    pub advantage: f64,
    pub target_return: f64,
    pub weight: f64,
    pub teacher_dist: Option<&'a [f64]>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub total: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub kl: f64,
    pub entropy: f64,
    pub distill: f64,
    pub mean_ratio: f64,
    pub max_ratio: f64,
    pub samples: usize,
}

impl LossStats {
    fn accumulate(&mut self, other: &LossStats) {
        let n = (self.samples + other.samples) as f64;
        if n == 0.0 {
            return;
        }
        let (a, b) = (self.samples as f64 / n, other.samples as f64 / n);
        self.total = a * self.total + b * other.total;
        self.policy_loss = a * self.policy_loss + b * other.policy_loss;
        self.value_loss = a * self.value_loss + b * other.value_loss;
        self.kl = a * self.kl + b * other.kl;
        self.entropy = a * self.entropy + b * other.entropy;
        self.distill = a * self.distill + b * other.distill;
        self.mean_ratio = a * self.mean_ratio + b * other.mean_ratio;
        self.max_ratio = self.max_ratio.max(other.max_ratio);
        self.samples += other.samples;
    }
}

/// Weighted PPO loss over `samples`, averaged over the samples. When `grads`
/// is given the gradient of that average is accumulated into it.
pub fn minibatch_loss(
    ac: &ActorCritic,
    samples: &[LossSample<'_>],
    hyper: &PpoHyper,
    distill: Option<DistillTerm>,
    ws: &mut NetWorkspace,
    mut grads: Option<&mut ActorCriticGrads>,
) -> Result<LossStats> {
    let m = samples.len() as f64;
    let mut stats = LossStats {
        samples: samples.len(),
        ..Default::default()
    };
    let mut dlogits = vec![0.0f32; ac.action_count];
    let mut ratio_sum = 0.0;

    for s in samples {
        ac.forward_with(s.obs, ws)?;
        let logp = log_softmax(ws.logits());
        let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let value = ws.value() as f64;
        let w = s.weight.clamp(0.0, MAX_WEIGHT);

        let ratio = (logp[s.action] - s.old_log_prob).exp();
        let clipped = ratio.clamp(1.0 - hyper.clip, 1.0 + hyper.clip);
        let unclipped_obj = ratio * s.advantage;
        let clipped_obj = clipped * s.advantage;
        let surrogate = unclipped_obj.min(clipped_obj);
        let policy_loss = -surrogate;
        let ratio_active = unclipped_obj <= clipped_obj;

        let err = value - s.target_return;
        let sq = err * err;
        let value_loss = sq.min(hyper.vf_clip);
        let value_active = sq < hyper.vf_clip;

        let kl: f64 = s
            .old_dist
            .iter()
            .zip(&logp)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, l)| p * (p.ln() - l))
            .sum();
        let ent = -probs.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();
        let distill_loss = match (distill, s.teacher_dist) {
            (Some(d), Some(t)) => -d.coeff * t.iter().zip(&logp).map(|(pt, l)| pt * l).sum::<f64>(),
            _ => 0.0,
        };

        let total = policy_loss + hyper.vf_coeff * value_loss + hyper.kl_coeff * kl - hyper.entropy_coeff * ent
            + distill_loss;
        stats.total += w * total / m;
        stats.policy_loss += w * policy_loss / m;
        stats.value_loss += w * value_loss / m;
        stats.kl += w * kl / m;
        stats.entropy += w * ent / m;
        stats.distill += w * distill_loss / m;
        ratio_sum += ratio;
        stats.max_ratio = stats.max_ratio.max(ratio);

        if let Some(g) = grads.as_deref_mut() {
            let scale = w / m;
            let d_lp_action = if ratio_active { -ratio * s.advantage } else { 0.0 };
            for j in 0..ac.action_count {
                let onehot = if j == s.action { 1.0 } else { 0.0 };
                let mut d = d_lp_action * (onehot - probs[j]);
                d += hyper.entropy_coeff * probs[j] * (logp[j] + ent);
                d += hyper.kl_coeff * (probs[j] - s.old_dist[j]);
                if let (Some(dt), Some(t)) = (distill, s.teacher_dist) {
                    d += dt.coeff * (probs[j] - t[j]);
                }
                dlogits[j] = (scale * d) as f32;
            }
            let dvalue = if value_active {
                scale * hyper.vf_coeff * 2.0 * err
            } else {
                0.0
            };
            ac.backward_with(s.obs, ws, &dlogits, dvalue as f32, g)?;
        }
    }
    stats.mean_ratio = ratio_sum / m;
    Ok(stats)
}

/// Optimisation options beyond the PPO hyperparameters.
#[derive(Debug, Clone, Default)]
pub struct UpdateOptions {
    /// Trunk layers whose parameters must not change.
    pub frozen_trunk: Vec<bool>,
    /// Cross-entropy distillation coefficient for this update, if any.
    pub distill: Option<DistillTerm>,
}

/// Result of a full PPO update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub loss: LossStats,
    /// Ratio statistics of the very first minibatch, taken before any step.
    pub first_minibatch_max_ratio_deviation: f64,
}

/// Weighted PPO update over `sgd_epochs` passes of shuffled minibatches.
/// The probability ratio is taken against the student's log-probability at
/// collection time; `weights` carry the off-policy correction.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    student: &mut ActorCritic,
    batch: &RolloutBatch,
    weights: &[f64],
    hyper: &PpoHyper,
    optimizer: &mut ActorCriticOptimizer,
    options: &UpdateOptions,
    rng: &mut Rng,
) -> Result<UpdateStats> {
    let n = batch.len();
    if weights.len() != n {
        return Err(Error::Shape {
            expected: n,
            actual: weights.len(),
            context: "importance weights",
        });
    }
    let (advantages, returns) = match (&batch.advantages, &batch.returns) {
        (Some(a), Some(r)) if hyper.normalize_advantages => (normalize(a), r),
        (Some(a), Some(r)) => (a.clone(), r),
        _ => return Err(Error::Usage("ppo_update before compute_gae".into())),
    };
    let mb = hyper.minibatch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut grads = ActorCriticGrads::zeros_like(student);
    let mut ws = NetWorkspace::new();
    let mut stats = UpdateStats::default();
    let mut minibatch_index = 0;

    for _ in 0..hyper.sgd_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(mb) {
            let samples: Vec<LossSample<'_>> = chunk
                .iter()
                .map(|&i| {
                    let t = &batch.transitions[i];
                    LossSample {
                        obs: t.obs.as_slice(),
                        action: t.action,
                        old_log_prob: t.student_log_prob,
                        old_dist: &t.student_dist,
                        advantage: advantages[i],
                        target_return: returns[i],
                        weight: weights[i],
                        teacher_dist: t.teacher_dist.as_deref(),
                    }
                })
                .collect();
            grads.fill_zero();
            let loss = minibatch_loss(student, &samples, hyper, options.distill, &mut ws, Some(&mut grads))?;
            if !loss.total.is_finite() {
                return Err(Error::Numeric(format!("PPO loss in minibatch {minibatch_index}")));
            }
            if minibatch_index == 0 {
                stats.first_minibatch_max_ratio_deviation = samples
                    .iter()
                    .map(|s| {
                        let (lp, _, _) = evaluate_slice(student, s.obs, s.action);
                        ((lp - s.old_log_prob).exp() - 1.0).abs()
                    })
                    .fold(0.0, f64::max);
            }
            optimizer
                .step(student, &grads, &options.frozen_trunk)
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!("{msg} (minibatch {minibatch_index})")),
                    other => other,
                })?;
            stats.loss.accumulate(&loss);
            minibatch_index += 1;
        }
    }
    Ok(stats)
}

fn evaluate_slice(ac: &ActorCritic, obs: &[f32], action: usize) -> (f64, f64, f32) {
    let mut ws = NetWorkspace::new();
    ac.forward_with(obs, &mut ws).expect("shape checked by the loss pass");
    let lp = log_softmax(ws.logits());
    (lp[action], 0.0, ws.value())
}
