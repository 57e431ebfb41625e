//! Introspective action advising: the value-gap gate, importance weights for
//! mixed-behaviour batches, and fine-tuning of the teacher critic.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env::Observation;
use crate::error::{Error, Result};
use crate::policy::{log_softmax, sample_action, softmax, ActorCritic, CriticGrads, NetWorkspace, TeacherBundle};
use crate::ppo::{gae, AdviceDecision, Advisor, PpoHyper, RolloutBatch, MAX_WEIGHT};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntrospectionConfig {
    pub epsilon: f64,
    pub decay: f64,
    pub burn_in: u64,
}

impl Default for IntrospectionConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.9,
            decay: 0.99999,
            burn_in: 0,
        }
    }
}

impl IntrospectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::config("epsilon", format!("must be >= 0, got {}", self.epsilon)));
        }
        if !(0.0..1.0).contains(&self.decay) {
            return Err(Error::config("decay", format!("must lie in [0, 1), got {}", self.decay)));
        }
        Ok(())
    }

    /// Probability that the gate is evaluated at `global_step`.
    pub fn gate_probability(&self, global_step: u64) -> f64 {
        if global_step <= self.burn_in {
            0.0
        } else {
            self.decay.powf((global_step - self.burn_in) as f64)
        }
    }
}

/// One evaluated advice decision, as written to `advice.csv`. Teacher
/// critic values are absent for methods without them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdviceRecord {
    pub global_step: u64,
    pub episode_step: usize,
    pub x: usize,
    pub y: usize,
    pub student_action: usize,
    pub teacher_action: usize,
    pub value_src: Option<f64>,
    pub value_new: Option<f64>,
    pub issued: bool,
}

/// Decision rule given the Bernoulli draw. The threshold is inclusive.
pub fn introspect_with_draw(cfg: &IntrospectionConfig, global_step: u64, draw: bool, value_new: f64, value_src: f64) -> bool {
    global_step > cfg.burn_in && draw && (value_new - value_src).abs() <= cfg.epsilon
}

/// Outcome of the gate: whether the draw passed and whether advice follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Introspection {
    pub evaluated: bool,
    pub issued: bool,
}

/// Draw the decaying gate and compare the two critics. No random number is
/// consumed during burn-in.
pub fn introspect(cfg: &IntrospectionConfig, global_step: u64, value_new: f64, value_src: f64, rng: &mut Rng) -> Introspection {
    if global_step <= cfg.burn_in {
        return Introspection {
            evaluated: false,
            issued: false,
        };
    }
    let draw = rng.random::<f64>() < cfg.gate_probability(global_step);
    Introspection {
        evaluated: draw,
        issued: introspect_with_draw(cfg, global_step, draw, value_new, value_src),
    }
}

/// Sample from the frozen teacher policy.
pub fn advise_action(teacher: &TeacherBundle, obs: &Observation, rng: &mut Rng) -> Result<(usize, f64)> {
    let dist = teacher.policy().action_distribution(obs)?;
    Ok(sample_action(&dist, rng))
}

fn branch_weights(advised: bool, student_lp: f64, teacher_lp: f64) -> (f64, f64) {
    if advised {
        (1.0, (student_lp - teacher_lp).exp().clamp(0.0, MAX_WEIGHT))
    } else {
        ((teacher_lp - student_lp).exp().clamp(0.0, MAX_WEIGHT), 1.0)
    }
}

/// Importance weights `(rho_teacher, rho_student)` with the probabilities
/// recomputed under `student` and `teacher`.
pub fn correct(batch: &RolloutBatch, student: &ActorCritic, teacher: &ActorCritic) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut ws = NetWorkspace::new();
    let mut rho_t = Vec::with_capacity(batch.len());
    let mut rho_s = Vec::with_capacity(batch.len());
    for t in &batch.transitions {
        student.forward_with(t.obs.as_slice(), &mut ws)?;
        let s_lp = log_softmax(ws.logits())[t.action];
        teacher.forward_with(t.obs.as_slice(), &mut ws)?;
        let t_lp = log_softmax(ws.logits())[t.action];
        let (a, b) = branch_weights(t.advised, s_lp, t_lp);
        rho_t.push(a);
        rho_s.push(b);
    }
    Ok((rho_t, rho_s))
}

/// [`correct`] from the log-probabilities stored at collection time. The
/// student has not been updated since then, so the result is the same.
pub fn correct_from_batch(batch: &RolloutBatch) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rho_t = Vec::with_capacity(batch.len());
    let mut rho_s = Vec::with_capacity(batch.len());
    for t in &batch.transitions {
        let t_lp = t
            .teacher_log_prob
            .ok_or_else(|| Error::Usage("transition lacks a teacher log-probability".into()))?;
        let (a, b) = branch_weights(t.advised, t.student_log_prob, t_lp);
        rho_t.push(a);
        rho_s.push(b);
    }
    Ok((rho_t, rho_s))
}

/// GAE targets against the fine-tuned teacher critic.
pub fn teacher_returns(teacher: &TeacherBundle, batch: &RolloutBatch, hyper: &PpoHyper) -> Result<Vec<f64>> {
    let mut ws = NetWorkspace::new();
    let values = batch
        .transitions
        .iter()
        .map(|t| match t.value_new {
            Some(v) => Ok(v as f64),
            None => teacher.finetuned_critic.forward_with(t.obs.as_slice(), &mut ws).map(f64::from),
        })
        .collect::<Result<Vec<_>>>()?;
    let bootstrap = batch
        .last_indices()
        .map(|i| {
            teacher
                .finetuned_critic
                .forward_with(batch.transitions[i].next_obs.as_slice(), &mut ws)
                .map(f64::from)
        })
        .collect::<Result<Vec<_>>>()?;
    let (_, returns) = gae(
        &batch.rewards(),
        &values,
        &bootstrap,
        &batch.dones(),
        batch.num_envs,
        hyper.discount,
        hyper.gae_lambda,
    )?;
    Ok(returns)
}

/// Fit `V_new` to `returns` with a `rho_teacher`-weighted clipped squared
/// error, using the PPO epoch and minibatch schedule. Returns the mean loss.
pub fn update_teacher_critic(
    teacher: &mut TeacherBundle,
    batch: &RolloutBatch,
    returns: &[f64],
    rho_teacher: &[f64],
    hyper: &PpoHyper,
    rng: &mut Rng,
) -> Result<f64> {
    let n = batch.len();
    if returns.len() != n || rho_teacher.len() != n {
        return Err(Error::Shape {
            expected: n,
            actual: returns.len().min(rho_teacher.len()),
            context: "teacher critic targets",
        });
    }
    let mb = hyper.minibatch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut grads = CriticGrads::zeros_like(&teacher.finetuned_critic);
    let mut ws = NetWorkspace::new();
    let mut loss_sum = 0.0;
    let mut count = 0usize;
    let mut minibatch = 0usize;

    for _ in 0..hyper.sgd_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(mb) {
            grads.fill_zero();
            let m = chunk.len() as f64;
            let mut loss = 0.0;
            for &i in chunk {
                let obs = batch.transitions[i].obs.as_slice();
                let v = teacher.finetuned_critic.forward_with(obs, &mut ws)? as f64;
                let w = rho_teacher[i].clamp(0.0, MAX_WEIGHT);
                let err = v - returns[i];
                let sq = err * err;
                loss += w * hyper.vf_coeff * sq.min(hyper.vf_clip) / m;
                if w > 0.0 && sq < hyper.vf_clip {
                    let dv = (w * hyper.vf_coeff * 2.0 * err / m) as f32;
                    teacher.finetuned_critic.backward_with(obs, &mut ws, dv, &mut grads)?;
                }
            }
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("teacher critic loss in minibatch {minibatch}")));
            }
            teacher.critic_optimizer.step(&mut teacher.finetuned_critic, &grads)?;
            loss_sum += loss;
            count += 1;
            minibatch += 1;
        }
    }
    Ok(loss_sum / count.max(1) as f64)
}

/// Rollout hook implementing the introspective gate.
pub struct IntrospectiveAdvisor<'a> {
    pub teacher: &'a TeacherBundle,
    pub config: IntrospectionConfig,
    ws: NetWorkspace,
}

impl<'a> IntrospectiveAdvisor<'a> {
    pub fn new(teacher: &'a TeacherBundle, config: IntrospectionConfig) -> Self {
        Self {
            teacher,
            config,
            ws: NetWorkspace::new(),
        }
    }
}

impl Advisor for IntrospectiveAdvisor<'_> {
    fn decide(&mut self, obs: &Observation, global_step: u64, rng: &mut Rng) -> Result<AdviceDecision> {
        let policy = self.teacher.policy();
        policy.forward_with(obs.as_slice(), &mut self.ws)?;
        let dist = softmax(self.ws.logits())?;
        // The frozen policy's own value head is the source critic.
        let value_src = self.ws.value();
        let value_new = self.teacher.finetuned_critic.forward_with(obs.as_slice(), &mut self.ws)?;
        let gate = introspect(&self.config, global_step, value_new as f64, value_src as f64, rng);
        let teacher_action = if gate.evaluated { Some(sample_action(&dist, rng)) } else { None };
        Ok(AdviceDecision {
            advise: gate.issued,
            teacher_action,
            teacher_dist: Some(dist),
            value_src: Some(value_src),
            value_new: Some(value_new),
            record: gate.evaluated,
            keep_dist: false,
        })
    }
}
