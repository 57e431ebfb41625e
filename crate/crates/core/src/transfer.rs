//! Comparison methods: weight transfer, always-advise and distillation.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::advising::IntrospectionConfig;
use crate::env::Observation;
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::policy::{sample_action, softmax, ActorCritic, Critic, NetWorkspace, TeacherBundle};
use crate::ppo::{AdviceDecision, Advisor, RolloutBatch};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferKind {
    Baseline,
    FinetuneAll,
    FinetuneInput,
    FrozenInput,
    Aa,
    AaDecay,
    DistillLoss,
    DistillReward,
    Iaa,
}

impl TransferKind {
    pub const ALL: [TransferKind; 9] = [
        TransferKind::Baseline,
        TransferKind::FinetuneAll,
        TransferKind::FinetuneInput,
        TransferKind::FrozenInput,
        TransferKind::Aa,
        TransferKind::AaDecay,
        TransferKind::DistillLoss,
        TransferKind::DistillReward,
        TransferKind::Iaa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransferKind::Baseline => "baseline",
            TransferKind::FinetuneAll => "finetune_all",
            TransferKind::FinetuneInput => "finetune_input",
            TransferKind::FrozenInput => "frozen_input",
            TransferKind::Aa => "aa",
            TransferKind::AaDecay => "aa_decay",
            TransferKind::DistillLoss => "distill_loss",
            TransferKind::DistillReward => "distill_reward",
            TransferKind::Iaa => "iaa",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        let norm = name.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::config("method", format!("unknown method {name:?}")))
    }

    pub fn needs_teacher(self) -> bool {
        self != TransferKind::Baseline
    }

    /// Methods whose rollouts mix teacher and student actions.
    pub fn advises(self) -> bool {
        matches!(self, TransferKind::Aa | TransferKind::AaDecay | TransferKind::Iaa)
    }
}

/// A method together with its settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferMode {
    pub kind: TransferKind,
    /// Decay for `aa_decay` and the distillation coefficient schedule.
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_one")]
    pub distill_coeff: f64,
    #[serde(default = "default_one")]
    pub shaping_scale: f64,
    #[serde(default)]
    pub introspection: IntrospectionConfig,
}

fn default_decay() -> f64 {
    0.99999
}

fn default_one() -> f64 {
    1.0
}

impl TransferMode {
    pub fn new(kind: TransferKind) -> Self {
        Self {
            kind,
            decay: default_decay(),
            distill_coeff: 1.0,
            shaping_scale: 1.0,
            introspection: IntrospectionConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.decay) {
            return Err(Error::config("decay", format!("must lie in [0, 1), got {}", self.decay)));
        }
        for (field, v) in [("distill_coeff", self.distill_coeff), ("shaping_scale", self.shaping_scale)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(field, format!("must be finite and >= 0, got {v}")));
            }
        }
        self.introspection.validate()
    }
}

/// Build the student network and its frozen-trunk mask. The random draw is
/// the same for every method, so weight copies replace parts of the
/// baseline initialisation.
pub fn init_student(
    kind: TransferKind,
    teacher: Option<&ActorCritic>,
    obs_len: usize,
    hidden: &[usize],
    activation: Activation,
    rng: &mut Rng,
) -> Result<(ActorCritic, Vec<bool>)> {
    let mut student = ActorCritic::new_random(obs_len, hidden, 5, activation, rng);
    let layers = student.trunk.layers().len();
    let mut frozen = vec![false; layers];
    let copy = match kind {
        TransferKind::FinetuneAll => CopyScope::All,
        TransferKind::FinetuneInput => CopyScope::Input,
        TransferKind::FrozenInput => {
            frozen[0] = true;
            CopyScope::Input
        }
        _ => CopyScope::None,
    };
    if copy != CopyScope::None {
        let t = teacher.ok_or_else(|| Error::config("teacher_checkpoint", "weight transfer needs a teacher"))?;
        if copy == CopyScope::All {
            if t.trunk.layer_sizes() != student.trunk.layer_sizes() || t.action_count != student.action_count {
                return Err(Error::config(
                    "hidden",
                    format!("teacher trunk {:?} differs from student {:?}", t.trunk.layer_sizes(), student.trunk.layer_sizes()),
                ));
            }
            student = t.clone();
        } else {
            let (tl, sl) = (&t.trunk.layers()[0], &student.trunk.layers()[0]);
            if (tl.inputs, tl.outputs) != (sl.inputs, sl.outputs) {
                return Err(Error::config(
                    "hidden",
                    format!("teacher input layer {}x{} differs from student {}x{}", tl.inputs, tl.outputs, sl.inputs, sl.outputs),
                ));
            }
            student.trunk.layers_mut()[0] = tl.clone();
        }
    }
    Ok((student, frozen))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CopyScope {
    None,
    Input,
    All,
}

/// Always-advise gate. The decaying variant draws `Bernoulli(decay^t)`.
pub fn aa_decide(kind: TransferKind, decay: f64, global_step: u64, rng: &mut Rng) -> bool {
    match kind {
        TransferKind::AaDecay => rng.random::<f64>() < decay.powf(global_step as f64),
        _ => true,
    }
}

/// `coeff * H(teacher, student)`.
pub fn distill_loss_term(student_dist: &[f64], teacher_dist: &[f64], coeff: f64) -> f64 {
    -coeff
        * teacher_dist
            .iter()
            .zip(student_dist)
            .filter(|(pt, _)| **pt > 0.0)
            .map(|(pt, ps)| pt * ps.ln())
            .sum::<f64>()
}

pub fn distill_coeff(c0: f64, decay: f64, global_step: u64) -> f64 {
    c0 * decay.powf(global_step as f64)
}

pub fn shaping_reward(teacher_value_next: f64, teacher_value_curr: f64, discount: f64, scale: f64) -> f64 {
    scale * (discount * teacher_value_next - teacher_value_curr)
}

/// Environment rewards plus potential-based shaping from the teacher critic.
/// Terminal transitions use a zero potential for the next state.
pub fn shaped_rewards(batch: &RolloutBatch, critic: &Critic, discount: f64, scale: f64) -> Result<Vec<f64>> {
    let mut ws = NetWorkspace::new();
    let mut value_at = |obs: &Observation, cached: Option<f32>| -> Result<f64> {
        match cached {
            Some(v) => Ok(v as f64),
            None => critic.forward_with(obs.as_slice(), &mut ws).map(f64::from),
        }
    };
    let n = batch.len();
    let mut out = Vec::with_capacity(n);
    for (i, t) in batch.transitions.iter().enumerate() {
        let curr = value_at(&t.obs, t.value_src)?;
        let next = if t.done {
            0.0
        } else if i + batch.num_envs < n {
            let nt = &batch.transitions[i + batch.num_envs];
            value_at(&nt.obs, nt.value_src)?
        } else {
            value_at(&t.next_obs, None)?
        };
        out.push(t.reward + shaping_reward(next, curr, discount, scale));
    }
    Ok(out)
}

/// Rollout hook for the always-advise baselines.
pub struct AlwaysAdvisor<'a> {
    pub teacher: &'a TeacherBundle,
    pub kind: TransferKind,
    pub decay: f64,
    ws: NetWorkspace,
}

impl<'a> AlwaysAdvisor<'a> {
    pub fn new(teacher: &'a TeacherBundle, kind: TransferKind, decay: f64) -> Self {
        Self {
            teacher,
            kind,
            decay,
            ws: NetWorkspace::new(),
        }
    }
}

impl Advisor for AlwaysAdvisor<'_> {
    fn decide(&mut self, obs: &Observation, global_step: u64, rng: &mut Rng) -> Result<AdviceDecision> {
        self.teacher.policy().forward_with(obs.as_slice(), &mut self.ws)?;
        let dist = softmax(self.ws.logits())?;
        let advise = aa_decide(self.kind, self.decay, global_step, rng);
        let teacher_action = if advise { Some(sample_action(&dist, rng)) } else { None };
        Ok(AdviceDecision {
            advise,
            teacher_action,
            teacher_dist: Some(dist),
            value_src: Some(self.ws.value()),
            value_new: None,
            record: advise,
            keep_dist: false,
        })
    }
}

/// Rollout hook that never advises but exposes the teacher's distribution
/// and critic to the distillation losses.
pub struct TeacherProbe<'a> {
    pub teacher: &'a TeacherBundle,
    pub keep_dist: bool,
    ws: NetWorkspace,
}

impl<'a> TeacherProbe<'a> {
    pub fn new(teacher: &'a TeacherBundle, keep_dist: bool) -> Self {
        Self {
            teacher,
            keep_dist,
            ws: NetWorkspace::new(),
        }
    }
}

impl Advisor for TeacherProbe<'_> {
    fn decide(&mut self, obs: &Observation, _global_step: u64, _rng: &mut Rng) -> Result<AdviceDecision> {
        self.teacher.policy().forward_with(obs.as_slice(), &mut self.ws)?;
        Ok(AdviceDecision {
            teacher_dist: Some(softmax(self.ws.logits())?),
            value_src: Some(self.ws.value()),
            keep_dist: self.keep_dist,
            ..Default::default()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::MlpGrads;
    use crate::policy::{entropy, ActorCriticGrads, ActorCriticOptimizer};
    use crate::rng::{stream_rng, Stream};

    fn teacher_net(seed: u64) -> ActorCritic {
        ActorCritic::new_random(30, &[8, 8], 5, Activation::Tanh, &mut stream_rng(seed, Stream::Init))
    }

    #[test]
    fn method_names_round_trip() {
        for k in TransferKind::ALL {
            assert_eq!(TransferKind::parse(k.name()).unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
        assert_eq!(TransferKind::parse("AA-Decay").unwrap(), TransferKind::AaDecay);
        assert!(TransferKind::parse("progressive").is_err());
    }

    #[test]
    fn finetune_all_copies_everything() {
        let t = teacher_net(1);
        let (s, frozen) = init_student(TransferKind::FinetuneAll, Some(&t), 30, &[8, 8], Activation::Tanh, &mut stream_rng(2, Stream::Init)).unwrap();
        assert_eq!(s.digest(), t.digest());
        assert!(frozen.iter().all(|f| !f));
    }

    #[test]
    fn finetune_input_copies_first_layer_only() {
        let t = teacher_net(1);
        let (s, frozen) = init_student(TransferKind::FinetuneInput, Some(&t), 30, &[8, 8], Activation::Tanh, &mut stream_rng(2, Stream::Init)).unwrap();
        assert_eq!(s.trunk.layers()[0], t.trunk.layers()[0]);
        assert_ne!(s.trunk.layers()[1], t.trunk.layers()[1]);
        assert_ne!(s.policy_head, t.policy_head);
        assert!(frozen.iter().all(|f| !f));
    }

    #[test]
    fn baseline_ignores_teacher() {
        let t = teacher_net(1);
        let (a, _) = init_student(TransferKind::Baseline, Some(&t), 30, &[8, 8], Activation::Tanh, &mut stream_rng(2, Stream::Init)).unwrap();
        let (b, _) = init_student(TransferKind::Baseline, None, 30, &[8, 8], Activation::Tanh, &mut stream_rng(2, Stream::Init)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_input_survives_updates() {
        let t = teacher_net(1);
        let (mut s, frozen) = init_student(TransferKind::FrozenInput, Some(&t), 30, &[8, 8], Activation::Tanh, &mut stream_rng(2, Stream::Init)).unwrap();
        assert_eq!(frozen, vec![true, false]);
        let first = s.trunk.layers()[0].clone();
        let second = s.trunk.layers()[1].clone();
        let mut opt = ActorCriticOptimizer::new(&s, 0.01);
        let mut rng = stream_rng(3, Stream::StudentMinibatch);
        for _ in 0..10 {
            let obs: Vec<f32> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut grads = ActorCriticGrads::zeros_like(&s);
            let mut ws = NetWorkspace::new();
            s.forward_with(&obs, &mut ws).unwrap();
            s.backward_with(&obs, &mut ws, &[1.0, -1.0, 0.5, 0.0, 0.2], 1.0, &mut grads).unwrap();
            assert!(!MlpGrads::is_all_zero(&grads.trunk));
            opt.step(&mut s, &grads, &frozen).unwrap();
        }
        assert_eq!(s.trunk.layers()[0], first);
        assert_ne!(s.trunk.layers()[1], second);
    }

    #[test]
    fn weight_transfer_requires_compatible_teacher() {
        let t = teacher_net(1);
        let err = init_student(TransferKind::FinetuneAll, Some(&t), 30, &[16, 8], Activation::Tanh, &mut stream_rng(2, Stream::Init));
        assert!(matches!(err, Err(Error::Config { .. })));
        let err = init_student(TransferKind::FrozenInput, None, 30, &[8, 8], Activation::Tanh, &mut stream_rng(2, Stream::Init));
        assert!(matches!(err, Err(Error::Config { .. })));
    }

    #[test]
    fn always_advise_gate() {
        let mut rng = stream_rng(4, Stream::Advising);
        assert!((0..1000).all(|t| aa_decide(TransferKind::Aa, 0.5, t * 1000, &mut rng)));
        assert!(aa_decide(TransferKind::AaDecay, 0.99999, 0, &mut rng));
    }

    #[test]
    fn decayed_rate_at_half_a_million_steps() {
        let expected = 0.99999f64.powi(500_000);
        assert!((expected - 0.0067).abs() < 1e-4);
        let mut rng = stream_rng(5, Stream::Advising);
        let trials = 100_000;
        let hits = (0..trials)
            .filter(|_| aa_decide(TransferKind::AaDecay, 0.99999, 500_000, &mut rng))
            .count();
        assert!((hits as f64 / trials as f64 - 0.0067).abs() <= 0.002);
    }

    #[test]
    fn distill_identities() {
        let t = [0.1, 0.2, 0.3, 0.25, 0.15];
        assert!((distill_loss_term(&t, &t, 0.7) - 0.7 * entropy(&t)).abs() < 1e-12);
        assert_eq!(distill_loss_term(&t, &t, 0.0), 0.0);
        let onehot = [0.0, 0.0, 1.0, 0.0, 0.0];
        assert!((distill_loss_term(&t, &onehot, 2.0) + 2.0 * 0.3f64.ln()).abs() < 1e-12);
        assert!((distill_coeff(1.0, 0.99999, 100_000) - 0.99999f64.powi(100_000)).abs() < 1e-12);
    }

    #[test]
    fn shaping_examples() {
        assert!((shaping_reward(0.5, 0.5, 0.99, 1.0) - 0.5 * (0.99 - 1.0)).abs() < 1e-12);
        assert_eq!(shaping_reward(0.3, 0.8, 0.99, 0.0), 0.0);
        let values = [0.1, 0.4, -0.2, 0.9, 0.3, 0.7];
        let total: f64 = values.windows(2).map(|w| shaping_reward(w[1], w[0], 1.0, 1.5)).sum();
        assert!((total - 1.5 * (values[5] - values[0])).abs() < 1e-12);
    }

    #[test]
    fn mode_validation() {
        TransferMode::new(TransferKind::Iaa).validate().unwrap();
        let mut m = TransferMode::new(TransferKind::AaDecay);
        m.decay = 1.0;
        assert!(m.validate().is_err());
    }
}
