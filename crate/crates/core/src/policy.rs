//! Actor-critic networks, categorical action distributions and the frozen
//! teacher bundle.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{Observation, TaskSpec};
use crate::error::{Error, Result};
use crate::nn::{decode_layers, encode_layers, Activation, Layer, Mlp, MlpGrads, OptimizerState, Workspace};
use crate::rng::Rng;

pub const DEFAULT_HIDDEN: [usize; 2] = [128, 128];
pub const DEEP_HIDDEN: [usize; 4] = [256, 256, 256, 256];

const HIDDEN_GAIN: f64 = std::f64::consts::SQRT_2;
const POLICY_GAIN: f64 = 0.01;
const VALUE_GAIN: f64 = 1.0;

/// Softmax in double precision.
pub fn softmax(logits: &[f32]) -> Result<Vec<f64>> {
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numeric("policy logits".into()));
    }
    let max = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let exps: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Log-softmax in double precision.
pub fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let lse = logits.iter().map(|&l| (l as f64 - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&l| l as f64 - lse).collect()
}

pub fn entropy(dist: &[f64]) -> f64 {
    -dist.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Inverse-CDF draw over `dist` in index order. Returns the action and its
/// log-probability.
pub fn sample_action(dist: &[f64], rng: &mut Rng) -> (usize, f64) {
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut chosen = dist.len() - 1;
    for (i, &p) in dist.iter().enumerate() {
        cumulative += p;
        if u < cumulative {
            chosen = i;
            break;
        }
    }
    // Rounding can leave u above the final cumulative sum; fall back to the
    // last action with non-zero mass.
    if dist[chosen] == 0.0 {
        chosen = dist.iter().rposition(|&p| p > 0.0).unwrap_or(chosen);
    }
    (chosen, dist[chosen].ln())
}

/// Scratch buffers for training passes through an [`ActorCritic`] or
/// [`Critic`].
#[derive(Debug, Clone, Default)]
pub struct NetWorkspace {
    trunk: Workspace<f32>,
    policy: Workspace<f32>,
    value: Workspace<f32>,
    dh_policy: Vec<f32>,
    dh_value: Vec<f32>,
}

impl NetWorkspace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn logits(&self) -> &[f32] {
        self.policy.output()
    }

    pub fn value(&self) -> f32 {
        self.value.output()[0]
    }
}

/// Shared-trunk actor-critic.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic {
    pub trunk: Mlp,
    pub policy_head: Mlp,
    pub value_head: Mlp,
    pub action_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorCriticGrads {
    pub trunk: MlpGrads,
    pub policy_head: MlpGrads,
    pub value_head: MlpGrads,
}

impl ActorCriticGrads {
    pub fn zeros_like(ac: &ActorCritic) -> Self {
        Self {
            trunk: MlpGrads::zeros_like(&ac.trunk),
            policy_head: MlpGrads::zeros_like(&ac.policy_head),
            value_head: MlpGrads::zeros_like(&ac.value_head),
        }
    }

    pub fn fill_zero(&mut self) {
        self.trunk.fill_zero();
        self.policy_head.fill_zero();
        self.value_head.fill_zero();
    }

    pub fn scale(&mut self, factor: f32) {
        self.trunk.scale(factor);
        self.policy_head.scale(factor);
        self.value_head.scale(factor);
    }
}

/// Adam state for the three parts of an [`ActorCritic`].
#[derive(Debug, Clone, PartialEq)]
pub struct ActorCriticOptimizer {
    pub trunk: OptimizerState,
    pub policy_head: OptimizerState,
    pub value_head: OptimizerState,
}

impl ActorCriticOptimizer {
    pub fn new(ac: &ActorCritic, learning_rate: f64) -> Self {
        Self {
            trunk: OptimizerState::new(&ac.trunk, learning_rate),
            policy_head: OptimizerState::new(&ac.policy_head, learning_rate),
            value_head: OptimizerState::new(&ac.value_head, learning_rate),
        }
    }

    /// Apply one update; trunk layers flagged in `frozen_trunk` stay fixed.
    pub fn step(&mut self, ac: &mut ActorCritic, grads: &ActorCriticGrads, frozen_trunk: &[bool]) -> Result<()> {
        self.trunk
            .step_masked(&mut ac.trunk, &grads.trunk, frozen_trunk)
            .map_err(|e| annotate(e, "trunk"))?;
        self.policy_head
            .step(&mut ac.policy_head, &grads.policy_head)
            .map_err(|e| annotate(e, "policy head"))?;
        self.value_head
            .step(&mut ac.value_head, &grads.value_head)
            .map_err(|e| annotate(e, "value head"))
    }
}

fn annotate(e: Error, part: &str) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("{part} {msg}")),
        other => other,
    }
}

impl ActorCritic {
    pub fn new_random(obs_len: usize, hidden: &[usize], action_count: usize, activation: Activation, rng: &mut Rng) -> Self {
        let mut sizes = vec![obs_len];
        sizes.extend_from_slice(hidden);
        let width = *sizes.last().unwrap();
        let trunk = Mlp::orthogonal(&sizes, activation, true, HIDDEN_GAIN, HIDDEN_GAIN, rng);
        let policy_head = Mlp::orthogonal(&[width, action_count], activation, false, POLICY_GAIN, POLICY_GAIN, rng);
        let value_head = Mlp::orthogonal(&[width, 1], activation, false, VALUE_GAIN, VALUE_GAIN, rng);
        Self {
            trunk,
            policy_head,
            value_head,
            action_count,
        }
    }

    pub fn zeros(obs_len: usize, hidden: &[usize], action_count: usize, activation: Activation) -> Self {
        let mut sizes = vec![obs_len];
        sizes.extend_from_slice(hidden);
        let width = *sizes.last().unwrap();
        Self {
            trunk: Mlp::zeros(&sizes, activation, true),
            policy_head: Mlp::zeros(&[width, action_count], activation, false),
            value_head: Mlp::zeros(&[width, 1], activation, false),
            action_count,
        }
    }

    pub fn obs_len(&self) -> usize {
        self.trunk.input_len()
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.trunk.layer_sizes()[1..].to_vec()
    }

    /// Training forward pass; results stay in `ws`.
    pub fn forward_with(&self, obs: &[f32], ws: &mut NetWorkspace) -> Result<()> {
        self.trunk.forward_with(obs, &mut ws.trunk)?;
        let h = ws.trunk.output();
        self.policy_head.forward_with(h, &mut ws.policy)?;
        self.value_head.forward_with(h, &mut ws.value)
    }

    /// Accumulate gradients of `logits . dlogits + value * dvalue` after a
    /// matching [`ActorCritic::forward_with`].
    pub fn backward_with(
        &self,
        obs: &[f32],
        ws: &mut NetWorkspace,
        dlogits: &[f32],
        dvalue: f32,
        grads: &mut ActorCriticGrads,
    ) -> Result<()> {
        let width = self.trunk.output_len();
        let NetWorkspace {
            trunk,
            policy,
            value,
            dh_policy,
            dh_value,
        } = ws;
        dh_policy.resize(width, 0.0);
        dh_value.resize(width, 0.0);
        let h = trunk.output();
        self.policy_head
            .backward_with(h, policy, dlogits, &mut grads.policy_head, Some(dh_policy))?;
        self.value_head
            .backward_with(h, value, &[dvalue], &mut grads.value_head, Some(dh_value))?;
        for (a, b) in dh_policy.iter_mut().zip(dh_value.iter()) {
            *a += *b;
        }
        self.trunk.backward_with(obs, trunk, dh_policy, &mut grads.trunk, None)
    }

    /// Logits and value at `obs`.
    pub fn forward(&self, obs: &Observation) -> Result<(Vec<f32>, f32)> {
        let mut ws = NetWorkspace::new();
        self.forward_with(obs.as_slice(), &mut ws)?;
        Ok((ws.logits().to_vec(), ws.value()))
    }

    pub fn action_distribution(&self, obs: &Observation) -> Result<Vec<f64>> {
        let (logits, _) = self.forward(obs)?;
        softmax(&logits)
    }

    pub fn value(&self, obs: &Observation) -> Result<f32> {
        Ok(self.forward(obs)?.1)
    }

    /// Log-probability of `action`, policy entropy and value at `obs`.
    pub fn evaluate(&self, obs: &Observation, action: usize) -> Result<(f64, f64, f32)> {
        let (logits, value) = self.forward(obs)?;
        let log_probs = log_softmax(&logits);
        let dist = softmax(&logits)?;
        let action_lp = *log_probs.get(action).ok_or_else(|| Error::Usage(format!("action {action} out of range")))?;
        Ok((action_lp, entropy(&dist), value))
    }

    /// Critic sharing this network's trunk and value head.
    pub fn critic(&self) -> Critic {
        Critic {
            trunk: self.trunk.clone(),
            value_head: self.value_head.clone(),
        }
    }

    fn all_layers(&self) -> impl Iterator<Item = &Layer<f32>> {
        self.trunk
            .layers()
            .iter()
            .chain(self.policy_head.layers())
            .chain(self.value_head.layers())
    }

    /// Checkpoint bytes: trunk layers, then the policy head, then the value head.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        encode_layers(self.all_layers())
    }

    pub fn from_checkpoint(bytes: &[u8], activation: Activation, origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint {
            path: origin.to_path_buf(),
            reason,
        };
        let mut layers = decode_layers(bytes).map_err(bad)?;
        if layers.len() < 3 {
            return Err(bad(format!("{} layers, need trunk + two heads", layers.len())));
        }
        let value = layers.pop().unwrap();
        let policy = layers.pop().unwrap();
        if value.outputs != 1 {
            return Err(bad("value head must have one output".into()));
        }
        let action_count = policy.outputs;
        let to_err = |e: Error| bad(e.to_string());
        Ok(Self {
            trunk: Mlp::from_layers(layers, activation, true).map_err(to_err)?,
            policy_head: Mlp::from_layers(vec![policy], activation, false).map_err(to_err)?,
            value_head: Mlp::from_layers(vec![value], activation, false).map_err(to_err)?,
            action_count,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, activation: Activation) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&bytes, activation, path)
    }

    /// SHA-256 of the checkpoint encoding.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_checkpoint()))
    }
}

/// A state-value network: trunk plus value head.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub trunk: Mlp,
    pub value_head: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticGrads {
    pub trunk: MlpGrads,
    pub value_head: MlpGrads,
}

impl CriticGrads {
    pub fn zeros_like(c: &Critic) -> Self {
        Self {
            trunk: MlpGrads::zeros_like(&c.trunk),
            value_head: MlpGrads::zeros_like(&c.value_head),
        }
    }

    pub fn fill_zero(&mut self) {
        self.trunk.fill_zero();
        self.value_head.fill_zero();
    }

    pub fn scale(&mut self, factor: f32) {
        self.trunk.scale(factor);
        self.value_head.scale(factor);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticOptimizer {
    pub trunk: OptimizerState,
    pub value_head: OptimizerState,
}

impl CriticOptimizer {
    pub fn new(c: &Critic, learning_rate: f64) -> Self {
        Self {
            trunk: OptimizerState::new(&c.trunk, learning_rate),
            value_head: OptimizerState::new(&c.value_head, learning_rate),
        }
    }

    pub fn step(&mut self, c: &mut Critic, grads: &CriticGrads) -> Result<()> {
        self.trunk
            .step(&mut c.trunk, &grads.trunk)
            .map_err(|e| annotate(e, "critic trunk"))?;
        self.value_head
            .step(&mut c.value_head, &grads.value_head)
            .map_err(|e| annotate(e, "critic value head"))
    }
}

impl Critic {
    pub fn forward_with(&self, obs: &[f32], ws: &mut NetWorkspace) -> Result<f32> {
        self.trunk.forward_with(obs, &mut ws.trunk)?;
        self.value_head.forward_with(ws.trunk.output(), &mut ws.value)?;
        Ok(ws.value())
    }

    pub fn backward_with(&self, obs: &[f32], ws: &mut NetWorkspace, dvalue: f32, grads: &mut CriticGrads) -> Result<()> {
        let width = self.trunk.output_len();
        let NetWorkspace {
            trunk, value, dh_value, ..
        } = ws;
        dh_value.resize(width, 0.0);
        self.value_head
            .backward_with(trunk.output(), value, &[dvalue], &mut grads.value_head, Some(dh_value))?;
        self.trunk.backward_with(obs, trunk, dh_value, &mut grads.trunk, None)
    }

    pub fn value(&self, obs: &Observation) -> Result<f32> {
        self.forward_with(obs.as_slice(), &mut NetWorkspace::new())
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        encode_layers(self.trunk.layers().iter().chain(self.value_head.layers()))
    }

    pub fn from_checkpoint(bytes: &[u8], activation: Activation, origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint {
            path: origin.to_path_buf(),
            reason,
        };
        let mut layers = decode_layers(bytes).map_err(bad)?;
        if layers.len() < 2 {
            return Err(bad("critic needs a trunk and a value head".into()));
        }
        let value = layers.pop().unwrap();
        let to_err = |e: Error| bad(e.to_string());
        Ok(Self {
            trunk: Mlp::from_layers(layers, activation, true).map_err(to_err)?,
            value_head: Mlp::from_layers(vec![value], activation, false).map_err(to_err)?,
        })
    }
}

/// Metadata stored next to a teacher's checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherHeader {
    pub source_task: TaskSpec,
    pub training_seed: u64,
    pub activation: Activation,
    pub hidden: Vec<usize>,
    pub final_trailing_return: f64,
}

pub const TEACHER_HEADER: &str = "teacher.json";
pub const TEACHER_POLICY: &str = "policy.ckpt";
pub const TEACHER_CRITIC: &str = "critic.ckpt";

/// Frozen source-task policy (with its critic `V_src`) plus a trainable copy
/// of that critic (`V_new`) fine-tuned on target-task returns.
#[derive(Debug, Clone)]
pub struct TeacherBundle {
    policy: ActorCritic,
    source_critic: Critic,
    pub finetuned_critic: Critic,
    pub critic_optimizer: CriticOptimizer,
}

impl TeacherBundle {
    pub fn new(policy: ActorCritic, learning_rate: f64) -> Self {
        let source_critic = policy.critic();
        let finetuned_critic = source_critic.clone();
        let critic_optimizer = CriticOptimizer::new(&finetuned_critic, learning_rate);
        Self {
            policy,
            source_critic,
            finetuned_critic,
            critic_optimizer,
        }
    }

    pub fn policy(&self) -> &ActorCritic {
        &self.policy
    }

    /// `V_src`: the frozen source-task critic.
    pub fn source_critic(&self) -> &Critic {
        &self.source_critic
    }

    /// Write the frozen policy, the fine-tuned critic and a header to `dir`.
    pub fn save(&self, dir: &Path, header: &TeacherHeader) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.policy.save(&dir.join(TEACHER_POLICY))?;
        let critic_path = dir.join(TEACHER_CRITIC);
        fs::write(&critic_path, self.finetuned_critic.to_checkpoint()).map_err(|e| Error::io(&critic_path, e))?;
        let header_path = dir.join(TEACHER_HEADER);
        fs::write(&header_path, serde_json::to_vec_pretty(header)?).map_err(|e| Error::io(&header_path, e))
    }

    /// Load a bundle written by [`TeacherBundle::save`]. The fine-tuned
    /// critic restarts from the stored critic with a fresh optimizer.
    pub fn load(dir: &Path, learning_rate: f64) -> Result<(Self, TeacherHeader)> {
        let header_path = resolve_teacher_dir(dir).join(TEACHER_HEADER);
        let dir = header_path.parent().unwrap().to_path_buf();
        let raw = fs::read(&header_path).map_err(|e| Error::io(&header_path, e))?;
        let header: TeacherHeader = serde_json::from_slice(&raw)?;
        let policy = ActorCritic::load(&dir.join(TEACHER_POLICY), header.activation)?;
        let critic_path = dir.join(TEACHER_CRITIC);
        let critic_bytes = fs::read(&critic_path).map_err(|e| Error::io(&critic_path, e))?;
        let critic = Critic::from_checkpoint(&critic_bytes, header.activation, &critic_path)?;
        let mut bundle = Self::new(policy, learning_rate);
        bundle.finetuned_critic = critic;
        bundle.critic_optimizer = CriticOptimizer::new(&bundle.finetuned_critic, learning_rate);
        Ok((bundle, header))
    }
}

/// Accept either a bundle directory or the path of its header file.
fn resolve_teacher_dir(path: &Path) -> PathBuf {
    if path.is_file() {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        path.to_path_buf()
    }
}
