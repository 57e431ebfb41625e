//! The per-seed training loop shared by every method.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use super::output::{CheckpointEntry, Heatmap, Layout, MetricsRow, RunManifest, RunWriter, CHECKPOINT_DIR, HEATMAP_FILE, MANIFEST_FILE};
use super::ExperimentConfig;
use crate::advising::{correct_from_batch, teacher_returns, update_teacher_critic, IntrospectiveAdvisor};
use crate::env::{GridWorld, TaskSpec};
use crate::error::{Error, Result};
use crate::nn::encode_layers;
use crate::policy::{ActorCritic, ActorCriticOptimizer, TeacherBundle};
use crate::ppo::{adapt_kl_coeff, collect_rollout, ppo_update, Advisor, DistillTerm, EnvPool, UpdateOptions};
use crate::rng::RngStreams;
use crate::transfer::{distill_coeff, init_student, shaped_rewards, AlwaysAdvisor, TeacherProbe, TransferKind};

/// Window of finished episodes behind the trailing return.
pub const TRAILING_EPISODES: usize = 100;

/// Everything a finished run hands back to its caller.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_id: String,
    pub seed: u64,
    pub method: TransferKind,
    pub run_dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub advice_issued: u64,
    pub heatmap: Heatmap,
    pub student: ActorCritic,
    pub teacher: Option<TeacherBundle>,
    /// Hash over every executed (action, reward, done) triple.
    pub trajectory_digest: String,
    pub checkpoints: Vec<CheckpointEntry>,
    pub wall_seconds: f64,
}

impl RunSummary {
    pub fn final_return(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.episode_return_mean)
    }

    /// Trailing return of the last row at or before `step`.
    pub fn return_at(&self, step: u64) -> Result<Option<f64>> {
        super::trailing_return_at(&self.rows, step)
    }
}

pub fn run_id(method: TransferKind, seed: u64) -> String {
    format!("{}-s{seed}", method.name())
}

struct Trailing {
    returns: VecDeque<f64>,
    lengths: VecDeque<usize>,
}

impl Trailing {
    fn push(&mut self, ret: f64, len: usize) {
        if self.returns.len() == TRAILING_EPISODES {
            self.returns.pop_front();
            self.lengths.pop_front();
        }
        self.returns.push_back(ret);
        self.lengths.push_back(len);
    }

    fn means(&self) -> (Option<f64>, Option<f64>) {
        if self.returns.is_empty() {
            return (None, None);
        }
        let n = self.returns.len() as f64;
        (
            Some(self.returns.iter().sum::<f64>() / n),
            Some(self.lengths.iter().sum::<usize>() as f64 / n),
        )
    }
}

fn layer_digests(ac: &ActorCritic) -> Vec<String> {
    ac.trunk
        .layers()
        .iter()
        .map(|l| hex::encode(Sha256::digest(encode_layers([l]))))
        .collect()
}

/// Train one student on `task` with `config.method`. The teacher, when
/// given, is consumed: its fine-tuned critic evolves with the run.
pub fn run_seed(
    config: &ExperimentConfig,
    task: &TaskSpec,
    seed: u64,
    mut teacher: Option<TeacherBundle>,
    run_dir: &Path,
) -> Result<RunSummary> {
    let started = Instant::now();
    let kind = config.method;
    let mode = config.mode();
    let hyper = &config.ppo;
    if kind.needs_teacher() && teacher.is_none() {
        return Err(Error::config("teacher_checkpoint", format!("method {} needs a teacher", kind.name())));
    }
    let world = GridWorld::new(*task)?;
    let layout = Layout::of(&world);
    let mut writer = RunWriter::create(run_dir, &layout)?;
    let mut streams = RngStreams::new(seed);
    let (mut student, frozen) = init_student(
        kind,
        teacher.as_ref().map(|t| t.policy()),
        world.observation_len(),
        &config.hidden,
        config.activation,
        &mut streams.init,
    )?;
    let mut optimizer = ActorCriticOptimizer::new(&student, hyper.learning_rate);
    let mut pool = EnvPool::new(world, hyper.num_envs, &mut streams.environment);
    let teacher_digest = teacher.as_ref().map(|t| t.policy().digest());

    let id = run_id(kind, seed);
    let iterations = config.total_steps / hyper.batch_size as u64;
    let mut trailing = Trailing {
        returns: VecDeque::new(),
        lengths: VecDeque::new(),
    };
    let mut heatmap = Heatmap::new(task.grid_side);
    let mut trajectory = Sha256::new();
    let mut rows = Vec::with_capacity(iterations as usize);
    let mut checkpoints = Vec::new();
    let mut options = UpdateOptions {
        frozen_trunk: frozen,
        distill: None,
    };
    let mut global_step = 0u64;
    let mut issued_total = 0u64;
    let mut student_hyper = hyper.clone();

    for iteration in 0..iterations {
        let mut batch = {
            let mut advisor: Option<Box<dyn Advisor + '_>> = match (kind, teacher.as_ref()) {
                (TransferKind::Iaa, Some(t)) => Some(Box::new(IntrospectiveAdvisor::new(t, mode.introspection))),
                (TransferKind::Aa | TransferKind::AaDecay, Some(t)) => Some(Box::new(AlwaysAdvisor::new(t, kind, mode.decay))),
                (TransferKind::DistillLoss, Some(t)) => Some(Box::new(TeacherProbe::new(t, true))),
                (TransferKind::DistillReward, Some(t)) => Some(Box::new(TeacherProbe::new(t, false))),
                _ => None,
            };
            collect_rollout(
                &mut pool,
                &student,
                advisor.as_deref_mut(),
                hyper.horizon,
                global_step,
                &mut streams,
            )?
        };

        let rewards = match (kind, teacher.as_ref()) {
            (TransferKind::DistillReward, Some(t)) => shaped_rewards(&batch, t.source_critic(), hyper.discount, mode.shaping_scale)?,
            _ => batch.rewards(),
        };
        batch.compute_gae_with_rewards(&rewards, |o| student.value(o), hyper)?;

        let (rho_teacher, rho_student) = if kind.advises() {
            correct_from_batch(&batch)?
        } else {
            (vec![1.0; batch.len()], vec![1.0; batch.len()])
        };

        let teacher_value_loss = match (kind, teacher.as_mut()) {
            (TransferKind::Iaa, Some(t)) => {
                let returns = teacher_returns(t, &batch, hyper)?;
                Some(update_teacher_critic(t, &batch, &returns, &rho_teacher, hyper, &mut streams.teacher_minibatch)?)
            }
            _ => None,
        };

        options.distill = (kind == TransferKind::DistillLoss).then(|| DistillTerm {
            coeff: distill_coeff(mode.distill_coeff, mode.decay, global_step),
        });
        let stats = ppo_update(
            &mut student,
            &batch,
            &rho_student,
            &student_hyper,
            &mut optimizer,
            &options,
            &mut streams.student_minibatch,
        )?;
        student_hyper.kl_coeff = adapt_kl_coeff(student_hyper.kl_coeff, stats.loss.kl, hyper.kl_target);

        for t in &batch.transitions {
            trajectory.update([t.action as u8, t.done as u8]);
            trajectory.update(t.reward.to_le_bytes());
        }
        for ep in &batch.episodes {
            trailing.push(ep.episode_return, ep.length);
        }
        let issued = batch.advice.iter().filter(|r| r.issued).count() as u64;
        issued_total += issued;
        heatmap.add(&batch.advice)?;
        writer.advice(&batch.advice)?;

        let gaps: Vec<f64> = batch
            .transitions
            .iter()
            .filter_map(|t| Some((t.value_new? - t.value_src?).abs() as f64))
            .collect();
        let mean_value_gap = (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64);

        let previous = global_step;
        global_step += batch.len() as u64;
        let (episode_return_mean, episode_len_mean) = trailing.means();
        let row = MetricsRow {
            run_id: id.clone(),
            seed,
            global_step,
            episode_return_mean,
            episode_len_mean,
            advice_issued_cum: issued_total,
            advice_rate_window: issued as f64 / batch.len() as f64,
            policy_loss: stats.loss.policy_loss,
            value_loss: stats.loss.value_loss,
            teacher_value_loss,
            entropy: stats.loss.entropy,
            mean_value_gap,
        };
        writer.metrics(&row)?;
        rows.push(row);

        let every = config.checkpoint_every;
        if every > 0 && global_step / every > previous / every {
            checkpoints.push(save_checkpoint(&student, run_dir, global_step)?);
        }
        if (iteration + 1) % 100 == 0 {
            log::info!(
                "{id}: step {global_step}, trailing return {:?}, advice {issued_total}",
                episode_return_mean
            );
        }
    }

    if checkpoints.last().map(|c| c.global_step) != Some(global_step) {
        checkpoints.push(save_checkpoint(&student, run_dir, global_step)?);
    }
    heatmap.write(&run_dir.join(HEATMAP_FILE))?;
    let trajectory_digest = hex::encode(trajectory.finalize());
    let wall_seconds = started.elapsed().as_secs_f64();
    let manifest = RunManifest {
        run_id: id.clone(),
        method: kind.name().to_string(),
        seed,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config: serde_json::to_value(config)?,
        iterations,
        total_steps: global_step,
        advice_issued: issued_total,
        final_return: rows.last().and_then(|r| r.episode_return_mean),
        teacher_digest,
        student_digest: student.digest(),
        trajectory_digest: trajectory_digest.clone(),
        checkpoints: checkpoints.clone(),
        wall_seconds,
    };
    let manifest_path = run_dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&manifest_path, e))?;

    Ok(RunSummary {
        run_id: id,
        seed,
        method: kind,
        run_dir: run_dir.to_path_buf(),
        rows,
        advice_issued: issued_total,
        heatmap,
        student,
        teacher,
        trajectory_digest,
        checkpoints,
        wall_seconds,
    })
}

fn save_checkpoint(student: &ActorCritic, run_dir: &Path, step: u64) -> Result<CheckpointEntry> {
    let rel = PathBuf::from(CHECKPOINT_DIR).join(format!("step-{step:09}.ckpt"));
    student.save(&run_dir.join(&rel))?;
    Ok(CheckpointEntry {
        global_step: step,
        path: rel,
        student_digest: student.digest(),
        trunk_layer_digests: layer_digests(student),
    })
}
